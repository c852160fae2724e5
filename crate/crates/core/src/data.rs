//! Seeded synthetic multimodal datasets.
//!
//! Every class owns one spherical Gaussian cluster per modality. The centroid
//! of class `c` in modality `m` sits at distance `radius · D[m][c]` from the
//! origin along a seeded direction; when the modality has at least `C`
//! dimensions the class directions are orthonormal. `D` therefore controls how
//! well each modality separates each class.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{config_err, contract_err, Error, Result};
use crate::math::Tensor;
use crate::rng::{self, Rng};

/// Fraction of every class held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Samples per class in the presets: 100 train + 25 test.
pub const PRESET_PER_CLASS: usize = 125;
pub const PRESET_DIM: usize = 16;
pub const PRESET_MODALITIES: usize = 3;
pub const PRESET_CLASSES: usize = 6;

/// Modality given uniformly higher separability by [`fast_modality_preset`].
pub const FAST_MODALITY: usize = 2;

/// Centroid distance scale shared by both presets.
pub const PRESET_RADIUS: f64 = 4.0;
pub const PRESET_NOISE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SeparabilityProfile {
    /// `M×C`, entries in `[0, 1]`.
    pub separation: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    /// Centroid distance from the origin when `separation` is 1.
    pub radius: f64,
}

impl SeparabilityProfile {
    pub fn uniform(m: usize, c: usize, d: f64, noise_sigma: f64, radius: f64) -> Self {
        Self {
            separation: vec![vec![d; c]; m],
            noise_sigma,
            radius,
        }
    }

    pub fn validate(&self, m: usize, c: usize) -> Result<()> {
        if self.separation.len() != m || self.separation.iter().any(|r| r.len() != c) {
            return config_err(format!("separation matrix must be {m}×{c}"));
        }
        if self
            .separation
            .iter()
            .flatten()
            .any(|d| !(0.0..=1.0).contains(d))
        {
            return config_err("separation entries must lie in [0, 1]");
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return config_err(format!("noise sigma must be positive, got {}", self.noise_sigma));
        }
        if !(self.radius >= 0.0) || !self.radius.is_finite() {
            return config_err(format!("radius must be non-negative, got {}", self.radius));
        }
        Ok(())
    }
}

/// Which partition of a dataset to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Inputs of a minibatch, one `B×dim` tensor per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    num_classes: usize,
    dims: Vec<usize>,
    /// Per modality, row-major `N×dims[m]`.
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl MultimodalDataset {
    /// Builds a dataset after checking every invariant.
    pub fn new(
        num_classes: usize,
        dims: Vec<usize>,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            num_classes,
            dims,
            features,
            labels,
            train,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.dims.is_empty() || self.dims.contains(&0) {
            return config_err(format!("invalid modality dims {:?}", self.dims));
        }
        if self.num_classes < 2 {
            return config_err("need at least 2 classes");
        }
        if n == 0 {
            return config_err("dataset has no samples");
        }
        if self.features.len() != self.dims.len()
            || self
                .features
                .iter()
                .zip(&self.dims)
                .any(|(f, d)| f.len() != n * d)
        {
            return config_err("feature storage does not match N×dims");
        }
        if let Some(y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return config_err(format!("label {y} out of range"));
        }
        if self.train.is_empty() || self.test.is_empty() {
            return config_err("train and test splits must both be nonempty");
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n || seen[i] {
                return config_err(format!("split index {i} out of range or repeated"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return config_err("splits do not cover every sample");
        }
        Ok(())
    }

    pub fn num_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Feature vector of sample `i` in modality `m`.
    pub fn features(&self, m: usize, i: usize) -> &[f64] {
        let d = self.dims[m];
        &self.features[m][i * d..(i + 1) * d]
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return contract_err("empty batch");
        }
        let inputs = (0..self.num_modalities())
            .map(|m| {
                let mut v = Vec::with_capacity(indices.len() * self.dims[m]);
                for &i in indices {
                    v.extend_from_slice(self.features(m, i));
                }
                Tensor::matrix(indices.len(), self.dims[m], v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn split_batch(&self, split: Split) -> Result<Batch> {
        self.batch(self.indices(split))
    }

    /// Copy with labels permuted by a seeded shuffle.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.labels.shuffle(&mut rng::stream(seed, 0));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION)?;
        w.u32(self.num_modalities())?;
        w.u32(self.num_classes)?;
        w.u32(self.len())?;
        for &d in &self.dims {
            w.u32(d)?;
        }
        for i in 0..self.len() {
            w.u32(self.labels[i])?;
            for m in 0..self.num_modalities() {
                w.f64s(self.features(m, i));
            }
        }
        for split in [&self.train, &self.test] {
            w.u32(split.len())?;
            for &i in split {
                w.u32(i)?;
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "dataset");
        r.expect_magic(DATASET_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return r.fail_at(at, format!("unsupported version {version}"));
        }
        let at = r.offset();
        let m = r.u32()?;
        let c = r.u32()?;
        let n = r.u32()?;
        if m == 0 || c < 2 || n == 0 {
            return r.fail_at(at, format!("header M={m} C={c} N={n} describes no usable data"));
        }
        let mut dims = Vec::with_capacity(m.min(1024));
        for _ in 0..m {
            let at = r.offset();
            let d = r.u32()?;
            if d == 0 {
                return r.fail_at(at, "zero modality dimension");
            }
            dims.push(d);
        }
        let mut features: Vec<Vec<f64>> = dims.iter().map(|_| Vec::new()).collect();
        let mut labels = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let at = r.offset();
            let y = r.u32()?;
            if y >= c {
                return r.fail_at(at, format!("label {y} out of range for {c} classes"));
            }
            labels.push(y);
            for (store, &d) in features.iter_mut().zip(&dims) {
                store.extend(r.f64s(d)?);
            }
        }
        let read_split = |r: &mut ByteReader| -> Result<Vec<usize>> {
            let len = r.u32()?;
            (0..len).map(|_| r.u32()).collect()
        };
        let train = read_split(&mut r)?;
        let test = read_split(&mut r)?;
        r.finish()?;
        let end = r.offset();
        Self::new(c, dims, features, labels, train, test).map_err(|e| Error::Decode {
            what: "dataset",
            offset: end,
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const DATASET_MAGIC: &[u8; 4] = b"MMDS";
const DATASET_VERSION: usize = 1;

fn gaussian_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Unit class directions for one modality; orthonormal when `d >= c`.
fn class_directions(rng: &mut Rng, d: usize, c: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(c);
    for _ in 0..c {
        let mut v = gaussian_vec(rng, d);
        if dirs.len() < d {
            for u in &dirs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        dirs.push(v);
    }
    dirs
}

/// Class centroids `[m][c] -> point` used by [`generate`].
pub fn class_centroids(
    num_classes: usize,
    dims: &[usize],
    profile: &SeparabilityProfile,
    seed: u64,
) -> Vec<Vec<Vec<f64>>> {
    let mut rng = rng::stream(seed, 0);
    dims.iter()
        .enumerate()
        .map(|(m, &d)| {
            class_directions(&mut rng, d, num_classes)
                .into_iter()
                .enumerate()
                .map(|(c, u)| {
                    let r = profile.radius * profile.separation[m][c];
                    u.into_iter().map(|x| x * r).collect()
                })
                .collect()
        })
        .collect()
}

/// Draws `n_per_class` samples of every class and a stratified 80/20 split.
pub fn generate(
    num_modalities: usize,
    num_classes: usize,
    dims: &[usize],
    n_per_class: usize,
    profile: &SeparabilityProfile,
    seed: u64,
) -> Result<MultimodalDataset> {
    if num_modalities == 0 || n_per_class == 0 {
        return config_err("modality count and samples per class must be positive");
    }
    if num_classes < 2 {
        return config_err(format!("need at least 2 classes, got {num_classes}"));
    }
    if dims.len() != num_modalities || dims.contains(&0) {
        return config_err(format!(
            "need {num_modalities} positive modality dims, got {dims:?}"
        ));
    }
    profile.validate(num_modalities, num_classes)?;

    let centroids = class_centroids(num_classes, dims, profile, seed);
    let n = num_classes * n_per_class;
    let mut rng = rng::stream(seed, 1);
    let mut features: Vec<Vec<f64>> = dims.iter().map(|&d| Vec::with_capacity(n * d)).collect();
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for _ in 0..n_per_class {
            labels.push(c);
            for (m, &d) in dims.iter().enumerate() {
                let noise = gaussian_vec(&mut rng, d);
                features[m].extend(
                    centroids[m][c]
                        .iter()
                        .zip(noise)
                        .map(|(mu, z)| mu + profile.noise_sigma * z),
                );
            }
        }
    }

    let n_test = (n_per_class as f64 * TEST_FRACTION).round() as usize;
    let mut split_rng = rng::stream(seed, 2);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (c * n_per_class..(c + 1) * n_per_class).collect();
        idx.shuffle(&mut split_rng);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    MultimodalDataset::new(num_classes, dims.to_vec(), features, labels, train, test)
}

/// Classes for which modality `m` is the strong one in
/// [`complementary_preset`].
pub fn complementary_classes(m: usize) -> [usize; 2] {
    [2 * m, 2 * m + 1]
}

pub fn complementary_profile() -> SeparabilityProfile {
    let mut separation = vec![vec![0.25; PRESET_CLASSES]; PRESET_MODALITIES];
    for (m, row) in separation.iter_mut().enumerate() {
        for c in complementary_classes(m) {
            row[c] = 1.0;
        }
    }
    SeparabilityProfile {
        separation,
        noise_sigma: PRESET_NOISE,
        radius: PRESET_RADIUS,
    }
}

pub fn fast_modality_profile() -> SeparabilityProfile {
    let mut separation = vec![vec![0.5; PRESET_CLASSES]; PRESET_MODALITIES];
    separation[FAST_MODALITY] = vec![0.9; PRESET_CLASSES];
    SeparabilityProfile {
        separation,
        noise_sigma: PRESET_NOISE,
        radius: PRESET_RADIUS,
    }
}

/// Three modalities, six classes; each modality is strong on exactly two
/// classes and weak on the rest.
pub fn complementary_preset(seed: u64) -> Result<MultimodalDataset> {
    generate(
        PRESET_MODALITIES,
        PRESET_CLASSES,
        &[PRESET_DIM; PRESET_MODALITIES],
        PRESET_PER_CLASS,
        &complementary_profile(),
        seed,
    )
}

/// Three modalities, six classes; [`FAST_MODALITY`] separates every class
/// better than the others.
pub fn fast_modality_preset(seed: u64) -> Result<MultimodalDataset> {
    generate(
        PRESET_MODALITIES,
        PRESET_CLASSES,
        &[PRESET_DIM; PRESET_MODALITIES],
        PRESET_PER_CLASS,
        &fast_modality_profile(),
        seed,
    )
}
