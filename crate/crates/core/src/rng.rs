use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded stream used everywhere randomness enters.
pub type Rng = ChaCha8Rng;

/// Independent stream `stream` of the experiment seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream ids. Network initialisation uses `NET_INIT + modality`.
pub const DATA_ORDER: u64 = 1;
pub const TEACHER: u64 = 2;
pub const NET_INIT: u64 = 1 << 16;
