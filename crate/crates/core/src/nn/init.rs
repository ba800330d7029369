use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic per-parameter RNG: the stream depends only on the model seed
/// and the parameter name, so adding or reordering parameters elsewhere never
/// shifts existing initializations.
pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

/// Standard normal draw via Box-Muller, avoiding an extra distribution crate.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::RngExt;
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He-style initialization for layers feeding ReLUs.
pub fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len).map(|_| normal(rng) * std).collect()
}

/// Small-scale normal init for heads that should start near identity.
pub fn scaled_normal(rng: &mut ChaCha8Rng, std: f64, len: usize) -> Vec<f64> {
    (0..len).map(|_| normal(rng) * std).collect()
}
