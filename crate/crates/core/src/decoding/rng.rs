use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type CandidateRng = ChaCha8Rng;

/// Identity of one caption candidate; each key gets its own stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CandidateKey<'a> {
    pub seed: u64,
    pub image_id: &'a str,
    pub mask_index: usize,
    pub crop_index: usize,
    pub config_index: usize,
}

/// Keyed ChaCha stream: the key is hashed into the cipher seed, so streams
/// do not depend on the order candidates are generated in.
pub fn candidate_rng(key: &CandidateKey<'_>) -> CandidateRng {
    let mut h = Sha256::new();
    h.update(b"pseudoris/candidate/v1");
    h.update(key.seed.to_le_bytes());
    h.update((key.image_id.len() as u64).to_le_bytes());
    h.update(key.image_id.as_bytes());
    h.update((key.mask_index as u64).to_le_bytes());
    h.update((key.crop_index as u64).to_le_bytes());
    h.update((key.config_index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
