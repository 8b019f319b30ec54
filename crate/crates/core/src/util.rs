//! Seeded randomness and small tensor helpers.
//!
//! All randomness in the crate flows through ChaCha streams derived from a
//! run seed and a string tag, never through the libtorch global generator,
//! so results do not depend on call order across unrelated components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

/// Derives an independent RNG stream from `(seed, tag)`.
pub fn keyed_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Standard-normal tensor of the given shape drawn from `rng`.
pub fn normal_tensor(rng: &mut impl Rng, shape: &[i64], kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    Tensor::from_slice(&normal_vec(rng, n as usize))
        .reshape(shape)
        .to_kind(kind)
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[i64], kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
    Tensor::from_slice(&v).reshape(shape).to_kind(kind)
}

pub fn to_f64_vec(t: &Tensor) -> Vec<f64> {
    Vec::<f64>::try_from(&t.to_kind(Kind::Double).contiguous().view(-1))
        .expect("tensor to f64 vector")
}

pub fn to_i64_vec(t: &Tensor) -> Vec<i64> {
    Vec::<i64>::try_from(&t.to_kind(Kind::Int64).contiguous().view(-1))
        .expect("tensor to i64 vector")
}

pub fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

/// SHA-256 over the raw bytes of a sequence of named tensors.
pub fn tensors_digest<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in items {
        hasher.update(name.as_bytes());
        let t = t.contiguous().to_kind(Kind::Float);
        let numel = t.numel();
        let mut buf = vec![0f32; numel];
        t.copy_data(&mut buf, numel);
        for x in buf {
            hasher.update(x.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
