#![allow(dead_code)]

use aqs_tensor::{ParamKind, ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sets every learned tensor (not running statistics) under `prefix` to zero.
pub fn zero_prefix<T: Real>(store: &mut ParamStore<T>, prefix: &str) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix) && store.kind(id) != ParamKind::Buffer).collect();
    assert!(!ids.is_empty(), "nothing under {prefix}");
    for id in ids {
        let dims = store.value(id).dims().to_vec();
        store.set(id, Tensor::zeros(dims)).unwrap();
    }
}

pub fn random_mask(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    use rand::Rng;
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect()).unwrap()
}

pub fn random_image(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::uniform(dims.to_vec(), 0.0, 1.0, rng)
}
