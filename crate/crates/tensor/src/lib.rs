//! Numeric substrate: dense f32 tensors, a reverse-mode gradient tape,
//! AdamW with cosine scheduling, and seeded random streams.

pub mod error;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::{cosine_lr, AdamWConfig, OptimState, StepReport};
pub use rng::SeedStream;
pub use tape::{Gradients, NodeId, SequenceLayout, Tape};
pub use tensor::Tensor;

/// Matrix product of an m×k and a k×n tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Temperature softmax over a vector.
pub fn softmax(v: &[f32], temperature: f32) -> Result<Vec<f32>> {
    kernels::softmax(v, temperature)
}
