//! Validates the reverse-mode gradients of every building block against
//! central finite differences.
//!
//! Run with: `cargo run --release --example gradient_check`

use multimatch::tensor::{finite_diff_check, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // Affine + relu chain.
    let w = random_tensor(&mut rng, &[4, 3]);
    let b = random_tensor(&mut rng, &[3]);
    let x = random_tensor(&mut rng, &[5, 4]);
    let err = finite_diff_check(
        |g: &mut Graph, x: &Tensor| {
            let h = g.matmul(x, &w)?;
            let h = g.add_bias(&h, &b)?;
            let h = g.relu(&h)?;
            let sq = g.mul(&h, &h)?;
            g.sum(&sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    println!("affine + relu: max relative error {err:.2e}");

    // Batch normalization in training mode.
    let gamma = random_tensor(&mut rng, &[3]);
    let beta = random_tensor(&mut rng, &[3]);
    let x = random_tensor(&mut rng, &[6, 3]);
    let err = finite_diff_check(
        |g: &mut Graph, x: &Tensor| {
            let (y, _, _) = g.batch_norm_train(x, &gamma, &beta, 1e-5)?;
            let sq = g.mul(&y, &y)?;
            g.sum(&sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    println!("batch norm (train): max relative error {err:.2e}");

    // Softmax cross-entropy against one-hot labels.
    let labels = Tensor::new(
        &[4, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
    )
    .unwrap();
    let logits = random_tensor(&mut rng, &[4, 3]);
    let err = finite_diff_check(
        |g: &mut Graph, z: &Tensor| g.softmax_cross_entropy(z, &labels, &[1.0, 0.5, 2.0, 1.0]),
        &logits,
        1e-6,
    )
    .unwrap();
    println!("softmax cross-entropy: max relative error {err:.2e}");
}
