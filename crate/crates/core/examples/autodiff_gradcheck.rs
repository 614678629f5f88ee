//! Reverse-mode gradients of a small conv, snake and transposed-conv stack
//! against central finite differences.
//!
//! `cargo run --release --example autodiff_gradcheck`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdc::autodiff::{numeric_grad, relative_error, Conv1dSpec, ConvTransposeSpec, Graph, Tensor, Var};

/// Mean squared output of the stack; returns the loss and the weight leaf.
fn forward(g: &mut Graph, x: &[f64], w: &[f64]) -> sdc::Result<(Var, Var)> {
    let xv = g.constant(Tensor::new(vec![1, 1, 32], x.to_vec())?);
    let wv = g.leaf(Tensor::new(vec![4, 1, 5], w.to_vec())?.with_requires_grad(true));
    let alpha = g.constant(Tensor::new(vec![4], vec![1.0; 4])?);
    let up = g.constant(Tensor::new(vec![4, 1, 4], vec![0.25; 16])?);
    let h = g.conv1d(xv, wv, None, Conv1dSpec::new(2, 2))?;
    let h = g.snake(h, alpha)?;
    let spec = ConvTransposeSpec {
        stride: 2,
        padding: 1,
        output_padding: 0,
    };
    let y = g.conv_transpose1d(h, up, None, spec)?;
    let sq = g.square(y);
    Ok((g.mean(sq), wv))
}

fn main() -> sdc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.5..0.5)).collect();

    let mut g = Graph::new();
    let (loss, wv) = forward(&mut g, &x, &w)?;
    println!("loss {:.6} over {} graph nodes", g.value(loss).item(), g.len());
    g.backward(loss)?;
    let analytic = g.grad(wv).expect("weights require grad").to_vec();

    let numeric = numeric_grad(&w, 1e-6, |p| {
        let mut g = Graph::new();
        let (l, _) = forward(&mut g, &x, p).expect("valid shapes");
        g.value(l).item()
    });
    println!("relative error vs finite differences: {:.2e}", relative_error(&analytic, &numeric, 1e-12));
    Ok(())
}
