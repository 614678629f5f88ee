//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built per step: parameters are bound as leaves, ops append
//! nodes, and one `backward` call fills gradients for every node that
//! depends on a trainable leaf.

pub mod checkpoint;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Conv1dSpec, ConvTransposeSpec, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

/// Normwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central finite-difference gradient of a scalar function.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = p[i];
            p[i] = v + h;
            let up = f(&p);
            p[i] = v - h;
            let down = f(&p);
            p[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::signal::{Resampler, SincKernel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Checks the gradient of `build` w.r.t. each of `inputs` against finite
    /// differences.
    fn check(inputs: &[(Vec<usize>, Vec<f64>)], build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let eval = |vals: &[Vec<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .zip(vals)
                .map(|((s, _), v)| g.constant(Tensor::new(s.clone(), v.clone()).unwrap()))
                .collect();
            let y = build(&mut g, &vars);
            g.value(y).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|(s, v)| g.leaf(Tensor::new(s.clone(), v.clone()).unwrap().with_requires_grad(true)))
            .collect();
        let y = build(&mut g, &vars);
        g.backward(y).unwrap();
        for (k, (_, x)) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[k]).unwrap().to_vec();
            let numeric = numeric_grad(x, 1e-5, |p| {
                let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
                vals[k] = p.to_vec();
                eval(&vals)
            });
            let err = relative_error(&analytic, &numeric, 1e-8);
            assert!(err < tol, "input {k}: relative error {err}");
        }
    }

    /// Projects a tensor-valued output to a scalar with fixed random weights.
    fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
        let shape = g.shape(y).to_vec();
        let n = shape.iter().product();
        let w = rand_vec(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let w = g.constant(Tensor::new(shape, w).unwrap());
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    }

    #[test]
    fn conv1d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..6 {
            let (stride, pad, dil, k) = [(1, 0, 1, 3), (2, 1, 1, 4), (1, 3, 3, 3), (3, 2, 1, 5), (1, 1, 1, 1), (4, 2, 2, 3)][case];
            let inputs = vec![
                (vec![2, 3, 17], rand_vec(&mut rng, 2 * 3 * 17)),
                (vec![4, 3, k], rand_vec(&mut rng, 4 * 3 * k)),
                (vec![4], rand_vec(&mut rng, 4)),
            ];
            let spec = Conv1dSpec::new(stride, pad).dilated(dil);
            check(
                &inputs,
                |g, v| {
                    let y = g.conv1d(v[0], v[1], Some(v[2]), spec).unwrap();
                    project(g, y, 7)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn conv_transpose1d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, k, pad, opad) in &[(2, 4, 1, 0), (5, 10, 3, 1), (1, 3, 1, 0), (4, 8, 2, 0)] {
            let inputs = vec![
                (vec![2, 3, 6], rand_vec(&mut rng, 36)),
                (vec![3, 2, k], rand_vec(&mut rng, 6 * k)),
                (vec![2], rand_vec(&mut rng, 2)),
            ];
            let spec = ConvTransposeSpec {
                stride,
                padding: pad,
                output_padding: opad,
            };
            check(
                &inputs,
                |g, v| {
                    let y = g.conv_transpose1d(v[0], v[1], Some(v[2]), spec).unwrap();
                    project(g, y, 8)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_vec(&mut rng, 3 * 2 * 6);
        let x = rand_vec(&mut rng, 2 * 23);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![1, 2, 23], x.clone()).unwrap());
        let wc = g.constant(Tensor::new(vec![3, 2, 6], w.clone()).unwrap());
        let y = g.conv1d(xv, wc, None, Conv1dSpec::new(3, 2)).unwrap();
        let t_out = g.shape(y)[2];
        let z = rand_vec(&mut rng, 3 * t_out);
        let zv = g.constant(Tensor::new(vec![1, 3, t_out], z.clone()).unwrap());
        let spec = ConvTransposeSpec {
            stride: 3,
            padding: 2,
            output_padding: 0,
        };
        let xt = g.conv_transpose1d(zv, wc, None, spec).unwrap();
        assert_eq!(g.shape(xt), &[1, 2, 23]);
        let lhs: f64 = g.value(y).data().iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(xt).data().iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn snake_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let alpha: Vec<f64> = (0..3).map(|_| rng.gen_range(0.3..2.0)).collect();
            let inputs = vec![(vec![2, 3, 9], rand_vec(&mut rng, 54)), (vec![3], alpha)];
            check(
                &inputs,
                |g, v| {
                    let y = g.snake(v[0], v[1]).unwrap();
                    project(g, y, 9)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_vec(&mut rng, 24);
        let b = rand_vec(&mut rng, 24);
        let s = vec![1, 2, 12];
        let inputs = vec![(s.clone(), a), (s, b)];
        check(
            &inputs,
            |g, v| {
                let p = g.mul(v[0], v[1]).unwrap();
                let q = g.sub(p, v[1]).unwrap();
                let r = g.tanh(q);
                let l = g.leaky_relu(r, 0.2);
                let sq = g.square(l);
                let pooled = g.avg_pool2(sq).unwrap();
                let sc = g.scale(pooled, 1.7);
                let c = g.crop_time(sc, 1, 4).unwrap();
                let c = g.pad_time(c, 2, 3).unwrap();
                let m1 = g.mean(c);
                let m2 = g.mse(v[0], v[1]).unwrap();
                let m3 = g.l1(v[0], v[1]).unwrap();
                let m4 = g.mse_to(v[0], 1.0);
                let a = g.add(m1, m2).unwrap();
                g.weighted_sum(&[(a, 1.0), (m3, 0.5), (m4, 2.0)]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn upsample_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = Arc::new(Resampler::new(2, &SincKernel { zero_crossings: 8, ..Default::default() }).unwrap());
        let inputs = vec![(vec![1, 2, 10], rand_vec(&mut rng, 20)), (vec![5, 3], rand_vec(&mut rng, 15))];
        check(
            &inputs,
            |g, v| {
                let u = g.upsample(v[0], r.clone()).unwrap();
                let a = project(g, u, 10);
                let e = g.gather_rows(v[1], &[4, 0, 4, 2, 1, 1], 2).unwrap();
                let b = project(g, e, 11);
                g.add(a, b).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NotAScalar(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::StaleGraph)));
    }

    #[test]
    fn detach_and_straight_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.2, -0.4, 1.1]).unwrap().with_requires_grad(true));
        let q = g.straight_through(x, vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(g.value(q).data(), &[0.0, 0.0, 1.0]);
        let d = g.detach(x);
        let dq = g.add(q, d).unwrap();
        let s = g.sum(dq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 2, 8]));
        let w = g.constant(Tensor::zeros(vec![3, 4, 3]));
        assert!(g.conv1d(a, w, None, Conv1dSpec::new(1, 0)).is_err());
        let w = g.constant(Tensor::zeros(vec![3, 2, 30]));
        assert!(g.conv1d(a, w, None, Conv1dSpec::new(1, 0)).is_err());
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.crop_time(a, 4, 5).is_err());
    }
}
