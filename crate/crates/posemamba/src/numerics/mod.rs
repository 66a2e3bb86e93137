//! Dense tensors and the reverse-mode tape used to train the model.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport};
pub use graph::{softplus_scalar, CustomOp, Gradients, Graph, Var};
pub use tensor::{Precision, Scalar, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let m = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let out = g.matmul(p, m).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(crate::error::PoseError::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_f32_matches_finite_differences() {
        // Gradient through a 3×4 by 4×2 product at 32-bit precision.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[3, 4]).cast::<f32>();
        let b = rand_tensor(&mut rng, &[4, 2]).cast::<f32>();
        let w = rand_tensor(&mut rng, &[3, 2]).cast::<f32>();
        let eval = |a: &Tensor<f32>| -> f32 {
            let mut g = Graph::new();
            let (av, bv, wv) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(w.clone()));
            let c = g.matmul(av, bv).unwrap();
            let c = g.mul(c, wv).unwrap();
            let s = g.sum(c).unwrap();
            g.value(s).item()
        };
        let mut g = Graph::new();
        let av = g.param(&a);
        let (bv, wv) = (g.constant(b.clone()), g.constant(w.clone()));
        let c = g.matmul(av, bv).unwrap();
        let c = g.mul(c, wv).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        let analytic = grads.get(av).unwrap();
        // the function is linear in `a`, so a large step has no truncation error
        let h = 0.5f32;
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap.data_mut()[i] += h;
            let mut am = a.clone();
            am.data_mut()[i] -= h;
            let numeric = (eval(&ap) - eval(&am)) / (2.0 * h);
            let err = relative_error(analytic[i] as f64, numeric as f64);
            assert!(err < 1e-4, "coordinate {i}: rel err {err}");
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::full(&[2, 4], 3.5));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0]);

        // zero input with eps = 0 collapses to beta instead of dividing by zero
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let d = 16;
        let gamma = g.constant(Tensor::full(&[d], 1.0));
        let beta = g.constant(Tensor::zeros(&[d]));
        let mut x = rand_tensor(&mut rng, &[32, d]);
        for v in x.data_mut() {
            *v = *v * 5.0 + 2.0;
        }
        let x = g.constant(x);
        let y = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS).unwrap();
        for row in g.value(y).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_rejects_wrong_affine() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(g.layer_norm(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 30.0, -30.0]));
        let s = g.silu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.0);
        let sp = g.softplus(x).unwrap();
        let v = g.value(sp).data();
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v[1] - 30.0).abs() < 1e-12);
        assert!(v[2] > 0.0 && v[2] < 1e-12);
        let big = g.constant(t(&[1], &[1000.0]));
        let sp = g.softplus(big).unwrap();
        assert_eq!(g.value(sp).data()[0], 1000.0);
    }

    #[test]
    fn silu_gradient_at_one() {
        let x = t(&[1], &[1.0]);
        let err = grad_check(|g, x| g.silu(x), &x, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn depthwise_conv_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let k = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let y = g.depthwise_conv1d(x, k, true).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let (a, b) = (0.25, 0.75);
        let x = g.constant(t(&[4, 1], &[1.0, 0.0, 0.0, 0.0]));
        let k = g.constant(t(&[2, 1], &[a, b]));
        let y = g.depthwise_conv1d(x, k, true).unwrap();
        assert_eq!(g.value(y).data(), &[b, a, 0.0, 0.0]);

        // kernel longer than the sequence is covered by padding
        let k = g.constant(t(&[6, 1], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        let y = g.depthwise_conv1d(x, k, true).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);

        let k = g.constant(t(&[2, 3], &[0.0; 6]));
        assert!(g.depthwise_conv1d(x, k, true).is_err());
    }

    #[test]
    fn causal_conv_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[10, 3]);
        let k = rand_tensor(&mut rng, &[4, 3]);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
            let y = g.depthwise_conv1d(xv, kv, true).unwrap();
            g.value(y).clone()
        };
        let base = run(&x);
        for i in 0..10 {
            let mut x2 = x.clone();
            for v in &mut x2.data_mut()[(i + 1) * 3..] {
                *v += 10.0;
            }
            let y2 = run(&x2);
            assert_eq!(&base.data()[..(i + 1) * 3], &y2.data()[..(i + 1) * 3]);
        }
    }

    #[test]
    fn quadratic_and_linear_gradients() {
        let x = t(&[5], &[0.3, -1.2, 2.0, 0.0, 4.5]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let mut g = Graph::new();
        let v = g.param(&x);
        let s = g.sum(v).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(v).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_check_rejects_bad_step_and_non_finite() {
        let x = t(&[1], &[1.0]);
        assert!(grad_check(|g, x| g.sum(x), &x, 0.0).is_err());
        let x = t(&[1], &[800.0]);
        assert!(grad_check(
            |g, x| {
                let e = g.exp(x)?;
                g.sum(e)
            },
            &x,
            1e-3
        )
        .is_err());
    }

    #[test]
    fn shape_round_trips_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[6, 4]);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let r = g.reshape(v, &[3, 8]).unwrap();
        let r = g.reshape(r, &[6, 4]).unwrap();
        let tt = g.transpose(r).unwrap();
        let tt = g.transpose(tt).unwrap();
        let a = g.slice_rows(tt, 0, 2).unwrap();
        let b = g.slice_rows(tt, 2, 6).unwrap();
        let c = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), x.data());
    }

    /// All differentiable ops through one composite function, over 20 seeds.
    fn composite(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
        let (x, w, gamma, beta, k, bias, s) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
        let h = g.matmul(x, w)?; // 6×4
        let h = g.layer_norm(h, gamma, beta, LAYER_NORM_EPS)?;
        let h = g.depthwise_conv1d(h, k, true)?;
        let h = g.add_row_bias(h, bias)?;
        let a = g.silu(h)?;
        let b = g.gelu(h)?;
        let c = g.softplus(h)?;
        let d = g.sigmoid(h)?;
        let e = g.mul(a, b)?;
        let e = g.add(e, c)?;
        let e = g.sub(e, d)?;
        let e = g.mul_row(e, gamma)?;
        let e = g.scale_by(e, s)?;
        let t = g.transpose(e)?;
        let t = g.reshape(t, &[6, 4])?;
        let idx: Arc<[usize]> = vec![5, 0, 3, 3, 1].into();
        let r = g.gather_rows(t, idx)?;
        let top = g.slice_rows(r, 0, 2)?;
        let cols = g.slice_cols(r, 1, 3)?;
        let q = g.mul(cols, cols)?;
        let q = g.add_scalar(q, 1.0)?;
        let q = g.sqrt(q)?;
        let q = g.recip(q)?;
        let q = g.sum_last(q)?;
        let m = g.mean_rows(top)?;
        let ex = g.scale(m, 0.3)?;
        let ex = g.exp(ex)?;
        let q = g.reshape(q, &[5, 1])?;
        let ex = g.reshape(ex, &[4, 1])?;
        let cat = g.concat_rows(&[q, ex])?;
        let s1 = g.mean(cat)?;
        let s2 = g.sum(r)?;
        g.add(s1, s2)
    }

    #[test]
    fn composite_gradients_match_finite_differences_over_seeds() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut inputs = vec![
                rand_tensor(&mut rng, &[6, 3]),
                rand_tensor(&mut rng, &[3, 4]),
                rand_tensor(&mut rng, &[4]),
                rand_tensor(&mut rng, &[4]),
                rand_tensor(&mut rng, &[3, 4]),
                rand_tensor(&mut rng, &[4]),
                rand_tensor(&mut rng, &[1]),
            ];
            for v in inputs[2].data_mut() {
                *v += 1.5;
            }
            let report = grad_check_many(composite, &inputs, 1e-5).unwrap();
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
        }
    }
}
