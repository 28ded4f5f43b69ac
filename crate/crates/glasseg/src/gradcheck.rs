//! Central finite-difference verification of tape gradients.
//!
//! Runs in `f64`; the builder closure is re-invoked for every perturbed
//! evaluation, so it must be deterministic.

use ndarray::ArrayD;

use crate::tape::{Tape, Var};

/// Relative error with an absolute floor: |a - n| / max(1, |a|, |n|).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients of a scalar-valued function with central
/// differences with respect to `input`.
pub fn check_input_grad<B>(input: &ArrayD<f64>, mut build: B, eps: f64) -> CheckReport
where
    B: FnMut(&mut Tape<f64>, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let root = build(&mut tape, x);
    let grads = tape.backward(root);
    let analytic = grads
        .get(x)
        .expect("input should receive a gradient")
        .clone();

    let mut eval = |arr: &ArrayD<f64>| -> f64 {
        let mut t = Tape::new();
        let v = t.leaf(arr.clone(), false);
        let r = build_ref(&mut build, &mut t, v);
        t.scalar_value(r)
    };

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let flat: Vec<f64> = input.iter().copied().collect();
    for idx in 0..flat.len() {
        let mut plus = input.clone();
        let mut minus = input.clone();
        {
            let p = plus.iter_mut().nth(idx).unwrap();
            *p += eps;
        }
        {
            let m = minus.iter_mut().nth(idx).unwrap();
            *m -= eps;
        }
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let a = *analytic.iter().nth(idx).unwrap();
        let e = rel_err(a, numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = idx;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report
}

fn build_ref<B>(build: &mut B, tape: &mut Tape<f64>, x: Var) -> Var
where
    B: FnMut(&mut Tape<f64>, Var) -> Var,
{
    build(tape, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tape::ConvGeometry;

    fn random_input(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_chain_grad() {
        let x = random_input(&[2, 3, 4, 4], 7);
        let report = check_input_grad(
            &x,
            |t, v| {
                let s = t.sigmoid(v);
                let r = t.relu(v);
                let m = t.mul(s, r);
                let a = t.affine(m, 0.7, 0.1);
                t.mean_all(a)
            },
            1e-6,
        );
        assert!(report.max_rel_err < 1e-7, "err {}", report.max_rel_err);
    }

    #[test]
    fn conv2d_grad_with_dilation() {
        let x = random_input(&[1, 2, 6, 6], 11);
        let w = random_input(&[3, 2, 1, 5], 12);
        let proj = random_input(&[1, 3, 6, 6], 13);
        let geom = ConvGeometry {
            stride: (1, 1),
            pad: (0, 4),
            dilation: (1, 2),
        };
        let report = check_input_grad(
            &x,
            |t, v| {
                let wv = t.constant(w.clone());
                let y = t.conv2d(v, wv, None, geom);
                let p = t.constant(proj.clone());
                let m = t.mul(y, p);
                t.sum_all(m)
            },
            1e-6,
        );
        assert!(report.max_rel_err < 1e-7, "err {}", report.max_rel_err);
    }

    #[test]
    fn conv2d_weight_grad() {
        let x = random_input(&[2, 2, 5, 5], 21);
        let w = random_input(&[3, 2, 3, 3], 22);
        let b = random_input(&[3], 23);
        let proj = random_input(&[2, 3, 3, 3], 24);
        let geom = ConvGeometry {
            stride: (2, 2),
            pad: (1, 1),
            dilation: (1, 1),
        };
        let report = check_input_grad(
            &w,
            |t, wv| {
                let xv = t.constant(x.clone());
                let bv = t.leaf(b.clone(), true);
                let y = t.conv2d(xv, wv, Some(bv), geom);
                let p = t.constant(proj.clone());
                let m = t.mul(y, p);
                t.sum_all(m)
            },
            1e-6,
        );
        assert!(report.max_rel_err < 1e-7, "err {}", report.max_rel_err);
    }

    #[test]
    fn batch_norm_train_mode_grad() {
        let x = random_input(&[2, 3, 4, 4], 31);
        let gamma = random_input(&[3], 32);
        let beta = random_input(&[3], 33);
        let proj = random_input(&[2, 3, 4, 4], 34);
        let report = check_input_grad(
            &x,
            |t, v| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let (mean, inv_std) = crate::nn::batch_statistics(t.value(v), 1e-5);
                let y = t.batch_norm(v, g, b, mean, inv_std, true);
                let p = t.constant(proj.clone());
                let m = t.mul(y, p);
                t.sum_all(m)
            },
            1e-6,
        );
        assert!(report.max_rel_err < 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn upsample_and_pool_grad() {
        let x = random_input(&[1, 2, 3, 3], 41);
        let proj = random_input(&[1, 2, 7, 5], 42);
        let report = check_input_grad(
            &x,
            |t, v| {
                let u = t.upsample_bilinear(v, 7, 5);
                let p = t.constant(proj.clone());
                let m = t.mul(u, p);
                let s = t.sum_all(m);
                let gap = t.global_avg_pool(v);
                let s2 = t.sum_all(gap);
                t.add(s, s2)
            },
            1e-6,
        );
        assert!(report.max_rel_err < 1e-7, "err {}", report.max_rel_err);
    }

    #[test]
    fn gates_concat_scale_grad() {
        let x = random_input(&[2, 3, 4, 4], 51);
        let gate_c = random_input(&[2, 3, 1, 1], 52);
        let gate_s = random_input(&[2, 1, 4, 4], 53);
        let report = check_input_grad(
            &x,
            |t, v| {
                let gc = t.leaf(gate_c.clone(), true);
                let gs = t.leaf(gate_s.clone(), true);
                let a = t.channel_gate(v, gc);
                let b = t.spatial_gate(v, gs);
                let cat = t.concat_channels(&[a, b]);
                let alpha = t.leaf(ArrayD::from_elem(IxDyn(&[]), 1.3), true);
                let scaled = t.scale_by(cat, alpha);
                t.mean_all(scaled)
            },
            1e-6,
        );
        assert!(report.max_rel_err < 1e-7, "err {}", report.max_rel_err);
    }

    #[test]
    fn log_clamp_div_grad() {
        let mut x = random_input(&[4, 4], 61);
        x.mapv_inplace(|v| 0.5 + 0.2 * v); // keep away from clamp edges
        let report = check_input_grad(
            &x,
            |t, v| {
                let c = t.clamp(v, 1e-7, 1.0 - 1e-7);
                let l = t.ln(c);
                let n = t.sum_all(l);
                let d = t.sum_all(v);
                t.div_scalars(n, d)
            },
            1e-7,
        );
        assert!(report.max_rel_err < 1e-6, "err {}", report.max_rel_err);
    }
}
