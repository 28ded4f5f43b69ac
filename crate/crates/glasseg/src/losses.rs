//! Hybrid BCE + soft-IoU loss with 4:2:1 deeply supervised level weighting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Probabilities are clamped to [EPS, 1-EPS] before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Deep-supervision weights 2^(3-i) for levels i = 1, 2, 3 (finest first).
pub const LEVEL_WEIGHTS: [f64; 3] = [4.0, 2.0, 1.0];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    /// Weight of the BCE term.
    pub gamma: f64,
    /// Weight of the IoU term.
    pub lambda: f64,
    pub use_iou: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 1.0,
            lambda: 1.0,
            use_iou: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LevelLossValues {
    pub bce: f64,
    pub iou: f64,
    pub hybrid: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_level: [LevelLossValues; 3],
}

/// Tape handles for the assembled loss, so callers can both read values and
/// run backward through `total`.
pub struct OverallLoss {
    pub total: Var,
    pub levels: Vec<LevelLoss>,
}

pub struct LevelLoss {
    pub bce: Var,
    pub iou: Option<Var>,
    pub hybrid: Var,
}

impl OverallLoss {
    pub fn report<F: Scalar>(&self, tape: &Tape<F>) -> LossReport {
        let mut per_level = [LevelLossValues {
            bce: 0.0,
            iou: 0.0,
            hybrid: 0.0,
        }; 3];
        for (slot, level) in per_level.iter_mut().zip(self.levels.iter()) {
            slot.bce = tape.scalar_value(level.bce).cast_to();
            slot.iou = level
                .iou
                .map(|v| tape.scalar_value(v).cast_to())
                .unwrap_or(0.0);
            slot.hybrid = tape.scalar_value(level.hybrid).cast_to();
        }
        LossReport {
            total: tape.scalar_value(self.total).cast_to(),
            per_level,
        }
    }
}

/// The 4:2:1 combination used for the total loss.
pub fn weighted_total(hybrids: [f64; 3]) -> f64 {
    LEVEL_WEIGHTS
        .iter()
        .zip(hybrids.iter())
        .map(|(w, h)| w * h)
        .sum()
}

fn check_pair<F: Scalar>(tape: &Tape<F>, pred: Var, gt: Var) -> Result<()> {
    let ps = tape.value(pred).shape();
    let gs = tape.value(gt).shape();
    if ps != gs {
        return Err(Error::Shape(format!(
            "prediction {ps:?} vs ground truth {gs:?}"
        )));
    }
    if tape
        .value(gt)
        .iter()
        .any(|&v| v != F::zero() && v != F::one())
    {
        return Err(Error::Data("ground-truth mask must be binary".into()));
    }
    Ok(())
}

/// Mean binary cross entropy of probabilities against a binary mask.
pub fn bce_loss<F: Scalar>(tape: &mut Tape<F>, pred_prob: Var, gt: Var) -> Result<Var> {
    check_pair(tape, pred_prob, gt)?;
    let eps = F::cast_from(PROB_EPS);
    let one = F::one();
    let p = tape.clamp(pred_prob, eps, one - eps);
    let log_p = tape.ln(p);
    let one_minus_p = tape.affine(p, -one, one);
    let log_1mp = tape.ln(one_minus_p);
    let pos = tape.mul(gt, log_p);
    let one_minus_g = tape.affine(gt, -one, one);
    let neg = tape.mul(one_minus_g, log_1mp);
    let ll = tape.add(pos, neg);
    let mean = tape.mean_all(ll);
    Ok(tape.affine(mean, -one, F::zero()))
}

/// Soft IoU loss: 1 - sum(p*g) / sum(p + g - p*g). Defined as 0 when both
/// maps are identically zero (the limit of perfect agreement).
pub fn iou_loss<F: Scalar>(tape: &mut Tape<F>, pred_prob: Var, gt: Var) -> Result<Var> {
    check_pair(tape, pred_prob, gt)?;
    let inter = tape.mul(pred_prob, gt);
    let num = tape.sum_all(inter);
    let psum = tape.add(pred_prob, gt);
    let union = tape.sub(psum, inter);
    let den = tape.sum_all(union);
    if tape.scalar_value(den) == F::zero() {
        return Ok(tape.scalar_constant(F::zero()));
    }
    let ratio = tape.div_scalars(num, den);
    Ok(tape.affine(ratio, -F::one(), F::one()))
}

/// Deeply supervised total: levels are probability maps at ground-truth
/// resolution, finest (i = 1) first.
pub fn overall_loss<F: Scalar>(
    tape: &mut Tape<F>,
    level_probs: &[Var],
    gt: Var,
    cfg: &LossConfig,
) -> Result<OverallLoss> {
    if level_probs.len() != 3 {
        return Err(Error::Shape(format!(
            "deep supervision expects 3 levels, got {}",
            level_probs.len()
        )));
    }
    let gamma = F::cast_from(cfg.gamma);
    let lambda = F::cast_from(cfg.lambda);
    let mut levels = Vec::with_capacity(3);
    let mut total: Option<Var> = None;
    for (i, &prob) in level_probs.iter().enumerate() {
        let bce = bce_loss(tape, prob, gt)?;
        let weighted_bce = tape.affine(bce, gamma, F::zero());
        let (iou, hybrid) = if cfg.use_iou {
            let iou = iou_loss(tape, prob, gt)?;
            let weighted_iou = tape.affine(iou, lambda, F::zero());
            (Some(iou), tape.add(weighted_bce, weighted_iou))
        } else {
            (None, weighted_bce)
        };
        let weighted = tape.affine(hybrid, F::cast_from(LEVEL_WEIGHTS[i]), F::zero());
        total = Some(match total {
            Some(t) => tape.add(t, weighted),
            None => weighted,
        });
        levels.push(LevelLoss { bce, iou, hybrid });
    }
    Ok(OverallLoss {
        total: total.unwrap(),
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tape_pair(p: &[f64], g: &[f64]) -> (Tape<f64>, Var, Var) {
        let mut t = Tape::new();
        let pv = t.leaf(ArrayD::from_shape_vec(IxDyn(&[p.len()]), p.to_vec()).unwrap(), true);
        let gv = t.constant(ArrayD::from_shape_vec(IxDyn(&[g.len()]), g.to_vec()).unwrap());
        (t, pv, gv)
    }

    #[test]
    fn bce_uniform_half_is_ln2() {
        let (mut t, p, g) = tape_pair(&[0.5; 6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let l = bce_loss(&mut t, p, g).unwrap();
        assert!((t.scalar_value(l) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let (mut t, p, g) = tape_pair(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]);
        let l = bce_loss(&mut t, p, g).unwrap();
        assert!(t.scalar_value(l) >= 0.0);
        assert!(t.scalar_value(l) < 1e-6);
    }

    #[test]
    fn bce_matches_direct_evaluation_oracle() {
        let (mut t, p, g) = tape_pair(&[0.9, 0.1], &[1.0, 0.0]);
        let l = bce_loss(&mut t, p, g).unwrap();
        let want = -(0.9f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((t.scalar_value(l) - want).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_nonbinary_gt_and_bad_shapes() {
        let (mut t, p, g) = tape_pair(&[0.5, 0.5], &[0.3, 1.0]);
        assert!(bce_loss(&mut t, p, g).is_err());
        let mut t = Tape::<f64>::new();
        let p = t.constant(ArrayD::zeros(IxDyn(&[4])));
        let g = t.constant(ArrayD::zeros(IxDyn(&[5])));
        assert!(bce_loss(&mut t, p, g).is_err());
    }

    #[test]
    fn iou_identity_disjoint_and_half() {
        let (mut t, p, g) = tape_pair(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]);
        let l = iou_loss(&mut t, p, g).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);

        let (mut t, p, g) = tape_pair(&[0.0, 0.0], &[1.0, 1.0]);
        let l = iou_loss(&mut t, p, g).unwrap();
        assert_eq!(t.scalar_value(l), 1.0);

        // p uniform 0.5, g all ones: 1 - 0.5N/N = 0.5 (direct formula oracle).
        let (mut t, p, g) = tape_pair(&[0.5; 8], &[1.0; 8]);
        let l = iou_loss(&mut t, p, g).unwrap();
        assert!((t.scalar_value(l) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iou_empty_convention_is_zero() {
        let (mut t, p, g) = tape_pair(&[0.0; 4], &[0.0; 4]);
        let l = iou_loss(&mut t, p, g).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn losses_decrease_as_foreground_prob_rises() {
        let mut prev_bce = f64::INFINITY;
        let mut prev_iou = f64::INFINITY;
        for p in [0.2, 0.4, 0.6, 0.8] {
            let (mut t, pv, gv) = tape_pair(&[p, 0.3], &[1.0, 0.0]);
            let b = bce_loss(&mut t, pv, gv).unwrap();
            let i = iou_loss(&mut t, pv, gv).unwrap();
            let (bv, iv) = (t.scalar_value(b), t.scalar_value(i));
            assert!(bv < prev_bce);
            assert!(iv < prev_iou);
            prev_bce = bv;
            prev_iou = iv;
        }
    }

    #[test]
    fn weighted_total_fixture() {
        assert_eq!(weighted_total([0.1, 0.2, 0.3]), 4.0 * 0.1 + 2.0 * 0.2 + 0.3);
        assert!((weighted_total([0.1, 0.2, 0.3]) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn overall_decomposition_matches_to_machine_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::<f64>::new();
        let gt_arr = ArrayD::from_shape_fn(IxDyn(&[1, 1, 6, 6]), |_| {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let gt = t.constant(gt_arr);
        let probs: Vec<Var> = (0..3)
            .map(|_| {
                let a = ArrayD::from_shape_fn(IxDyn(&[1, 1, 6, 6]), |_| rng.gen_range(0.01..0.99));
                t.constant(a)
            })
            .collect();
        let loss = overall_loss(&mut t, &probs, gt, &LossConfig::default()).unwrap();
        let report = loss.report(&t);
        let recomputed = weighted_total([
            report.per_level[0].hybrid,
            report.per_level[1].hybrid,
            report.per_level[2].hybrid,
        ]);
        assert!((report.total - recomputed).abs() < 1e-12);
        for lv in &report.per_level {
            assert!(lv.bce >= 0.0 && lv.iou >= 0.0 && lv.hybrid >= 0.0);
        }
    }

    #[test]
    fn overall_without_iou_is_weighted_bce() {
        let mut t = Tape::<f64>::new();
        let gt = t.constant(ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let probs: Vec<Var> = (0..3)
            .map(|i| {
                let v = 0.3 + 0.2 * i as f64;
                t.constant(ArrayD::from_elem(IxDyn(&[4]), v))
            })
            .collect();
        let cfg = LossConfig {
            use_iou: false,
            ..LossConfig::default()
        };
        let loss = overall_loss(&mut t, &probs, gt, &cfg).unwrap();
        let report = loss.report(&t);
        let want = weighted_total([
            report.per_level[0].bce,
            report.per_level[1].bce,
            report.per_level[2].bce,
        ]);
        assert!((report.total - want).abs() < 1e-12);
    }

    #[test]
    fn overall_rejects_wrong_level_count() {
        let mut t = Tape::<f64>::new();
        let gt = t.constant(ArrayD::zeros(IxDyn(&[4])));
        let p = t.constant(ArrayD::from_elem(IxDyn(&[4]), 0.5));
        assert!(overall_loss(&mut t, &[p, p], gt, &LossConfig::default()).is_err());
    }

    #[test]
    fn overall_gradient_matches_finite_differences_through_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = ArrayD::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |_| rng.gen_range(-2.0..2.0));
        let gt_arr = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| {
            if rng.gen_bool(0.4) {
                1.0
            } else {
                0.0
            }
        });
        let report = crate::gradcheck::check_input_grad(
            &logits,
            |t, v| {
                // One sigmoid map reused at all three levels still exercises
                // the full loss composition.
                let p = t.sigmoid(v);
                let g = t.constant(gt3(&gt_arr));
                let loss = overall_loss(t, &[p, p, p], g, &LossConfig::default()).unwrap();
                loss.total
            },
            1e-6,
        );
        assert!(report.max_rel_err < 1e-5, "err {}", report.max_rel_err);
    }

    fn gt3(gt: &ArrayD<f64>) -> ArrayD<f64> {
        let mut out = ArrayD::zeros(IxDyn(&[1, 3, 8, 8]));
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    out[[0, c, y, x]] = gt[[0, 0, y, x]];
                }
            }
        }
        out
    }
}
