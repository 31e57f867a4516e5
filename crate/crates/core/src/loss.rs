//! Motion regression objectives.

use p2p_nn::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::MotionDelta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Gaussian negative log-likelihood with a learned per-dimension scale.
    #[default]
    GaussianNll,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub yaw_weight: f64,
    pub yaw_wrap: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::GaussianNll,
            yaw_weight: 1.0,
            yaw_wrap: true,
        }
    }
}

impl LossConfig {
    pub fn l1() -> Self {
        Self {
            kind: LossKind::L1,
            ..Self::default()
        }
    }

    /// Network outputs per sample this loss consumes.
    pub fn pred_width(&self) -> usize {
        match self.kind {
            LossKind::GaussianNll => 8,
            LossKind::L1 => 4,
        }
    }
}

/// Mean over the batch of the per-sample loss summed over the four motion
/// dimensions. `pred` is `[B, 8]` (means then log-scales) for the Gaussian
/// NLL and `[B, 4]` for L1. The yaw residual is wrapped to `(-pi, pi]`
/// when `yaw_wrap` is set.
///
/// Gaussian NLL per dimension: `log s + r^2 / (2 s^2)`, dropping the
/// constant `log sqrt(2 pi)`.
pub fn regression_loss(tape: &mut Tape, pred: Var, target: &[MotionDelta], cfg: &LossConfig) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let b = target.len();
    let width = cfg.pred_width();
    if shape != [b, width] || cfg.yaw_weight < 0.0 {
        return Err(CoreError::Nn(p2p_nn::NnError::ShapeMismatch {
            op: "regression_loss",
            detail: format!("pred {shape:?}, {b} targets, {:?} expects width {width}", cfg.kind),
        }));
    }
    let neg_target: Vec<f64> = target.iter().flat_map(|t| t.to_array().map(|v| -v)).collect();
    let weights: Vec<f64> = (0..b).flat_map(|_| [1.0, 1.0, 1.0, cfg.yaw_weight]).collect();
    let mu = if width == 4 { pred } else { tape.slice(pred, 1, 0, 4)? };
    let mut r = tape.add_const(mu, &neg_target)?;
    if cfg.yaw_wrap {
        r = tape.wrap_angle_columns(r, &[false, false, false, true])?;
    }
    let per_dim = match cfg.kind {
        LossKind::L1 => tape.abs(r),
        LossKind::GaussianNll => {
            let log_s = tape.slice(pred, 1, 4, 8)?;
            let inv_var = {
                let m2 = tape.scale(log_s, -2.0);
                tape.exp(m2)
            };
            let r2 = tape.mul(r, r)?;
            let quad = tape.mul(r2, inv_var)?;
            let quad = tape.scale(quad, 0.5);
            tape.add(log_s, quad)?
        }
    };
    let weighted = tape.mul_const(per_dim, &weights)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / b.max(1) as f64))
}

/// Loss value without building a differentiable graph.
pub fn loss_value(pred: &[Vec<f64>], target: &[MotionDelta], cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new(p2p_nn::Mode::Eval);
    let flat: Vec<f64> = pred.iter().flatten().copied().collect();
    let t = p2p_nn::Tensor::new(&[pred.len(), cfg.pred_width()], flat)?;
    let v = tape.input(&t);
    let l = regression_loss(&mut tape, v, target, cfg)?;
    Ok(tape.value(l)[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mu: [f64; 4], ls: [f64; 4]) -> Vec<f64> {
        mu.into_iter().chain(ls).collect()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let t = MotionDelta::new(0.3, -0.1, 0.05, 0.2);
        let v = loss_value(&[row(t.to_array(), [0.0; 4])], &[t], &LossConfig::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn unit_residual_closed_form() {
        let v = loss_value(
            &[row([1.0, 0.0, 0.0, 0.0], [0.0; 4])],
            &[MotionDelta::zero()],
            &LossConfig::default(),
        )
        .unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn yaw_wraps() {
        let target = MotionDelta::new(0.0, 0.0, 0.0, -3.1);
        let cfg = LossConfig::l1();
        let v = loss_value(&[vec![0.0, 0.0, 0.0, 3.1]], &[target], &cfg).unwrap();
        assert!((v - (std::f64::consts::TAU - 6.2)).abs() < 1e-12);
        let off = LossConfig { yaw_wrap: false, ..cfg };
        let v = loss_value(&[vec![0.0, 0.0, 0.0, 3.1]], &[target], &off).unwrap();
        assert!((v - 6.2).abs() < 1e-12);
    }

    #[test]
    fn yaw_weight_scales_yaw_term_only() {
        let cfg = LossConfig {
            yaw_weight: 2.0,
            ..LossConfig::l1()
        };
        let v = loss_value(&[vec![1.0, 0.0, 0.0, 0.5]], &[MotionDelta::zero()], &cfg).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn batch_mean() {
        let cfg = LossConfig::l1();
        let v = loss_value(
            &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 3.0, 0.0, 0.0]],
            &[MotionDelta::zero(), MotionDelta::zero()],
            &cfg,
        )
        .unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn wrong_width_rejected() {
        assert!(loss_value(&[vec![0.0; 4]], &[MotionDelta::zero()], &LossConfig::default()).is_err());
    }
}
