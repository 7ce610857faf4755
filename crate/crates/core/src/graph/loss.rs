use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before any logarithm.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma >= 0.0 && self.alpha > 0.0 && self.alpha <= 1.0 {
            Ok(())
        } else {
            Err(TensorError::Contract(format!(
                "focal parameters out of range: alpha={} gamma={}",
                self.alpha, self.gamma
            )))
        }
    }
}

fn labels_like(p: &Tensor, y: &[f64], op: &'static str) -> Result<Tensor> {
    if y.len() != p.numel() {
        return Err(TensorError::Shape {
            op,
            lhs: p.dims().to_vec(),
            rhs: vec![y.len()],
        });
    }
    Tensor::new(p.dims(), y.to_vec())
}

/// `−Σ [y ln p + (1 − y) ln(1 − p)]`, summed over tags.
pub fn tag_bce(p: &Tensor, y: &[f64]) -> Result<Tensor> {
    let yt = labels_like(p, y, "tag_bce")?;
    let ny = Tensor::new(p.dims(), y.iter().map(|v| 1.0 - v).collect())?;
    let pos = yt.mul(&p.ln_clamped(EPS, 1.0 - EPS)?)?;
    let neg = ny.mul(&p.rsub_scalar(1.0)?.ln_clamped(EPS, 1.0 - EPS)?)?;
    pos.add(&neg)?.sum()?.scale(-1.0)
}

/// `−Σ α (1 − p*)^γ ln p*` with `p* = p` for positives and `1 − p` otherwise.
pub fn focal_loss(p: &Tensor, y: &[f64], cfg: &FocalConfig) -> Result<Tensor> {
    let sign = labels_like(p, &y.iter().map(|v| 2.0 * v - 1.0).collect::<Vec<_>>(), "focal_loss")?;
    let offset = Tensor::new(p.dims(), y.iter().map(|v| 1.0 - v).collect())?;
    let p_star = p.mul(&sign)?.add(&offset)?;
    let log_term = p_star.ln_clamped(EPS, 1.0 - EPS)?;
    let weighted = if cfg.gamma == 0.0 {
        log_term
    } else {
        p_star.rsub_scalar(1.0)?.powf(cfg.gamma)?.mul(&log_term)?
    };
    weighted.sum()?.scale(-cfg.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;
    use crate::tensor::SeededRng;

    fn probs(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_hand_value() {
        let l = tag_bce(&probs(&[0.9]), &[1.0]).unwrap().item();
        assert!((l - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn bce_of_exact_labels_is_zero() {
        let l = tag_bce(&probs(&[1.0, 0.0, 1.0]), &[1.0, 0.0, 1.0]).unwrap().item();
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn bce_symmetry() {
        let mut rng = SeededRng::new(1);
        let p: Vec<f64> = (0..6).map(|_| rng.range(0.01, 0.99)).collect();
        let y: Vec<f64> = (0..6).map(|_| f64::from(rng.bernoulli(0.5))).collect();
        let a = tag_bce(&probs(&p), &y).unwrap().item();
        let b = tag_bce(
            &probs(&p.iter().map(|v| 1.0 - v).collect::<Vec<_>>()),
            &y.iter().map(|v| 1.0 - v).collect::<Vec<_>>(),
        )
        .unwrap()
        .item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn focal_hand_value() {
        let l = focal_loss(&probs(&[0.9]), &[1.0], &FocalConfig::default()).unwrap().item();
        let want = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((l - want).abs() < 1e-15);
        assert!((l - 2.6340e-4).abs() < 1e-8);
    }

    #[test]
    fn focal_reduces_to_bce() {
        let mut rng = SeededRng::new(2);
        let cfg = FocalConfig { alpha: 1.0, gamma: 0.0 };
        for _ in 0..100 {
            let p: Vec<f64> = (0..5).map(|_| rng.range(1e-4, 1.0 - 1e-4)).collect();
            let y: Vec<f64> = (0..5).map(|_| f64::from(rng.bernoulli(0.5))).collect();
            let f = focal_loss(&probs(&p), &y, &cfg).unwrap().item();
            let b = tag_bce(&probs(&p), &y).unwrap().item();
            assert!((f - b).abs() < 1e-12, "{f} vs {b}");
        }
    }

    #[test]
    fn focal_symmetric_at_half() {
        let cfg = FocalConfig::default();
        let a = focal_loss(&probs(&[0.5]), &[0.0], &cfg).unwrap().item();
        let b = focal_loss(&probs(&[0.5]), &[1.0], &cfg).unwrap().item();
        assert_eq!(a, b);
    }

    #[test]
    fn focal_decreases_in_p_star() {
        let cfg = FocalConfig::default();
        let mut prev = f64::INFINITY;
        for k in 1..100 {
            let l = focal_loss(&probs(&[k as f64 / 100.0]), &[1.0], &cfg).unwrap().item();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn modulating_factor_down_weights_easy_examples() {
        let slope = |gamma| {
            let cfg = FocalConfig { alpha: 0.25, gamma };
            let p = probs(&[0.99]).requires_grad();
            let l = focal_loss(&p, &[1.0], &cfg).unwrap();
            crate::tensor::backward(&l).unwrap().wrt(&p).item().abs()
        };
        assert!(slope(2.0) < slope(0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(3);
        for _ in 0..20 {
            let p = Tensor::new(&[1, 4], (0..4).map(|_| rng.range(0.05, 0.95)).collect()).unwrap();
            let y: Vec<f64> = (0..4).map(|_| f64::from(rng.bernoulli(0.5))).collect();
            let e1 = finite_diff_check(|x| tag_bce(&x[0], &y), std::slice::from_ref(&p), 1e-6).unwrap();
            let e2 = finite_diff_check(|x| focal_loss(&x[0], &y, &FocalConfig::default()), &[p], 1e-6).unwrap();
            assert!(e1 < 1e-5 && e2 < 1e-5, "{e1} {e2}");
        }
    }
}
