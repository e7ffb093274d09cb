use candle_core::Tensor;

use crate::config::LossConfig;
use crate::error::Result;
use crate::net::{sigmoid, softplus, DetectorOutput};

fn pow_const(x: &Tensor, a: f64) -> Result<Tensor> {
    Ok(if a == 1.0 {
        x.clone()
    } else if a == 2.0 {
        x.sqr()?
    } else {
        x.powf(a)?
    })
}

/// Penalty-reduced pixel-wise focal loss on heatmap logits, normalized by
/// the number of peak cells (target == 1) in the batch, at least one.
pub fn focal_heatmap_loss(logits: &Tensor, target: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    let target = target.detach();
    let pos = target.ge(1.0 - 1e-6)?.to_dtype(logits.dtype())?;
    let num_pos = pos.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    let neg_weight = (pow_const(&target.affine(-1.0, 1.0)?, beta)? * pos.affine(-1.0, 1.0)?)?;
    let p = sigmoid(logits)?;
    let log_p = softplus(&logits.neg()?)?.neg()?;
    let log_1mp = softplus(logits)?.neg()?;
    let pos_term = (pow_const(&p.affine(-1.0, 1.0)?, alpha)? * log_p)?.mul(&pos)?;
    let neg_term = (pow_const(&p, alpha)? * log_1mp)?.mul(&neg_weight)?;
    let total = (pos_term + neg_term)?.sum_all()?;
    Ok(total.affine(-1.0 / num_pos.max(1.0), 0.0)?)
}

/// Mean binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let target = target.detach().to_dtype(logits.dtype())?;
    Ok((softplus(logits)? - logits.mul(&target)?)?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct DetectorLoss {
    pub total: Tensor,
    pub heatmap: Tensor,
    pub class: Tensor,
}

pub fn detector_loss(
    out: &DetectorOutput,
    heatmap_target: &Tensor,
    class_target: &Tensor,
    cfg: &LossConfig,
) -> Result<DetectorLoss> {
    let heatmap = focal_heatmap_loss(&out.heatmap_logits, heatmap_target, cfg.focal_alpha, cfg.focal_beta)?;
    let class = bce_with_logits(&out.class_logits, class_target)?;
    let total = (heatmap.affine(cfg.heatmap_weight, 0.0)? + class.affine(cfg.class_weight, 0.0)?)?;
    Ok(DetectorLoss { total, heatmap, class })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn bce_matches_hand_values() {
        let logits = t(&[0.0, 2.0, -1.0]);
        let target = t(&[1.0, 0.0, 0.0]);
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let want = (-(s(0.0)).ln() - (1.0 - s(2.0)).ln() - (1.0 - s(-1.0)).ln()) / 3.0;
        assert!((scalar(&bce_with_logits(&logits, &target).unwrap()) - want).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_hand_values() {
        let logits = t(&[1.0, -1.0, 0.5]);
        let target = t(&[1.0, 0.5, 0.0]);
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (p0, p1, p2) = (s(1.0), s(-1.0), s(0.5));
        let want = -((1.0 - p0).powi(2) * p0.ln()
            + 0.5f64.powi(4) * p1.powi(2) * (1.0 - p1).ln()
            + p2.powi(2) * (1.0 - p2).ln());
        let got = scalar(&focal_heatmap_loss(&logits, &target, 2.0, 4.0).unwrap());
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn focal_without_peaks_is_not_divided() {
        let logits = t(&[0.0, 0.0]);
        let target = t(&[0.0, 0.0]);
        let want = -2.0 * 0.25 * 0.5f64.ln();
        assert!((scalar(&focal_heatmap_loss(&logits, &target, 2.0, 4.0).unwrap()) - want).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = t(&[-500.0, 500.0]);
        let target = t(&[1.0, 0.0]);
        assert!(scalar(&focal_heatmap_loss(&logits, &target, 2.0, 4.0).unwrap()).is_finite());
        assert!(scalar(&bce_with_logits(&logits, &target).unwrap()).is_finite());
    }
}
