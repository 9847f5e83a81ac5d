//! Class-weighted cross-entropy.

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Per-class loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidParameter("no class weights".into()));
        }
        if let Some((k, v)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidParameter(format!("class {k} weight {v} must be finite and > 0")));
        }
        Ok(Self { w })
    }

    pub fn uniform(classes: usize) -> Self {
        Self { w: vec![1.0; classes] }
    }

    /// Inverse-frequency weights `1 / count_k`.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::AbsentClass(k));
        }
        Self::new(counts.iter().map(|&c| 1.0 / c as f64).collect())
    }

    /// Rescales so the average per-pixel weight over the counted pixels is
    /// 1, keeping the ratios. With raw `1 / count` weights the loss scale
    /// shrinks with dataset size.
    pub fn normalized(&self, counts: &[u64]) -> Result<Self> {
        if counts.len() != self.w.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} counts for {} weights",
                counts.len(),
                self.w.len()
            )));
        }
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let mass: f64 = counts.iter().zip(&self.w).map(|(&c, w)| c as f64 * w).sum();
        if !(total > 0.0 && mass > 0.0) {
            return Err(Error::InvalidParameter("no pixels to normalise over".into()));
        }
        Self::new(self.w.iter().map(|w| w * total / mass).collect())
    }

    pub fn classes(&self) -> usize {
        self.w.len()
    }
}

/// Voxel count of every class across a collection.
pub fn class_counts<'a>(labels: impl IntoIterator<Item = &'a LabelVolume>, classes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; classes];
    for v in labels {
        for &l in v.labels() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::InvalidParameter(format!("label {l} outside {classes} classes")));
            }
            counts[l] += 1;
        }
    }
    Ok(counts)
}

/// `w_k = 1 / |voxels labelled k|` over the whole collection.
pub fn class_weights<'a>(labels: impl IntoIterator<Item = &'a LabelVolume>, classes: usize) -> Result<ClassWeights> {
    ClassWeights::from_counts(&class_counts(labels, classes)?)
}

/// Binary weighted cross-entropy with normaliser `n` = number of pixels.
pub fn weighted_ce_loss(p: &[f64], p_hat: &[f64], w: &[f64]) -> Result<(f64, Vec<f64>)> {
    weighted_ce_loss_with_n(p, p_hat, w, p.len() as f64)
}

/// `L = -(1/n) sum_i w_i [ph_i ln P_i + (1 - ph_i) ln(1 - P_i)]` and its
/// derivative in `P`. Clamped probabilities get a zero derivative.
pub fn weighted_ce_loss_with_n(p: &[f64], p_hat: &[f64], w: &[f64], n: f64) -> Result<(f64, Vec<f64>)> {
    if p.len() != p_hat.len() || p.len() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "P {} / target {} / weights {}",
            p.len(),
            p_hat.len(),
            w.len()
        )));
    }
    if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidParameter(format!("pixel weight {v} must be > 0")));
    }
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::InvalidParameter(format!("normaliser n = {n}")));
    }
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for ((&pi, &ti), &wi) in p.iter().zip(p_hat).zip(w) {
        let c = pi.clamp(EPS, 1.0 - EPS);
        sum += wi * (ti * c.ln() + (1.0 - ti) * (1.0 - c).ln());
        let g = if pi == c { -(wi / n) * (ti / c - (1.0 - ti) / (1.0 - c)) } else { 0.0 };
        grad.push(g);
    }
    Ok((-sum / n, grad))
}

/// Categorical form used for training: `-(1/n) sum_i w_i ln P_i(gt_i)`,
/// returning the loss and `dL/dlogits` (class-major) for a softmax output.
/// Reduces to [`weighted_ce_loss`] for two classes.
pub(crate) fn categorical_loss(probs: &[f64], classes: usize, gt: &[u8], weights: &ClassWeights, n: f64) -> (f64, Vec<f64>) {
    let px = gt.len();
    let mut sum = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (i, &g) in gt.iter().enumerate() {
        let g = g as usize;
        let wi = weights.w[g];
        let pg = probs[g * px + i];
        let c = pg.clamp(EPS, 1.0 - EPS);
        sum += wi * c.ln();
        if pg == c {
            for k in 0..classes {
                let delta = if k == g { 1.0 } else { 0.0 };
                grad[k * px + i] = -(wi / n) * (delta - probs[k * px + i]);
            }
        }
    }
    (-sum / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    #[test]
    fn hand_values() {
        let (l, g) = weighted_ce_loss(&[0.5], &[1.0], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_nearly_free() {
        let p = [1.0 - EPS, EPS, 1.0 - EPS];
        let t = [1.0, 0.0, 1.0];
        let (l, _) = weighted_ce_loss(&p, &t, &[1.0; 3]).unwrap();
        assert!(l.abs() < 1e-6);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let p = [0.3, 0.8, 0.55];
        let t = [1.0, 0.0, 1.0];
        let w = [2.0, 0.5, 1.0];
        let (_, g) = weighted_ce_loss(&p, &t, &w).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut a = p;
            let mut b = p;
            a[i] += h;
            b[i] -= h;
            let fd = (weighted_ce_loss(&a, &t, &w).unwrap().0 - weighted_ce_loss(&b, &t, &w).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7 * g[i].abs().max(1.0));
        }
    }

    #[test]
    fn weight_scaling() {
        let p = [0.3, 0.8, 0.55];
        let t = [1.0, 0.0, 1.0];
        let w = [2.0, 0.5, 1.0];
        let base = weighted_ce_loss(&p, &t, &w).unwrap().0;
        let w4: Vec<f64> = w.iter().map(|v| v * 4.0).collect();
        assert_eq!(weighted_ce_loss(&p, &t, &w4).unwrap().0 / 4.0, base);
        let w3: Vec<f64> = w.iter().map(|v| v * 3.3).collect();
        let r = weighted_ce_loss(&p, &t, &w3).unwrap().0 / 3.3;
        assert!((r - base).abs() <= 1e-15 * base.abs().max(1.0) * 4.0);
    }

    #[test]
    fn rejects_bad_shapes_and_weights() {
        assert!(weighted_ce_loss(&[0.5], &[1.0, 0.0], &[1.0]).is_err());
        assert!(weighted_ce_loss(&[0.5], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn categorical_matches_binary_for_two_classes() {
        let p1 = [0.3, 0.8, 0.55, 0.02];
        let gt = [1u8, 0, 1, 0];
        let probs: Vec<f64> = p1.iter().map(|p| 1.0 - p).chain(p1.iter().copied()).collect();
        let cw = ClassWeights::new(vec![0.7, 1.9]).unwrap();
        let w: Vec<f64> = gt.iter().map(|&g| cw.w[g as usize]).collect();
        let t: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
        let (a, _) = categorical_loss(&probs, 2, &gt, &cw, 4.0);
        let (b, _) = weighted_ce_loss(&p1, &t, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn class_weight_counts() {
        let g = Grid::isotropic([10, 10, 1]).unwrap();
        let mut labels = vec![0u8; 100];
        labels[..10].fill(1);
        let v = LabelVolume::new(g, labels).unwrap();
        let w = class_weights([&v], 2).unwrap();
        assert_eq!(w.w, vec![1.0 / 90.0, 1.0 / 10.0]);
        let balanced = LabelVolume::new(g, (0..100).map(|i| (i % 2) as u8).collect()).unwrap();
        let w = class_weights([&balanced], 2).unwrap();
        assert_eq!(w.w[0], w.w[1]);
        assert!(matches!(class_weights([&v], 3), Err(Error::AbsentClass(2))));
        let n = ClassWeights::from_counts(&[90, 10]).unwrap().normalized(&[90, 10]).unwrap();
        assert!((n.w[0] * 90.0 + n.w[1] * 10.0 - 100.0).abs() < 1e-9);
    }
}
