//! Parallel mean-field updates for the dense Potts CRF.

use rayon::prelude::*;

use super::energy::{check_inputs, unary_cost};
use super::features::Features;
use super::filter::FastGaussianFilter;
use super::params::CrfParams;
use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, ProbVolume, Volume3D};

/// Variational marginals, class-major like [`ProbVolume`] but in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct QDistribution {
    grid: Grid,
    classes: usize,
    q: Vec<f64>,
}

impl QDistribution {
    pub fn from_unary(unary: &ProbVolume) -> Self {
        Self {
            grid: *unary.grid(),
            classes: unary.classes(),
            q: unary.as_slice().iter().map(|&p| p as f64).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    pub fn prob(&self, class: usize, i: usize) -> f64 {
        self.q[class * self.grid.len() + i]
    }

    /// Largest deviation of a voxel's row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        let n = self.grid.len();
        (0..n)
            .map(|i| ((0..self.classes).map(|c| self.q[c * n + i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Per-voxel argmax, ties to the lowest label.
    pub fn argmax(&self) -> LabelVolume {
        let n = self.grid.len();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.q[c * n + i] > self.q[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelVolume::new(self.grid, labels).expect("grid-sized labels")
    }

    /// Converts to a single-precision probability volume.
    pub fn to_prob_volume(&self) -> ProbVolume {
        let mut probs: Vec<f32> = self.q.iter().map(|&v| v as f32).collect();
        crate::volume::normalize_planes(&mut probs, self.grid.len(), self.classes);
        ProbVolume::from_parts_unchecked(self.grid, self.classes, probs)
    }

    fn max_abs_diff(&self, other: &Self) -> f64 {
        self.q
            .iter()
            .zip(&other.q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Pre-built state for repeated updates on one instance: unary costs and
/// the two kernel filters.
pub struct MeanField {
    grid: Grid,
    classes: usize,
    params: CrfParams,
    /// `-log P`, class-major.
    phi: Vec<f64>,
    spatial: Option<FastGaussianFilter>,
    bilateral: Option<FastGaussianFilter>,
}

impl MeanField {
    pub fn new(unary: &ProbVolume, intensity: &Volume3D, params: &CrfParams) -> Result<Self> {
        check_inputs(unary, intensity, params)?;
        let grid = *unary.grid();
        let phi = unary.as_slice().iter().map(|&p| unary_cost(p)).collect();
        let spatial = if params.w_pos > 0.0 {
            Some(FastGaussianFilter::new(&Features::spatial(&grid, params.sigma_pos_mm)?))
        } else {
            None
        };
        let bilateral = if params.w_bil > 0.0 {
            let f = Features::bilateral(&grid, &intensity.to_f32(), params.sigma_bil_mm, params.sigma_int)?;
            Some(FastGaussianFilter::new(&f))
        } else {
            None
        };
        Ok(Self {
            grid,
            classes: unary.classes(),
            params: *params,
            phi,
            spatial,
            bilateral,
        })
    }

    /// One synchronous update of every voxel.
    pub fn step(&self, q: &QDistribution) -> Result<QDistribution> {
        if q.grid != self.grid || q.classes != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "Q has {} classes on {:?}, expected {} on {:?}",
                q.classes,
                q.grid.dims(),
                self.classes,
                self.grid.dims()
            )));
        }
        let n = self.grid.len();
        let k = self.classes;
        let mut msg = vec![0.0; n * k];
        if let Some(f) = &self.spatial {
            let m = f.apply(&q.q, k);
            msg.par_iter_mut().zip(&m).for_each(|(a, b)| *a += self.params.w_pos * b);
        }
        if let Some(f) = &self.bilateral {
            let m = f.apply(&q.q, k);
            msg.par_iter_mut().zip(&m).for_each(|(a, b)| *a += self.params.w_bil * b);
        }

        let mut out = vec![0.0; n * k];
        // Voxel-local softmax; written through a transposed scratch so the
        // parallel split stays per voxel.
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let total: f64 = (0..k).map(|c| msg[c * n + i]).sum();
                // Potts: label l pays for the message mass on every other label.
                let e: Vec<f64> = (0..k)
                    .map(|c| self.phi[c * n + i] + total - msg[c * n + i])
                    .collect();
                let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
                let w: Vec<f64> = e.iter().map(|v| (lo - v).exp()).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        for (i, r) in rows.iter().enumerate() {
            for (c, &v) in r.iter().enumerate() {
                out[c * n + i] = v;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite marginal after mean-field update".into()));
        }
        Ok(QDistribution {
            grid: self.grid,
            classes: k,
            q: out,
        })
    }
}

/// Convenience single update; rebuilds the filters every call.
pub fn meanfield_step(
    q: &QDistribution,
    unary: &ProbVolume,
    intensity: &Volume3D,
    params: &CrfParams,
) -> Result<QDistribution> {
    MeanField::new(unary, intensity, params)?.step(q)
}

/// Optional stopping rule for [`infer_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InferOptions {
    /// Stop once `max |Q' - Q|` drops below this.
    pub early_stop: Option<f64>,
}

/// Result of [`infer_with`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub q: QDistribution,
    pub map: LabelVolume,
    pub iterations_run: usize,
}

/// Mean-field inference starting from the unary distribution.
pub fn infer(unary: &ProbVolume, intensity: &Volume3D, params: &CrfParams) -> Result<(QDistribution, LabelVolume)> {
    let r = infer_with(unary, intensity, params, InferOptions::default())?;
    Ok((r.q, r.map))
}

pub fn infer_with(
    unary: &ProbVolume,
    intensity: &Volume3D,
    params: &CrfParams,
    opts: InferOptions,
) -> Result<Inference> {
    let mf = MeanField::new(unary, intensity, params)?;
    let mut q = QDistribution::from_unary(unary);
    let mut run = 0;
    for _ in 0..params.iterations {
        let next = mf.step(&q)?;
        run += 1;
        let delta = next.max_abs_diff(&q);
        q = next;
        log::debug!("mean-field iteration {run}: max dQ {delta:.3e}");
        if opts.early_stop.is_some_and(|tol| delta < tol) {
            break;
        }
    }
    let map = q.argmax();
    Ok(Inference {
        q,
        map,
        iterations_run: run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::gaussian_filter_direct;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(dims: [usize; 3], classes: usize, seed: u64) -> (ProbVolume, Volume3D) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new(dims, [1.0, 1.0, 2.0]).unwrap();
        let scores: Vec<f32> = (0..g.len() * classes).map(|_| rng.random::<f32>() + 0.01).collect();
        let u = ProbVolume::from_scores(g, classes, scores).unwrap();
        let ct = Volume3D::from_float(g, (0..g.len()).map(|_| rng.random_range(-50.0..150.0)).collect()).unwrap();
        (u, ct)
    }

    #[test]
    fn zero_pairwise_step_returns_the_unary() {
        let (u, ct) = random_instance([4, 3, 2], 3, 1);
        let q0 = QDistribution::from_unary(&u);
        let q1 = meanfield_step(&q0, &u, &ct, &CrfParams::unary_only()).unwrap();
        for (a, b) in q1.as_slice().iter().zip(u.as_slice()) {
            assert!((a - *b as f64).abs() < 1e-6);
        }
        let (_, map) = infer(&u, &ct, &CrfParams::unary_only()).unwrap();
        assert_eq!(map, u.argmax());
    }

    #[test]
    fn two_voxel_step_matches_hand_rolled_update() {
        let g = Grid::isotropic([2, 1, 1]).unwrap();
        let u = ProbVolume::new(g, 2, vec![0.1, 0.6, 0.9, 0.4]).unwrap();
        let ct = Volume3D::from_float(g, vec![10.0, 30.0]).unwrap();
        let p = CrfParams {
            w_pos: 1.5,
            w_bil: 0.5,
            sigma_pos_mm: 1.0,
            sigma_bil_mm: 2.0,
            sigma_int: 25.0,
            iterations: 1,
        };
        let q0 = QDistribution::from_unary(&u);
        let q1 = meanfield_step(&q0, &u, &ct, &p).unwrap();
        let fp = Features::spatial(&g, 1.0).unwrap();
        let fb = Features::bilateral(&g, &[10.0, 30.0], 2.0, 25.0).unwrap();
        let mp = gaussian_filter_direct(q0.as_slice(), 2, &fp).unwrap();
        let mb = gaussian_filter_direct(q0.as_slice(), 2, &fb).unwrap();
        for i in 0..2 {
            let m: Vec<f64> = (0..2).map(|c| 1.5 * mp[c * 2 + i] + 0.5 * mb[c * 2 + i]).collect();
            let e: Vec<f64> = (0..2).map(|c| -(u.prob(c, i) as f64).ln() + m[1 - c]).collect();
            let z: f64 = e.iter().map(|v| (-v).exp()).sum();
            for c in 0..2 {
                assert!((q1.prob(c, i) - (-e[c]).exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mirror_symmetric_input_gives_mirror_symmetric_q() {
        let g = Grid::new([6, 3, 2], [0.8, 0.8, 2.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scores = vec![0f32; g.len() * 3];
        let mut ct = vec![0f32; g.len()];
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let (i, j) = (g.index(x, y, z), g.index(5 - x, y, z));
                    let v: f32 = rng.random_range(-20.0..80.0);
                    ct[i] = v;
                    ct[j] = v;
                    for c in 0..3 {
                        let s: f32 = rng.random::<f32>() + 0.05;
                        scores[c * g.len() + i] = s;
                        scores[c * g.len() + j] = s;
                    }
                }
            }
        }
        let u = ProbVolume::from_scores(g, 3, scores).unwrap();
        let ct = Volume3D::from_float(g, ct).unwrap();
        let p = CrfParams {
            iterations: 3,
            ..CrfParams::default()
        };
        let (q, _) = infer(&u, &ct, &p).unwrap();
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    for c in 0..3 {
                        let a = q.prob(c, g.index(x, y, z));
                        let b = q.prob(c, g.index(5 - x, y, z));
                        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn early_stop_cuts_iterations() {
        let (u, ct) = random_instance([4, 4, 2], 2, 9);
        let r = infer_with(
            &u,
            &ct,
            &CrfParams::unary_only(),
            InferOptions { early_stop: Some(1e-4) },
        )
        .unwrap();
        assert_eq!(r.iterations_run, 1);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let (u, _) = random_instance([4, 4, 2], 2, 3);
        let ct = Volume3D::from_float(Grid::isotropic([4, 4, 3]).unwrap(), vec![0.0; 48]).unwrap();
        assert!(infer(&u, &ct, &CrfParams::default()).is_err());
    }
}
