//! Exact energy evaluation and exhaustive MAP search for tiny instances.

use super::params::CrfParams;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ProbVolume, Volume3D};

/// Largest voxel count accepted by [`energy`].
pub const ENERGY_MAX_VOXELS: usize = 4096;
/// Largest `classes^N` accepted by [`brute_force_map`].
pub const BRUTE_FORCE_MAX_LABELINGS: f64 = 1e7;

/// Probability floor applied before taking logs.
pub const UNARY_FLOOR: f64 = 1e-7;

#[inline]
pub(crate) fn unary_cost(p: f32) -> f64 {
    -(p as f64).max(UNARY_FLOOR).ln()
}

pub(crate) fn check_inputs(unary: &ProbVolume, intensity: &Volume3D, params: &CrfParams) -> Result<()> {
    params.validate()?;
    unary.grid().check_same(intensity.grid(), "unary vs intensity")
}

/// Dense pairwise weight matrix `w_pos k_pos + w_bil k_bil`, row-major.
fn pair_weights(unary: &ProbVolume, intensity: &Volume3D, params: &CrfParams) -> Vec<f64> {
    let grid = unary.grid();
    let n = grid.len();
    let pos: Vec<[f64; 3]> = (0..n).map(|i| grid.position_mm(i)).collect();
    let int = intensity.to_f64();
    let a_pos = 0.5 / (params.sigma_pos_mm * params.sigma_pos_mm);
    let a_bil = 0.5 / (params.sigma_bil_mm * params.sigma_bil_mm);
    let a_int = 0.5 / (params.sigma_int * params.sigma_int);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = (0..3).map(|a| (pos[i][a] - pos[j][a]).powi(2)).sum();
            let di = int[i] - int[j];
            let v = params.w_pos * (-a_pos * d2).exp() + params.w_bil * (-a_bil * d2 - a_int * di * di).exp();
            w[i * n + j] = v;
            w[j * n + i] = v;
        }
    }
    w
}

/// Splits an energy into its unary and pairwise parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTerms {
    pub unary: f64,
    pub pairwise: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.unary + self.pairwise
    }
}

fn check_labeling(x: &LabelVolume, unary: &ProbVolume) -> Result<()> {
    x.grid().check_same(unary.grid(), "labeling vs unary")?;
    let classes = unary.classes();
    if let Some(&l) = x.labels().iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidParameter(format!("label {l} outside {classes} classes")));
    }
    Ok(())
}

fn guard(n: usize) -> Result<()> {
    if n > ENERGY_MAX_VOXELS {
        return Err(Error::TooLarge(format!(
            "exact energy over {n} voxels exceeds {ENERGY_MAX_VOXELS}"
        )));
    }
    Ok(())
}

/// Unary and Potts pairwise energy of a labeling, summed over all pairs.
pub fn energy_terms(
    x: &LabelVolume,
    unary: &ProbVolume,
    intensity: &Volume3D,
    params: &CrfParams,
) -> Result<EnergyTerms> {
    check_inputs(unary, intensity, params)?;
    check_labeling(x, unary)?;
    let n = unary.len();
    guard(n)?;
    let w = pair_weights(unary, intensity, params);
    let l = x.labels();
    let u: f64 = (0..n).map(|i| unary_cost(unary.prob(l[i] as usize, i))).sum();
    let mut p = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if l[i] != l[j] {
                p += w[i * n + j];
            }
        }
    }
    Ok(EnergyTerms { unary: u, pairwise: p })
}

/// Total energy of a labeling.
pub fn energy(x: &LabelVolume, unary: &ProbVolume, intensity: &Volume3D, params: &CrfParams) -> Result<f64> {
    energy_terms(x, unary, intensity, params).map(|e| e.total())
}

/// Global energy minimiser by enumeration. Labelings are visited in
/// lexicographic order (voxel 0 most significant) and only a strictly lower
/// energy replaces the incumbent, so ties go to the lexicographically first.
pub fn brute_force_map(unary: &ProbVolume, intensity: &Volume3D, params: &CrfParams) -> Result<(LabelVolume, f64)> {
    check_inputs(unary, intensity, params)?;
    let n = unary.len();
    let k = unary.classes();
    if (k as f64).powi(n as i32) > BRUTE_FORCE_MAX_LABELINGS {
        return Err(Error::TooLarge(format!(
            "{k}^{n} labelings exceed {BRUTE_FORCE_MAX_LABELINGS}"
        )));
    }
    let w = pair_weights(unary, intensity, params);
    let cost: Vec<f64> = (0..k)
        .flat_map(|c| (0..n).map(move |i| (c, i)))
        .map(|(c, i)| unary_cost(unary.prob(c, i)))
        .collect();

    let mut x = vec![0u8; n];
    let mut best = x.clone();
    let mut best_e = f64::INFINITY;
    loop {
        let mut e = 0.0;
        for i in 0..n {
            e += cost[x[i] as usize * n + i];
        }
        for i in 0..n {
            for j in i + 1..n {
                if x[i] != x[j] {
                    e += w[i * n + j];
                }
            }
        }
        if e < best_e {
            best_e = e;
            best.copy_from_slice(&x);
        }
        // Odometer increment, last voxel fastest.
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok((LabelVolume::new(*unary.grid(), best)?, best_e));
            }
            pos -= 1;
            x[pos] += 1;
            if (x[pos] as usize) < k {
                break;
            }
            x[pos] = 0;
        }
    }
}
