//! Gaussian message filtering: `out_i = sum_{j != i} k(f_i, f_j) v_j`.
//!
//! Values are channel-major buffers (`channels * n`), the same layout as
//! probability volumes.

use rayon::prelude::*;

use super::features::Features;
use super::lattice::{PermutohedralLattice, DEFAULT_BLUR_PASSES};
use crate::error::{Error, Result};

/// Largest point count accepted by [`gaussian_filter_direct`].
pub const DIRECT_FILTER_MAX_POINTS: usize = 32_768;

fn check_values(values: &[f64], channels: usize, features: &Features) -> Result<usize> {
    let n = features.len();
    if channels == 0 || values.len() != n * channels {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {n} points x {channels} channels",
            values.len()
        )));
    }
    Ok(n)
}

/// Exact O(N^2) filter; the reference the fast path is checked against.
pub fn gaussian_filter_direct(values: &[f64], channels: usize, features: &Features) -> Result<Vec<f64>> {
    let n = check_values(values, channels, features)?;
    if n > DIRECT_FILTER_MAX_POINTS {
        return Err(Error::TooLarge(format!(
            "direct filtering of {n} points exceeds {DIRECT_FILTER_MAX_POINTS}"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; channels];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let k = features.kernel(i, j);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += k * values[c * n + j];
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; n * channels];
    for (i, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * n + i] = v;
        }
    }
    Ok(out)
}

/// Kernel tails beyond this many widths are dropped by the grid filters;
/// the lost weight per neighbour is below `exp(-8)`.
pub const TRUNCATION_WIDTHS: f64 = 4.0;

/// Grid windows up to this many voxels are always summed exactly.
pub const MAX_WINDOW_VOXELS: usize = 729;

/// Larger windows still win when the lattice would need more than one
/// vertex per this many window pairs. Measured on one core: a window pair
/// costs ~11 ns per 3-channel apply, a lattice vertex ~2.5 us to build plus
/// ~0.26 us per apply, which breaks even near 45 pairs per vertex at ten
/// mean-field iterations.
pub const WINDOW_PAIRS_PER_LATTICE_VERTEX: f64 = 45.0;

enum Strategy {
    /// Position-only features on a grid: exact separable convolution.
    Separable { dims: [usize; 3], taps: [Vec<f64>; 3] },
    /// Small neighbourhood on a grid: truncated exact sum.
    Window(WindowParams),
    Lattice(PermutohedralLattice),
}

struct WindowParams {
    dims: [usize; 3],
    radius: [usize; 3],
    step: [f64; 3],
    /// Intensity coordinate of every point.
    intensity: Vec<f64>,
}

/// Reusable fast filter bound to one feature set.
///
/// Grid-derived features pick the cheapest accurate scheme: separable
/// convolution for pure positions, a truncated window when the kernel spans
/// only a few voxels, and the permutohedral lattice otherwise.
pub struct FastGaussianFilter {
    n: usize,
    strategy: Strategy,
}

fn radius(step: f64, n: usize) -> usize {
    let r = (TRUNCATION_WIDTHS / step).floor();
    if r >= n as f64 {
        n.saturating_sub(1)
    } else {
        r as usize
    }
}

/// Grid offsets within the truncation ellipsoid.
fn ellipsoid_offsets(radius: [usize; 3], step: [f64; 3]) -> usize {
    let t2 = TRUNCATION_WIDTHS * TRUNCATION_WIDTHS;
    let mut count = 0;
    for dz in 0..=radius[2] {
        for dy in 0..=radius[1] {
            for dx in 0..=radius[0] {
                let d2 = (dx as f64 * step[0]).powi(2) + (dy as f64 * step[1]).powi(2) + (dz as f64 * step[2]).powi(2);
                if d2 <= t2 {
                    // Mirror images across each non-zero axis.
                    count += [dx, dy, dz].iter().map(|&d| if d == 0 { 1 } else { 2 }).product::<usize>();
                }
            }
        }
    }
    count
}

impl FastGaussianFilter {
    pub fn new(features: &Features) -> Self {
        Self::with_passes(features, DEFAULT_BLUR_PASSES)
    }

    /// Like [`new`](Self::new) but with an explicit lattice blur depth.
    pub fn with_passes(features: &Features, passes: usize) -> Self {
        let n = features.len();
        let strategy = match features.layout() {
            Some(l) if l.positions_only => {
                let taps = std::array::from_fn(|a| {
                    let r = radius(l.step[a], l.dims[a]);
                    (0..=r)
                        .map(|k| (-0.5 * (k as f64 * l.step[a]).powi(2)).exp())
                        .collect()
                });
                Strategy::Separable { dims: l.dims, taps }
            }
            Some(l) => {
                let radius: [usize; 3] = std::array::from_fn(|a| radius(l.step[a], l.dims[a]));
                let window: usize = radius.iter().map(|r| 2 * r + 1).product();
                let lattice = if window <= MAX_WINDOW_VOXELS {
                    None
                } else {
                    let pairs = n as f64 * ellipsoid_offsets(radius, l.step) as f64;
                    let budget = (pairs / WINDOW_PAIRS_PER_LATTICE_VERTEX) as usize;
                    PermutohedralLattice::with_budget(features, passes, budget)
                };
                match lattice {
                    Some(lat) => Strategy::Lattice(lat),
                    None => Strategy::Window(WindowParams {
                        dims: l.dims,
                        radius,
                        step: l.step,
                        intensity: (0..n).map(|i| features.point(i)[3]).collect(),
                    }),
                }
            }
            None => Strategy::Lattice(PermutohedralLattice::with_passes(features, passes)),
        };
        Self { n, strategy }
    }

    /// Forces the lattice path regardless of layout.
    pub fn lattice_only(features: &Features, passes: usize) -> Self {
        Self {
            n: features.len(),
            strategy: Strategy::Lattice(PermutohedralLattice::with_passes(features, passes)),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn lattice(&self) -> Option<&PermutohedralLattice> {
        match &self.strategy {
            Strategy::Lattice(l) => Some(l),
            _ => None,
        }
    }

    /// Filters with the self-interaction removed.
    pub fn apply(&self, values: &[f64], channels: usize) -> Vec<f64> {
        let n = self.n;
        assert_eq!(values.len(), n * channels, "value buffer size");
        match &self.strategy {
            Strategy::Lattice(lattice) => {
                let mut out = lattice.filter(values, channels);
                let own = lattice.self_response();
                out.par_chunks_mut(n.max(1))
                    .zip(values.par_chunks(n.max(1)))
                    .for_each(|(o, v)| {
                        for i in 0..o.len() {
                            o[i] -= own[i] * v[i];
                        }
                    });
                out
            }
            Strategy::Separable { dims, taps } => {
                let mut out = values.to_vec();
                out.par_chunks_mut(n.max(1)).for_each(|ch| {
                    for (axis, t) in taps.iter().enumerate() {
                        convolve_axis(ch, *dims, axis, t);
                    }
                });
                for (o, v) in out.iter_mut().zip(values) {
                    *o -= v;
                }
                out
            }
            Strategy::Window(w) => window_filter(values, channels, w),
        }
    }
}

/// In-place symmetric convolution along one axis with one-sided taps.
fn convolve_axis(data: &mut [f64], dims: [usize; 3], axis: usize, taps: &[f64]) {
    let len = dims[axis];
    if len < 2 || taps.len() < 2 {
        return;
    }
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let r = taps.len() - 1;
    let mut line = vec![0.0; len];
    let lines = data.len() / len;
    for l in 0..lines {
        // Start offset of line `l` among those running along `axis`.
        let start = match axis {
            0 => l * dims[0],
            1 => (l / dims[0]) * dims[0] * dims[1] + l % dims[0],
            _ => l,
        };
        for (k, v) in line.iter_mut().enumerate() {
            *v = data[start + k * stride];
        }
        for k in 0..len {
            let mut acc = taps[0] * line[k];
            let lo = k.saturating_sub(r);
            let hi = (k + r).min(len - 1);
            for m in lo..=hi {
                if m != k {
                    acc += taps[k.abs_diff(m)] * line[m];
                }
            }
            data[start + k * stride] = acc;
        }
    }
}

/// Truncated exact bilateral sum on a grid. The support is the ellipsoid
/// where the spatial part of the distance stays within the truncation
/// radius; the intensity term is never truncated.
fn window_filter(values: &[f64], channels: usize, w: &WindowParams) -> Vec<f64> {
    let n = w.intensity.len();
    let dims = w.dims;
    let t2 = TRUNCATION_WIDTHS * TRUNCATION_WIDTHS;
    let sq: [Vec<f64>; 3] =
        std::array::from_fn(|a| (0..=w.radius[a]).map(|k| (k as f64 * w.step[a]).powi(2)).collect());
    let chans: Vec<&[f64]> = values.chunks(n).collect();
    let mut inter = vec![0.0; n * channels];
    let max_row = 2 * w.radius[0] + 1;
    inter
        .par_chunks_mut(channels)
        .enumerate()
        .for_each_init(
            || vec![0.0f64; max_row],
            |kbuf, (i, acc)| {
                let x = i % dims[0];
                let y = (i / dims[0]) % dims[1];
                let z = i / (dims[0] * dims[1]);
                let ai = w.intensity[i];
                acc.fill(0.0);
                for zz in z.saturating_sub(w.radius[2])..=(z + w.radius[2]).min(dims[2] - 1) {
                    let tz = sq[2][z.abs_diff(zz)];
                    for yy in y.saturating_sub(w.radius[1])..=(y + w.radius[1]).min(dims[1] - 1) {
                        let ty = tz + sq[1][y.abs_diff(yy)];
                        if ty > t2 {
                            continue;
                        }
                        // Half-width of this row inside the ellipsoid.
                        let rx = sq[0].partition_point(|&v| ty + v <= t2) - 1;
                        let row = (zz * dims[1] + yy) * dims[0];
                        let (lo, hi) = (x.saturating_sub(rx), (x + rx).min(dims[0] - 1));
                        let len = hi - lo + 1;
                        let ints = &w.intensity[row + lo..=row + hi];
                        for (k, (kb, &aj)) in kbuf[..len].iter_mut().zip(ints).enumerate() {
                            let di = ai - aj;
                            *kb = (-0.5 * (ty + sq[0][x.abs_diff(lo + k)] + di * di)).exp();
                        }
                        for (a, ch) in acc.iter_mut().zip(&chans) {
                            let vals = &ch[row + lo..=row + hi];
                            let mut sum = 0.0;
                            for (kb, v) in kbuf[..len].iter().zip(vals) {
                                sum += kb * v;
                            }
                            *a += sum;
                        }
                    }
                }
                // The loop included j = i with weight exactly 1.
                for (a, ch) in acc.iter_mut().zip(&chans) {
                    *a -= ch[i];
                }
            },
        );
    let mut out = vec![0.0; n * channels];
    for i in 0..n {
        for c in 0..channels {
            out[c * n + i] = inter[i * channels + c];
        }
    }
    out
}

/// Linear-time approximation of [`gaussian_filter_direct`].
pub fn gaussian_filter_fast(values: &[f64], channels: usize, features: &Features) -> Result<Vec<f64>> {
    check_values(values, channels, features)?;
    Ok(FastGaussianFilter::new(features).apply(values, channels))
}

