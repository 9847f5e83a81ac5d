//! Intensity windowing, per-slice histogram equalisation and slice
//! augmentation for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{LabelSlice2D, Scalars, Slice2D, Volume3D};

pub const DEFAULT_WINDOW: (f32, f32) = (-100.0, 400.0);
pub const DEFAULT_BINS: usize = 256;

fn check_range(lo: f32, hi: f32) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && lo < hi {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("window [{lo}, {hi}] needs finite lo < hi")))
    }
}

/// Clamps every voxel to `[lo, hi]`. 16-bit volumes stay 16-bit and clamp
/// to `[ceil(lo), floor(hi)]` so the result never leaves the window.
pub fn hu_window(vol: &Volume3D, lo: f32, hi: f32) -> Result<Volume3D> {
    check_range(lo, hi)?;
    let data = match vol.data() {
        Scalars::Short(v) => {
            let (a, b) = (lo.ceil().max(i16::MIN as f32), hi.floor().min(i16::MAX as f32));
            if a > b {
                return Err(Error::InvalidParameter(format!(
                    "window [{lo}, {hi}] holds no 16-bit value"
                )));
            }
            let (a, b) = (a as i16, b as i16);
            Scalars::Short(v.iter().map(|&x| x.clamp(a, b)).collect())
        }
        Scalars::Float(v) => Scalars::Float(v.iter().map(|&x| x.clamp(lo, hi)).collect()),
    };
    Volume3D::new(*vol.grid(), data)
}

/// CDF remapping of one slice over `bins` equal-width bins of `[lo, hi]`:
/// `v -> lo + (hi - lo) (cdf(bin v) - cdf_min) / (1 - cdf_min)`, where
/// `cdf_min` belongs to the first non-empty bin. A slice that fills a
/// single bin maps to `lo`.
pub fn hist_equalize_slice(slice: &Slice2D, bins: usize, range: (f32, f32)) -> Result<Slice2D> {
    let (lo, hi) = range;
    check_range(lo, hi)?;
    if bins == 0 {
        return Err(Error::InvalidParameter("bins must be >= 1".into()));
    }
    if slice.data.is_empty() {
        return Err(Error::InvalidParameter("empty slice".into()));
    }
    if let Some(v) = slice.data.iter().find(|v| !(**v >= lo && **v <= hi)) {
        return Err(Error::InvalidParameter(format!(
            "value {v} outside equalisation range [{lo}, {hi}]"
        )));
    }
    let width = (hi - lo) as f64;
    let bin = |v: f32| (((v - lo) as f64 / width * bins as f64) as usize).min(bins - 1);
    let mut hist = vec![0usize; bins];
    for &v in &slice.data {
        hist[bin(v)] += 1;
    }
    let total = slice.data.len() as f64;
    let mut cdf = vec![0.0f64; bins];
    let mut acc = 0usize;
    for (c, h) in cdf.iter_mut().zip(&hist) {
        acc += h;
        *c = acc as f64 / total;
    }
    let first = hist.iter().position(|&h| h > 0).expect("non-empty slice");
    let cdf_min = cdf[first];
    let span = 1.0 - cdf_min;
    let data = slice
        .data
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                lo
            } else {
                let t = (cdf[bin(v)] - cdf_min) / span;
                (lo as f64 + width * t).clamp(lo as f64, hi as f64) as f32
            }
        })
        .collect();
    Slice2D::new(slice.width, slice.height, data)
}

/// Equalises every axial slice independently; the result is real-valued.
pub fn hist_equalize_volume(vol: &Volume3D, bins: usize, range: (f32, f32)) -> Result<Volume3D> {
    let nz = vol.grid().dims()[2];
    let mut data = Vec::with_capacity(vol.len());
    for z in 0..nz {
        data.extend(hist_equalize_slice(&vol.slice_z(z), bins, range)?.data);
    }
    Volume3D::from_float(*vol.grid(), data)
}

/// Random geometric and noise perturbation bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub max_shift_vox: u32,
    pub max_rot_deg: f64,
    /// Standard deviation of additive noise, in intensity units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            max_shift_vox: 20,
            max_rot_deg: 10.0,
            noise_sigma: 10.0,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            max_shift_vox: 0,
            max_rot_deg: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_rot_deg.is_finite() && self.max_rot_deg >= 0.0) {
            return Err(Error::InvalidParameter(format!("max_rot_deg {}", self.max_rot_deg)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise_sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform2D {
    pub shift: [i64; 2],
    pub angle_deg: f64,
}

impl Transform2D {
    pub fn identity() -> Self {
        Self {
            shift: [0, 0],
            angle_deg: 0.0,
        }
    }

    /// Source position sampled by output pixel `(x, y)`: the inverse of
    /// rotation about the slice centre followed by the shift.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
        let px = x as f64 - self.shift[0] as f64;
        let py = y as f64 - self.shift[1] as f64;
        if self.angle_deg == 0.0 {
            return (px, py);
        }
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (px - cx, py - cy);
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    }
}

fn clamp_index(v: f64, n: usize) -> usize {
    if v <= 0.0 {
        0
    } else {
        (v as usize).min(n - 1)
    }
}

fn sample_bilinear(img: &Slice2D, sx: f64, sy: f64) -> f32 {
    let (w, h) = (img.width, img.height);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    if fx == 0.0 && fy == 0.0 {
        return img.at(x0, y0);
    }
    let a = img.at(x0, y0) as f64 * (1.0 - fx) + img.at(x1, y0) as f64 * fx;
    let b = img.at(x0, y1) as f64 * (1.0 - fx) + img.at(x1, y1) as f64 * fx;
    (a * (1.0 - fy) + b * fy) as f32
}

/// Nearest source pixel, ties toward the lower index.
fn sample_nearest(lab: &LabelSlice2D, sx: f64, sy: f64) -> u8 {
    let x = clamp_index((sx - 0.5).ceil(), lab.width);
    let y = clamp_index((sy - 0.5).ceil(), lab.height);
    lab.at(x, y)
}

/// Applies a fixed transform: bilinear for intensities, nearest for labels,
/// edges clamped.
pub fn apply_transform(slice: &Slice2D, labels: &LabelSlice2D, t: &Transform2D) -> Result<(Slice2D, LabelSlice2D)> {
    if slice.width != labels.width || slice.height != labels.height {
        return Err(Error::ShapeMismatch(format!(
            "slice {}x{} vs labels {}x{}",
            slice.width, slice.height, labels.width, labels.height
        )));
    }
    let (w, h) = (slice.width, slice.height);
    let mut img = Vec::with_capacity(w * h);
    let mut lab = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.source(x, y, w, h);
            img.push(sample_bilinear(slice, sx, sy));
            lab.push(sample_nearest(labels, sx, sy));
        }
    }
    Ok((Slice2D::new(w, h, img)?, LabelSlice2D::new(w, h, lab)?))
}

/// Seeded random shift, rotation and intensity noise. The label slice gets
/// the same geometry and no noise.
pub fn augment(slice: &Slice2D, labels: &LabelSlice2D, params: &AugmentParams) -> Result<(Slice2D, LabelSlice2D)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let m = params.max_shift_vox as i64;
    let shift = [rng.random_range(-m..=m), rng.random_range(-m..=m)];
    let angle_deg = if params.max_rot_deg > 0.0 {
        rng.random_range(-params.max_rot_deg..=params.max_rot_deg)
    } else {
        0.0
    };
    let (mut img, lab) = apply_transform(slice, labels, &Transform2D { shift, angle_deg })?;
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::InvalidParameter(format!("noise_sigma: {e}")))?;
        for v in &mut img.data {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn ramp(w: usize, h: usize) -> (Slice2D, LabelSlice2D) {
        let img = Slice2D::new(w, h, (0..w * h).map(|i| (i * 7 % 31) as f32).collect()).unwrap();
        let lab = LabelSlice2D::new(w, h, (0..w * h).map(|i| (i % 3) as u8).collect()).unwrap();
        (img, lab)
    }

    #[test]
    fn window_clamps_to_defaults() {
        let g = Grid::isotropic([3, 1, 1]).unwrap();
        let v = Volume3D::from_short(g, vec![1000, -200, 250]).unwrap();
        let (lo, hi) = DEFAULT_WINDOW;
        let w = hu_window(&v, lo, hi).unwrap();
        assert_eq!(w.data(), &Scalars::Short(vec![400, -100, 250]));
        assert_eq!(hu_window(&w, lo, hi).unwrap(), w);
        assert!(hu_window(&v, 5.0, 5.0).is_err());
    }

    #[test]
    fn equalize_constant_and_two_valued() {
        let c = Slice2D::filled(4, 4, 123.0);
        assert!(hist_equalize_slice(&c, 256, DEFAULT_WINDOW)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == -100.0));
        let two = Slice2D::new(2, 2, vec![-100.0, 400.0, 400.0, -100.0]).unwrap();
        assert_eq!(hist_equalize_slice(&two, 256, DEFAULT_WINDOW).unwrap(), two);
    }

    #[test]
    fn equalize_uniform_histogram_is_near_identity() {
        // One value per bin centre.
        let bins = 64;
        let data: Vec<f32> = (0..bins).map(|b| (b as f32 + 0.5) * 500.0 / bins as f32 - 100.0).collect();
        let s = Slice2D::new(bins, 1, data.clone()).unwrap();
        let out = hist_equalize_slice(&s, bins, DEFAULT_WINDOW).unwrap();
        let bw = 500.0 / bins as f32;
        for (a, b) in out.data.iter().zip(&data) {
            assert!((a - b).abs() <= bw, "{a} vs {b}");
        }
    }

    #[test]
    fn equalize_rejects_bad_input() {
        assert!(hist_equalize_slice(&Slice2D::filled(2, 2, 500.0), 256, DEFAULT_WINDOW).is_err());
        assert!(hist_equalize_slice(&Slice2D::filled(2, 2, 0.0), 256, (1.0, 1.0)).is_err());
        let empty = Slice2D {
            width: 0,
            height: 0,
            data: vec![],
        };
        assert!(hist_equalize_slice(&empty, 256, DEFAULT_WINDOW).is_err());
    }

    #[test]
    fn zero_params_are_identity() {
        let (img, lab) = ramp(9, 7);
        let (a, b) = augment(&img, &lab, &AugmentParams::none()).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, lab);
    }

    #[test]
    fn same_seed_same_output() {
        let (img, lab) = ramp(16, 12);
        let p = AugmentParams {
            seed: 42,
            ..AugmentParams::default()
        };
        assert_eq!(augment(&img, &lab, &p).unwrap(), augment(&img, &lab, &p).unwrap());
    }

    #[test]
    fn pure_shift_moves_pixels() {
        let (img, lab) = ramp(10, 6);
        let t = Transform2D {
            shift: [2, 0],
            angle_deg: 0.0,
        };
        let (a, b) = apply_transform(&img, &lab, &t).unwrap();
        for y in 0..6 {
            for x in 0..10usize {
                let sx = x.saturating_sub(2);
                assert_eq!(a.at(x, y), img.at(sx, y));
                assert_eq!(b.at(x, y), lab.at(sx, y));
            }
        }
    }

    #[test]
    fn rotation_by_ninety_degrees_permutes_pixels() {
        let (img, lab) = ramp(5, 5);
        let t = Transform2D {
            shift: [0, 0],
            angle_deg: 90.0,
        };
        let (a, b) = apply_transform(&img, &lab, &t).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                // Inverse rotation maps (x, y) to (y, 4 - x) about the centre.
                assert!((a.at(x, y) - img.at(y, 4 - x)).abs() < 1e-4);
                assert_eq!(b.at(x, y), lab.at(y, 4 - x));
            }
        }
    }

    #[test]
    fn mismatched_dims_fail() {
        let (img, _) = ramp(4, 4);
        let (_, lab) = ramp(4, 5);
        assert!(augment(&img, &lab, &AugmentParams::none()).is_err());
    }
}
