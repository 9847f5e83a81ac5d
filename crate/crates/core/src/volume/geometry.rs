//! Cropping and resampling on the voxel grid.
//!
//! Resampling uses the align-corners convention: destination index `d` along
//! an axis maps to source coordinate `d * (src_n - 1) / (dst_n - 1)`, or to
//! the axis centre when `dst_n == 1`. Samples outside the source clamp to the
//! nearest edge voxel.

use super::{round_to_i16, BoundingBox, Dims, Grid, LabelVolume, ProbVolume, Scalars, Volume3D};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Geometric operations common to all volume kinds.
pub trait Resample: Sized {
    fn grid(&self) -> &Grid;

    /// Copies the voxels of `bbox` grown by `pad_mm` (clamped to the grid).
    fn crop(&self, bbox: &BoundingBox, pad_mm: f64) -> Result<Self>;

    fn resample(&self, new_dims: Dims, mode: Interpolation) -> Result<Self>;
}

pub fn crop<V: Resample>(vol: &V, bbox: &BoundingBox, pad_mm: f64) -> Result<V> {
    vol.crop(bbox, pad_mm)
}

pub fn resample<V: Resample>(vol: &V, new_dims: Dims, mode: Interpolation) -> Result<V> {
    vol.resample(new_dims, mode)
}

fn effective_box(grid: &Grid, bbox: &BoundingBox, pad_mm: f64) -> Result<BoundingBox> {
    if !bbox.fits(grid.dims()) {
        return Err(Error::BoxOutOfRange {
            lo: bbox.lo,
            hi: bbox.hi,
            dims: grid.dims(),
        });
    }
    bbox.padded(pad_mm, grid)
}

fn crop_plane<T: Copy>(src: &[T], dims: Dims, b: &BoundingBox) -> Vec<T> {
    let ext = b.extent();
    let mut out = Vec::with_capacity(ext[0] * ext[1] * ext[2]);
    for z in b.lo[2]..=b.hi[2] {
        for y in b.lo[1]..=b.hi[1] {
            let row = b.lo[0] + dims[0] * (y + dims[1] * z);
            out.extend_from_slice(&src[row..row + ext[0]]);
        }
    }
    out
}

/// Per-axis source sampling positions for the align-corners mapping.
fn source_coords(src_n: usize, dst_n: usize) -> Vec<f64> {
    if dst_n == 1 {
        return vec![(src_n as f64 - 1.0) / 2.0];
    }
    let step = (src_n as f64 - 1.0) / (dst_n as f64 - 1.0);
    (0..dst_n).map(|d| d as f64 * step).collect()
}

fn resampled_grid(grid: &Grid, new_dims: Dims) -> Result<Grid> {
    if new_dims.iter().any(|&n| n == 0) {
        return Err(Error::InvalidDims(new_dims));
    }
    let dims = grid.dims();
    let sp = grid.spacing();
    let mut out = [0.0; 3];
    for a in 0..3 {
        // Preserve the centre-to-centre extent where defined, the full
        // extent otherwise.
        out[a] = if dims[a] == new_dims[a] {
            sp[a]
        } else if dims[a] > 1 && new_dims[a] > 1 {
            sp[a] * (dims[a] - 1) as f64 / (new_dims[a] - 1) as f64
        } else {
            sp[a] * dims[a] as f64 / new_dims[a] as f64
        };
    }
    Grid::new(new_dims, out)
}

struct LinearTaps {
    lo: usize,
    hi: usize,
    w: f64,
}

fn linear_taps(src_n: usize, dst_n: usize) -> Vec<LinearTaps> {
    source_coords(src_n, dst_n)
        .into_iter()
        .map(|c| {
            let c = c.clamp(0.0, (src_n - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(src_n - 1);
            LinearTaps {
                lo,
                hi,
                w: c - lo as f64,
            }
        })
        .collect()
}

fn nearest_taps(src_n: usize, dst_n: usize) -> Vec<usize> {
    source_coords(src_n, dst_n)
        .into_iter()
        // ceil(c - 0.5) rounds half-way cases down.
        .map(|c| ((c - 0.5).ceil().max(0.0) as usize).min(src_n - 1))
        .collect()
}

fn resample_nearest<T: Copy>(src: &[T], dims: Dims, new_dims: Dims) -> Vec<T> {
    let tx = nearest_taps(dims[0], new_dims[0]);
    let ty = nearest_taps(dims[1], new_dims[1]);
    let tz = nearest_taps(dims[2], new_dims[2]);
    let mut out = Vec::with_capacity(new_dims.iter().product());
    for &z in &tz {
        for &y in &ty {
            let row = dims[0] * (y + dims[1] * z);
            out.extend(tx.iter().map(|&x| src[row + x]));
        }
    }
    out
}

fn resample_linear(src: &[f64], dims: Dims, new_dims: Dims) -> Vec<f64> {
    let tx = linear_taps(dims[0], new_dims[0]);
    let ty = linear_taps(dims[1], new_dims[1]);
    let tz = linear_taps(dims[2], new_dims[2]);
    let at = |x: usize, y: usize, z: usize| src[x + dims[0] * (y + dims[1] * z)];
    let lerp = |a: f64, b: f64, w: f64| if w == 0.0 { a } else { a + (b - a) * w };
    let mut out = Vec::with_capacity(new_dims.iter().product());
    for z in &tz {
        for y in &ty {
            for x in &tx {
                let c00 = lerp(at(x.lo, y.lo, z.lo), at(x.hi, y.lo, z.lo), x.w);
                let c10 = lerp(at(x.lo, y.hi, z.lo), at(x.hi, y.hi, z.lo), x.w);
                let c01 = lerp(at(x.lo, y.lo, z.hi), at(x.hi, y.lo, z.hi), x.w);
                let c11 = lerp(at(x.lo, y.hi, z.hi), at(x.hi, y.hi, z.hi), x.w);
                let c0 = lerp(c00, c10, y.w);
                let c1 = lerp(c01, c11, y.w);
                out.push(lerp(c0, c1, z.w));
            }
        }
    }
    out
}

impl Resample for Volume3D {
    fn grid(&self) -> &Grid {
        Volume3D::grid(self)
    }

    fn crop(&self, bbox: &BoundingBox, pad_mm: f64) -> Result<Self> {
        let b = effective_box(self.grid(), bbox, pad_mm)?;
        let dims = self.grid().dims();
        let grid = self.grid().with_dims(b.extent())?;
        let data = match self.data() {
            Scalars::Short(v) => Scalars::Short(crop_plane(v, dims, &b)),
            Scalars::Float(v) => Scalars::Float(crop_plane(v, dims, &b)),
        };
        Volume3D::new(grid, data)
    }

    fn resample(&self, new_dims: Dims, mode: Interpolation) -> Result<Self> {
        let grid = resampled_grid(self.grid(), new_dims)?;
        let dims = self.grid().dims();
        let data = match (mode, self.data()) {
            (Interpolation::Nearest, Scalars::Short(v)) => {
                Scalars::Short(resample_nearest(v, dims, new_dims))
            }
            (Interpolation::Nearest, Scalars::Float(v)) => {
                Scalars::Float(resample_nearest(v, dims, new_dims))
            }
            (Interpolation::Linear, Scalars::Short(_)) => {
                let out = resample_linear(&self.to_f64(), dims, new_dims);
                Scalars::Short(out.into_iter().map(|v| round_to_i16(v as f32)).collect())
            }
            (Interpolation::Linear, Scalars::Float(_)) => {
                let out = resample_linear(&self.to_f64(), dims, new_dims);
                Scalars::Float(out.into_iter().map(|v| v as f32).collect())
            }
        };
        Volume3D::new(grid, data)
    }
}

impl Resample for LabelVolume {
    fn grid(&self) -> &Grid {
        LabelVolume::grid(self)
    }

    fn crop(&self, bbox: &BoundingBox, pad_mm: f64) -> Result<Self> {
        let b = effective_box(self.grid(), bbox, pad_mm)?;
        let grid = self.grid().with_dims(b.extent())?;
        LabelVolume::new(grid, crop_plane(self.labels(), self.grid().dims(), &b))
    }

    fn resample(&self, new_dims: Dims, mode: Interpolation) -> Result<Self> {
        if mode == Interpolation::Linear {
            return Err(Error::InvalidParameter(
                "linear interpolation is undefined for label volumes; use nearest".into(),
            ));
        }
        let grid = resampled_grid(self.grid(), new_dims)?;
        LabelVolume::new(
            grid,
            resample_nearest(self.labels(), self.grid().dims(), new_dims),
        )
    }
}

impl Resample for ProbVolume {
    fn grid(&self) -> &Grid {
        ProbVolume::grid(self)
    }

    fn crop(&self, bbox: &BoundingBox, pad_mm: f64) -> Result<Self> {
        let b = effective_box(self.grid(), bbox, pad_mm)?;
        let grid = self.grid().with_dims(b.extent())?;
        let dims = self.grid().dims();
        let mut probs = Vec::with_capacity(grid.len() * self.classes());
        for c in 0..self.classes() {
            probs.extend(crop_plane(self.plane(c), dims, &b));
        }
        Ok(ProbVolume::from_parts_unchecked(grid, self.classes(), probs))
    }

    fn resample(&self, new_dims: Dims, mode: Interpolation) -> Result<Self> {
        let grid = resampled_grid(self.grid(), new_dims)?;
        let dims = self.grid().dims();
        let mut probs = Vec::with_capacity(grid.len() * self.classes());
        for c in 0..self.classes() {
            match mode {
                Interpolation::Nearest => probs.extend(resample_nearest(self.plane(c), dims, new_dims)),
                Interpolation::Linear => {
                    let plane: Vec<f64> = self.plane(c).iter().map(|&p| p as f64).collect();
                    probs.extend(
                        resample_linear(&plane, dims, new_dims)
                            .into_iter()
                            .map(|v| v as f32),
                    );
                }
            }
        }
        if mode == Interpolation::Linear {
            super::normalize_planes(&mut probs, grid.len(), self.classes());
        }
        Ok(ProbVolume::from_parts_unchecked(grid, self.classes(), probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims) -> Volume3D {
        let g = Grid::isotropic(dims).unwrap();
        Volume3D::from_float(g, (0..g.len()).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn full_box_crop_is_identity() {
        let v = ramp([4, 4, 2]);
        let c = v.crop(&BoundingBox::full([4, 4, 2]), 0.0).unwrap();
        assert_eq!(c, v);
    }

    #[test]
    fn crop_matches_brute_force_copy() {
        let v = ramp([4, 4, 2]);
        let b = BoundingBox::new([1, 1, 1], [2, 2, 1]).unwrap();
        let c = v.crop(&b, 0.0).unwrap();
        assert_eq!(c.grid().dims(), [2, 2, 1]);
        let mut expected = Vec::new();
        for z in 1..=1 {
            for y in 1..=2 {
                for x in 1..=2 {
                    expected.push(v.get(v.grid().index(x, y, z)));
                }
            }
        }
        assert_eq!(c.to_f32(), expected);
    }

    #[test]
    fn crop_padding_converts_mm_per_axis() {
        let g = Grid::new([12, 12, 6], [1.0, 1.0, 3.0]).unwrap();
        let v = Volume3D::from_short(g, vec![0; g.len()]).unwrap();
        let b = BoundingBox::new([5, 5, 2], [6, 6, 3]).unwrap();
        let c = v.crop(&b, 3.0).unwrap();
        // 3 voxels each side in x/y, 1 in z.
        assert_eq!(c.grid().dims(), [8, 8, 4]);
        let edge = BoundingBox::new([0, 0, 0], [1, 1, 0]).unwrap();
        assert_eq!(v.crop(&edge, 3.0).unwrap().grid().dims(), [5, 5, 2]);
    }

    #[test]
    fn crop_out_of_range_errors() {
        let v = ramp([4, 4, 2]);
        let b = BoundingBox::new([0, 0, 0], [4, 1, 1]).unwrap();
        assert!(matches!(v.crop(&b, 0.0), Err(Error::BoxOutOfRange { .. })));
    }

    #[test]
    fn resample_identity_both_modes() {
        let v = ramp([5, 3, 2]);
        for mode in [Interpolation::Linear, Interpolation::Nearest] {
            let r = v.resample([5, 3, 2], mode).unwrap();
            assert_eq!(r, v);
        }
    }

    #[test]
    fn linear_two_to_three_align_corners() {
        let g = Grid::isotropic([2, 1, 1]).unwrap();
        let v = Volume3D::from_float(g, vec![0.0, 10.0]).unwrap();
        let r = v.resample([3, 1, 1], Interpolation::Linear).unwrap();
        assert_eq!(r.to_f32(), vec![0.0, 5.0, 10.0]);
        assert_eq!(r.grid().spacing()[0], 0.5);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let g = Grid::new([3, 4, 5], [0.7, 0.7, 2.5]).unwrap();
        let v = Volume3D::from_short(g, vec![-42; g.len()]).unwrap();
        for mode in [Interpolation::Linear, Interpolation::Nearest] {
            let r = v.resample([7, 2, 9], mode).unwrap();
            assert!(r.to_f32().iter().all(|&x| x == -42.0));
        }
    }

    #[test]
    fn nearest_ties_go_low() {
        let g = Grid::isotropic([2, 1, 1]).unwrap();
        let v = Volume3D::from_float(g, vec![1.0, 2.0]).unwrap();
        // Single output voxel samples the centre 0.5, which ties.
        let r = v.resample([1, 1, 1], Interpolation::Nearest).unwrap();
        assert_eq!(r.to_f32(), vec![1.0]);
    }

    #[test]
    fn labels_refuse_linear() {
        let g = Grid::isotropic([2, 2, 2]).unwrap();
        let l = LabelVolume::zeros(g);
        assert!(l.resample([3, 3, 3], Interpolation::Linear).is_err());
    }

    #[test]
    fn prob_resample_stays_normalized() {
        let g = Grid::isotropic([3, 2, 2]).unwrap();
        let n = g.len();
        let mut p = vec![0.0f32; 3 * n];
        for i in 0..n {
            let a = (i % 3) as f32 / 4.0;
            p[i] = a;
            p[n + i] = 0.5;
            p[2 * n + i] = 0.5 - a;
        }
        let pv = ProbVolume::new(g, 3, p).unwrap();
        let r = pv.resample([7, 5, 3], Interpolation::Linear).unwrap();
        ProbVolume::new(*r.grid(), 3, r.as_slice().to_vec()).unwrap();
    }
}
