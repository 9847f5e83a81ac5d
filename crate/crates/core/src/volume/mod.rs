//! Volumetric data types shared by the whole pipeline.
//!
//! Every volume lives on a [`Grid`]: positive voxel counts per axis plus the
//! physical voxel spacing in millimetres. Voxels are stored x-fastest, then y,
//! then z. Multi-channel data (class probabilities) stores the channel axis
//! slowest, one contiguous plane per channel.

mod components;
mod geometry;
mod metaimage;

pub use components::{label_components, largest_component};
pub use geometry::{crop, resample, Interpolation, Resample};
pub use metaimage::{load_labels, load_probs, load_scalar, load_volume, save_volume, AnyVolume};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

/// Voxel lattice geometry: dims and spacing (mm).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dims: Dims,
    spacing: Spacing,
}

impl Grid {
    pub fn new(dims: Dims, spacing: Spacing) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidDims(dims));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidSpacing(spacing));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spacing grid.
    pub fn isotropic(dims: Dims) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let yz = i / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    /// Voxel centre in millimetres (index times spacing).
    #[inline]
    pub fn position_mm(&self, i: usize) -> [f64; 3] {
        let c = self.coords(i);
        [
            c[0] as f64 * self.spacing[0],
            c[1] as f64 * self.spacing[1],
            c[2] as f64 * self.spacing[2],
        ]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub(crate) fn with_dims(&self, dims: Dims) -> Result<Self> {
        Self::new(dims, self.spacing)
    }

    pub fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        if self.spacing != other.spacing {
            return Err(Error::ShapeMismatch(format!(
                "{what}: spacing {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }
}

/// Scalar payload of a [`Volume3D`].
#[derive(Clone, Debug, PartialEq)]
pub enum Scalars {
    /// Signed 16-bit values, typically Hounsfield units.
    Short(Vec<i16>),
    Float(Vec<f32>),
}

impl Scalars {
    pub fn len(&self) -> usize {
        match self {
            Scalars::Short(v) => v.len(),
            Scalars::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scalar 3D image (HU or real intensities).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Scalars,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Scalars) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ElementCountMismatch {
                expected: grid.len(),
                found: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn from_short(grid: Grid, data: Vec<i16>) -> Result<Self> {
        Self::new(grid, Scalars::Short(data))
    }

    pub fn from_float(grid: Grid, data: Vec<f32>) -> Result<Self> {
        Self::new(grid, Scalars::Float(data))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &Scalars {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f32 {
        match &self.data {
            Scalars::Short(v) => v[i] as f32,
            Scalars::Float(v) => v[i],
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            Scalars::Short(v) => v.iter().map(|&x| x as f32).collect(),
            Scalars::Float(v) => v.clone(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i) as f64).collect()
    }

    /// Applies `f` voxel-wise, keeping the element type (results are rounded
    /// and saturated for 16-bit data).
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume3D {
        let data = match &self.data {
            Scalars::Short(v) => Scalars::Short(v.iter().map(|&x| round_to_i16(f(x as f32))).collect()),
            Scalars::Float(v) => Scalars::Float(v.iter().map(|&x| f(x)).collect()),
        };
        Volume3D {
            grid: self.grid,
            data,
        }
    }

    /// Axial slice `z` as a row-major (y, x) grid of reals.
    pub fn slice_z(&self, z: usize) -> Slice2D {
        let [nx, ny, _] = self.grid.dims();
        let base = nx * ny * z;
        let data = (0..nx * ny).map(|k| self.get(base + k)).collect();
        Slice2D {
            width: nx,
            height: ny,
            data,
        }
    }
}

pub(crate) fn round_to_i16(v: f32) -> i16 {
    v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16
}

/// Dense 2D scalar grid in row-major order (x fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Slice2D {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDims([width, height, 1]));
        }
        if data.len() != width * height {
            return Err(Error::ElementCountMismatch {
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[x + self.width * y]
    }
}

/// Row-major 2D label grid, the label counterpart of [`Slice2D`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSlice2D {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelSlice2D {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDims([width, height, 1]));
        }
        if labels.len() != width * height {
            return Err(Error::ElementCountMismatch {
                expected: width * height,
                found: labels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.labels[x + self.width * y]
    }
}

/// Per-voxel categorical distribution, class planes stored slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    grid: Grid,
    classes: usize,
    probs: Vec<f32>,
}

/// Row-sum tolerance accepted by [`ProbVolume::new`].
pub const PROB_SUM_TOLERANCE: f32 = 1e-5;

impl ProbVolume {
    /// Validates non-negativity and unit row sums.
    pub fn new(grid: Grid, classes: usize, probs: Vec<f32>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidProbabilities(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        let n = grid.len();
        if probs.len() != n * classes {
            return Err(Error::ElementCountMismatch {
                expected: n * classes,
                found: probs.len(),
            });
        }
        for i in 0..n {
            let mut sum = 0.0f64;
            for c in 0..classes {
                let p = probs[c * n + i];
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(Error::InvalidProbabilities(format!(
                        "voxel {i} class {c} has probability {p}"
                    )));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE as f64 {
                return Err(Error::InvalidProbabilities(format!(
                    "voxel {i} sums to {sum}"
                )));
            }
        }
        Ok(Self {
            grid,
            classes,
            probs,
        })
    }

    /// Builds a distribution from non-negative scores by per-voxel
    /// normalisation. All-zero rows become uniform.
    pub fn from_scores(grid: Grid, classes: usize, mut scores: Vec<f32>) -> Result<Self> {
        let n = grid.len();
        if scores.len() != n * classes {
            return Err(Error::ElementCountMismatch {
                expected: n * classes,
                found: scores.len(),
            });
        }
        normalize_planes(&mut scores, n, classes);
        Self::new(grid, classes, scores)
    }

    /// One-hot encoding of a label volume.
    pub fn one_hot(labels: &LabelVolume, classes: usize) -> Result<Self> {
        let n = labels.len();
        let mut probs = vec![0.0f32; n * classes];
        for (i, &l) in labels.labels().iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::InvalidParameter(format!(
                    "label {l} at voxel {i} exceeds class count {classes}"
                )));
            }
            probs[l * n + i] = 1.0;
        }
        Self::new(*labels.grid(), classes, probs)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// All class planes, class-major.
    pub fn as_slice(&self) -> &[f32] {
        &self.probs
    }

    pub fn plane(&self, class: usize) -> &[f32] {
        let n = self.len();
        &self.probs[class * n..(class + 1) * n]
    }

    #[inline]
    pub fn prob(&self, class: usize, i: usize) -> f32 {
        self.probs[class * self.grid.len() + i]
    }

    /// Per-voxel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> LabelVolume {
        let n = self.len();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0usize;
                let mut best_p = self.probs[i];
                for c in 1..self.classes {
                    let p = self.probs[c * n + i];
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                best as u8
            })
            .collect();
        LabelVolume {
            grid: self.grid,
            labels,
        }
    }

    /// Collapses classes `1..` into a single foreground class.
    pub fn foreground_binary(&self) -> ProbVolume {
        let n = self.len();
        let mut probs = vec![0.0f32; 2 * n];
        for i in 0..n {
            let bg = self.probs[i];
            probs[i] = bg;
            probs[n + i] = 1.0 - bg;
        }
        ProbVolume {
            grid: self.grid,
            classes: 2,
            probs,
        }
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, classes: usize, probs: Vec<f32>) -> Self {
        debug_assert_eq!(probs.len(), grid.len() * classes);
        Self {
            grid,
            classes,
            probs,
        }
    }
}

/// Normalises each voxel's class vector of a class-major buffer in place.
pub(crate) fn normalize_planes(buf: &mut [f32], n: usize, classes: usize) {
    for i in 0..n {
        let sum: f64 = (0..classes).map(|c| buf[c * n + i].max(0.0) as f64).sum();
        for c in 0..classes {
            let v = &mut buf[c * n + i];
            *v = if sum > 0.0 {
                (v.max(0.0) as f64 / sum) as f32
            } else {
                1.0 / classes as f32
            };
        }
    }
}

/// Hard per-voxel label assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: Grid, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::ElementCountMismatch {
                expected: grid.len(),
                found: labels.len(),
            });
        }
        Ok(Self { grid, labels })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            labels: vec![0; grid.len()],
            grid,
        }
    }

    /// Binary label volume (1 where `mask` is set).
    pub fn from_mask(grid: Grid, mask: &[bool]) -> Result<Self> {
        Self::new(grid, mask.iter().map(|&m| m as u8).collect())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Voxels with any label other than background.
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Axial slice `z`.
    pub fn slice_z(&self, z: usize) -> LabelSlice2D {
        let [nx, ny, _] = self.grid.dims();
        let base = nx * ny * z;
        LabelSlice2D {
            width: nx,
            height: ny,
            labels: self.labels[base..base + nx * ny].to_vec(),
        }
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Inclusive voxel-index box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] > hi[a]) {
            return Err(Error::InvalidParameter(format!(
                "bounding box lo {lo:?} exceeds hi {hi:?}"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            lo: [0; 3],
            hi: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    /// Tight box around the set voxels of `mask`, `None` when empty.
    pub fn of_mask(grid: &Grid, mask: &[bool]) -> Option<Self> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            any = true;
            let c = grid.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        any.then_some(Self { lo, hi })
    }

    pub fn extent(&self) -> Dims {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    pub fn fits(&self, dims: Dims) -> bool {
        (0..3).all(|a| self.lo[a] <= self.hi[a] && self.hi[a] < dims[a])
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= c[a] && c[a] <= self.hi[a])
    }

    /// Grows the box by `pad_mm` on every side, converted per axis to
    /// `ceil(pad_mm / spacing)` voxels and clamped to the grid.
    pub fn padded(&self, pad_mm: f64, grid: &Grid) -> Result<Self> {
        if !(pad_mm >= 0.0 && pad_mm.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "padding must be finite and >= 0, got {pad_mm}"
            )));
        }
        let dims = grid.dims();
        if !self.fits(dims) {
            return Err(Error::BoxOutOfRange {
                lo: self.lo,
                hi: self.hi,
                dims,
            });
        }
        let sp = grid.spacing();
        let mut out = *self;
        for a in 0..3 {
            let pad = (pad_mm / sp[a]).ceil() as usize;
            out.lo[a] = self.lo[a].saturating_sub(pad);
            out.hi[a] = (self.hi[a] + pad).min(dims[a] - 1);
        }
        Ok(out)
    }
}
