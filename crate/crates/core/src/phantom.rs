//! Synthetic abdomen phantoms: an ellipsoidal liver with spherical lesions
//! in a noisy background, plus oracle unary maps derived from the truth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::volume::{round_to_i16, Dims, Grid, LabelVolume, ProbVolume, Spacing, Volume3D};

pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const LESION: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    pub hu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub liver_center_mm: [f64; 3],
    pub liver_semi_axes_mm: [f64; 3],
    pub liver_hu: f64,
    pub lesions: Vec<Lesion>,
    pub background_hu: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// 64^3 voxels at 1 x 1 x 2 mm with one hypo- and one hyper-intense
    /// lesion.
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 2.0],
            liver_center_mm: [32.0, 32.0, 64.0],
            liver_semi_axes_mm: [24.0, 20.0, 48.0],
            liver_hu: 100.0,
            lesions: vec![
                Lesion {
                    center_mm: [25.0, 28.0, 52.0],
                    radius_mm: 7.0,
                    hu: 40.0,
                },
                Lesion {
                    center_mm: [40.0, 37.0, 78.0],
                    radius_mm: 6.0,
                    hu: 160.0,
                },
            ],
            background_hu: -80.0,
            noise_sigma: 10.0,
            seed: 0,
        }
    }
}

const KEYS: [&str; 9] = [
    "dims",
    "spacing",
    "liver_center_mm",
    "liver_semi_axes_mm",
    "liver_hu",
    "lesions",
    "background_hu",
    "noise_sigma",
    "seed",
];

fn triple<T: Copy>(v: Vec<T>, key: &str) -> Result<[T; 3]> {
    <[T; 3]>::try_from(v).map_err(|v| Error::parse("phantom spec", format!("{key} needs 3 values, got {}", v.len())))
}

impl PhantomSpec {
    /// Inside the liver ellipsoid (boundary included).
    fn in_liver(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.liver_center_mm[a]) / self.liver_semi_axes_mm[a];
            s += d * d;
        }
        s <= 1.0
    }

    fn lesion_at(&self, p: [f64; 3]) -> Option<&Lesion> {
        self.lesions.iter().find(|l| {
            let d2: f64 = (0..3).map(|a| (p[a] - l.center_mm[a]).powi(2)).sum();
            d2 <= l.radius_mm * l.radius_mm
        })
    }

    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims, self.spacing)?;
        if self.liver_semi_axes_mm.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidParameter("liver semi-axes must be > 0".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise_sigma {}", self.noise_sigma)));
        }
        let min_axis = self.liver_semi_axes_mm.iter().copied().fold(f64::INFINITY, f64::min);
        for (k, l) in self.lesions.iter().enumerate() {
            if !(l.radius_mm.is_finite() && l.radius_mm > 0.0) {
                return Err(Error::InvalidParameter(format!("lesion {k}: radius {}", l.radius_mm)));
            }
            // Sufficient test: in coordinates scaled by the semi-axes the
            // sphere fits in a ball of radius r / min_axis around its centre.
            let mut c = 0.0;
            for a in 0..3 {
                let d = (l.center_mm[a] - self.liver_center_mm[a]) / self.liver_semi_axes_mm[a];
                c += d * d;
            }
            if c.sqrt() + l.radius_mm / min_axis > 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "lesion {k} at {:?} r {} mm is not inside the liver ellipsoid",
                    l.center_mm, l.radius_mm
                )));
            }
        }
        Ok(())
    }

    /// Overrides fields present in `kv`. Lesions are written as
    /// `lesions = cx cy cz r hu; cx cy cz r hu`.
    pub fn merge(mut self, kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&KEYS)?;
        if let Some(v) = kv.get_list::<usize>("dims")? {
            self.dims = triple(v, "dims")?;
        }
        if let Some(v) = kv.get_list::<f64>("spacing")? {
            self.spacing = triple(v, "spacing")?;
        }
        if let Some(v) = kv.get_list::<f64>("liver_center_mm")? {
            self.liver_center_mm = triple(v, "liver_center_mm")?;
        }
        if let Some(v) = kv.get_list::<f64>("liver_semi_axes_mm")? {
            self.liver_semi_axes_mm = triple(v, "liver_semi_axes_mm")?;
        }
        if let Some(v) = kv.get("liver_hu")? {
            self.liver_hu = v;
        }
        if let Some(v) = kv.get("background_hu")? {
            self.background_hu = v;
        }
        if let Some(v) = kv.get("noise_sigma")? {
            self.noise_sigma = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        if let Some(text) = kv.get_str("lesions") {
            self.lesions = text
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|item| {
                    let v: Vec<f64> = item
                        .split(|c: char| c == ',' || c.is_whitespace())
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<f64>().map_err(|e| Error::parse("phantom spec", format!("lesion {item}: {e}"))))
                        .collect::<Result<_>>()?;
                    match v.as_slice() {
                        [x, y, z, r, hu] => Ok(Lesion {
                            center_mm: [*x, *y, *z],
                            radius_mm: *r,
                            hu: *hu,
                        }),
                        _ => Err(Error::parse("phantom spec", format!("lesion {item}: need cx cy cz r hu"))),
                    }
                })
                .collect::<Result<_>>()?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().merge(&KeyValues::parse(text, "phantom spec")?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::default().merge(&KeyValues::load(path)?)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let lesions = self
            .lesions
            .iter()
            .map(|l| format!("{} {} {}", join(&l.center_mm), l.radius_mm, l.hu))
            .collect::<Vec<_>>()
            .join("; ");
        format!(
            "dims = {} {} {}\nspacing = {}\nliver_center_mm = {}\nliver_semi_axes_mm = {}\nliver_hu = {}\nlesions = {}\nbackground_hu = {}\nnoise_sigma = {}\nseed = {}\n",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            join(&self.spacing),
            join(&self.liver_center_mm),
            join(&self.liver_semi_axes_mm),
            self.liver_hu,
            lesions,
            self.background_hu,
            self.noise_sigma,
            self.seed
        )
    }

    /// A variant with the seed replaced and the geometry jittered by a few
    /// millimetres, for multi-case suites.
    pub fn jittered(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = self.clone();
        s.seed = seed;
        let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..=2.0));
        for a in 0..3 {
            s.liver_center_mm[a] += shift[a];
        }
        for l in &mut s.lesions {
            for a in 0..3 {
                l.center_mm[a] += shift[a] + rng.random_range(-1.0..=1.0);
            }
        }
        s
    }
}

/// Rasterises the spec at voxel centres and adds Gaussian noise to the CT.
/// Returns 16-bit HU and the noiseless labels.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume3D, LabelVolume)> {
    spec.validate()?;
    let grid = Grid::new(spec.dims, spec.spacing)?;
    let n = grid.len();
    let mut labels = vec![BACKGROUND; n];
    let mut hu = vec![0f64; n];
    for i in 0..n {
        let p = grid.position_mm(i);
        let (l, v) = if spec.in_liver(p) {
            match spec.lesion_at(p) {
                Some(les) => (LESION, les.hu),
                None => (LIVER, spec.liver_hu),
            }
        } else {
            (BACKGROUND, spec.background_hu)
        };
        labels[i] = l;
        hu[i] = v;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in &mut hu {
            *v += normal.sample(&mut rng);
        }
    }
    let ct = hu.iter().map(|&v| round_to_i16(v as f32)).collect();
    Ok((Volume3D::from_short(grid, ct)?, LabelVolume::new(grid, labels)?))
}

/// Corruption applied by [`oracle_unary`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleParams {
    /// Spatial Gaussian blur of the one-hot maps, mm; 0 disables.
    pub blur_sigma_mm: f64,
    /// Fraction of voxels whose two most likely classes are swapped.
    pub error_rate: f64,
    /// Mixing weight toward the uniform distribution, applied last.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            blur_sigma_mm: 0.0,
            error_rate: 0.0,
            smoothing: 0.0,
            seed: 0,
        }
    }
}

/// Normalised 1D Gaussian taps out to 4 sigma.
fn gaussian_taps(sigma_vox: f64) -> Vec<f64> {
    let r = (4.0 * sigma_vox).ceil() as usize;
    (0..=r).map(|k| (-0.5 * (k as f64 / sigma_vox).powi(2)).exp()).collect()
}

/// Separable blur with edge clamping, applied in place to one class channel.
fn blur_channel(data: &mut [f64], dims: Dims, sigma_vox: [f64; 3]) {
    for axis in 0..3 {
        if sigma_vox[axis] <= 0.0 || dims[axis] < 2 {
            continue;
        }
        let t = gaussian_taps(sigma_vox[axis]);
        let norm = t[0] + 2.0 * t[1..].iter().sum::<f64>();
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let len = dims[axis];
        let r = t.len() as isize - 1;
        let mut line = vec![0.0; len];
        for start in 0..data.len() {
            // Visit each line once, from its first element.
            if (start / stride) % len != 0 {
                continue;
            }
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[start + k * stride];
            }
            for k in 0..len as isize {
                let mut acc = 0.0;
                for o in -r..=r {
                    let src = (k + o).clamp(0, len as isize - 1) as usize;
                    acc += t[o.unsigned_abs()] * line[src];
                }
                data[start + k as usize * stride] = acc / norm;
            }
        }
    }
}

/// Synthetic unary: one-hot truth, blurred, with a seeded fraction of
/// voxels having their top-two classes swapped, then smoothed toward
/// uniform and renormalised.
pub fn oracle_unary(gt: &LabelVolume, classes: usize, params: &OracleParams) -> Result<ProbVolume> {
    if !(0.0..0.5).contains(&params.error_rate) {
        return Err(Error::InvalidParameter(format!(
            "error_rate {} outside [0, 0.5)",
            params.error_rate
        )));
    }
    if !(params.blur_sigma_mm.is_finite() && params.blur_sigma_mm >= 0.0) {
        return Err(Error::InvalidParameter(format!("blur {}", params.blur_sigma_mm)));
    }
    if !(0.0..=1.0).contains(&params.smoothing) {
        return Err(Error::InvalidParameter(format!("smoothing {}", params.smoothing)));
    }
    let grid = *gt.grid();
    let n = grid.len();
    let onehot = ProbVolume::one_hot(gt, classes)?;
    let mut p: Vec<f64> = onehot.as_slice().iter().map(|&v| v as f64).collect();
    if params.blur_sigma_mm > 0.0 {
        let sp = grid.spacing();
        let sigma_vox = [0, 1, 2].map(|a| params.blur_sigma_mm / sp[a]);
        for c in 0..classes {
            blur_channel(&mut p[c * n..(c + 1) * n], grid.dims(), sigma_vox);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut row = vec![0.0; classes];
    for i in 0..n {
        // One draw per voxel keeps the swap pattern independent of the
        // probabilities.
        let swap = rng.random::<f64>() < params.error_rate;
        if !swap {
            continue;
        }
        for c in 0..classes {
            row[c] = p[c * n + i];
        }
        // Top two, ties to the lower index.
        let mut first = 0;
        for c in 1..classes {
            if row[c] > row[first] {
                first = c;
            }
        }
        let mut second = usize::from(first == 0);
        for c in 0..classes {
            if c != first && row[c] > row[second] {
                second = c;
            }
        }
        p.swap(first * n + i, second * n + i);
    }
    let s = params.smoothing;
    let probs: Vec<f32> = p.iter().map(|&v| ((1.0 - s) * v + s / classes as f64) as f32).collect();
    ProbVolume::from_scores(grid, classes, probs)
}
