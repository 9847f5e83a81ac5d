//! Two-stage liver then lesion segmentation.
//!
//! Stage 1 predicts liver probabilities over the whole volume. Their
//! thresholded (and by default largest-component) mask defines a padded
//! bounding box; the CT inside it is resampled in-plane to the stage-2
//! input size and handed to the lesion model. The lesion mask comes back to
//! the volume by nearest-neighbour resampling and is fused so that lesion
//! labels never leave the liver mask.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::crf::{infer, CrfParams};
use crate::error::{Error, Result};
use crate::fcn::{forward_volume, InputScaling, ToyNet};
use crate::phantom::{LESION, LIVER};
use crate::volume::{
    largest_component, save_volume, BoundingBox, Grid, Interpolation, LabelVolume, ProbVolume, Resample, Volume3D,
};

/// Which stages get CRF refinement when parameters are supplied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrfStages {
    pub liver: bool,
    pub lesion: bool,
}

impl Default for CrfStages {
    fn default() -> Self {
        Self { liver: true, lesion: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeConfig {
    /// Liver where `1 - P(background) >= liver_threshold`.
    pub liver_threshold: f64,
    pub roi_pad_mm: f64,
    /// In-plane (width, height) of the stage-2 input.
    pub stage2_size: [usize; 2],
    pub largest_component_only: bool,
    pub crf_stages: CrfStages,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            liver_threshold: 0.5,
            roi_pad_mm: 10.0,
            stage2_size: [256, 256],
            largest_component_only: true,
            crf_stages: CrfStages::default(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.liver_threshold > 0.0 && self.liver_threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "liver threshold {} must lie strictly inside (0, 1)",
                self.liver_threshold
            )));
        }
        if !(self.roi_pad_mm.is_finite() && self.roi_pad_mm >= 0.0) {
            return Err(Error::InvalidParameter(format!("roi pad {} mm", self.roi_pad_mm)));
        }
        if self.stage2_size.contains(&0) {
            return Err(Error::InvalidParameter(format!("stage-2 size {:?}", self.stage2_size)));
        }
        Ok(())
    }
}

/// Where a stage-2 volume came from: the padded ROI box in the full
/// volume's grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiMapping {
    pub bbox: BoundingBox,
    pub source_grid: Grid,
}

/// Input to a unary model. `roi` is set for stage 2.
#[derive(Clone, Copy, Debug)]
pub struct StageQuery<'a> {
    pub ct: &'a Volume3D,
    pub roi: Option<RoiMapping>,
}

/// Anything that turns a CT volume into class probabilities on the same
/// grid.
pub trait UnaryProvider {
    fn predict(&self, query: &StageQuery) -> Result<ProbVolume>;
}

/// Precomputed probabilities over the full volume. Stage-2 queries get the
/// ROI cropped out and linearly resampled to the query grid.
pub struct FileProvider {
    probs: ProbVolume,
}

impl FileProvider {
    pub fn new(probs: ProbVolume) -> Self {
        Self { probs }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(crate::volume::load_probs(path)?))
    }
}

impl UnaryProvider for FileProvider {
    fn predict(&self, query: &StageQuery) -> Result<ProbVolume> {
        let dims = query.ct.grid().dims();
        match query.roi {
            None => Ok(self.probs.clone()),
            Some(roi) => {
                if self.probs.grid().dims() != roi.source_grid.dims() {
                    return Err(Error::ShapeMismatch(format!(
                        "probability file {:?} vs volume {:?}",
                        self.probs.grid().dims(),
                        roi.source_grid.dims()
                    )));
                }
                self.probs.crop(&roi.bbox, 0.0)?.resample(dims, Interpolation::Linear)
            }
        }
    }
}

/// The toy unary net, run slice by slice.
pub struct NetProvider {
    pub net: ToyNet,
    pub scaling: InputScaling,
}

impl UnaryProvider for NetProvider {
    fn predict(&self, query: &StageQuery) -> Result<ProbVolume> {
        forward_volume(&self.net, query.ct, &self.scaling)
    }
}

/// Thresholded liver mask and its padded bounding box.
pub fn liver_roi(liver_probs: &ProbVolume, cfg: &CascadeConfig) -> Result<(LabelVolume, BoundingBox)> {
    cfg.validate()?;
    if liver_probs.classes() < 2 {
        return Err(Error::InvalidProbabilities("liver stage needs >= 2 classes".into()));
    }
    let grid = *liver_probs.grid();
    let mut mask: Vec<bool> = liver_probs
        .plane(0)
        .iter()
        .map(|&p0| 1.0 - p0 as f64 >= cfg.liver_threshold)
        .collect();
    if cfg.largest_component_only {
        mask = largest_component(&mask, grid.dims());
    }
    let bbox = BoundingBox::of_mask(&grid, &mask).ok_or(Error::NoLiverFound)?;
    let bbox = bbox.padded(cfg.roi_pad_mm, &grid)?;
    Ok((LabelVolume::from_mask(grid, &mask)?, bbox))
}

/// 2 where lesion and liver overlap, 1 on the rest of the liver, else 0.
pub fn fuse_labels(liver_mask: &LabelVolume, lesion_mask: &LabelVolume) -> Result<LabelVolume> {
    liver_mask.grid().check_same(lesion_mask.grid(), "liver vs lesion mask")?;
    let labels = liver_mask
        .labels()
        .iter()
        .zip(lesion_mask.labels())
        .map(|(&l, &t)| match (l != 0, t != 0) {
            (true, true) => LESION,
            (true, false) => LIVER,
            _ => 0,
        })
        .collect();
    LabelVolume::new(*liver_mask.grid(), labels)
}

/// Wall-clock seconds per pipeline part. CRF time is excluded from the
/// stage times.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timings {
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub crf_s: f64,
}

#[derive(Clone, Debug)]
pub struct Intermediates {
    /// Stage-1 probabilities after optional refinement.
    pub liver_probs: ProbVolume,
    pub liver_mask: LabelVolume,
    pub roi_bbox: BoundingBox,
    /// Stage-2 probabilities in ROI space after optional refinement.
    pub lesion_probs: ProbVolume,
    /// Lesion mask mapped back to the full volume, before fusion.
    pub lesion_mask: LabelVolume,
    pub timings: Timings,
}

impl Intermediates {
    /// Writes the probability maps and masks as MetaImage files plus the
    /// `roi_bbox.txt` sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_volume(&self.liver_probs, dir.join("liver_probs.mhd"))?;
        save_volume(&self.liver_mask, dir.join("liver_mask.mhd"))?;
        save_volume(&self.lesion_probs, dir.join("lesion_probs.mhd"))?;
        save_volume(&self.lesion_mask, dir.join("lesion_mask.mhd"))?;
        let path = dir.join("roi_bbox.txt");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let [lx, ly, lz] = self.roi_bbox.lo;
        let [hx, hy, hz] = self.roi_bbox.hi;
        writeln!(f, "lo {lx} {ly} {lz}\nhi {hx} {hy} {hz}").map_err(|e| Error::io(&path, e))
    }
}

/// Reads a `lo x y z` / `hi x y z` sidecar.
pub fn load_bbox(path: impl AsRef<Path>) -> Result<BoundingBox> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut lo = None;
    let mut hi = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default();
        let vals: Vec<usize> = it
            .map(|t| t.parse().map_err(|_| Error::parse(&ctx, format!("bad index {t:?}"))))
            .collect::<Result<_>>()?;
        let v: [usize; 3] = vals
            .try_into()
            .map_err(|_| Error::parse(&ctx, format!("{key} needs three indices")))?;
        match key {
            "lo" => lo = Some(v),
            "hi" => hi = Some(v),
            _ => return Err(Error::parse(&ctx, format!("unknown key {key:?}"))),
        }
    }
    match (lo, hi) {
        (Some(lo), Some(hi)) => BoundingBox::new(lo, hi),
        _ => Err(Error::parse(&ctx, "needs both lo and hi lines")),
    }
}

fn check_output(probs: &ProbVolume, grid: &Grid, stage: &str) -> Result<()> {
    if probs.grid().dims() != grid.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{stage} provider returned {:?}, expected {:?}",
            probs.grid().dims(),
            grid.dims()
        )));
    }
    Ok(())
}

fn as_float(ct: &Volume3D) -> Result<Volume3D> {
    Volume3D::from_float(*ct.grid(), ct.to_f32())
}

/// Runs both stages, optional CRF refinement and fusion.
pub fn run_cascade(
    ct: &Volume3D,
    liver_model: &dyn UnaryProvider,
    lesion_model: &dyn UnaryProvider,
    cfg: &CascadeConfig,
    crf: Option<&CrfParams>,
) -> Result<(LabelVolume, Intermediates)> {
    cfg.validate()?;
    if let Some(p) = crf {
        p.validate()?;
    }
    let grid = *ct.grid();
    let mut timings = Timings::default();

    let t = Instant::now();
    let mut liver_probs = liver_model.predict(&StageQuery { ct, roi: None })?;
    timings.stage1_s = t.elapsed().as_secs_f64();
    check_output(&liver_probs, &grid, "liver")?;
    if let Some(p) = crf.filter(|_| cfg.crf_stages.liver) {
        let t = Instant::now();
        // Intensities must share the probability grid exactly.
        let ct_on = Volume3D::new(*liver_probs.grid(), ct.data().clone())?;
        liver_probs = infer(&liver_probs, &ct_on, p)?.0.to_prob_volume();
        timings.crf_s += t.elapsed().as_secs_f64();
    }
    let (liver_mask, roi_bbox) = liver_roi(&liver_probs, cfg)?;

    let t = Instant::now();
    let roi = RoiMapping {
        bbox: roi_bbox,
        source_grid: grid,
    };
    let nz = roi_bbox.extent()[2];
    let [w, h] = cfg.stage2_size;
    let roi_ct = as_float(&ct.crop(&roi_bbox, 0.0)?)?.resample([w, h, nz], Interpolation::Linear)?;
    let mut lesion_probs = lesion_model.predict(&StageQuery {
        ct: &roi_ct,
        roi: Some(roi),
    })?;
    check_output(&lesion_probs, roi_ct.grid(), "lesion")?;
    timings.stage2_s = t.elapsed().as_secs_f64();
    if lesion_probs.classes() < 2 {
        return Err(Error::InvalidProbabilities("lesion stage needs >= 2 classes".into()));
    }
    if let Some(p) = crf.filter(|_| cfg.crf_stages.lesion) {
        let t = Instant::now();
        let ct_on = Volume3D::new(*lesion_probs.grid(), roi_ct.data().clone())?;
        lesion_probs = infer(&lesion_probs, &ct_on, p)?.0.to_prob_volume();
        timings.crf_s += t.elapsed().as_secs_f64();
    }

    let t = Instant::now();
    let last = (lesion_probs.classes() - 1) as u8;
    let roi_lesion: Vec<bool> = lesion_probs.argmax().labels().iter().map(|&l| l == last).collect();
    let roi_lesion = LabelVolume::from_mask(*lesion_probs.grid(), &roi_lesion)?
        .resample(roi_bbox.extent(), Interpolation::Nearest)?;
    let mut lesion_mask = LabelVolume::zeros(grid);
    let ext = roi_bbox.extent();
    let [nx, ny, _] = grid.dims();
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            for x in 0..ext[0] {
                let src = x + ext[0] * (y + ext[1] * z);
                let dst = (roi_bbox.lo[0] + x) + nx * ((roi_bbox.lo[1] + y) + ny * (roi_bbox.lo[2] + z));
                lesion_mask.labels_mut()[dst] = roi_lesion.labels()[src];
            }
        }
    }
    let fused = fuse_labels(&liver_mask, &lesion_mask)?;
    timings.stage2_s += t.elapsed().as_secs_f64();

    Ok((
        fused,
        Intermediates {
            liver_probs,
            liver_mask,
            roi_bbox,
            lesion_probs,
            lesion_mask,
            timings,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, oracle_unary, OracleParams, PhantomSpec};

    fn probs_from_mask(grid: Grid, fg: &[f32]) -> ProbVolume {
        let mut p: Vec<f32> = fg.iter().map(|v| 1.0 - v).collect();
        p.extend_from_slice(fg);
        ProbVolume::new(grid, 2, p).unwrap()
    }

    #[test]
    fn saturated_liver_gives_full_box() {
        let g = Grid::isotropic([4, 5, 3]).unwrap();
        let p = probs_from_mask(g, &vec![1.0; 60]);
        let (mask, bbox) = liver_roi(&p, &CascadeConfig::default()).unwrap();
        assert_eq!(mask.count(1), 60);
        assert_eq!(bbox, BoundingBox::full([4, 5, 3]));
    }

    #[test]
    fn nothing_above_threshold() {
        let g = Grid::isotropic([4, 4, 4]).unwrap();
        let p = probs_from_mask(g, &vec![0.2; 64]);
        assert!(matches!(liver_roi(&p, &CascadeConfig::default()), Err(Error::NoLiverFound)));
    }

    #[test]
    fn small_component_dropped() {
        let g = Grid::isotropic([20, 10, 2]).unwrap();
        let mut fg = vec![0.0f32; 400];
        for y in 0..10 {
            for x in 0..10 {
                fg[g.index(x, y, 0)] = 0.9;
            }
        }
        for x in 14..19 {
            fg[g.index(x, 5, 1)] = 0.9;
        }
        let cfg = CascadeConfig {
            roi_pad_mm: 0.0,
            ..Default::default()
        };
        let (mask, bbox) = liver_roi(&probs_from_mask(g, &fg), &cfg).unwrap();
        assert_eq!(mask.count(1), 100);
        assert_eq!(bbox, BoundingBox::new([0, 0, 0], [9, 9, 0]).unwrap());
        let keep_all = CascadeConfig {
            largest_component_only: false,
            ..cfg
        };
        assert_eq!(liver_roi(&probs_from_mask(g, &fg), &keep_all).unwrap().0.count(1), 105);
    }

    #[test]
    fn fusion_rule() {
        let g = Grid::isotropic([4, 1, 1]).unwrap();
        let liver = LabelVolume::new(g, vec![1, 1, 0, 0]).unwrap();
        let lesion = LabelVolume::new(g, vec![1, 0, 1, 0]).unwrap();
        assert_eq!(fuse_labels(&liver, &lesion).unwrap().labels(), &[2, 1, 0, 0]);
        let none = LabelVolume::zeros(g);
        assert_eq!(fuse_labels(&liver, &none).unwrap().labels(), &[1, 1, 0, 0]);
    }

    struct Background;
    impl UnaryProvider for Background {
        fn predict(&self, q: &StageQuery) -> Result<ProbVolume> {
            ProbVolume::one_hot(&LabelVolume::zeros(*q.ct.grid()), 2)
        }
    }

    struct WrongShape;
    impl UnaryProvider for WrongShape {
        fn predict(&self, _: &StageQuery) -> Result<ProbVolume> {
            ProbVolume::one_hot(&LabelVolume::zeros(Grid::isotropic([2, 2, 2]).unwrap()), 2)
        }
    }

    fn small_phantom() -> (Volume3D, LabelVolume) {
        let spec = PhantomSpec {
            dims: [32, 32, 16],
            spacing: [2.0, 2.0, 4.0],
            ..Default::default()
        };
        generate(&spec).unwrap()
    }

    #[test]
    fn oracle_cascade_recovers_phantom() {
        let (ct, gt) = small_phantom();
        let probs = ProbVolume::one_hot(&gt, 3).unwrap();
        let cfg = CascadeConfig {
            stage2_size: [24, 24],
            ..Default::default()
        };
        let provider = FileProvider::new(probs);
        let (out, inter) = run_cascade(&ct, &provider, &provider, &cfg, None).unwrap();
        assert_eq!(inter.liver_mask.count(1), gt.count(LIVER) + gt.count(LESION));
        let m = crate::metrics::evaluate(&out, &gt, LESION).unwrap();
        assert!(m.dice_pct > 80.0, "{m:?}");
        assert!(crate::metrics::evaluate(&out, &gt, LIVER).unwrap().dice_pct > 95.0);
    }

    #[test]
    fn background_lesion_model_leaves_liver() {
        let (ct, gt) = small_phantom();
        let provider = FileProvider::new(ProbVolume::one_hot(&gt, 3).unwrap());
        let cfg = CascadeConfig {
            stage2_size: [16, 16],
            ..Default::default()
        };
        let (out, inter) = run_cascade(&ct, &provider, &Background, &cfg, None).unwrap();
        assert_eq!(out.count(LESION), 0);
        assert_eq!(out.labels(), inter.liver_mask.labels());
        assert!(run_cascade(&ct, &WrongShape, &Background, &cfg, None).is_err());
        assert!(run_cascade(&ct, &provider, &WrongShape, &cfg, None).is_err());
    }

    #[test]
    fn crf_on_both_stages_runs() {
        let (ct, gt) = small_phantom();
        let noisy = oracle_unary(
            &gt,
            3,
            &OracleParams {
                error_rate: 0.05,
                smoothing: 0.1,
                seed: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let provider = FileProvider::new(noisy);
        let cfg = CascadeConfig {
            stage2_size: [16, 16],
            ..Default::default()
        };
        let params = CrfParams {
            iterations: 2,
            ..Default::default()
        };
        let (out, inter) = run_cascade(&ct, &provider, &provider, &cfg, Some(&params)).unwrap();
        assert!(inter.timings.crf_s > 0.0);
        let lesion = out.mask(LESION);
        assert!(lesion.iter().zip(inter.liver_mask.labels()).all(|(&l, &m)| !l || m == 1));
    }

    #[test]
    fn bbox_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ct, gt) = small_phantom();
        let provider = FileProvider::new(ProbVolume::one_hot(&gt, 3).unwrap());
        let cfg = CascadeConfig {
            stage2_size: [8, 8],
            ..Default::default()
        };
        let (_, inter) = run_cascade(&ct, &provider, &provider, &cfg, None).unwrap();
        inter.save(dir.path()).unwrap();
        assert_eq!(load_bbox(dir.path().join("roi_bbox.txt")).unwrap(), inter.roi_bbox);
    }
}
