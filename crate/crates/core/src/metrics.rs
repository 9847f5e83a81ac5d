//! Overlap and surface-distance quality metrics.
//!
//! Masks are `&[bool]` in the grid's voxel order. Surfaces are voxel based:
//! a foreground voxel with at least one background 6-neighbour, where
//! anything outside the grid counts as background. Distances run centre to
//! centre in millimetres.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume};

fn check_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("masks of {} and {} voxels", a.len(), b.len())));
    }
    Ok(())
}

fn counts(a: &[bool], b: &[bool]) -> (usize, usize, usize) {
    let mut na = 0;
    let mut nb = 0;
    let mut both = 0;
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    (na, nb, both)
}

/// `100 * 2|A∩B| / (|A| + |B|)`; two empty masks score 100.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len(pred, gt)?;
    let (na, nb, both) = counts(pred, gt);
    if na + nb == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (na + nb) as f64)
}

/// Volumetric overlap error `100 * (1 - |A∩B| / |A∪B|)`; two empty masks
/// score 0.
pub fn voe(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len(pred, gt)?;
    let (na, nb, both) = counts(pred, gt);
    let union = na + nb - both;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 - both as f64 / union as f64))
}

/// Signed relative volume difference `100 * (|A| - |B|) / |B|`.
pub fn rvd(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len(pred, gt)?;
    let (na, nb, _) = counts(pred, gt);
    if nb == 0 {
        return Err(Error::UndefinedMetric("RVD needs a non-empty reference".into()));
    }
    Ok(100.0 * (na as f64 - nb as f64) / nb as f64)
}

/// Indices of the surface voxels of `mask`, ascending.
pub fn surface_voxels(mask: &[bool], grid: &Grid) -> Result<Vec<usize>> {
    if mask.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} voxels on a {:?} grid",
            mask.len(),
            grid.dims()
        )));
    }
    let [nx, ny, nz] = grid.dims();
    let mut out = Vec::new();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        let open = x == 0
            || x + 1 == nx
            || y == 0
            || y + 1 == ny
            || z == 0
            || z + 1 == nz
            || !mask[i - 1]
            || !mask[i + 1]
            || !mask[i - nx]
            || !mask[i + nx]
            || !mask[i - nx * ny]
            || !mask[i + nx * ny];
        if open {
            out.push(i);
        }
    }
    Ok(out)
}

/// Lower envelope of parabolas `f[v] + w (q - v)^2` over the finite sites of
/// `f`, written into `out`.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let n = f.len();
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        let fq = f[q] + w * (q * q) as f64;
        while let Some(&p) = v.last() {
            let s = (fq - (f[p] + w * (p * p) as f64)) / (2.0 * w * (q - p) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    // z[k] is where parabola k starts to win.
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = f[v[k]] + w * (d * d);
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// site, by separable lower envelopes along x, then y, then z.
pub fn squared_distance_transform(sites: &[bool], grid: &Grid) -> Vec<f64> {
    assert_eq!(sites.len(), grid.len());
    let dims = grid.dims();
    let sp = grid.spacing();
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let w = sp[axis] * sp[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for start in 0..d.len() {
            if (start / stride) % len != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = d[start + k * stride];
            }
            envelope_1d(&line, w, &mut out, &mut v, &mut z);
            for (k, o) in out.iter().enumerate() {
                d[start + k * stride] = *o;
            }
        }
    }
    d
}

/// Pooled surface distances: every pred-surface voxel to the gt surface,
/// followed by every gt-surface voxel to the pred surface.
pub fn surface_distances(pred: &[bool], gt: &[bool], grid: &Grid) -> Result<Vec<f64>> {
    check_len(pred, gt)?;
    let sp = surface_voxels(pred, grid)?;
    let sg = surface_voxels(gt, grid)?;
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::UndefinedMetric(
            "surface distance needs non-empty masks on both sides".into(),
        ));
    }
    let to_sites = |s: &[usize]| {
        let mut m = vec![false; grid.len()];
        for &i in s {
            m[i] = true;
        }
        m
    };
    let dg = squared_distance_transform(&to_sites(&sg), grid);
    let dp = squared_distance_transform(&to_sites(&sp), grid);
    let mut out = Vec::with_capacity(sp.len() + sg.len());
    out.extend(sp.iter().map(|&i| dg[i].sqrt()));
    out.extend(sg.iter().map(|&i| dp[i].sqrt()));
    Ok(out)
}

/// Average symmetric surface distance in mm.
pub fn asd(pred: &[bool], gt: &[bool], grid: &Grid) -> Result<f64> {
    let d = surface_distances(pred, gt, grid)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Maximum symmetric surface distance (Hausdorff over surface voxels) in mm.
pub fn msd(pred: &[bool], gt: &[bool], grid: &Grid) -> Result<f64> {
    let d = surface_distances(pred, gt, grid)?;
    Ok(d.iter().copied().fold(0.0, f64::max))
}

/// One row of the quality table. Entries that are undefined for the case
/// (empty reference for RVD, an empty side for the surface distances) are
/// `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub voe_pct: f64,
    pub rvd_pct: Option<f64>,
    pub asd_mm: Option<f64>,
    pub msd_mm: Option<f64>,
    pub dice_pct: f64,
}

impl MetricsReport {
    pub fn perfect() -> Self {
        Self {
            voe_pct: 0.0,
            rvd_pct: Some(0.0),
            asd_mm: Some(0.0),
            msd_mm: Some(0.0),
            dice_pct: 100.0,
        }
    }
}

/// Binarises both volumes at `class` and computes the five metrics.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<MetricsReport> {
    pred.grid().check_same(gt.grid(), "prediction vs reference")?;
    let a = pred.mask(class);
    let b = gt.mask(class);
    let surface = if a.contains(&true) && b.contains(&true) {
        let d = surface_distances(&a, &b, gt.grid())?;
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let max = d.iter().copied().fold(0.0, f64::max);
        (Some(mean), Some(max))
    } else {
        (None, None)
    };
    Ok(MetricsReport {
        voe_pct: voe(&a, &b)?,
        rvd_pct: rvd(&a, &b).ok(),
        asd_mm: surface.0,
        msd_mm: surface.1,
        dice_pct: dice(&a, &b)?,
    })
}

pub const CSV_HEADER: &str = "volume_id,class,voe_pct,rvd_pct,asd_mm,msd_mm,dice_pct";

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".into(),
    }
}

/// Report rows as CSV text with a header line; undefined entries read `NA`.
pub fn to_csv(rows: &[(String, u8, MetricsReport)]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (id, class, r) in rows {
        let _ = writeln!(
            s,
            "{id},{class},{},{},{},{},{}",
            cell(Some(r.voe_pct)),
            cell(r.rvd_pct),
            cell(r.asd_mm),
            cell(r.msd_mm),
            cell(Some(r.dice_pct))
        );
    }
    s
}

pub fn write_csv(rows: &[(String, u8, MetricsReport)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_csv(rows).as_bytes()).map_err(|e| Error::io(path, e))
}
