use crate::error::{Error, Result};
use crate::volume::Grid;

/// Per-voxel feature vectors already divided by their kernel widths, so the
/// Gaussian kernel between voxels `i` and `j` is `exp(-|f_i - f_j|^2 / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
    layout: Option<GridLayout>,
}

/// Remembered when features come from a voxel grid, so filters can exploit
/// the regular spacing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridLayout {
    pub dims: [usize; 3],
    /// Feature-space distance between neighbouring voxels along each axis.
    pub step: [f64; 3],
    /// True when the features are the positions alone.
    pub positions_only: bool,
}

fn check_sigma(name: &str, sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be finite and > 0, got {sigma}"
        )))
    }
}

impl Features {
    /// Builds features from raw values (`dim` per point) and one width per
    /// feature dimension.
    pub fn from_raw(dim: usize, raw: &[f64], sigmas: &[f64]) -> Result<Self> {
        if dim == 0 || sigmas.len() != dim {
            return Err(Error::InvalidParameter(format!(
                "{} widths for {dim} feature dimensions",
                sigmas.len()
            )));
        }
        if raw.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} raw feature values do not split into {dim}-vectors",
                raw.len()
            )));
        }
        for &s in sigmas {
            check_sigma("kernel width", s)?;
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite feature value".into()));
        }
        let data = raw
            .chunks_exact(dim)
            .flat_map(|p| p.iter().zip(sigmas).map(|(v, s)| v / s))
            .collect();
        Ok(Self {
            dim,
            data,
            layout: None,
        })
    }

    /// Voxel-centre positions in millimetres over `sigma_pos`.
    pub fn spatial(grid: &Grid, sigma_pos: f64) -> Result<Self> {
        check_sigma("sigma_pos", sigma_pos)?;
        let mut data = Vec::with_capacity(grid.len() * 3);
        for i in 0..grid.len() {
            let p = grid.position_mm(i);
            data.extend(p.iter().map(|v| v / sigma_pos));
        }
        let sp = grid.spacing();
        Ok(Self {
            dim: 3,
            data,
            layout: Some(GridLayout {
                dims: grid.dims(),
                step: [sp[0] / sigma_pos, sp[1] / sigma_pos, sp[2] / sigma_pos],
                positions_only: true,
            }),
        })
    }

    /// Positions over `sigma_bil` concatenated with intensity over
    /// `sigma_int`.
    pub fn bilateral(grid: &Grid, intensity: &[f32], sigma_bil: f64, sigma_int: f64) -> Result<Self> {
        check_sigma("sigma_bil", sigma_bil)?;
        check_sigma("sigma_int", sigma_int)?;
        if intensity.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} intensities for {} voxels",
                intensity.len(),
                grid.len()
            )));
        }
        let mut data = Vec::with_capacity(grid.len() * 4);
        for (i, &v) in intensity.iter().enumerate() {
            let p = grid.position_mm(i);
            data.extend(p.iter().map(|x| x / sigma_bil));
            data.push(v as f64 / sigma_int);
        }
        let sp = grid.spacing();
        Ok(Self {
            dim: 4,
            data,
            layout: Some(GridLayout {
                dims: grid.dims(),
                step: [sp[0] / sigma_bil, sp[1] / sigma_bil, sp[2] / sigma_bil],
                positions_only: false,
            }),
        })
    }

    pub fn layout(&self) -> Option<&GridLayout> {
        self.layout.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Kernel value between points `i` and `j`.
    #[inline]
    pub fn kernel(&self, i: usize, j: usize) -> f64 {
        let d2: f64 = self
            .point(i)
            .iter()
            .zip(self.point(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (-0.5 * d2).exp()
    }

    /// Reorders points: output point `k` is input point `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let data = perm.iter().flat_map(|&i| self.point(i).iter().copied()).collect();
        Self {
            dim: self.dim,
            data,
            layout: None,
        }
    }
}
