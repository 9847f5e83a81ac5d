//! Colour overlay of a prediction against the reference on one axial slice.
//!
//! Green marks correct liver, blue correct lesion, red any lesion error and
//! yellow the remaining liver errors. Colours are blended at 50% over the
//! windowed CT in gray.

use image::{Rgb, RgbImage};
use livseg::error::{Error, Result};
use livseg::phantom::{LESION, LIVER};
use livseg::volume::{LabelVolume, Volume3D};

pub const GREEN: [u8; 3] = [0, 255, 0];
pub const YELLOW: [u8; 3] = [255, 255, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];
pub const RED: [u8; 3] = [255, 0, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    None,
    LiverCorrect,
    LiverError,
    LesionCorrect,
    LesionError,
}

impl Outcome {
    pub fn classify(pred: u8, gt: u8) -> Self {
        if (pred == LESION) != (gt == LESION) {
            Outcome::LesionError
        } else if gt == LESION {
            Outcome::LesionCorrect
        } else if pred == LIVER && gt == LIVER {
            Outcome::LiverCorrect
        } else if (pred == LIVER) != (gt == LIVER) {
            Outcome::LiverError
        } else {
            Outcome::None
        }
    }

    pub fn colour(self) -> Option<[u8; 3]> {
        match self {
            Outcome::None => None,
            Outcome::LiverCorrect => Some(GREEN),
            Outcome::LiverError => Some(YELLOW),
            Outcome::LesionCorrect => Some(BLUE),
            Outcome::LesionError => Some(RED),
        }
    }
}

fn gray(v: f32, lo: f32, hi: f32) -> u8 {
    let t = ((v.clamp(lo, hi) - lo) / (hi - lo)) as f64;
    (t * 255.0).round() as u8
}

fn blend(g: u8, c: u8) -> u8 {
    ((g as u16 + c as u16 + 1) / 2) as u8
}

/// Renders slice `z` as an RGB image, x along columns and y along rows.
pub fn render(ct: &Volume3D, pred: &LabelVolume, gt: &LabelVolume, z: usize, window: (f32, f32)) -> Result<RgbImage> {
    ct.grid().check_same(pred.grid(), "ct vs prediction")?;
    ct.grid().check_same(gt.grid(), "ct vs reference")?;
    let [nx, ny, nz] = ct.grid().dims();
    if z >= nz {
        return Err(Error::InvalidParameter(format!("slice {z} out of range 0..{nz}")));
    }
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidParameter(format!("window [{lo}, {hi}]")));
    }
    let g = ct.grid();
    let mut img = RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let i = g.index(x, y, z);
            let base = gray(ct.get(i), lo, hi);
            let px = match Outcome::classify(pred.labels()[i], gt.labels()[i]).colour() {
                Some(c) => [blend(base, c[0]), blend(base, c[1]), blend(base, c[2])],
                None => [base; 3],
            };
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

/// Voxel count of each outcome on slice `z`, in [`Outcome`] order.
pub fn outcome_counts(pred: &LabelVolume, gt: &LabelVolume, z: usize) -> [usize; 5] {
    let [nx, ny, _] = gt.grid().dims();
    let mut counts = [0; 5];
    for p in 0..nx * ny {
        let i = z * nx * ny + p;
        let k = match Outcome::classify(pred.labels()[i], gt.labels()[i]) {
            Outcome::None => 0,
            Outcome::LiverCorrect => 1,
            Outcome::LiverError => 2,
            Outcome::LesionCorrect => 3,
            Outcome::LesionError => 4,
        };
        counts[k] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use livseg::volume::Grid;

    fn setup(pred: Vec<u8>, gt: Vec<u8>) -> (Volume3D, LabelVolume, LabelVolume) {
        let g = Grid::isotropic([3, 2, 1]).unwrap();
        let ct = Volume3D::from_float(g, vec![-100.0, 150.0, 400.0, 0.0, 0.0, 0.0]).unwrap();
        (ct, LabelVolume::new(g, pred).unwrap(), LabelVolume::new(g, gt).unwrap())
    }

    #[test]
    fn identical_labels_only_green_and_blue() {
        let lab = vec![0, 1, 2, 1, 2, 0];
        let (ct, p, g) = setup(lab.clone(), lab);
        let img = render(&ct, &p, &g, 0, (-100.0, 400.0)).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
        // gray 128 under green
        assert_eq!(img.get_pixel(1, 0).0, [64, 192, 64]);
        assert_eq!(img.get_pixel(2, 0).0, [128, 128, 255]);
        let c = outcome_counts(&p, &g, 0);
        assert_eq!((c[2], c[4]), (0, 0));
    }

    #[test]
    fn empty_prediction_marks_liver_yellow() {
        let (ct, p, g) = setup(vec![0; 6], vec![1, 1, 0, 2, 0, 0]);
        let c = outcome_counts(&p, &g, 0);
        assert_eq!(c, [3, 0, 2, 0, 1]);
        let img = render(&ct, &p, &g, 0, (-100.0, 400.0)).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [128, 128, 0]);
        assert_eq!(img.get_pixel(0, 1).0, [153, 26, 26]);
    }

    #[test]
    fn slice_out_of_range() {
        let (ct, p, g) = setup(vec![0; 6], vec![0; 6]);
        assert!(render(&ct, &p, &g, 1, (-100.0, 400.0)).is_err());
    }
}
