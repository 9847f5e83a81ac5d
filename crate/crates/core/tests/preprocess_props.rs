use livseg::preprocess::*;
use livseg::volume::{Grid, LabelSlice2D, Slice2D, Volume3D};
use proptest::prelude::*;

fn slice_pair() -> impl Strategy<Value = (Slice2D, LabelSlice2D)> {
    (2usize..12, 2usize..12).prop_flat_map(|(w, h)| {
        (
            prop::collection::vec(-300f32..600.0, w * h),
            prop::collection::vec(0u8..3, w * h),
        )
            .prop_map(move |(img, lab)| (Slice2D::new(w, h, img).unwrap(), LabelSlice2D::new(w, h, lab).unwrap()))
    })
}

proptest! {
    #[test]
    fn window_is_idempotent(
        data in prop::collection::vec(-2000f32..2000.0, 24),
        shorts in prop::collection::vec(any::<i16>(), 24),
        lo in -500f32..0.0,
        span in 1f32..800.0,
    ) {
        let g = Grid::isotropic([2, 3, 4]).unwrap();
        let hi = lo + span;
        for v in [Volume3D::from_float(g, data).unwrap(), Volume3D::from_short(g, shorts).unwrap()] {
            let once = hu_window(&v, lo, hi).unwrap();
            prop_assert_eq!(hu_window(&once, lo, hi).unwrap(), once);
        }
    }

    #[test]
    fn equalization_preserves_order((img, _) in slice_pair(), bins in 1usize..300) {
        let range = (-300.0, 600.0);
        let out = hist_equalize_slice(&img, bins, range).unwrap();
        for i in 0..img.data.len() {
            for j in 0..img.data.len() {
                if img.data[i] < img.data[j] {
                    prop_assert!(out.data[i] <= out.data[j]);
                }
            }
        }
    }

    #[test]
    fn integer_shift_only_moves_values((img, lab) in slice_pair(), dx in -4i64..5, dy in -4i64..5) {
        let t = Transform2D { shift: [dx, dy], angle_deg: 0.0 };
        let (oi, ol) = apply_transform(&img, &lab, &t).unwrap();
        let (w, h) = (img.width as i64, img.height as i64);
        for y in 0..h {
            for x in 0..w {
                let k = (y * w + x) as usize;
                prop_assert!(img.data.contains(&oi.data[k]));
                let (sx, sy) = (x - dx, y - dy);
                if (0..w).contains(&sx) && (0..h).contains(&sy) {
                    prop_assert_eq!(oi.data[k], img.at(sx as usize, sy as usize));
                    prop_assert_eq!(ol.labels[k], lab.at(sx as usize, sy as usize));
                }
            }
        }
    }

    #[test]
    fn augment_adds_no_labels((img, lab) in slice_pair(), seed in any::<u64>()) {
        let p = AugmentParams { max_shift_vox: 4, seed, ..AugmentParams::default() };
        let (_, out) = augment(&img, &lab, &p).unwrap();
        for l in &out.labels {
            prop_assert!(lab.labels.contains(l));
        }
    }
}
