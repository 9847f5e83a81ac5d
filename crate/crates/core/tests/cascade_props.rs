use livseg::cascade::*;
use livseg::error::Result;
use livseg::metrics::{evaluate, MetricsReport};
use livseg::phantom::{generate, PhantomSpec, LESION, LIVER};
use livseg::volume::{Grid, ProbVolume, Volume3D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

const DIMS: [usize; 3] = [10, 9, 5];

/// Lesion everywhere in whatever grid it is asked about.
struct AllLesion;

impl UnaryProvider for AllLesion {
    fn predict(&self, q: &StageQuery) -> Result<ProbVolume> {
        let g = *q.ct.grid();
        let n = g.len();
        let mut p = vec![0.1f32; 2 * n];
        p[n..].fill(0.9);
        ProbVolume::new(g, 2, p)
    }
}

fn inputs(seed: u64) -> (Volume3D, FileProvider, FileProvider) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::new(DIMS, [1.0, 1.2, 2.0]).unwrap();
    let n = grid.len();
    let ct = Volume3D::from_float(grid, (0..n).map(|_| rng.random_range(-100f32..300.0)).collect()).unwrap();
    // liver-ish blob in the middle plus noise, so a liver is always found
    let liver: Vec<f32> = (0..n)
        .map(|i| {
            let [x, y, _] = grid.coords(i);
            let inside = (2..8).contains(&x) && (2..7).contains(&y);
            let p: f32 = if inside { 0.8 } else { 0.2 };
            (p + rng.random_range(-0.3f32..0.3)).clamp(0.01, 0.99)
        })
        .collect();
    let mut lp = vec![0f32; 2 * n];
    for i in 0..n {
        lp[i] = 1.0 - liver[i];
        lp[n + i] = liver[i];
    }
    let scores = (0..3 * n).map(|_| rng.random_range(0.05f32..1.0)).collect();
    (
        ct,
        FileProvider::new(ProbVolume::new(grid, 2, lp).unwrap()),
        FileProvider::new(ProbVolume::from_scores(grid, 3, scores).unwrap()),
    )
}

fn config(pad: f64) -> CascadeConfig {
    CascadeConfig {
        roi_pad_mm: pad,
        stage2_size: [7, 6],
        ..CascadeConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn lesions_stay_inside_liver_and_roi(seed in any::<u64>(), pad in 0.0f64..6.0, lcc in any::<bool>()) {
        let (ct, liver, lesion) = inputs(seed);
        let cfg = CascadeConfig { largest_component_only: lcc, ..config(pad) };
        let (labels, inter) = run_cascade(&ct, &liver, &lesion, &cfg, None).unwrap();
        for i in 0..labels.len() {
            if labels.labels()[i] == LESION {
                prop_assert_eq!(inter.liver_mask.labels()[i], LIVER);
            }
            if inter.lesion_mask.labels()[i] != 0 {
                prop_assert!(inter.roi_bbox.contains(ct.grid().coords(i)));
            }
        }
        let (again, _) = run_cascade(&ct, &liver, &lesion, &cfg, None).unwrap();
        prop_assert_eq!(again, labels);
    }

    #[test]
    fn smaller_pad_never_adds_lesion(seed in any::<u64>(), small in 0.0f64..4.0, extra in 0.0f64..4.0) {
        let (ct, liver, _) = inputs(seed);
        let (a, _) = run_cascade(&ct, &liver, &AllLesion, &config(small), None).unwrap();
        let (b, _) = run_cascade(&ct, &liver, &AllLesion, &config(small + extra), None).unwrap();
        for i in 0..a.len() {
            if a.labels()[i] == LESION {
                prop_assert_eq!(b.labels()[i], LESION);
            }
        }
    }

    #[test]
    fn phantom_labels_are_nested(seed in any::<u64>()) {
        let base = PhantomSpec::parse(
            "dims = 20 18 10\nliver_center_mm = 10 9 10\nliver_semi_axes_mm = 7 6 7\nlesions = 8 8 9 2 40; 12 10 12 1.5 160\n",
        ).unwrap();
        let spec = base.jittered(seed);
        prop_assume!(spec.validate().is_ok());
        let (_, gt) = generate(&spec).unwrap();
        let grid = gt.grid();
        for i in 0..gt.len() {
            let l = gt.labels()[i];
            prop_assert!(l <= LESION);
            if l == LESION {
                let p = grid.position_mm(i);
                let r: f64 = (0..3).map(|a| ((p[a] - spec.liver_center_mm[a]) / spec.liver_semi_axes_mm[a]).powi(2)).sum();
                prop_assert!(r <= 1.0);
            }
        }
        for class in [LIVER, LESION] {
            if gt.count(class) > 0 {
                prop_assert_eq!(evaluate(&gt, &gt, class).unwrap(), MetricsReport::perfect());
            }
        }
    }
}
