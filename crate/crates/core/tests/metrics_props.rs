use livseg::metrics::*;
use livseg::volume::{Grid, LabelVolume};
use proptest::prelude::*;

fn mask_pair() -> impl Strategy<Value = (Grid, Vec<bool>, Vec<bool>)> {
    (prop::array::uniform3(2usize..9), prop::array::uniform3(0.4f64..3.0)).prop_flat_map(|(dims, sp)| {
        let n = dims[0] * dims[1] * dims[2];
        (
            Just(Grid::new(dims, sp).unwrap()),
            prop::collection::vec(prop::bool::weighted(0.4), n),
            prop::collection::vec(prop::bool::weighted(0.4), n),
        )
    })
}

fn nonempty(m: &[bool]) -> bool {
    m.contains(&true)
}

/// Pooled surface distances by comparing every pair of surface voxels.
fn brute_surface_distances(a: &[bool], b: &[bool], g: &Grid) -> Vec<f64> {
    let sa = surface_voxels(a, g).unwrap();
    let sb = surface_voxels(b, g).unwrap();
    let dist = |i: usize, j: usize| {
        let (p, q) = (g.position_mm(i), g.position_mm(j));
        (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt()
    };
    let mut d: Vec<f64> = sa.iter().map(|&i| sb.iter().map(|&j| dist(i, j)).fold(f64::INFINITY, f64::min)).collect();
    d.extend(sb.iter().map(|&j| sa.iter().map(|&i| dist(i, j)).fold(f64::INFINITY, f64::min)));
    d
}

proptest! {
    #[test]
    fn symmetric((g, a, b) in mask_pair()) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        prop_assert_eq!(voe(&a, &b).unwrap(), voe(&b, &a).unwrap());
        if nonempty(&a) && nonempty(&b) {
            prop_assert!((asd(&a, &b, &g).unwrap() - asd(&b, &a, &g).unwrap()).abs() <= 1e-12);
            prop_assert_eq!(msd(&a, &b, &g).unwrap(), msd(&b, &a, &g).unwrap());
        }
    }

    #[test]
    fn dice_voe_identity((_g, a, b) in mask_pair()) {
        prop_assume!(nonempty(&a) || nonempty(&b));
        let d = dice(&a, &b).unwrap();
        let v = voe(&a, &b).unwrap();
        // Jaccard = D / (200 - D) with D in percent
        prop_assert!((v - 100.0 * (1.0 - d / (200.0 - d))).abs() <= 1e-9);
    }

    #[test]
    fn distances_match_brute_force((g, a, b) in mask_pair()) {
        prop_assume!(nonempty(&a) && nonempty(&b));
        let fast = surface_distances(&a, &b, &g).unwrap();
        let slow = brute_surface_distances(&a, &b, &g);
        prop_assert_eq!(fast.len(), slow.len());
        for (x, y) in fast.iter().zip(&slow) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        prop_assert!(msd(&a, &b, &g).unwrap() >= asd(&a, &b, &g).unwrap());
    }

    #[test]
    fn translation_invariant((g, a, b) in mask_pair(), shift in prop::array::uniform3(0usize..3)) {
        prop_assume!(nonempty(&a) && nonempty(&b));
        // embed both masks in a larger grid with a one-voxel empty border,
        // once at offset 1 and once at 1 + shift
        let d = g.dims();
        let big_dims = [d[0] + 5, d[1] + 5, d[2] + 5];
        let big = Grid::new(big_dims, g.spacing()).unwrap();
        let embed = |m: &[bool], off: [usize; 3]| {
            let mut out = vec![false; big.len()];
            for i in 0..m.len() {
                let [x, y, z] = g.coords(i);
                out[big.index(x + off[0], y + off[1], z + off[2])] = m[i];
            }
            out
        };
        let o1 = [1, 1, 1];
        let o2 = [1 + shift[0], 1 + shift[1], 1 + shift[2]];
        let (a1, b1, a2, b2) = (embed(&a, o1), embed(&b, o1), embed(&a, o2), embed(&b, o2));
        let p1 = LabelVolume::from_mask(big, &a1).unwrap();
        let g1 = LabelVolume::from_mask(big, &b1).unwrap();
        let p2 = LabelVolume::from_mask(big, &a2).unwrap();
        let g2 = LabelVolume::from_mask(big, &b2).unwrap();
        let r1 = evaluate(&p1, &g1, 1).unwrap();
        let r2 = evaluate(&p2, &g2, 1).unwrap();
        prop_assert_eq!(r1.voe_pct, r2.voe_pct);
        prop_assert_eq!(r1.dice_pct, r2.dice_pct);
        prop_assert_eq!(r1.rvd_pct, r2.rvd_pct);
        prop_assert!((r1.asd_mm.unwrap() - r2.asd_mm.unwrap()).abs() <= 1e-12);
        prop_assert_eq!(r1.msd_mm, r2.msd_mm);
    }
}
