//! 6-connected component labelling of binary masks.

use super::Dims;

/// Component id per voxel (0 = not in the mask, ids start at 1 in scan
/// order) and the voxel count of each component (`sizes[id - 1]`).
pub fn label_components(mask: &[bool], dims: Dims) -> (Vec<u32>, Vec<usize>) {
    assert_eq!(mask.len(), dims[0] * dims[1] * dims[2], "mask length vs dims");
    let [nx, ny, nz] = dims;
    let mut ids = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for seed in 0..mask.len() {
        if !mask[seed] || ids[seed] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[seed] = id;
        stack.push(seed);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut visit = |j: usize| {
                if mask[j] && ids[j] == 0 {
                    ids[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Keeps only the largest 6-connected component. Equal sizes go to the
/// component met first in scan order.
pub fn largest_component(mask: &[bool], dims: Dims) -> Vec<bool> {
    let (ids, sizes) = label_components(mask, dims);
    let mut best = 0;
    for (k, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = k;
        }
    }
    if sizes.is_empty() {
        return vec![false; mask.len()];
    }
    let keep = best as u32 + 1;
    ids.iter().map(|&id| id == keep).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_neighbours_are_separate() {
        // (0,0,0) and (1,1,0) touch only along an edge.
        let mut m = vec![false; 8];
        m[0] = true;
        m[3] = true;
        let (_, sizes) = label_components(&m, [2, 2, 2]);
        assert_eq!(sizes, vec![1, 1]);
    }

    #[test]
    fn keeps_bigger_blob() {
        let dims = [20, 10, 3];
        let mut m = vec![false; 600];
        let idx = |x: usize, y: usize, z: usize| x + 20 * (y + 10 * z);
        for x in 0..10 {
            for y in 0..10 {
                m[idx(x, y, 1)] = true;
            }
        }
        for x in 15..20 {
            m[idx(x, 0, 0)] = true;
        }
        let out = largest_component(&m, dims);
        assert_eq!(out.iter().filter(|&&b| b).count(), 100);
        assert!(!out[idx(17, 0, 0)]);
    }

    #[test]
    fn tie_goes_to_first() {
        let m = vec![true, false, true];
        assert_eq!(largest_component(&m, [3, 1, 1]), vec![true, false, false]);
    }

    #[test]
    fn empty_mask() {
        assert_eq!(largest_component(&[false; 4], [2, 2, 1]), vec![false; 4]);
    }
}
