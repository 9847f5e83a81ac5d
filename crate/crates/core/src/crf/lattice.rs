//! Permutohedral lattice for fast high-dimensional Gaussian filtering.
//!
//! Points are embedded in the hyperplane `H_d = {x in R^(d+1) : sum x = 0}`,
//! splatted onto the vertices of their enclosing lattice simplex with
//! barycentric weights, blurred along the `d + 1` lattice directions and
//! sliced back. Two departures from the classic formulation:
//!
//! * The lattice is closed under the blur stencil before filtering, so no
//!   mass is lost at vertices that received no splat. The filter is then an
//!   exact linear operator whose total mass is known analytically, which
//!   lets the unnormalised output be calibrated to the literal Gaussian sum.
//! * The blur can run several `[1 2 1] / 4` passes per direction on a
//!   correspondingly finer lattice, trading lattice size for a kernel that
//!   is closer to a true Gaussian.

use std::f64::consts::PI;

use rayon::prelude::*;

use super::features::Features;

const EMPTY: u32 = u32::MAX;

/// Open-addressing table from integer lattice keys (first `d` coordinates)
/// to dense vertex indices.
struct KeyTable {
    d: usize,
    keys: Vec<i32>,
    slots: Vec<u32>,
    mask: usize,
}

impl KeyTable {
    fn with_capacity(d: usize, expected: usize) -> Self {
        let cap = (expected.max(16) * 2).next_power_of_two();
        Self {
            d,
            keys: Vec::with_capacity(expected * d),
            slots: vec![EMPTY; cap],
            mask: cap - 1,
        }
    }

    fn len(&self) -> usize {
        self.keys.len() / self.d
    }

    #[inline]
    fn hash(key: &[i32]) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &k in key {
            h ^= k as u32 as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h ^ (h >> 31)) as usize
    }

    #[inline]
    fn key(&self, idx: u32) -> &[i32] {
        let s = idx as usize * self.d;
        &self.keys[s..s + self.d]
    }

    fn insert(&mut self, key: &[i32]) -> u32 {
        if (self.len() + 1) * 2 > self.slots.len() {
            self.grow();
        }
        let mut h = Self::hash(key) & self.mask;
        loop {
            let slot = self.slots[h];
            if slot == EMPTY {
                let idx = self.len() as u32;
                self.keys.extend_from_slice(key);
                self.slots[h] = idx;
                return idx;
            }
            if self.key(slot) == key {
                return slot;
            }
            h = (h + 1) & self.mask;
        }
    }

    fn grow(&mut self) {
        let cap = self.slots.len() * 2;
        self.slots = vec![EMPTY; cap];
        self.mask = cap - 1;
        for idx in 0..self.len() as u32 {
            let mut h = Self::hash(self.key(idx)) & self.mask;
            while self.slots[h] != EMPTY {
                h = (h + 1) & self.mask;
            }
            self.slots[h] = idx;
        }
    }
}

/// Lattice structure for one feature set; reusable across value fields.
pub struct PermutohedralLattice {
    d: usize,
    n: usize,
    passes: usize,
    /// Simplex vertex of each point, `n * (d + 1)`.
    vertex: Vec<u32>,
    /// Barycentric weights, `n * (d + 1)`.
    weight: Vec<f64>,
    /// Lattice self-response of each point (already scaled).
    self_response: Vec<f64>,
    /// Per direction, minus and plus neighbours of the vertices that can
    /// hold mass by the time that direction is blurred.
    neighbors: Vec<Vec<[u32; 2]>>,
    vertices: usize,
    scale: f64,
}

/// Typical ratio of closed to splatted vertex counts for sparse inputs.
const CLOSURE_GROWTH_ESTIMATE: usize = 25;

/// Default number of `[1 2 1]` blur passes per lattice direction.
pub const DEFAULT_BLUR_PASSES: usize = 4;

impl PermutohedralLattice {
    pub fn new(features: &Features) -> Self {
        Self::with_passes(features, DEFAULT_BLUR_PASSES)
    }

    pub fn with_passes(features: &Features, passes: usize) -> Self {
        Self::with_budget(features, passes, usize::MAX).expect("unbounded build")
    }

    /// Builds the lattice unless it is predicted to need more than
    /// `max_vertices` vertices (or actually exceeds twice that), in which
    /// case construction stops early and returns `None`.
    pub fn with_budget(features: &Features, passes: usize, max_vertices: usize) -> Option<Self> {
        let passes = passes.max(1);
        let d = features.dim();
        let n = features.len();
        let d1 = d + 1;

        // Blur variance per direction is passes/2 lattice steps; splat and
        // slice add the equivalent of half a pass. Matching the total to the
        // target Gaussian gives the refinement factor below.
        let refine = ((3.0 * passes as f64 + 1.0) / 4.0).sqrt();
        let inv_std = (2.0f64 / 3.0).sqrt() * d1 as f64 * refine;
        let scale_factor: Vec<f64> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();

        let canonical: Vec<i32> = (0..d1)
            .flat_map(|k| {
                (0..d1).map(move |i| if i + k <= d { k as i32 } else { k as i32 - d1 as i32 })
            })
            .collect();

        let mut table = KeyTable::with_capacity(d, n / 2 + 16);
        let mut vertex = vec![0u32; n * d1];
        let mut weight = vec![0f64; n * d1];

        let mut elevated = vec![0f64; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0f64; d + 2];
        let mut key = vec![0i32; d];
        let down = 1.0 / d1 as f64;

        for p in 0..n {
            let f = features.point(p);
            let mut sm = 0.0;
            for i in (1..=d).rev() {
                let cf = f[i - 1] * scale_factor[i - 1];
                elevated[i] = sm - i as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            let mut sum = 0i32;
            for i in 0..d1 {
                let v = elevated[i] * down;
                let up = v.ceil() * d1 as f64;
                let dn = v.floor() * d1 as f64;
                rem0[i] = if up - elevated[i] < elevated[i] - dn {
                    up as i32
                } else {
                    dn as i32
                };
                sum += rem0[i];
            }
            let sum = sum / d1 as i32;

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..d1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..d1 {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i32;
                    rem0[i] += d1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= d1 as i32;
                    rem0[i] -= d1 as i32;
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..d1 {
                let v = (elevated[i] - rem0[i] as f64) * down;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d + 1 - r] -= v;
            }
            bary[0] += 1.0 + bary[d + 1];

            for k in 0..d1 {
                for i in 0..d {
                    key[i] = rem0[i] + canonical[k * d1 + rank[i] as usize];
                }
                vertex[p * d1 + k] = table.insert(&key);
                weight[p * d1 + k] = bary[k];
            }
        }

        // Close the vertex set under the blur stencil, direction by
        // direction in blur order. Vertices added while closing direction j
        // hold no mass during the earlier directions, so blur j only needs
        // to touch the first `active[j]` vertices. Neighbour links come from
        // the chains laid out here: a link can carry mass only if both ends
        // sit within `passes` steps of one source vertex, i.e. on one chain.
        // Sparse point sets (the expensive ones) grow ~17-26x under the
        // closure below, so the splat count predicts the final size.
        if table.len().saturating_mul(CLOSURE_GROWTH_ESTIMATE) > max_vertices {
            return None;
        }
        let mut neighbors: Vec<Vec<[u32; 2]>> = Vec::with_capacity(d1);
        let mut chain = vec![0u32; 2 * passes + 1];
        let mut base = vec![0i32; d];
        for j in 0..d1 {
            let existing = table.len();
            let mut links: Vec<[u32; 2]> = Vec::with_capacity(existing * 2);
            for u in 0..existing as u32 {
                base.copy_from_slice(table.key(u));
                for (c, slot) in chain.iter_mut().enumerate() {
                    let step = c as i32 - passes as i32;
                    if step == 0 {
                        *slot = u;
                        continue;
                    }
                    for (i, k) in key.iter_mut().enumerate() {
                        let dir = if i == j { d as i32 } else { -1 };
                        *k = base[i] + step * dir;
                    }
                    *slot = table.insert(&key);
                }
                if links.len() < table.len() {
                    links.resize(table.len(), [EMPTY; 2]);
                }
                for w in chain.windows(2) {
                    links[w[0] as usize][1] = w[1];
                    links[w[1] as usize][0] = w[0];
                }
                if table.len() / 2 > max_vertices {
                    return None;
                }
            }
            links.resize(table.len(), [EMPTY; 2]);
            neighbors.push(links);
        }
        let vertices = table.len();

        // Unit-mass stencil on a lattice whose vertices each own a cell of
        // volume (d+1)^(d-1/2) in elevated units; the target kernel has mass
        // (2 pi)^(d/2) in feature units, stretched by inv_std^d here.
        let cell = (d1 as f64).powf(d as f64 - 0.5);
        let scale = (2.0 * PI).powf(d as f64 / 2.0) * inv_std.powi(d as i32) / cell;

        let stencil = simplex_stencil(d, passes);
        let self_response = (0..n)
            .map(|p| {
                let w = &weight[p * d1..(p + 1) * d1];
                let mut s = 0.0;
                for a in 0..d1 {
                    for b in 0..d1 {
                        s += w[a] * w[b] * stencil[a * d1 + b];
                    }
                }
                s * scale
            })
            .collect();

        Some(Self {
            d,
            n,
            passes,
            vertex,
            weight,
            self_response,
            neighbors,
            vertices,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    /// Lattice kernel response of each point to itself.
    pub fn self_response(&self) -> &[f64] {
        &self.self_response
    }

    /// Approximates `sum_j k(f_i, f_j) v_j` including `j = i`, for every
    /// channel of a channel-major buffer.
    pub fn filter(&self, values: &[f64], channels: usize) -> Vec<f64> {
        let n = self.n;
        let c = channels;
        assert_eq!(values.len(), n * c, "value buffer size");
        let d1 = self.d + 1;
        // Channels interleaved per vertex so one neighbour lookup serves all.
        let mut lat = vec![0.0f64; self.vertices * c];
        for p in 0..n {
            for k in 0..d1 {
                let v = self.vertex[p * d1 + k] as usize * c;
                let w = self.weight[p * d1 + k];
                for ch in 0..c {
                    lat[v + ch] += w * values[ch * n + p];
                }
            }
        }
        let mut tmp = vec![0.0f64; self.vertices * c];
        const BLOCK: usize = 4096;
        for nb in &self.neighbors {
            let active = nb.len();
            for _ in 0..self.passes {
                let src = &lat;
                tmp[..active * c]
                    .par_chunks_mut(BLOCK * c)
                    .enumerate()
                    .for_each(|(b, out)| {
                        for (r, t) in out.chunks_mut(c).enumerate() {
                            let u = b * BLOCK + r;
                            let [m, p] = nb[u];
                            for (ch, o) in t.iter_mut().enumerate() {
                                let lm = if m == EMPTY { 0.0 } else { src[m as usize * c + ch] };
                                let lp = if p == EMPTY { 0.0 } else { src[p as usize * c + ch] };
                                *o = 0.5 * src[u * c + ch] + 0.25 * (lm + lp);
                            }
                        }
                    });
                std::mem::swap(&mut lat, &mut tmp);
            }
        }
        let mut out = vec![0.0; n * c];
        let sliced: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|p| {
                let mut acc = vec![0.0; c];
                for k in 0..d1 {
                    let v = self.vertex[p * d1 + k] as usize * c;
                    let w = self.weight[p * d1 + k];
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += w * lat[v + ch];
                    }
                }
                acc.into_iter().map(|a| a * self.scale)
            })
            .collect();
        for p in 0..n {
            for ch in 0..c {
                out[ch * n + p] = sliced[p * c + ch];
            }
        }
        out
    }
}

/// Stencil value between simplex vertices `a` and `b` (remainder indices),
/// `(d+1)^2` entries. Depends only on the remainder pair because the
/// stencil is symmetric under coordinate permutations.
fn simplex_stencil(d: usize, passes: usize) -> Vec<f64> {
    let d1 = d + 1;
    // Canonical simplex with rank = identity.
    let vert = |k: usize| -> Vec<i64> {
        (0..d1)
            .map(|i| if i + k <= d { k as i64 } else { k as i64 - d1 as i64 })
            .collect()
    };
    let mut out = vec![0.0; d1 * d1];
    for a in 0..d1 {
        for b in 0..d1 {
            let va = vert(a);
            let vb = vert(b);
            let delta: Vec<i64> = va.iter().zip(&vb).map(|(x, y)| y - x).collect();
            out[a * d1 + b] = stencil_at(&delta, passes);
        }
    }
    out
}

/// Value of the blur stencil (product of per-direction binomials of order
/// `2 * passes`) at lattice offset `delta`.
fn stencil_at(delta: &[i64], passes: usize) -> f64 {
    let d1 = delta.len() as i64;
    let m = 2 * passes as i64;
    // delta_k = d1 * n_k - S with S = sum n_k; all delta_k share a residue.
    let r = delta[0].rem_euclid(d1);
    let s0 = (d1 - r) % d1;
    let binom = |t: i64| -> f64 {
        // Binomial(m, t + passes) / 4^passes, t in [-passes, passes].
        let k = t + passes as i64;
        if k < 0 || k > m {
            return 0.0;
        }
        let mut c = 1.0f64;
        for i in 0..k {
            c = c * (m - i) as f64 / (i + 1) as f64;
        }
        c / 4f64.powi(passes as i32)
    };
    let mut total = 0.0;
    // Shifting every n_k by one leaves delta unchanged; sum over all shifts
    // that keep each n_k within the stencil support.
    let base: Vec<i64> = delta.iter().map(|&x| (x + s0).div_euclid(d1)).collect();
    for shift in -(3 * passes as i64 + 2)..=(3 * passes as i64 + 2) {
        let mut prod = 1.0;
        for &b in &base {
            prod *= binom(b + shift);
            if prod == 0.0 {
                break;
            }
        }
        total += prod;
    }
    total
}
