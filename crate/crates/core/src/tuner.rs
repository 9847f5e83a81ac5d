//! Random search over CRF weights and kernel widths.
//!
//! Every trial draws five uniforms from one ChaCha8 stream, so the first `k`
//! trials of a longer search are exactly the trials of a `k`-trial search
//! with the same seed.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{infer, CrfParams, DEFAULT_ITERATIONS};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::metrics::dice;
use crate::phantom::{LESION, LIVER};
use crate::volume::{LabelVolume, ProbVolume, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
    pub scale: Scale,
}

impl Range {
    pub fn log(lo: f64, hi: f64) -> Self {
        Self { lo, hi, scale: Scale::Log }
    }

    pub fn linear(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            scale: Scale::Linear,
        }
    }

    pub fn point(v: f64) -> Self {
        Self::linear(v, v)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::InvalidParameter(format!(
                "{name}: range [{}, {}] needs finite lo <= hi",
                self.lo, self.hi
            )));
        }
        if self.scale == Scale::Log && self.lo <= 0.0 {
            return Err(Error::InvalidParameter(format!("{name}: log scale needs lo > 0")));
        }
        Ok(())
    }

    /// Maps a uniform `u` in `[0, 1)` into the range.
    fn sample(&self, u: f64) -> f64 {
        if self.lo == self.hi {
            return self.lo;
        }
        match self.scale {
            Scale::Linear => self.lo + u * (self.hi - self.lo),
            Scale::Log => (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp(),
        }
    }
}

pub const PARAM_NAMES: [&str; 5] = ["w_pos", "w_bil", "sigma_pos_mm", "sigma_bil_mm", "sigma_int"];

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    /// In [`PARAM_NAMES`] order.
    pub ranges: [Range; 5],
    pub trials: usize,
    pub seed: u64,
    /// Mean-field iterations used for every trial.
    pub iterations: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            ranges: [
                Range::log(0.1, 100.0),
                Range::log(0.1, 100.0),
                Range::log(0.5, 50.0),
                Range::log(0.5, 50.0),
                Range::log(1.0, 200.0),
            ],
            trials: 20,
            seed: 0,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (r, name) in self.ranges.iter().zip(PARAM_NAMES) {
            r.validate(name)?;
        }
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        Ok(())
    }

    /// Key=value overrides. A range reads `lo hi [log|linear]`; without a
    /// scale the current one is kept.
    pub fn merge(mut self, kv: &KeyValues) -> Result<Self> {
        let mut known: Vec<&str> = PARAM_NAMES.to_vec();
        known.extend(["trials", "seed", "iterations"]);
        kv.reject_unknown(&known)?;
        for (k, name) in PARAM_NAMES.iter().enumerate() {
            let Some(text) = kv.get_str(name) else { continue };
            let tok: Vec<&str> = text.split_whitespace().collect();
            let bad = || Error::parse("search space", format!("{name} = {text:?}: expected `lo hi [log|linear]`"));
            if !(2..=3).contains(&tok.len()) {
                return Err(bad());
            }
            let lo: f64 = tok[0].parse().map_err(|_| bad())?;
            let hi: f64 = tok[1].parse().map_err(|_| bad())?;
            let scale = match tok.get(2) {
                None => self.ranges[k].scale,
                Some(&"log") => Scale::Log,
                Some(&"linear") => Scale::Linear,
                Some(_) => return Err(bad()),
            };
            self.ranges[k] = Range { lo, hi, scale };
        }
        if let Some(v) = kv.get("trials")? {
            self.trials = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.get("iterations")? {
            self.iterations = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().merge(&KeyValues::parse(text, "search space")?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::default().merge(&KeyValues::load(path)?)
    }

    /// The parameter vectors the search will evaluate, in trial order.
    pub fn samples(&self) -> Vec<CrfParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.trials)
            .map(|_| {
                let v: Vec<f64> = self.ranges.iter().map(|r| r.sample(rng.random::<f64>())).collect();
                CrfParams {
                    w_pos: v[0],
                    w_bil: v[1],
                    sigma_pos_mm: v[2],
                    sigma_bil_mm: v[3],
                    sigma_int: v[4],
                    iterations: self.iterations,
                }
            })
            .collect()
    }
}

/// One validation case: the objective is Dice of `class`.
#[derive(Clone, Debug)]
pub struct TuneCase {
    pub id: String,
    pub unary: ProbVolume,
    pub intensity: Volume3D,
    pub gt: LabelVolume,
    pub class: u8,
}

/// Lesion Dice when the reference holds lesion voxels, liver Dice otherwise.
pub fn default_objective_class(gt: &LabelVolume) -> u8 {
    if gt.count(LESION) > 0 {
        LESION
    } else {
        LIVER
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub params: CrfParams,
    /// `None` where the objective is undefined for the case.
    pub scores: Vec<Option<f64>>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: CrfParams,
    pub best_trial: usize,
    pub best_score: f64,
    pub trace: Vec<TrialRecord>,
}

/// Per-case Dice of `params`, `None` for cases whose reference lacks the
/// objective class.
pub fn score_cases(params: &CrfParams, cases: &[TuneCase]) -> Result<Vec<Option<f64>>> {
    cases
        .iter()
        .map(|c| {
            let gt = c.gt.mask(c.class);
            if !gt.contains(&true) {
                log::warn!("case {}: class {} absent from reference, skipped", c.id, c.class);
                return Ok(None);
            }
            let (_, map) = infer(&c.unary, &c.intensity, params)?;
            Ok(Some(dice(&map.mask(c.class), &gt)?))
        })
        .collect()
}

fn mean_defined(scores: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = scores.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("objective undefined on every case".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean objective over the cases where it is defined.
pub fn score(params: &CrfParams, cases: &[TuneCase]) -> Result<f64> {
    mean_defined(&score_cases(params, cases)?)
}

/// Evaluates every sampled trial and returns the best, ties going to the
/// earlier trial.
pub fn random_search(space: &SearchSpace, cases: &[TuneCase]) -> Result<SearchResult> {
    space.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidParameter("random search needs at least one case".into()));
    }
    let mut trace = Vec::with_capacity(space.trials);
    for (trial, params) in space.samples().into_iter().enumerate() {
        let scores = score_cases(&params, cases)?;
        let mean = mean_defined(&scores)?;
        log::info!("trial {trial}: mean dice {mean:.4}");
        trace.push(TrialRecord {
            trial,
            params,
            scores,
            mean,
        });
    }
    let mut best = 0;
    for (k, r) in trace.iter().enumerate() {
        if r.mean > trace[best].mean {
            best = k;
        }
    }
    Ok(SearchResult {
        best: trace[best].params,
        best_trial: best,
        best_score: trace[best].mean,
        trace,
    })
}

/// Trace as CSV: trial, the five parameters, one column per case, mean.
pub fn trace_csv(result: &SearchResult, case_ids: &[String]) -> String {
    let mut s = String::from("trial");
    for name in PARAM_NAMES {
        s.push(',');
        s.push_str(name);
    }
    for id in case_ids {
        s.push(',');
        s.push_str(id);
    }
    s.push_str(",mean\n");
    for r in &result.trace {
        let p = &r.params;
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            r.trial, p.w_pos, p.w_bil, p.sigma_pos_mm, p.sigma_bil_mm, p.sigma_int
        );
        for sc in &r.scores {
            match sc {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push_str(",NA"),
            }
        }
        let _ = writeln!(s, ",{}", r.mean);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn tiny_case() -> TuneCase {
        let g = Grid::isotropic([6, 6, 2]).unwrap();
        let labels: Vec<u8> = (0..72).map(|i| ((i % 6) >= 3) as u8).collect();
        let gt = LabelVolume::new(g, labels).unwrap();
        let mut probs = Vec::with_capacity(144);
        for c in 0..2 {
            for (i, &l) in gt.labels().iter().enumerate() {
                // Flip a few voxels to give the CRF something to fix.
                let flipped = i % 11 == 0;
                let p = if (l == c) != flipped { 0.8 } else { 0.2 };
                probs.push(p);
            }
        }
        let intensity = Volume3D::from_float(g, gt.labels().iter().map(|&l| l as f32 * 100.0).collect()).unwrap();
        TuneCase {
            id: "tiny".into(),
            unary: ProbVolume::new(g, 2, probs).unwrap(),
            intensity,
            gt,
            class: 1,
        }
    }

    #[test]
    fn parse_space() {
        let s = SearchSpace::parse("w_pos = 1 2 linear\nsigma_int = 5 50\ntrials = 3\nseed = 9\n").unwrap();
        assert_eq!(s.ranges[0], Range::linear(1.0, 2.0));
        assert_eq!(s.ranges[4], Range::log(5.0, 50.0));
        assert_eq!((s.trials, s.seed), (3, 9));
        assert!(SearchSpace::parse("w_pos = 0 1 log").is_err());
        assert!(SearchSpace::parse("w_pos = 2 1").is_err());
        assert!(SearchSpace::parse("w_pos = 1").is_err());
        assert!(SearchSpace::parse("speed = 1").is_err());
    }

    #[test]
    fn samples_respect_ranges_and_prefix() {
        let mut s = SearchSpace {
            trials: 50,
            seed: 4,
            ..Default::default()
        };
        let long = s.samples();
        for p in &long {
            assert!((0.1..=100.0).contains(&p.w_pos));
            assert!((0.5..=50.0).contains(&p.sigma_bil_mm));
            assert!((1.0..=200.0).contains(&p.sigma_int));
        }
        s.trials = 7;
        assert_eq!(s.samples(), long[..7].to_vec());
    }

    #[test]
    fn single_trial_and_point_space() {
        let case = tiny_case();
        let one = SearchSpace {
            trials: 1,
            iterations: 2,
            ..Default::default()
        };
        let r = random_search(&one, std::slice::from_ref(&case)).unwrap();
        assert_eq!(r.best, one.samples()[0]);
        assert_eq!(r.best_trial, 0);

        let point = SearchSpace {
            ranges: [1.5, 2.5, 3.0, 4.0, 30.0].map(Range::point),
            trials: 3,
            iterations: 2,
            ..Default::default()
        };
        let r = random_search(&point, &[case]).unwrap();
        assert_eq!((r.best.w_pos, r.best.sigma_int), (1.5, 30.0));
        assert_eq!(r.best_trial, 0);
        assert_eq!(r.best_score, r.trace.iter().map(|t| t.mean).fold(f64::MIN, f64::max));
    }

    #[test]
    fn absent_class_is_skipped() {
        let mut empty = tiny_case();
        empty.id = "empty".into();
        empty.class = 2;
        let space = SearchSpace {
            trials: 2,
            iterations: 1,
            ..Default::default()
        };
        let r = random_search(&space, &[tiny_case(), empty.clone()]).unwrap();
        assert!(r.trace.iter().all(|t| t.scores[1].is_none()));
        assert!(random_search(&space, &[empty]).is_err());
        assert!(random_search(&space, &[]).is_err());
        let csv = trace_csv(&r, &["tiny".into(), "empty".into()]);
        assert!(csv.starts_with("trial,w_pos,w_bil,sigma_pos_mm,sigma_bil_mm,sigma_int,tiny,empty,mean\n"));
        assert!(csv.lines().nth(1).unwrap().contains(",NA,"));
    }
}
