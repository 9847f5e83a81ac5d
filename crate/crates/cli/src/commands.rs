use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgGroup, Args};
use livseg::cascade::{run_cascade, CascadeConfig, CrfStages, FileProvider, NetProvider, UnaryProvider};
use livseg::crf::CrfParams;
use livseg::fcn::{load_checkpoint, save_checkpoint, train, ClassWeights, InputScaling, ToyNet, TrainConfig};
use livseg::kv::KeyValues;
use livseg::metrics::{evaluate, to_csv, MetricsReport};
use livseg::phantom::{generate, oracle_unary, OracleParams, PhantomSpec};
use livseg::preprocess::{augment, hist_equalize_volume, hu_window, AugmentParams, DEFAULT_BINS, DEFAULT_WINDOW};
use livseg::tuner::{default_objective_class, random_search, trace_csv, SearchSpace, TuneCase};
use livseg::volume::{load_labels, load_probs, load_scalar, save_volume, LabelVolume};

use crate::manifest::Manifest;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn parse_window(s: &str) -> std::result::Result<(f32, f32), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f32 = a.trim().parse().map_err(|e| format!("lo: {e}"))?;
    let hi: f32 = b.trim().parse().map_err(|e| format!("hi: {e}"))?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(format!("need finite lo < hi, got {lo},{hi}"));
    }
    Ok((lo, hi))
}

pub fn parse_size(s: &str) -> std::result::Result<[usize; 2], String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w: usize = a.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h: usize = b.trim().parse().map_err(|e| format!("height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("sizes must be >= 1".into());
    }
    Ok([w, h])
}

pub fn parse_stages(s: &str) -> std::result::Result<CrfStages, String> {
    match s {
        "liver" => Ok(CrfStages { liver: true, lesion: false }),
        "lesion" => Ok(CrfStages { liver: false, lesion: true }),
        "both" => Ok(CrfStages { liver: true, lesion: true }),
        "none" => Ok(CrfStages { liver: false, lesion: false }),
        _ => Err(format!("{s:?}: expected liver, lesion, both or none")),
    }
}

fn stages_name(s: CrfStages) -> &'static str {
    match (s.liver, s.lesion) {
        (true, true) => "both",
        (true, false) => "liver",
        (false, true) => "lesion",
        (false, false) => "none",
    }
}

fn config_value<T>(kv: Option<&KeyValues>, key: &str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
    match kv.and_then(|kv| kv.get_str(key)) {
        None => Ok(None),
        Some(v) => parse(v).map(Some).map_err(|e| CliError::Data(format!("config {key} = {v}: {e}"))),
    }
}

fn load_config(path: Option<&Path>, known: &[&str], m: &mut Manifest) -> Result<Option<KeyValues>> {
    let Some(path) = path else { return Ok(None) };
    m.set("config", path.display());
    let kv = KeyValues::load(path)?;
    kv.reject_unknown(known)?;
    Ok(Some(kv))
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into())
}

fn fmt_window(w: (f32, f32)) -> String {
    format!("{},{}", w.0, w.1)
}

// ---------------------------------------------------------------- preprocess

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Input CT volume (.mhd)
    pub input: PathBuf,
    /// HU window as lo,hi
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    pub window: Option<(f32, f32)>,
    /// Skip per-slice histogram equalization
    #[arg(long)]
    pub no_equalize: bool,
    #[arg(long)]
    pub bins: Option<usize>,
    /// key = value file with window, equalize, bins
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn preprocess(a: &PreprocessArgs, m: &mut Manifest) -> Result<()> {
    m.set("input.ct", a.input.display());
    let kv = load_config(a.config.as_deref(), &["window", "equalize", "bins"], m)?;
    let window = match a.window {
        Some(w) => w,
        None => config_value(kv.as_ref(), "window", parse_window)?.unwrap_or(DEFAULT_WINDOW),
    };
    let equalize = if a.no_equalize {
        false
    } else {
        config_value(kv.as_ref(), "equalize", |s| s.parse::<bool>().map_err(|e| e.to_string()))?.unwrap_or(true)
    };
    let bins = match a.bins {
        Some(b) => b,
        None => config_value(kv.as_ref(), "bins", |s| s.parse::<usize>().map_err(|e| e.to_string()))?
            .unwrap_or(DEFAULT_BINS),
    };
    m.set("param.window", fmt_window(window));
    m.set("param.equalize", equalize);
    m.set("param.bins", bins);

    let t = Instant::now();
    let ct = load_scalar(&a.input)?;
    let mut vol = hu_window(&ct, window.0, window.1)?;
    if equalize {
        vol = hist_equalize_volume(&vol, bins, window)?;
    }
    create_out(&a.out)?;
    let path = a.out.join("preprocessed.mhd");
    save_volume(&vol, &path)?;
    m.set("output.volume", path.display());
    m.set("time.preprocess_s", t.elapsed().as_secs_f64());
    Ok(())
}

// --------------------------------------------------------------------- infer

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("liver").required(true).args(["liver_probs", "liver_model"])))]
#[command(group(ArgGroup::new("lesion").required(true).args(["lesion_probs", "lesion_model"])))]
pub struct InferArgs {
    /// CT volume (.mhd), raw HU
    pub ct: PathBuf,
    /// Precomputed stage-1 probabilities on the CT grid
    #[arg(long)]
    pub liver_probs: Option<PathBuf>,
    /// Stage-1 network checkpoint
    #[arg(long)]
    pub liver_model: Option<PathBuf>,
    /// Precomputed stage-2 probabilities on the CT grid
    #[arg(long)]
    pub lesion_probs: Option<PathBuf>,
    /// Stage-2 network checkpoint
    #[arg(long)]
    pub lesion_model: Option<PathBuf>,
    /// CRF parameter file; refinement is off without it
    #[arg(long)]
    pub crf: Option<PathBuf>,
    /// Stages refined when --crf is given: liver, lesion, both, none
    #[arg(long, value_parser = parse_stages)]
    pub crf_stages: Option<CrfStages>,
    /// Stage-2 in-plane size as WxH
    #[arg(long, value_parser = parse_size)]
    pub stage2_size: Option<[usize; 2]>,
    #[arg(long)]
    pub roi_pad_mm: Option<f64>,
    /// Liver probability threshold
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    pub window: Option<(f32, f32)>,
    /// Keep every thresholded liver component, not just the largest
    #[arg(long)]
    pub all_components: bool,
    /// Reference labels; writes report.csv when given
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// key = value file with window, threshold, roi_pad_mm, stage2_size,
    /// crf_stages, largest_component_only
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

const INFER_KEYS: [&str; 6] = [
    "window",
    "threshold",
    "roi_pad_mm",
    "stage2_size",
    "crf_stages",
    "largest_component_only",
];

fn provider(probs: &Option<PathBuf>, model: &Option<PathBuf>, window: (f32, f32), stage: &str, m: &mut Manifest) -> Result<Box<dyn UnaryProvider>> {
    match (probs, model) {
        (Some(p), _) => {
            m.set(&format!("input.{stage}_probs"), p.display());
            Ok(Box::new(FileProvider::load(p)?))
        }
        (None, Some(p)) => {
            m.set(&format!("input.{stage}_model"), p.display());
            Ok(Box::new(NetProvider {
                net: load_checkpoint(p)?,
                scaling: InputScaling { lo: window.0, hi: window.1 },
            }))
        }
        (None, None) => Err(CliError::Usage(format!("{stage} provider missing"))),
    }
}

pub fn infer(a: &InferArgs, m: &mut Manifest) -> Result<()> {
    m.set("input.ct", a.ct.display());
    let kv = load_config(a.config.as_deref(), &INFER_KEYS, m)?;
    let kv = kv.as_ref();
    let num = |s: &str| s.parse::<f64>().map_err(|e| e.to_string());
    let window = match a.window {
        Some(w) => w,
        None => config_value(kv, "window", parse_window)?.unwrap_or(DEFAULT_WINDOW),
    };
    let mut cfg = CascadeConfig::default();
    if let Some(t) = a.threshold.map(Some).unwrap_or(config_value(kv, "threshold", num)?) {
        cfg.liver_threshold = t;
    }
    if let Some(p) = a.roi_pad_mm.map(Some).unwrap_or(config_value(kv, "roi_pad_mm", num)?) {
        cfg.roi_pad_mm = p;
    }
    if let Some(s) = a.stage2_size.map(Some).unwrap_or(config_value(kv, "stage2_size", parse_size)?) {
        cfg.stage2_size = s;
    }
    if let Some(s) = a.crf_stages.map(Some).unwrap_or(config_value(kv, "crf_stages", parse_stages)?) {
        cfg.crf_stages = s;
    }
    if a.all_components {
        cfg.largest_component_only = false;
    } else if let Some(b) = config_value(kv, "largest_component_only", |s| s.parse::<bool>().map_err(|e| e.to_string()))? {
        cfg.largest_component_only = b;
    }
    cfg.validate().map_err(CliError::Core)?;
    let crf = match &a.crf {
        Some(p) => {
            m.set("input.crf", p.display());
            Some(CrfParams::load(p)?)
        }
        None => None,
    };
    m.set("param.window", fmt_window(window));
    m.set("param.threshold", cfg.liver_threshold);
    m.set("param.roi_pad_mm", cfg.roi_pad_mm);
    m.set("param.stage2_size", format!("{}x{}", cfg.stage2_size[0], cfg.stage2_size[1]));
    m.set("param.largest_component_only", cfg.largest_component_only);
    m.set("param.crf_stages", if crf.is_some() { stages_name(cfg.crf_stages) } else { "none" });
    if let Some(p) = &crf {
        m.set("param.crf", p.to_text().trim_end().replace('\n', "; "));
    }

    let t = Instant::now();
    let ct = hu_window(&load_scalar(&a.ct)?, window.0, window.1)?;
    let liver = provider(&a.liver_probs, &a.liver_model, window, "liver", m)?;
    let lesion = provider(&a.lesion_probs, &a.lesion_model, window, "lesion", m)?;
    m.set("time.load_s", t.elapsed().as_secs_f64());

    let (labels, inter) = run_cascade(&ct, liver.as_ref(), lesion.as_ref(), &cfg, crf.as_ref())?;
    m.set("time.stage1_s", inter.timings.stage1_s);
    m.set("time.stage2_s", inter.timings.stage2_s);
    m.set("time.crf_s", inter.timings.crf_s);

    create_out(&a.out)?;
    let path = a.out.join("labels.mhd");
    save_volume(&labels, &path)?;
    m.set("output.labels", path.display());
    inter.save(a.out.join("intermediates"))?;
    m.set("output.intermediates", a.out.join("intermediates").display());

    if let Some(gt_path) = &a.gt {
        m.set("input.gt", gt_path.display());
        let gt = load_labels(gt_path)?;
        let id = stem(&a.ct);
        let mut rows = Vec::new();
        for class in [1u8, 2] {
            if gt.count(class) == 0 {
                log::warn!("class {class} absent from the reference");
            }
            rows.push((id.clone(), class, evaluate(&labels, &gt, class)?));
        }
        let report = a.out.join("report.csv");
        write_text(&report, &to_csv(&rows))?;
        m.set("output.report", report.display());
        for (_, class, r) in &rows {
            m.set(&format!("result.dice_class{class}"), format!("{:.6}", r.dice_pct));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted labels (.mhd)
    pub pred: PathBuf,
    /// Reference labels (.mhd)
    pub gt: PathBuf,
    /// Classes to score
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    pub classes: Vec<u8>,
    /// Row id; defaults to the prediction file stem
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn eval(a: &EvalArgs, m: &mut Manifest) -> Result<()> {
    m.set("input.pred", a.pred.display());
    m.set("input.gt", a.gt.display());
    let classes: Vec<String> = a.classes.iter().map(u8::to_string).collect();
    m.set("param.classes", classes.join(","));
    if a.classes.is_empty() || a.classes.contains(&0) {
        return Err(CliError::Usage("classes must be non-empty and exclude background 0".into()));
    }
    let t = Instant::now();
    let pred = load_labels(&a.pred)?;
    let gt = load_labels(&a.gt)?;
    let id = a.id.clone().unwrap_or_else(|| stem(&a.pred));
    let mut rows: Vec<(String, u8, MetricsReport)> = Vec::new();
    let mut missing = Vec::new();
    for &class in &a.classes {
        if gt.count(class) == 0 {
            missing.push(class.to_string());
        }
        rows.push((id.clone(), class, evaluate(&pred, &gt, class)?));
    }
    create_out(&a.out)?;
    let csv = to_csv(&rows);
    let path = a.out.join("metrics.csv");
    write_text(&path, &csv)?;
    print!("{csv}");
    m.set("output.report", path.display());
    m.set("time.eval_s", t.elapsed().as_secs_f64());
    m.set("missing_classes", if missing.is_empty() { "none".into() } else { missing.join(",") });
    if !missing.is_empty() {
        return Err(CliError::Data(format!("class {} absent from the reference", missing.join(","))));
    }
    Ok(())
}

// ------------------------------------------------------------------- overlay

#[derive(Args, Debug)]
pub struct OverlayArgs {
    pub ct: PathBuf,
    pub pred: PathBuf,
    pub gt: PathBuf,
    /// Axial slice index
    #[arg(long)]
    pub slice: usize,
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    pub window: Option<(f32, f32)>,
    /// Output file name inside --out
    #[arg(long, default_value = "overlay.png")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn overlay(a: &OverlayArgs, m: &mut Manifest) -> Result<()> {
    m.set("input.ct", a.ct.display());
    m.set("input.pred", a.pred.display());
    m.set("input.gt", a.gt.display());
    let window = a.window.unwrap_or(DEFAULT_WINDOW);
    m.set("param.window", fmt_window(window));
    m.set("param.slice", a.slice);
    let t = Instant::now();
    let ct = load_scalar(&a.ct)?;
    let pred = load_labels(&a.pred)?;
    let gt = load_labels(&a.gt)?;
    let img = crate::overlay::render(&ct, &pred, &gt, a.slice, window)?;
    create_out(&a.out)?;
    let path = a.out.join(&a.name);
    img.save_with_format(&path, image::ImageFormat::Png)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let counts = crate::overlay::outcome_counts(&pred, &gt, a.slice);
    for (name, c) in ["green", "yellow", "blue", "red"].iter().zip(&counts[1..]) {
        m.set(&format!("result.{name}_pixels"), c);
    }
    m.set("output.png", path.display());
    m.set("time.overlay_s", t.elapsed().as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------------- tune

#[derive(Args, Debug)]
pub struct TuneArgs {
    /// Search space file; built-in ranges without it
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Case list: `id unary.mhd ct.mhd gt.mhd [class]` per line, paths
    /// relative to the list file
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Mean-field iterations per trial
    #[arg(long)]
    pub iterations: Option<usize>,
    /// HU window applied to the CT before it feeds the bilateral kernel
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    pub window: Option<(f32, f32)>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_cases(path: &Path, window: (f32, f32)) -> Result<Vec<TuneCase>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(4..=5).contains(&f.len()) {
            return Err(CliError::Data(format!(
                "{} line {}: expected id unary ct gt [class]",
                path.display(),
                no + 1
            )));
        }
        let gt = load_labels(base.join(f[3]))?;
        let class = match f.get(4) {
            Some(c) => c
                .parse()
                .map_err(|e| CliError::Data(format!("{} line {}: class {c}: {e}", path.display(), no + 1)))?,
            None => default_objective_class(&gt),
        };
        let ct = load_scalar(base.join(f[2]))?;
        cases.push(TuneCase {
            id: f[0].to_string(),
            unary: load_probs(base.join(f[1]))?,
            intensity: hu_window(&ct, window.0, window.1)?,
            gt,
            class,
        });
    }
    if cases.is_empty() {
        return Err(CliError::Data(format!("{}: no cases", path.display())));
    }
    Ok(cases)
}

pub fn tune(a: &TuneArgs, m: &mut Manifest) -> Result<()> {
    m.set("input.cases", a.cases.display());
    let mut space = match &a.space {
        Some(p) => {
            m.set("config", p.display());
            SearchSpace::load(p)?
        }
        None => SearchSpace::default(),
    };
    if let Some(s) = a.seed {
        space.seed = s;
    }
    if let Some(n) = a.trials {
        space.trials = n;
    }
    if let Some(n) = a.iterations {
        space.iterations = n;
    }
    space.validate()?;
    let window = a.window.unwrap_or(DEFAULT_WINDOW);
    m.set("param.window", fmt_window(window));
    m.set("seed", space.seed);
    m.set("param.trials", space.trials);
    m.set("param.iterations", space.iterations);
    for (name, r) in livseg::tuner::PARAM_NAMES.iter().zip(&space.ranges) {
        m.set(&format!("param.range.{name}"), format!("{} {} {:?}", r.lo, r.hi, r.scale).to_lowercase());
    }

    let cases = load_cases(&a.cases, window)?;
    let t = Instant::now();
    let result = random_search(&space, &cases)?;
    m.set("time.search_s", t.elapsed().as_secs_f64());
    create_out(&a.out)?;
    let best = a.out.join("best_params.txt");
    result.best.save(&best)?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let trace = a.out.join("trace.csv");
    write_text(&trace, &trace_csv(&result, &ids))?;
    m.set("output.best_params", best.display());
    m.set("output.trace", trace.display());
    m.set("result.best_trial", result.best_trial);
    m.set("result.best_score", format!("{:.6}", result.best_score));
    println!("best trial {} mean dice {:.4}", result.best_trial, result.best_score);
    print!("{}", result.best.to_text());
    Ok(())
}

// ------------------------------------------------------------------- phantom

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Phantom spec file; built-in spec without it
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the spec seed; the oracle unary uses it too
    #[arg(long)]
    pub seed: Option<u64>,
    /// Classes in the oracle unary (2 merges lesion into liver)
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Fraction of oracle voxels with their top two classes swapped
    #[arg(long, default_value_t = 0.0)]
    pub oracle_rate: f64,
    /// Oracle blur in mm
    #[arg(long, default_value_t = 0.0)]
    pub oracle_blur: f64,
    /// Oracle mixing weight toward uniform
    #[arg(long, default_value_t = 0.0)]
    pub oracle_smoothing: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn phantom(a: &PhantomArgs, m: &mut Manifest) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            m.set("config", p.display());
            PhantomSpec::load(p)?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let oracle = OracleParams {
        blur_sigma_mm: a.oracle_blur,
        error_rate: a.oracle_rate,
        smoothing: a.oracle_smoothing,
        seed: spec.seed,
    };
    m.set("seed", spec.seed);
    m.set("param.classes", a.classes);
    m.set("param.oracle_rate", a.oracle_rate);
    m.set("param.oracle_blur", a.oracle_blur);
    m.set("param.oracle_smoothing", a.oracle_smoothing);

    let t = Instant::now();
    let (ct, gt) = generate(&spec)?;
    let unary_gt = if a.classes == 2 {
        let mut g = gt.clone();
        for l in g.labels_mut() {
            *l = (*l > 0) as u8;
        }
        g
    } else {
        gt.clone()
    };
    let unary = oracle_unary(&unary_gt, a.classes, &oracle)?;
    create_out(&a.out)?;
    save_volume(&ct, a.out.join("ct.mhd"))?;
    save_volume(&gt, a.out.join("gt.mhd"))?;
    save_volume(&unary, a.out.join("unary.mhd"))?;
    write_text(&a.out.join("spec.txt"), &spec.to_text())?;
    m.set("output.ct", a.out.join("ct.mhd").display());
    m.set("output.gt", a.out.join("gt.mhd").display());
    m.set("output.unary", a.out.join("unary.mhd").display());
    m.set("output.spec", a.out.join("spec.txt").display());
    m.set("time.generate_s", t.elapsed().as_secs_f64());
    Ok(())
}

// ----------------------------------------------------------------- train-toy

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    /// key = value training config
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Augmented copies added per training slice
    #[arg(long)]
    pub augment_factor: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings of `train-toy` beyond the optimiser ones in [`TrainConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToySetup {
    pub classes: usize,
    pub width: usize,
    pub depth: usize,
    pub augment_factor: usize,
    pub window: (f32, f32),
    pub phantom: PhantomSpec,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            classes: 3,
            width: 16,
            depth: 4,
            augment_factor: 0,
            window: DEFAULT_WINDOW,
            phantom: PhantomSpec::default(),
        }
    }
}

const TOY_KEYS: [&str; 6] = ["classes", "width", "depth", "augment_factor", "window", "phantom"];

fn toy_setup(kv: Option<&KeyValues>, config: Option<&Path>) -> Result<ToySetup> {
    let mut s = ToySetup::default();
    let Some(kv) = kv else { return Ok(s) };
    if let Some(v) = kv.get("classes")? {
        s.classes = v;
    }
    if let Some(v) = kv.get("width")? {
        s.width = v;
    }
    if let Some(v) = kv.get("depth")? {
        s.depth = v;
    }
    if let Some(v) = kv.get("augment_factor")? {
        s.augment_factor = v;
    }
    if let Some(w) = config_value(Some(kv), "window", parse_window)? {
        s.window = w;
    }
    if let Some(p) = kv.get_str("phantom") {
        let base = config.and_then(Path::parent).unwrap_or(Path::new("."));
        s.phantom = PhantomSpec::load(base.join(p))?;
    }
    if !(2..=3).contains(&s.classes) {
        return Err(CliError::Core(livseg::error::Error::InvalidParameter(format!(
            "classes {}: train-toy supports 2 or 3",
            s.classes
        ))));
    }
    Ok(s)
}

/// Axial slices of the phantom, scaled for the net, plus augmented copies.
pub fn toy_dataset(setup: &ToySetup, seed: u64) -> Result<(Vec<(livseg::volume::Slice2D, livseg::volume::LabelSlice2D)>, LabelVolume)> {
    let (ct, mut gt) = generate(&setup.phantom)?;
    if setup.classes == 2 {
        for l in gt.labels_mut() {
            *l = (*l >= 1) as u8;
        }
    }
    let (lo, hi) = setup.window;
    let ct = hu_window(&ct, lo, hi)?;
    let scaling = InputScaling { lo, hi };
    let nz = ct.grid().dims()[2];
    let mut data = Vec::new();
    for z in 0..nz {
        let (img, lab) = (ct.slice_z(z), gt.slice_z(z));
        for k in 0..setup.augment_factor {
            let p = AugmentParams {
                seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((z * 1024 + k) as u64),
                ..AugmentParams::default()
            };
            let (ai, al) = augment(&img, &lab, &p)?;
            let ai = livseg::volume::Slice2D::new(ai.width, ai.height, ai.data.iter().map(|v| v.clamp(lo, hi)).collect())?;
            data.push((scaling.apply(&ai), al));
        }
        data.push((scaling.apply(&img), lab));
    }
    Ok((data, gt))
}

pub fn train_toy(a: &TrainToyArgs, m: &mut Manifest) -> Result<()> {
    let mut known: Vec<&str> = TrainConfig::KEYS.to_vec();
    known.extend(TOY_KEYS);
    let kv = load_config(a.config.as_deref(), &known, m)?;
    let mut cfg = match &kv {
        Some(kv) => TrainConfig::default().merge(kv)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut setup = toy_setup(kv.as_ref(), a.config.as_deref())?;
    if let Some(f) = a.augment_factor {
        setup.augment_factor = f;
    }
    m.set("seed", cfg.seed);
    m.set("param.learning_rate", cfg.learning_rate);
    m.set("param.momentum", cfg.momentum);
    m.set("param.weight_decay", cfg.weight_decay);
    m.set("param.epochs", cfg.epochs);
    m.set("param.batch_size", cfg.batch_size);
    m.set("param.loss_norm", cfg.loss_norm.map_or("pixels".into(), |n| n.to_string()));
    m.set("param.classes", setup.classes);
    m.set("param.width", setup.width);
    m.set("param.depth", setup.depth);
    m.set("param.augment_factor", setup.augment_factor);
    m.set("param.window", fmt_window(setup.window));
    m.set("param.phantom", setup.phantom.to_text().trim_end().replace('\n', "; "));

    let (data, gt) = toy_dataset(&setup, cfg.seed)?;
    let counts = livseg::fcn::class_counts([&gt], setup.classes)?;
    let weights = ClassWeights::from_counts(&counts)?.normalized(&counts)?;
    m.set("param.class_weights", format!("{:?}", weights));
    let net = ToyNet::standard(setup.classes, setup.width, setup.depth, cfg.seed)?;
    create_out(&a.out)?;
    save_checkpoint(&net, a.out.join("init.ckpt"))?;

    let t = Instant::now();
    let (net, report) = train(net, &data, &cfg, &weights)?;
    m.set("time.train_s", t.elapsed().as_secs_f64());
    save_checkpoint(&net, a.out.join("model.ckpt"))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in report.epoch_loss.iter().enumerate() {
        csv.push_str(&format!("{},{l:.9}\n", e + 1));
    }
    write_text(&a.out.join("loss.csv"), &csv)?;
    let mut steps = String::from("step,loss\n");
    for (s, l) in report.step_loss.iter().enumerate() {
        steps.push_str(&format!("{s},{l:.9}\n"));
    }
    write_text(&a.out.join("steps.csv"), &steps)?;
    m.set("param.training_slices", data.len());
    m.set("output.init", a.out.join("init.ckpt").display());
    m.set("output.model", a.out.join("model.ckpt").display());
    m.set("output.loss", a.out.join("loss.csv").display());
    if let Some(l) = report.epoch_loss.last() {
        m.set("result.final_loss", format!("{l:.9}"));
    }
    Ok(())
}
