//! Run configuration and the pipelines behind each command-line subcommand.
//!
//! A run config is resolved in layers: named preset, then an optional TOML
//! file, then `key.path=value` overrides, then the seed. Unknown keys are
//! errors at every layer. Each run writes its resolved config next to its
//! outputs, and that file alone reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::synth::{synth_dataset, PhantomConfig};
use crate::data::{
    filter_dataset, format_record, preprocess, preprocess_case, read_images, read_manifest, read_seg_dataset,
    write_manifest, write_seg_dataset, FilterOutcome, ManifestRecord, SegCase, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::finetune::{run_finetune, segment_case, subset_indices, FinetuneConfig, FinetuneOutcome};
use crate::gradcheck::{run_kernel_suite, KernelReport};
use crate::metrics::{
    bootstrap_ranks, dice_masks, format_rank_summary, format_scores, line_plot_svg, nsd_masks, parse_scores,
    rank_plot_svg, RankSummary, ScoreRow, Series, DEFAULT_TOLERANCE_MM,
};
use crate::network::{load_checkpoint, save_checkpoint};
use crate::pretrain::{read_loss_log, run_pretraining, PretrainConfig, PretrainOutcome, ScalePreset};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// A subcommand's configuration tree.
pub trait RunConfig: Serialize + DeserializeOwned + Sized {
    const PRESETS: &'static [&'static str];
    const DEFAULT_PRESET: &'static str;
    fn preset(name: &str) -> Result<Self>;
    /// Applies `--seed`; a no-op for commands without randomness.
    fn set_seed(&mut self, _seed: u64) {}
}

fn unknown_preset<T>(name: &str, known: &[&str]) -> Result<T> {
    Err(Error::Config(format!("unknown preset `{name}` (expected one of: {})", known.join(", "))))
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

/// Recursively overlays `over` onto `base`; tables merge, everything else replaces.
pub fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`out=runs/a` needs no quotes).
pub fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let mut cur = table;
    for (i, k) in keys[..keys.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Config(format!(
                    "override `{assignment}`: `{}` is not a table",
                    keys[..=i].join(".")
                )))
            }
        };
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Dotted paths of every key named `key` in `table`.
fn key_paths(table: &toml::Table, key: &str, prefix: &str, found: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if k == key {
            found.push(path.clone());
        }
        if let toml::Value::Table(t) = v {
            key_paths(t, key, &path, found);
        }
    }
}

fn from_table<T: DeserializeOwned>(table: toml::Table, origin: &str) -> Result<T> {
    T::deserialize(table.clone()).map_err(|e| {
        let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        let unknown = msg
            .strip_prefix("unknown field `")
            .and_then(|rest| rest.split('`').next());
        let mut paths = Vec::new();
        if let Some(key) = unknown {
            key_paths(&table, key, "", &mut paths);
        }
        if paths.is_empty() {
            Error::Config(format!("{origin}: {msg}"))
        } else {
            Error::Config(format!("{origin}: key `{}`: {msg}", paths.join("`, `")))
        }
    })
}

/// A config together with the preset it was layered on. The preset name is
/// stored in the written file, because options left unset (TOML has no null)
/// fall back to the preset when the file is loaded again.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved<T> {
    pub preset: String,
    pub config: T,
}

impl<T: RunConfig> Resolved<T> {
    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::new();
        table.insert("preset".into(), toml::Value::String(self.preset.clone()));
        merge(&mut table, to_table(&self.config)?);
        toml::to_string_pretty(&table).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Checks that `out` is absent or empty (unless `allow_existing`),
    /// creates it and writes the resolved config into it.
    pub fn prepare_output(&self, out: &Path, allow_existing: bool) -> Result<PathBuf> {
        if out.exists() && !allow_existing {
            let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
            if entries.next().is_some() {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; runs write to a fresh directory",
                    out.display()
                )));
            }
        }
        create_dir(out)?;
        let path = out.join(RESOLVED_CONFIG);
        write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

/// Preset, then `file`, then overrides, then `seed`. A `preset` key in the
/// file selects the base when `preset` is `None`.
pub fn resolve<T: RunConfig>(
    preset: Option<&str>,
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<Resolved<T>> {
    let mut over = None;
    let mut base = preset.map(str::to_string);
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut t: toml::Table = text.parse().map_err(|e| Error::format(path, format!("{e}")))?;
        match t.remove("preset") {
            None => {}
            Some(toml::Value::String(p)) => match &base {
                Some(b) if *b != p => {
                    return Err(Error::Config(format!(
                        "{}: preset `{p}` conflicts with --preset `{b}`",
                        path.display()
                    )))
                }
                _ => base = Some(p),
            },
            Some(_) => return Err(Error::Config(format!("{}: key `preset` must be a string", path.display()))),
        }
        over = Some((path, t));
    }
    let preset = base.unwrap_or_else(|| T::DEFAULT_PRESET.to_string());
    let mut table = to_table(&T::preset(&preset)?)?;
    if let Some((path, over)) = over {
        merge(&mut table, over);
        // Checked before the overrides so errors name the file.
        from_table::<T>(table.clone(), &path.display().to_string())?;
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut config: T = from_table(table, "config")?;
    if let Some(s) = seed {
        config.set_seed(s);
    }
    Ok(Resolved { preset, config })
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set (use the flag or --set {key}=...)")))
}

// ---- filter ----

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterRun {
    pub manifest: Option<PathBuf>,
}

impl RunConfig for FilterRun {
    const PRESETS: &'static [&'static str] = &["default"];
    const DEFAULT_PRESET: &'static str = "default";
    fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(FilterRun::default()),
            other => unknown_preset(other, Self::PRESETS),
        }
    }
}

pub const KEPT_FILE: &str = "kept.tsv";
pub const DISCARDED_FILE: &str = "discarded.tsv";

/// Writes `kept.tsv` (a manifest) and `discarded.tsv` (records plus reason).
pub fn run_filter(cfg: &FilterRun, out: &Path) -> Result<FilterOutcome> {
    let manifest = required(&cfg.manifest, "manifest")?;
    let records = read_manifest(manifest)?;
    create_dir(out)?;
    let outcome = filter_dataset(&records);
    write_manifest(&out.join(KEPT_FILE), &outcome.kept)?;
    let mut text = String::from("# path\tdims\tspacing\tbytes\tmodality\treason\n");
    for (r, why) in &outcome.discarded {
        text.push_str(&format!("{}\t{why}\n", format_record(r)));
    }
    write(&out.join(DISCARDED_FILE), text)?;
    Ok(outcome)
}

// ---- synth ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub phantom: PhantomConfig,
    pub cases: usize,
    pub seed: u64,
    pub prefix: String,
}

impl RunConfig for SynthRun {
    const PRESETS: &'static [&'static str] = &["pretrain", "finetune", "val"];
    const DEFAULT_PRESET: &'static str = "pretrain";
    fn preset(name: &str) -> Result<Self> {
        let seg = PhantomConfig {
            blob_radius: [4.0, 6.0],
            ..PhantomConfig::default()
        };
        match name {
            "pretrain" => Ok(SynthRun {
                phantom: PhantomConfig::default(),
                cases: 200,
                seed: 1,
                prefix: "pre".into(),
            }),
            "finetune" => Ok(SynthRun {
                phantom: seg,
                cases: 5,
                seed: 1001,
                prefix: "ft".into(),
            }),
            "val" => Ok(SynthRun {
                phantom: seg,
                cases: 10,
                seed: 2002,
                prefix: "val".into(),
            }),
            other => unknown_preset(other, Self::PRESETS),
        }
    }
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

pub fn run_synth(cfg: &SynthRun, out: &Path) -> Result<Vec<ManifestRecord>> {
    if cfg.cases == 0 {
        return Err(Error::Config("`cases` must be > 0".into()));
    }
    create_dir(out)?;
    write_seg_dataset(out, &synth_dataset(&cfg.phantom, cfg.cases, cfg.seed, &cfg.prefix))
}

// ---- pretrain ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRun {
    /// Directory holding `manifest.tsv` and the volumes it lists.
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub resume: bool,
    pub pretrain: PretrainConfig,
}

impl RunConfig for PretrainRun {
    const PRESETS: &'static [&'static str] = &["toy", "s3d-b", "s3d-l"];
    const DEFAULT_PRESET: &'static str = "toy";
    fn preset(name: &str) -> Result<Self> {
        let p: ScalePreset = name.parse()?;
        Ok(PretrainRun {
            data: None,
            resume: false,
            pretrain: PretrainConfig::preset(p),
        })
    }
    fn set_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
    }
}

pub const LOSS_PLOT: &str = "loss.svg";

pub fn run_pretrain(cfg: &PretrainRun, out: &Path) -> Result<PretrainOutcome> {
    let data = required(&cfg.data, "data")?;
    cfg.pretrain.validate()?;
    let volumes = read_images(&data.join(MANIFEST_FILE))?
        .iter()
        .map(|v| preprocess(v, cfg.pretrain.target_spacing))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    let outcome = run_pretraining(&cfg.pretrain, &volumes, out, cfg.resume)?;
    let points = read_loss_log(&outcome.log)?.iter().map(|r| (r.step as f64, r.loss)).collect();
    let svg = line_plot_svg(
        &[Series {
            name: "masked L2".into(),
            points,
        }],
        "pretraining loss",
        "step",
        "loss",
    );
    write(&out.join(LOSS_PLOT), svg)?;
    Ok(outcome)
}

// ---- finetune ----

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRun {
    /// Directory of images with `_seg` label rasters and a manifest.
    pub data: Option<PathBuf>,
    /// Separate validation directory; without it `val_fraction` of `data` is held out.
    #[serde(default)]
    pub val_data: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Pretrained checkpoint; required unless `finetune.schedule.transfer = "none"`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub finetune: FinetuneConfig,
}

impl RunConfig for FinetuneRun {
    const PRESETS: &'static [&'static str] = &["toy", "paper"];
    const DEFAULT_PRESET: &'static str = "toy";
    fn preset(name: &str) -> Result<Self> {
        let finetune = match name {
            "toy" => FinetuneConfig::toy(2),
            "paper" => FinetuneConfig::paper(2),
            other => return unknown_preset(other, Self::PRESETS),
        };
        Ok(FinetuneRun {
            data: None,
            val_data: None,
            val_fraction: default_val_fraction(),
            checkpoint: None,
            finetune,
        })
    }
    fn set_seed(&mut self, seed: u64) {
        self.finetune.seed = seed;
    }
}

pub const TRAIN_LOG: &str = "train_log.tsv";
pub const VAL_LOG: &str = "val_log.tsv";
pub const SUBSET_FILE: &str = "train_subset.txt";
pub const FINETUNED_CHECKPOINT: &str = "checkpoint_final.s3dc";
pub const DICE_PLOT: &str = "val_dice.svg";

fn load_cases(dir: &Path, target: Option<[f64; 3]>) -> Result<Vec<SegCase>> {
    read_seg_dataset(dir)?.iter().map(|c| preprocess_case(c, target)).collect()
}

/// Deterministic train/validation split: the validation indices are a
/// seeded subset of `round(fraction * n)` cases (at least one).
pub fn split_cases(cases: Vec<SegCase>, fraction: f64, seed: u64) -> Result<(Vec<SegCase>, Vec<SegCase>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {fraction}")));
    }
    let n = cases.len();
    let n_val = ((fraction * n as f64).round() as usize).max(1);
    if n_val >= n {
        return Err(Error::Invalid(format!("cannot split {n} cases into train and validation")));
    }
    let val_idx = subset_indices(n, Some(n_val), seed ^ 0x5eed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, c) in cases.into_iter().enumerate() {
        if val_idx.binary_search(&i).is_ok() {
            val.push(c);
        } else {
            train.push(c);
        }
    }
    Ok((train, val))
}

pub fn run_finetune_cmd(cfg: &FinetuneRun, out: &Path) -> Result<FinetuneOutcome> {
    let data = required(&cfg.data, "data")?;
    cfg.finetune.validate()?;
    let target = cfg.finetune.target_spacing;
    let cases = load_cases(data, target)?;
    let (train, val) = match &cfg.val_data {
        Some(v) => (cases, load_cases(v, target)?),
        None => split_cases(cases, cfg.val_fraction, cfg.finetune.seed)?,
    };
    let ckpt = cfg.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    create_dir(out)?;
    let outcome = run_finetune(&cfg.finetune, ckpt.as_ref(), &train, &val, &mut ())?;

    let mut log = String::from("# step\tlr\tloss\n");
    for (i, (lr, loss)) in outcome.lr_trace.iter().zip(&outcome.losses).enumerate() {
        log.push_str(&format!("{}\t{lr:e}\t{loss:e}\n", i + 1));
    }
    write(&out.join(TRAIN_LOG), log)?;
    let mut vlog = String::from("# step\tper-class dice\tmean dice\n");
    for r in &outcome.val_log {
        vlog.push_str(&r.log_line());
        vlog.push('\n');
    }
    write(&out.join(VAL_LOG), vlog)?;
    let subset = format!(
        "# seed {}\n# train_cases {}\n{}\n",
        cfg.finetune.seed,
        cfg.finetune.train_cases.map_or("all".to_string(), |n| n.to_string()),
        outcome.subset.join("\n")
    );
    write(&out.join(SUBSET_FILE), subset)?;
    save_checkpoint(&outcome.checkpoint, &out.join(FINETUNED_CHECKPOINT))?;
    let points = outcome.val_log.iter().map(|r| (r.step as f64, r.mean_dice)).collect();
    let svg = line_plot_svg(
        &[Series {
            name: "mean Dice".into(),
            points,
        }],
        "validation Dice",
        "step",
        "Dice",
    );
    write(&out.join(DICE_PLOT), svg)?;
    Ok(outcome)
}

// ---- evaluate ----

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE_MM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRun {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub method: String,
    pub dataset: String,
    #[serde(default = "default_tolerance")]
    pub tolerance_mm: f64,
    #[serde(default)]
    pub target_spacing: Option<[f64; 3]>,
}

impl RunConfig for EvaluateRun {
    const PRESETS: &'static [&'static str] = &["default"];
    const DEFAULT_PRESET: &'static str = "default";
    fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(EvaluateRun {
                checkpoint: None,
                data: None,
                method: "model".into(),
                dataset: "dataset".into(),
                tolerance_mm: DEFAULT_TOLERANCE_MM,
                target_spacing: None,
            }),
            other => unknown_preset(other, Self::PRESETS),
        }
    }
}

pub const SCORES_FILE: &str = "scores.tsv";

/// Per-case Dice and NSD (mean over foreground classes) on the centre patch.
pub fn run_evaluate(cfg: &EvaluateRun, out: &Path) -> Result<Vec<ScoreRow>> {
    let ckpt = load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let cases = load_cases(required(&cfg.data, "data")?, cfg.target_spacing)?;
    if !(cfg.tolerance_mm > 0.0) {
        return Err(Error::Config(format!("tolerance_mm must be > 0, got {}", cfg.tolerance_mm)));
    }
    create_dir(out)?;
    let net = ckpt.to_network()?;
    let classes = net.config().out_channels;
    let patch = net.config().patch_size;
    let mut rows = Vec::new();
    for case in &cases {
        let (pred, gt) = segment_case(&net, case)?;
        let (mut dsc, mut nsd) = (0.0, 0.0);
        for class in 1..classes as u8 {
            let p: Vec<bool> = pred.iter().map(|&l| l == class).collect();
            let g: Vec<bool> = gt.iter().map(|&l| l == class).collect();
            dsc += dice_masks(&p, &g);
            nsd += nsd_masks(&p, &g, patch, case.image.spacing, cfg.tolerance_mm);
        }
        for (metric, v) in [("dsc", dsc), ("nsd", nsd)] {
            rows.push(ScoreRow {
                method: cfg.method.clone(),
                dataset: cfg.dataset.clone(),
                case: case.image.source.clone(),
                metric: metric.into(),
                value: v / (classes - 1) as f64,
            });
        }
    }
    write(&out.join(SCORES_FILE), format_scores(&rows))?;
    Ok(rows)
}

// ---- rank ----

fn default_boot() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankRun {
    pub scores: Vec<PathBuf>,
    pub metric: String,
    #[serde(default = "default_boot")]
    pub n_boot: usize,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig for RankRun {
    const PRESETS: &'static [&'static str] = &["default"];
    const DEFAULT_PRESET: &'static str = "default";
    fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(RankRun {
                scores: Vec::new(),
                metric: "dsc".into(),
                n_boot: default_boot(),
                seed: 0,
            }),
            other => unknown_preset(other, Self::PRESETS),
        }
    }
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

pub const RANK_FILE: &str = "rank_summary.tsv";
pub const RANK_PLOT: &str = "ranks.svg";

pub fn run_rank(cfg: &RankRun, out: &Path) -> Result<RankSummary> {
    if cfg.scores.is_empty() {
        return Err(Error::Config("`scores` lists no score tables".into()));
    }
    if cfg.n_boot == 0 {
        return Err(Error::Config("n_boot must be > 0".into()));
    }
    let texts = cfg
        .scores
        .iter()
        .map(|p| fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let table = parse_scores(&refs, &cfg.metric)?;
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let summary = bootstrap_ranks(&table, cfg.n_boot, &mut rng)?;
    write(&out.join(RANK_FILE), format_rank_summary(&summary))?;
    write(
        &out.join(RANK_PLOT),
        rank_plot_svg(&summary, &format!("bootstrap ranks ({})", cfg.metric)),
    )?;
    Ok(summary)
}

// ---- gradcheck ----

fn default_seeds() -> u64 {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckRun {
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default)]
    pub first_seed: u64,
    pub tolerance: f64,
}

impl RunConfig for GradcheckRun {
    const PRESETS: &'static [&'static str] = &["default"];
    const DEFAULT_PRESET: &'static str = "default";
    fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(GradcheckRun {
                seeds: default_seeds(),
                first_seed: 0,
                tolerance: 1e-3,
            }),
            other => unknown_preset(other, Self::PRESETS),
        }
    }
    fn set_seed(&mut self, seed: u64) {
        self.first_seed = seed;
    }
}

pub fn run_gradcheck(cfg: &GradcheckRun) -> Result<Vec<KernelReport>> {
    if cfg.seeds == 0 {
        return Err(Error::Config("seeds must be > 0".into()));
    }
    run_kernel_suite(cfg.first_seed..cfg.first_seed + cfg.seeds)
}
