//! `reconglgan` command line: prepare, train, evaluate, segeval.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, make_phantom_splits, write_dataset, DatasetSplit, RoiMode, SplitRole};
use crate::error::{Error, Result};
use crate::figures::{overlay_panel, reconstruction_panel, save_png};
use crate::losses::{LossSpec, Variant};
use crate::networks::{load_generator, load_segnet, save_segnet, GeneratorNet};
use crate::trainer::{
    evaluate, preflight, segmentation_eval, train, train_segmentation, IdentityReconstructor, Reconstructor,
    SegTrainConfig, TrainConfig, TrainOptions,
};

pub const RUNS_ENV: &str = "RECONGLGAN_RUNS";

#[derive(Debug, Parser)]
#[command(name = "reconglgan", version, about = "Context-discriminator GAN for undersampled MRI reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a dataset (phantoms or a normalised copy of existing data) to disk.
    Prepare(PrepareArgs),
    /// Train a reconstruction GAN or the segmentation U-Net.
    Train(TrainArgs),
    /// Score a trained generator (or the zero-filled input) on a split.
    Evaluate(EvaluateArgs),
    /// Compare segmentations of FS, ZF and reconstructed images.
    Segeval(SegevalArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Generate this many phantom slices (split 6:1:1 into train/val/test).
    #[arg(long, conflicts_with = "source")]
    pub phantom: Option<usize>,
    /// Existing dataset root in the same layout; slices are re-prepared.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Reconstruction,
    Segmentation,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Runs root; defaults to $RECONGLGAN_RUNS or ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub acc: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub roi_mode: Option<String>,
    /// Generator (or segmentation U-Net) width at the first level.
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub lambda_context: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Reuse a non-empty run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory; reports go to <run>/reports.
    #[arg(long)]
    pub run: PathBuf,
    /// Generator checkpoint; defaults to <run>/checkpoints/generator_best.ckpt.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset root; defaults to the one recorded in <run>/config.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub acc: Option<usize>,
    #[arg(long)]
    pub roi_mode: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Score the zero-filled input itself; no checkpoint needed.
    #[arg(long)]
    pub identity: bool,
    /// Number of per-slice panels to write.
    #[arg(long, default_value_t = 8)]
    pub panels: usize,
}

#[derive(Debug, Args)]
pub struct SegevalArgs {
    /// Segmentation run directory (holds checkpoints/segnet.ckpt); reports go there.
    #[arg(long)]
    pub run: PathBuf,
    /// Reconstruction sources as NAME=RUN_DIR or NAME=CHECKPOINT; repeatable.
    #[arg(long = "recon", required = true)]
    pub recon: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub acc: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 8)]
    pub panels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitRole {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitRole::Train,
            SplitArg::Val => SplitRole::Val,
            SplitArg::Test => SplitRole::Test,
        }
    }
}

/// Everything a run needs, as stored in `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub data: Option<PathBuf>,
    pub train: TrainConfig,
    pub segmentation: SegTrainConfig,
    /// Resolved loss terms, echoed for the record. Must match `train.variant` when given.
    pub loss_spec: Option<LossSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Reconstruction,
            data: None,
            train: TrainConfig::default(),
            segmentation: SegTrainConfig::default(),
            loss_spec: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.is_none() {
            return Err(Error::config("no dataset root given (--data or \"data\" in the config)"));
        }
        match self.task {
            Task::Reconstruction => {
                self.train.validate()?;
                if let Some(spec) = &self.loss_spec {
                    if *spec != self.train.loss_spec() {
                        return Err(Error::config("loss_spec does not match the variant and weights"));
                    }
                }
            }
            Task::Segmentation => {
                if self.segmentation.epochs == 0 || self.segmentation.batch_size == 0 {
                    return Err(Error::config("segmentation epochs and batch_size must be positive"));
                }
            }
        }
        Ok(())
    }

    fn apply(&mut self, a: &TrainArgs) -> Result<()> {
        if let Some(task) = a.task {
            self.task = task;
        }
        if let Some(d) = &a.data {
            self.data = Some(d.clone());
        }
        let (t, s) = (&mut self.train, &mut self.segmentation);
        if let Some(v) = &a.variant {
            t.variant = v.parse::<Variant>()?;
        }
        if let Some(v) = a.acc {
            t.acceleration = v;
        }
        if let Some(v) = a.epochs {
            t.epochs = v;
            s.epochs = v;
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
            s.batch_size = v;
        }
        if let Some(v) = a.seed {
            t.seed = v;
            s.seed = v;
        }
        if let Some(v) = &a.roi_mode {
            t.roi_mode = v.parse::<RoiMode>()?;
        }
        if let Some(v) = a.base_channels {
            t.generator.base_channels = v;
            s.base_channels = v;
        }
        if let Some(v) = a.depth {
            t.generator.depth = v;
            s.depth = v;
        }
        if let Some(v) = a.lambda_context {
            t.weights.lambda_context = v;
        }
        if let Some(v) = a.checkpoint_every {
            t.checkpoint_every = v;
        }
        self.loss_spec = None;
        Ok(())
    }

    fn default_run_id(&self) -> String {
        match self.task {
            Task::Reconstruction => format!(
                "{}-{}x-seed{}",
                self.train.variant.name().to_lowercase(),
                self.train.acceleration,
                self.train.seed
            ),
            Task::Segmentation => format!("segnet-seed{}", self.segmentation.seed),
        }
    }
}

pub fn runs_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUNS_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<Vec<(SplitRole, usize)>> {
    if a.out.exists() && is_nonempty_dir(&a.out) && !a.force {
        return Err(Error::config(format!("{} is not empty (use --force)", a.out.display())));
    }
    let splits: Vec<DatasetSplit> = match (a.phantom, &a.source) {
        (Some(0), _) => return Err(Error::config("--phantom needs a positive count")),
        (Some(n), None) => make_phantom_splits(n, a.seed)?.into(),
        (None, Some(src)) => {
            let mut out = vec![load_dataset(src, SplitRole::Train)?];
            for role in [SplitRole::Val, SplitRole::Test] {
                if src.join(role.dir_name()).is_dir() {
                    out.push(load_dataset(src, role)?);
                }
            }
            out
        }
        _ => return Err(Error::config("give exactly one of --phantom N or --source DIR")),
    };
    let mut counts = Vec::new();
    for split in &splits {
        write_dataset(&a.out, split)?;
        counts.push((split.role, split.len()));
    }
    Ok(counts)
}

/// Runs `train` and returns the run directory.
pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(a)?;
    cfg.validate()?;
    let data = cfg.data.clone().expect("validated");
    let run_id = a.run_id.clone().unwrap_or_else(|| cfg.default_run_id());
    let run_dir = runs_root(a.out.as_deref()).join(run_id);
    if is_nonempty_dir(&run_dir) && !a.force {
        return Err(Error::config(format!("run directory {} already exists (use --force)", run_dir.display())));
    }
    let train_split = load_dataset(&data, SplitRole::Train)?;
    let ckpt_dir = run_dir.join("checkpoints");

    match cfg.task {
        Task::Reconstruction => {
            let val_split = load_dataset(&data, SplitRole::Val)?;
            preflight(&cfg.train, &train_split, &val_split)?;
            cfg.loss_spec = Some(cfg.train.loss_spec());
            fs::create_dir_all(&ckpt_dir)?;
            write_json(&run_dir.join("config.json"), &cfg)?;
            let mut report = |row: &crate::trainer::HistoryRow, secs: f64| {
                eprintln!(
                    "epoch {:>4}  g {:.5}  d {}  val psnr {}  ({secs:.1}s)",
                    row.epoch,
                    row.g_total,
                    row.d_loss.map_or("-".into(), |v| format!("{v:.4}")),
                    row.val_fi_psnr.map_or("-".into(), |v| format!("{v:.3}")),
                );
            };
            let outcome = train(
                &cfg.train,
                &train_split,
                &val_split,
                TrainOptions {
                    checkpoint_dir: Some(ckpt_dir),
                    on_epoch: Some(&mut report),
                },
            )?;
            outcome.history.write_csv(&run_dir.join("history.csv"))?;
            outcome.history.write_timing_csv(&run_dir.join("timing.csv"))?;
        }
        Task::Segmentation => {
            fs::create_dir_all(&ckpt_dir)?;
            write_json(&run_dir.join("config.json"), &cfg)?;
            let (net, losses) = train_segmentation(&train_split, &cfg.segmentation)?;
            let mut w = csv::Writer::from_path(run_dir.join("history.csv"))?;
            w.write_record(["epoch", "cross_entropy"])?;
            for (i, l) in losses.iter().enumerate() {
                w.write_record([(i + 1).to_string(), l.to_string()])?;
            }
            w.flush()?;
            save_segnet(&ckpt_dir.join("segnet.ckpt"), &net, cfg.segmentation.seed, cfg.segmentation.epochs)?;
        }
    }
    Ok(run_dir)
}

fn read_run_config(run: &Path) -> Option<RunConfig> {
    RunConfig::load(&run.join("config.json")).ok()
}

/// Writes metric reports and panels under `<run>/reports`; returns that directory.
pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<PathBuf> {
    let recorded = read_run_config(&a.run);
    let data = a
        .data
        .clone()
        .or_else(|| recorded.as_ref().and_then(|c| c.data.clone()))
        .ok_or_else(|| Error::config("no dataset root (--data, or a run with config.json)"))?;
    let acc = a
        .acc
        .or_else(|| recorded.as_ref().map(|c| c.train.acceleration))
        .unwrap_or(4);
    if ![2, 4, 8].contains(&acc) {
        return Err(Error::config(format!("acceleration must be 2, 4 or 8, got {acc}")));
    }
    let roi_mode = match &a.roi_mode {
        Some(m) => m.parse()?,
        None => recorded.as_ref().map(|c| c.train.roi_mode).unwrap_or_default(),
    };
    let cf = recorded
        .as_ref()
        .map(|c| c.train.center_fraction)
        .unwrap_or(crate::kspace::DEFAULT_CENTER_FRACTION);

    let generator: Option<GeneratorNet<f32>> = if a.identity {
        None
    } else {
        let path = a
            .checkpoint
            .clone()
            .unwrap_or_else(|| a.run.join("checkpoints").join("generator_best.ckpt"));
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
        }
        Some(load_generator(&path)?.0)
    };
    let split = load_dataset(&data, a.split.into())?;
    let recon: &dyn Reconstructor = match &generator {
        Some(g) => g,
        None => &IdentityReconstructor,
    };
    let out = evaluate(recon, &split, acc, cf, &roi_mode)?;

    let tag = format!("{}_{acc}x", split.role.dir_name());
    let reports = a.run.join("reports");
    fs::create_dir_all(&reports)?;
    let name = if a.identity { "identity" } else { "metrics" };
    out.recon.write_csv(&reports.join(format!("{name}_{tag}.csv")))?;
    out.zero_filled.write_csv(&reports.join(format!("zero_filled_{tag}.csv")))?;
    write_json(
        &reports.join(format!("{name}_{tag}.json")),
        &serde_json::json!({
            "acceleration": acc,
            "split": split.role.dir_name(),
            "roi_mode": roi_mode,
            "reconstruction": out.recon.aggregate_json(),
            "zero_filled": out.zero_filled.aggregate_json(),
        }),
    )?;
    for s in out.samples.iter().take(a.panels) {
        let panel = reconstruction_panel(s.fs.view(), s.zf.view(), s.recon.view(), s.roi.as_ref());
        save_png(&reports.join(format!("panels_{name}_{tag}")).join(format!("{}.png", s.slice_id)), &panel)?;
    }
    Ok(reports)
}

fn resolve_generator(spec: &str) -> Result<(String, GeneratorNet<f32>)> {
    let (name, path) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--recon expects NAME=PATH, got '{spec}'")))?;
    let path = PathBuf::from(path);
    let ckpt = if path.is_dir() {
        path.join("checkpoints").join("generator_best.ckpt")
    } else {
        path
    };
    if !ckpt.is_file() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", ckpt.display())));
    }
    Ok((name.to_string(), load_generator(&ckpt)?.0))
}

pub fn cmd_segeval(a: &SegevalArgs) -> Result<PathBuf> {
    if ![2, 4, 8].contains(&a.acc) {
        return Err(Error::config(format!("acceleration must be 2, 4 or 8, got {}", a.acc)));
    }
    let seg_path = a.run.join("checkpoints").join("segnet.ckpt");
    if !seg_path.is_file() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", seg_path.display())));
    }
    let gens = a.recon.iter().map(|s| resolve_generator(s)).collect::<Result<Vec<_>>>()?;
    for (name, _) in &gens {
        if name == "FS" || name == "ZF" {
            return Err(Error::config(format!("source name '{name}' is reserved")));
        }
    }
    let data = a
        .data
        .clone()
        .or_else(|| read_run_config(&a.run).and_then(|c| c.data))
        .ok_or_else(|| Error::config("no dataset root (--data, or a run with config.json)"))?;
    let (seg, _) = load_segnet(&seg_path)?;
    let split = load_dataset(&data, a.split.into())?;
    let sources: Vec<(&str, &dyn Reconstructor)> = gens
        .iter()
        .map(|(n, g)| (n.as_str(), g as &dyn Reconstructor))
        .collect();
    let (table, predictions) = segmentation_eval(&seg, &sources, &split, a.acc, crate::kspace::DEFAULT_CENTER_FRACTION)?;

    let tag = format!("{}_{}x", split.role.dir_name(), a.acc);
    let reports = a.run.join("reports");
    fs::create_dir_all(&reports)?;
    table.write_csv(&reports.join(format!("segeval_{tag}.csv")))?;
    table.write_summary_csv(&reports.join(format!("segeval_summary_{tag}.csv")))?;
    for per_item in predictions.iter().take(a.panels) {
        let tiles: Vec<_> = per_item.iter().map(|p| (p.image.pixels(), &p.mask)).collect();
        let id = &per_item[0].image.slice_id;
        save_png(&reports.join(format!("overlays_{tag}")).join(format!("{id}.png")), &overlay_panel(&tiles))?;
    }
    Ok(reports)
}

/// Dispatches a parsed command line. Diagnostics go to stderr.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => {
            for (role, n) in cmd_prepare(&a)? {
                println!("{role}: {n} slices");
            }
        }
        Command::Train(a) => {
            let dir = cmd_train(&a)?;
            println!("{}", dir.display());
        }
        Command::Evaluate(a) => {
            let dir = cmd_evaluate(&a)?;
            println!("{}", dir.display());
        }
        Command::Segeval(a) => {
            let dir = cmd_segeval(&a)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}
