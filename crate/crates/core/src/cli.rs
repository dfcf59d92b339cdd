//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::data::{self, generate_synthetic, load_dataset, save_dataset, Dataset, SyntheticSpec, TwoHandSample};
use crate::denoiser::{DenoiserNet, NetConfig, PreparedCloud};
use crate::diffusion::{train, write_loss_csv, ScheduleSpec, TrainConfig};
use crate::hand::{KinematicModel, Side};
use crate::io::{sha256_file, write_json};
use crate::metrics::{
    evaluate, train_backbone, write_category_csv, BackboneConfig, DepthAggregate, EvalConfig, FeatureBackbone,
};
use crate::regularizer::{NoisePolicy, Regularizer, RegularizerConfig};
use crate::sampler::{sample_pairs, PenaltyForm, SampleConfig};
use crate::{Error, Result};

/// Environment variable read for the worker-thread count when `--threads` is absent.
pub const THREADS_ENV: &str = "TWOHAND_THREADS";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const CATEGORY_CSV: &str = "categories.csv";
pub const LOSS_CSV: &str = "loss.csv";

#[derive(Debug, Parser, Serialize)]
#[command(name = "twohand", version, about = "Two-hand interaction diffusion toolkit")]
pub struct Cli {
    /// Worker threads (falls back to TWOHAND_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory holding a template hand; the built-in capsule hand otherwise.
    #[arg(long, global = true)]
    pub template: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate a synthetic two-hand dataset.
    GenData(GenDataArgs),
    /// Train the denoising network.
    Train(TrainArgs),
    /// Train the evaluation feature backbone.
    TrainBackbone(BackboneArgs),
    /// Draw two-hand samples from a trained checkpoint.
    Sample(SampleArgs),
    /// Score generated samples against reference data.
    Eval(EvalArgs),
    /// Refine pairs by descending the diffusion prior loss.
    Regularize(RegularizeArgs),
    /// Write the meshes of one pair as OBJ files.
    ExportMesh(ExportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    pub count: usize,
    /// Number of interaction modes.
    #[arg(long, default_value_t = 2)]
    pub modes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted penetration loss in m².
    #[arg(long, default_value_t = 1e-4)]
    pub max_penetration: f64,
    /// Accept penetrating pairs.
    #[arg(long)]
    pub no_reject: bool,
    /// Attach an object cloud to every pair.
    #[arg(long)]
    pub objects: bool,
    /// Also write train/val/test subsets with these fractions.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum Profile {
    Small,
    Paper,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Small)]
    pub profile: Profile,
    #[arg(long, default_value_t = 80)]
    pub epochs: usize,
    /// Batch size; 256 for hands, 64 with objects.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    /// Multiplier applied every `decay_every` epochs.
    #[arg(long, default_value_t = 0.9)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 20)]
    pub decay_every: usize,
    /// Conditioning dropout probability.
    #[arg(long, default_value_t = 0.5)]
    pub p_uncond: f64,
    /// Probability of training on the mirrored, role-swapped pair.
    #[arg(long, default_value_t = 0.5)]
    pub flip_prob: f64,
    /// Diffusion steps T.
    #[arg(long, default_value_t = 256)]
    pub diffusion_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.01)]
    pub beta_end: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct BackboneArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset.
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Surface points per pair cloud.
    #[arg(long, default_value_t = 512)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum Penalty {
    Squared,
    Unsquared,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reverse steps.
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    /// Classifier-free guidance weight.
    #[arg(long, default_value_t = 0.1)]
    pub w_cfg: f64,
    /// Enable anti-penetration guidance (default).
    #[arg(long, overrides_with = "no_apg")]
    pub apg: bool,
    /// Disable anti-penetration guidance.
    #[arg(long)]
    pub no_apg: bool,
    /// Penetration guidance weight at the clean end.
    #[arg(long, default_value_t = 4.0)]
    pub w_pen: f64,
    /// Per-step decay of the guidance weight away from the clean end.
    #[arg(long, default_value_t = 0.9)]
    pub w_pen_decay: f64,
    #[arg(long, value_enum, default_value_t = Penalty::Squared)]
    pub penalty: Penalty,
    /// Dataset supplying object clouds for object-conditional checkpoints.
    #[arg(long)]
    pub objects: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum Depth {
    Mean,
    Max,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Generated samples (output of `sample`).
    #[arg(long)]
    pub samples: PathBuf,
    /// Held-out reference dataset.
    #[arg(long)]
    pub reference: PathBuf,
    /// Backbone checkpoint (required).
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub khid_subset: usize,
    #[arg(long, default_value_t = 100)]
    pub khid_subsets: usize,
    #[arg(long, default_value_t = 300)]
    pub diversity_pairs: usize,
    /// Neighbour rank for precision/recall.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Aggregation of penetration depth.
    #[arg(long, value_enum, default_value_t = Depth::Mean)]
    pub depth: Depth,
    /// Proximity threshold in meters.
    #[arg(long, default_value_t = 0.02)]
    pub proximity: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct RegularizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset of pairs to refine.
    #[arg(long)]
    pub params_in: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Forward diffusion time; T/8 when absent.
    #[arg(long)]
    pub t_reg: Option<usize>,
    /// Reuse one noise draw for every step.
    #[arg(long)]
    pub fixed_noise: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    /// Dataset holding the pair.
    #[arg(long)]
    pub params_in: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn threads_from(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn model_of(template: &Option<PathBuf>) -> Result<KinematicModel> {
    match template {
        Some(dir) => KinematicModel::load_template(dir),
        None => Ok(KinematicModel::builtin()),
    }
}

/// Writes the config echo and, when the directory has no manifest yet, one
/// listing the checksums of `files`.
fn write_run_files<T: Serialize>(dir: &Path, command: &str, args: &T, files: &[&str]) -> Result<()> {
    write_json(
        &dir.join(CONFIG_FILE),
        &serde_json::json!({ "command": command, "version": crate::VERSION, "args": args }),
    )?;
    let manifest = dir.join(data::MANIFEST_FILE);
    if !manifest.exists() {
        let mut sums = serde_json::Map::new();
        for f in files {
            sums.insert((*f).into(), sha256_file(&dir.join(f))?.into());
        }
        write_json(
            &manifest,
            &serde_json::json!({ "format": "twohand-run", "kind": command, "version": crate::VERSION, "files": sums }),
        )?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = SyntheticSpec::toy(a.modes, a.count, a.seed);
    spec.max_penetration = if a.no_reject { None } else { Some(a.max_penetration) };
    spec.objects = a.objects;
    let data = generate_synthetic(&spec)?;
    let extra = serde_json::json!({ "synthetic": spec });
    save_dataset(&a.out, &data, extra.clone())?;
    write_run_files(&a.out, "gen-data", a, &[])?;
    if let Some(fr) = &a.split {
        if fr.len() != 3 {
            return Err(Error::Usage("--split takes three comma-separated fractions".into()));
        }
        let idx = data::split(data.len(), [fr[0], fr[1], fr[2]], a.seed)?;
        for (name, ix) in ["train", "val", "test"].iter().zip(&idx) {
            let dir = a.out.join(name);
            save_dataset(&dir, &data.subset(ix), extra.clone())?;
            write_run_files(&dir, "gen-data", a, &[])?;
        }
    }
    info!("wrote {} pairs to {}", data.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let objects = data.has_objects();
    let mut net_cfg = NetConfig::by_name(match a.profile {
        Profile::Small => "small",
        Profile::Paper => "paper",
    })?;
    let mut cfg = if objects { TrainConfig::for_objects() } else { TrainConfig::default() };
    if objects {
        net_cfg = net_cfg.with_object();
    }
    cfg.epochs = a.epochs;
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    cfg.lr = a.lr;
    cfg.lr_decay = a.lr_decay;
    cfg.decay_every = a.decay_every;
    cfg.p_uncond = a.p_uncond;
    cfg.flip_prob = a.flip_prob;
    cfg.schedule = ScheduleSpec {
        steps: a.diffusion_steps,
        beta_start: a.beta_start,
        beta_end: a.beta_end,
    };
    cfg.seed = a.seed;
    let mut net = DenoiserNet::new(net_cfg, a.seed);
    let report = train(&mut net, &data, &cfg)?;
    create_dir(&a.out)?;
    net.save(&a.out, &cfg.schedule, serde_json::json!({ "config": cfg, "steps": report.steps }))?;
    write_loss_csv(&a.out.join(LOSS_CSV), &report.epoch_loss)?;
    write_run_files(&a.out, "train", a, &[])
}

fn train_backbone_cmd(model: &KinematicModel, a: &BackboneArgs) -> Result<()> {
    let train_data = load_dataset(&a.data)?;
    let val = load_dataset(&a.val)?;
    let cfg = BackboneConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        points: a.points,
        seed: a.seed,
        ..BackboneConfig::default()
    };
    let (net, report) = train_backbone(model, &train_data, &val, &cfg)?;
    info!("validation loss {:.4e} -> {:.4e}", report.val_loss_initial, report.val_loss_final);
    net.save(&a.out, serde_json::to_value(&report).unwrap_or_default())?;
    write_loss_csv(&a.out.join(LOSS_CSV), &report.train_loss)?;
    write_run_files(&a.out, "train-backbone", a, &[])
}

fn sample_cmd(model: &KinematicModel, a: &SampleArgs) -> Result<()> {
    let (net, sched, checksum) = DenoiserNet::load(&a.ckpt)?;
    let cfg = SampleConfig {
        steps: a.steps,
        w_cfg: a.w_cfg,
        apg: !a.no_apg,
        w_pen_start: a.w_pen,
        w_pen_decay: a.w_pen_decay,
        penalty: match a.penalty {
            Penalty::Squared => PenaltyForm::Squared,
            Penalty::Unsquared => PenaltyForm::Unsquared,
        },
        seed: a.seed,
        batch: a.batch,
    };
    let source = match &a.objects {
        Some(dir) => Some(load_dataset(dir)?),
        None => None,
    };
    let mut clouds: Vec<PreparedCloud> = Vec::new();
    let mut attached = Vec::new();
    if net.is_object_conditional() {
        let src = source.as_ref().ok_or(Error::MissingObject)?;
        if src.is_empty() || !src.has_objects() {
            return Err(Error::MissingObject);
        }
        for i in 0..a.count {
            let obj = src.samples[i % src.len()].object.clone().ok_or(Error::MissingObject)?;
            clouds.push(net.prepare_object(&obj.points)?);
            attached.push(Some(obj));
        }
    } else {
        attached.resize(a.count, None);
    }
    let refs: Vec<&PreparedCloud> = clouds.iter().collect();
    let pairs = sample_pairs(&net, &sched, model, &cfg, 0, a.count, &refs)?;
    let out = Dataset {
        samples: pairs
            .into_iter()
            .zip(attached)
            .map(|((left, right), object)| TwoHandSample { left, right, object })
            .collect(),
        modes: None,
    };
    save_dataset(&a.out, &out, serde_json::json!({ "sampler": cfg, "checkpoint": checksum }))?;
    write_run_files(&a.out, "sample", a, &[])
}

fn eval_cmd(model: &KinematicModel, a: &EvalArgs) -> Result<()> {
    let backbone_dir = a
        .backbone
        .as_ref()
        .ok_or_else(|| Error::Usage("eval requires --backbone <dir>".into()))?;
    let (backbone, checksum) = FeatureBackbone::load(backbone_dir)?;
    let generated = load_dataset(&a.samples)?;
    let reference = load_dataset(&a.reference)?;
    let cfg = EvalConfig {
        khid_subset: a.khid_subset,
        khid_subsets: a.khid_subsets,
        diversity_pairs: a.diversity_pairs,
        k: a.k,
        depth: match a.depth {
            Depth::Mean => DepthAggregate::Mean,
            Depth::Max => DepthAggregate::Max,
        },
        proximity: a.proximity,
        seed: a.seed,
    };
    let pairs: Vec<_> = generated.samples.iter().map(|s| (s.left, s.right)).collect();
    let cats: Option<Vec<String>> = if generated.has_objects() && reference.has_objects() {
        generated
            .samples
            .iter()
            .map(|s| s.object.as_ref().map(|o| o.category.clone()))
            .collect()
    } else {
        None
    };
    let report = evaluate(model, &backbone, &checksum, &pairs, cats.as_deref(), &reference, &cfg)?;
    create_dir(&a.out)?;
    write_json(&a.out.join(REPORT_FILE), &report)?;
    write_category_csv(&a.out.join(CATEGORY_CSV), &report)?;
    write_run_files(&a.out, "eval", a, &[REPORT_FILE, CATEGORY_CSV])
}

fn regularize_cmd(a: &RegularizeArgs) -> Result<()> {
    let (net, sched, _) = DenoiserNet::load(&a.ckpt)?;
    let data = load_dataset(&a.params_in)?;
    let cfg = RegularizerConfig {
        t_reg: a.t_reg,
        noise: if a.fixed_noise { NoisePolicy::Fixed } else { NoisePolicy::Fresh },
        seed: a.seed,
    };
    let reg = Regularizer::new(&net, &sched, cfg)?;
    let pairs: Vec<_> = data.samples.iter().map(|s| (s.left, s.right)).collect();
    let (moved, history) = reg.descend(&pairs, a.steps, a.lr)?;
    let n = history.len().max(1) as f64;
    let mean: Vec<f64> = (0..=a.steps).map(|s| history.iter().map(|h| h[s]).sum::<f64>() / n).collect();
    let out = Dataset {
        samples: data
            .samples
            .iter()
            .zip(moved)
            .map(|(s, (left, right))| TwoHandSample {
                left,
                right,
                object: s.object.clone(),
            })
            .collect(),
        modes: data.modes.clone(),
    };
    save_dataset(&a.out, &out, serde_json::json!({ "t_reg": reg.t_reg(), "steps": a.steps, "lr": a.lr }))?;
    write_loss_csv(&a.out.join(LOSS_CSV), &mean)?;
    write_run_files(&a.out, "regularize", a, &[])
}

fn export_cmd(model: &KinematicModel, a: &ExportArgs) -> Result<()> {
    let data = load_dataset(&a.params_in)?;
    let s = data
        .samples
        .get(a.index)
        .ok_or_else(|| Error::InvalidArgument(format!("index {} outside 0..{}", a.index, data.len())))?;
    create_dir(&a.out)?;
    model.forward_kinematics(&s.left, Side::Left)?.mesh.write_obj(&a.out.join("left.obj"))?;
    model.forward_kinematics(&s.right, Side::Right)?.mesh.write_obj(&a.out.join("right.obj"))?;
    write_run_files(&a.out, "export-mesh", a, &["left.obj", "right.obj"])
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = threads_from(cli.threads)? {
        if n == 0 {
            return Err(Error::Usage("thread count must be positive".into()));
        }
        // A pool may already exist when called from a test harness.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let model = model_of(&cli.template)?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::TrainBackbone(a) => train_backbone_cmd(&model, a),
        Command::Sample(a) => sample_cmd(&model, a),
        Command::Eval(a) => eval_cmd(&model, a),
        Command::Regularize(a) => regularize_cmd(a),
        Command::ExportMesh(a) => export_cmd(&model, a),
    }
}

/// Parses the process arguments and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[Usage]: {first}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}
