use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use interseg::acquisition::{confidnet_train, AcquisitionMethod, AcquisitionSettings, ConfidNetHead, ConfidNetTrainConfig};
use interseg::agent::{AgentConfig, AgentStrategy};
use interseg::checkpoint::Checkpoint;
use interseg::disca::{DiscaConfig, WeightPolicy};
use interseg::experiment::{
    guidance_study, run_ablation, run_campaign, sequential_study, size_vs_method_study, AblationArm, CampaignConfig,
    CampaignResult, CropStudyConfig, RefineMode,
};
use interseg::model::{pretrain, ModelConfig, PretrainConfig, SegmentationModel};
use interseg::query::StrategyConfig;
use interseg::raster::{load_raster, LabelMask, RasterImage};
use interseg::service::{serve, Store};
use interseg::toy::{generate_toy, ToyConfig};

type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "interseg", version, about = "Click-driven refinement and active-learning guidance for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on labelled images with sampled click channels.
    Pretrain(PretrainArgs),
    /// Run query-annotate-refine campaigns over several seeds.
    Simulate(SimulateArgs),
    /// Run every refinement ablation arm under shared seeds.
    Ablate(AblateArgs),
    /// Crop-level and sequence studies.
    Study(StudyArgs),
    /// Serve the session API over HTTP.
    Serve(ServeArgs),
}

/// Where images and labels come from.
#[derive(Args, Clone)]
struct DataArgs {
    /// Directory of images with `<stem>_labels.png` sidecars.
    #[arg(long, conflicts_with = "toy")]
    data: Option<PathBuf>,
    /// Toy scene description (TOML); defaults are used when neither source is given.
    #[arg(long)]
    toy: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    toy_seed: u64,
    /// Class count for label rasters under `--data`.
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

impl DataArgs {
    fn load(&self) -> CliResult<Vec<(RasterImage, LabelMask)>> {
        if let Some(dir) = &self.data {
            return load_dir(dir, self.classes);
        }
        let cfg = match &self.toy {
            Some(p) => ToyConfig::from_file(p)?,
            None => ToyConfig::default(),
        };
        Ok(generate_toy(self.toy_seed, &cfg)?)
    }
}

fn load_dir(dir: &Path, classes: usize) -> CliResult<Vec<(RasterImage, LabelMask)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            matches!(ext.as_str(), "png" | "tif" | "tiff") && !stem.ends_with("_labels")
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match load_raster(&p, classes)? {
            (img, Some(labels)) => out.push((img, labels)),
            (_, None) => tracing::warn!(path = %p.display(), "no label sidecar, skipped"),
        }
    }
    if out.is_empty() {
        return Err(format!("no labelled images in {}", dir.display()).into());
    }
    Ok(out)
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-3)]
    learning_rate: f32,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Upper bound on sampled clicks per sample.
    #[arg(long, default_value_t = 20)]
    max_clicks: usize,
    #[arg(long, default_value_t = 0.5)]
    image_only_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    error_click_fraction: f64,
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also train a confidence head on toy scenes drawn with this seed.
    #[arg(long)]
    confidnet_seed: Option<u64>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Random,
    Entropy,
    McDropout,
    Odin,
    Confidnet,
    Oracle,
}

impl StrategyArg {
    fn config(self, seed: u64) -> StrategyConfig {
        let active = |m| StrategyConfig::active(m, seed);
        match self {
            Self::Random => StrategyConfig::random(seed),
            Self::Entropy => active(AcquisitionMethod::Entropy),
            Self::McDropout => active(AcquisitionMethod::McDropout),
            Self::Odin => active(AcquisitionMethod::Odin),
            Self::Confidnet => active(AcquisitionMethod::Confidnet),
            Self::Oracle => StrategyConfig::whole_image_oracle(seed),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    AcOnly,
    Disca,
}

impl From<ModeArg> for RefineMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AcOnly => RefineMode::AcOnly,
            ModeArg::Disca => RefineMode::Disca,
        }
    }
}

/// Campaign settings shared by `simulate` and `ablate`.
#[derive(Args)]
struct CampaignArgs {
    #[arg(long, short)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Full campaign config as JSON; flags below are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    budget: usize,
    #[arg(long, value_enum, default_value_t = AgentArg::MaxErrorCenter)]
    agent: AgentArg,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 64)]
    tile_size: usize,
    #[arg(long, default_value_t = 16)]
    overlap: usize,
    /// Number of seeds, run as 0..seeds.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Line-delimited step records; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// PNG with the mean IoU-versus-budget curve of each run.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    MaxErrorCenter,
    RandomInError,
    UncertaintyInError,
    UncertaintyOnly,
    Random,
}

impl From<AgentArg> for AgentStrategy {
    fn from(a: AgentArg) -> Self {
        match a {
            AgentArg::MaxErrorCenter => AgentStrategy::MaxErrorCenter,
            AgentArg::RandomInError => AgentStrategy::RandomInError,
            AgentArg::UncertaintyInError => AgentStrategy::UncertaintyInError,
            AgentArg::UncertaintyOnly => AgentStrategy::UncertaintyOnly,
            AgentArg::Random => AgentStrategy::Random,
        }
    }
}

impl CampaignArgs {
    fn base(&self, strategy: StrategyArg, mode: ModeArg) -> CliResult<CampaignConfig> {
        if let Some(p) = &self.config {
            let cfg: CampaignConfig = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            cfg.validate()?;
            return Ok(cfg);
        }
        let mut cfg = CampaignConfig::new(strategy.config(0), mode.into(), self.budget);
        cfg.agent.strategy = self.agent.into();
        cfg.tile_size = self.tile_size;
        cfg.overlap = self.overlap;
        if let Some(l) = self.lambda {
            cfg.disca.lambda = l;
        }
        if let Some(lr) = self.learning_rate {
            cfg.disca.learning_rate = lr;
        }
        if let Some(s) = self.steps {
            cfg.disca.steps = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn sink(&self) -> CliResult<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(std::io::stdout().lock()),
        })
    }
}

fn seeded(base: &CampaignConfig, seed: u64) -> CampaignConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.strategy.seed = seed;
    cfg.agent.seed = seed;
    cfg
}

fn settings_for(checkpoint: &Checkpoint, cfg: &CampaignConfig) -> AcquisitionSettings {
    AcquisitionSettings {
        mc_dropout: cfg.mc_dropout.clone(),
        odin: cfg.odin.clone(),
        confidnet: checkpoint.confidnet.clone(),
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    campaign: CampaignArgs,
    #[arg(long, value_enum, default_value_t = StrategyArg::Entropy)]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Disca)]
    mode: ModeArg,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    campaign: CampaignArgs,
    #[arg(long, value_enum, default_value_t = StrategyArg::Random)]
    strategy: StrategyArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyKind {
    /// Gain of AC versus DISCA against error size and initial accuracy.
    Size,
    /// Gain per agent strategy from one click per crop.
    Guidance,
    /// Image-by-image refinement under a weight policy.
    Sequential,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(value_enum)]
    kind: StudyKind,
    #[arg(long, short)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 100)]
    crops: usize,
    #[arg(long, default_value_t = 64)]
    crop_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Disca)]
    mode: ModeArg,
    #[arg(long)]
    learning_rate: Option<f32>,
    /// Patches refined per image in the sequential study.
    #[arg(long, default_value_t = 6)]
    budget: usize,
    #[arg(long)]
    reset_per_image: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Directory holding registered images and checkpoints.
    #[arg(long, default_value = "store")]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

fn main() {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain(a) => run_pretrain(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Study(a) => run_study(a),
        Command::Serve(a) => {
            let store = Arc::new(Store::open(a.store)?);
            tokio::runtime::Runtime::new()?.block_on(serve(store, a.addr))?;
            Ok(())
        }
    }
}

fn run_pretrain(a: PretrainArgs) -> CliResult<()> {
    let data = a.data.load()?;
    let channels = data[0].0.channels();
    let classes = data[0].1.class_count();
    let cfg = PretrainConfig {
        max_clicks: a.max_clicks,
        image_only_fraction: a.image_only_fraction,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        augment: !a.no_augment,
        error_click_fraction: a.error_click_fraction,
        seed: a.seed,
    };
    let model = SegmentationModel::new(ModelConfig::new(channels, classes), a.seed)?;
    let (model, log) = pretrain(model, &data, &cfg)?;
    for (epoch, loss) in log.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.4}", epoch + 1);
    }
    let mut checkpoint = Checkpoint::new(model);
    if let Some(seed) = a.confidnet_seed {
        let toy = match &a.data.toy {
            Some(p) => ToyConfig::from_file(p)?,
            None => ToyConfig::default(),
        };
        let held_out = generate_toy(seed, &toy)?;
        let head = ConfidNetHead::new(&checkpoint.model, seed);
        checkpoint.confidnet = Some(confidnet_train(&checkpoint.model, head, &held_out, &ConfidNetTrainConfig::default())?);
    }
    checkpoint.save(&a.out)?;
    println!("wrote {} ({})", a.out.display(), checkpoint.model.param_hash());
    Ok(())
}

fn print_curves(rows: &[(String, Vec<CampaignResult>)]) {
    println!("{:<24} {:>8} {:>8} {:>8} {:>8}", "run", "initial", "final", "gain", "auc");
    for (name, results) in rows {
        let n = results.len() as f64;
        let mean = |f: &dyn Fn(&CampaignResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        let (i, f) = (mean(&|r| r.initial_iou()), mean(&|r| r.final_iou()));
        println!(
            "{name:<24} {i:>8.4} {f:>8.4} {:>+8.4} {:>8.4}",
            f - i,
            mean(&|r| r.area_under_curve())
        );
    }
}

fn mean_curve(results: &[CampaignResult]) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = results.iter().map(CampaignResult::curve).collect();
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|b| curves.iter().map(|c| c[b]).sum::<f64>() / curves.len() as f64)
        .collect()
}

fn finish(args: &CampaignArgs, rows: &[(String, Vec<CampaignResult>)]) -> CliResult<()> {
    let mut sink = args.sink()?;
    for (_, results) in rows {
        for r in results {
            r.write_jsonl(&mut sink)?;
        }
    }
    sink.flush()?;
    drop(sink);
    if args.out.is_some() {
        print_curves(rows);
    } else {
        // keep stdout machine-readable
        let mut err = std::io::stderr().lock();
        for (name, results) in rows {
            let c = mean_curve(results);
            writeln!(err, "{name}: initial {:.4} final {:.4}", c[0], c[c.len() - 1])?;
        }
    }
    if let Some(p) = &args.plot {
        let curves: Vec<Vec<f64>> = rows.iter().map(|(_, r)| mean_curve(r)).collect();
        interseg::plot::save_curves(&curves, p)?;
    }
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> CliResult<()> {
    let args = &a.campaign;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let data = args.data.load()?;
    let base = args.base(a.strategy, a.mode)?;
    let settings = settings_for(&checkpoint, &base);
    let mut results = Vec::new();
    for seed in 0..args.seeds {
        results.push(run_campaign(&checkpoint.model, &data, &seeded(&base, seed), &settings)?);
    }
    let name = format!("{}/{}", base.strategy.name(), base.mode.name());
    finish(args, &[(name, results)])
}

fn run_ablate(a: AblateArgs) -> CliResult<()> {
    let args = &a.campaign;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let data = args.data.load()?;
    let base = args.base(a.strategy, ModeArg::Disca)?;
    let settings = settings_for(&checkpoint, &base);
    let arms = AblationArm::standard();
    let mut rows: Vec<(String, Vec<CampaignResult>)> = arms.iter().map(|a| (a.name.clone(), Vec::new())).collect();
    for seed in 0..args.seeds {
        let table = run_ablation(&checkpoint.model, &data, &seeded(&base, seed), &arms, &settings)?;
        for (row, (_, result)) in rows.iter_mut().zip(table) {
            row.1.push(result);
        }
    }
    finish(args, &rows)
}

fn write_records<T: serde::Serialize>(out: &Option<PathBuf>, records: &[T]) -> CliResult<()> {
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for r in records {
        writeln!(sink, "{}", serde_json::to_string(r)?)?;
    }
    sink.flush()?;
    Ok(())
}

fn run_study(a: StudyArgs) -> CliResult<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let model = &checkpoint.model;
    let data = a.data.load()?;
    let mut crop = CropStudyConfig {
        crops: a.crops,
        crop_size: a.crop_size,
        agent: AgentConfig::default(),
        disca: DiscaConfig::toy(),
        seed: a.seed,
    };
    if let Some(lr) = a.learning_rate {
        crop.disca.learning_rate = lr;
    }
    match a.kind {
        StudyKind::Size => {
            let records = size_vs_method_study(model, &data, &crop)?;
            write_records(&a.out, &records)?;
            let mut sizes: Vec<usize> = records.iter().map(|r| r.error_size).collect();
            sizes.sort_unstable();
            let cut = sizes.get(sizes.len() * 3 / 4).copied().unwrap_or(0);
            let top: Vec<_> = records.iter().filter(|r| r.error_size >= cut).collect();
            let mean = |f: &dyn Fn(&&interseg::experiment::CropRecord) -> f64, rs: &[&interseg::experiment::CropRecord]| {
                rs.iter().map(f).sum::<f64>() / rs.len().max(1) as f64
            };
            let all: Vec<_> = records.iter().collect();
            eprintln!("{:<20} {:>6} {:>10} {:>10}", "subset", "crops", "ac_gain", "disca_gain");
            for (name, rs) in [("all", &all), ("top size quartile", &top)] {
                eprintln!(
                    "{name:<20} {:>6} {:>+10.5} {:>+10.5}",
                    rs.len(),
                    mean(&|r| r.ac_gain, rs),
                    mean(&|r| r.disca_gain, rs)
                );
            }
        }
        StudyKind::Guidance => {
            let records = guidance_study(model, &data, &crop, &AgentStrategy::ALL, a.mode.into())?;
            write_records(&a.out, &records)?;
            eprintln!("{:<22} {:>10} {:>8}", "strategy", "mean_gain", "clicked");
            for s in AgentStrategy::ALL {
                let rs: Vec<_> = records.iter().filter(|r| r.strategy == s).collect();
                let gain = rs.iter().map(|r| r.gain).sum::<f64>() / rs.len().max(1) as f64;
                let clicked = rs.iter().filter(|r| r.clicked).count();
                eprintln!("{:<22} {gain:>+10.5} {clicked:>8}", s.name());
            }
        }
        StudyKind::Sequential => {
            let mut base = CampaignConfig::new(StrategyArg::Entropy.config(a.seed), RefineMode::Disca, a.budget);
            base.seed = a.seed;
            if let Some(lr) = a.learning_rate {
                base.disca.learning_rate = lr;
            }
            let policy = if a.reset_per_image {
                WeightPolicy::ResetPerImage
            } else {
                WeightPolicy::Sequential
            };
            let settings = settings_for(&checkpoint, &base);
            let records = sequential_study(model, &data, &base, policy, &settings)?;
            write_records(&a.out, &records)?;
            eprintln!("{:<6} {:>11} {:>8} {:>8}", "image", "checkpoint", "initial", "final");
            for r in &records {
                eprintln!(
                    "{:<6} {:>11.4} {:>8.4} {:>8.4}",
                    r.image, r.checkpoint_iou, r.initial_iou, r.final_iou
                );
            }
        }
    }
    Ok(())
}
