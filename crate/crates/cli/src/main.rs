//! `refcomplete`: dataset generation, training, inference, evaluation,
//! the mask-ratio ablation and the HTTP service behind one binary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use refcomplete::benchmark::{
    load_benchmark, run_eval, run_mask_ratio_ablation, AblationSetup, Completer, IdentityOracle, ModelCompleter, DEFAULT_RATIOS,
    IDENTITY_ORACLE, MANIFEST,
};
use refcomplete::config::{RunConfig, TrainingSource};
use refcomplete::dataset::{generate_dataset, read_dataset, read_training_pairs, training_figures, DatasetOptions};
use refcomplete::diffusion::sample_completion;
use refcomplete::model::checkpoint;
use refcomplete::synth::FigureSpec;
use refcomplete::training::{train_loop, TrainingData};
use refcomplete::{Mask, PartLabel, Raster, ReferencePart};
use refcomplete_service::{ServiceConfig, StartupError};

#[derive(Parser, Debug)]
#[command(name = "refcomplete", version, about = "Reference-guided image completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.learning_rate=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write training pairs and a held-out benchmark.
    GenData {
        /// Number of training pairs (`data.figures`).
        #[arg(long)]
        figures: Option<usize>,
        /// Number of benchmark groups (`data.benchmark_groups`).
        #[arg(long)]
        benchmark_groups: Option<usize>,
        /// Generator seed (`data.seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes `model.ckpt`, `loss.csv` and intermediate checkpoints to `--out`.
    Train {
        /// Dataset from `gen-data`; without it figures are generated from `data.figures` and `data.seed`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training seed (`train.seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fill the masked region of one image.
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// `LABEL=IMAGE.png,MASK.png`, e.g. `upper_clothes=top.png,top_mask.png`. Repeatable.
        #[arg(long = "ref", value_name = "LABEL=IMAGE,MASK")]
        references: Vec<String>,
        #[arg(long)]
        prompt: Option<String>,
        /// Sampling seed (`eval.seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Denoising steps (`sampler.steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance scale (`sampler.guidance_scale`).
        #[arg(long)]
        guidance: Option<f32>,
        /// Output PNG; `run.json` goes next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Complete every benchmark group and write the metric report.
    Evaluate {
        /// Checkpoint path, or `oracle:identity` to score the ground truth itself.
        #[arg(long)]
        ckpt: String,
        /// Benchmark directory or its `manifest.json`.
        #[arg(long)]
        benchmark: PathBuf,
        /// Report directory.
        #[arg(long)]
        report: PathBuf,
        /// Sampling seed (`eval.seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Retrain at several random-mask ratios and evaluate each model.
    AblateMaskRatio {
        /// Percentages of random masks, e.g. `0,25,50,75,100`.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATIOS.map(|r| r * 100.0))]
        ratios: Vec<f64>,
        /// Dataset from `gen-data`; supplies figures and the benchmark.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Benchmark directory; overrides the dataset's.
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the HTTP service. Flags override the `REFCOMPLETE_*` environment.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        queue_depth: Option<usize>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] refcomplete::Error),
    #[error(transparent)]
    Service(#[from] StartupError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let io = match self {
            CliError::Core(e) => e.is_io(),
            CliError::Service(e) => e.is_io(),
            CliError::Usage(_) => false,
        };
        if io {
            2
        } else {
            1
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn key_listing() -> String {
    let keys = RunConfig::default().keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (set with --set KEY=VALUE, defaults shown):\n");
    for (k, v) in keys {
        out.push_str(&format!("  {k:width$}  {v}\n"));
    }
    out
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.set(o)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(&format!("{key}={v}"))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_run(dir: &Path, command: &str, cfg: &RunConfig, seed: u64, extra: serde_json::Value) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| refcomplete::Error::Io { context: "creating output directory".into(), path: dir.into(), source: e })?;
    let run = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": cfg,
        "inputs": extra,
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&run).expect("run record serializes") + "\n")
        .map_err(|e| refcomplete::Error::Io { context: "writing run record".into(), path, source: e })?;
    Ok(())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST)
    } else {
        p.to_path_buf()
    }
}

fn parse_reference(spec: &str) -> CliResult<ReferencePart> {
    let usage = || CliError::Usage(format!("--ref {spec:?} must look like LABEL=IMAGE.png,MASK.png"));
    let (label, files) = spec.split_once('=').ok_or_else(usage)?;
    let (image, mask) = files.split_once(',').ok_or_else(usage)?;
    let label: PartLabel = label.trim().parse()?;
    Ok(ReferencePart { label, image: Raster::load_png(Path::new(image))?, mask: Mask::load_png(Path::new(mask))?, caption: String::new() })
}

fn training_data(cfg: &RunConfig, data: Option<&Path>) -> CliResult<(TrainingData, Vec<FigureSpec>)> {
    let Some(dir) = data else {
        let figures = training_figures(cfg.data.figures, cfg.data.seed);
        return Ok((TrainingData::Procedural { figures: figures.clone(), image_size: cfg.model.image_size }, figures));
    };
    let manifest = read_dataset(dir)?;
    if manifest.image_size != cfg.model.image_size {
        return Err(CliError::Usage(format!("dataset images are {} px but model.image_size is {}", manifest.image_size, cfg.model.image_size)));
    }
    let data = match cfg.data.training {
        TrainingSource::Procedural => TrainingData::Procedural { figures: manifest.figures.clone(), image_size: manifest.image_size },
        TrainingSource::Pairs => TrainingData::Samples(read_training_pairs(dir, &manifest)?),
    };
    Ok((data, manifest.figures))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { figures, benchmark_groups, seed, out, common } => {
            let cfg = resolve(
                &common,
                &[
                    ("data.figures", figures.map(|v| v.to_string())),
                    ("data.benchmark_groups", benchmark_groups.map(|v| v.to_string())),
                    ("data.seed", seed.map(|v| v.to_string())),
                ],
            )?;
            let opts = DatasetOptions {
                figures: cfg.data.figures,
                benchmark_groups: cfg.data.benchmark_groups,
                seed: cfg.data.seed,
                image_size: cfg.model.image_size,
                mask: cfg.train.mask.clone(),
            };
            let manifest = generate_dataset(&out, &opts)?;
            write_run(&out, "gen-data", &cfg, cfg.data.seed, json!({}))?;
            println!("wrote {} training pairs and {} benchmark groups to {}", manifest.pairs, manifest.benchmark_groups, out.display());
        }
        Command::Train { data, seed, out, common } => {
            let cfg = resolve(&common, &[("train.seed", seed.map(|v| v.to_string()))])?;
            let (training, _) = training_data(&cfg, data.as_deref())?;
            write_run(&out, "train", &cfg, cfg.train.seed, json!({ "data": data }))?;
            let outcome = train_loop(&training, &cfg.model, &cfg.train, Some(&out))?;
            let last = outcome.losses.last().map_or("n/a".to_string(), |l| format!("{l:.5}"));
            println!("trained {} steps, final loss {last}; checkpoint {}", outcome.losses.len(), out.join("model.ckpt").display());
        }
        Command::Complete { ckpt, source, mask, references, prompt, seed, steps, guidance, out, common } => {
            let cfg = resolve(
                &common,
                &[
                    ("eval.seed", seed.map(|v| v.to_string())),
                    ("sampler.steps", steps.map(|v| v.to_string())),
                    ("sampler.guidance_scale", guidance.map(|v| v.to_string())),
                ],
            )?;
            let model = checkpoint::load(&ckpt)?;
            let source_img = Raster::load_png(&source)?;
            let mask_img = Mask::load_png(&mask)?;
            if mask_img.is_empty() {
                return Err(CliError::Usage("empty_mask: the mask selects no pixels".into()));
            }
            let refs = references.iter().map(|r| parse_reference(r)).collect::<CliResult<Vec<_>>>()?;
            let cache = model.encode_conditions(&refs, prompt.as_deref())?;
            let image = sample_completion(&model, &cache, &source_img, &mask_img, &cfg.sampler, cfg.eval.seed)?;
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            write_run(dir, "complete", &cfg, cfg.eval.seed, json!({ "ckpt": ckpt, "source": source, "mask": mask, "references": references, "prompt": prompt }))?;
            image.save_png(&out)?;
            println!("wrote {} (steps {}, guidance {})", out.display(), cfg.sampler.steps, cfg.sampler.guidance_scale);
        }
        Command::Evaluate { ckpt, benchmark, report, seed, common } => {
            let cfg = resolve(&common, &[("eval.seed", seed.map(|v| v.to_string()))])?;
            let groups = load_benchmark(&manifest_path(&benchmark))?;
            let model;
            let completer: Box<dyn Completer + '_> = if ckpt == IDENTITY_ORACLE {
                Box::new(IdentityOracle)
            } else {
                model = checkpoint::load(Path::new(&ckpt))?;
                Box::new(ModelCompleter(&model))
            };
            write_run(&report, "evaluate", &cfg, cfg.eval.seed, json!({ "ckpt": ckpt, "benchmark": benchmark }))?;
            let outcome = run_eval(completer.as_ref(), &groups, &cfg.eval_options(), Some(&report))?;
            print!("{}", outcome.report.to_table());
        }
        Command::AblateMaskRatio { ratios, data, benchmark, out, common } => {
            let cfg = resolve(&common, &[])?;
            if ratios.is_empty() || ratios.iter().any(|r| !(0.0..=100.0).contains(r)) {
                return Err(CliError::Usage(format!("ratios must be percentages in [0, 100], got {ratios:?}")));
            }
            let fractions: Vec<f64> = ratios.iter().map(|r| r / 100.0).collect();
            let (_, figures) = training_data(&cfg, data.as_deref())?;
            let bench_path = match (&benchmark, &data) {
                (Some(b), _) => Some(manifest_path(b)),
                (None, Some(d)) => Some(read_dataset(d)?.benchmark_manifest(d)),
                (None, None) => None,
            };
            let groups = match &bench_path {
                Some(p) => load_benchmark(p)?,
                None => refcomplete::benchmark::synthetic_benchmark(cfg.data.benchmark_groups, cfg.data.seed, cfg.model.image_size)?.0,
            };
            write_run(&out, "ablate-mask-ratio", &cfg, cfg.train.seed, json!({ "ratios": ratios, "data": data, "benchmark": bench_path }))?;
            let setup = AblationSetup { model: cfg.model.clone(), train: cfg.train.clone(), figures: &figures, benchmark: &groups, eval: cfg.eval_options() };
            let result = run_mask_ratio_ablation(&setup, &fractions, Some(&out))?;
            print!("{}", result.to_table());
        }
        Command::Serve { ckpt, benchmark, port, queue_depth } => {
            let mut sc = ServiceConfig::from_env()?;
            sc.checkpoint = ckpt.or(sc.checkpoint);
            sc.benchmark_dir = benchmark.or(sc.benchmark_dir);
            sc.port = port.unwrap_or(sc.port);
            sc.queue_depth = queue_depth.unwrap_or(sc.queue_depth);
            let rt = tokio::runtime::Runtime::new().map_err(|source| StartupError::Bind { addr: ([0, 0, 0, 0], sc.port).into(), source })?;
            rt.block_on(refcomplete_service::serve(sc))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let keys = key_listing();
    let hint = "Run with --help to list every configuration key.";
    let cmd = Cli::command()
        .after_help(hint)
        .after_long_help(keys.clone())
        .mut_subcommands(|s| s.after_help(hint).after_long_help(keys.clone()));
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
