use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};

use uniav::config::{RunConfig, CONFIG_DIR_ENV, CONFIG_FILE_NAME};
use uniav::data::{
    generate_synthetic, load_checkpoint, load_manifest, write_dataset, Dataset, LoadMode, Split, Vocabulary,
};
use uniav::eval::{
    extend_vocabulary, ground_truth, map_report, predict_videos, write_detections, Detection, ExtraClass,
};
use uniav::model::UniAv;
use uniav::train::{train, TrainMode};
use uniav::TaskId;

#[derive(Parser, Debug)]
#[command(name = "uniav", version, about = "Unified audio-visual temporal localization")]
struct Cli {
    /// TOML config file; defaults to $UNIAV_CONFIG_DIR/uniav.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set optim.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for per-video parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset (features, manifest, vocabulary).
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train in one of the regimes st:<task>, at or ft:<task>.
    Train {
        /// at, st:<task> or ft:<task>, with task one of tal, avel, sed.
        #[arg(long)]
        mode: String,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint to start from; required for ft.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Run directory for checkpoints, metrics.jsonl and the config snapshot.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against the manifest's annotations.
    Eval {
        #[command(flatten)]
        target: TargetArgs,
        /// JSON array of extra classes `{name, prompt, embedding}` appended
        /// to the task vocabulary.
        #[arg(long)]
        extra_vocab: Option<PathBuf>,
        /// Use the ground truth itself as score-1 detections.
        #[arg(long)]
        oracle: bool,
        /// Directory for detections.tsv and report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write detections for every video of a task.
    Predict {
        #[command(flatten)]
        target: TargetArgs,
        /// Directory for detections.tsv.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// manifest.json listing videos, feature files and annotations.
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to vocab.json next to the manifest.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TargetArgs {
    /// A `*.ckpt.json` index written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// tal, avel or sed.
    #[arg(long)]
    task: TaskId,
    /// Restrict to one split (train or val); all videos by default.
    #[arg(long)]
    split: Option<String>,
}

impl DataArgs {
    fn vocab_path(&self) -> PathBuf {
        self.vocab
            .clone()
            .unwrap_or_else(|| self.manifest.parent().unwrap_or(Path::new(".")).join("vocab.json"))
    }
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::ArgumentConflict, msg)
        .exit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.clone().or_else(|| {
        let dir = std::env::var_os(CONFIG_DIR_ENV)?;
        let p = PathBuf::from(dir).join(CONFIG_FILE_NAME);
        p.exists().then_some(p)
    });
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("optim.seed={seed}"));
        overrides.push(format!("synthetic.seed={seed}"));
    }
    RunConfig::load(path.as_deref(), &overrides).with_context(|| match &path {
        Some(p) => format!("resolving config from {}", p.display()),
        None => "resolving config".to_string(),
    })
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        usage_error("--threads must be at least 1");
    }
    let threads = if cli.deterministic { 1 } else { cli.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting worker threads")?;
    let cfg = resolve_config(&cli)?;

    match &cli.command {
        Command::GenData { out } => {
            prepare_out(out, &cfg)?;
            let data = generate_synthetic(&cfg.synthetic)?;
            write_dataset(out, &data.dataset, &data.vocab)?;
            for task in &cfg.synthetic.tasks {
                println!(
                    "{task}: {} train, {} val, {} classes",
                    data.dataset.count(*task, Split::Train),
                    data.dataset.count(*task, Split::Val),
                    data.vocab.get(*task)?.len()
                );
            }
        }
        Command::Train { mode, data, init, out } => {
            let mode: TrainMode = mode.parse().unwrap_or_else(|e| usage_error(e));
            if matches!(mode, TrainMode::Finetune(_)) && init.is_none() {
                usage_error("--mode ft:<task> requires --init <checkpoint>");
            }
            let init = init
                .as_deref()
                .map(load_checkpoint)
                .transpose()
                .context("loading --init checkpoint")?;
            let lens = init.as_ref().map_or(&cfg.model.max_seq_len, |c| &c.config.max_seq_len);
            let vocab = Vocabulary::load(&data.vocab_path())?;
            let dataset = load_manifest(&data.manifest, &vocab, lens)?;
            prepare_out(out, &cfg)?;
            let outcome = train(&cfg, mode, &dataset, &vocab, init.as_ref(), Some(out), |r| {
                eprintln!(
                    "epoch {} {} [{:?}] steps {} train {} val {}",
                    r.epoch,
                    r.task,
                    r.mode,
                    r.steps,
                    fmt_opt(r.train_loss),
                    fmt_opt(r.val_loss)
                );
            })?;
            println!("mode {mode}, {} parameters", outcome.model.num_params());
            let last = cfg.optim.epochs;
            for r in outcome.history.iter().filter(|r| r.epoch == last) {
                let names: Vec<&str> = vocab.get(r.task)?.names();
                match &r.map {
                    Some(m) => print!("{}", m.table(&names)),
                    None => println!("{}: no validation videos", r.task),
                }
            }
            if let Some(p) = outcome.checkpoints.last() {
                println!("final checkpoint {}", p.display());
            }
        }
        Command::Eval {
            target,
            extra_vocab,
            oracle,
            out,
        } => {
            let extra: Vec<ExtraClass> = match extra_vocab {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => Vec::new(),
            };
            let ctx = load_target(target, &extra)?;
            prepare_out(out, &cfg)?;
            let gts = ground_truth(&ctx.videos(), 0);
            let dets = if *oracle {
                gts.iter()
                    .map(|g| Detection {
                        video_id: g.video_id.clone(),
                        task: target.task,
                        class: g.class,
                        onset: g.onset,
                        offset: g.offset,
                        score: 1.0,
                    })
                    .collect()
            } else {
                ctx.predict(&cfg)?
            };
            let table = ctx.vocab.get(target.task)?;
            let names = table.names();
            write_detections(&out.join("detections.tsv"), &dets, &names)?;
            let report = map_report(&dets, &gts, cfg.eval.grid(target.task), target.task);
            let path = out.join("report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            print!("{}", report.table(&names));
            if !extra.is_empty() {
                let base = table.len() - extra.len();
                println!("extended classes:");
                for (i, e) in extra.iter().enumerate() {
                    match report.per_class.get(&(base + i)) {
                        Some(aps) => {
                            let cols: Vec<String> = aps.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
                            println!("  {:<22} {}", e.name, cols.join(" "));
                        }
                        None => println!("  {:<22} no ground truth", e.name),
                    }
                }
            }
        }
        Command::Predict { target, out } => {
            let ctx = load_target(target, &[])?;
            prepare_out(out, &cfg)?;
            let dets = ctx.predict(&cfg)?;
            let names = ctx.vocab.get(target.task)?.names();
            let path = out.join("detections.tsv");
            write_detections(&path, &dets, &names)?;
            println!(
                "{} detections for {} videos -> {}",
                dets.len(),
                ctx.videos().len(),
                path.display()
            );
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

struct Target {
    model: UniAv<f32>,
    vocab: Vocabulary,
    dataset: Dataset,
    task: TaskId,
    split: Option<Split>,
}

impl Target {
    fn videos(&self) -> Vec<&uniav::data::VideoItem> {
        self.dataset
            .videos
            .iter()
            .filter(|v| v.task == self.task && self.split.is_none_or(|s| v.split == s))
            .collect()
    }

    fn predict(&self, cfg: &RunConfig) -> Result<Vec<Detection>> {
        let table = self.vocab.get(self.task)?;
        Ok(predict_videos(
            &self.model,
            &self.videos(),
            self.task,
            table,
            &cfg.decode,
        )?)
    }
}

fn load_target(args: &TargetArgs, extra: &[ExtraClass]) -> Result<Target> {
    let split = match args.split.as_deref() {
        None => None,
        Some("train") => Some(Split::Train),
        Some("val") => Some(Split::Val),
        Some(s) => usage_error(format!("unknown split `{s}` (train or val)")),
    };
    let ckpt = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    if !ckpt.config.tasks.contains(&args.task) {
        bail!("checkpoint has no `{}` experts", args.task.name());
    }
    let mut model = UniAv::new(ckpt.config.clone(), 0)?;
    ckpt.load_into(&mut model, LoadMode::Strict)?;

    let mut vocab = Vocabulary::load(&args.data.vocab_path())?;
    if !extra.is_empty() {
        let extended = extend_vocabulary(vocab.get(args.task)?, extra)?;
        vocab.tasks.insert(args.task, extended);
    }
    let dim = vocab.get(args.task)?.dim();
    if dim != model.config().text_dim {
        bail!(uniav::Error::Load(format!(
            "vocabulary is {dim}-dim, the checkpoint expects {}-dim text embeddings",
            model.config().text_dim
        )));
    }
    let dataset = load_manifest(&args.data.manifest, &vocab, &model.config().max_seq_len)?;
    Ok(Target {
        model,
        vocab,
        dataset,
        task: args.task,
        split,
    })
}
