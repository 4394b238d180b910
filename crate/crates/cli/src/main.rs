//! `vgslu`: train, evaluate, decode, sweep and report.
//!
//! Every run writes into a directory under the run root (`--runs-dir` or
//! `VGSLU_RUNS`, default `runs/`). A run directory holds `run.json` (the full
//! config, its seed and content hash, and the checkpoint files), the
//! per-epoch `metrics.csv`, one-row `results.csv`, and `report.{json,txt}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use vgslu::data::{load_dataset, Split, TextKind, ToySpec};
use vgslu::evaluation::{format_score, retrieval_table, RetrievalReport};
use vgslu::experiment::{
    failures_csv, plot_csv, plot_points, read_results_csv, results_csv, run_sweep, summarize, summary_table, third_ladder,
    CellEvent, ResultRow, SummaryRow, SweepSpec,
};
use vgslu::training::{
    evaluate_models, train_prepared, write_metrics_csv, Checkpoint, Model, Prepared, RunOutcome, Strategy, TextMetric,
    TrainRunConfig,
};

#[derive(Parser)]
#[command(name = "vgslu", version, about = "Visually-grounded spoken language understanding experiments")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "VGSLU_RUNS", default_value = "runs")]
    runs_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one strategy (optionally over several seeds).
    Train(TrainArgs),
    /// Re-score a finished run on a split.
    Evaluate(EvaluateArgs),
    /// Beam-decode utterances with a run's ASR/SLT model; TSV to stdout.
    Decode(DecodeArgs),
    /// Train every (strategy, fraction, seed) cell and tabulate the results.
    Sweep(SweepArgs),
    /// Summarize a results CSV into tables and plot data.
    Report(ReportArgs),
    /// Write a synthetic toy corpus.
    SynthData(SynthArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// JSON run config; keys override the base profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small-model profile instead of full size.
    #[arg(long)]
    toy_profile: bool,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    text_kind: Option<TextKind>,
    #[arg(long)]
    text_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    asr_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Output directory name under the run root.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Train seeds `seed … seed+n−1`, one sub-directory each.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset manifest; defaults to the one the run trained on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
    /// Defaults to the run's configured beam width.
    #[arg(long)]
    beam_width: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated strictly decreasing fractions in (0, 1].
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Use the first n rungs of 1, 1/3, 1/9, … instead of --fractions.
    #[arg(long)]
    ladder: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// `results.csv` from `train` or `sweep`.
    #[arg(long)]
    results: PathBuf,
    /// Where to write `summary.{json,txt}` and `plot.csv`; defaults to the CSV's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    images: usize,
    #[arg(long, default_value_t = 5)]
    captions: usize,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train, val, test)")),
    }
}

/// Everything needed to reload a run.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    config: TrainRunConfig,
    seed: u64,
    content_hash: String,
    data: PathBuf,
    /// Role → checkpoint file name inside the run directory.
    checkpoints: BTreeMap<String, String>,
    version: String,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainRunConfig> {
        let strategy = self.strategy.unwrap_or(Strategy::SpeechImage);
        let base = if self.toy_profile { TrainRunConfig::toy(strategy) } else { TrainRunConfig { strategy, ..Default::default() } };
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let over: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let mut v = serde_json::to_value(&base)?;
                merge(&mut v, over);
                serde_json::from_value(v).with_context(|| format!("invalid config {}", path.display()))?
            }
            None => base,
        };
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if let Some(k) = self.text_kind {
            cfg.text_kind = k;
        }
        if let Some(f) = self.text_fraction {
            cfg.text_fraction = f;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(e) = self.asr_epochs {
            cfg.asr_epochs = Some(e);
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(w) = self.beam_width {
            cfg.beam_width = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn text_line(metric: Option<TextMetric>) -> String {
    match metric {
        Some(TextMetric { kind: TextKind::Transcription, value }) => format!("WER  {}\n", format_score(value)),
        Some(TextMetric { kind: TextKind::Translation, value }) => format!("BLEU {}\n", format_score(value)),
        None => String::new(),
    }
}

fn write_run(dir: &Path, data: &Path, out: &RunOutcome) -> Result<ResultRow> {
    create_dir(dir)?;
    let cfg = &out.config;
    let hash = cfg.content_hash();
    let mut checkpoints = BTreeMap::new();
    for m in &out.models {
        let file = format!("{}.ckpt", m.role);
        Checkpoint::from_trained(m, &cfg.encoder, &hash).save(&dir.join(&file))?;
        checkpoints.insert(m.role.clone(), file);
    }
    let manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        content_hash: hash,
        data: fs::canonicalize(data).unwrap_or_else(|_| data.to_path_buf()),
        checkpoints,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write(&dir.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_metrics_csv(&dir.join("metrics.csv"), &out.history)?;
    let row = ResultRow::from_outcome(out);
    write(&dir.join("results.csv"), results_csv(std::slice::from_ref(&row))?)?;
    write(&dir.join("report.json"), serde_json::to_string_pretty(&row)?)?;
    let table = retrieval_table(&[(cfg.strategy.to_string(), out.retrieval)]) + &text_line(out.text_metric);
    write(&dir.join("report.txt"), &table)?;
    Ok(row)
}

fn default_name(cfg: &TrainRunConfig) -> String {
    format!("{}-f{}-s{}-{}", cfg.strategy, cfg.text_fraction, cfg.seed, &cfg.content_hash()[..8])
}

fn cmd_train(root: &Path, args: &TrainArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cfg = args.cfg.resolve()?;
    let ds = load_dataset(&args.cfg.data)?;
    let p = Prepared::new(&ds, &cfg)?;
    let dir = root.join(args.cfg.name.clone().unwrap_or_else(|| default_name(&cfg)));
    let mut rows = Vec::new();
    for k in 0..args.seeds as u64 {
        let c = TrainRunConfig { seed: cfg.seed.wrapping_add(k), ..cfg.clone() };
        let out = train_prepared(&c, &p)?;
        let run_dir = if args.seeds == 1 { dir.clone() } else { dir.join(format!("seed-{}", c.seed)) };
        rows.push(write_run(&run_dir, &args.cfg.data, &out)?);
        eprintln!("{} seed {} done in {:.1}s → {}", c.strategy, c.seed, out.seconds, run_dir.display());
    }
    if args.seeds > 1 {
        write(&dir.join("results.csv"), results_csv(&rows)?)?;
        write_summary(&dir, &summarize(&rows))?;
    }
    print!("{}", summary_table(&summarize(&rows)));
    Ok(())
}

fn load_run(run: &Path, data: Option<&Path>) -> Result<(RunManifest, Prepared, Vec<(String, Model)>)> {
    let path = run.join("run.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let ds = load_dataset(data.unwrap_or(&manifest.data))?;
    let p = Prepared::new(&ds, &manifest.config)?;
    let models = manifest
        .checkpoints
        .iter()
        .map(|(role, file)| Ok((role.clone(), Checkpoint::load(&run.join(file))?.model()?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, p, models))
}

#[derive(Serialize)]
struct EvalReport {
    strategy: Strategy,
    split: Split,
    retrieval: RetrievalReport,
    text_metric: Option<TextMetric>,
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (manifest, p, models) = load_run(&args.run, args.data.as_deref())?;
    let refs: Vec<(&str, &Model)> = models.iter().map(|(r, m)| (r.as_str(), m)).collect();
    let (retrieval, text_metric) = evaluate_models(&manifest.config, &p, &refs, args.split)?;
    let report = EvalReport { strategy: manifest.config.strategy, split: args.split, retrieval, text_metric };
    let name = format!("eval-{}", serde_json::to_value(args.split)?.as_str().unwrap_or("split"));
    let table = retrieval_table(&[(report.strategy.to_string(), retrieval)]) + &text_line(text_metric);
    write(&args.run.join(format!("{name}.json")), serde_json::to_string_pretty(&report)?)?;
    write(&args.run.join(format!("{name}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let (manifest, p, models) = load_run(&args.run, args.data.as_deref())?;
    let Some((_, model)) = models.iter().find(|(_, m)| m.decoder().is_some()) else {
        bail!("run {} has no model with a decoder", args.run.display());
    };
    let idx = p.indices(args.split);
    let width = args.beam_width.unwrap_or(manifest.config.beam_width);
    let hyps = model.decode_text(&p, &idx, width, manifest.config.length_norm, 32)?;
    println!("id\thypothesis\tlog_prob");
    for (&i, (text, lp)) in idx.iter().zip(&hyps) {
        println!("{}\t{}\t{}", p.record(i).id, text, lp);
    }
    Ok(())
}

fn write_summary(dir: &Path, summary: &[SummaryRow]) -> Result<String> {
    let table = summary_table(summary);
    write(&dir.join("summary.txt"), &table)?;
    write(&dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    write(&dir.join("plot.csv"), plot_csv(&plot_points(summary))?)?;
    Ok(table)
}

fn cmd_sweep(root: &Path, args: &SweepArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let defaults = SweepSpec::default();
    let spec = SweepSpec {
        fractions: match (&args.fractions, args.ladder) {
            (Some(_), Some(_)) => bail!("give either --fractions or --ladder"),
            (Some(f), None) => f.clone(),
            (None, Some(n)) => third_ladder(n),
            (None, None) => defaults.fractions,
        },
        strategies: args.strategies.clone().unwrap_or(defaults.strategies),
        seeds: args.seeds,
    };
    spec.validate()?;
    let ds = load_dataset(&args.cfg.data)?;
    let dir = root.join(args.cfg.name.clone().unwrap_or_else(|| format!("sweep-{}", &cfg.content_hash()[..8])));
    create_dir(&dir)?;
    write(&dir.join("sweep.json"), serde_json::to_string_pretty(&serde_json::json!({ "spec": spec, "base": cfg }))?)?;
    let out = run_sweep(&spec, &cfg, &ds, |e| match e {
        CellEvent::Done(r) => eprintln!("{} f={} seed={}: R@10 {}", r.strategy, r.fraction, r.seed, format_score(r.r10)),
        CellEvent::Failed(f) => eprintln!("{} f={} seed={}: FAILED {}", f.strategy, f.fraction, f.seed, f.error),
    })?;
    write(&dir.join("results.csv"), results_csv(&out.rows)?)?;
    write(&dir.join("failures.csv"), failures_csv(&out.failures)?)?;
    print!("{}", write_summary(&dir, &summarize(&out.rows))?);
    if !out.failures.is_empty() {
        eprintln!("{} of {} cells failed; see {}", out.failures.len(), spec.cells(), dir.join("failures.csv").display());
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let rows = read_results_csv(&args.results)?;
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => args.results.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    create_dir(&dir)?;
    print!("{}", write_summary(&dir, &summarize(&rows))?);
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = ToySpec { n_images: args.images, captions_per_image: args.captions, vocab_size: args.vocab, seed: args.seed, ..ToySpec::default() };
    let manifest = spec.generate().save(&args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(a) => cmd_train(&cli.runs_dir, a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Sweep(a) => cmd_sweep(&cli.runs_dir, a),
        Command::Report(a) => cmd_report(a),
        Command::SynthData(a) => cmd_synth(a),
    }
}
