use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use datta::augment::AugmentConfig;
use datta::data::{
    preprocess_stream, read_dataset, synthesize_domain, write_dataset, CsiSample, DatasetSplit, PatternGenerator, PreprocessError,
    SampleMeta, SplitName, SyntheticDomainSpec,
};
use datta::harness::{
    bench_inference, config_hash, evaluate, run_experiment, BenchConfig, ExperimentConfig, Predictor, SequenceMode, SequenceSpec,
};
use datta::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use datta::train::{train_dat, DatConfig, SourceStatistics};
use datta::tta::{AdaptationConfig, Adaptor};

#[derive(Parser)]
#[command(name = "datta", version, about = "Domain-adversarial training and test-time adaptation for WiFi CSI")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a directory of packet CSV files into a dataset file.
    ///
    /// The directory holds `index.csv` with columns `sample_id,activity,domain,file`;
    /// each `file` is a headerless CSV with one packet of 30 amplitudes per row.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Packet rate of the recordings in Hz.
        #[arg(long, default_value_t = 100)]
        rate: u32,
    },
    /// Generate a synthetic dataset from a TOML spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        /// Samples per domain.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint, source statistics and log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset used for model selection.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt online to a stream and write one record per sample.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on a dataset for each configured sequence.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip adaptation and evaluate the frozen model.
        #[arg(long)]
        frozen: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time frozen inference, adaptation and adaptation with resets.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write JSON lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment grid.
    Exp {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `runs/<experiment name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Sections shared by the `train`, `adapt`, `eval` and `bench` configs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: DatConfig,
    augment: AugmentConfig,
    tta: AdaptationConfig,
    bench: BenchConfig,
    sequences: Vec<SequenceSpec>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthSpec {
    #[serde(default)]
    generator: PatternGenerator,
    domains: Vec<SyntheticDomainSpec>,
}

#[derive(Deserialize)]
struct IndexRow {
    sample_id: String,
    activity: u8,
    domain: u16,
    file: PathBuf,
}

#[derive(Serialize)]
struct AdaptRecord<'a> {
    sample_id: &'a str,
    prediction: usize,
    latency_ms: f64,
    loss: f64,
    drift: f64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct SequenceSummary<'a> {
    sequence: &'a str,
    samples: usize,
    accuracy: f64,
    macro_f1: f64,
    config_hash: &'a str,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match cli.command {
        Command::Preprocess { input, out, rate } => preprocess(&input, &out, rate),
        Command::Synth { spec, n, out } => synth(&spec, n, &out),
        Command::Train { data, val, config, out } => train(&data, val.as_deref(), config.as_deref(), &out),
        Command::Adapt {
            ckpt,
            stats,
            stream,
            config,
            out,
        } => adapt(&ckpt, &stats, &stream, config.as_deref(), &out),
        Command::Eval {
            ckpt,
            stats,
            data,
            config,
            frozen,
            out,
        } => eval(&ckpt, stats.as_deref(), &data, config.as_deref(), frozen, &out),
        Command::Bench {
            ckpt,
            stats,
            data,
            config,
            out,
        } => bench(&ckpt, &stats, &data, config.as_deref(), out.as_deref()),
        Command::Exp { config, out } => exp(&config, out),
    }
}

fn read_packets(path: &Path) -> Result<Vec<Vec<f32>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut packets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let row = record
            .iter()
            .map(|v| v.parse::<f32>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        packets.push(row);
    }
    Ok(packets)
}

fn preprocess(dir: &Path, out: &Path, rate: u32) -> Result<()> {
    let index = dir.join("index.csv");
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&index)
        .with_context(|| format!("opening {}", index.display()))?;
    let mut samples = Vec::new();
    let mut rejected = 0usize;
    for row in reader.deserialize() {
        let row: IndexRow = row.with_context(|| format!("reading {}", index.display()))?;
        let packets = read_packets(&dir.join(&row.file))?;
        let meta = SampleMeta {
            activity: row.activity,
            domain: row.domain,
            sample_id: row.sample_id,
        };
        match preprocess_stream(&packets, rate, meta) {
            Ok(s) => samples.push(s),
            Err(PreprocessError::DegenerateRange { sample }) => {
                log::warn!("`{}` has constant amplitudes", sample.sample_id);
                samples.push(*sample);
            }
            Err(PreprocessError::InvalidRate(r)) => bail!("packet rate {r} Hz is below 100 Hz"),
            Err(e) => {
                log::warn!("{}: {e}", row.file.display());
                rejected += 1;
            }
        }
    }
    write_dataset(&samples, out)?;
    eprintln!("wrote {} samples to {} ({rejected} rejected)", samples.len(), out.display());
    Ok(())
}

fn synth(spec: &Path, n: usize, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec: SynthSpec = toml::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
    let mut samples = Vec::new();
    for d in &spec.domains {
        samples.extend(synthesize_domain(d, n, &spec.generator, SplitName::Train)?.samples);
    }
    write_dataset(&samples, out)?;
    eprintln!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn load_split(path: &Path, name: SplitName) -> Result<DatasetSplit> {
    let samples = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(DatasetSplit::new(name, samples))
}

fn write_jsonl<S: Serialize>(path: &Path, items: impl IntoIterator<Item = S>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn train(data: &Path, val: Option<&Path>, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let hash = config_hash(&cfg);
    let train = load_split(data, SplitName::Train)?;
    let val = val.map(|p| load_split(p, SplitName::Val)).transpose()?;
    let outcome = train_dat::<f32>(&train, val.as_ref(), &cfg.model, &cfg.train, &cfg.augment)?;

    save_checkpoint(&outcome.model, out)?;
    let model_hash = outcome.model.config().hash();
    outcome.stats.save(out.join("source_stats.ntar"), &model_hash)?;
    write_jsonl(&out.join("metrics.jsonl"), &outcome.log)?;
    let manifest = serde_json::json!({
        "config_hash": hash,
        "model_hash": model_hash,
        "train_samples": train.len(),
        "domain_map": outcome.domain_map,
        "crate_version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(last) = outcome.log.last() {
        eprintln!(
            "trained {} steps: loss {:.4} (activity {:.4}, domain {:.4}), checkpoint in {}",
            outcome.log.len(),
            last.loss,
            last.activity_loss,
            last.domain_loss,
            out.display()
        );
    }
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<Model<f32>> {
    load_checkpoint(ckpt).with_context(|| format!("loading checkpoint from {}", ckpt.display()))
}

fn load_stats(path: &Path) -> Result<SourceStatistics<f32>> {
    SourceStatistics::load(path).with_context(|| format!("loading statistics from {}", path.display()))
}

fn adapt(ckpt: &Path, stats: &Path, stream: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let hash = config_hash(&cfg);
    let samples = read_dataset(stream).with_context(|| format!("reading {}", stream.display()))?;
    let mut adaptor = Adaptor::new(load_model(ckpt)?, load_stats(stats)?, cfg.tta)?;
    let mut records = Vec::with_capacity(samples.len());
    let mut correct = 0usize;
    for s in &samples {
        let start = Instant::now();
        let step = adaptor.adapt_step(s)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        correct += usize::from(step.prediction == s.activity as usize);
        records.push(AdaptRecord {
            sample_id: &s.sample_id,
            prediction: step.prediction,
            latency_ms,
            loss: step.loss,
            drift: step.drift,
            config_hash: &hash,
        });
    }
    write_jsonl(out, &records)?;
    eprintln!(
        "adapted on {} samples, accuracy {:.4}, final drift {:.4}",
        samples.len(),
        correct as f64 / samples.len().max(1) as f64,
        adaptor.drift()
    );
    Ok(())
}

fn eval(ckpt: &Path, stats: Option<&Path>, data: &Path, config: Option<&Path>, frozen: bool, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let hash = config_hash(&cfg);
    let split = load_split(data, SplitName::Test)?;
    let model = load_model(ckpt)?;
    let stats = match (frozen, stats) {
        (true, _) => None,
        (false, Some(p)) => Some(load_stats(p)?),
        (false, None) => bail!("--stats is required unless --frozen is given"),
    };
    let sequences = if cfg.sequences.is_empty() {
        vec![SequenceSpec::new(SequenceMode::Ascending)]
    } else {
        cfg.sequences.clone()
    };
    fs::create_dir_all(out)?;
    let mut summaries = Vec::new();
    for seq in &sequences {
        let mut predictor: Box<dyn Predictor> = match &stats {
            None => Box::new(model.clone()),
            Some(s) => Box::new(Adaptor::new(model.clone(), s.clone(), cfg.tta.clone())?),
        };
        let metrics = evaluate(predictor.as_mut(), &split, seq)?;
        write_jsonl(&out.join(format!("{}.records.jsonl", seq.name)), &metrics.records)?;
        write_jsonl(
            &out.join(format!("{}.series.jsonl", seq.name)),
            metrics
                .rolling_f1
                .iter()
                .enumerate()
                .map(|(index, f1)| serde_json::json!({ "index": index, "rolling_f1": f1 })),
        )?;
        eprintln!("{}: accuracy {:.4}, macro-F1 {:.4}", seq.name, metrics.accuracy, metrics.macro_f1);
        summaries.push(SequenceSummary {
            sequence: &seq.name,
            samples: metrics.records.len(),
            accuracy: metrics.accuracy,
            macro_f1: metrics.macro_f1,
            config_hash: &hash,
        });
    }
    write_jsonl(&out.join("summary.jsonl"), &summaries)
}

fn bench(ckpt: &Path, stats: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let hash = config_hash(&cfg);
    let samples: Vec<CsiSample> = read_dataset(data).with_context(|| format!("reading {}", data.display()))?;
    let results = bench_inference(&load_model(ckpt)?, &load_stats(stats)?, &cfg.tta, &samples, &cfg.bench)?;
    let lines: Vec<serde_json::Value> = results
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("stats serialize");
            v["config_hash"] = hash.clone().into();
            v
        })
        .collect();
    match out {
        Some(path) => write_jsonl(path, &lines)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            for line in &lines {
                writeln!(stdout, "{line}")?;
            }
        }
    }
    Ok(())
}

fn exp(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let out = out.unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    let base = config.parent().unwrap_or(Path::new("."));
    let summary = run_experiment(&cfg, base, &out)?;
    for row in &summary.rows {
        eprintln!(
            "seed {} adv {} aug {} tta {} reset {} {}: accuracy {:.4}, macro-F1 {:.4}",
            row.seed, row.adversarial, row.augment, row.tta, row.reset, row.sequence, row.accuracy, row.macro_f1
        );
    }
    eprintln!("results in {} (config {})", out.display(), summary.manifest.config_hash);
    Ok(())
}
