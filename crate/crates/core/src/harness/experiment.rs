//! Declarative experiments: data, training, adaptation and evaluation from
//! one TOML file, with every artifact written to an output directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::evaluate::{evaluate, Predictor, SequenceMode, SequenceSpec};
use crate::augment::AugmentConfig;
use crate::data::{
    build_splits, read_dataset, synthesize_domain, DatasetSplit, DomainAssignment, PatternGenerator, SplitName,
    SyntheticDomainSpec,
};
use crate::error::{DattaError, Result};
use crate::model::{save_checkpoint, ModelConfig};
use crate::seed::derive_seed;
use crate::train::{train_dat, DatConfig};
use crate::tta::{AdaptationConfig, Adaptor};

/// Split placement of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub split: SplitName,
    /// Optional second split receiving the last `secondary_fraction` of the samples.
    #[serde(default)]
    pub secondary: Option<SplitName>,
    #[serde(default)]
    pub secondary_fraction: f64,
}

impl Placement {
    fn assignment(&self) -> DomainAssignment {
        match self.secondary {
            None => DomainAssignment::Single(self.split),
            Some(secondary) => DomainAssignment::Shared {
                primary: self.split,
                secondary,
                secondary_fraction: self.secondary_fraction,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    #[serde(flatten)]
    pub spec: SyntheticDomainSpec,
    #[serde(flatten)]
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDomain {
    pub domain: u16,
    #[serde(flatten)]
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic {
        #[serde(default)]
        generator: PatternGenerator,
        samples_per_domain: usize,
        domains: Vec<SyntheticDomain>,
    },
    File {
        path: PathBuf,
        domains: Vec<FileDomain>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        let source = |id: u16, gain: f32| SyntheticDomain {
            spec: SyntheticDomainSpec {
                subcarrier_response: (0..30).map(|f| if f >= 20 { gain } else { 1.0 }).collect(),
                noise_sigma: 0.02,
                ..SyntheticDomainSpec::clean(id, u64::from(id))
            },
            placement: Placement {
                split: SplitName::Train,
                secondary: Some(SplitName::Val),
                secondary_fraction: 0.2,
            },
        };
        let mut target = source(3, 1.0);
        target.spec.subcarrier_response = (0..30).map(|f| 1.0 + 0.03 * f as f32).collect();
        target.placement = Placement {
            split: SplitName::Test,
            secondary: Some(SplitName::ValTta),
            secondary_fraction: 0.2,
        };
        DataConfig::Synthetic {
            generator: PatternGenerator::default(),
            samples_per_domain: 100,
            domains: vec![source(0, 1.0), source(1, 1.6), source(2, 0.6), target],
        }
    }
}

impl DataConfig {
    /// Loads or synthesizes the samples and partitions them.
    pub fn load(&self, base: &Path) -> Result<BTreeMap<SplitName, DatasetSplit>> {
        match self {
            DataConfig::Synthetic {
                generator,
                samples_per_domain,
                domains,
            } => {
                let mut samples = Vec::new();
                let mut assignment = BTreeMap::new();
                for d in domains {
                    samples.extend(synthesize_domain(&d.spec, *samples_per_domain, generator, d.placement.split)?.samples);
                    assignment.insert(d.spec.domain_id, d.placement.assignment());
                }
                build_splits(samples, &assignment)
            }
            DataConfig::File { path, domains } => {
                let path = if path.is_relative() { base.join(path) } else { path.clone() };
                let assignment = domains.iter().map(|d| (d.domain, d.placement.assignment())).collect();
                build_splits(read_dataset(path)?, &assignment)
            }
        }
    }
}

/// Toggles whose cartesian product defines the result rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub adversarial: Vec<bool>,
    pub augment: Vec<bool>,
    pub tta: Vec<bool>,
    pub reset: Vec<bool>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            adversarial: vec![true],
            augment: vec![true],
            tta: vec![true],
            reset: vec![true],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub eval_split: SplitName,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: DatConfig,
    pub augment: AugmentConfig,
    pub tta: AdaptationConfig,
    pub sequences: Vec<SequenceSpec>,
    pub ablation: AblationGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            eval_split: SplitName::Test,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: DatConfig::default(),
            augment: AugmentConfig::default(),
            tta: AdaptationConfig::default(),
            sequences: vec![SequenceSpec::new(SequenceMode::Shuffled)],
            ablation: AblationGrid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DattaError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of the canonical JSON form of a config.
pub fn config_hash(config: &impl Serialize) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub adversarial: bool,
    pub augment: bool,
    pub tta: bool,
    pub reset: bool,
    pub sequence: String,
    pub samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl ResultRow {
    fn tag(&self) -> String {
        let flag = |b: bool, name: &str| if b { name.to_string() } else { format!("no{name}") };
        format!(
            "s{}_{}_{}_{}_{}_{}",
            self.seed,
            flag(self.adversarial, "dat"),
            flag(self.augment, "aug"),
            flag(self.tta, "tta"),
            flag(self.reset, "reset"),
            self.sequence
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub split_sizes: BTreeMap<String, usize>,
    /// Training seed and model config hash per trained variant.
    pub models: BTreeMap<String, ModelEntry>,
    pub crate_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub train_seed: u64,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub rows: Vec<ResultRow>,
    pub manifest: Manifest,
}

fn write_jsonl<S: Serialize>(path: &Path, items: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SeriesPoint {
    index: usize,
    rolling_f1: f64,
}

#[derive(Serialize)]
struct RecordLine<'a> {
    sample_id: &'a str,
    domain: u16,
    truth: usize,
    prediction: usize,
    loss: Option<f64>,
    drift: Option<f64>,
}

#[derive(Serialize)]
struct TimingLine<'a> {
    run: &'a str,
    sample_id: &'a str,
    latency_ms: f64,
}

/// Runs every seed and ablation variant of `cfg` and writes:
///
/// - `manifest.json`: config hash, seeds, split sizes, model hashes
/// - `results.jsonl`: one [`ResultRow`] per variant, seed and sequence
/// - `train/<variant>.jsonl`: training logs
/// - `models/<variant>/`: checkpoints and source statistics
/// - `records/<run>.jsonl`, `series/<run>.jsonl`: per-sample predictions and rolling F1
/// - `timings.jsonl`: wall-clock latencies, the only non-deterministic file
///
/// Relative data paths are resolved against `base`.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, out_dir: &Path) -> Result<ExperimentSummary> {
    if cfg.seeds.is_empty() || cfg.sequences.is_empty() {
        return Err(DattaError::Config("at least one seed and one sequence are required".into()));
    }
    let splits = cfg.data.load(base)?;
    let train = &splits[&SplitName::Train];
    let val = &splits[&SplitName::Val];
    let eval = &splits[&cfg.eval_split];
    if eval.is_empty() {
        return Err(DattaError::EmptyDataset);
    }
    for dir in ["train", "models", "records", "series"] {
        fs::create_dir_all(out_dir.join(dir))?;
    }

    let mut rows = Vec::new();
    let mut models = BTreeMap::new();
    let mut timings = Vec::new();
    for &seed in &cfg.seeds {
        for &adversarial in &cfg.ablation.adversarial {
            for &augment in &cfg.ablation.augment {
                let train_seed = derive_seed(seed, &[u64::from(adversarial), u64::from(augment)]);
                let dat = DatConfig {
                    rng_seed: train_seed,
                    ..if adversarial {
                        cfg.train.clone()
                    } else {
                        DatConfig {
                            alpha: 0.0,
                            beta: 0.0,
                            gamma: 0.0,
                            ..cfg.train.clone()
                        }
                    }
                };
                let aug = if augment {
                    AugmentConfig {
                        rng_seed: derive_seed(cfg.augment.rng_seed, &[seed]),
                        ..cfg.augment.clone()
                    }
                } else {
                    AugmentConfig::disabled()
                };
                let variant = format!("s{seed}_{}_{}", if adversarial { "dat" } else { "nodat" }, if augment { "aug" } else { "noaug" });
                log::info!("training {variant}");
                let outcome = train_dat::<f32>(train, Some(val), &cfg.model, &dat, &aug)?;
                write_jsonl(&out_dir.join("train").join(format!("{variant}.jsonl")), &outcome.log)?;
                let model_dir = out_dir.join("models").join(&variant);
                save_checkpoint(&outcome.model, &model_dir)?;
                outcome.stats.save(model_dir.join("source_stats.ntar"), &outcome.model.config().hash())?;
                models.insert(
                    variant,
                    ModelEntry {
                        train_seed,
                        model_hash: outcome.model.config().hash(),
                    },
                );

                for &tta in &cfg.ablation.tta {
                    for &reset in &cfg.ablation.reset {
                        for seq in &cfg.sequences {
                            let mut predictor: Box<dyn Predictor> = if tta {
                                let tcfg = AdaptationConfig {
                                    reset_rate: if reset { cfg.tta.reset_rate } else { 0.0 },
                                    rng_seed: derive_seed(cfg.tta.rng_seed, &[seed]),
                                    ..cfg.tta.clone()
                                };
                                Box::new(Adaptor::new(outcome.model.clone(), outcome.stats.clone(), tcfg)?)
                            } else {
                                Box::new(outcome.model.clone())
                            };
                            let metrics = evaluate(predictor.as_mut(), eval, seq)?;
                            let row = ResultRow {
                                seed,
                                adversarial,
                                augment,
                                tta,
                                reset,
                                sequence: seq.name.clone(),
                                samples: metrics.records.len(),
                                accuracy: metrics.accuracy,
                                macro_f1: metrics.macro_f1,
                            };
                            let tag = row.tag();
                            write_jsonl(
                                &out_dir.join("records").join(format!("{tag}.jsonl")),
                                metrics.records.iter().map(|r| RecordLine {
                                    sample_id: &r.sample_id,
                                    domain: r.domain,
                                    truth: r.truth,
                                    prediction: r.prediction,
                                    loss: r.loss,
                                    drift: r.drift,
                                }),
                            )?;
                            write_jsonl(
                                &out_dir.join("series").join(format!("{tag}.jsonl")),
                                metrics
                                    .rolling_f1
                                    .iter()
                                    .enumerate()
                                    .map(|(index, &rolling_f1)| SeriesPoint { index, rolling_f1 }),
                            )?;
                            timings.extend(metrics.records.iter().map(|r| (tag.clone(), r.sample_id.clone(), r.latency_ms)));
                            log::info!("{tag}: accuracy {:.4}, macro-F1 {:.4}", row.accuracy, row.macro_f1);
                            rows.push(row);
                        }
                    }
                }
            }
        }
    }

    write_jsonl(&out_dir.join("results.jsonl"), &rows)?;
    write_jsonl(
        &out_dir.join("timings.jsonl"),
        timings.iter().map(|(run, id, ms)| TimingLine {
            run,
            sample_id: id,
            latency_ms: *ms,
        }),
    )?;
    let manifest = Manifest {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        split_sizes: splits.iter().map(|(k, v)| (k.to_string(), v.len())).collect(),
        models,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentSummary { rows, manifest })
}
