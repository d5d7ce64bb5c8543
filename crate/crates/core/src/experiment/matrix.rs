use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::predictor::{init_nern, KernelLayout, NernPredictor, PredictorConfig, WeightStats};
use crate::smoothness::{compute_permutations, smoothness_loss, PermutationMap, PermutationVariant};
use crate::trainer::{MetricsRow, Trainer};
use crate::zoo::{build_desk_cnn, train_original, Dataset, OriginalNetwork, OriginalTrainReport};

use super::{ExperimentConfig, OriginalManifest};

/// Normal-approximation 95% half-width multiplier.
pub const CI_Z: f64 = 1.96;

#[derive(Clone, Debug)]
pub struct PreparedOriginal {
    pub net: OriginalNetwork,
    pub report: OriginalTrainReport,
    pub manifest: OriginalManifest,
}

pub fn prepare_original(cfg: &ExperimentConfig, data: &Dataset) -> Result<PreparedOriginal> {
    let train = cfg.original_train_config();
    let (net, report) = train_original(build_desk_cnn(cfg.original.seed), data, &train)?;
    let manifest = OriginalManifest::new(&net, cfg.original.data_seed, train, Some(report.clone()));
    Ok(PreparedOriginal { net, report, manifest })
}

pub fn permutation_for(cfg: &ExperimentConfig, net: &OriginalNetwork) -> Result<PermutationMap> {
    match cfg.permutation_variant() {
        PermutationVariant::None => Ok(PermutationMap::none()),
        v => compute_permutations(net, v),
    }
}

#[derive(Clone, Debug)]
pub struct NernRun {
    pub predictor: NernPredictor,
    pub metrics: Vec<MetricsRow>,
    pub accuracy: f64,
}

/// Trains one predictor against `original`; `seed` drives init and sampling.
pub fn train_nern(
    cfg: &ExperimentConfig,
    original: &OriginalNetwork,
    data: &Dataset,
    map: &PermutationMap,
    seed: u64,
) -> Result<NernRun> {
    let layout = KernelLayout::new(&original.catalog, map)?;
    let pcfg = PredictorConfig::new(cfg.embedding_config()?, cfg.hidden, original.catalog.prediction_kernel());
    let stats = WeightStats::of(original.predictable_weights());
    let predictor = init_nern(pcfg, &layout, stats, seed)?;
    let mut train = cfg.train.clone();
    train.seed = seed;
    let mut trainer = Trainer::new(train, original, data, layout, predictor)?;
    trainer.run()?;
    let accuracy = trainer.evaluate()?;
    let metrics = trainer.metrics().to_vec();
    Ok(NernRun {
        predictor: trainer.into_predictor(),
        metrics,
        accuracy,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub original_accuracy: f64,
    pub original_smoothness: f64,
    pub reconstructed_accuracy: f64,
    pub final_recon_loss: f64,
}

impl RunOutcome {
    fn metrics(&self) -> [(&'static str, f64); 4] {
        [
            ("original_accuracy", self.original_accuracy),
            ("original_smoothness", self.original_smoothness),
            ("reconstructed_accuracy", self.reconstructed_accuracy),
            ("final_recon_loss", self.final_recon_loss),
        ]
    }
}

pub fn run_with_original(
    cfg: &ExperimentConfig,
    original: &PreparedOriginal,
    data: &Dataset,
    seed: u64,
) -> Result<RunOutcome> {
    let map = permutation_for(cfg, &original.net)?;
    let run = train_nern(cfg, &original.net, data, &map, seed)?;
    let weights: Vec<_> = original.net.predictable_weights().into_iter().cloned().collect();
    Ok(RunOutcome {
        seed,
        original_accuracy: original.report.test_accuracy,
        original_smoothness: smoothness_loss(&weights),
        reconstructed_accuracy: run.accuracy,
        final_recon_loss: run.metrics.last().map_or(f64::NAN, |m| m.recon_loss),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = Dataset::synthetic_bars(cfg.original.data_seed);
    let original = prepare_original(cfg, &data)?;
    run_with_original(cfg, &original, &data, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// `1.96 * s / sqrt(n)` with the sample standard deviation; absent for one value.
    pub ci95: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ci95 = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        CI_Z * var.sqrt() / (n as f64).sqrt()
    });
    Some(Summary { n, mean, ci95 })
}

#[derive(Clone, Debug, Serialize)]
pub struct RunFailure {
    pub config: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixRow {
    pub config: String,
    pub config_hash: String,
    pub metric: String,
    pub summary: Summary,
    pub failures: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    pub runs: Vec<(String, RunOutcome)>,
    pub failures: Vec<RunFailure>,
}

impl MatrixReport {
    pub fn get(&self, config: &str, metric: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.config == config && r.metric == metric)
    }

    /// The `ci95` column only appears when some cell aggregates several seeds.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let with_ci = self.rows.iter().any(|r| r.summary.n > 1);
        write!(out, "config,config_hash,metric,n,mean")?;
        if with_ci {
            write!(out, ",ci95")?;
        }
        writeln!(out, ",failures")?;
        for r in &self.rows {
            write!(out, "{},{},{},{},{}", r.config, r.config_hash, r.metric, r.summary.n, r.summary.mean)?;
            if with_ci {
                match r.summary.ci95 {
                    Some(ci) => write!(out, ",{ci}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out, ",{}", r.failures)?;
        }
        Ok(())
    }
}

/// Runs every config over every seed. A failing run is recorded and skipped;
/// originals are shared between configs that train them identically.
pub fn run_experiment_matrix(configs: &[ExperimentConfig], seeds: &[u64]) -> MatrixReport {
    let mut report = MatrixReport::default();
    let mut originals: HashMap<String, std::result::Result<(Dataset, PreparedOriginal), String>> = HashMap::new();
    for cfg in configs {
        let fail = |report: &mut MatrixReport, seed: u64, error: String| {
            report.failures.push(RunFailure {
                config: cfg.name.clone(),
                seed,
                error,
            })
        };
        if let Err(e) = cfg.validate() {
            for &seed in seeds {
                fail(&mut report, seed, e.to_string());
            }
            continue;
        }
        let key = super::config_hash(&(cfg.original.data_seed, cfg.original_train_config()));
        let prepared = originals.entry(key).or_insert_with(|| {
            let data = Dataset::synthetic_bars(cfg.original.data_seed);
            prepare_original(cfg, &data).map(|p| (data, p)).map_err(|e| e.to_string())
        });
        let mut outcomes = Vec::new();
        let mut failures = 0;
        for &seed in seeds {
            let result = match prepared {
                Ok((data, original)) => run_with_original(cfg, original, data, seed).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            };
            match result {
                Ok(o) => outcomes.push(o),
                Err(e) => {
                    failures += 1;
                    fail(&mut report, seed, e);
                }
            }
        }
        if let Some(first) = outcomes.first() {
            for (i, (metric, _)) in first.metrics().iter().enumerate() {
                let values: Vec<f64> = outcomes.iter().map(|o| o.metrics()[i].1).collect();
                report.rows.push(MatrixRow {
                    config: cfg.name.clone(),
                    config_hash: cfg.hash(),
                    metric: metric.to_string(),
                    summary: summarize(&values).expect("non-empty"),
                    failures,
                });
            }
        }
        report.runs.extend(outcomes.into_iter().map(|o| (cfg.name.clone(), o)));
    }
    report
}
