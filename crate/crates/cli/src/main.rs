use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nern::apps::{avg_activation_export, export_kernel_grid, pruning_sweep, weight_importance, write_sweep_csv};
use nern::embedding::{is_locally_monotone, similarity_profile, write_profile_csv, EmbeddingConfig};
use nern::error::NernError;
use nern::experiment::{
    load_original, load_predictor, permutation_for, run_experiment_matrix, save_original, save_predictor,
    train_nern, ExperimentConfig, OriginalManifest, PredictorManifest, SmoothnessMode,
};
use nern::optim::OptimizerKind;
use nern::predictor::{reconstruct_network, reconstruct_weights, KernelLayout, NernPredictor};
use nern::smoothness::{
    deserialize, map_hash, permutation_bit_cost, serialize, smoothness_loss, PermutationMap, PermutationVariant,
};
use nern::trainer::write_metrics_csv;
use nern::zoo::{build_desk_cnn, catalog_by_name, size_report, train_original, Dataset, OriginalNetwork};

#[derive(Parser)]
#[command(name = "nern", version, about = "Train and analyse neural representations of CNN weights")]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, env = "NERN_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the desk-scale original network on the synthetic task.
    TrainOriginal(TrainOriginalArgs),
    /// Compute a greedy kernel permutation for a trained original.
    Permute(PermuteArgs),
    /// Train a predictor for a trained original.
    TrainNern(TrainNernArgs),
    /// Write the network rebuilt from predicted kernels.
    Reconstruct(ReconstructArgs),
    /// Report original and reconstructed test accuracy.
    Eval(PairArgs),
    /// Print total MB, conv MB and conv share for an architecture.
    SizeReport {
        #[arg(long)]
        arch: String,
    },
    /// Print the storage overhead of a permutation variant.
    PermCost {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        variant: PermutationVariant,
    },
    /// Rank filters of one layer by relative reconstruction error.
    Importance(ImportanceArgs),
    /// Reconstructed accuracy under increasing predictor pruning.
    PruneSweep(PruneSweepArgs),
    /// Cosine-similarity profile of positional embeddings.
    EmbedProfile(EmbedProfileArgs),
    /// Tile kernels of one layer into a PGM image.
    ExportKernels(ExportKernelsArgs),
    /// Average activation maps of selected filters as PGM images.
    ExportActivations(ExportActivationsArgs),
    /// Run several experiment configs over several seeds.
    Matrix(MatrixArgs),
}

#[derive(Args)]
struct TrainOriginalArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Smoothness regularization weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct PermuteArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    variant: PermutationVariant,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainNernArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Permutation file; computed from the config's permuted mode when absent.
    #[arg(long)]
    permutation: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f32>,
    /// Standard-normal inputs instead of task images.
    #[arg(long)]
    noise: bool,
    #[arg(long)]
    optimizer: Option<String>,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    predictor: PathBuf,
    #[arg(long)]
    permutation: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportanceArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Index among the predicted conv layers.
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PruneSweepArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    factors: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedProfileArgs {
    #[arg(long, default_value_t = nern::embedding::SMOOTH_BASE)]
    base: f64,
    #[arg(long, default_value_t = nern::embedding::DEFAULT_FREQUENCIES)]
    frequencies: usize,
    #[arg(long, default_value_t = 31)]
    anchor: usize,
    #[arg(long, default_value_t = 64)]
    range: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportKernelsArgs {
    #[arg(long)]
    original: PathBuf,
    /// Export predicted kernels instead of the original ones.
    #[arg(long)]
    predictor: Option<PathBuf>,
    #[arg(long)]
    permutation: Option<PathBuf>,
    /// Index among the predicted conv layers.
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportActivationsArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    predictor: Option<PathBuf>,
    #[arg(long)]
    permutation: Option<PathBuf>,
    /// Conv layer index in the catalog.
    #[arg(long)]
    layer: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    filters: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    probe: usize,
    /// Output directory; one `filter{f}.pgm` per filter.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatrixArgs {
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<NernError>().map_or("error", NernError::kind);
            let line = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read_original(dir: &Path) -> Result<(OriginalNetwork, OriginalManifest, Dataset)> {
    let (net, manifest) =
        load_original(dir).with_context(|| format!("loading original checkpoint {}", dir.display()))?;
    let data = Dataset::synthetic_bars(manifest.data_seed);
    Ok((net, manifest, data))
}

fn read_permutation(path: Option<&Path>) -> Result<PermutationMap> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading permutation {}", p.display()))?;
            Ok(deserialize(&bytes)?)
        }
        None => Ok(PermutationMap::none()),
    }
}

struct Pair {
    net: OriginalNetwork,
    original: OriginalManifest,
    data: Dataset,
    predictor: NernPredictor,
    manifest: PredictorManifest,
    map: PermutationMap,
}

/// Loads a predictor with the original and permutation it was trained on,
/// refusing any mismatch.
fn read_pair(original: &Path, predictor: &Path, permutation: Option<&Path>) -> Result<Pair> {
    let (net, om, data) = read_original(original)?;
    let (predictor, manifest) =
        load_predictor(predictor).with_context(|| format!("loading predictor checkpoint {}", predictor.display()))?;
    manifest.check_original(&om)?;
    let map = read_permutation(permutation)?;
    manifest.check_permutation(&map)?;
    Ok(Pair {
        net,
        original: om,
        data,
        predictor,
        manifest,
        map,
    })
}

fn parse_optimizer(name: &str) -> Result<OptimizerKind> {
    Ok(match name {
        "adam" => OptimizerKind::Adam,
        "adam_lookahead" => OptimizerKind::AdamLookahead,
        "ranger" => OptimizerKind::Ranger,
        other => bail!(NernError::Config(format!(
            "unknown optimizer `{other}` (adam, adam_lookahead, ranger)"
        ))),
    })
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::TrainOriginal(a) => {
            let mut cfg = load_config(a.config.as_deref())?;
            cfg.original.seed = seed;
            if let Some(l) = a.lambda {
                cfg.smoothness = if l > 0.0 {
                    SmoothnessMode::Regularized { lambda: l }
                } else {
                    SmoothnessMode::None
                };
            }
            if let Some(e) = a.epochs {
                cfg.original.epochs = e;
            }
            if let Some(d) = a.data_seed {
                cfg.original.data_seed = d;
            }
            cfg.validate()?;
            let data = Dataset::synthetic_bars(cfg.original.data_seed);
            let train = cfg.original_train_config();
            let (net, report) = train_original(build_desk_cnn(seed), &data, &train)?;
            fs::create_dir_all(&a.out)?;
            let manifest = OriginalManifest::new(&net, cfg.original.data_seed, train, Some(report.clone()));
            save_original(&a.out, &net, &manifest)?;
            println!(
                "test_accuracy {:.4} smoothness {:.6} config_hash {}",
                report.test_accuracy, report.smoothness, manifest.config_hash
            );
        }
        Command::Permute(a) => {
            let (net, _, _) = read_original(&a.original)?;
            let mut cfg = ExperimentConfig::default();
            cfg.smoothness = SmoothnessMode::Permuted { variant: a.variant };
            cfg.validate()?;
            let map = permutation_for(&cfg, &net)?;
            let weights: Vec<_> = net.predictable_weights().into_iter().cloned().collect();
            let before = smoothness_loss(&weights);
            let after = smoothness_loss(&map.permute(&weights)?);
            fs::write(&a.out, serialize(&map)?)?;
            println!("smoothness {before:.6} -> {after:.6} hash {}", map_hash(&map)?);
        }
        Command::TrainNern(a) => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(h) = a.hidden {
                cfg.hidden = h;
            }
            if let Some(i) = a.iterations {
                cfg.train.iterations = i;
            }
            if let Some(x) = a.alpha {
                cfg.train.alpha = x;
            }
            if let Some(x) = a.beta {
                cfg.train.beta = x;
            }
            if let Some(x) = a.lr {
                cfg.train.lr = x;
            }
            if a.noise {
                cfg.train.noise_inputs = true;
            }
            if let Some(o) = &a.optimizer {
                cfg.train.optimizer = parse_optimizer(o)?;
            }
            cfg.train.seed = seed;
            cfg.validate()?;
            let (net, om, data) = read_original(&a.original)?;
            let map = match &a.permutation {
                Some(p) => read_permutation(Some(p))?,
                None => permutation_for(&cfg, &net)?,
            };
            let run = train_nern(&cfg, &net, &data, &map, seed)?;
            fs::create_dir_all(&a.out)?;
            let manifest = PredictorManifest::new(
                &om,
                run.predictor.config,
                cfg.train.clone(),
                &map,
                run.metrics.last().cloned(),
            )?;
            save_predictor(&a.out, &run.predictor, &manifest)?;
            write_metrics_csv(&run.metrics, BufWriter::new(File::create(a.out.join("metrics.csv"))?))?;
            if a.permutation.is_none() && map.variant != PermutationVariant::None {
                fs::write(a.out.join("permutation.nrp"), serialize(&map)?)?;
            }
            println!(
                "reconstructed_accuracy {:.4} params {} config_hash {}",
                run.accuracy,
                run.predictor.param_count(),
                manifest.config_hash
            );
        }
        Command::Reconstruct(a) => {
            let p = read_pair(&a.pair.original, &a.pair.predictor, a.pair.permutation.as_deref())?;
            let rebuilt = reconstruct_network(&p.predictor, &p.net, &p.map)?;
            fs::create_dir_all(&a.out)?;
            // Same data and training record as the original, stamped with the predictor's hash.
            let manifest = OriginalManifest {
                config_hash: p.manifest.config_hash.clone(),
                report: None,
                ..p.original.clone()
            };
            save_original(&a.out, &rebuilt, &manifest)?;
            println!("wrote {}", a.out.display());
        }
        Command::Eval(a) => {
            let p = read_pair(&a.original, &a.predictor, a.permutation.as_deref())?;
            let rebuilt = reconstruct_network(&p.predictor, &p.net, &p.map)?;
            let orig = p.net.accuracy(&p.data.test_x, &p.data.test_y)?;
            let rec = rebuilt.accuracy(&p.data.test_x, &p.data.test_y)?;
            println!("original_accuracy {orig:.4} reconstructed_accuracy {rec:.4}");
        }
        Command::SizeReport { arch } => {
            println!("{}", size_report(&catalog_by_name(&arch)?));
        }
        Command::PermCost { arch, variant } => {
            if variant == PermutationVariant::None {
                bail!(NernError::InvalidArgument("variant must be in_filter or cross_filter".into()));
            }
            println!("{}", permutation_bit_cost(&catalog_by_name(&arch)?, variant));
        }
        Command::Importance(a) => {
            let p = read_pair(&a.pair.original, &a.pair.predictor, a.pair.permutation.as_deref())?;
            let layout = KernelLayout::new(&p.net.catalog, &p.map)?;
            let predicted = reconstruct_weights(&p.predictor, &layout)?;
            let originals = p.net.predictable_weights();
            let (w, w_hat) = match (originals.get(a.layer), predicted.get(a.layer)) {
                (Some(w), Some(h)) => (*w, h),
                _ => bail!(NernError::InvalidArgument(format!("no predicted layer {}", a.layer))),
            };
            weight_importance(w, w_hat, a.layer)?.write_csv(output(a.out.as_deref())?)?;
        }
        Command::PruneSweep(a) => {
            let p = read_pair(&a.pair.original, &a.pair.predictor, a.pair.permutation.as_deref())?;
            let rows = pruning_sweep(&p.predictor, &p.net, &p.map, &a.factors, &p.data.test_x, &p.data.test_y)?;
            write_sweep_csv(&rows, output(a.out.as_deref())?)?;
        }
        Command::EmbedProfile(a) => {
            let cfg = EmbeddingConfig::with_base(a.base, a.frequencies)?;
            let profile = similarity_profile(a.anchor, a.range, &cfg)?;
            write_profile_csv(&profile, output(a.out.as_deref())?)?;
            eprintln!("locally_monotone {}", is_locally_monotone(&profile, a.anchor, 5));
        }
        Command::ExportKernels(a) => {
            let (net, weights) = match &a.predictor {
                Some(pdir) => {
                    let p = read_pair(&a.original, pdir, a.permutation.as_deref())?;
                    let rebuilt = reconstruct_network(&p.predictor, &p.net, &p.map)?;
                    let w: Vec<_> = rebuilt.predictable_weights().into_iter().cloned().collect();
                    (p.net, w)
                }
                None => {
                    let (net, _, _) = read_original(&a.original)?;
                    let w: Vec<_> = net.predictable_weights().into_iter().cloned().collect();
                    (net, w)
                }
            };
            let w = weights.get(a.layer).ok_or_else(|| {
                NernError::InvalidArgument(format!(
                    "no predicted layer {} in {}",
                    a.layer, net.catalog.name
                ))
            })?;
            export_kernel_grid(w, a.channel, a.rows, a.cols)?.save(&a.out)?;
        }
        Command::ExportActivations(a) => {
            let (net, data) = match &a.predictor {
                Some(pdir) => {
                    let p = read_pair(&a.original, pdir, a.permutation.as_deref())?;
                    (reconstruct_network(&p.predictor, &p.net, &p.map)?, p.data)
                }
                None => {
                    let (net, _, data) = read_original(&a.original)?;
                    (net, data)
                }
            };
            let count = a.probe.min(data.test_y.len());
            let probe = nern::zoo::gather(&data.test_x, &(0..count).collect::<Vec<_>>());
            let images = avg_activation_export(&net, a.layer, &a.filters, &probe)?;
            fs::create_dir_all(&a.out)?;
            for (f, img) in a.filters.iter().zip(&images) {
                img.save(a.out.join(format!("filter{f}.pgm")))?;
            }
        }
        Command::Matrix(a) => {
            let configs = a
                .configs
                .iter()
                .map(|p| ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let report = run_experiment_matrix(&configs, &a.seeds);
            report.write_csv(output(a.out.as_deref())?)?;
            for f in &report.failures {
                eprintln!("{}", serde_json::json!({ "failed": f.config, "seed": f.seed, "message": f.error }));
            }
        }
    }
    Ok(())
}
