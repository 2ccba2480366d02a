//! `patchlab train` — run the full training recipe and save the system.
//!
//! Data comes from the built-in synthetic task by default; `--dataset` (or
//! the `PATCHLAB_DATASET` environment variable) points at a binary image
//! file in 3x32x32 record format instead. `--epochs 0` writes raw
//! initialization checkpoints with a warning, which is occasionally useful
//! for plumbing tests.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use patchlab_core::cifar::load_cifar10_binary;
use patchlab_core::data::Split;
use patchlab_core::denoise::DenoiseParams;
use patchlab_core::experiments::{run_recipe, run_recipe_with_data, RecipeConfig, TrainedSystem};
use patchlab_core::neural::{desk_classifier_spec, desk_detector_spec, Network, TrainReport};
use patchlab_core::pipeline::{DetectorInput, Pipeline};
use patchlab_core::rng::RngState;

use crate::runs::{load_config, Failure, Phase, RunDir};
use crate::sysio::{save_system, DataSourceSpec, SystemSpec};
use crate::CommonArgs;

pub const DATASET_ENV: &str = "PATCHLAB_DATASET";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub seed: u64,
    /// Binary image records (1 label byte + 3x32x32 pixel bytes per record);
    /// omitted → the synthetic task in `recipe.synth`.
    pub dataset: Option<PathBuf>,
    pub recipe: RecipeConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            seed: 7,
            dataset: None,
            recipe: RecipeConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset file override (default: PATCHLAB_DATASET env, else synthetic).
    #[arg(long, value_name = "FILE")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    /// Margin threshold of the deployed two-stage rule.
    #[arg(long)]
    kappa: Option<f64>,
    /// Sets both classifier and detector epochs; 0 = init checkpoints only.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
}

#[derive(Serialize)]
struct TrainingSummary<'a> {
    classifier: &'a TrainReport,
    detector: &'a TrainReport,
    /// `(sigma, validation separation AUC)` per candidate.
    sigma_scores: &'a [(f64, f64)],
    chosen_sigma: f64,
    train_positives: usize,
    val_positives: usize,
    pool_success_rate: f64,
}

pub fn run(common: &CommonArgs, args: TrainArgs) -> Result<(), Failure> {
    let mut cfg: TrainRun = load_config(common.config.as_deref())?;
    if args.dataset.is_some() {
        cfg.dataset = args.dataset;
    } else if cfg.dataset.is_none() {
        if let Ok(env_path) = std::env::var(DATASET_ENV) {
            if !env_path.is_empty() {
                cfg.dataset = Some(PathBuf::from(env_path));
            }
        }
    }
    if let Some(v) = args.classes {
        cfg.recipe.classes = v;
    }
    if let Some(v) = args.kappa {
        cfg.recipe.kappa = v;
    }
    if let Some(v) = args.epochs {
        cfg.recipe.classifier.epochs = v;
        cfg.recipe.detector.epochs = v;
    }
    if let Some(v) = args.train_samples {
        cfg.recipe.train_samples = v;
    }
    if let Some(v) = args.val_samples {
        cfg.recipe.val_samples = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    cfg.recipe.validate().setup()?;

    // Load the dataset (if any) before creating the run directory: a missing
    // or malformed file is an input error.
    let data = match &cfg.dataset {
        None => None,
        Some(path) => {
            let ds = load_cifar10_binary(path).map_err(|e| {
                Failure::config(format!("cannot load dataset {}: {e}", path.display()))
            })?;
            if ds.num_classes != cfg.recipe.classes {
                return Err(Failure::config(format!(
                    "dataset has {} classes but the recipe expects {}",
                    ds.num_classes, cfg.recipe.classes
                )));
            }
            let need = cfg.recipe.train_samples + cfg.recipe.val_samples;
            if ds.len() < need {
                return Err(Failure::config(format!(
                    "dataset holds {} records but the recipe needs {need}",
                    ds.len()
                )));
            }
            let train = ds.slice(0..cfg.recipe.train_samples, Split::Train);
            let val = ds.slice(
                cfg.recipe.train_samples..need,
                Split::Validation,
            );
            Some((train, val))
        }
    };
    let source = match &cfg.dataset {
        None => DataSourceSpec::Synthetic {
            params: cfg.recipe.synth,
        },
        Some(path) => DataSourceSpec::Cifar10 { path: path.clone() },
    };

    let mut run = RunDir::create(common.out.as_deref(), "train", cfg.seed, common.jobs)?;
    run.echo_config(&cfg)?;
    let mut rng = RngState::new(cfg.seed);

    if cfg.recipe.classifier.epochs == 0 || cfg.recipe.detector.epochs == 0 {
        return init_only(run, &cfg, data.as_ref(), source, &mut rng);
    }

    let trained: TrainedSystem = match data {
        None => run_recipe(&cfg.recipe, &mut rng).run()?,
        Some((train, val)) => run_recipe_with_data(train, val, &cfg.recipe, &mut rng).run()?,
    };

    let spec = SystemSpec {
        classes: cfg.recipe.classes,
        kappa: cfg.recipe.kappa,
        denoise: DenoiseParams {
            sigma: trained.chosen_sigma,
            family: cfg.recipe.wavelet_family,
            levels: cfg.recipe.wavelet_levels,
        },
        data: source,
        trained: true,
    };
    save_system(&mut run, &trained.pipeline, &spec)?;
    let summary = TrainingSummary {
        classifier: &trained.classifier_report,
        detector: &trained.detector_report,
        sigma_scores: &trained.sigma_scores,
        chosen_sigma: trained.chosen_sigma,
        train_positives: trained.train_positives,
        val_positives: trained.val_positives,
        pool_success_rate: trained.pool_success_rate,
    };
    run.write_json("training.json", "report", &summary)?;

    println!(
        "classifier val accuracy {:.3}; detector val accuracy {:.3}",
        trained.classifier_report.final_val_accuracy, trained.detector_report.final_val_accuracy
    );
    for (sigma, auc) in &trained.sigma_scores {
        println!("  sigma {sigma:.3} -> separation AUC {auc:.4}");
    }
    println!(
        "chosen sigma {}; attack pool {} train / {} val positives (success rate {:.2})",
        trained.chosen_sigma,
        trained.train_positives,
        trained.val_positives,
        trained.pool_success_rate
    );
    run.finish()
}

/// `--epochs 0`: save raw He-initialized checkpoints and warn.
fn init_only(
    mut run: RunDir,
    cfg: &TrainRun,
    data: Option<&(patchlab_core::data::LabeledDataset, patchlab_core::data::LabeledDataset)>,
    source: DataSourceSpec,
    rng: &mut RngState,
) -> Result<(), Failure> {
    let side = match data {
        Some((train, _)) => train.images[0].height(),
        None => cfg.recipe.synth.height,
    };
    let classifier = Network::new(desk_classifier_spec(3, side, cfg.recipe.classes), rng).run()?;
    let detector = Network::new(desk_detector_spec(3, side), rng).run()?;
    let sigma = cfg
        .recipe
        .sigma_candidates
        .first()
        .copied()
        .unwrap_or_else(|| DenoiseParams::default().sigma);
    let params = DenoiseParams {
        sigma,
        family: cfg.recipe.wavelet_family,
        levels: cfg.recipe.wavelet_levels,
    };
    let pipeline = Pipeline::new(
        classifier,
        detector,
        DetectorInput::Residual(params),
        cfg.recipe.kappa,
    )
    .run()?;
    let spec = SystemSpec {
        classes: cfg.recipe.classes,
        kappa: cfg.recipe.kappa,
        denoise: params,
        data: source,
        trained: false,
    };
    save_system(&mut run, &pipeline, &spec)?;
    let warning = "epochs is 0: checkpoints are raw initializations; no sigma \
                   selection or detector fitting was performed";
    run.write_json(
        "training.json",
        "report",
        &serde_json::json!({ "warning": warning }),
    )?;
    eprintln!("warning: {warning}");
    run.finish()
}
