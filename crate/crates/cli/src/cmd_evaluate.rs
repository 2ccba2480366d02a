//! `patchlab evaluate ...` — aggregate experiments into tables and
//! plot-ready CSVs, either from fresh attacks against a trained system or
//! (for the epsilon sweep) from stored attack manifests.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use patchlab_core::attacks::{masked_pgd, PgdConfig};
use patchlab_core::data::{random_patch_mask, synth_dataset_with};
use patchlab_core::experiments::{
    cw_compare, epsilon_sweep, kappa_sweep, residual_concentration, residual_heatmap,
    ConcentrationConfig, CwCompareConfig, EpsilonSweepConfig, KappaSweepConfig,
};
use patchlab_core::metrics::{metrics_report, MetricsReport, ScoredBatch};
use patchlab_core::neural::argmax;
use patchlab_core::rng::RngState;

use crate::manifest::{AttackManifest, MaskRecord};
use crate::runs::{load_config, write_csv, Failure, Phase, RunDir};
use crate::sysio::{load_system, LoadedSystem};
use crate::CommonArgs;

fn require_model(model_dir: &Option<PathBuf>) -> Result<LoadedSystem, Failure> {
    let dir = model_dir.as_ref().ok_or_else(|| {
        Failure::config("a trained system is required: pass --model-dir or set model_dir")
    })?;
    let sys = load_system(dir)?;
    sys.require_trained()?;
    Ok(sys)
}

// ---------------------------------------------------------------------------
// epsilon-sweep

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSweepRun {
    pub seed: u64,
    pub model_dir: Option<PathBuf>,
    /// Stored attack manifests to aggregate instead of crafting fresh
    /// attacks; each becomes one table row.
    pub manifests: Vec<PathBuf>,
    pub sweep: EpsilonSweepConfig,
}

impl Default for EpsilonSweepRun {
    fn default() -> Self {
        EpsilonSweepRun {
            seed: 31,
            model_dir: None,
            manifests: Vec::new(),
            sweep: EpsilonSweepConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct EpsilonSweepArgs {
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Aggregate these stored attack manifests (repeatable) instead of
    /// crafting fresh attacks.
    #[arg(long = "manifest", value_name = "FILE")]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    masks_per_image: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated attack strengths.
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct SweepRow {
    source: String,
    epsilon: Option<f64>,
    attacks: usize,
    successes: usize,
    success_rate: f64,
    ours: MetricsReport,
    baseline: MetricsReport,
}

const SWEEP_HEADER: [&str; 10] = [
    "epsilon",
    "attacks",
    "successes",
    "success_rate",
    "ours_roc_auc",
    "ours_average_precision",
    "ours_fpr_at_tpr95",
    "baseline_roc_auc",
    "baseline_average_precision",
    "baseline_fpr_at_tpr95",
];

fn sweep_csv_row(
    epsilon: Option<f64>,
    attacks: usize,
    successes: usize,
    rate: f64,
    ours: &MetricsReport,
    baseline: &MetricsReport,
) -> Vec<f64> {
    vec![
        epsilon.unwrap_or(f64::NAN),
        attacks as f64,
        successes as f64,
        rate,
        ours.roc_auc,
        ours.average_precision,
        ours.fpr_at_tpr95,
        baseline.roc_auc,
        baseline.average_precision,
        baseline.fpr_at_tpr95,
    ]
}

/// Detection metrics over one stored manifest's scores.
fn manifest_row(path: &PathBuf) -> Result<SweepRow, Failure> {
    let m = AttackManifest::load(path)?;
    let positives: Vec<_> = m.samples.iter().filter(|s| s.success).collect();
    if positives.is_empty() {
        return Err(Failure::config(format!(
            "manifest {} has an empty positive class (zero successful attacks); \
             nothing to evaluate",
            path.display()
        )));
    }
    if m.negatives.is_empty() {
        return Err(Failure::config(format!(
            "manifest {} records no benign negatives",
            path.display()
        )));
    }
    let mut ours_scores = Vec::new();
    let mut base_scores = Vec::new();
    let mut labels = Vec::new();
    for n in &m.negatives {
        ours_scores.push(n.ours_score);
        base_scores.push(n.baseline_score);
        labels.push(false);
    }
    for p in &positives {
        ours_scores.push(p.ours_score);
        base_scores.push(p.baseline_score);
        labels.push(true);
    }
    let ours = metrics_report(&ScoredBatch::new(ours_scores, labels.clone()).setup()?).setup()?;
    let baseline = metrics_report(&ScoredBatch::new(base_scores, labels).setup()?).setup()?;
    Ok(SweepRow {
        source: path.display().to_string(),
        epsilon: positives[0].epsilon,
        attacks: m.summary.attacks,
        successes: m.summary.successes,
        success_rate: m.summary.success_rate,
        ours,
        baseline,
    })
}

pub fn run_epsilon_sweep(common: &CommonArgs, args: EpsilonSweepArgs) -> Result<(), Failure> {
    let mut cfg: EpsilonSweepRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if !args.manifests.is_empty() {
        cfg.manifests = args.manifests;
    }
    if let Some(v) = args.images {
        cfg.sweep.images = v;
    }
    if let Some(v) = args.masks_per_image {
        cfg.sweep.masks_per_image = v;
    }
    if let Some(v) = args.steps {
        cfg.sweep.steps = v;
    }
    if let Some(v) = args.epsilons {
        cfg.sweep.epsilons = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }

    if !cfg.manifests.is_empty() {
        // Aggregate stored manifests; the model itself is not needed because
        // manifests carry exact scores.
        let rows: Vec<SweepRow> = cfg
            .manifests
            .iter()
            .map(manifest_row)
            .collect::<Result<_, _>>()?;
        let mut run = RunDir::create(common.out.as_deref(), "evaluate-sweep", cfg.seed, common.jobs)?;
        run.echo_config(&cfg)?;
        run.write_json("sweep.json", "table", &rows)?;
        let csv_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                sweep_csv_row(
                    r.epsilon,
                    r.attacks,
                    r.successes,
                    r.success_rate,
                    &r.ours,
                    &r.baseline,
                )
            })
            .collect();
        write_csv(&mut run, "sweep.csv", "table", &SWEEP_HEADER, &csv_rows)?;
        for r in &rows {
            println!(
                "{}: {}/{} successes, ours AUC {:.4}, baseline AUC {:.4}",
                r.source, r.successes, r.attacks, r.ours.roc_auc, r.baseline.roc_auc
            );
        }
        return run.finish();
    }

    let sys = require_model(&cfg.model_dir)?;
    cfg.sweep.synth = sys.synth_params()?;
    cfg.sweep.classes = sys.spec.classes;
    cfg.sweep.validate().setup()?;
    let mut run = RunDir::create(common.out.as_deref(), "evaluate-sweep", cfg.seed, common.jobs)?;
    run.echo_config(&cfg)?;
    let mut rng = RngState::new(cfg.seed);
    let report = epsilon_sweep(&sys.pipeline, &cfg.sweep, &mut rng).run()?;
    run.write_json("sweep.json", "table", &report)?;
    let csv_rows: Vec<Vec<f64>> = report
        .rows
        .iter()
        .map(|r| {
            sweep_csv_row(
                Some(r.epsilon),
                r.attacks,
                r.successes,
                r.success_rate,
                &r.ours,
                &r.baseline,
            )
        })
        .collect();
    write_csv(&mut run, "sweep.csv", "table", &SWEEP_HEADER, &csv_rows)?;
    for r in &report.rows {
        println!(
            "epsilon {:.4}: {}/{} successes ({:.1}%), ours AUC {:.4}, baseline AUC {:.4}",
            r.epsilon,
            r.successes,
            r.attacks,
            100.0 * r.success_rate,
            r.ours.roc_auc,
            r.baseline.roc_auc
        );
    }
    run.finish()
}

// ---------------------------------------------------------------------------
// cw-compare

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwCompareRun {
    pub seed: u64,
    pub model_dir: Option<PathBuf>,
    pub compare: CwCompareConfig,
}

impl Default for CwCompareRun {
    fn default() -> Self {
        CwCompareRun {
            seed: 37,
            model_dir: None,
            compare: CwCompareConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct CwCompareArgs {
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Deployment margin threshold used to judge detection.
    #[arg(long)]
    kappa_det: Option<f64>,
    /// Confidence margin demanded by the attack itself.
    #[arg(long)]
    kappa_adv: Option<f64>,
}

pub fn run_cw_compare(common: &CommonArgs, args: CwCompareArgs) -> Result<(), Failure> {
    let mut cfg: CwCompareRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if let Some(v) = args.samples {
        cfg.compare.samples = v;
    }
    if let Some(v) = args.iterations {
        cfg.compare.iterations = v;
    }
    if let Some(v) = args.kappa_det {
        cfg.compare.kappa_det = v;
    }
    if let Some(v) = args.kappa_adv {
        cfg.compare.kappa_adv = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }

    let sys = require_model(&cfg.model_dir)?;
    cfg.compare.synth = sys.synth_params()?;
    cfg.compare.classes = sys.spec.classes;
    cfg.compare.validate().setup()?;
    let mut run = RunDir::create(common.out.as_deref(), "evaluate-cw", cfg.seed, common.jobs)?;
    run.echo_config(&cfg)?;
    let mut rng = RngState::new(cfg.seed);
    let report = cw_compare(&sys.pipeline, &cfg.compare, &mut rng).run()?;
    run.write_json("cw_compare.json", "table", &report)?;
    let rows = [(0.0, &report.restricted), (1.0, &report.unrestricted)]
        .iter()
        .map(|(tag, arm)| {
            vec![
                *tag,
                arm.attacks as f64,
                arm.successes as f64,
                arm.success_rate,
                arm.flagged as f64,
                arm.detection_accuracy,
                arm.mean_l2,
            ]
        })
        .collect::<Vec<_>>();
    write_csv(
        &mut run,
        "cw_compare.csv",
        "table",
        &[
            "unrestricted",
            "attacks",
            "successes",
            "success_rate",
            "flagged",
            "detection_accuracy",
            "mean_l2",
        ],
        &rows,
    )?;
    println!(
        "restricted:   {}/{} successes, detection accuracy {:.4}, mean L2 {:.4}",
        report.restricted.successes,
        report.restricted.attacks,
        report.restricted.detection_accuracy,
        report.restricted.mean_l2
    );
    println!(
        "unrestricted: {}/{} successes, detection accuracy {:.4}, mean L2 {:.4}",
        report.unrestricted.successes,
        report.unrestricted.attacks,
        report.unrestricted.detection_accuracy,
        report.unrestricted.mean_l2
    );
    run.finish()
}

// ---------------------------------------------------------------------------
// heatmap

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapRun {
    pub seed: u64,
    pub model_dir: Option<PathBuf>,
    pub concentration: ConcentrationConfig,
}

impl Default for HeatmapRun {
    fn default() -> Self {
        HeatmapRun {
            seed: 41,
            model_dir: None,
            concentration: ConcentrationConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Successful attacks to average the concentration statistics over.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
}

pub fn run_heatmap(common: &CommonArgs, args: HeatmapArgs) -> Result<(), Failure> {
    let mut cfg: HeatmapRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if let Some(v) = args.samples {
        cfg.concentration.samples = v;
    }
    if let Some(v) = args.epsilon {
        cfg.concentration.epsilon = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }

    let sys = require_model(&cfg.model_dir)?;
    cfg.concentration.synth = sys.synth_params()?;
    cfg.concentration.classes = sys.spec.classes;
    let mut run = RunDir::create(common.out.as_deref(), "evaluate-heatmap", cfg.seed, common.jobs)?;
    run.echo_config(&cfg)?;
    let mut rng = RngState::new(cfg.seed);
    let params = sys.spec.denoise;

    let report = residual_concentration(&sys.pipeline, &params, &cfg.concentration, &mut rng)
        .run()?;
    run.write_json("concentration.json", "report", &report)?;
    let ratio_rows: Vec<Vec<f64>> = report
        .per_sample_ratio
        .iter()
        .enumerate()
        .map(|(i, r)| vec![i as f64, *r])
        .collect();
    write_csv(
        &mut run,
        "per_sample_ratio.csv",
        "table",
        &["sample", "ratio"],
        &ratio_rows,
    )?;

    // One example pair of residual-energy maps for plotting.
    let synth = cfg.concentration.synth;
    let classes = cfg.concentration.classes;
    let pgd = PgdConfig::new(cfg.concentration.epsilon, cfg.concentration.steps);
    let mut example = None;
    'hunt: for _ in 0..100 {
        let ds = synth_dataset_with(&mut rng, classes, classes, &synth);
        for (x, &y) in ds.images.iter().zip(&ds.labels) {
            let logits = sys.pipeline.class_logits(x).run()?;
            if argmax(logits.as_slice().expect("contiguous logits")) != y {
                continue;
            }
            let mask = random_patch_mask(
                &mut rng,
                cfg.concentration.patch_side_min,
                cfg.concentration.patch_side_max,
                x.height(),
                x.width(),
                true,
            )
            .run()?;
            let out = masked_pgd(&sys.pipeline.classifier, x, y, &mask, &pgd, &mut rng).run()?;
            if out.success {
                example = Some((x.clone(), out, y, mask));
                break 'hunt;
            }
        }
    }
    let (clean, out, label, mask) =
        example.ok_or_else(|| Failure::runtime("no successful example attack found"))?;
    let clean_map = residual_heatmap(&clean, &params).run()?;
    let adv_map = residual_heatmap(&out.x_adv, &params).run()?;
    patchlab_core::csvgrid::write_grid(&run.file("clean_residual.csv"), &clean_map).run()?;
    run.note("clean_residual.csv", "heatmap");
    patchlab_core::csvgrid::write_grid(&run.file("adversarial_residual.csv"), &adv_map).run()?;
    run.note("adversarial_residual.csv", "heatmap");
    run.write_json(
        "example.json",
        "report",
        &serde_json::json!({
            "true_label": label,
            "mask": MaskRecord::from(&mask),
            "l2": out.l2,
            "linf": out.linf,
        }),
    )?;

    println!(
        "residual concentration over {} samples: adversarial {:.6} vs clean {:.6} (ratio {:.2})",
        report.samples, report.adversarial_in_patch, report.clean_in_patch, report.ratio
    );
    run.finish()
}

// ---------------------------------------------------------------------------
// kappa-sweep

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KappaSweepRun {
    pub seed: u64,
    pub model_dir: Option<PathBuf>,
    pub sweep: KappaSweepConfig,
}

impl Default for KappaSweepRun {
    fn default() -> Self {
        KappaSweepRun {
            seed: 43,
            model_dir: None,
            sweep: KappaSweepConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct KappaSweepArgs {
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Comma-separated margin thresholds.
    #[arg(long, value_delimiter = ',')]
    kappas: Option<Vec<f64>>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    masks_per_image: Option<usize>,
}

pub fn run_kappa_sweep(common: &CommonArgs, args: KappaSweepArgs) -> Result<(), Failure> {
    let mut cfg: KappaSweepRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if let Some(v) = args.kappas {
        cfg.sweep.kappas = v;
    }
    if let Some(v) = args.images {
        cfg.sweep.images = v;
    }
    if let Some(v) = args.masks_per_image {
        cfg.sweep.masks_per_image = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }

    let sys = require_model(&cfg.model_dir)?;
    cfg.sweep.synth = sys.synth_params()?;
    cfg.sweep.classes = sys.spec.classes;
    cfg.sweep.validate().setup()?;
    let mut run = RunDir::create(common.out.as_deref(), "evaluate-kappa", cfg.seed, common.jobs)?;
    run.echo_config(&cfg)?;
    let mut rng = RngState::new(cfg.seed);
    let report = kappa_sweep(&sys.pipeline, &cfg.sweep, &mut rng).run()?;
    run.write_json("kappa_sweep.json", "table", &report)?;
    let rows: Vec<Vec<f64>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.kappa,
                r.attacks as f64,
                r.flagged_attacks as f64,
                r.protected_fraction,
                r.negatives as f64,
                r.flagged_negatives as f64,
                r.false_positive_rate,
            ]
        })
        .collect();
    write_csv(
        &mut run,
        "kappa_sweep.csv",
        "table",
        &[
            "kappa",
            "attacks",
            "flagged_attacks",
            "protected_fraction",
            "negatives",
            "flagged_negatives",
            "false_positive_rate",
        ],
        &rows,
    )?;
    for r in &report.rows {
        println!(
            "kappa {:>5.2}: protected {:.3} of {} attacks, FPR {:.3} over {} negatives",
            r.kappa, r.protected_fraction, r.attacks, r.false_positive_rate, r.negatives
        );
    }
    run.finish()
}
