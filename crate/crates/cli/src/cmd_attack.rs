//! `patchlab attack ...` — craft attack batches against a trained system and
//! write per-sample manifests. Crafting failures are data, not errors: these
//! commands exit 0 whenever the batch itself could be run.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use patchlab_core::attacks::{
    adaptive_cw, brute_force_locations, masked_cw, masked_pgd, single_pixel_attack,
    AdaptiveCwConfig, CwConfig, PgdConfig, PixelConfig, PlacementSearch,
};
use patchlab_core::attacks::transfer_pgd;
use patchlab_core::data::{random_patch_mask, synth_dataset_with, ImageTensor, PatchMask};
use patchlab_core::experiments::{
    correctly_classified_synth, train_substitute_model, NegativePool, SubstituteConfig,
};
use patchlab_core::neural::agreement;
use patchlab_core::rng::RngState;

use crate::manifest::{
    dump_records, negative_records, verdict, AttackManifest, MaskRecord, RecordsInfo, SampleRecord,
    MANIFEST_FILE,
};
use crate::runs::{load_config, write_csv, Failure, Phase, RunDir};
use crate::sysio::{load_system, LoadedSystem};
use crate::CommonArgs;

/// Everything an attack batch needs before its crafting loop.
struct Batch {
    sys: LoadedSystem,
    run: RunDir,
    rng: RngState,
    eval: patchlab_core::data::LabeledDataset,
    manifest: AttackManifest,
    dump: bool,
    adversarial: Vec<ImageTensor>,
}

#[allow(clippy::too_many_arguments)]
fn open_batch<C: Serialize>(
    common: &CommonArgs,
    attack: &str,
    cfg: &C,
    model_dir: &Option<PathBuf>,
    seed: u64,
    samples: usize,
    noise_amplitude: u32,
    dump: bool,
) -> Result<Batch, Failure> {
    let dir = model_dir.as_ref().ok_or_else(|| {
        Failure::config("a trained system is required: pass --model-dir or set model_dir")
    })?;
    let sys = load_system(dir)?;
    sys.require_trained()?;
    let synth = sys.synth_params()?;
    if samples == 0 {
        return Err(Failure::config("the batch needs at least one sample"));
    }

    let mut run = RunDir::create(
        common.out.as_deref(),
        &format!("attack-{attack}"),
        seed,
        common.jobs,
    )?;
    run.echo_config(cfg)?;

    let mut rng = RngState::new(seed);
    let eval = correctly_classified_synth(&sys.pipeline, samples, sys.spec.classes, &synth, &mut rng)
        .run()?;
    let pool = NegativePool::build(&sys.pipeline, &eval.images, noise_amplitude, &mut rng).run()?;
    let mut manifest = AttackManifest::summarize(attack, seed, sys.pipeline.kappa, noise_amplitude);
    manifest.negatives = negative_records(&sys.pipeline, &pool)?;
    Ok(Batch {
        sys,
        run,
        rng,
        eval,
        manifest,
        dump,
        adversarial: Vec::new(),
    })
}

impl Batch {
    /// Score one crafted image through the deployed pipeline and append its
    /// manifest row. Returns the row for per-attack extras.
    fn push(
        &mut self,
        index: usize,
        true_label: usize,
        x_adv: &ImageTensor,
        success: bool,
        iterations: usize,
        l2: f64,
        linf: f64,
        mask: Option<MaskRecord>,
    ) -> Result<&mut SampleRecord, Failure> {
        let v = verdict(&self.sys.pipeline, x_adv)?;
        self.manifest.samples.push(SampleRecord {
            index,
            true_label,
            epsilon: None,
            target: None,
            mask,
            success,
            iterations,
            l2,
            linf,
            predicted: v.decision.predicted,
            flagged: v.decision.flagged,
            flag_reason: format!("{:?}", v.decision.reason),
            margin: v.decision.margin,
            detector_logit: v.detector_logit,
            ours_score: v.ours_score,
            baseline_score: v.baseline_score,
            evaded_ensemble: None,
            victim_fooled: None,
        });
        self.adversarial.push(x_adv.clone());
        Ok(self.manifest.samples.last_mut().expect("just pushed"))
    }

    /// Finalize the summary, dump records, write the manifest, print totals.
    fn close(mut self) -> Result<(), Failure> {
        self.manifest.finalize();
        if self.dump {
            let adv_labels: Vec<usize> = self
                .manifest
                .samples
                .iter()
                .map(|s| s.true_label)
                .collect();
            let clean = dump_records(
                &mut self.run,
                "records/clean.bin",
                &self.eval.images,
                &self.eval.labels,
            )?;
            let adv = dump_records(
                &mut self.run,
                "records/adversarial.bin",
                &self.adversarial,
                &adv_labels,
            )?;
            if let (Some(clean), Some(adversarial)) = (clean, adv) {
                self.manifest.records = Some(RecordsInfo { clean, adversarial });
            }
        }
        self.run
            .write_json(MANIFEST_FILE, "attack-manifest", &self.manifest)?;
        let s = &self.manifest.summary;
        println!(
            "{}: {} attacks, {} successes ({:.1}%), {} flagged of successes, mean L2 {:.4}",
            self.manifest.attack,
            s.attacks,
            s.successes,
            100.0 * s.success_rate,
            s.flagged_successes,
            s.mean_l2_success
        );
        self.run.finish()
    }

    fn shape(&self) -> (usize, usize) {
        (self.eval.images[0].height(), self.eval.images[0].width())
    }
}

// ---------------------------------------------------------------------------
// pgd

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdRun {
    pub seed: u64,
    pub model_dir: Option<PathBuf>,
    pub epsilon: f64,
    pub steps: usize,
    pub restarts: usize,
    pub images: usize,
    pub masks_per_image: usize,
    pub patch_side_min: usize,
    pub patch_side_max: usize,
    pub noise_amplitude: u32,
    pub dump_records: bool,
}

impl Default for PgdRun {
    fn default() -> Self {
        PgdRun {
            seed: 11,
            model_dir: None,
            epsilon: 64.0 / 255.0,
            steps: 100,
            restarts: 1,
            images: 32,
            masks_per_image: 4,
            patch_side_min: 4,
            patch_side_max: 8,
            noise_amplitude: 3,
            dump_records: true,
        }
    }
}

#[derive(Args, Debug)]
pub struct PgdArgs {
    /// Directory holding classifier.net / detector.net / system.json.
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// L-infinity budget inside the patch (1.0 = unrestricted).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Gradient steps per attack
    #[arg(long)]
    steps: Option<usize>,
    /// Random restarts per placement
    #[arg(long)]
    restarts: Option<usize>,
    /// Correctly-classified evaluation images to attack.
    #[arg(long)]
    images: Option<usize>,
    /// Random patch placements per image.
    #[arg(long)]
    masks_per_image: Option<usize>,
    /// Skip the binary record dump.
    #[arg(long)]
    no_records: bool,
}

pub fn run_pgd(common: &CommonArgs, args: PgdArgs) -> Result<(), Failure> {
    let mut cfg: PgdRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if let Some(v) = args.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.restarts {
        cfg.restarts = v;
    }
    if let Some(v) = args.images {
        cfg.images = v;
    }
    if let Some(v) = args.masks_per_image {
        cfg.masks_per_image = v;
    }
    if args.no_records {
        cfg.dump_records = false;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if cfg.masks_per_image == 0 {
        return Err(Failure::config("masks_per_image must be at least 1"));
    }

    let mut batch = open_batch(
        common,
        "pgd",
        &cfg,
        &cfg.model_dir,
        cfg.seed,
        cfg.images,
        cfg.noise_amplitude,
        cfg.dump_records,
    )?;
    let (h, w) = batch.shape();
    let mut pgd = PgdConfig::new(cfg.epsilon, cfg.steps);
    pgd.restarts = cfg.restarts;

    for i in 0..batch.eval.len() {
        let x = batch.eval.images[i].clone();
        let y = batch.eval.labels[i];
        for _ in 0..cfg.masks_per_image {
            let mask = random_patch_mask(
                &mut batch.rng,
                cfg.patch_side_min,
                cfg.patch_side_max,
                h,
                w,
                true,
            )
            .run()?;
            let out = masked_pgd(&batch.sys.pipeline.classifier, &x, y, &mask, &pgd, &mut batch.rng)
                .run()?;
            let row = batch.push(
                i,
                y,
                &out.x_adv,
                out.success,
                out.iterations,
                out.l2,
                out.linf,
                Some(MaskRecord::from(&mask)),
            )?;
            row.epsilon = Some(cfg.epsilon);
        }
    }
    batch.close()
}

// ---------------------------------------------------------------------------
// cw

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwRun {
    pub seed: u64,
    pub model_dir: Option<PathBuf>,
    pub images: usize,
    pub iterations: usize,
    pub lambda_steps: usize,
    pub lr: f64,
    pub kappa_adv: f64,
    /// Full-image mask instead of a small random patch.
    pub unrestricted: bool,
    pub patch_side_min: usize,
    pub patch_side_max: usize,
    pub noise_amplitude: u32,
    pub dump_records: bool,
}

impl Default for CwRun {
    fn default() -> Self {
        CwRun {
            seed: 13,
            model_dir: None,
            images: 64,
            iterations: 120,
            lambda_steps: 5,
            lr: 2e-2,
            kappa_adv: 0.0,
            unrestricted: false,
            patch_side_min: 4,
            patch_side_max: 8,
            noise_amplitude: 3,
            dump_records: true,
        }
    }
}

#[derive(Args, Debug)]
pub struct CwArgs {
    /// Directory holding classifier.net / detector.net / system.json
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Correctly-classified evaluation images to attack
    #[arg(long)]
    images: Option<usize>,
    /// Optimizer steps per lambda trial.
    #[arg(long)]
    iterations: Option<usize>,
    /// Lambda bisection trials.
    #[arg(long)]
    lambda_steps: Option<usize>,
    /// Give the attack the whole image instead of a small patch.
    #[arg(long)]
    unrestricted: bool,
    /// Skip the binary record dump
    #[arg(long)]
    no_records: bool,
}

pub fn run_cw(common: &CommonArgs, args: CwArgs) -> Result<(), Failure> {
    let mut cfg: CwRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if let Some(v) = args.images {
        cfg.images = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.lambda_steps {
        cfg.lambda_steps = v;
    }
    if args.unrestricted {
        cfg.unrestricted = true;
    }
    if args.no_records {
        cfg.dump_records = false;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }

    let mut batch = open_batch(
        common,
        "cw",
        &cfg,
        &cfg.model_dir,
        cfg.seed,
        cfg.images,
        cfg.noise_amplitude,
        cfg.dump_records,
    )?;
    let (h, w) = batch.shape();
    let mut cw = CwConfig::new(cfg.iterations);
    cw.lambda_steps = cfg.lambda_steps;
    cw.lr = cfg.lr;
    cw.kappa_adv = cfg.kappa_adv;

    for i in 0..batch.eval.len() {
        let x = batch.eval.images[i].clone();
        let y = batch.eval.labels[i];
        let mask = if cfg.unrestricted {
            PatchMask::new_uncapped(0, 0, h, w, h, w).run()?
        } else {
            random_patch_mask(
                &mut batch.rng,
                cfg.patch_side_min,
                cfg.patch_side_max,
                h,
                w,
                true,
            )
            .run()?
        };
        let out = masked_cw(&batch.sys.pipeline.classifier, &x, y, &mask, &cw).run()?;
        batch.push(
            i,
            y,
            &out.x_adv,
            out.success,
            out.iterations,
            out.l2,
            out.linf,
            Some(MaskRecord::from(&mask)),
        )?;
    }
    batch.close()
}

// ---------------------------------------------------------------------------
// pixel

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PixelRun {
    pub seed: u64,
    pub model_dir: Option<PathBuf>,
    pub images: usize,
    pub population: usize,
    pub generations: usize,
    /// Target class = (true label + offset) mod classes.
    pub target_offset: usize,
    pub noise_amplitude: u32,
    pub dump_records: bool,
}

impl Default for PixelRun {
    fn default() -> Self {
        PixelRun {
            seed: 17,
            model_dir: None,
            images: 48,
            population: 75,
            generations: 100,
            target_offset: 1,
            noise_amplitude: 3,
            dump_records: true,
        }
    }
}

#[derive(Args, Debug)]
pub struct PixelArgs {
    /// Directory holding classifier.net / detector.net / system.json
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Correctly-classified evaluation images to attack
    #[arg(long)]
    images: Option<usize>,
    /// Differential-evolution population size
    #[arg(long)]
    population: Option<usize>,
    /// Differential-evolution generations
    #[arg(long)]
    generations: Option<usize>,
    /// Skip the binary record dump
    #[arg(long)]
    no_records: bool,
}

pub fn run_pixel(common: &CommonArgs, args: PixelArgs) -> Result<(), Failure> {
    let mut cfg: PixelRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if let Some(v) = args.images {
        cfg.images = v;
    }
    if let Some(v) = args.population {
        cfg.population = v;
    }
    if let Some(v) = args.generations {
        cfg.generations = v;
    }
    if args.no_records {
        cfg.dump_records = false;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }

    let mut batch = open_batch(
        common,
        "pixel",
        &cfg,
        &cfg.model_dir,
        cfg.seed,
        cfg.images,
        cfg.noise_amplitude,
        cfg.dump_records,
    )?;
    let classes = batch.sys.spec.classes;
    if cfg.target_offset % classes == 0 {
        return Err(Failure::config(
            "target_offset must not be a multiple of the class count",
        ));
    }

    for i in 0..batch.eval.len() {
        let x = batch.eval.images[i].clone();
        let y = batch.eval.labels[i];
        let target = (y + cfg.target_offset) % classes;
        let mut pixel = PixelConfig::new(target);
        pixel.population = cfg.population;
        pixel.generations = cfg.generations;
        let out = single_pixel_attack(&batch.sys.pipeline.classifier, &x, &pixel, &mut batch.rng)
            .run()?;
        let mask = out.mask.as_ref().map(MaskRecord::from);
        let row = batch.push(
            i,
            y,
            &out.x_adv,
            out.success,
            out.iterations,
            out.l2,
            out.linf,
            mask,
        )?;
        row.target = Some(target);
    }
    batch.close()
}

// ---------------------------------------------------------------------------
// adaptive

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveRun {
    pub seed: u64,
    pub model_dir: Option<PathBuf>,
    pub images: usize,
    pub iterations: usize,
    pub lambda_steps: usize,
    pub lr: f64,
    /// Weight of the detector-evasion hinge in the objective.
    pub detector_weight: f64,
    /// Push the detector logit this far below zero, not merely to it.
    pub detector_slack: f64,
    /// Straight-through denoiser cache refresh period (iterations).
    pub refresh_every: usize,
    /// Whole-image mask (the strongest setting) or a random small patch.
    pub unrestricted: bool,
    pub patch_side_min: usize,
    pub patch_side_max: usize,
    pub noise_amplitude: u32,
    pub dump_records: bool,
}

impl Default for AdaptiveRun {
    fn default() -> Self {
        AdaptiveRun {
            seed: 19,
            model_dir: None,
            images: 16,
            iterations: 150,
            lambda_steps: 1,
            lr: 2e-2,
            detector_weight: 1.0,
            detector_slack: 0.05,
            refresh_every: 5,
            unrestricted: true,
            patch_side_min: 4,
            patch_side_max: 8,
            noise_amplitude: 3,
            dump_records: true,
        }
    }
}

#[derive(Args, Debug)]
pub struct AdaptiveArgs {
    /// Directory holding classifier.net / detector.net / system.json
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Correctly-classified evaluation images to attack
    #[arg(long)]
    images: Option<usize>,
    /// Optimizer steps per attack
    #[arg(long)]
    iterations: Option<usize>,
    /// Attack a random small patch instead of the whole image.
    #[arg(long)]
    restricted: bool,
    /// Skip the binary record dump
    #[arg(long)]
    no_records: bool,
}

pub fn run_adaptive(common: &CommonArgs, args: AdaptiveArgs) -> Result<(), Failure> {
    let mut cfg: AdaptiveRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if let Some(v) = args.images {
        cfg.images = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if args.restricted {
        cfg.unrestricted = false;
    }
    if args.no_records {
        cfg.dump_records = false;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }

    let mut batch = open_batch(
        common,
        "adaptive",
        &cfg,
        &cfg.model_dir,
        cfg.seed,
        cfg.images,
        cfg.noise_amplitude,
        cfg.dump_records,
    )?;
    let (h, w) = batch.shape();
    let mut acfg = AdaptiveCwConfig::new(cfg.iterations);
    acfg.cw.alpha = if cfg.lambda_steps <= 1 { 0.0 } else { 1.0 };
    acfg.cw.lambda_steps = cfg.lambda_steps;
    acfg.cw.lr = cfg.lr;
    acfg.detector_weight = cfg.detector_weight;
    acfg.detector_slack = cfg.detector_slack;
    acfg.refresh_every = cfg.refresh_every;

    let mut evasions = 0usize;
    for i in 0..batch.eval.len() {
        let x = batch.eval.images[i].clone();
        let y = batch.eval.labels[i];
        let mask = if cfg.unrestricted {
            PatchMask::new_uncapped(0, 0, h, w, h, w).run()?
        } else {
            random_patch_mask(
                &mut batch.rng,
                cfg.patch_side_min,
                cfg.patch_side_max,
                h,
                w,
                true,
            )
            .run()?
        };
        let out = adaptive_cw(&batch.sys.pipeline, &x, y, &mask, &acfg).run()?;
        if out.evaded {
            evasions += 1;
        }
        let row = batch.push(
            i,
            y,
            &out.outcome.x_adv,
            out.outcome.success,
            out.outcome.iterations,
            out.outcome.l2,
            out.outcome.linf,
            Some(MaskRecord::from(&mask)),
        )?;
        row.evaded_ensemble = Some(out.evaded);
    }
    println!("ensemble evasions: {evasions}/{}", batch.eval.len());
    batch.close()
}

// ---------------------------------------------------------------------------
// brute

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SearchSpec {
    /// Every stride-1 placement.
    All,
    /// A fixed number of uniformly random placements.
    Sample { count: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BruteRun {
    pub seed: u64,
    pub model_dir: Option<PathBuf>,
    pub images: usize,
    /// Square patch side for every placement.
    pub side: usize,
    pub search: SearchSpec,
    pub stop_on_success: bool,
    pub epsilon: f64,
    pub steps: usize,
    pub noise_amplitude: u32,
    pub dump_records: bool,
}

impl Default for BruteRun {
    fn default() -> Self {
        BruteRun {
            seed: 23,
            model_dir: None,
            images: 2,
            side: 6,
            search: SearchSpec::Sample { count: 64 },
            stop_on_success: false,
            epsilon: 1.0,
            steps: 40,
            noise_amplitude: 3,
            dump_records: true,
        }
    }
}

#[derive(Args, Debug)]
pub struct BruteArgs {
    /// Directory holding classifier.net / detector.net / system.json
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Correctly-classified evaluation images to attack
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    /// Try every placement (writes a per-image success-map CSV).
    #[arg(long, conflicts_with = "search_sample")]
    search_all: bool,
    /// Try this many random placements.
    #[arg(long, value_name = "N")]
    search_sample: Option<usize>,
    /// Stop each image's sweep at its first success.
    #[arg(long)]
    stop_on_success: bool,
    /// Skip the binary record dump
    #[arg(long)]
    no_records: bool,
}

pub fn run_brute(common: &CommonArgs, args: BruteArgs) -> Result<(), Failure> {
    let mut cfg: BruteRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if let Some(v) = args.images {
        cfg.images = v;
    }
    if let Some(v) = args.side {
        cfg.side = v;
    }
    if args.search_all {
        cfg.search = SearchSpec::All;
    }
    if let Some(count) = args.search_sample {
        cfg.search = SearchSpec::Sample { count };
    }
    if args.stop_on_success {
        cfg.stop_on_success = true;
    }
    if args.no_records {
        cfg.dump_records = false;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }

    let mut batch = open_batch(
        common,
        "brute",
        &cfg,
        &cfg.model_dir,
        cfg.seed,
        cfg.images,
        cfg.noise_amplitude,
        cfg.dump_records,
    )?;
    let (h, w) = batch.shape();
    if cfg.side == 0 || cfg.side > h.min(w) {
        return Err(Failure::config(format!(
            "patch side {} does not fit a {h}x{w} image",
            cfg.side
        )));
    }
    let pgd = PgdConfig::new(cfg.epsilon, cfg.steps);

    for i in 0..batch.eval.len() {
        let x = batch.eval.images[i].clone();
        let y = batch.eval.labels[i];
        let search = match cfg.search {
            SearchSpec::All => PlacementSearch::All,
            SearchSpec::Sample { count } => PlacementSearch::Sample(count),
        };
        // The placement sweep and the inner attack both need randomness;
        // give the inner attack its own derived stream.
        let mut inner_rng = batch.rng.split();
        let classifier = &batch.sys.pipeline.classifier;
        let mut placements: Vec<(usize, usize, bool)> = Vec::new();
        let report = brute_force_locations(
            h,
            w,
            cfg.side,
            search,
            cfg.stop_on_success,
            &mut batch.rng,
            |mask| {
                let out = masked_pgd(classifier, &x, y, mask, &pgd, &mut inner_rng)?;
                placements.push((mask.top(), mask.left(), out.success));
                Ok(out)
            },
        )
        .run()?;

        if matches!(cfg.search, SearchSpec::All) {
            let rows = h - cfg.side + 1;
            let cols = w - cfg.side + 1;
            let mut grid = ndarray::Array2::<f64>::zeros((rows, cols));
            for &(top, left, success) in &placements {
                grid[[top, left]] = if success { 1.0 } else { 0.0 };
            }
            let rel = format!("success_map_{i}.csv");
            patchlab_core::csvgrid::write_grid(&batch.run.file(&rel), &grid).run()?;
            batch.run.note(&rel, "success-map");
        }

        let (x_adv, success, l2, linf, mask) = match &report.best {
            Some(best) => (
                best.x_adv.clone(),
                true,
                best.l2,
                best.linf,
                best.mask.as_ref().map(MaskRecord::from),
            ),
            None => (x.clone(), false, 0.0, 0.0, None),
        };
        let row = batch.push(i, y, &x_adv, success, report.tried, l2, linf, mask)?;
        // Placement-level outcome: how many of the tried locations worked.
        row.epsilon = Some(cfg.epsilon);
        println!(
            "image {i}: {} placements tried, {} succeeded",
            report.tried, report.successes
        );
    }
    batch.close()
}

// ---------------------------------------------------------------------------
// transfer

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferRun {
    pub seed: u64,
    pub model_dir: Option<PathBuf>,
    /// Hard-label queries granted to the attacker for substitute training.
    pub queries: usize,
    pub substitute_epochs: usize,
    pub agreement_samples: usize,
    pub images: usize,
    pub epsilon: f64,
    pub steps: usize,
    pub patch_side_min: usize,
    pub patch_side_max: usize,
    pub noise_amplitude: u32,
    pub dump_records: bool,
}

impl Default for TransferRun {
    fn default() -> Self {
        TransferRun {
            seed: 29,
            model_dir: None,
            queries: 480,
            substitute_epochs: 20,
            agreement_samples: 128,
            images: 48,
            epsilon: 1.0,
            steps: 80,
            patch_side_min: 4,
            patch_side_max: 8,
            noise_amplitude: 3,
            dump_records: true,
        }
    }
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Directory holding classifier.net / detector.net / system.json
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    queries: Option<usize>,
    /// Correctly-classified evaluation images to attack
    #[arg(long)]
    images: Option<usize>,
    /// Skip the binary record dump
    #[arg(long)]
    no_records: bool,
}

#[derive(Serialize)]
struct TransferStudy {
    agreement: f64,
    crafted_successes: usize,
    victim_fooled: usize,
    classifier_transfer_rate: f64,
    ensemble_evasions: usize,
    ensemble_transfer_rate: f64,
}

pub fn run_transfer(common: &CommonArgs, args: TransferArgs) -> Result<(), Failure> {
    let mut cfg: TransferRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if let Some(v) = args.queries {
        cfg.queries = v;
    }
    if let Some(v) = args.images {
        cfg.images = v;
    }
    if args.no_records {
        cfg.dump_records = false;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }

    let mut batch = open_batch(
        common,
        "transfer",
        &cfg,
        &cfg.model_dir,
        cfg.seed,
        cfg.images,
        cfg.noise_amplitude,
        cfg.dump_records,
    )?;
    let (h, w) = batch.shape();
    let synth = batch.sys.synth_params()?;
    let classes = batch.sys.spec.classes;

    let mut sub_cfg = SubstituteConfig::default();
    sub_cfg.queries = cfg.queries;
    sub_cfg.train.epochs = cfg.substitute_epochs;
    sub_cfg.agreement_samples = cfg.agreement_samples;
    sub_cfg.synth = synth;
    sub_cfg.classes = classes;
    let (substitute, _training) =
        train_substitute_model(&batch.sys.pipeline, &sub_cfg, &mut batch.rng).run()?;

    let fresh = synth_dataset_with(
        &mut batch.rng,
        cfg.agreement_samples.max(classes),
        classes,
        &synth,
    );
    let agree = agreement(&substitute, &batch.sys.pipeline.classifier, &fresh.images).run()?;

    let pgd = PgdConfig::new(cfg.epsilon, cfg.steps);
    let mut crafted = 0usize;
    let mut fooled = 0usize;
    let mut evaded = 0usize;
    for i in 0..batch.eval.len() {
        let x = batch.eval.images[i].clone();
        let y = batch.eval.labels[i];
        let mask = random_patch_mask(
            &mut batch.rng,
            cfg.patch_side_min,
            cfg.patch_side_max,
            h,
            w,
            true,
        )
        .run()?;
        let report = transfer_pgd(&substitute, &batch.sys.pipeline, &x, y, &mask, &pgd, &mut batch.rng)
            .run()?;
        crafted += report.outcome.success as usize;
        fooled += report.victim_fooled as usize;
        evaded += report.evaded_ensemble as usize;
        let row = batch.push(
            i,
            y,
            &report.outcome.x_adv,
            report.outcome.success,
            report.outcome.iterations,
            report.outcome.l2,
            report.outcome.linf,
            Some(MaskRecord::from(&mask)),
        )?;
        row.victim_fooled = Some(report.victim_fooled);
        row.evaded_ensemble = Some(report.evaded_ensemble);
    }

    let n = batch.eval.len().max(1) as f64;
    let study = TransferStudy {
        agreement: agree,
        crafted_successes: crafted,
        victim_fooled: fooled,
        classifier_transfer_rate: fooled as f64 / n,
        ensemble_evasions: evaded,
        ensemble_transfer_rate: evaded as f64 / n,
    };
    batch.run.write_json("transfer.json", "report", &study)?;
    write_csv(
        &mut batch.run,
        "transfer.csv",
        "table",
        &[
            "agreement",
            "classifier_transfer_rate",
            "ensemble_transfer_rate",
        ],
        &[vec![
            study.agreement,
            study.classifier_transfer_rate,
            study.ensemble_transfer_rate,
        ]],
    )?;
    println!(
        "substitute agreement {:.3}; classifier transfer {}/{}; ensemble transfer {}/{}",
        agree,
        fooled,
        batch.eval.len(),
        evaded,
        batch.eval.len()
    );
    batch.close()
}
