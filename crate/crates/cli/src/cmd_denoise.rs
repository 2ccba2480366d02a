//! `patchlab denoise` — single-image debugging view of the denoiser and
//! residual operator: per-channel CSV grids plus a summary of the
//! reconstruction identity.

use std::path::PathBuf;

use clap::Args;
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use patchlab_core::cifar::load_cifar10_binary;
use patchlab_core::data::{synth_dataset_with, ImageTensor, SynthParams};
use patchlab_core::denoise::{denoise_and_residual, DenoiseParams};
use patchlab_core::experiments::residual_heatmap;
use patchlab_core::rng::RngState;
use patchlab_core::wavelet::WaveletFamily;

use crate::runs::{load_config, Failure, Phase, RunDir};
use crate::sysio::{load_system, DataSourceSpec};
use crate::CommonArgs;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseRun {
    pub seed: u64,
    /// Take denoiser parameters (and, for synthetic sources, image
    /// parameters) from this saved system instead of the fields below.
    pub model_dir: Option<PathBuf>,
    /// CIFAR-format binary file to read the image from; synthetic otherwise.
    pub dataset: Option<PathBuf>,
    /// Record index inside `dataset`.
    pub index: usize,
    /// Class of the synthetic image.
    pub class: usize,
    pub classes: usize,
    pub params: DenoiseParams,
    pub synth: SynthParams,
}

impl Default for DenoiseRun {
    fn default() -> Self {
        DenoiseRun {
            seed: 11,
            model_dir: None,
            dataset: None,
            index: 0,
            class: 0,
            classes: 4,
            params: DenoiseParams::default(),
            synth: SynthParams::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    /// Saved system whose denoiser parameters should be used.
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// CIFAR-format binary file to read the image from.
    #[arg(long, value_name = "FILE")]
    dataset: Option<PathBuf>,
    /// Record index inside --dataset.
    #[arg(long)]
    index: Option<usize>,
    /// Class of the synthetic image (when no dataset is given).
    #[arg(long)]
    class: Option<usize>,
    /// Assumed noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Decomposition depth.
    #[arg(long)]
    levels: Option<usize>,
    /// Wavelet family: haar or db2.
    #[arg(long)]
    family: Option<String>,
}

fn parse_family(name: &str) -> Result<WaveletFamily, Failure> {
    match name.to_ascii_lowercase().as_str() {
        "haar" => Ok(WaveletFamily::Haar),
        "db2" => Ok(WaveletFamily::Db2),
        other => Err(Failure::config(format!(
            "unknown wavelet family '{other}' (expected haar or db2)"
        ))),
    }
}

fn write_channels(
    run: &mut RunDir,
    stem: &str,
    image: &ImageTensor,
) -> Result<(), Failure> {
    for ch in 0..image.channels() {
        let rel = format!("{stem}_c{ch}.csv");
        let plane = image.data.index_axis(Axis(0), ch).to_owned();
        patchlab_core::csvgrid::write_grid(&run.file(&rel), &plane).run()?;
        run.note(&rel, "grid");
    }
    Ok(())
}

pub fn run(common: &CommonArgs, args: DenoiseArgs) -> Result<(), Failure> {
    let mut cfg: DenoiseRun = load_config(common.config.as_deref())?;
    if args.model_dir.is_some() {
        cfg.model_dir = args.model_dir;
    }
    if args.dataset.is_some() {
        cfg.dataset = args.dataset;
    }
    if let Some(v) = args.index {
        cfg.index = v;
    }
    if let Some(v) = args.class {
        cfg.class = v;
    }
    if let Some(v) = args.sigma {
        cfg.params.sigma = v;
    }
    if let Some(v) = args.levels {
        cfg.params.levels = v;
    }
    if let Some(name) = &args.family {
        cfg.params.family = parse_family(name)?;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }

    // A saved system overrides the loose parameters so the debug view shows
    // exactly what the deployed pipeline computes.
    if let Some(dir) = &cfg.model_dir {
        let sys = load_system(dir)?;
        cfg.params = sys.spec.denoise;
        cfg.classes = sys.spec.classes;
        if let DataSourceSpec::Synthetic { params } = &sys.spec.data {
            cfg.synth = *params;
        }
    }
    cfg.params.validate().setup()?;
    if cfg.class >= cfg.classes {
        return Err(Failure::config(format!(
            "class {} out of range for {} classes",
            cfg.class, cfg.classes
        )));
    }

    // Resolve the image before creating the run directory: a bad source is
    // an input error, not a failed run.
    let (image, origin) = match &cfg.dataset {
        Some(path) => {
            let ds = load_cifar10_binary(path).map_err(|e| {
                Failure::config(format!("cannot load dataset {}: {e}", path.display()))
            })?;
            if cfg.index >= ds.len() {
                return Err(Failure::config(format!(
                    "index {} out of range: {} holds {} records",
                    cfg.index,
                    path.display(),
                    ds.len()
                )));
            }
            let image = ds.images[cfg.index].clone();
            let origin = format!(
                "{} record {} (label {})",
                path.display(),
                cfg.index,
                ds.labels[cfg.index]
            );
            (image, origin)
        }
        None => {
            let mut rng = RngState::new(cfg.seed);
            let ds = synth_dataset_with(&mut rng, cfg.classes, cfg.classes, &cfg.synth);
            let pos = ds
                .labels
                .iter()
                .position(|&y| y == cfg.class)
                .ok_or_else(|| Failure::runtime("synthetic batch missing requested class"))?;
            (
                ds.images[pos].clone(),
                format!("synthetic class {} (seed {})", cfg.class, cfg.seed),
            )
        }
    };

    let mut run = RunDir::create(common.out.as_deref(), "denoise", cfg.seed, common.jobs)?;
    run.echo_config(&cfg)?;

    let (denoised, residual) = denoise_and_residual(&image, &cfg.params).run()?;
    let heat = residual_heatmap(&image, &cfg.params).run()?;

    write_channels(&mut run, "input", &image)?;
    write_channels(&mut run, "denoised", &denoised)?;
    write_channels(&mut run, "residual", &residual)?;
    patchlab_core::csvgrid::write_grid(&run.file("heatmap.csv"), &heat).run()?;
    run.note("heatmap.csv", "heatmap");

    let reconstruction_max_error = image
        .data
        .iter()
        .zip(denoised.data.iter().zip(residual.data.iter()))
        .map(|(x, (d, r))| (x - (d + r)).abs())
        .fold(0.0_f64, f64::max);
    let n = residual.data.len() as f64;
    let mean_abs = residual.data.iter().map(|r| r.abs()).sum::<f64>() / n;
    let l2 = residual.data.iter().map(|r| r * r).sum::<f64>().sqrt();
    let max_abs = residual.data.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    run.write_json(
        "summary.json",
        "report",
        &serde_json::json!({
            "origin": origin,
            "channels": image.channels(),
            "height": image.height(),
            "width": image.width(),
            "params": cfg.params,
            "reconstruction_max_error": reconstruction_max_error,
            "residual": { "mean_abs": mean_abs, "max_abs": max_abs, "l2": l2 },
        }),
    )?;

    println!("denoised {origin}");
    println!(
        "residual: mean |R| {:.6}, max |R| {:.6}, L2 {:.6}",
        mean_abs, max_abs, l2
    );
    println!("reconstruction max error: {reconstruction_max_error:.3e}");
    run.finish()
}
