use std::path::{Path, PathBuf};

use clap::Args;
use lumina_core::image::DEFAULT_GAMMA;
use lumina_core::{decompose, save_image, sidecar, DecompResult, Error, GridSpec, LayerDecomposition, OptimConfig, PhaseTrace, SetManifest};
use serde::{Deserialize, Serialize};

use crate::exit::{create_dir, read_json, write_json, Failure};
use crate::OutDir;

pub const REPORT_FILE: &str = "report.json";
pub const LAYERS_FILE: &str = "layers.json";

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    /// Set directory holding manifest.json.
    #[arg(long)]
    input: PathBuf,
    /// Optimizer settings as JSON; flags below override single fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gamma used to linearize PNG views without float sidecars.
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    lambda_h: Option<f64>,
    #[arg(long)]
    lambda_tv: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    highlight_iterations: Option<usize>,
    #[arg(long)]
    shading_iterations: Option<usize>,
    #[arg(long)]
    joint_iterations: Option<usize>,
    /// Grid as `CXxCY`, e.g. `16x16`.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<GridSpec>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutDir,
}

fn parse_grid(s: &str) -> Result<GridSpec, String> {
    let (x, y) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected CXxCY, got {s:?}"))?;
    let cx = x.trim().parse().map_err(|_| format!("bad cell count {x:?}"))?;
    let cy = y.trim().parse().map_err(|_| format!("bad cell count {y:?}"))?;
    GridSpec::new(cx, cy).map_err(|e| e.to_string())
}

/// File names of one view's decomposed layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFiles {
    pub highlight: String,
    pub albedo: String,
    pub shading: String,
    pub diffuse: String,
}

/// Index of decomposed layers, read back by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerIndex {
    pub schema_version: u32,
    pub views: Vec<LayerFiles>,
}

#[derive(Debug, Serialize)]
struct Finals {
    l1: f64,
    l0: f64,
    contrast: f64,
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    status: &'static str,
    input: &'a Path,
    gamma: f64,
    views: usize,
    width: usize,
    height: usize,
    reference: usize,
    masked_pixels: usize,
    config: &'a OptimConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    traces: &'a [PhaseTrace],
    #[serde(skip_serializing_if = "Option::is_none")]
    finals: Option<Finals>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<&'static str>,
}

fn effective_config(args: &DecomposeArgs) -> Result<OptimConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => read_json::<OptimConfig>(path)?,
        None => OptimConfig::default(),
    };
    let overrides = [
        (args.omega, &mut cfg.omega),
        (args.lambda_h, &mut cfg.lambda_h),
        (args.lambda_tv, &mut cfg.lambda_tv),
        (args.step_size, &mut cfg.step_size),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    let counts = [
        (args.highlight_iterations, &mut cfg.highlight_iterations),
        (args.shading_iterations, &mut cfg.shading_iterations),
        (args.joint_iterations, &mut cfg.joint_iterations),
    ];
    for (flag, field) in counts {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(g) = args.grid {
        cfg.grid = g;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_layers(dir: &Path, layers: &[LayerDecomposition]) -> Result<LayerIndex, Failure> {
    let mut views = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let mut names = Vec::with_capacity(4);
        for (prefix, img) in [
            ("highlight", &l.highlight),
            ("albedo", &l.albedo),
            ("shading", &l.shading),
            ("diffuse", &l.diffuse),
        ] {
            save_image(img, dir.join(format!("{prefix}_{i:02}.png")), DEFAULT_GAMMA)?;
            let raw = format!("{prefix}_{i:02}.lum");
            sidecar::write_image(dir.join(&raw), img)?;
            names.push(raw);
        }
        for (prefix, img) in [("albedo", &l.albedo), ("shading", &l.shading)] {
            save_image(&img.range_normalized(), dir.join(format!("{prefix}_{i:02}_display.png")), DEFAULT_GAMMA)?;
        }
        let [highlight, albedo, shading, diffuse] = <[String; 4]>::try_from(names).expect("four layers");
        views.push(LayerFiles {
            highlight,
            albedo,
            shading,
            diffuse,
        });
    }
    let index = LayerIndex {
        schema_version: 1,
        views,
    };
    write_json(&dir.join(LAYERS_FILE), &index)?;
    Ok(index)
}

pub fn run(args: DecomposeArgs) -> Result<(), Failure> {
    let cfg = effective_config(&args)?;
    let manifest = SetManifest::read(&args.input)?;
    let set = manifest.load_set(&args.input, args.gamma)?;
    let out = &args.out.out;
    create_dir(out)?;
    let (w, h) = set.dims();
    let mut report = RunReport {
        status: "ok",
        input: &args.input,
        gamma: args.gamma,
        views: set.len(),
        width: w,
        height: h,
        reference: set.reference_index(),
        masked_pixels: set.mask().count(),
        config: &cfg,
        error: None,
        traces: &[],
        finals: None,
        layers: None,
    };
    let result: DecompResult = match decompose(&set, &cfg) {
        Ok(r) => r,
        Err(e) => {
            if let Some(traces) = e.traces() {
                report.status = match e {
                    Error::Degenerate { .. } => "degenerate",
                    _ => "non-finite",
                };
                report.error = Some(e.to_string());
                report.traces = traces;
                write_json(&out.join(REPORT_FILE), &report)?;
            }
            return Err(e.into());
        }
    };
    write_layers(out, &result.layers)?;
    report.traces = &result.traces;
    report.finals = Some(Finals {
        l1: result.l1,
        l0: result.l0,
        contrast: result.contrast(),
    });
    report.layers = Some(LAYERS_FILE);
    write_json(&out.join(REPORT_FILE), &report)?;
    for t in &result.traces {
        println!(
            "{:<9} loss {:.6e} -> {:.6e} (best at step {})",
            t.phase.name(),
            t.initial(),
            t.best(),
            t.best_iteration
        );
    }
    println!("L1 {:.6e}  L0 {:.6e}  L_ct {:.6e}", result.l1, result.l0, result.contrast());
    println!("{}", out.display());
    Ok(())
}
