use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use lumina_core::{evaluate, load_mask, sidecar, LayerDecomposition, LayerMetrics, MetricReport, SetManifest};

use crate::decompose::{LayerIndex, LAYERS_FILE};
use crate::exit::{create_dir, io_failure, read_json, write_json, Failure};
use crate::OutDir;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Output directory of `decompose`.
    #[arg(long)]
    result: PathBuf,
    /// Set directory whose manifest lists ground-truth layers.
    #[arg(long)]
    truth: PathBuf,
    #[command(flatten)]
    out: OutDir,
}

fn read_layer(dir: &Path, name: &str) -> Result<lumina_core::LinearImage, Failure> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Failure::usage(format!("missing file {}", path.display())));
    }
    Ok(sidecar::read_image(path)?)
}

fn load_result(dir: &Path) -> Result<Vec<LayerDecomposition>, Failure> {
    let index: LayerIndex = read_json(&dir.join(LAYERS_FILE))?;
    index
        .views
        .iter()
        .map(|v| {
            let mut l = LayerDecomposition::new(
                read_layer(dir, &v.highlight)?,
                read_layer(dir, &v.albedo)?,
                read_layer(dir, &v.shading)?,
            )?;
            let diffuse = read_layer(dir, &v.diffuse)?;
            if diffuse.dims() != l.dims() {
                return Err(Failure::usage(format!("{} does not match the other layers", v.diffuse)));
            }
            l.diffuse = diffuse;
            Ok(l)
        })
        .collect()
}

const LAYERS: [&str; 4] = ["highlight", "albedo", "shading", "diffuse"];

fn rows(m: &lumina_core::ImageMetrics) -> [(&'static str, LayerMetrics); 4] {
    [
        (LAYERS[0], m.highlight),
        (LAYERS[1], m.albedo),
        (LAYERS[2], m.shading),
        (LAYERS[3], m.diffuse),
    ]
}

/// `key = value` lines, per view and for the means.
fn key_values(report: &MetricReport) -> String {
    let mut s = String::new();
    let mut block = |prefix: &str, m: &lumina_core::ImageMetrics| {
        for (layer, v) in rows(m) {
            for (name, x) in [("si_mse", v.si_mse), ("mse", v.mse), ("dssim", v.dssim), ("lmse", v.lmse)] {
                let _ = writeln!(s, "{prefix}.{layer}.{name} = {x:.9e}");
            }
        }
    };
    block("mean", &report.mean);
    for (i, m) in report.images.iter().enumerate() {
        block(&format!("view{i:02}"), m);
    }
    s
}

fn table(report: &MetricReport) -> String {
    let mut s = format!("{:<10} {:>12} {:>12} {:>12} {:>12}\n", "layer", "si_mse", "mse", "dssim", "lmse");
    for (layer, v) in rows(&report.mean) {
        let _ = writeln!(s, "{layer:<10} {:>12.6e} {:>12.6e} {:>12.6e} {:>12.6e}", v.si_mse, v.mse, v.dssim, v.lmse);
    }
    s
}

pub fn run(args: EvalArgs) -> Result<(), Failure> {
    let manifest = SetManifest::read(&args.truth)?;
    let truth = manifest
        .load_ground_truth(&args.truth)?
        .ok_or_else(|| Failure::usage(format!("{} lists no ground truth", args.truth.display())))?;
    let mask = load_mask(args.truth.join(&manifest.mask))?;
    let result = load_result(&args.result)?;
    let report = evaluate(&result, &truth, &mask)?;
    let out = &args.out.out;
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    let path = out.join("metrics.txt");
    std::fs::write(&path, key_values(&report)).map_err(|e| io_failure(&path, e))?;
    print!("{}", table(&report));
    Ok(())
}
