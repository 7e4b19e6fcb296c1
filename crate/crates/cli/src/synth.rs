use std::path::PathBuf;

use clap::Args;
use lumina_core::{make_set, SceneSpec};

use crate::exit::{read_json, write_json, Failure};
use crate::OutDir;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of views; view 0 is the unjittered reference.
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Side length of the square views in pixels.
    #[arg(long, default_value_t = 320)]
    size: usize,
    /// Largest per-axis translation in pixels.
    #[arg(long, default_value_t = 5)]
    jitter: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of palette colors, drawn from the seed.
    #[arg(long, default_value_t = 3)]
    palette: usize,
    /// Scene description as JSON; replaces the sampled scene entirely.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Specular strength; 0 renders a Lambertian set.
    #[arg(long)]
    specular: Option<f64>,
    #[arg(long)]
    shininess: Option<f64>,
    #[arg(long)]
    ambient: Option<f64>,
    /// Largest per-channel deviation of the light color from white.
    #[arg(long)]
    light_tint: Option<f64>,
    #[command(flatten)]
    out: OutDir,
}

pub fn run(args: SynthArgs) -> Result<(), Failure> {
    if args.views < 2 {
        return Err(Failure::usage(format!("--views must be at least 2, got {}", args.views)));
    }
    let mut scene = match &args.scene {
        Some(path) => read_json::<SceneSpec>(path)?,
        None => SceneSpec::sample(args.seed, args.palette)?,
    };
    if let Some(v) = args.specular {
        scene.specular_strength = v;
    }
    if let Some(v) = args.shininess {
        scene.shininess = v;
    }
    if let Some(v) = args.ambient {
        scene.ambient = v;
    }
    if let Some(v) = args.light_tint {
        scene.light_tint = v;
    }
    let set = make_set(&scene, args.views, args.jitter, args.seed, args.size)?;
    set.write(&args.out.out)?;
    write_json(&args.out.out.join("scene.json"), &scene)?;
    println!("{}", args.out.out.display());
    Ok(())
}
