//! Deterministic synthetic multi-view scenes with exact ground truth.
//!
//! A sphere rests in front of a plane that fills the frame. The plane faces
//! the camera and carries the first palette color; the sphere is banded
//! with the remaining colors. Each view gets its own directional light and
//! an integer translation. Shading is `light * max(0, n.l) + ambient`, the
//! highlight is Phong with the viewer on the camera axis, and the image is
//! `H + A * S` exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{compose, save_image, save_mask, ImageSet, LayerDecomposition, LinearImage, PixelMask, DEFAULT_GAMMA};
use crate::manifest::{GroundTruthFiles, SetManifest, SCHEMA_VERSION};
use crate::sidecar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Sphere center as fractions of width and height.
    pub sphere_center: [f64; 2],
    /// Sphere radius as a fraction of the smaller image side.
    pub sphere_radius: f64,
    /// `palette[0]` colors the plane, the rest band the sphere.
    pub palette: Vec<[f64; 3]>,
    pub specular_strength: f64,
    pub shininess: f64,
    pub ambient: f64,
    /// Largest per-channel deviation of light color from white; 0 gives
    /// white light in every view.
    pub light_tint: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            sphere_center: [0.5, 0.5],
            sphere_radius: 0.3,
            palette: vec![[0.75, 0.35, 0.2], [0.2, 0.45, 0.8], [0.3, 0.7, 0.25]],
            specular_strength: 0.6,
            shininess: 20.0,
            ambient: 0.1,
            light_tint: 0.1,
        }
    }
}

impl SceneSpec {
    /// Random saturated palette of `palette_size` colors; other fields keep
    /// their defaults.
    pub fn sample(seed: u64, palette_size: usize) -> Result<Self> {
        if !(2..=6).contains(&palette_size) {
            return Err(Error::Precondition(format!(
                "palette size must be in [2, 6], got {palette_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ce_7e5c_e7e5);
        let offset: f64 = rng.random();
        let palette = (0..palette_size)
            .map(|i| {
                // Spread hues so neighbouring regions stay distinguishable.
                let hue = (offset + i as f64 / palette_size as f64 + rng.random_range(-0.05..0.05)).rem_euclid(1.0);
                let sat = rng.random_range(0.5..0.85);
                let val = rng.random_range(0.5..0.85);
                hsv_to_rgb(hue, sat, val).map(|c| c.max(0.02))
            })
            .collect();
        let spec = Self {
            palette,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if !(2..=6).contains(&self.palette.len()) {
            return bad(format!("palette needs 2 to 6 colors, has {}", self.palette.len()));
        }
        if self.palette.iter().flatten().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return bad("palette colors must lie in (0, 1]".into());
        }
        if !(self.specular_strength >= 0.0) {
            return bad("specular strength must be non-negative".into());
        }
        if !(self.shininess >= 1.0) {
            return bad("shininess must be at least 1".into());
        }
        if !(0.0..=0.3).contains(&self.ambient) {
            return bad("ambient must be in [0, 0.3]".into());
        }
        if !(0.0..1.0).contains(&self.light_tint) {
            return bad("light tint must be in [0, 1)".into());
        }
        if !(self.sphere_radius > 0.0 && self.sphere_radius <= 0.5) {
            return bad("sphere radius must be in (0, 0.5]".into());
        }
        Ok(())
    }

    fn sphere_albedo(&self, ny: f64) -> [f64; 3] {
        let bands = self.palette.len() - 1;
        let t = ((1.0 - ny) / 2.0).clamp(0.0, 1.0);
        let band = ((t * bands as f64) as usize).min(bands - 1);
        self.palette[1 + band]
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    /// Unit vector toward the light; `+z` points at the camera.
    pub light_dir: [f64; 3],
    pub light_color: [f64; 3],
    /// Integer translation `(dx, dy)` applied to the whole raster.
    pub jitter: [i32; 2],
    pub seed: u64,
}

impl ViewSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.light_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("light direction has norm {n}")));
        }
        if self.light_color.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Precondition("light color must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-truth layers, composed image and the in-frame pixels of one view.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub layers: LayerDecomposition,
    pub image: LinearImage,
    /// Pixels that came from inside the frame after translation.
    pub valid: PixelMask,
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Renders one view at `width x height`.
pub fn render_view(scene: &SceneSpec, view: &ViewSpec, width: usize, height: usize) -> Result<RenderedView> {
    scene.validate()?;
    view.validate()?;
    let (cx, cy) = (scene.sphere_center[0] * width as f64, scene.sphere_center[1] * height as f64);
    let radius = scene.sphere_radius * width.min(height) as f64;
    let l = view.light_dir;
    let lc = view.light_color;

    let n = width * height * 3;
    let (mut h, mut a, mut s) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut valid = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let sx = x as i64 - view.jitter[0] as i64;
            let sy = y as i64 - view.jitter[1] as i64;
            if sx < 0 || sy < 0 || sx >= width as i64 || sy >= height as i64 {
                continue;
            }
            let p = y * width + x;
            valid[p] = true;
            let dx = (sx as f64 + 0.5 - cx) / radius;
            let dy = (sy as f64 + 0.5 - cy) / radius;
            let r2 = dx * dx + dy * dy;
            let (normal, albedo) = if r2 < 1.0 {
                let normal = [dx, -dy, (1.0 - r2).sqrt()];
                (normal, scene.sphere_albedo(normal[1]))
            } else {
                ([0.0, 0.0, 1.0], scene.palette[0])
            };
            let ndl = dot3(normal, l);
            let diffuse = ndl.max(0.0);
            let spec = if ndl > 0.0 {
                // Mirror direction of l about n, against the camera-axis viewer.
                let rv = 2.0 * ndl * normal[2] - l[2];
                scene.specular_strength * rv.max(0.0).powf(scene.shininess)
            } else {
                0.0
            };
            for c in 0..3 {
                s[p * 3 + c] = lc[c] * diffuse + scene.ambient;
                a[p * 3 + c] = albedo[c];
                h[p * 3 + c] = lc[c] * spec;
            }
        }
    }
    let layers = LayerDecomposition::new(
        LinearImage::new(width, height, h)?,
        LinearImage::new(width, height, a)?,
        LinearImage::new(width, height, s)?,
    )?;
    let image = compose(&layers)?;
    Ok(RenderedView {
        layers,
        image,
        valid: PixelMask::new(width, height, valid)?,
    })
}

/// A rendered set with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub set: ImageSet,
    pub ground_truth: Vec<LayerDecomposition>,
    pub views: Vec<ViewSpec>,
    pub scene: SceneSpec,
    pub seed: u64,
}

/// Renders `n_views` square views of side `size`. View 0 is the
/// unjittered reference; the others get independent lights and jitter in
/// `[-jitter_max, jitter_max]^2`. The shared mask drops a `jitter_max`
/// border so every view is defined on it.
pub fn make_set(scene: &SceneSpec, n_views: usize, jitter_max: u32, seed: u64, size: usize) -> Result<SyntheticSet> {
    if n_views < 2 {
        return Err(Error::Precondition(format!("need at least 2 views, got {n_views}")));
    }
    let jm = jitter_max as usize;
    if size <= 2 * jm {
        return Err(Error::Precondition(format!(
            "size {size} leaves no pixels inside a {jitter_max}px jitter border"
        )));
    }
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views: Vec<ViewSpec> = (0..n_views)
        .map(|i| {
            let lz: f64 = rng.random_range(0.5..0.9);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let rxy = (1.0 - lz * lz).sqrt();
            let intensity: f64 = rng.random_range(0.75..0.95);
            let mut light_color = [intensity; 3];
            for c in &mut light_color {
                let tint: f64 = if scene.light_tint > 0.0 {
                    rng.random_range(-scene.light_tint..=scene.light_tint)
                } else {
                    0.0
                };
                *c *= 1.0 + tint;
            }
            let j = jitter_max as i32;
            let mut jitter = [rng.random_range(-j..=j), rng.random_range(-j..=j)];
            if i == 0 {
                jitter = [0, 0];
            }
            ViewSpec {
                light_dir: [rxy * phi.cos(), rxy * phi.sin(), lz],
                light_color,
                jitter,
                seed: rng.random(),
            }
        })
        .collect();

    let rendered: Vec<RenderedView> = views
        .iter()
        .map(|v| render_view(scene, v, size, size))
        .collect::<Result<_>>()?;
    let mask = PixelMask::from_fn(size, size, |x, y| {
        x >= jm && y >= jm && x < size - jm && y < size - jm
    });
    let mask = rendered.iter().try_fold(mask, |m, r| m.intersect(&r.valid))?;
    let (images, ground_truth) = rendered.into_iter().map(|r| (r.image, r.layers)).unzip();
    Ok(SyntheticSet {
        set: ImageSet::new(images, 0, mask)?,
        ground_truth,
        views,
        scene: scene.clone(),
        seed,
    })
}

impl SyntheticSet {
    /// Writes views, mask, ground-truth layers (PNG and float sidecars) and
    /// the manifest into `dir`, which is created if needed.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SetManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.set.len();
        let name = |prefix: &str, i: usize, ext: &str| format!("{prefix}_{i:02}.{ext}");
        let mut images = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        let mut gt = GroundTruthFiles {
            highlight: Vec::with_capacity(n),
            albedo: Vec::with_capacity(n),
            shading: Vec::with_capacity(n),
        };
        for i in 0..n {
            let img = &self.set.images()[i];
            images.push(name("view", i, "png"));
            raw.push(name("view", i, "lum"));
            save_image(img, dir.join(&images[i]), DEFAULT_GAMMA)?;
            sidecar::write_image(dir.join(&raw[i]), img)?;
            let layers = &self.ground_truth[i];
            for (prefix, layer, list) in [
                ("gt_highlight", &layers.highlight, &mut gt.highlight),
                ("gt_albedo", &layers.albedo, &mut gt.albedo),
                ("gt_shading", &layers.shading, &mut gt.shading),
            ] {
                save_image(layer, dir.join(name(prefix, i, "png")), DEFAULT_GAMMA)?;
                let lum = name(prefix, i, "lum");
                sidecar::write_image(dir.join(&lum), layer)?;
                list.push(lum);
            }
        }
        save_mask(self.set.mask(), dir.join("mask.png"))?;
        let manifest = SetManifest {
            schema_version: SCHEMA_VERSION,
            reference: images[self.set.reference_index()].clone(),
            mask: "mask.png".into(),
            images,
            raw_images: Some(raw),
            ground_truth: Some(gt),
            generator_seed: Some(self.seed),
        };
        manifest.write(dir)?;
        Ok(manifest)
    }
}
