//! Three-phase optimization of highlight, albedo and shading layers.
//!
//! Every image `I` gets two unconstrained fields: `u` with
//! `H = I * sigmoid(u)` and `v` with `S = softplus(v) + eps_s`. The
//! diffuse part is `D = I - H` and the albedo is `A = D / S`, so
//! `0 <= H <= I`, `S > 0` and `H + A * S = I` hold by construction.
//!
//! 1. Highlight phase: `u` minimizes the chromaticity low-rank loss of the
//!    diffuse estimates plus a highlight sparsity term.
//! 2. Shading phase: `v` minimizes the albedo low-rank loss plus a total
//!    variation term on `S`.
//! 3. Joint phase: both fields minimize the contrastive objective between
//!    the estimated albedos and the naive albedos `I / S`.
//!
//! Each phase runs plain Adam for a fixed number of steps and hands the
//! best iterate it visited to the next phase.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colordist::{CellLayout, GridSpec};
use crate::error::{Error, Result};
use crate::image::{ImageSet, LayerDecomposition, LinearImage, SHADING_EPS};
use crate::lowrank::{albedo_silr_raw, chroma_silr_raw, contrastive_objective};
use crate::optim::Adam;

pub const MIN_IMAGES: usize = 2;
pub const MAX_IMAGES: usize = 64;
pub const MIN_SIDE: usize = 64;
/// Initial highlight fraction `sigmoid(u)`.
pub const INITIAL_HIGHLIGHT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub highlight_iterations: usize,
    pub shading_iterations: usize,
    pub joint_iterations: usize,
    /// Adam step size for `u`, and for `v` outside the joint phase.
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Step size of `v` relative to `u` in the joint phase.
    pub joint_shading_step_ratio: f64,
    /// Weight of the extra albedo term in the joint objective.
    pub omega: f64,
    /// Weight of the mean highlight intensity.
    pub lambda_h: f64,
    /// Weight of the mean absolute forward difference of `S`.
    pub lambda_tv: f64,
    pub eps_s: f64,
    pub grid: GridSpec,
    /// The joint phase fails once mean diffuse intensity drops below this
    /// fraction of its value at the start of the phase.
    pub degenerate_fraction: f64,
    /// Recorded with results. The optimizer draws no random numbers.
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            highlight_iterations: 500,
            shading_iterations: 500,
            joint_iterations: 300,
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            joint_shading_step_ratio: 2.0,
            omega: 1.0,
            lambda_h: 1e-3,
            lambda_tv: 30.0,
            eps_s: SHADING_EPS,
            grid: GridSpec::default(),
            degenerate_fraction: 0.01,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(m.to_string()));
        if self.highlight_iterations == 0 || self.shading_iterations == 0 || self.joint_iterations == 0 {
            return bad("every phase needs at least one iteration");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.joint_shading_step_ratio > 0.0 && self.joint_shading_step_ratio.is_finite()) {
            return bad("joint shading step ratio must be positive");
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad("omega must be non-negative");
        }
        if !(self.lambda_h >= 0.0 && self.lambda_tv >= 0.0) || !(self.lambda_h + self.lambda_tv).is_finite() {
            return bad("regularizer weights must be non-negative");
        }
        if !(self.eps_s > 0.0 && self.eps_s.is_finite()) {
            return bad("eps_s must be positive");
        }
        if !(0.0..1.0).contains(&self.degenerate_fraction) {
            return bad("degenerate fraction must lie in [0, 1)");
        }
        GridSpec::new(self.grid.cells_x, self.grid.cells_y)?;
        Ok(())
    }

    fn iterations(&self, phase: Phase) -> usize {
        match phase {
            Phase::Highlight => self.highlight_iterations,
            Phase::Shading => self.shading_iterations,
            Phase::Joint => self.joint_iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Highlight,
    Shading,
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Highlight, Phase::Shading, Phase::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Highlight => "highlight",
            Phase::Shading => "shading",
            Phase::Joint => "joint",
        }
    }

    pub fn updates_u(self) -> bool {
        self != Phase::Shading
    }

    pub fn updates_v(self) -> bool {
        self != Phase::Highlight
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown phase {s:?}")))
    }
}

/// Per-iteration objective values of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub phase: Phase,
    /// Objective before step `k` is `losses[k]`; the last entry is after
    /// the final step.
    pub losses: Vec<f64>,
    pub best_iteration: usize,
}

impl PhaseTrace {
    pub fn initial(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    /// Objective of the iterate the phase returned.
    pub fn best(&self) -> f64 {
        self.losses.get(self.best_iteration).copied().unwrap_or(f64::NAN)
    }
}

/// Unconstrained fields, one interleaved RGB raster per image.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompVariables {
    pub width: usize,
    pub height: usize,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl DecompVariables {
    fn check(&self, set: &ImageSet) -> Result<()> {
        let (w, h) = set.dims();
        let len = w * h * 3;
        if (self.width, self.height) != (w, h)
            || self.u.len() != set.len()
            || self.v.len() != set.len()
            || self.u.iter().chain(&self.v).any(|f| f.len() != len)
        {
            return Err(Error::Shape(format!(
                "variables for {} images of {}x{} do not fit a set of {} images of {w}x{h}",
                self.u.len(),
                self.width,
                self.height,
                set.len()
            )));
        }
        Ok(())
    }

    /// Layers implied by the fields. The diffuse layer is `I - H`.
    pub fn layers(&self, set: &ImageSet, eps_s: f64) -> Result<Vec<LayerDecomposition>> {
        self.check(set)?;
        let (w, h) = set.dims();
        Ok(set
            .images()
            .par_iter()
            .zip(&self.u)
            .zip(&self.v)
            .map(|((img, u), v)| {
                let i = img.data();
                let hl: Vec<f64> = i.iter().zip(u).map(|(x, u)| x * sigmoid(*u)).collect();
                let d: Vec<f64> = i.iter().zip(&hl).map(|(x, h)| (x - h).max(0.0)).collect();
                let s: Vec<f64> = v.iter().map(|v| softplus(*v) + eps_s).collect();
                let a: Vec<f64> = d.iter().zip(&s).map(|(d, s)| d / s).collect();
                LayerDecomposition {
                    highlight: LinearImage::from_raw(w, h, hl),
                    albedo: LinearImage::from_raw(w, h, a),
                    shading: LinearImage::from_raw(w, h, s),
                    diffuse: LinearImage::from_raw(w, h, d),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct DecompResult {
    pub layers: Vec<LayerDecomposition>,
    pub variables: DecompVariables,
    pub traces: Vec<PhaseTrace>,
    /// Albedo low-rank loss of the estimated albedos.
    pub l1: f64,
    /// Albedo low-rank loss of the naive albedos `I / S`.
    pub l0: f64,
}

impl DecompResult {
    pub fn contrast(&self) -> f64 {
        self.l1 - self.l0
    }
}

/// Objective value, its parts and gradients with respect to `u` and `v`.
/// Gradients of fields a phase does not update are empty.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub phase: Phase,
    pub value: f64,
    /// Chromaticity loss, albedo loss or contrastive objective, by phase.
    pub data_term: f64,
    pub sparsity: f64,
    pub tv: f64,
    pub l1: Option<f64>,
    pub l0: Option<f64>,
    /// Mean of `I - H` over masked values.
    pub mean_diffuse: f64,
    pub grad_u: Vec<Vec<f64>>,
    pub grad_v: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(softplus(x), sigmoid(x))` from a single exponential.
fn softplus_sigmoid(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let sg = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sg)
}

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fixed per-set data shared by all objective evaluations.
struct Problem<'a> {
    set: &'a ImageSet,
    cfg: &'a OptimConfig,
    layout: CellLayout,
    /// Masked-pixel indicator, per pixel.
    masked: Vec<bool>,
    /// Number of masked values over the whole set.
    masked_values: f64,
    /// Sum of all masked image values.
    masked_sum: f64,
    /// Horizontal and vertical neighbour pairs with both pixels masked.
    pairs: Vec<(usize, usize)>,
}

impl<'a> Problem<'a> {
    fn new(set: &'a ImageSet, cfg: &'a OptimConfig) -> Result<Self> {
        cfg.validate()?;
        let mask = set.mask();
        mask.require_nonempty()?;
        let layout = CellLayout::new(cfg.grid, mask)?;
        let (w, h) = set.dims();
        let mut pairs = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) {
                    continue;
                }
                let p = y * w + x;
                if x + 1 < w && mask.get(x + 1, y) {
                    pairs.push((p, p + 1));
                }
                if y + 1 < h && mask.get(x, y + 1) {
                    pairs.push((p, p + w));
                }
            }
        }
        let masked_sum = set
            .images()
            .iter()
            .map(|img| {
                img.data()
                    .chunks_exact(3)
                    .zip(mask.bits())
                    .filter(|(_, m)| **m)
                    .map(|(i, _)| i[0] + i[1] + i[2])
                    .sum::<f64>()
            })
            .sum();
        Ok(Self {
            set,
            cfg,
            layout,
            masked_sum,
            masked: mask.bits().to_vec(),
            masked_values: (mask.count() * 3 * set.len()) as f64,
            pairs,
        })
    }

    fn tv_count(&self) -> f64 {
        (self.pairs.len() * 3 * self.set.len()) as f64
    }

    /// Mean absolute forward difference of `S`, with its gradient added
    /// into `grad` scaled by `weight`.
    fn tv(&self, s: &[f64], weight: f64, grad: Option<&mut [f64]>) -> f64 {
        let n = self.tv_count();
        if n == 0.0 {
            return 0.0;
        }
        let mut sum = 0.0;
        match grad {
            Some(g) => {
                let k = weight / n;
                for &(p, q) in &self.pairs {
                    for c in 0..3 {
                        let d = s[3 * q + c] - s[3 * p + c];
                        sum += d.abs();
                        let sg = if d > 0.0 {
                            k
                        } else if d < 0.0 {
                            -k
                        } else {
                            0.0
                        };
                        g[3 * q + c] += sg;
                        g[3 * p + c] -= sg;
                    }
                }
            }
            None => {
                for &(p, q) in &self.pairs {
                    for c in 0..3 {
                        sum += (s[3 * q + c] - s[3 * p + c]).abs();
                    }
                }
            }
        }
        sum / n
    }

    fn evaluate(&self, phase: Phase, vars: &DecompVariables) -> Result<Evaluation> {
        vars.check(self.set)?;
        let eps_s = self.cfg.eps_s;
        let images = self.set.images();
        let sig: Vec<Vec<f64>> = vars.u.par_iter().map(|u| u.iter().map(|x| sigmoid(*x)).collect()).collect();
        let diffuse: Vec<Vec<f64>> = images
            .par_iter()
            .zip(&sig)
            .map(|(img, s)| img.data().iter().zip(s).map(|(i, s)| i - i * s).collect())
            .collect();
        let sparsity: f64 = images
            .iter()
            .zip(&sig)
            .map(|(img, s)| {
                img.data()
                    .chunks_exact(3)
                    .zip(s.chunks_exact(3))
                    .zip(&self.masked)
                    .filter(|(_, m)| **m)
                    .map(|((i, s), _)| i[0] * s[0] + i[1] * s[1] + i[2] * s[2])
                    .sum::<f64>()
            })
            .sum::<f64>()
            / self.masked_values;

        // dObjective/dD and dObjective/dS per image; u and v gradients follow.
        let (data_term, l1, l0, g_diffuse, g_shading, shading_v, dshading): (f64, _, _, Option<Vec<Vec<f64>>>, Option<Vec<Vec<f64>>>, _, _);
        match phase {
            Phase::Highlight => {
                let refs: Vec<&[f64]> = diffuse.iter().map(|d| d.as_slice()).collect();
                let loss = chroma_silr_raw(&refs, self.set.reference_index(), self.set.mask(), &self.layout)?;
                data_term = loss.value;
                l1 = None;
                l0 = None;
                g_diffuse = Some(loss.grads);
                g_shading = None;
                shading_v = None;
                dshading = None;
            }
            Phase::Shading | Phase::Joint => {
                let (shading, ds): (Vec<Vec<f64>>, Vec<Vec<f64>>) = vars
                    .v
                    .par_iter()
                    .map(|v| {
                        v.iter()
                            .map(|x| {
                                let (sp, sg) = softplus_sigmoid(*x);
                                (sp + eps_s, sg)
                            })
                            .unzip()
                    })
                    .unzip();
                let albedo: Vec<Vec<f64>> = diffuse
                    .par_iter()
                    .zip(&shading)
                    .map(|(d, s)| d.iter().zip(s).map(|(d, s)| d / s).collect())
                    .collect();
                let refs: Vec<&[f64]> = albedo.iter().map(|a| a.as_slice()).collect();
                let loss1 = albedo_silr_raw(&refs, &self.layout)?;
                if phase == Phase::Shading {
                    data_term = loss1.value;
                    l1 = Some(loss1.value);
                    l0 = None;
                    let gs = loss1
                        .grads
                        .par_iter()
                        .zip(&diffuse)
                        .zip(&shading)
                        .map(|((g, d), s)| g.iter().zip(d).zip(s).map(|((g, d), s)| -g * d / (s * s)).collect())
                        .collect();
                    g_diffuse = None;
                    g_shading = Some(gs);
                } else {
                    let naive: Vec<Vec<f64>> = images
                        .par_iter()
                        .zip(&shading)
                        .map(|(img, s)| img.data().iter().zip(s).map(|(i, s)| i / s).collect())
                        .collect();
                    let refs: Vec<&[f64]> = naive.iter().map(|a| a.as_slice()).collect();
                    let loss0 = albedo_silr_raw(&refs, &self.layout)?;
                    let ct = contrastive_objective(&loss1, &loss0, self.cfg.omega);
                    data_term = ct.value;
                    l1 = Some(ct.l1);
                    l0 = Some(ct.l0);
                    let gd = ct
                        .grad_l1
                        .par_iter()
                        .zip(&shading)
                        .map(|(g, s)| g.iter().zip(s).map(|(g, s)| g / s).collect())
                        .collect();
                    let gs = (0..images.len())
                        .into_par_iter()
                        .map(|k| {
                            let (g1, g0) = (&ct.grad_l1[k], &ct.grad_l0[k]);
                            let (d, s, i) = (&diffuse[k], &shading[k], images[k].data());
                            (0..s.len()).map(|j| -(g1[j] * d[j] + g0[j] * i[j]) / (s[j] * s[j])).collect()
                        })
                        .collect();
                    g_diffuse = Some(gd);
                    g_shading = Some(gs);
                }
                shading_v = Some(shading);
                dshading = Some(ds);
            }
        }

        let mut tv = 0.0;
        let grad_v = match (g_shading, &shading_v, dshading) {
            (Some(mut gs), Some(shading), Some(ds)) => {
                let weight = self.cfg.lambda_tv;
                let tvs: Vec<f64> = gs
                    .iter_mut()
                    .zip(shading)
                    .map(|(g, s)| self.tv(s, weight, Some(g)))
                    .collect();
                tv = tvs.iter().sum();
                gs.par_iter_mut().zip(&ds).for_each(|(g, ds)| {
                    for (g, d) in g.iter_mut().zip(ds) {
                        *g *= d;
                    }
                });
                gs
            }
            _ => Vec::new(),
        };

        let grad_u = match g_diffuse {
            Some(mut gd) => {
                let k = self.cfg.lambda_h / self.masked_values;
                gd.par_iter_mut().zip(images).zip(&sig).for_each(|((g, img), s)| {
                    for (j, ((g, i), s)) in g.iter_mut().zip(img.data()).zip(s).enumerate() {
                        let reg = if self.masked[j / 3] { k } else { 0.0 };
                        *g = (reg - *g) * i * s * (1.0 - s);
                    }
                });
                gd
            }
            None => Vec::new(),
        };

        let value = match phase {
            Phase::Highlight => data_term + self.cfg.lambda_h * sparsity,
            Phase::Shading => data_term + self.cfg.lambda_tv * tv,
            Phase::Joint => data_term + self.cfg.lambda_h * sparsity + self.cfg.lambda_tv * tv,
        };
        Ok(Evaluation {
            phase,
            value,
            data_term,
            sparsity,
            tv,
            l1,
            l0,
            mean_diffuse: (self.masked_sum / self.masked_values - sparsity).max(0.0),
            grad_u,
            grad_v,
        })
    }

    fn check_degenerate(&self, phase: Phase, iteration: usize, initial: f64, d: f64) -> Result<()> {
        let threshold = self.cfg.degenerate_fraction * initial;
        if d < threshold {
            return Err(Error::Degenerate {
                phase: phase.name(),
                iteration,
                mean_diffuse: d,
                threshold,
                traces: Vec::new(),
            });
        }
        Ok(())
    }

    fn run(&self, phase: Phase, mut vars: DecompVariables, prior: &[PhaseTrace]) -> Result<(DecompVariables, PhaseTrace)> {
        vars.check(self.set)?;
        let cfg = self.cfg;
        let iterations = cfg.iterations(phase);
        let lr_v = if phase == Phase::Joint {
            cfg.step_size * cfg.joint_shading_step_ratio
        } else {
            cfg.step_size
        };
        let len = vars.u.first().map_or(0, Vec::len);
        let mut adam_u: Vec<Adam> = if phase.updates_u() {
            (0..vars.u.len()).map(|_| Adam::new(len, cfg.step_size, cfg.beta1, cfg.beta2)).collect()
        } else {
            Vec::new()
        };
        let mut adam_v: Vec<Adam> = if phase.updates_v() {
            (0..vars.v.len()).map(|_| Adam::new(len, lr_v, cfg.beta1, cfg.beta2)).collect()
        } else {
            Vec::new()
        };
        let mut trace = PhaseTrace {
            phase,
            losses: Vec::with_capacity(iterations + 1),
            best_iteration: 0,
        };
        let all_traces = |trace: &PhaseTrace| {
            let mut t = prior.to_vec();
            t.push(trace.clone());
            t
        };
        let mut initial_diffuse = None;
        let mut best = vars.clone();
        let mut best_value = f64::INFINITY;

        for iteration in 0..=iterations {
            let eval = self.evaluate(phase, &vars)?;
            let finite = eval.value.is_finite()
                && eval.grad_u.iter().chain(&eval.grad_v).all(|g| g.iter().all(|x| x.is_finite()));
            if !finite {
                return Err(Error::NonFinite {
                    phase: phase.name(),
                    iteration,
                    traces: all_traces(&trace),
                });
            }
            trace.losses.push(eval.value);
            if phase == Phase::Joint {
                let d0 = *initial_diffuse.get_or_insert(eval.mean_diffuse);
                self.check_degenerate(phase, iteration, d0, eval.mean_diffuse)
                    .map_err(|e| e.with_traces(all_traces(&trace)))?;
            }
            if eval.value < best_value {
                best_value = eval.value;
                trace.best_iteration = iteration;
                if iteration > 0 {
                    // Only the fields this phase moves can differ from `best`.
                    if phase.updates_u() {
                        best.u.clone_from(&vars.u);
                    }
                    if phase.updates_v() {
                        best.v.clone_from(&vars.v);
                    }
                }
            }
            if iteration == iterations {
                break;
            }
            adam_u
                .par_iter_mut()
                .zip(&mut vars.u)
                .zip(&eval.grad_u)
                .for_each(|((a, u), g)| a.step(u, g));
            adam_v
                .par_iter_mut()
                .zip(&mut vars.v)
                .zip(&eval.grad_v)
                .for_each(|((a, v), g)| a.step(v, g));
        }
        Ok((best, trace))
    }
}

/// Objective of `phase` at `vars`, with gradients.
pub fn objective(set: &ImageSet, cfg: &OptimConfig, phase: Phase, vars: &DecompVariables) -> Result<Evaluation> {
    Problem::new(set, cfg)?.evaluate(phase, vars)
}

/// `sigmoid(u) = 0.01` and `S` equal to the pixel luminance, floored at
/// `eps_s`, in all three channels.
pub fn init_variables(set: &ImageSet, cfg: &OptimConfig) -> Result<DecompVariables> {
    cfg.validate()?;
    let (width, height) = set.dims();
    let u0 = logit(INITIAL_HIGHLIGHT_FRACTION);
    let u = vec![vec![u0; width * height * 3]; set.len()];
    let v = set
        .images()
        .iter()
        .map(|img| {
            img.luminance()
                .into_iter()
                .flat_map(|l| {
                    // softplus(v) must stay positive; very dark pixels land a
                    // hair above eps_s.
                    let t = (l - cfg.eps_s).max(1e-6);
                    [softplus_inv(t); 3]
                })
                .collect()
        })
        .collect();
    Ok(DecompVariables { width, height, u, v })
}

pub fn phase_h(set: &ImageSet, vars: DecompVariables, cfg: &OptimConfig) -> Result<(DecompVariables, PhaseTrace)> {
    Problem::new(set, cfg)?.run(Phase::Highlight, vars, &[])
}

pub fn phase_s(set: &ImageSet, vars: DecompVariables, cfg: &OptimConfig) -> Result<(DecompVariables, PhaseTrace)> {
    Problem::new(set, cfg)?.run(Phase::Shading, vars, &[])
}

pub fn phase_joint(set: &ImageSet, vars: DecompVariables, cfg: &OptimConfig) -> Result<(DecompVariables, PhaseTrace)> {
    Problem::new(set, cfg)?.run(Phase::Joint, vars, &[])
}

/// Runs all three phases from the default initialization.
pub fn decompose(set: &ImageSet, cfg: &OptimConfig) -> Result<DecompResult> {
    let (w, h) = set.dims();
    if !(MIN_IMAGES..=MAX_IMAGES).contains(&set.len()) {
        return Err(Error::Precondition(format!(
            "a set must hold {MIN_IMAGES} to {MAX_IMAGES} images, got {}",
            set.len()
        )));
    }
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::Precondition(format!(
            "images must be at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}"
        )));
    }
    let problem = Problem::new(set, cfg)?;
    let mut vars = init_variables(set, cfg)?;
    let mut traces = Vec::with_capacity(3);
    for phase in Phase::ALL {
        let (next, trace) = problem.run(phase, vars, &traces)?;
        vars = next;
        traces.push(trace);
    }
    let layers = vars.layers(set, cfg.eps_s)?;
    for (layer, img) in layers.iter().zip(set.images()) {
        let bounded = layer
            .highlight
            .data()
            .iter()
            .zip(img.data())
            .all(|(h, i)| (0.0..=*i).contains(h));
        assert!(bounded, "highlight left [0, I]");
        assert!(layer.shading.data().iter().all(|s| *s > 0.0), "shading not positive");
    }
    let joint = problem.evaluate(Phase::Joint, &vars)?;
    Ok(DecompResult {
        layers,
        variables: vars,
        traces,
        l1: joint.l1.unwrap_or(f64::NAN),
        l0: joint.l0.unwrap_or(f64::NAN),
    })
}
