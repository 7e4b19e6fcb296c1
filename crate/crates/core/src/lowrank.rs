//! Scale-invariant low-rank loss `sigma_2 / sigma_1` and the consistency
//! losses built on it.
//!
//! Rows of the stacked matrix are per-image feature vectors; the loss is
//! zero exactly when all rows agree up to scale. Singular values come from
//! the small `k x k` Gram matrix, and the two needed right singular
//! vectors are recovered as `u^T M / sigma`, which keeps `sigma_2`
//! accurate to rounding even for rank-one inputs.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::colordist::{scatter_into, CellLayout, DistVector, GridSpec};
use crate::error::{Error, Result};
use crate::image::{
    chroma_backward_at, chroma_of, masked_median_chroma, match_backward, match_forward, ImageSet,
    LinearImage, PixelMask, CHROMA_EPS,
};

/// Singular values below this are treated as an all-zero matrix.
pub const DEFAULT_EPS_SV: f64 = 1e-8;

/// `k x n` matrix of stacked feature rows, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StackMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl StackMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows < 2 {
            return Err(Error::Precondition(format!("need at least 2 rows, got {rows}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }
}

/// Loss value and its gradient with respect to every matrix entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Row-major, same shape as the input matrix.
    pub grad: Vec<f64>,
}

/// Stacks equal-length vectors as rows.
pub fn stack<V: AsRef<[f64]>>(vectors: &[V]) -> Result<StackMatrix> {
    if vectors.len() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 vectors to stack, got {}",
            vectors.len()
        )));
    }
    let cols = vectors[0].as_ref().len();
    let mut data = Vec::with_capacity(cols * vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != cols {
            return Err(Error::Shape(format!(
                "vector {i} has length {}, expected {cols}",
                v.len()
            )));
        }
        data.extend_from_slice(v);
    }
    StackMatrix::new(vectors.len(), cols, data)
}

/// Relative `sigma_2` below which a stack counts as exactly rank one.
pub const RANK_ONE_TOL: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sigma_2 / sigma_1` of `m` with gradient
/// `(sigma_1 u_2 v_2^T - sigma_2 u_1 v_1^T) / sigma_1^2`.
///
/// Singular vectors are sign-fixed so the first entry of each left vector
/// is non-negative. If `sigma_1 < eps_sv` the loss and gradient are zero.
/// When `sigma_2` is at rounding level (below `RANK_ONE_TOL * sigma_1`)
/// `u_2` is noise, so its term is dropped and the gradient is the
/// `-sigma_2 u_1 v_1^T / sigma_1^2` part alone.
pub fn silr(m: &StackMatrix, eps_sv: f64) -> Result<LossReport> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("matrix has non-finite entries".into()));
    }
    let k = m.rows;
    let rows: Vec<&[f64]> = (0..k).map(|i| m.row(i)).collect();
    let gram = DMatrix::from_fn(k, k, |a, b| if a <= b { dot(rows[a], rows[b]) } else { 0.0 });
    let gram = DMatrix::from_fn(k, k, |a, b| if a <= b { gram[(a, b)] } else { gram[(b, a)] });
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let left = |j: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[j]);
        let mut u: Vec<f64> = col.iter().copied().collect();
        if u[0] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        u
    };
    let u1 = left(0);
    let u2 = left(1);
    // w_j = u_j^T M = sigma_j v_j
    let project = |u: &[f64]| -> Vec<f64> {
        let mut w = vec![0.0; m.cols];
        for (i, ui) in u.iter().enumerate() {
            for (wj, mij) in w.iter_mut().zip(rows[i]) {
                *wj += ui * mij;
            }
        }
        w
    };
    let w1 = project(&u1);
    let sigma1 = dot(&w1, &w1).sqrt();
    if sigma1 < eps_sv {
        return Ok(LossReport {
            value: 0.0,
            sigma1,
            sigma2: 0.0,
            grad: vec![0.0; m.data.len()],
        });
    }
    let w2 = project(&u2);
    let sigma2 = dot(&w2, &w2).sqrt();
    let value = (sigma2 / sigma1).min(1.0);

    // grad_ij = (sigma1 u2_i v2_j - sigma2 u1_i v1_j) / sigma1^2
    //         = (u2_i w2_j sigma1 / sigma2 - u1_i w1_j sigma2 / sigma1) / sigma1^2
    let c1 = sigma2 / (sigma1 * sigma1 * sigma1);
    let c2 = if sigma2 > RANK_ONE_TOL * sigma1 { 1.0 / (sigma1 * sigma2) } else { 0.0 };
    let mut grad = vec![0.0; m.data.len()];
    for i in 0..k {
        let a = u2[i] * c2;
        let b = u1[i] * c1;
        let row = &mut grad[i * m.cols..(i + 1) * m.cols];
        for ((g, x2), x1) in row.iter_mut().zip(&w2).zip(&w1) {
            *g = a * x2 - b * x1;
        }
    }
    Ok(LossReport {
        value,
        sigma1,
        sigma2,
        grad,
    })
}

/// A set-level loss with its gradient chained back to every input image.
/// `grads[i]` is an interleaved RGB raster for image `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainedLoss {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Low-rank consistency of diffuse chromaticity.
///
/// Each estimate is channel-rescaled so its median chromaticity matches the
/// reference estimate, converted to `(Ch_r, Ch_g)`, reordered per cell and
/// stacked (`Ch_r` and `Ch_g` runs concatenated in one row per image).
pub fn chroma_silr_loss(
    diffuse_estimates: &[LinearImage],
    set: &ImageSet,
    grid: GridSpec,
) -> Result<ChainedLoss> {
    if diffuse_estimates.len() != set.len() {
        return Err(Error::Shape(format!(
            "{} diffuse estimates for a set of {} views",
            diffuse_estimates.len(),
            set.len()
        )));
    }
    for d in diffuse_estimates {
        d.check_dims(set.reference(), "diffuse estimate vs set")?;
    }
    let layout = CellLayout::new(grid, set.mask())?;
    let data: Vec<&[f64]> = diffuse_estimates.iter().map(|d| d.data()).collect();
    chroma_silr_raw(&data, set.reference_index(), set.mask(), &layout)
}

/// Low-rank consistency of albedo color distributions (RGB runs
/// concatenated per image).
pub fn albedo_silr_loss(albedos: &[LinearImage], mask: &PixelMask, grid: GridSpec) -> Result<ChainedLoss> {
    if albedos.len() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 albedo layers, got {}",
            albedos.len()
        )));
    }
    for a in albedos {
        mask.check_image(a)?;
    }
    let layout = CellLayout::new(grid, mask)?;
    let data: Vec<&[f64]> = albedos.iter().map(|a| a.data()).collect();
    albedo_silr_raw(&data, &layout)
}

pub(crate) fn albedo_silr_raw(albedos: &[&[f64]], layout: &CellLayout) -> Result<ChainedLoss> {
    let dvs: Vec<DistVector> = albedos
        .par_iter()
        .map(|a| layout.reorder(a, 3))
        .collect::<Result<_>>()?;
    let rows: Vec<&[f64]> = dvs.iter().map(|d| d.values.as_slice()).collect();
    let report = silr(&stack(&rows)?, DEFAULT_EPS_SV)?;
    let n = report.grad.len() / dvs.len();
    let grads = dvs
        .par_iter()
        .enumerate()
        .map(|(i, dv)| {
            let mut g = vec![0.0; dv.width * dv.height * 3];
            scatter_into(&report.grad[i * n..(i + 1) * n], dv, &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    Ok(ChainedLoss {
        value: report.value,
        grads,
    })
}

pub(crate) fn chroma_silr_raw(
    diffuse: &[&[f64]],
    reference: usize,
    mask: &PixelMask,
    layout: &CellLayout,
) -> Result<ChainedLoss> {
    let idx: Vec<usize> = mask.indices().collect();
    if idx.is_empty() {
        return Err(Error::Domain("mask selects no pixels".into()));
    }
    let target = masked_median_chroma(diffuse[reference], [1.0; 3], &idx);

    struct Forward {
        tape: Option<crate::image::MatchTape>,
        scale: [f64; 3],
        chroma: Vec<f64>,
        dv: DistVector,
    }
    let forward: Vec<Forward> = diffuse
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let tape = (i != reference).then(|| match_forward(d, &target, &idx));
            let scale = tape.as_ref().map_or([1.0; 3], |t| t.final_scale());
            let chroma: Vec<f64> = d
                .chunks_exact(3)
                .flat_map(|p| {
                    let (r, g) = chroma_of(p[0] * scale[0], p[1] * scale[1], p[2] * scale[2], CHROMA_EPS);
                    [r, g]
                })
                .collect();
            let dv = layout.reorder(&chroma, 2)?;
            Ok(Forward {
                tape,
                scale,
                chroma,
                dv,
            })
        })
        .collect::<Result<_>>()?;

    let rows: Vec<&[f64]> = forward.iter().map(|f| f.dv.values.as_slice()).collect();
    let report = silr(&stack(&rows)?, DEFAULT_EPS_SV)?;
    let n = report.grad.len() / forward.len();

    // Per image: gradient on the raw estimate plus the gradient on the
    // reference medians it was matched to.
    let partial: Vec<(Vec<f64>, [f64; 2])> = forward
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let d = diffuse[i];
            let mut g_chroma = vec![0.0; f.chroma.len()];
            scatter_into(&report.grad[i * n..(i + 1) * n], &f.dv, &mut g_chroma)?;
            let mut g = vec![0.0; d.len()];
            let mut g_scale = [0.0; 3];
            for p in 0..d.len() / 3 {
                let gc = [g_chroma[2 * p], g_chroma[2 * p + 1]];
                if gc[0] != 0.0 || gc[1] != 0.0 {
                    chroma_backward_at(d, p, f.scale, gc, &mut g, Some(&mut g_scale));
                }
            }
            let g_target = match &f.tape {
                Some(tape) => match_backward(tape, d, &target, g_scale, &mut g),
                None => [0.0; 2],
            };
            Ok((g, g_target))
        })
        .collect::<Result<_>>()?;

    let mut g_target = [0.0; 2];
    let mut grads = Vec::with_capacity(partial.len());
    for (g, gt) in partial {
        g_target[0] += gt[0];
        g_target[1] += gt[1];
        grads.push(g);
    }
    let refd = diffuse[reference];
    chroma_backward_at(refd, target.pixel[0], [1.0; 3], [g_target[0], 0.0], &mut grads[reference], None);
    chroma_backward_at(refd, target.pixel[1], [1.0; 3], [0.0, g_target[1]], &mut grads[reference], None);

    Ok(ChainedLoss {
        value: report.value,
        grads,
    })
}

/// `L_ct + omega * L_1` with `L_ct = L_1 - L_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub l1: f64,
    pub l0: f64,
    pub omega: f64,
    /// `(1 + omega) * dL_1`, per image.
    pub grad_l1: Vec<Vec<f64>>,
    /// `-dL_0`, per image.
    pub grad_l0: Vec<Vec<f64>>,
}

impl ContrastiveLoss {
    pub fn contrast(&self) -> f64 {
        self.l1 - self.l0
    }
}

pub fn contrastive_objective(l1: &ChainedLoss, l0: &ChainedLoss, omega: f64) -> ContrastiveLoss {
    let w1 = 1.0 + omega;
    ContrastiveLoss {
        value: (l1.value - l0.value) + omega * l1.value,
        l1: l1.value,
        l0: l0.value,
        omega,
        grad_l1: l1
            .grads
            .iter()
            .map(|g| g.iter().map(|v| w1 * v).collect())
            .collect(),
        grad_l0: l0
            .grads
            .iter()
            .map(|g| g.iter().map(|v| -v).collect())
            .collect(),
    }
}
