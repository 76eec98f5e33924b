//! Incremental PCA over vertex-annotation frames, the PCA-value/vertex link
//! used by vertex decoder heads, and an exact-SVD oracle for acceptance
//! tests.
//!
//! The incremental path is the mean-augmented incremental SVD update
//! (forgetting factor 1): per batch, center by the batch mean, append a
//! mean-correction row, stack under the scaled current components,
//! re-orthogonalize via SVD and truncate. All fitting math runs in f64;
//! the checkpoint container stores bases as little-endian f32.

use thiserror::Error;

use crate::numerics::Rng;

/// Paper-scale defaults; desk-scale runs override these via flags.
pub const DEFAULT_COMPONENTS: usize = 512;
pub const DEFAULT_BATCH_SIZE: usize = 1024;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("need at least {need} frames to retain {need} components, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("frame dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value in input frames")]
    NonFinite,
    #[error("{0}")]
    Degenerate(String),
}

/// Where the fitted frames came from. The trainer only accepts bases fitted
/// on the training split, so test frames can never leak into the basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisProvenance {
    TrainSplit,
    Unrestricted,
}

/// Mean vector plus orthonormal components linking PCA values and vertex
/// displacements.
#[derive(Clone, Debug)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `retained x dim`, row-major; rows orthonormal.
    pub components: Vec<f64>,
    /// Non-increasing.
    pub explained_variance: Vec<f64>,
    pub dim: usize,
    pub retained: usize,
    pub frames_seen: usize,
    pub provenance: BasisProvenance,
}

impl PcaBasis {
    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    /// `(x - mean) . W_L^T`: coordinates of a frame in the retained subspace.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, PcaError> {
        if x.len() != self.dim {
            return Err(PcaError::DimMismatch { expected: self.dim, got: x.len() });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.retained).map(|i| dot(&centered, self.component(i))).collect())
    }

    /// `y . W_L + mean`: the rank-L reconstruction of projected coordinates.
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>, PcaError> {
        if y.len() != self.retained {
            return Err(PcaError::DimMismatch { expected: self.retained, got: y.len() });
        }
        let mut out = self.mean.clone();
        for (i, &c) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.component(i)) {
                *o += c * w;
            }
        }
        Ok(out)
    }

    /// Worst entry deviation of `W_L W_L^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.retained {
            for j in i..self.retained {
                let g = dot(self.component(i), self.component(j));
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }

    /// Round every stored value through f32, matching what a checkpoint
    /// save/load cycle produces. Training always uses the quantized basis so
    /// fresh and resumed runs follow identical trajectories.
    pub fn quantized(&self) -> PcaBasis {
        let q = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<f64>>();
        PcaBasis {
            mean: q(&self.mean),
            components: q(&self.components),
            explained_variance: q(&self.explained_variance),
            ..self.clone()
        }
    }
}

/// Streaming fit state; feed shuffled frame batches, then `finish`.
pub struct IncrementalPca {
    dim: usize,
    retained: usize,
    mean: Vec<f64>,
    components: Vec<f64>,
    singular: Vec<f64>,
    frames_seen: usize,
}

impl IncrementalPca {
    pub fn new(dim: usize, retained: usize) -> Self {
        IncrementalPca {
            dim,
            retained,
            mean: vec![0.0; dim],
            components: Vec::new(),
            singular: Vec::new(),
            frames_seen: 0,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// One mean-augmented incremental SVD update.
    pub fn partial_fit(&mut self, batch: &[f64]) -> Result<(), PcaError> {
        if batch.is_empty() || batch.len() % self.dim != 0 {
            return Err(PcaError::DimMismatch {
                expected: self.dim,
                got: batch.len() % self.dim.max(1),
            });
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(PcaError::NonFinite);
        }
        let rows = batch.len() / self.dim;
        let d = self.dim;
        let mut batch_mean = vec![0.0; d];
        for r in 0..rows {
            for c in 0..d {
                batch_mean[c] += batch[r * d + c];
            }
        }
        batch_mean.iter_mut().for_each(|v| *v /= rows as f64);

        let n_old = self.frames_seen as f64;
        let n_new = rows as f64;
        let n_tot = n_old + n_new;

        let rank = self.singular.len();
        let extra = if self.frames_seen == 0 { 0 } else { 1 };
        let mut stack = Vec::with_capacity((rank + rows + extra) * d);
        for i in 0..rank {
            let s = self.singular[i];
            stack.extend(self.components[i * d..(i + 1) * d].iter().map(|&v| v * s));
        }
        for r in 0..rows {
            for c in 0..d {
                stack.push(batch[r * d + c] - batch_mean[c]);
            }
        }
        if self.frames_seen > 0 {
            let corr = (n_old * n_new / n_tot).sqrt();
            for c in 0..d {
                stack.push(corr * (self.mean[c] - batch_mean[c]));
            }
        }
        let stack_rows = rank + rows + extra;
        let (sigma, vt) = svd_values_and_rows(&mut stack, stack_rows, d);
        let keep = self.retained.min(sigma.len());
        self.singular = sigma[..keep].to_vec();
        self.components = vt[..keep * d].to_vec();
        for c in 0..d {
            self.mean[c] = (n_old * self.mean[c] + n_new * batch_mean[c]) / n_tot;
        }
        self.frames_seen += rows;
        Ok(())
    }

    pub fn finish(self, provenance: BasisProvenance) -> Result<PcaBasis, PcaError> {
        if self.frames_seen < self.retained {
            return Err(PcaError::TooFewFrames { need: self.retained, got: self.frames_seen });
        }
        let denom = (self.frames_seen - 1).max(1) as f64;
        let explained_variance: Vec<f64> = self.singular.iter().map(|s| s * s / denom).collect();
        Ok(PcaBasis {
            mean: self.mean,
            components: self.components,
            explained_variance,
            dim: self.dim,
            retained: self.retained,
            frames_seen: self.frames_seen,
            provenance,
        })
    }
}

/// Fit on a pre-shuffled frame stream (row-major `frames x dim`).
pub fn fit_incremental(
    frames: &[f64],
    dim: usize,
    retained: usize,
    batch_size: usize,
    provenance: BasisProvenance,
) -> Result<PcaBasis, PcaError> {
    if dim == 0 || frames.len() % dim != 0 {
        return Err(PcaError::DimMismatch { expected: dim, got: frames.len() % dim.max(1) });
    }
    let total = frames.len() / dim;
    if total < retained {
        return Err(PcaError::TooFewFrames { need: retained, got: total });
    }
    let mut state = IncrementalPca::new(dim, retained);
    for chunk in frames.chunks(batch_size.max(1) * dim) {
        state.partial_fit(chunk)?;
    }
    state.finish(provenance)
}

/// Exact oracle: center by the mean, full SVD, top-L right singular vectors.
pub fn fit_exact(
    frames: &[f64],
    dim: usize,
    retained: usize,
    provenance: BasisProvenance,
) -> Result<PcaBasis, PcaError> {
    if dim == 0 || frames.len() % dim != 0 {
        return Err(PcaError::DimMismatch { expected: dim, got: frames.len() % dim.max(1) });
    }
    let rows = frames.len() / dim;
    if rows < 2 {
        return Err(PcaError::Degenerate(format!("exact fit needs >= 2 frames, got {rows}")));
    }
    if rows < retained {
        return Err(PcaError::TooFewFrames { need: retained, got: rows });
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(PcaError::NonFinite);
    }
    let mut mean = vec![0.0; dim];
    for r in 0..rows {
        for c in 0..dim {
            mean[c] += frames[r * dim + c];
        }
    }
    mean.iter_mut().for_each(|v| *v /= rows as f64);
    let mut centered = Vec::with_capacity(frames.len());
    for r in 0..rows {
        for c in 0..dim {
            centered.push(frames[r * dim + c] - mean[c]);
        }
    }
    let (sigma, vt) = svd_values_and_rows(&mut centered, rows, dim);
    let keep = retained.min(sigma.len());
    let explained_variance: Vec<f64> =
        sigma[..keep].iter().map(|s| s * s / (rows - 1) as f64).collect();
    Ok(PcaBasis {
        mean,
        components: vt[..keep * dim].to_vec(),
        explained_variance,
        dim,
        retained: keep,
        frames_seen: rows,
        provenance,
    })
}

/// All singular values of the centered data squared and scaled to variances,
/// for bounds that need the discarded tail of the spectrum.
pub fn full_spectrum_variances(frames: &[f64], dim: usize) -> Result<Vec<f64>, PcaError> {
    let rows = frames.len() / dim;
    if rows < 2 {
        return Err(PcaError::Degenerate("spectrum needs >= 2 frames".into()));
    }
    let mut mean = vec![0.0; dim];
    for r in 0..rows {
        for c in 0..dim {
            mean[c] += frames[r * dim + c];
        }
    }
    mean.iter_mut().for_each(|v| *v /= rows as f64);
    let mut centered = Vec::with_capacity(frames.len());
    for r in 0..rows {
        for c in 0..dim {
            centered.push(frames[r * dim + c] - mean[c]);
        }
    }
    let (sigma, _) = svd_values_and_rows(&mut centered, rows, dim);
    Ok(sigma.iter().map(|s| s * s / (rows - 1) as f64).collect())
}

/// Largest principal angle (radians) between the row spaces of two bases
/// over the same ambient dimension. Component-wise comparison would be
/// wrong: signs and rotations within an eigenspace are arbitrary.
pub fn largest_principal_angle(a: &PcaBasis, b: &PcaBasis) -> Result<f64, PcaError> {
    if a.dim != b.dim {
        return Err(PcaError::DimMismatch { expected: a.dim, got: b.dim });
    }
    let (la, lb) = (a.retained, b.retained);
    let mut m = vec![0.0; la * lb];
    for i in 0..la {
        for j in 0..lb {
            m[i * lb + j] = dot(a.component(i), b.component(j));
        }
    }
    let (sigma, _) = svd_values_and_rows(&mut m, la, lb);
    let k = la.min(lb);
    let smallest_cos = sigma[..k].iter().copied().fold(f64::INFINITY, f64::min);
    Ok(smallest_cos.clamp(-1.0, 1.0).acos())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ── one-sided Jacobi SVD ─────────────────────────────────────────────────

/// Singular values (descending) and right singular vectors as rows of V^T.
/// `a` is destroyed. Wide matrices go through the transpose identity.
fn svd_values_and_rows(a: &mut [f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    if rows >= cols {
        jacobi_tall(a, rows, cols)
    } else {
        // A = U S V^T  =>  A^T = V S U^T: rotate the transpose and read
        // V (right vectors of A) off its orthogonalized columns.
        let mut at = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                at[j * rows + i] = a[i * cols + j];
            }
        }
        let sigma = jacobi_in_place(&mut at, cols, rows);
        let mut vt = vec![0.0; rows * cols];
        for (p, &s) in sigma.iter().enumerate() {
            if s > 0.0 {
                for c in 0..cols {
                    vt[p * cols + c] = at[c * rows + p] / s;
                }
            }
        }
        (sigma, vt)
    }
}

/// One-sided Jacobi on a tall matrix: returns (sigma desc, V^T rows).
fn jacobi_tall(a: &mut [f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = identity(cols);
    jacobi_sweeps(a, rows, cols, Some(&mut v));
    let norms: Vec<f64> = (0..cols).map(|c| col_norm(a, rows, cols, c)).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));
    let sigma: Vec<f64> = order.iter().map(|&c| norms[c]).collect();
    let mut vt = vec![0.0; cols * cols];
    for (p, &c) in order.iter().enumerate() {
        for r in 0..cols {
            vt[p * cols + r] = v[r * cols + c];
        }
    }
    (sigma, vt)
}

/// Rotate columns to orthogonality in place and sort them by norm
/// (descending). Afterwards column p equals `sigma_p * u_p`.
fn jacobi_in_place(a: &mut [f64], rows: usize, cols: usize) -> Vec<f64> {
    jacobi_sweeps(a, rows, cols, None);
    let norms: Vec<f64> = (0..cols).map(|c| col_norm(a, rows, cols, c)).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));
    let mut permuted = vec![0.0; rows * cols];
    for (p, &c) in order.iter().enumerate() {
        for r in 0..rows {
            permuted[r * cols + p] = a[r * cols + c];
        }
    }
    a.copy_from_slice(&permuted);
    order.iter().map(|&c| norms[c]).collect()
}

fn jacobi_sweeps(a: &mut [f64], rows: usize, cols: usize, mut v: Option<&mut [f64]>) {
    const TOL: f64 = 1e-13;
    const MAX_SWEEPS: usize = 60;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..rows {
                    let ai = a[r * cols + i];
                    let aj = a[r * cols + j];
                    alpha += ai * ai;
                    beta += aj * aj;
                    gamma += ai * aj;
                }
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let ai = a[r * cols + i];
                    let aj = a[r * cols + j];
                    a[r * cols + i] = c * ai - s * aj;
                    a[r * cols + j] = s * ai + c * aj;
                }
                if let Some(v) = v.as_deref_mut() {
                    for r in 0..cols {
                        let vi = v[r * cols + i];
                        let vj = v[r * cols + j];
                        v[r * cols + i] = c * vi - s * vj;
                        v[r * cols + j] = s * vi + c * vj;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn col_norm(a: &[f64], rows: usize, cols: usize, c: usize) -> f64 {
    (0..rows).map(|r| a[r * cols + c] * a[r * cols + c]).sum::<f64>().sqrt()
}

/// Synthetic rank-`r` data with optional isotropic noise, shared by unit and
/// acceptance tests.
pub fn synthetic_low_rank(
    rows: usize,
    dim: usize,
    rank: usize,
    noise: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let dirs: Vec<Vec<f64>> = (0..rank)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let n = dot(&v, &v).sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let mut out = vec![0.0; rows * dim];
    for row in 0..rows {
        for (k, dir) in dirs.iter().enumerate() {
            let c = rng.normal() * (rank - k) as f64;
            for (c_idx, &dv) in dir.iter().enumerate() {
                out[row * dim + c_idx] += c * dv;
            }
        }
        if noise > 0.0 {
            for c_idx in 0..dim {
                out[row * dim + c_idx] += rng.normal() * noise;
            }
        }
    }
    out
}
