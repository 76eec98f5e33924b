//! Lip-sync and facial-dynamics metrics over derived vertices, computed in
//! the reporting space (training scale undone by the caller).
//!
//! Units: LVE is squared meters (m^2), MVE/UFVE/LVD/FDD are meters. Report
//! CSV rows carry the unit per metric to prevent confusion; LVD is printed
//! in millimeters there.

use thiserror::Error;

use crate::numerics::{Real, Tensor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty vertex mask")]
    EmptyMask,
    #[error("shape mismatch: pred {pred:?} vs gt {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("mask index {0} out of range for {1} vertices")]
    BadMask(usize, usize),
}

fn check_pair<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(usize, usize), MetricsError> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 || pred.cols() % 3 != 0 {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            gt: gt.shape().to_vec(),
        });
    }
    Ok((pred.rows(), pred.cols() / 3))
}

fn check_mask(mask: &[usize], vertices: usize) -> Result<(), MetricsError> {
    if mask.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    if let Some(&bad) = mask.iter().find(|&&i| i >= vertices) {
        return Err(MetricsError::BadMask(bad, vertices));
    }
    Ok(())
}

fn sq_dist<T: Real>(a: &[T], b: &[T], v: usize) -> f64 {
    let mut s = 0.0f64;
    for c in 0..3 {
        let d = a[v * 3 + c].to_f64() - b[v * 3 + c].to_f64();
        s += d * d;
    }
    s
}

/// Lip vertex error: mean over frames of the maximal squared Euclidean
/// distance over the lip vertices. Units m^2.
pub fn lve<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, lip_mask: &[usize]) -> Result<f64, MetricsError> {
    let (frames, vertices) = check_pair(pred, gt)?;
    check_mask(lip_mask, vertices)?;
    if frames == 0 {
        return Err(MetricsError::TooFewFrames { need: 1, got: 0 });
    }
    let mut total = 0.0f64;
    for t in 0..frames {
        let (p, g) = (pred.row(t), gt.row(t));
        let mut worst = 0.0f64;
        for &v in lip_mask {
            worst = worst.max(sq_dist(p, g, v));
        }
        total += worst;
    }
    Ok(total / frames as f64)
}

/// Lip vertex distance: mean over frames of the maximal Euclidean distance
/// over the lip vertices. Units m (reported as mm).
pub fn lvd<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, lip_mask: &[usize]) -> Result<f64, MetricsError> {
    let (frames, vertices) = check_pair(pred, gt)?;
    check_mask(lip_mask, vertices)?;
    if frames == 0 {
        return Err(MetricsError::TooFewFrames { need: 1, got: 0 });
    }
    let mut total = 0.0f64;
    for t in 0..frames {
        let (p, g) = (pred.row(t), gt.row(t));
        let mut worst = 0.0f64;
        for &v in lip_mask {
            worst = worst.max(sq_dist(p, g, v));
        }
        total += worst.sqrt();
    }
    Ok(total / frames as f64)
}

fn mean_distance_over<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: &[usize],
) -> Result<f64, MetricsError> {
    let frames = pred.rows();
    if frames == 0 {
        return Err(MetricsError::TooFewFrames { need: 1, got: 0 });
    }
    let mut total = 0.0f64;
    for t in 0..frames {
        let (p, g) = (pred.row(t), gt.row(t));
        for &v in mask {
            total += sq_dist(p, g, v).sqrt();
        }
    }
    Ok(total / (frames * mask.len()) as f64)
}

/// Mean vertex error: mean Euclidean distance over frames and all vertices.
pub fn mve<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64, MetricsError> {
    let (_, vertices) = check_pair(pred, gt)?;
    let all: Vec<usize> = (0..vertices).collect();
    mean_distance_over(pred, gt, &all)
}

/// Upper-face vertex error: mean Euclidean distance over the upper mask.
pub fn ufve<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    upper_mask: &[usize],
) -> Result<f64, MetricsError> {
    let (_, vertices) = check_pair(pred, gt)?;
    check_mask(upper_mask, vertices)?;
    mean_distance_over(pred, gt, upper_mask)
}

/// Per-vertex dynamics: population standard deviation over frames of the
/// norm of the dynamic displacement (position minus the sequence's temporal
/// mean position of that vertex).
fn vertex_dynamics<T: Real>(seq: &Tensor<T>, v: usize) -> f64 {
    let frames = seq.rows();
    let mut mean = [0.0f64; 3];
    for t in 0..frames {
        for c in 0..3 {
            mean[c] += seq.row(t)[v * 3 + c].to_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= frames as f64);
    let mut norms = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut s = 0.0f64;
        for c in 0..3 {
            let d = seq.row(t)[v * 3 + c].to_f64() - mean[c];
            s += d * d;
        }
        norms.push(s.sqrt());
    }
    let mu: f64 = norms.iter().sum::<f64>() / frames as f64;
    let var: f64 = norms.iter().map(|n| (n - mu) * (n - mu)).sum::<f64>() / frames as f64;
    var.sqrt()
}

/// Upper-face dynamics deviation: mean over masked vertices of
/// `dyn(pred) - dyn(gt)`. Signed; zero when the dynamics statistics agree
/// even if the sequences differ frame-wise.
pub fn fdd<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    upper_mask: &[usize],
) -> Result<f64, MetricsError> {
    let (frames, vertices) = check_pair(pred, gt)?;
    check_mask(upper_mask, vertices)?;
    if frames < 2 {
        return Err(MetricsError::TooFewFrames { need: 2, got: frames });
    }
    let mut total = 0.0f64;
    for &v in upper_mask {
        total += vertex_dynamics(pred, v) - vertex_dynamics(gt, v);
    }
    Ok(total / upper_mask.len() as f64)
}

/// Mean per-frame vertex error curve (meters per frame).
pub fn per_frame_error<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<f64>, MetricsError> {
    let (frames, vertices) = check_pair(pred, gt)?;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let (p, g) = (pred.row(t), gt.row(t));
        let mut total = 0.0f64;
        for v in 0..vertices {
            total += sq_dist(p, g, v).sqrt();
        }
        out.push(total / vertices as f64);
    }
    Ok(out)
}

/// Per-vertex standard deviation of facial motion over a sequence set:
/// RMS deviation of each vertex around its pooled temporal mean.
pub fn motion_std_map<T: Real>(sequences: &[&Tensor<T>]) -> Result<Vec<f64>, MetricsError> {
    let first = sequences.first().ok_or(MetricsError::TooFewFrames { need: 1, got: 0 })?;
    let vertices = first.cols() / 3;
    let total_frames: usize = sequences.iter().map(|s| s.rows()).sum();
    if total_frames == 0 {
        return Err(MetricsError::TooFewFrames { need: 1, got: 0 });
    }
    let mut means = vec![0.0f64; vertices * 3];
    for seq in sequences {
        for t in 0..seq.rows() {
            for (m, &x) in means.iter_mut().zip(seq.row(t)) {
                *m += x.to_f64();
            }
        }
    }
    means.iter_mut().for_each(|m| *m /= total_frames as f64);
    let mut out = vec![0.0f64; vertices];
    for seq in sequences {
        for t in 0..seq.rows() {
            let row = seq.row(t);
            for v in 0..vertices {
                let mut s = 0.0f64;
                for c in 0..3 {
                    let d = row[v * 3 + c].to_f64() - means[v * 3 + c];
                    s += d * d;
                }
                out[v] += s;
            }
        }
    }
    for v in out.iter_mut() {
        *v = (*v / total_frames as f64).sqrt();
    }
    Ok(out)
}

/// Per-sequence evaluation, combined frame-weighted across a split.
#[derive(Clone, Debug)]
pub struct SequenceEval {
    pub frames: usize,
    pub lve: f64,
    pub mve: f64,
    pub ufve: f64,
    pub fdd: f64,
    pub lvd: f64,
}

pub fn evaluate_sequence<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    lip_mask: &[usize],
    upper_mask: &[usize],
) -> Result<SequenceEval, MetricsError> {
    Ok(SequenceEval {
        frames: pred.rows(),
        lve: lve(pred, gt, lip_mask)?,
        mve: mve(pred, gt)?,
        ufve: ufve(pred, gt, upper_mask)?,
        fdd: fdd(pred, gt, upper_mask)?,
        lvd: lvd(pred, gt, lip_mask)?,
    })
}

/// All five metrics plus the statistics maps for one convention and split.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub convention: u32,
    pub split: String,
    pub lve: f64,
    pub mve: f64,
    pub ufve: f64,
    pub fdd: f64,
    pub lvd: f64,
    pub sequences: usize,
    pub frames: usize,
    /// Per-vertex std of the predicted motion across the split.
    pub std_map: Vec<f64>,
    /// Mean per-frame vertex error, sequences concatenated.
    pub frame_error_curve: Vec<f64>,
}

/// Frame-weighted combination of per-sequence metrics (FDD is a
/// per-sequence statistic and averages per sequence).
pub fn combine(
    convention: u32,
    split: &str,
    evals: &[SequenceEval],
    std_map: Vec<f64>,
    frame_error_curve: Vec<f64>,
) -> Result<MetricsReport, MetricsError> {
    if evals.is_empty() {
        return Err(MetricsError::TooFewFrames { need: 1, got: 0 });
    }
    let frames: usize = evals.iter().map(|e| e.frames).sum();
    let wmean = |get: fn(&SequenceEval) -> f64| -> f64 {
        evals.iter().map(|e| get(e) * e.frames as f64).sum::<f64>() / frames as f64
    };
    Ok(MetricsReport {
        convention,
        split: split.to_string(),
        lve: wmean(|e| e.lve),
        mve: wmean(|e| e.mve),
        ufve: wmean(|e| e.ufve),
        fdd: evals.iter().map(|e| e.fdd).sum::<f64>() / evals.len() as f64,
        lvd: wmean(|e| e.lvd),
        sequences: evals.len(),
        frames,
        std_map,
        frame_error_curve,
    })
}

impl MetricsReport {
    /// `metric,value,units,convention,split` rows. LVD reported in mm.
    pub fn to_csv_rows(&self) -> String {
        format!(
            "lve,{:.9e},m^2,{},{}\nmve,{:.9e},m,{},{}\nufve,{:.9e},m,{},{}\nfdd,{:.9e},m,{},{}\nlvd,{:.9e},mm,{},{}\n",
            self.lve, self.convention, self.split,
            self.mve, self.convention, self.split,
            self.ufve, self.convention, self.split,
            self.fdd, self.convention, self.split,
            self.lvd * 1e3, self.convention, self.split,
        )
    }

    pub const CSV_HEADER: &'static str = "metric,value,units,convention,split\n";

    /// `vertex_index,std_m` rows for external plotting.
    pub fn std_map_csv(&self) -> String {
        let mut out = String::from("vertex_index,std_m\n");
        for (i, v) in self.std_map.iter().enumerate() {
            out.push_str(&format!("{i},{v:.9e}\n"));
        }
        out
    }
}
