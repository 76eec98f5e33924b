//! Stability-grid driver: trains one model per cell across decoder
//! channel counts, decoder architectures, and PCA / decoder-warm-up
//! toggles, recording converged or divergent per cell instead of crashing.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use crate::dataset::DatasetManifest;
use crate::model::{Checkpoint, DecoderArch, ModelConfig};

use super::{
    fit_train_bases, mean_predictor_baseline, prepare_dataset, TrainError, TrainPlan, Trainer,
};
use crate::dataset::Split;

#[derive(Clone, Debug)]
pub struct GridSpec {
    pub channels: Vec<usize>,
    pub archs: Vec<DecoderArch>,
    pub pca: Vec<bool>,
    pub dw: Vec<bool>,
    /// Reduced desk-scale epochs per cell.
    pub epochs: u32,
    pub workers: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            channels: vec![64, 128, 256, 512],
            archs: vec![DecoderArch::Tcn],
            pca: vec![true],
            dw: vec![true],
            epochs: 20,
            workers: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Converged,
    Divergent,
}

impl CellStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellStatus::Converged => "converged",
            CellStatus::Divergent => "divergent",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridCell {
    pub datasets: String,
    pub arch: DecoderArch,
    pub channels: usize,
    pub pca: bool,
    pub dw: bool,
    pub status: CellStatus,
    /// Final-epoch validation LVE (NaN when the run diverged numerically).
    pub val_lve: f64,
    /// Mean-predictor baseline LVE for the same data.
    pub baseline_lve: f64,
}

/// Divergence: non-finite loss, or final validation LVE above 10x the
/// constant mean-predictor baseline.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

fn run_cell(
    manifest: &DatasetManifest,
    base_config: &ModelConfig,
    base_plan: &TrainPlan,
    datasets_label: &str,
    arch: DecoderArch,
    channels: usize,
    pca: bool,
    dw: bool,
    epochs: u32,
    cell_seed: u64,
) -> Result<GridCell, TrainError> {
    let mut config = base_config.clone();
    config.decoder_arch = arch;
    config.decoder_channels = channels;
    config.embed_dim = channels;
    let mut registry = manifest.conventions.clone();
    if !pca {
        for conv in registry.iter_mut() {
            conv.pca_components = 0;
        }
    }
    let mut plan = base_plan.clone();
    plan.seed = cell_seed;
    plan.total_epochs = epochs;
    plan.warmup_epochs = if dw { (epochs / 10).max(1) } else { 0 };

    let bases = if pca { fit_train_bases(manifest, None, 64, plan.seed)? } else { BTreeMap::new() };
    let mut checkpoint = Checkpoint::new(
        config,
        registry,
        manifest.identity_table_len(),
        plan.seed,
        plan.lr,
    )?;
    checkpoint.bases = bases;
    let data = prepare_dataset(manifest, &checkpoint.registry, &checkpoint.bases)?;
    let baselines = mean_predictor_baseline(&data, &checkpoint.registry, Split::Val)?;
    let baseline_lve =
        baselines.values().sum::<f64>() / baselines.len().max(1) as f64;
    let mut trainer = Trainer::new(checkpoint, plan, data)?;
    let cell = |status: CellStatus, val_lve: f64| GridCell {
        datasets: datasets_label.to_string(),
        arch,
        channels,
        pca,
        dw,
        status,
        val_lve,
        baseline_lve,
    };
    match trainer.run(None) {
        Ok(()) => {
            let val_lve = trainer.curves.last().map(|r| r.val_lve).unwrap_or(f64::NAN);
            let status = if val_lve.is_finite() && val_lve <= DIVERGENCE_FACTOR * baseline_lve {
                CellStatus::Converged
            } else {
                CellStatus::Divergent
            };
            Ok(cell(status, val_lve))
        }
        Err(TrainError::NonFiniteLoss { .. }) => Ok(cell(CellStatus::Divergent, f64::NAN)),
        Err(other) => Err(other),
    }
}

/// Run every cell, optionally on parallel worker threads. Results come back
/// ordered by cell index regardless of completion order.
pub fn stability_grid(
    manifest: &DatasetManifest,
    base_config: &ModelConfig,
    base_plan: &TrainPlan,
    spec: &GridSpec,
    datasets_label: &str,
) -> Result<Vec<GridCell>, TrainError> {
    let mut cells = Vec::new();
    for &arch in &spec.archs {
        for &channels in &spec.channels {
            for &pca in &spec.pca {
                for &dw in &spec.dw {
                    cells.push((arch, channels, pca, dw));
                }
            }
        }
    }
    let worker_count = spec.workers.clamp(1, cells.len().max(1));
    let results: Vec<Mutex<Option<Result<GridCell, TrainError>>>> =
        (0..cells.len()).map(|_| Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= cells.len() {
                    break;
                }
                let (arch, channels, pca, dw) = cells[idx];
                let cell_seed = base_plan.seed.wrapping_mul(1000).wrapping_add(idx as u64);
                let outcome = run_cell(
                    manifest,
                    base_config,
                    base_plan,
                    datasets_label,
                    arch,
                    channels,
                    pca,
                    dw,
                    spec.epochs,
                    cell_seed,
                );
                *results[idx].lock().expect("no poisoned cell") = Some(outcome);
            });
        }
    });
    let mut out = Vec::with_capacity(cells.len());
    for slot in results {
        out.push(slot.into_inner().expect("no poisoned cell").expect("every cell ran")?);
    }
    Ok(out)
}

pub const GRID_CSV_HEADER: &str = "datasets,arch,channels,pca,dw,status,val_lve,baseline_lve\n";

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut out = String::from(GRID_CSV_HEADER);
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.9e},{:.9e}\n",
            c.datasets,
            c.arch.as_str(),
            c.channels,
            if c.pca { "on" } else { "off" },
            if c.dw { "on" } else { "off" },
            c.status.as_str(),
            c.val_lve,
            c.baseline_lve,
        ));
    }
    out
}

pub fn write_grid_csv(cells: &[GridCell], path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, grid_csv(cells))
        .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
}
