//! Fine-tuning harnesses: seen-annotation fine-tuning, transfer to an
//! unseen annotation (encoder weights kept, decoder reinitialized) with a
//! nested data-fraction sweep, and one-shot tuning on a single sequence.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dataset::{DatasetManifest, Split};
use crate::model::{Checkpoint, ModelError};
use crate::numerics::Rng;

use super::{
    evaluate, fit_train_bases, prepare_dataset, PreparedDataset, TrainError, TrainPlan, Trainer,
};

/// Fine-tune an existing checkpoint on a single dataset whose convention it
/// already knows. All weights are trainable; only that dataset is sampled.
pub fn finetune_seen(
    checkpoint: Checkpoint,
    manifest: &DatasetManifest,
    convention_id: u32,
    mut plan: TrainPlan,
    run_dir: Option<&Path>,
) -> Result<Trainer, TrainError> {
    if checkpoint.convention(convention_id).is_none() {
        return Err(TrainError::Model(ModelError::UnknownConvention(convention_id)));
    }
    let mut filtered = manifest.clone();
    filtered.records.retain(|r| r.convention_id == convention_id);
    if filtered.records.is_empty() {
        return Err(TrainError::Config(format!(
            "manifest has no records for convention {convention_id}"
        )));
    }
    let data = prepare_dataset(&filtered, &checkpoint.registry, &checkpoint.bases)?;
    // All weights trainable: fine-tuning continues in the joint stage.
    plan.warmup_epochs = 0;
    let start = checkpoint.epoch;
    plan.total_epochs += start;
    let mut trainer = Trainer::new(checkpoint, plan, data)?;
    trainer.run(run_dir)?;
    Ok(trainer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferArm {
    /// Encoder weights copied from the pretrained checkpoint; decoder,
    /// heads and identity embedding reinitialized.
    Pretrained,
    /// Everything trained from scratch at the same data fraction.
    Scratch,
}

impl TransferArm {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransferArm::Pretrained => "pretrained",
            TransferArm::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub fraction: f64,
    pub arm: TransferArm,
    pub val_lve: f64,
    pub checkpoint: Checkpoint,
}

/// Keep the first `ceil(fraction * n)` training records of a seed-shuffled
/// order, so smaller fractions are nested subsets of larger ones.
pub fn nested_fraction(manifest: &DatasetManifest, fraction: f64, seed: u64) -> DatasetManifest {
    let mut out = manifest.clone();
    let mut train_idx: Vec<usize> = out
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    Rng::new(seed).derive(0xF2AC).shuffle(&mut train_idx);
    let keep = ((fraction * train_idx.len() as f64).ceil() as usize)
        .clamp(1, train_idx.len());
    let drop: Vec<usize> = train_idx[keep..].to_vec();
    let mut remove = vec![false; out.records.len()];
    for i in drop {
        remove[i] = true;
    }
    let mut keep_iter = remove.into_iter();
    out.records.retain(|_| !keep_iter.next().expect("one flag per record"));
    out
}

/// Transfer to an unseen annotation: build a fresh model for the new
/// manifest, optionally copying encoder weights from the pretrained
/// checkpoint, and train on a nested fraction of the new training set.
pub fn finetune_unseen(
    pretrained: &Checkpoint,
    manifest: &DatasetManifest,
    fraction: f64,
    arm: TransferArm,
    plan: TrainPlan,
    pca_batch: usize,
    run_dir: Option<&Path>,
) -> Result<TransferOutcome, TrainError> {
    if !(0.0..=1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(TrainError::Config(format!("data fraction {fraction} outside (0, 1]")));
    }
    for conv in &manifest.conventions {
        if pretrained.convention(conv.id).is_some() {
            return Err(TrainError::Config(format!(
                "convention {} already exists in the checkpoint; transfer targets unseen annotations",
                conv.id
            )));
        }
    }
    if pretrained.config.sample_rate != manifest.sample_rate {
        return Err(TrainError::Config("sample rate mismatch between checkpoint and manifest".into()));
    }
    let subset = nested_fraction(manifest, fraction, plan.seed);
    let bases = fit_train_bases(&subset, None, pca_batch, plan.seed)?;
    let mut checkpoint = Checkpoint::new(
        pretrained.config.clone(),
        subset.conventions.clone(),
        subset.identity_table_len(),
        plan.seed,
        plan.lr,
    )?;
    checkpoint.bases = bases;
    if arm == TransferArm::Pretrained {
        // Only the encoder weights carry over.
        let names: Vec<String> = checkpoint
            .params
            .names()
            .filter(|n| n.starts_with("encoder."))
            .cloned()
            .collect();
        for name in names {
            let tensor = pretrained
                .params
                .get(&name)
                .ok_or_else(|| TrainError::Config(format!("pretrained model lacks `{name}`")))?
                .clone();
            checkpoint.params.insert(name, tensor);
        }
    }
    let data = prepare_dataset(&subset, &checkpoint.registry, &checkpoint.bases)?;
    let mut trainer = Trainer::new(checkpoint, plan, data)?;
    trainer.run(run_dir)?;
    let reports = trainer.validation_reports(Split::Val)?;
    let val_lve = if reports.is_empty() {
        f64::NAN
    } else {
        reports.iter().map(|r| r.lve).sum::<f64>() / reports.len() as f64
    };
    Ok(TransferOutcome { fraction, arm, val_lve, checkpoint: trainer.checkpoint })
}

/// Sweep arms and fractions; returns rows for the `fraction,arm,val_lve`
/// CSV, mirroring the halve-the-training-set comparison.
pub fn transfer_sweep(
    pretrained: &Checkpoint,
    manifest: &DatasetManifest,
    fractions: &[f64],
    scratch_control: bool,
    plan: &TrainPlan,
    pca_batch: usize,
) -> Result<Vec<TransferOutcome>, TrainError> {
    let mut out = Vec::new();
    for &fraction in fractions {
        out.push(finetune_unseen(
            pretrained,
            manifest,
            fraction,
            TransferArm::Pretrained,
            plan.clone(),
            pca_batch,
            None,
        )?);
        if scratch_control {
            out.push(finetune_unseen(
                pretrained,
                manifest,
                fraction,
                TransferArm::Scratch,
                plan.clone(),
                pca_batch,
                None,
            )?);
        }
    }
    Ok(out)
}

pub fn sweep_csv(outcomes: &[TransferOutcome]) -> String {
    let mut out = String::from("fraction,arm,val_lve\n");
    for o in outcomes {
        out.push_str(&format!("{:?},{},{:.9e}\n", o.fraction, o.arm.as_str(), o.val_lve));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OneShotMode {
    /// Tune everything except the TCN front-end of the audio encoder.
    AllButFrontend,
    /// Tune only the decoder side; the whole audio encoder stays frozen.
    DecoderOnly,
}

impl OneShotMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            OneShotMode::AllButFrontend => "all_but_frontend",
            OneShotMode::DecoderOnly => "decoder_only",
        }
    }

    fn frozen_prefixes(&self) -> Vec<String> {
        match self {
            OneShotMode::AllButFrontend => vec!["encoder.tcn".to_string()],
            OneShotMode::DecoderOnly => vec!["encoder.".to_string()],
        }
    }
}

#[derive(Clone, Debug)]
pub struct OneShotReport {
    pub mode: OneShotMode,
    pub best_val_lve: f64,
    pub best_val_lvd: f64,
    pub initial_val_lve: f64,
    pub checkpoint: Checkpoint,
}

/// Tune on exactly one training sequence; validation comes from the same
/// identity's remaining sequences. Tracks the best epoch's LVE/LVD.
pub fn one_shot_tune(
    checkpoint: Checkpoint,
    manifest: &DatasetManifest,
    sequence_id: &str,
    mode: OneShotMode,
    mut plan: TrainPlan,
) -> Result<OneShotReport, TrainError> {
    let target = manifest
        .records
        .iter()
        .find(|r| r.id == sequence_id)
        .ok_or_else(|| TrainError::Config(format!("sequence `{sequence_id}` not in manifest")))?
        .clone();
    let mut filtered = manifest.clone();
    filtered.records.retain(|r| r.identity == target.identity);
    for rec in filtered.records.iter_mut() {
        rec.split = if rec.id == target.id { Split::Train } else { Split::Val };
        rec.dup_factor = 1;
    }
    if filtered.records.len() < 2 {
        return Err(TrainError::Config(
            "one-shot tuning needs at least one validation sequence from the same identity".into(),
        ));
    }
    let data = prepare_dataset(&filtered, &checkpoint.registry, &checkpoint.bases)?;
    plan.warmup_epochs = 0;
    plan.frozen_prefixes = mode.frozen_prefixes();
    let start = checkpoint.epoch;
    plan.total_epochs += start;
    let encoder_before: BTreeMap<String, Vec<f32>> = checkpoint
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("encoder."))
        .map(|(n, t)| (n.clone(), t.data().to_vec()))
        .collect();
    let mut trainer = Trainer::new(checkpoint, plan, data)?;
    let initial_reports = trainer.validation_reports(Split::Val)?;
    let initial_val_lve =
        initial_reports.iter().map(|r| r.lve).sum::<f64>() / initial_reports.len().max(1) as f64;
    let mut best_val_lve = f64::INFINITY;
    let mut best_val_lvd = f64::INFINITY;
    let total = trainer.plan.total_epochs;
    for epoch in (start + 1)..=total {
        trainer.run_epoch(epoch)?;
        let reports = trainer.validation_reports(Split::Val)?;
        let lve = reports.iter().map(|r| r.lve).sum::<f64>() / reports.len().max(1) as f64;
        let lvd = reports.iter().map(|r| r.lvd).sum::<f64>() / reports.len().max(1) as f64;
        if lve < best_val_lve {
            best_val_lve = lve;
            best_val_lvd = lvd;
        }
    }
    if mode == OneShotMode::DecoderOnly {
        for (name, before) in &encoder_before {
            debug_assert_eq!(
                trainer.checkpoint.params.get(name).unwrap().data(),
                before.as_slice(),
                "frozen encoder moved during one-shot tuning"
            );
        }
    }
    Ok(OneShotReport {
        mode,
        best_val_lve,
        best_val_lvd,
        initial_val_lve,
        checkpoint: trainer.checkpoint,
    })
}

/// Convenience: mean validation LVE of a checkpoint over a prepared set.
pub fn mean_val_lve(checkpoint: &Checkpoint, data: &PreparedDataset) -> Result<f64, TrainError> {
    let reports = evaluate(checkpoint, data, Split::Val)?;
    Ok(reports.iter().map(|r| r.lve).sum::<f64>() / reports.len().max(1) as f64)
}

/// Paper-scale BIWI transfer sweep sizes, recorded for documentation: the
/// full 190-sequence training set is halved down to 6.
pub const BENCH_TRANSFER_SEQUENCE_COUNTS: [usize; 6] = [190, 96, 48, 24, 12, 6];
