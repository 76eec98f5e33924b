//! Multi-dataset manifests: loading with validation, audio/motion
//! alignment, resampling, stratified splits, duplication balancing, and the
//! synthetic generator standing in for full-scale capture data.

pub mod files;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::container::ContainerError;
use crate::motion::{AnnotationConvention, MotionError, MotionSequence};
use crate::numerics::{interp_positions, Rng, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Format(String),
    #[error("manifest line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Raw mono waveform plus its sample rate.
#[derive(Clone, Debug)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn all_finite(&self) -> bool {
        self.samples.iter().all(|s| s.is_finite())
    }
}

/// Samples per motion frame. Errors when the rate is not an integer
/// multiple of the frame rate; the strict window op below is diagnostic
/// and the frequency adaptor handles fractional alignment in-model.
pub fn samples_per_frame(sample_rate: u32, fps: u32) -> Result<usize, DataError> {
    if fps == 0 {
        return Err(DataError::Format("fps must be positive".into()));
    }
    if sample_rate % fps != 0 {
        return Err(DataError::Format(format!(
            "sample rate {sample_rate} is not divisible by fps {fps} (fractional samples per frame)"
        )));
    }
    Ok((sample_rate / fps) as usize)
}

/// The `d` samples aligned with one motion frame.
pub fn align_audio_window(
    clip: &AudioClip,
    frame_index: usize,
    fps: u32,
) -> Result<&[f32], DataError> {
    let d = samples_per_frame(clip.sample_rate, fps)?;
    let start = frame_index * d;
    if start + d > clip.samples.len() {
        return Err(DataError::Format(format!(
            "frame {frame_index} needs samples [{start}, {}), clip has {}",
            start + d,
            clip.samples.len()
        )));
    }
    Ok(&clip.samples[start..start + d])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub id: String,
    pub convention_id: u32,
    pub identity: u32,
    pub audio_path: String,
    pub motion_path: String,
    pub split: Split,
    pub dup_factor: u32,
}

#[derive(Clone, Debug)]
pub struct IdentityEntry {
    pub global_id: u32,
    pub convention_id: u32,
    pub name: String,
}

/// Everything a training or evaluation run needs to locate and interpret
/// one multi-convention dataset. Paths are relative to `root`.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub sample_rate: u32,
    pub conventions: Vec<AnnotationConvention>,
    pub identities: Vec<IdentityEntry>,
    pub pivot_identity: u32,
    pub records: Vec<SequenceRecord>,
}

impl DatasetManifest {
    pub fn convention(&self, id: u32) -> Option<&AnnotationConvention> {
        self.conventions.iter().find(|c| c.id == id)
    }

    pub fn records_for_split(&self, split: Split) -> impl Iterator<Item = &SequenceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Total identity labels including the pivot row.
    pub fn identity_table_len(&self) -> usize {
        self.pivot_identity as usize + 1
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_audio(&self, record: &SequenceRecord) -> Result<AudioClip, DataError> {
        files::read_audio(&self.resolve(&record.audio_path))
    }

    pub fn load_motion(&self, record: &SequenceRecord) -> Result<MotionSequence, DataError> {
        files::read_motion(&self.resolve(&record.motion_path), record.identity)
    }

    /// Structural and asset validation; collects every offender before
    /// reporting. Tail tolerance: |T*d - samples| <= d.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut problems = Vec::new();
        let mut ids_seen: BTreeMap<u32, u32> = BTreeMap::new();
        for ident in &self.identities {
            if ident.global_id == self.pivot_identity {
                problems.push(format!(
                    "identity `{}` uses the reserved pivot id {}",
                    ident.name, self.pivot_identity
                ));
            }
            if let Some(prev) = ids_seen.insert(ident.global_id, ident.convention_id) {
                if prev != ident.convention_id {
                    problems.push(format!(
                        "identity {} appears under conventions {} and {}; speakers must be exclusive per dataset",
                        ident.global_id, prev, ident.convention_id
                    ));
                } else {
                    problems.push(format!("identity {} declared twice", ident.global_id));
                }
            }
        }
        for conv in &self.conventions {
            if let Err(e) = conv.validate() {
                problems.push(e.to_string());
            }
        }
        for rec in &self.records {
            let Some(conv) = self.convention(rec.convention_id) else {
                problems
                    .push(format!("record {}: unknown convention {}", rec.id, rec.convention_id));
                continue;
            };
            if rec.identity == self.pivot_identity {
                problems.push(format!("record {}: uses the reserved pivot identity", rec.id));
            }
            match ids_seen.get(&rec.identity) {
                Some(&cid) if cid == rec.convention_id => {}
                Some(_) => problems.push(format!(
                    "record {}: identity {} belongs to another convention",
                    rec.id, rec.identity
                )),
                None => {
                    problems.push(format!("record {}: unknown identity {}", rec.id, rec.identity))
                }
            }
            if rec.dup_factor == 0 {
                problems.push(format!("record {}: duplication factor must be >= 1", rec.id));
            }
            let audio = match files::read_audio_header(&self.resolve(&rec.audio_path)) {
                Ok(h) => h,
                Err(e) => {
                    problems.push(format!("record {}: {e}", rec.id));
                    continue;
                }
            };
            let motion = match files::read_motion_header(&self.resolve(&rec.motion_path)) {
                Ok(h) => h,
                Err(e) => {
                    problems.push(format!("record {}: {e}", rec.id));
                    continue;
                }
            };
            if motion.convention_id != rec.convention_id {
                problems.push(format!(
                    "record {}: motion file is for convention {}, record says {}",
                    rec.id, motion.convention_id, rec.convention_id
                ));
            }
            if motion.dim != conv.native_dim() {
                problems.push(format!(
                    "record {}: motion dim {} != convention native dim {}",
                    rec.id,
                    motion.dim,
                    conv.native_dim()
                ));
            }
            if (motion.fps - conv.fps as f32).abs() > 1e-3 {
                problems.push(format!(
                    "record {}: motion fps {} != convention fps {}",
                    rec.id, motion.fps, conv.fps
                ));
            }
            if audio.sample_rate != self.sample_rate {
                problems.push(format!(
                    "record {}: audio sample rate {} != manifest {}",
                    rec.id, audio.sample_rate, self.sample_rate
                ));
            }
            match samples_per_frame(self.sample_rate, conv.fps) {
                Ok(d) => {
                    let expect = motion.frames * d;
                    let got = audio.samples;
                    if got.abs_diff(expect) > d {
                        problems.push(format!(
                            "record {}: audio/motion misaligned beyond one frame: {} samples vs {} frames * {} = {}",
                            rec.id, got, motion.frames, d, expect
                        ));
                    }
                }
                Err(e) => problems.push(format!("record {}: {e}", rec.id)),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::Validation(problems))
        }
    }
}

// ── manifest text format ─────────────────────────────────────────────────

const MANIFEST_HEADER: &str = "a2f-manifest v1";

/// Serialize to the tab-separated text format (documented in the README).
pub fn manifest_to_string(m: &DatasetManifest, asset_paths: &BTreeMap<u32, String>) -> String {
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    out.push_str(&format!("sample_rate\t{}\n", m.sample_rate));
    out.push_str(&format!("pivot_identity\t{}\n", m.pivot_identity));
    out.push_str("[conventions]\n");
    for conv in &m.conventions {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            conv.id,
            conv.name,
            asset_paths.get(&conv.id).map(String::as_str).unwrap_or("")
        ));
    }
    out.push_str("[identities]\n");
    for ident in &m.identities {
        out.push_str(&format!("{}\t{}\t{}\n", ident.global_id, ident.convention_id, ident.name));
    }
    out.push_str("[records]\n");
    for r in &m.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id,
            r.convention_id,
            r.identity,
            r.audio_path,
            r.motion_path,
            r.split.as_str(),
            r.dup_factor
        ));
    }
    out
}

pub fn save_manifest(
    m: &DatasetManifest,
    asset_paths: &BTreeMap<u32, String>,
    path: &Path,
) -> Result<(), DataError> {
    std::fs::write(path, manifest_to_string(m, asset_paths))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Parse and fully validate a manifest file. Convention assets referenced
/// from the `[conventions]` section are loaded as part of this call.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let m = parse_manifest(&text, root)?;
    m.validate()?;
    Ok(m)
}

fn parse_manifest(text: &str, root: PathBuf) -> Result<DatasetManifest, DataError> {
    #[derive(PartialEq)]
    enum Section {
        Head,
        Conventions,
        Identities,
        Records,
    }
    let mut section = Section::Head;
    let mut sample_rate: Option<u32> = None;
    let mut pivot: Option<u32> = None;
    let mut conventions = Vec::new();
    let mut identities = Vec::new();
    let mut records = Vec::new();
    let parse_err = |line: usize, detail: String| DataError::Parse { line, detail };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(parse_err(
                1,
                format!("expected header `{MANIFEST_HEADER}`, got {:?}", other.map(|(_, l)| l)),
            ))
        }
    }
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "[conventions]" => {
                section = Section::Conventions;
                continue;
            }
            "[identities]" => {
                section = Section::Identities;
                continue;
            }
            "[records]" => {
                section = Section::Records;
                continue;
            }
            _ if line.starts_with('[') => {
                return Err(parse_err(line_no, format!("unknown section {line}")));
            }
            _ => {}
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match section {
            Section::Head => {
                if fields.len() != 2 {
                    return Err(parse_err(line_no, format!("expected `key\\tvalue`, got `{line}`")));
                }
                let value = fields[1]
                    .parse::<u32>()
                    .map_err(|_| parse_err(line_no, format!("bad integer `{}`", fields[1])))?;
                match fields[0] {
                    "sample_rate" => sample_rate = Some(value),
                    "pivot_identity" => pivot = Some(value),
                    other => return Err(parse_err(line_no, format!("unknown key `{other}`"))),
                }
            }
            Section::Conventions => {
                if fields.len() != 3 {
                    return Err(parse_err(
                        line_no,
                        "conventions need `id\\tname\\tassets_path`".into(),
                    ));
                }
                let asset_rel = fields[2];
                let conv = files::read_convention(&root.join(asset_rel))?;
                let declared_id: u32 = fields[0]
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad convention id `{}`", fields[0])))?;
                if conv.id != declared_id || conv.name != fields[1] {
                    return Err(parse_err(
                        line_no,
                        format!(
                            "asset file declares convention {} `{}`, manifest says {} `{}`",
                            conv.id, conv.name, declared_id, fields[1]
                        ),
                    ));
                }
                conventions.push(conv);
            }
            Section::Identities => {
                if fields.len() != 3 {
                    return Err(parse_err(
                        line_no,
                        "identities need `global_id\\tconvention_id\\tname`".into(),
                    ));
                }
                identities.push(IdentityEntry {
                    global_id: fields[0]
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad id `{}`", fields[0])))?,
                    convention_id: fields[1]
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad id `{}`", fields[1])))?,
                    name: fields[2].to_string(),
                });
            }
            Section::Records => {
                if fields.len() != 7 {
                    return Err(parse_err(
                        line_no,
                        format!("records need 7 fields, got {}", fields.len()),
                    ));
                }
                records.push(SequenceRecord {
                    id: fields[0].to_string(),
                    convention_id: fields[1]
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad id `{}`", fields[1])))?,
                    identity: fields[2]
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad id `{}`", fields[2])))?,
                    audio_path: fields[3].to_string(),
                    motion_path: fields[4].to_string(),
                    split: Split::parse(fields[5])
                        .ok_or_else(|| parse_err(line_no, format!("bad split `{}`", fields[5])))?,
                    dup_factor: fields[6]
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad factor `{}`", fields[6])))?,
                });
            }
        }
    }
    Ok(DatasetManifest {
        root,
        sample_rate: sample_rate.ok_or_else(|| parse_err(0, "missing sample_rate".into()))?,
        conventions,
        identities,
        pivot_identity: pivot.ok_or_else(|| parse_err(0, "missing pivot_identity".into()))?,
        records,
    })
}

// ── resampling ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    /// Integer-factor decimation only.
    DecimateOnly,
    /// Linear interpolation when the ratio is not an integer decimation.
    AllowInterpolation,
}

/// Frame-rate conversion. Integer-factor decimation keeps every k-th frame;
/// otherwise output frame j samples the input at time `j / target_fps`.
pub fn resample_motion(
    seq: &MotionSequence,
    target_fps: u32,
    mode: ResampleMode,
) -> Result<MotionSequence, DataError> {
    if target_fps == 0 {
        return Err(DataError::Format("target fps must be positive".into()));
    }
    if target_fps == seq.fps {
        return Ok(seq.clone());
    }
    let t = seq.frames.rows();
    let dim = seq.frames.cols();
    if seq.fps % target_fps == 0 && seq.fps > target_fps {
        let k = (seq.fps / target_fps) as usize;
        let keep = t.div_ceil(k);
        let mut data = Vec::with_capacity(keep * dim);
        for i in 0..keep {
            data.extend_from_slice(seq.frames.row(i * k));
        }
        return Ok(MotionSequence {
            convention_id: seq.convention_id,
            fps: target_fps,
            frames: Tensor::new(vec![keep, dim], data).expect("sized above"),
            identity: seq.identity,
        });
    }
    if mode == ResampleMode::DecimateOnly {
        return Err(DataError::Format(format!(
            "{} -> {} fps is not an integer decimation; interpolation must be requested explicitly",
            seq.fps, target_fps
        )));
    }
    let t_out = ((t as f64 * target_fps as f64 / seq.fps as f64).round_ties_even() as usize).max(1);
    let step = seq.fps as f64 / target_fps as f64;
    let max_pos = (t - 1) as f64;
    let mut data = Vec::with_capacity(t_out * dim);
    for j in 0..t_out {
        let p = (j as f64 * step).min(max_pos);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(t - 1);
        let f = (p - i0 as f64) as f32;
        let (r0, r1) = (seq.frames.row(i0), seq.frames.row(i1));
        for c in 0..dim {
            data.push(r0[c] * (1.0 - f) + r1[c] * f);
        }
    }
    Ok(MotionSequence {
        convention_id: seq.convention_id,
        fps: target_fps,
        frames: Tensor::new(vec![t_out, dim], data).expect("sized above"),
        identity: seq.identity,
    })
}

/// Endpoint-preserving interpolation grid (re-exported for tests pairing
/// dataset resampling with the model-side adaptor).
pub fn interp_positions_for(t_in: usize, t_out: usize) -> Vec<f64> {
    interp_positions(t_in, t_out)
}

// ── splits and duplication ───────────────────────────────────────────────

/// Per-identity stratified split. Identities with fewer than 3 records go
/// entirely to train, with a warning returned per identity.
pub fn split_records(
    records: &mut [SequenceRecord],
    ratios: (u32, u32, u32),
    rng: &mut Rng,
) -> Result<Vec<String>, DataError> {
    let (rt, rv, rs) = ratios;
    if rt == 0 || rv == 0 || rs == 0 {
        return Err(DataError::Format("split ratios must be positive".into()));
    }
    let total = (rt + rv + rs) as f64;
    let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_identity.entry(r.identity).or_default().push(i);
    }
    let mut warnings = Vec::new();
    for (identity, mut indices) in by_identity {
        if indices.len() < 3 {
            for &i in &indices {
                records[i].split = Split::Train;
            }
            warnings.push(format!(
                "identity {identity}: only {} record(s); assigned entirely to train",
                indices.len()
            ));
            continue;
        }
        rng.shuffle(&mut indices);
        let n = indices.len();
        let n_val = ((n as f64 * rv as f64 / total).round() as usize).max(1);
        let n_test = (((n as f64 * rs as f64 / total).round() as usize).max(1)).min(n - n_val - 1);
        for (pos, &i) in indices.iter().enumerate() {
            records[i].split = if pos < n_val {
                Split::Val
            } else if pos < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    Ok(warnings)
}

/// Duplication-balanced epoch list: each train record index appears
/// `dup_factor` times, shuffled with the epoch-seeded rng.
pub fn epoch_list(records: &[SequenceRecord], rng: &mut Rng) -> Vec<usize> {
    let mut list = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.split == Split::Train {
            for _ in 0..r.dup_factor {
                list.push(i);
            }
        }
    }
    rng.shuffle(&mut list);
    list
}

/// Paper-scale duplication factors for the eight-dataset benchmark layout.
pub const BENCH_DUPLICATION_FACTORS: [u32; 8] = [10, 5, 4, 1, 1, 1, 1, 1];

/// Overwrite per-record duplication factors from a per-dataset table
/// indexed by convention id.
pub fn apply_duplication(
    records: &mut [SequenceRecord],
    factors: &BTreeMap<u32, u32>,
) -> Result<(), DataError> {
    for r in records.iter_mut() {
        if let Some(&f) = factors.get(&r.convention_id) {
            if f == 0 {
                return Err(DataError::Format("duplication factors must be >= 1".into()));
            }
            r.dup_factor = f;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, conv: u32, identity: u32, dup: u32) -> SequenceRecord {
        SequenceRecord {
            id: id.into(),
            convention_id: conv,
            identity,
            audio_path: format!("audio/{id}.a2fa"),
            motion_path: format!("motion/{id}.a2fm"),
            split: Split::Train,
            dup_factor: dup,
        }
    }

    fn seq(fps: u32, frames: &[&[f32]]) -> MotionSequence {
        MotionSequence {
            convention_id: 0,
            fps,
            frames: Tensor::from_rows(&frames.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
                .unwrap(),
            identity: 0,
        }
    }

    #[test]
    fn sixty_to_thirty_keeps_even_frames() {
        let s = seq(60, &[&[0.0], &[1.0], &[2.0], &[3.0], &[4.0], &[5.0]]);
        let r = resample_motion(&s, 30, ResampleMode::DecimateOnly).unwrap();
        assert_eq!(r.frames.rows(), 3);
        assert_eq!(r.frames.data(), &[0.0, 2.0, 4.0]);
        assert_eq!(r.fps, 30);
    }

    #[test]
    fn same_rate_is_identity() {
        let s = seq(25, &[&[1.0, 2.0], &[3.0, 4.0]]);
        let r = resample_motion(&s, 25, ResampleMode::DecimateOnly).unwrap();
        assert_eq!(r.frames, s.frames);
    }

    #[test]
    fn non_integer_ratio_requires_explicit_interpolation() {
        let s = seq(60, &[&[0.0], &[1.0], &[2.0]]);
        assert!(resample_motion(&s, 25, ResampleMode::DecimateOnly).is_err());
        assert!(resample_motion(&s, 0, ResampleMode::AllowInterpolation).is_err());
    }

    #[test]
    fn interpolation_blends_neighbors_hand_case() {
        // 3 frames at 60 fps -> 40 fps: 2 output frames at input times 0 and 1.5.
        let s = seq(60, &[&[0.0], &[1.0], &[2.0]]);
        let r = resample_motion(&s, 40, ResampleMode::AllowInterpolation).unwrap();
        assert_eq!(r.frames.rows(), 2);
        assert_eq!(r.frames.data()[0], 0.0);
        assert!((r.frames.data()[1] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn decimate_then_upsample_reproduces_kept_frames() {
        let s = seq(60, &[&[0.0], &[1.0], &[2.0], &[3.0], &[4.0], &[5.0], &[6.0], &[7.0]]);
        let down = resample_motion(&s, 30, ResampleMode::DecimateOnly).unwrap();
        let up = resample_motion(&down, 60, ResampleMode::AllowInterpolation).unwrap();
        for (i, kept) in [0.0f32, 2.0, 4.0, 6.0].iter().enumerate() {
            let got = up.frames.data()[2 * i];
            assert!((got - kept).abs() < 1e-6, "frame {i}: {got} vs {kept}");
        }
    }

    #[test]
    fn split_ten_records_per_identity_is_8_1_1() {
        let mut records: Vec<SequenceRecord> =
            (0..30).map(|i| rec(&format!("r{i}"), 0, (i / 10) as u32, 1)).collect();
        let mut rng = Rng::new(5);
        let warnings = split_records(&mut records, (8, 1, 1), &mut rng).unwrap();
        assert!(warnings.is_empty());
        for identity in 0..3u32 {
            let counts = |s: Split| {
                records.iter().filter(|r| r.identity == identity && r.split == s).count()
            };
            assert_eq!(counts(Split::Train), 8, "identity {identity}");
            assert_eq!(counts(Split::Val), 1);
            assert_eq!(counts(Split::Test), 1);
        }
    }

    #[test]
    fn single_record_identity_goes_to_train_with_warning() {
        let mut records = vec![rec("only", 0, 9, 1)];
        records[0].split = Split::Test;
        let mut rng = Rng::new(1);
        let warnings = split_records(&mut records, (8, 1, 1), &mut rng).unwrap();
        assert_eq!(records[0].split, Split::Train);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("identity 9"));
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let make = || -> Vec<SequenceRecord> {
            (0..40).map(|i| rec(&format!("r{i}"), 0, (i % 4) as u32, 1)).collect()
        };
        let mut a = make();
        let mut b = make();
        split_records(&mut a, (8, 1, 1), &mut Rng::new(77)).unwrap();
        split_records(&mut b, (8, 1, 1), &mut Rng::new(77)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.split, y.split);
        }
    }

    #[test]
    fn epoch_list_repeats_each_record_exactly_factor_times() {
        let mut records = vec![rec("a", 0, 0, 2), rec("b", 0, 0, 2), rec("c", 0, 0, 2)];
        records.push(rec("v", 0, 0, 1));
        records[3].split = Split::Val;
        let mut rng = Rng::new(3);
        let list = epoch_list(&records, &mut rng);
        assert_eq!(list.len(), 6);
        for i in 0..3 {
            assert_eq!(list.iter().filter(|&&x| x == i).count(), 2);
        }
        assert!(!list.contains(&3), "val records must not enter the epoch list");
    }

    #[test]
    fn bench_duplication_factors_apply_per_dataset() {
        let mut records: Vec<SequenceRecord> =
            (0..8).map(|c| rec(&format!("d{c}"), c as u32, c as u32, 1)).collect();
        let table: BTreeMap<u32, u32> =
            BENCH_DUPLICATION_FACTORS.iter().enumerate().map(|(i, &f)| (i as u32, f)).collect();
        apply_duplication(&mut records, &table).unwrap();
        let mut rng = Rng::new(0);
        let list = epoch_list(&records, &mut rng);
        assert_eq!(list.len(), 10 + 5 + 4 + 5);
        assert_eq!(list.iter().filter(|&&x| x == 0).count(), 10);
        assert_eq!(list.iter().filter(|&&x| x == 2).count(), 4);
    }

    #[test]
    fn factors_all_one_reproduce_the_record_list() {
        let records = vec![rec("a", 0, 0, 1), rec("b", 0, 0, 1)];
        let mut rng = Rng::new(1);
        let mut list = epoch_list(&records, &mut rng);
        list.sort_unstable();
        assert_eq!(list, vec![0, 1]);
    }

    #[test]
    fn audio_window_arithmetic() {
        let clip = AudioClip { samples: (0..1280).map(|i| i as f32).collect(), sample_rate: 16000 };
        assert_eq!(samples_per_frame(16000, 25).unwrap(), 640);
        let w = align_audio_window(&clip, 0, 25).unwrap();
        assert_eq!(w.len(), 640);
        assert_eq!(w[0], 0.0);
        let w1 = align_audio_window(&clip, 1, 25).unwrap();
        assert_eq!(w1[0], 640.0);
        assert!(align_audio_window(&clip, 2, 25).is_err());
        // 16 kHz at 30 fps is fractional.
        assert!(samples_per_frame(16000, 30).is_err());
    }
}
