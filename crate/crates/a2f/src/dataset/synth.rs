//! Synthetic multi-convention dataset generator.
//!
//! Audio is built from band-limited tone segments; motion comes from a
//! fixed hidden teacher that maps short-time band energies to motion
//! parameters with a per-identity style gain. Silence maps to exactly
//! neutral motion, so audio -> motion is learnable, identity-conditioned
//! and recomputable bit-for-bit from the seed.

use std::collections::BTreeMap;
use std::path::Path;

use crate::motion::{
    AnnotationConvention, AnnotationKind, BlendshapeBasis, Joint, LbsRig, MotionSequence,
};
use crate::numerics::{Rng, Tensor};

use super::files;
use super::{
    split_records, AudioClip, DataError, DatasetManifest, IdentityEntry, SequenceRecord, Split,
};

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub kinds: Vec<AnnotationKind>,
    pub identities_per_convention: usize,
    pub sequences_per_convention: usize,
    pub seconds: u32,
    pub seed: u64,
    pub sample_rate: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kinds: vec![
                AnnotationKind::Vertex,
                AnnotationKind::Blendshape,
                AnnotationKind::Skeleton,
            ],
            identities_per_convention: 4,
            sequences_per_convention: 40,
            seconds: 3,
            seed: 7,
            sample_rate: 16000,
        }
    }
}

/// Frame rates chosen so the sample rate divides evenly (integral samples
/// per frame) while still exercising the frequency adaptor at three rates.
fn fps_for(kind: AnnotationKind) -> u32 {
    match kind {
        AnnotationKind::Vertex => 25,
        AnnotationKind::Blendshape => 20,
        AnnotationKind::Skeleton => 40,
    }
}

const GRID_COLS: usize = 6;
const LATENT_DIM: usize = 4;
const TONE_BANK: [f32; 3] = [300.0, 900.0, 2200.0];
const FEATURE_DIM: usize = 1 + TONE_BANK.len();

/// Face-ish template: a vertex grid over an ellipse with a z dome, meters.
fn grid_template(vertex_count: usize) -> Vec<f32> {
    let rows = vertex_count / GRID_COLS;
    let mut out = Vec::with_capacity(vertex_count * 3);
    for r in 0..rows {
        for c in 0..GRID_COLS {
            let x = (c as f32 - (GRID_COLS - 1) as f32 / 2.0) / (GRID_COLS - 1) as f32 * 0.12;
            let y = ((rows - 1 - r) as f32 - (rows - 1) as f32 / 2.0)
                / (rows - 1).max(1) as f32
                * 0.16;
            let z = (0.05 * (1.0 - (x / 0.07).powi(2) - (y / 0.09).powi(2))).max(0.0);
            out.extend_from_slice(&[x, y, z]);
        }
    }
    out
}

/// Upper mask: the top third of grid rows. Lip mask: the bottom third,
/// center four columns.
fn grid_masks(vertex_count: usize) -> (Vec<usize>, Vec<usize>) {
    let rows = vertex_count / GRID_COLS;
    let upper_rows = (rows / 3).max(1);
    let lip_rows = (rows / 3).max(1);
    let mut upper = Vec::new();
    for r in 0..upper_rows {
        for c in 0..GRID_COLS {
            upper.push(r * GRID_COLS + c);
        }
    }
    let mut lip = Vec::new();
    for r in (rows - lip_rows)..rows {
        for c in 1..(GRID_COLS - 1) {
            lip.push(r * GRID_COLS + c);
        }
    }
    (lip, upper)
}

/// Random orthonormal rows with selected coordinates amplified before
/// orthonormalization, concentrating motion energy there (mouth region).
fn orthonormal_rows_weighted(
    count: usize,
    dim: usize,
    boosted_coords: &[usize],
    boost: f64,
    rng: &mut Rng,
) -> Vec<f32> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for &c in boosted_coords {
            v[c] *= boost;
        }
        for prev in &rows {
            let d: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= d * p;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.into_iter().flatten().map(|x| x as f32).collect()
}

fn coords_of_vertices(verts: &[usize]) -> Vec<usize> {
    verts.iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect()
}

/// Build the deterministic convention set for the requested kinds.
pub fn build_conventions(spec: &SynthSpec) -> Vec<AnnotationConvention> {
    let mut seed_rng = Rng::new(spec.seed).derive(0xA55E75);
    spec.kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            // Synthetic conventions are generated directly in meters, so
            // their training scales are 1: the scale mechanism exists to
            // bring heterogeneous capture ranges into a comparable range.
            let (vertex_count, param_count, scale) = match kind {
                AnnotationKind::Vertex => (36, 0, 1.0),
                AnnotationKind::Blendshape => (24, 10, 1.0),
                AnnotationKind::Skeleton => (18, 6, 1.0),
            };
            let template = grid_template(vertex_count);
            let (lip_mask, upper_face_mask) = grid_masks(vertex_count);
            let blendshape = (kind == AnnotationKind::Blendshape).then(|| {
                let lip_coords = coords_of_vertices(&lip_mask);
                let mut rows = orthonormal_rows_weighted(
                    param_count,
                    3 * vertex_count,
                    &lip_coords,
                    2.0,
                    &mut seed_rng,
                );
                rows.iter_mut().for_each(|v| *v *= 0.05);
                BlendshapeBasis {
                    mean_shape: template.clone(),
                    bases: rows,
                    count: param_count,
                }
            });
            let lbs = (kind == AnnotationKind::Skeleton).then(|| {
                let joints = vec![
                    Joint { position: [0.0, -0.02, 0.0], parent: None },
                    Joint { position: [0.0, -0.06, 0.02], parent: Some(0) },
                ];
                let mut blendweights = Vec::with_capacity(vertex_count * 2);
                for v in 0..vertex_count {
                    let y = template[v * 3 + 1];
                    // Lower-face vertices follow the jaw-tip joint.
                    let a = ((-y + 0.02) * 12.0).clamp(0.0, 1.0);
                    blendweights.extend_from_slice(&[1.0 - a, a]);
                }
                LbsRig { rest_pose: template.clone(), joints, blendweights }
            });
            AnnotationConvention {
                id: i as u32,
                name: format!("synth_{}", kind.as_str()),
                kind,
                fps: fps_for(kind),
                vertex_count,
                param_count,
                scale,
                lip_mask,
                upper_face_mask,
                neutral_template: template,
                blendshape,
                lbs,
                pca_components: if kind == AnnotationKind::Vertex { LATENT_DIM } else { 0 },
            }
        })
        .collect()
}

/// The hidden audio-to-motion mapping. Rebuilding it from the same spec
/// reproduces stored motion exactly.
pub struct SynthTeacher {
    sample_rate: u32,
    /// `LATENT_DIM x FEATURE_DIM`.
    feat_map: Vec<f32>,
    /// Per convention id: `out_dim x LATENT_DIM`.
    out_maps: BTreeMap<u32, Vec<f32>>,
    /// Per global identity: `LATENT_DIM` style gains.
    gains: Vec<Vec<f32>>,
}

impl SynthTeacher {
    pub fn new(spec: &SynthSpec, conventions: &[AnnotationConvention], identities: usize) -> Self {
        let mut rng = Rng::new(spec.seed).derive(0x7EAC4E);
        let feat_map: Vec<f32> = (0..LATENT_DIM * FEATURE_DIM)
            .map(|_| rng.normal() as f32 * 0.45)
            .collect();
        let mut out_maps = BTreeMap::new();
        for conv in conventions {
            let (out_dim, amp) = match conv.kind {
                // Displacements decompose through a deformation basis times a
                // random mixing matrix, the same structure the blendshape
                // convention has; rank stays at LATENT_DIM so a small PCA
                // basis captures it exactly.
                AnnotationKind::Vertex => (3 * conv.vertex_count, 1.8),
                AnnotationKind::Blendshape => (conv.param_count, 1.8),
                AnnotationKind::Skeleton => (conv.param_count, 0.6),
            };
            let map: Vec<f32> = if conv.kind == AnnotationKind::Vertex {
                let lip_coords = coords_of_vertices(&conv.lip_mask);
                let deform =
                    orthonormal_rows_weighted(10, out_dim, &lip_coords, 2.0, &mut rng);
                let mixing: Vec<f32> =
                    (0..10 * LATENT_DIM).map(|_| rng.normal() as f32 * 0.35).collect();
                let mut t = vec![0.0f32; out_dim * LATENT_DIM];
                for d in 0..out_dim {
                    for k in 0..LATENT_DIM {
                        let mut acc = 0.0f32;
                        for b in 0..10 {
                            acc += deform[b * out_dim + d] * 0.05 * mixing[b * LATENT_DIM + k];
                        }
                        t[d * LATENT_DIM + k] = acc * amp;
                    }
                }
                t
            } else {
                (0..out_dim * LATENT_DIM).map(|_| rng.normal() as f32 * amp).collect()
            };
            out_maps.insert(conv.id, map);
        }
        let gains: Vec<Vec<f32>> = (0..identities)
            .map(|_| {
                (0..LATENT_DIM).map(|_| 1.0 + 0.2 * (rng.normal() as f32).tanh()).collect()
            })
            .collect();
        SynthTeacher { sample_rate: spec.sample_rate, feat_map, out_maps, gains }
    }

    /// Short-time features of one frame window: RMS plus tone-bank
    /// magnitudes. Zero for silence.
    pub fn window_features(&self, window: &[f32]) -> [f32; FEATURE_DIM] {
        let mut out = [0.0f32; FEATURE_DIM];
        let n = window.len() as f32;
        let mut sq = 0.0f32;
        for &s in window {
            sq += s * s;
        }
        out[0] = (sq / n).sqrt() * 4.0;
        for (k, &freq) in TONE_BANK.iter().enumerate() {
            let w = std::f32::consts::TAU * freq / self.sample_rate as f32;
            let mut c = 0.0f32;
            let mut s = 0.0f32;
            for (t, &x) in window.iter().enumerate() {
                let ph = w * t as f32;
                c += x * ph.cos();
                s += x * ph.sin();
            }
            out[k + 1] = 2.0 * (c * c + s * s).sqrt() / n * 4.0;
        }
        out
    }

    fn latent(&self, features: &[f32; FEATURE_DIM], identity: u32) -> [f32; LATENT_DIM] {
        let gains = &self.gains[identity as usize];
        let mut out = [0.0f32; LATENT_DIM];
        for k in 0..LATENT_DIM {
            let mut acc = 0.0f32;
            for (f, &x) in features.iter().enumerate() {
                acc += self.feat_map[k * FEATURE_DIM + f] * x;
            }
            out[k] = acc.tanh() * gains[k];
        }
        out
    }

    /// Per-frame native motion for a clip under one convention. Latents
    /// pass through a short symmetric moving average so segment onsets stay
    /// gentle; all-silent audio still maps to exactly zero.
    pub fn motion_for(
        &self,
        conv: &AnnotationConvention,
        clip: &AudioClip,
        identity: u32,
    ) -> Result<MotionSequence, DataError> {
        let d = super::samples_per_frame(clip.sample_rate, conv.fps)?;
        let frames = clip.samples.len() / d;
        let out_dim = conv.native_dim();
        let map = self.out_maps.get(&conv.id).ok_or_else(|| {
            DataError::Format(format!("teacher has no map for convention {}", conv.id))
        })?;
        let mut latents = Vec::with_capacity(frames);
        for t in 0..frames {
            let window = &clip.samples[t * d..(t + 1) * d];
            let features = self.window_features(window);
            latents.push(self.latent(&features, identity));
        }
        let mut data = Vec::with_capacity(frames * out_dim);
        for t in 0..frames {
            let mut smooth = [0.0f32; LATENT_DIM];
            let lo = t.saturating_sub(1);
            let hi = (t + 1).min(frames.saturating_sub(1));
            let span = (hi + 1 - lo) as f32;
            for s_t in lo..=hi {
                for k in 0..LATENT_DIM {
                    smooth[k] += latents[s_t][k] / span;
                }
            }
            for row in 0..out_dim {
                let mut acc = 0.0f32;
                for k in 0..LATENT_DIM {
                    acc += map[row * LATENT_DIM + k] * smooth[k];
                }
                data.push(acc);
            }
        }
        Ok(MotionSequence {
            convention_id: conv.id,
            fps: conv.fps,
            frames: Tensor::new(vec![frames, out_dim], data)
                .map_err(|e| DataError::Format(e.to_string()))?,
            identity,
        })
    }
}

/// Tone-segment audio: alternating voiced segments (2-3 bank tones with an
/// attack/decay envelope) and short silences.
pub fn synth_audio(samples: usize, sample_rate: u32, rng: &mut Rng) -> AudioClip {
    let mut out = vec![0.0f32; samples];
    let mut pos = 0usize;
    while pos < samples {
        let seg_len = ((rng.range(0.25, 0.6) * sample_rate as f64) as usize).max(1);
        let end = (pos + seg_len).min(samples);
        if !rng.bernoulli(0.15) {
            let tones = 2 + rng.below(2);
            let ramp = (sample_rate / 100) as usize;
            for _ in 0..tones {
                let freq = TONE_BANK[rng.below(TONE_BANK.len())];
                let amp = rng.range(0.1, 0.3) as f32;
                let phase = rng.range(0.0, std::f64::consts::TAU) as f32;
                let w = std::f32::consts::TAU * freq / sample_rate as f32;
                for (i, slot) in out[pos..end].iter_mut().enumerate() {
                    let env_in = ((i + 1) as f32 / ramp as f32).min(1.0);
                    let env_out = ((end - pos - i) as f32 / ramp as f32).min(1.0);
                    *slot += amp * env_in * env_out * (w * i as f32 + phase).sin();
                }
            }
        }
        pos = end;
    }
    AudioClip { samples: out, sample_rate }
}

/// Generate the dataset on disk and return the manifest (already written to
/// `<out_dir>/manifest.txt`) plus any split warnings.
pub fn generate_synthetic(
    spec: &SynthSpec,
    out_dir: &Path,
) -> Result<(DatasetManifest, Vec<String>), DataError> {
    let io = |p: &Path, source: std::io::Error| DataError::Io {
        path: p.display().to_string(),
        source,
    };
    for sub in ["assets", "audio", "motion"] {
        let p = out_dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
    }
    let conventions = build_conventions(spec);
    for conv in &conventions {
        conv.validate()?;
        super::samples_per_frame(spec.sample_rate, conv.fps)?;
    }
    let ids_per_conv = spec.identities_per_convention;
    let total_ids = ids_per_conv * conventions.len();
    let teacher = SynthTeacher::new(spec, &conventions, total_ids);

    let mut identities = Vec::new();
    for (ci, conv) in conventions.iter().enumerate() {
        for k in 0..ids_per_conv {
            identities.push(IdentityEntry {
                global_id: (ci * ids_per_conv + k) as u32,
                convention_id: conv.id,
                name: format!("{}_spk{}", conv.name, k),
            });
        }
    }
    let pivot_identity = total_ids as u32;

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    if spec.sequences_per_convention == 0 {
        warnings.push("zero sequences requested; dataset is empty".to_string());
    }
    let base_rng = Rng::new(spec.seed);
    for (ci, conv) in conventions.iter().enumerate() {
        let d = super::samples_per_frame(spec.sample_rate, conv.fps)?;
        let frames = (spec.seconds * conv.fps) as usize;
        let samples = frames * d;
        for s in 0..spec.sequences_per_convention {
            let identity = (ci * ids_per_conv + s % ids_per_conv.max(1)) as u32;
            let mut audio_rng = base_rng.derive(((ci as u64) << 32) | s as u64);
            let clip = synth_audio(samples, spec.sample_rate, &mut audio_rng);
            let motion = teacher.motion_for(conv, &clip, identity)?;
            let rec_id = format!("c{}_i{}_s{:03}", conv.id, identity, s);
            let audio_rel = format!("audio/{rec_id}.a2fa");
            let motion_rel = format!("motion/{rec_id}.a2fm");
            files::write_audio(&out_dir.join(&audio_rel), &clip)?;
            files::write_motion(&out_dir.join(&motion_rel), &motion)?;
            records.push(SequenceRecord {
                id: rec_id,
                convention_id: conv.id,
                identity,
                audio_path: audio_rel,
                motion_path: motion_rel,
                split: Split::Train,
                dup_factor: if conv.kind == AnnotationKind::Vertex { 4 } else { 1 },
            });
        }
    }
    let mut split_rng = base_rng.derive(0x5917);
    warnings.extend(split_records(&mut records, (8, 1, 1), &mut split_rng)?);

    let mut asset_paths = BTreeMap::new();
    for conv in &conventions {
        let rel = format!("assets/{}.a2fc", conv.name);
        files::write_convention(&out_dir.join(&rel), conv)?;
        asset_paths.insert(conv.id, rel);
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        sample_rate: spec.sample_rate,
        conventions,
        identities,
        pivot_identity,
        records,
    };
    super::save_manifest(&manifest, &asset_paths, &out_dir.join("manifest.txt"))?;
    Ok((manifest, warnings))
}
