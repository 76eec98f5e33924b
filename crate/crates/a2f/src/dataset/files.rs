//! On-disk formats: A2FM motion files, A2FA raw audio, 16-bit PCM WAV
//! reading, and convention asset blobs.

use std::io::{Read, Write};
use std::path::Path;

use crate::container::Container;
use crate::motion::{
    AnnotationConvention, AnnotationKind, BlendshapeBasis, Joint, LbsRig, MotionSequence,
};
use crate::numerics::Tensor;

use super::{AudioClip, DataError};

pub const MOTION_MAGIC: [u8; 4] = *b"A2FM";
pub const AUDIO_MAGIC: [u8; 4] = *b"A2FA";
pub const ASSET_MAGIC: [u8; 4] = *b"A2FC";
pub const FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

// ── motion files ─────────────────────────────────────────────────────────

/// Header {magic "A2FM", version u32, T u32, dim u32, fps f32,
/// convention_id u32}, then T*dim little-endian f32 frames.
pub fn write_motion(path: &Path, seq: &MotionSequence) -> Result<(), DataError> {
    let t = seq.frames.rows() as u32;
    let dim = seq.frames.cols() as u32;
    let mut out = Vec::with_capacity(24 + seq.frames.numel() * 4);
    out.extend_from_slice(&MOTION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(seq.fps as f32).to_le_bytes());
    out.extend_from_slice(&seq.convention_id.to_le_bytes());
    for v in seq.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub struct MotionHeader {
    pub frames: usize,
    pub dim: usize,
    pub fps: f32,
    pub convention_id: u32,
}

pub fn read_motion_header(path: &Path) -> Result<MotionHeader, DataError> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut head = [0u8; 24];
    f.read_exact(&mut head).map_err(|e| io_err(path, e))?;
    parse_motion_header(&head, path)
}

fn parse_motion_header(head: &[u8; 24], path: &Path) -> Result<MotionHeader, DataError> {
    if head[0..4] != MOTION_MAGIC {
        return Err(DataError::Format(format!("{}: not an A2FM file", path.display())));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("fixed width"));
    if version != FORMAT_VERSION {
        return Err(DataError::Format(format!("{}: unsupported version {version}", path.display())));
    }
    Ok(MotionHeader {
        frames: u32::from_le_bytes(head[8..12].try_into().expect("fixed width")) as usize,
        dim: u32::from_le_bytes(head[12..16].try_into().expect("fixed width")) as usize,
        fps: f32::from_le_bytes(head[16..20].try_into().expect("fixed width")),
        convention_id: u32::from_le_bytes(head[20..24].try_into().expect("fixed width")),
    })
}

pub fn read_motion(path: &Path, identity: u32) -> Result<MotionSequence, DataError> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if data.len() < 24 {
        return Err(DataError::Format(format!("{}: truncated header", path.display())));
    }
    let head: [u8; 24] = data[0..24].try_into().expect("checked length");
    let header = parse_motion_header(&head, path)?;
    let expected = 24 + header.frames * header.dim * 4;
    if data.len() != expected {
        return Err(DataError::Format(format!(
            "{}: payload is {} bytes, header implies {}",
            path.display(),
            data.len() - 24,
            expected - 24
        )));
    }
    let values: Vec<f32> = data[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(MotionSequence {
        convention_id: header.convention_id,
        fps: header.fps.round() as u32,
        frames: Tensor::new(vec![header.frames, header.dim], values)
            .map_err(|e| DataError::Format(e.to_string()))?,
        identity,
    })
}

// ── audio files ──────────────────────────────────────────────────────────

/// Header {magic "A2FA", sample_rate u32, length u64}, then f32 samples.
pub fn write_audio(path: &Path, clip: &AudioClip) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(16 + clip.samples.len() * 4);
    out.extend_from_slice(&AUDIO_MAGIC);
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.samples.len() as u64).to_le_bytes());
    for v in &clip.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub struct AudioHeader {
    pub sample_rate: u32,
    pub samples: usize,
}

pub fn read_audio_header(path: &Path) -> Result<AudioHeader, DataError> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head).map_err(|e| io_err(path, e))?;
    if head[0..4] == AUDIO_MAGIC {
        Ok(AudioHeader {
            sample_rate: u32::from_le_bytes(head[4..8].try_into().expect("fixed width")),
            samples: u64::from_le_bytes(head[8..16].try_into().expect("fixed width")) as usize,
        })
    } else if head[0..4] == *b"RIFF" {
        let clip = read_audio(path)?;
        Ok(AudioHeader { sample_rate: clip.sample_rate, samples: clip.samples.len() })
    } else {
        Err(DataError::Format(format!("{}: not an A2FA or WAV file", path.display())))
    }
}

/// Reads raw A2FA or 16-bit PCM mono WAV, sniffed by magic.
pub fn read_audio(path: &Path) -> Result<AudioClip, DataError> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if data.len() >= 4 && data[0..4] == AUDIO_MAGIC {
        if data.len() < 16 {
            return Err(DataError::Format(format!("{}: truncated header", path.display())));
        }
        let sample_rate = u32::from_le_bytes(data[4..8].try_into().expect("fixed width"));
        let len = u64::from_le_bytes(data[8..16].try_into().expect("fixed width")) as usize;
        if data.len() != 16 + len * 4 {
            return Err(DataError::Format(format!("{}: truncated samples", path.display())));
        }
        let samples = data[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        return Ok(AudioClip { samples, sample_rate });
    }
    if data.len() >= 12 && data[0..4] == *b"RIFF" && data[8..12] == *b"WAVE" {
        return read_wav(&data, path);
    }
    Err(DataError::Format(format!("{}: not an A2FA or WAV file", path.display())))
}

fn read_wav(data: &[u8], path: &Path) -> Result<AudioClip, DataError> {
    let bad = |msg: &str| DataError::Format(format!("{}: {msg}", path.display()));
    let mut pos = 12;
    let mut sample_rate = 0u32;
    let mut channels = 0u16;
    let mut bits = 0u16;
    let mut payload: Option<&[u8]> = None;
    while pos + 8 <= data.len() {
        let id = &data[pos..pos + 4];
        let size =
            u32::from_le_bytes(data[pos + 4..pos + 8].try_into().expect("fixed width")) as usize;
        let body_end = (pos + 8 + size).min(data.len());
        let body = &data[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("short fmt chunk"));
                }
                let format = u16::from_le_bytes([body[0], body[1]]);
                if format != 1 {
                    return Err(bad("only PCM WAV is supported"));
                }
                channels = u16::from_le_bytes([body[2], body[3]]);
                sample_rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                bits = u16::from_le_bytes([body[14], body[15]]);
            }
            b"data" => payload = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    let payload = payload.ok_or_else(|| bad("missing data chunk"))?;
    if channels != 1 {
        return Err(bad("only mono WAV is supported"));
    }
    if bits != 16 {
        return Err(bad("only 16-bit PCM WAV is supported"));
    }
    let samples = payload
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok(AudioClip { samples, sample_rate })
}

/// 16-bit PCM mono WAV writer (for interoperability checks).
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), DataError> {
    let n = clip.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &v in &clip.samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

// ── convention assets ────────────────────────────────────────────────────

const PARENT_NONE: u32 = u32::MAX;

pub fn convention_to_container(conv: &AnnotationConvention) -> Container {
    let mut c = Container::new(ASSET_MAGIC, FORMAT_VERSION);
    c.put_u32("id", vec![1], &[conv.id]);
    c.put_string("name", &conv.name);
    c.put_string("kind", conv.kind.as_str());
    c.put_u32("fps", vec![1], &[conv.fps]);
    c.put_u32("vertex_count", vec![1], &[conv.vertex_count as u32]);
    c.put_u32("param_count", vec![1], &[conv.param_count as u32]);
    c.put_u32("pca_components", vec![1], &[conv.pca_components as u32]);
    c.put_f32("scale", vec![1], &[conv.scale]);
    c.put_f32("template", vec![conv.neutral_template.len() as u64], &conv.neutral_template);
    let lip: Vec<u32> = conv.lip_mask.iter().map(|&i| i as u32).collect();
    let upper: Vec<u32> = conv.upper_face_mask.iter().map(|&i| i as u32).collect();
    c.put_u32("lip_mask", vec![lip.len() as u64], &lip);
    c.put_u32("upper_mask", vec![upper.len() as u64], &upper);
    if let Some(bs) = &conv.blendshape {
        c.put_f32("bs.mean", vec![bs.mean_shape.len() as u64], &bs.mean_shape);
        c.put_f32("bs.bases", vec![bs.count as u64, bs.dim() as u64], &bs.bases);
    }
    if let Some(rig) = &conv.lbs {
        c.put_f32("lbs.rest", vec![rig.rest_pose.len() as u64], &rig.rest_pose);
        let mut pos = Vec::with_capacity(rig.joints.len() * 3);
        let mut parents = Vec::with_capacity(rig.joints.len());
        for j in &rig.joints {
            pos.extend_from_slice(&j.position);
            parents.push(j.parent.map_or(PARENT_NONE, |p| p as u32));
        }
        c.put_f32("lbs.joints", vec![rig.joints.len() as u64, 3], &pos);
        c.put_u32("lbs.parents", vec![parents.len() as u64], &parents);
        c.put_f32(
            "lbs.weights",
            vec![rig.vertex_count() as u64, rig.joints.len() as u64],
            &rig.blendweights,
        );
    }
    c
}

pub fn convention_from_container(c: &Container) -> Result<AnnotationConvention, DataError> {
    let kind_str = c.string("kind")?;
    let kind = AnnotationKind::parse(&kind_str)
        .ok_or_else(|| DataError::Format(format!("unknown annotation kind `{kind_str}`")))?;
    let blendshape = if c.contains("bs.mean") {
        let shape = c.shape("bs.bases")?;
        Some(BlendshapeBasis {
            mean_shape: c.f32s("bs.mean")?,
            bases: c.f32s("bs.bases")?,
            count: shape[0],
        })
    } else {
        None
    };
    let lbs = if c.contains("lbs.rest") {
        let pos = c.f32s("lbs.joints")?;
        let parents = c.u32s("lbs.parents")?;
        let joints = parents
            .iter()
            .enumerate()
            .map(|(i, &p)| Joint {
                position: [pos[i * 3], pos[i * 3 + 1], pos[i * 3 + 2]],
                parent: (p != PARENT_NONE).then_some(p as usize),
            })
            .collect();
        Some(LbsRig {
            rest_pose: c.f32s("lbs.rest")?,
            joints,
            blendweights: c.f32s("lbs.weights")?,
        })
    } else {
        None
    };
    let conv = AnnotationConvention {
        id: c.u32s("id")?[0],
        name: c.string("name")?,
        kind,
        fps: c.u32s("fps")?[0],
        vertex_count: c.u32s("vertex_count")?[0] as usize,
        param_count: c.u32s("param_count")?[0] as usize,
        scale: c.f32s("scale")?[0],
        lip_mask: c.u32s("lip_mask")?.into_iter().map(|i| i as usize).collect(),
        upper_face_mask: c.u32s("upper_mask")?.into_iter().map(|i| i as usize).collect(),
        neutral_template: c.f32s("template")?,
        blendshape,
        lbs,
        pca_components: c.u32s("pca_components")?[0] as usize,
    };
    conv.validate()?;
    Ok(conv)
}

pub fn write_convention(path: &Path, conv: &AnnotationConvention) -> Result<(), DataError> {
    convention_to_container(conv).write_to(path).map_err(DataError::from)
}

pub fn read_convention(path: &Path) -> Result<AnnotationConvention, DataError> {
    let c = Container::read_from(path, ASSET_MAGIC)?;
    convention_from_container(&c)
}
