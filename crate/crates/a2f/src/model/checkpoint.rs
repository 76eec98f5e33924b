//! Checkpoint container: magic "UTKR", version, then a directory of named
//! little-endian arrays holding weights, optimizer state, the serialized
//! config, the convention registry (with digest) and PCA bases. Entries are
//! name-sorted, so a load/save cycle is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::container::Container;
use crate::dataset::files::{convention_from_container, convention_to_container};
use crate::ipca::{BasisProvenance, PcaBasis};
use crate::motion::AnnotationConvention;
use crate::numerics::{AdamConfig, AdamSlot, AdamState, Tensor};

use super::{init_params, param_specs, ModelConfig, ModelError, ParamStore};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UTKR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Warmup,
    Joint,
}

impl TrainStage {
    fn tag(self) -> u32 {
        match self {
            TrainStage::Warmup => 0,
            TrainStage::Joint => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(TrainStage::Warmup),
            1 => Some(TrainStage::Joint),
            _ => None,
        }
    }
}

/// Full trainable state: named weight tensors, config, convention registry,
/// PCA bases, optimizer state, and the training-stage marker.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub registry: Vec<AnnotationConvention>,
    /// Identity table rows including the pivot (last row).
    pub identity_rows: usize,
    pub params: ParamStore<f32>,
    pub bases: BTreeMap<u32, PcaBasis>,
    pub stage: TrainStage,
    pub epoch: u32,
    pub adam: AdamState,
}

/// FNV-1a over the serialized registry, in id order.
pub fn registry_digest(registry: &[AnnotationConvention]) -> u64 {
    let mut sorted: Vec<&AnnotationConvention> = registry.iter().collect();
    sorted.sort_by_key(|c| c.id);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for conv in sorted {
        for b in convention_to_container(conv).to_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl Checkpoint {
    /// Fresh model: deterministic parameter init, no bases fitted yet.
    pub fn new(
        config: ModelConfig,
        registry: Vec<AnnotationConvention>,
        identity_rows: usize,
        seed: u64,
        lr: f64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        for conv in &registry {
            conv.validate()?;
        }
        let params = init_params(&config, &registry, identity_rows, seed);
        Ok(Checkpoint {
            config,
            registry,
            identity_rows,
            params,
            bases: BTreeMap::new(),
            stage: TrainStage::Warmup,
            epoch: 0,
            adam: AdamState::new(AdamConfig { lr, ..AdamConfig::default() }),
        })
    }

    pub fn digest(&self) -> u64 {
        registry_digest(&self.registry)
    }

    pub fn convention(&self, id: u32) -> Option<&AnnotationConvention> {
        self.registry.iter().find(|c| c.id == id)
    }

    pub fn pivot_identity(&self) -> u32 {
        (self.identity_rows - 1) as u32
    }

    /// Re-initialize every parameter whose name matches the predicate and
    /// drop its optimizer slots (used for transfer to unseen annotations).
    pub fn reinit_params(&mut self, matches: impl Fn(&str) -> bool, seed: u64) {
        let specs = param_specs(&self.config, &self.registry, self.identity_rows);
        let mut fresh_adam = AdamState::new(self.adam.config);
        for (name, slot) in self.adam.slots() {
            if !matches(name) {
                fresh_adam.insert_slot(name.clone(), slot.clone());
            }
        }
        self.adam = fresh_adam;
        for (name, shape, kind) in specs {
            if matches(&name) {
                let mut rng =
                    crate::numerics::Rng::new(seed).derive(super::name_stream(&name));
                self.params.insert(name, super::init_tensor(&shape, kind, &mut rng));
            }
        }
    }

    /// Every config-declared parameter must be present exactly once with
    /// the declared shape.
    pub fn check_params_complete(&self) -> Result<(), ModelError> {
        let specs = param_specs(&self.config, &self.registry, self.identity_rows);
        let mut expected: BTreeMap<&String, &Vec<usize>> =
            specs.iter().map(|(n, s, _)| (n, s)).collect();
        for (name, tensor) in self.params.iter() {
            match expected.remove(name) {
                Some(shape) if shape.as_slice() == tensor.shape() => {}
                Some(shape) => {
                    return Err(ModelError::Config(format!(
                        "parameter `{name}` has shape {:?}, config declares {:?}",
                        tensor.shape(),
                        shape
                    )))
                }
                None => {
                    return Err(ModelError::Config(format!(
                        "parameter `{name}` is not declared by the config"
                    )))
                }
            }
        }
        if let Some((name, _)) = expected.into_iter().next() {
            return Err(ModelError::Config(format!("missing parameter `{name}`")));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        c.put_string("meta.config", &self.config.to_text());
        c.put_u32("meta.stage", vec![1], &[self.stage.tag()]);
        c.put_u32("meta.epoch", vec![1], &[self.epoch]);
        c.put_u32("meta.identity_rows", vec![1], &[self.identity_rows as u32]);
        c.put_bytes("meta.digest", self.digest().to_le_bytes().to_vec());
        for conv in &self.registry {
            c.put_bytes(
                &format!("registry.{:06}", conv.id),
                convention_to_container(conv).to_bytes(),
            );
        }
        for (name, tensor) in self.params.iter() {
            c.put_f32(
                &format!("param.{name}"),
                tensor.shape().iter().map(|&d| d as u64).collect(),
                tensor.data(),
            );
        }
        c.put_bytes("adam.lr", self.adam.config.lr.to_le_bytes().to_vec());
        c.put_bytes("adam.beta1", self.adam.config.beta1.to_le_bytes().to_vec());
        c.put_bytes("adam.beta2", self.adam.config.beta2.to_le_bytes().to_vec());
        c.put_bytes("adam.epsilon", self.adam.config.epsilon.to_le_bytes().to_vec());
        for (name, slot) in self.adam.slots() {
            c.put_f32(&format!("adam.m.{name}"), vec![slot.m.len() as u64], &slot.m);
            c.put_f32(&format!("adam.v.{name}"), vec![slot.v.len() as u64], &slot.v);
            c.put_u32(
                &format!("adam.t.{name}"),
                vec![2],
                &[slot.step as u32, (slot.step >> 32) as u32],
            );
        }
        for (id, basis) in &self.bases {
            let prefix = format!("pca.{id}");
            let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
            c.put_f32(&format!("{prefix}.mean"), vec![basis.dim as u64], &f32s(&basis.mean));
            c.put_f32(
                &format!("{prefix}.components"),
                vec![basis.retained as u64, basis.dim as u64],
                &f32s(&basis.components),
            );
            c.put_f32(
                &format!("{prefix}.variance"),
                vec![basis.retained as u64],
                &f32s(&basis.explained_variance),
            );
            c.put_u32(&format!("{prefix}.frames"), vec![1], &[basis.frames_seen as u32]);
            let prov = match basis.provenance {
                BasisProvenance::TrainSplit => 0,
                BasisProvenance::Unrestricted => 1,
            };
            c.put_u32(&format!("{prefix}.provenance"), vec![1], &[prov]);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        let config = ModelConfig::from_text(&c.string("meta.config")?)?;
        let stage = TrainStage::from_tag(c.u32s("meta.stage")?[0])
            .ok_or_else(|| ModelError::Config("bad stage tag".into()))?;
        let epoch = c.u32s("meta.epoch")?[0];
        let identity_rows = c.u32s("meta.identity_rows")?[0] as usize;

        let mut registry = Vec::new();
        let names: Vec<String> = c.names().cloned().collect();
        for name in &names {
            if let Some(rest) = name.strip_prefix("registry.") {
                let _id: u32 = rest
                    .parse()
                    .map_err(|_| ModelError::Config(format!("bad registry entry `{name}`")))?;
                let blob = c.entry(name)?;
                let nested = Container::from_bytes(
                    &blob.bytes,
                    crate::dataset::files::ASSET_MAGIC,
                )?;
                registry.push(
                    convention_from_container(&nested)
                        .map_err(|e| ModelError::Config(e.to_string()))?,
                );
            }
        }
        registry.sort_by_key(|conv| conv.id);

        let mut params = ParamStore::new();
        for name in &names {
            if let Some(pname) = name.strip_prefix("param.") {
                let shape = c.shape(name)?;
                let data = c.f32s(name)?;
                params.insert(
                    pname.to_string(),
                    Tensor::new(shape, data).map_err(|e| ModelError::Config(e.to_string()))?,
                );
            }
        }

        let f64_of = |name: &str| -> Result<f64, ModelError> {
            let e = c.entry(name)?;
            let b: [u8; 8] = e.bytes.as_slice().try_into().map_err(|_| {
                ModelError::Config(format!("entry `{name}` is not an f64 blob"))
            })?;
            Ok(f64::from_le_bytes(b))
        };
        let mut adam = AdamState::new(AdamConfig {
            lr: f64_of("adam.lr")?,
            beta1: f64_of("adam.beta1")?,
            beta2: f64_of("adam.beta2")?,
            epsilon: f64_of("adam.epsilon")?,
        });
        for name in &names {
            if let Some(pname) = name.strip_prefix("adam.m.") {
                let m = c.f32s(name)?;
                let v = c.f32s(&format!("adam.v.{pname}"))?;
                let t = c.u32s(&format!("adam.t.{pname}"))?;
                let step = t[0] as u64 | ((t[1] as u64) << 32);
                adam.insert_slot(pname.to_string(), AdamSlot { m, v, step });
            }
        }

        let mut bases = BTreeMap::new();
        for name in &names {
            if let (Some(rest), true) = (name.strip_prefix("pca."), name.ends_with(".mean")) {
                let id: u32 = rest
                    .trim_end_matches(".mean")
                    .parse()
                    .map_err(|_| ModelError::Config(format!("bad pca entry `{name}`")))?;
                let prefix = format!("pca.{id}");
                let mean: Vec<f64> =
                    c.f32s(&format!("{prefix}.mean"))?.into_iter().map(f64::from).collect();
                let comp_shape = c.shape(&format!("{prefix}.components"))?;
                let components: Vec<f64> = c
                    .f32s(&format!("{prefix}.components"))?
                    .into_iter()
                    .map(f64::from)
                    .collect();
                let explained_variance: Vec<f64> =
                    c.f32s(&format!("{prefix}.variance"))?.into_iter().map(f64::from).collect();
                let provenance = match c.u32s(&format!("{prefix}.provenance"))?[0] {
                    0 => BasisProvenance::TrainSplit,
                    _ => BasisProvenance::Unrestricted,
                };
                bases.insert(
                    id,
                    PcaBasis {
                        mean,
                        components,
                        explained_variance,
                        dim: comp_shape[1],
                        retained: comp_shape[0],
                        frames_seen: c.u32s(&format!("{prefix}.frames"))?[0] as usize,
                        provenance,
                    },
                );
            }
        }

        let ckpt = Checkpoint {
            config,
            registry,
            identity_rows,
            params,
            bases,
            stage,
            epoch,
            adam,
        };
        // Digest check guards against a registry/weights mismatch.
        let stored = c.entry("meta.digest")?;
        let stored_digest = u64::from_le_bytes(
            stored.bytes.as_slice().try_into().map_err(|_| {
                ModelError::Config("meta.digest must be 8 bytes".into())
            })?,
        );
        if stored_digest != ckpt.digest() {
            return Err(ModelError::Config(
                "registry digest mismatch: checkpoint is corrupt or assets changed".into(),
            ));
        }
        ckpt.check_params_complete()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_container().write_to(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let c = Container::read_from(path, CHECKPOINT_MAGIC)?;
        Self::from_container(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{build_conventions, SynthSpec};
    use crate::numerics::Rng;

    fn checkpoint_with_state() -> Checkpoint {
        let registry = build_conventions(&SynthSpec::default());
        let mut ckpt =
            Checkpoint::new(ModelConfig::default(), registry, 13, 7, 1e-4).unwrap();
        // Fit one basis and take one optimizer step so all sections are
        // populated.
        let dim = 3 * ckpt.registry[0].vertex_count;
        let mut rng = Rng::new(3);
        let frames = crate::ipca::synthetic_low_rank(30, dim, 4, 0.01, &mut rng);
        let basis = crate::ipca::fit_exact(&frames, dim, 8, BasisProvenance::TrainSplit)
            .unwrap()
            .quantized();
        ckpt.bases.insert(0, basis);
        let grad = vec![0.01f32; ckpt.params.get("decoder.in.bias").unwrap().numel()];
        let mut p = ckpt.params.get("decoder.in.bias").unwrap().clone();
        ckpt.adam.step("decoder.in.bias", &mut p, &grad).unwrap();
        ckpt.params.insert("decoder.in.bias", p);
        ckpt.epoch = 4;
        ckpt.stage = TrainStage::Joint;
        ckpt
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let ckpt = checkpoint_with_state();
        let bytes = ckpt.to_container().to_bytes();
        let back =
            Checkpoint::from_container(&Container::from_bytes(&bytes, CHECKPOINT_MAGIC).unwrap())
                .unwrap();
        let bytes2 = back.to_container().to_bytes();
        assert_eq!(bytes, bytes2);
        assert_eq!(back.epoch, 4);
        assert_eq!(back.stage, TrainStage::Joint);
        assert_eq!(back.identity_rows, 13);
        assert_eq!(back.bases.len(), 1);
        assert_eq!(back.adam.slot("decoder.in.bias").unwrap().step, 1);
    }

    #[test]
    fn params_complete_check_catches_missing_and_extra() {
        let mut ckpt = checkpoint_with_state();
        ckpt.check_params_complete().unwrap();
        ckpt.params.insert("rogue.param", crate::numerics::Tensor::zeros(vec![1]));
        assert!(ckpt.check_params_complete().is_err());
        let mut ckpt2 = checkpoint_with_state();
        ckpt2.params.remove_prefix("head.1.");
        assert!(ckpt2.check_params_complete().is_err());
    }

    #[test]
    fn digest_changes_when_registry_changes() {
        let ckpt = checkpoint_with_state();
        let d1 = ckpt.digest();
        let mut other = ckpt.clone();
        other.registry[0].lip_mask.pop();
        assert_ne!(d1, other.digest());
    }

    #[test]
    fn reinit_resets_matching_params_and_keeps_the_rest() {
        let ckpt = checkpoint_with_state();
        let mut tuned = ckpt.clone();
        // Pretend training moved the decoder and encoder.
        for name in ["decoder.in.weight", "encoder.proj.weight"] {
            let mut t = tuned.params.get(name).unwrap().clone();
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            tuned.params.insert(name, t);
        }
        tuned.reinit_params(|n| n.starts_with("decoder.") || n.starts_with("head."), 99);
        // Encoder untouched by reinit.
        assert_eq!(
            tuned.params.get("encoder.proj.weight").unwrap().data(),
            tuned.params.get("encoder.proj.weight").unwrap().data()
        );
        let moved = tuned.params.get("encoder.proj.weight").unwrap().data()[0];
        let orig = ckpt.params.get("encoder.proj.weight").unwrap().data()[0];
        assert!((moved - orig - 1.0).abs() < 1e-6);
        // Decoder reinitialized away from the +1 perturbation.
        let dec = tuned.params.get("decoder.in.weight").unwrap().data()[0];
        assert!(dec.abs() < 0.5, "decoder should be freshly initialized, got {dec}");
        assert!(tuned.adam.slot("decoder.in.bias").is_none(), "adam slot must be dropped");
    }
}
