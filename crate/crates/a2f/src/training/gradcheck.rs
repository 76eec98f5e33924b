//! End-to-end gradient check: the full forward pass plus loss on a tiny
//! model, differentiated in double precision against central finite
//! differences over every parameter.

use std::collections::BTreeMap;

use crate::dataset::synth::{build_conventions, SynthSpec};
use crate::ipca::{self, BasisProvenance, PcaBasis};
use crate::model::{forward, init_params, ForwardMode, ModelConfig, ParamStore};
use crate::motion::{AnnotationKind, AnnotationConvention};
use crate::numerics::{
    finite_difference_grad, max_relative_error, Graph, Rng, Tensor,
};

use super::{compute_loss_graph, LossWeights, TrainError};

pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Miniature configuration: 800 Hz audio, stride product 16, one
/// transformer layer, eight-dim model.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        sample_rate: 800,
        tcn_strides: vec![4, 2, 2],
        tcn_kernels: vec![8, 4, 4],
        tcn_channels: 6,
        dim: 8,
        transformer_layers: 1,
        heads: 2,
        ff_mult: 2,
        decoder_channels: 8,
        decoder_layers: 2,
        decoder_kernel: 3,
        embed_dim: 8,
        ..ModelConfig::default()
    }
}

/// Tiny two-head registry: a PCA vertex convention and an LBS skeleton
/// convention, both at rates that divide 800 Hz.
pub fn tiny_registry(seed: u64) -> (Vec<AnnotationConvention>, BTreeMap<u32, PcaBasis>) {
    let mut conventions = build_conventions(&SynthSpec {
        kinds: vec![AnnotationKind::Vertex, AnnotationKind::Skeleton],
        seed,
        sample_rate: 800,
        ..SynthSpec::default()
    });
    for conv in conventions.iter_mut() {
        match conv.kind {
            AnnotationKind::Vertex => {
                conv.fps = 25;
                conv.pca_components = 2;
            }
            _ => conv.fps = 20,
        }
    }
    let dim = 3 * conventions[0].vertex_count;
    let mut rng = Rng::new(seed ^ 0xBA5E);
    let frames = ipca::synthetic_low_rank(24, dim, 3, 0.01, &mut rng);
    let basis = ipca::fit_exact(&frames, dim, 2, BasisProvenance::TrainSplit)
        .expect("tiny basis fits")
        .quantized();
    let mut bases = BTreeMap::new();
    bases.insert(conventions[0].id, basis);
    (conventions, bases)
}

fn flatten(store: &ParamStore<f64>) -> (Vec<f64>, Vec<(String, Vec<usize>)>) {
    let mut flat = Vec::new();
    let mut layout = Vec::new();
    for (name, tensor) in store.iter() {
        layout.push((name.clone(), tensor.shape().to_vec()));
        flat.extend_from_slice(tensor.data());
    }
    (flat, layout)
}

fn unflatten(flat: &[f64], layout: &[(String, Vec<usize>)]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut offset = 0;
    for (name, shape) in layout {
        let numel: usize = shape.iter().product();
        store.insert(
            name.clone(),
            Tensor::new(shape.clone(), flat[offset..offset + numel].to_vec())
                .expect("layout matches"),
        );
        offset += numel;
    }
    store
}

/// Max relative error between reverse-mode and finite-difference gradients
/// of the combined two-convention loss with respect to every parameter.
pub fn end_to_end_gradient_check(seed: u64) -> Result<f64, TrainError> {
    let config = tiny_config();
    config.validate()?;
    let (registry, bases) = tiny_registry(seed);
    let identity_rows = 3usize;
    let params64 = init_params(&config, &registry, identity_rows, seed).cast::<f64>();
    let (point, layout) = flatten(&params64);

    let mut rng = Rng::new(seed ^ 0x0D10);
    let audio: Vec<f32> = (0..400).map(|_| (rng.normal() * 0.2) as f32).collect();
    let weights = LossWeights::default();

    // Ground truth per convention, random but fixed.
    let mut targets: BTreeMap<u32, (Tensor<f64>, Tensor<f64>)> = BTreeMap::new();
    for conv in &registry {
        let frames = super::super::model::adapted_len(25, conv.fps);
        let head_dim = conv.head_dim();
        let vdim = 3 * conv.vertex_count;
        let head: Vec<f64> = (0..frames * head_dim).map(|_| rng.normal() * 0.1).collect();
        let verts: Vec<f64> = (0..frames * vdim).map(|_| rng.normal() * 0.1).collect();
        targets.insert(
            conv.id,
            (
                Tensor::new(vec![frames, vdim], verts).expect("sized"),
                Tensor::new(vec![frames, head_dim], head).expect("sized"),
            ),
        );
    }

    let eval = |flat: &[f64], want_grads: bool| -> (f64, Vec<f64>) {
        let store = unflatten(flat, &layout);
        let mut g = Graph::<f64>::new();
        let mut total: Option<crate::numerics::Var> = None;
        // Each forward binds its own leaves for shared parameters, so
        // gradients must accumulate across every binding of a name.
        let mut bound_all: BTreeMap<String, Vec<crate::numerics::Var>> = BTreeMap::new();
        for conv in &registry {
            let out = forward(
                &mut g,
                &store,
                &config,
                &registry,
                &bases,
                &audio,
                (conv.id % identity_rows as u32).min(identity_rows as u32 - 1),
                conv.id,
                identity_rows,
                ForwardMode::Infer,
            )
            .expect("tiny forward is shape-valid");
            let (gt_v, gt_n) = &targets[&conv.id];
            let loss = compute_loss_graph(
                &mut g,
                out.vertices,
                out.native,
                gt_v,
                gt_n,
                conv.kind,
                &weights,
            )
            .expect("loss shapes align");
            total = Some(match total {
                None => loss,
                Some(acc) => g.add(acc, loss).expect("scalars"),
            });
            for (name, var) in out.bound {
                bound_all.entry(name).or_default().push(var);
            }
        }
        let total = total.expect("at least one convention");
        let value = g.value(total)[0];
        if !want_grads {
            return (value, Vec::new());
        }
        g.backward(total).expect("scalar loss");
        let mut grads = Vec::with_capacity(flat.len());
        for (name, shape) in &layout {
            let numel: usize = shape.iter().product();
            match bound_all.get(name) {
                Some(vars) => {
                    let mut acc = vec![0.0f64; numel];
                    for &var in vars {
                        for (a, &gv) in acc.iter_mut().zip(g.grad(var)) {
                            *a += gv;
                        }
                    }
                    grads.extend(acc);
                }
                None => grads.extend(std::iter::repeat(0.0).take(numel)),
            }
        }
        (value, grads)
    };

    let (_, analytic) = eval(&point, true);
    let numeric = finite_difference_grad(|x| eval(x, false).0, &point, 1e-5);
    Ok(max_relative_error(&analytic, &numeric))
}
