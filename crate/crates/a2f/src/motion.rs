//! Annotation conventions and differentiable derivation of face vertices
//! from each head's native output: PCA values for vertex annotations,
//! blendshape weights, or skeleton poses.
//!
//! Vertex-kind sequences store displacements over the neutral template;
//! parameter kinds store raw parameters. All derivations run on the
//! computation graph so the vertex loss can backpropagate through them.

use thiserror::Error;

use crate::ipca::PcaBasis;
use crate::numerics::{Graph, NumericsError, Real, Tensor, Var};

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("convention `{name}`: {detail}")]
    InvalidConvention { name: String, detail: String },
    #[error("expected {expected} values per frame, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("missing {what} for {kind:?} convention")]
    MissingAsset { what: &'static str, kind: AnnotationKind },
    #[error("scale factor must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationKind {
    Vertex,
    Blendshape,
    Skeleton,
}

impl AnnotationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnnotationKind::Vertex => "vertex",
            AnnotationKind::Blendshape => "blendshape",
            AnnotationKind::Skeleton => "skeleton",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vertex" => Some(AnnotationKind::Vertex),
            "blendshape" => Some(AnnotationKind::Blendshape),
            "skeleton" => Some(AnnotationKind::Skeleton),
            _ => None,
        }
    }
}

/// Linear deformation basis: face = mean shape + weighted sum of bases.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeBasis {
    /// `3V` mean/neutral shape.
    pub mean_shape: Vec<f32>,
    /// `B x 3V` row-major shape bases.
    pub bases: Vec<f32>,
    pub count: usize,
}

impl BlendshapeBasis {
    pub fn dim(&self) -> usize {
        self.mean_shape.len()
    }

    pub fn basis_row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.bases[i * d..(i + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub position: [f32; 3],
    pub parent: Option<usize>,
}

/// Minimal tree-structured linear-blend-skinning rig with per-joint
/// axis-angle pose parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LbsRig {
    /// `3V` rest-pose vertices.
    pub rest_pose: Vec<f32>,
    pub joints: Vec<Joint>,
    /// `V x num_joints`, rows non-negative summing to 1.
    pub blendweights: Vec<f32>,
}

impl LbsRig {
    pub fn vertex_count(&self) -> usize {
        self.rest_pose.len() / 3
    }

    pub fn pose_dim(&self) -> usize {
        3 * self.joints.len()
    }

    /// Joint indices ordered parents-before-children. Errors on cycles or a
    /// missing root.
    pub fn topo_order(&self) -> Result<Vec<usize>, MotionError> {
        let n = self.joints.len();
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        for _ in 0..n {
            let before = order.len();
            for (j, joint) in self.joints.iter().enumerate() {
                if placed[j] {
                    continue;
                }
                match joint.parent {
                    None => {
                        order.push(j);
                        placed[j] = true;
                    }
                    Some(p) if p < n && placed[p] => {
                        order.push(j);
                        placed[j] = true;
                    }
                    _ => {}
                }
            }
            if order.len() == n {
                return Ok(order);
            }
            if order.len() == before {
                break;
            }
        }
        Err(MotionError::InvalidConvention {
            name: "lbs rig".into(),
            detail: "joint parents contain a cycle or dangling index".into(),
        })
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        let v = self.vertex_count();
        let j = self.joints.len();
        if self.rest_pose.len() != 3 * v || self.blendweights.len() != v * j {
            return Err(MotionError::InvalidConvention {
                name: "lbs rig".into(),
                detail: "rest pose / blendweight sizes disagree".into(),
            });
        }
        self.topo_order()?;
        for row in 0..v {
            let w = &self.blendweights[row * j..(row + 1) * j];
            if w.iter().any(|&x| x < 0.0) {
                return Err(MotionError::InvalidConvention {
                    name: "lbs rig".into(),
                    detail: format!("negative blendweight on vertex {row}"),
                });
            }
            let sum: f32 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(MotionError::InvalidConvention {
                    name: "lbs rig".into(),
                    detail: format!("blendweight row {row} sums to {sum}"),
                });
            }
        }
        Ok(())
    }
}

/// One output head's annotation convention: what the head emits natively and
/// everything needed to turn that into face vertices.
#[derive(Clone, Debug)]
pub struct AnnotationConvention {
    pub id: u32,
    pub name: String,
    pub kind: AnnotationKind,
    pub fps: u32,
    pub vertex_count: usize,
    /// Native parameter count: 0 for vertex kind, B or 3*joints otherwise.
    pub param_count: usize,
    /// Applied to derived vertices during training; inverted for reporting.
    pub scale: f32,
    pub lip_mask: Vec<usize>,
    pub upper_face_mask: Vec<usize>,
    /// `3V` neutral-face template.
    pub neutral_template: Vec<f32>,
    pub blendshape: Option<BlendshapeBasis>,
    pub lbs: Option<LbsRig>,
    /// Retained PCA components for vertex-kind heads (0 disables PCA and the
    /// head regresses raw displacements).
    pub pca_components: usize,
}

impl AnnotationConvention {
    /// Per-frame width of stored motion data: displacements (3V) for vertex
    /// kind, parameters otherwise.
    pub fn native_dim(&self) -> usize {
        match self.kind {
            AnnotationKind::Vertex => 3 * self.vertex_count,
            _ => self.param_count,
        }
    }

    /// Per-frame width of the decoder head output.
    pub fn head_dim(&self) -> usize {
        match self.kind {
            AnnotationKind::Vertex => {
                if self.pca_components > 0 {
                    self.pca_components
                } else {
                    3 * self.vertex_count
                }
            }
            _ => self.param_count,
        }
    }

    pub fn uses_pca(&self) -> bool {
        self.kind == AnnotationKind::Vertex && self.pca_components > 0
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        let err = |detail: String| MotionError::InvalidConvention {
            name: self.name.clone(),
            detail,
        };
        if self.vertex_count == 0 {
            return Err(err("vertex count is zero".into()));
        }
        if self.neutral_template.len() != 3 * self.vertex_count {
            return Err(err(format!(
                "template has {} values, expected {}",
                self.neutral_template.len(),
                3 * self.vertex_count
            )));
        }
        if self.scale <= 0.0 {
            return Err(MotionError::NonPositiveScale(self.scale as f64));
        }
        match self.kind {
            AnnotationKind::Vertex => {
                if self.param_count != 0 {
                    return Err(err("vertex kind must have param_count 0".into()));
                }
            }
            AnnotationKind::Blendshape => {
                let basis = self.blendshape.as_ref().ok_or(MotionError::MissingAsset {
                    what: "blendshape basis",
                    kind: self.kind,
                })?;
                if basis.count == 0 {
                    return Err(err("blendshape basis is empty".into()));
                }
                if basis.dim() != 3 * self.vertex_count
                    || basis.bases.len() != basis.count * basis.dim()
                {
                    return Err(err("blendshape basis sizes disagree with vertex count".into()));
                }
                if self.param_count != basis.count {
                    return Err(err(format!(
                        "param_count {} != basis count {}",
                        self.param_count, basis.count
                    )));
                }
            }
            AnnotationKind::Skeleton => {
                let rig = self.lbs.as_ref().ok_or(MotionError::MissingAsset {
                    what: "lbs rig",
                    kind: self.kind,
                })?;
                rig.validate()?;
                if rig.vertex_count() != self.vertex_count {
                    return Err(err("rig vertex count disagrees with convention".into()));
                }
                if self.param_count != rig.pose_dim() {
                    return Err(err(format!(
                        "param_count {} != pose dim {}",
                        self.param_count,
                        rig.pose_dim()
                    )));
                }
            }
        }
        for (mask_name, mask) in
            [("lip_mask", &self.lip_mask), ("upper_face_mask", &self.upper_face_mask)]
        {
            let mut seen = vec![false; self.vertex_count];
            for &idx in mask {
                if idx >= self.vertex_count {
                    return Err(err(format!("{mask_name} index {idx} >= V")));
                }
                if seen[idx] {
                    return Err(err(format!("{mask_name} repeats index {idx}")));
                }
                seen[idx] = true;
            }
        }
        Ok(())
    }
}

/// Per-frame motion under one convention.
#[derive(Clone, Debug)]
pub struct MotionSequence {
    pub convention_id: u32,
    pub fps: u32,
    /// `[T, native_dim]`.
    pub frames: Tensor<f32>,
    pub identity: u32,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.numel() == 0
    }
}

// ── derivations ──────────────────────────────────────────────────────────

/// `S = mean + sum_i alpha_i * s_i` per frame, differentiable in the weights.
pub fn blendshape_to_vertices_graph<T: Real>(
    g: &mut Graph<T>,
    weights: Var,
    basis: &BlendshapeBasis,
) -> Result<Var, MotionError> {
    let w_shape = g.shape_of(weights).to_vec();
    if w_shape.len() != 2 || w_shape[1] != basis.count {
        return Err(MotionError::DimMismatch {
            expected: basis.count,
            got: *w_shape.last().unwrap_or(&0),
        });
    }
    let bases = Tensor::new(vec![basis.count, basis.dim()], basis.bases.clone())
        .expect("basis sizes validated")
        .cast::<T>();
    let mean = Tensor::new(vec![basis.dim()], basis.mean_shape.clone())
        .expect("basis sizes validated")
        .cast::<T>();
    let bvar = g.leaf_owned(bases);
    let mvar = g.leaf_owned(mean);
    let disp = g.matmul(weights, bvar)?;
    Ok(g.add_row_broadcast(disp, mvar)?)
}

/// Skew-matrix constructor as a constant `[9,3]` linear map.
fn skew_map<T: Real>() -> Tensor<T> {
    let mut c = vec![0.0f64; 27];
    // vec(K) row-major for K = [[0,-z,y],[z,0,-x],[-y,x,0]]
    c[1 * 3 + 2] = -1.0;
    c[2 * 3 + 1] = 1.0;
    c[3 * 3 + 2] = 1.0;
    c[5 * 3] = -1.0;
    c[6 * 3 + 1] = -1.0;
    c[7 * 3] = 1.0;
    Tensor::new(vec![9, 3], c.into_iter().map(T::from_f64).collect()).expect("fixed shape")
}

/// Standard linear blend skinning, differentiable in the pose: forward
/// kinematics down the joint tree, then
/// `v' = sum_j w[v,j] * (R_j (rest_v - J_j) + J'_j)` per frame.
pub fn lbs_to_vertices_graph<T: Real>(
    g: &mut Graph<T>,
    pose: Var,
    rig: &LbsRig,
) -> Result<Var, MotionError> {
    let shape = g.shape_of(pose).to_vec();
    if shape.len() != 2 || shape[1] != rig.pose_dim() {
        return Err(MotionError::DimMismatch {
            expected: rig.pose_dim(),
            got: *shape.last().unwrap_or(&0),
        });
    }
    let frames = shape[0];
    let v = rig.vertex_count();
    let nj = rig.joints.len();
    let order = rig.topo_order()?;

    // Constant leaves shared across frames.
    let skew = g.leaf_owned(skew_map::<T>());
    let eye = {
        let mut m = vec![T::ZERO; 9];
        m[0] = T::ONE;
        m[4] = T::ONE;
        m[8] = T::ONE;
        g.leaf_owned(Tensor::new(vec![3, 3], m).expect("fixed shape"))
    };
    let mut rest_minus_joint = Vec::with_capacity(nj);
    let mut weight_cols = Vec::with_capacity(nj);
    let mut joint_pos = Vec::with_capacity(nj);
    let mut parent_offset = Vec::with_capacity(nj);
    for (j, joint) in rig.joints.iter().enumerate() {
        let mut x = Vec::with_capacity(3 * v);
        for vert in 0..v {
            for c in 0..3 {
                x.push(T::from_f64(
                    (rig.rest_pose[vert * 3 + c] - joint.position[c]) as f64,
                ));
            }
        }
        rest_minus_joint.push(g.leaf_owned(Tensor::new(vec![v, 3], x).expect("sized above")));
        let col: Vec<T> = (0..v)
            .map(|vert| T::from_f64(rig.blendweights[vert * nj + j] as f64))
            .collect();
        weight_cols.push(g.leaf_owned(Tensor::new(vec![v, 1], col).expect("sized above")));
        let pos: Vec<T> = joint.position.iter().map(|&p| T::from_f64(p as f64)).collect();
        joint_pos.push(g.leaf_owned(Tensor::new(vec![3, 1], pos).expect("fixed shape")));
        let off: Vec<T> = match joint.parent {
            Some(p) => (0..3)
                .map(|c| T::from_f64((joint.position[c] - rig.joints[p].position[c]) as f64))
                .collect(),
            None => vec![T::ZERO; 3],
        };
        parent_offset.push(g.leaf_owned(Tensor::new(vec![3, 1], off).expect("fixed shape")));
    }

    let mut frame_rows = Vec::with_capacity(frames);
    for t in 0..frames {
        let pose_row = g.slice_rows(pose, t, 1)?;
        let mut world_rot: Vec<Option<Var>> = vec![None; nj];
        let mut world_pos: Vec<Option<Var>> = vec![None; nj];
        for &j in &order {
            let axis = g.slice_cols(pose_row, 3 * j, 3)?;
            let axis_col = g.transpose(axis)?;
            let sq = g.mul(axis, axis)?;
            let u = g.sum_all(sq);
            let f = g.rot_coeff_sin(u);
            let vers = g.rot_coeff_vers(u);
            let k_flat = g.matmul(skew, axis_col)?;
            let k = g.reshape(k_flat, vec![3, 3])?;
            let k2 = g.matmul(k, k)?;
            let fk = g.mul_scalar(k, f)?;
            let gk2 = g.mul_scalar(k2, vers)?;
            let partial = g.add(eye, fk)?;
            let local_rot = g.add(partial, gk2)?;
            match rig.joints[j].parent {
                None => {
                    world_rot[j] = Some(local_rot);
                    world_pos[j] = Some(joint_pos[j]);
                }
                Some(p) => {
                    let pr = world_rot[p].expect("topo order puts parents first");
                    let pp = world_pos[p].expect("topo order puts parents first");
                    world_rot[j] = Some(g.matmul(pr, local_rot)?);
                    let moved = g.matmul(pr, parent_offset[j])?;
                    world_pos[j] = Some(g.add(moved, pp)?);
                }
            }
        }
        let mut acc: Option<Var> = None;
        for j in 0..nj {
            let rot_t = g.transpose(world_rot[j].expect("all joints visited"))?;
            let rotated = g.matmul(rest_minus_joint[j], rot_t)?;
            let pos_row = g.transpose(world_pos[j].expect("all joints visited"))?;
            let pos_flat = g.reshape(pos_row, vec![3])?;
            let placed = g.add_row_broadcast(rotated, pos_flat)?;
            let weighted = g.mul_col_broadcast(placed, weight_cols[j])?;
            acc = Some(match acc {
                None => weighted,
                Some(a) => g.add(a, weighted)?,
            });
        }
        let verts = acc.expect("at least one joint");
        frame_rows.push(g.reshape(verts, vec![1, 3 * v])?);
    }
    Ok(g.concat_rows(&frame_rows)?)
}

/// Head output -> per-frame vertices under `convention`, scaled by the
/// convention's training scale. Fully differentiable in `head_out`.
pub fn derive_vertices_graph<T: Real>(
    g: &mut Graph<T>,
    head_out: Var,
    convention: &AnnotationConvention,
    pca: Option<&PcaBasis>,
) -> Result<Var, MotionError> {
    if convention.scale <= 0.0 {
        return Err(MotionError::NonPositiveScale(convention.scale as f64));
    }
    let head_dim = *g.shape_of(head_out).last().unwrap_or(&0);
    let template = Tensor::new(
        vec![3 * convention.vertex_count],
        convention.neutral_template.clone(),
    )
    .expect("validated template")
    .cast::<T>();
    let unscaled = match convention.kind {
        AnnotationKind::Vertex => {
            let disp = if let Some(basis) = pca {
                if head_dim != basis.retained {
                    return Err(MotionError::DimMismatch {
                        expected: basis.retained,
                        got: head_dim,
                    });
                }
                let comp: Vec<T> = basis.components.iter().map(|&x| T::from_f64(x)).collect();
                let comp_t = g.leaf_owned(
                    Tensor::new(vec![basis.retained, basis.dim], comp).expect("basis sizes"),
                );
                let mean: Vec<T> = basis.mean.iter().map(|&x| T::from_f64(x)).collect();
                let mean_t =
                    g.leaf_owned(Tensor::new(vec![basis.dim], mean).expect("basis sizes"));
                let span = g.matmul(head_out, comp_t)?;
                g.add_row_broadcast(span, mean_t)?
            } else {
                if head_dim != 3 * convention.vertex_count {
                    return Err(MotionError::MissingAsset {
                        what: "pca basis",
                        kind: convention.kind,
                    });
                }
                head_out
            };
            let tvar = g.leaf_owned(template);
            g.add_row_broadcast(disp, tvar)?
        }
        AnnotationKind::Blendshape => {
            let basis = convention.blendshape.as_ref().ok_or(MotionError::MissingAsset {
                what: "blendshape basis",
                kind: convention.kind,
            })?;
            blendshape_to_vertices_graph(g, head_out, basis)?
        }
        AnnotationKind::Skeleton => {
            let rig = convention.lbs.as_ref().ok_or(MotionError::MissingAsset {
                what: "lbs rig",
                kind: convention.kind,
            })?;
            lbs_to_vertices_graph(g, head_out, rig)?
        }
    };
    Ok(g.scale(unscaled, convention.scale as f64))
}

/// Plain (non-graph) derivation for data preparation and evaluation.
pub fn derive_vertices(
    head_out: &Tensor<f32>,
    convention: &AnnotationConvention,
    pca: Option<&PcaBasis>,
) -> Result<Tensor<f32>, MotionError> {
    let mut g = Graph::<f32>::new();
    let h = g.leaf(head_out);
    let out = derive_vertices_graph(&mut g, h, convention, pca)?;
    Ok(g.tensor(out))
}

/// Uniform vertex scaling; metrics invert it for reporting parity.
pub fn scale_vertices(vertices: &Tensor<f32>, factor: f32) -> Result<Tensor<f32>, MotionError> {
    if factor <= 0.0 {
        return Err(MotionError::NonPositiveScale(factor as f64));
    }
    let data = vertices.data().iter().map(|&v| v * factor).collect();
    Ok(Tensor::new(vertices.shape().to_vec(), data).expect("same shape"))
}
