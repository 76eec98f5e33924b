//! Reverse-mode vs central-finite-difference checks for every layer
//! primitive. Runs in double precision with eps = 1e-5.

use super::{
    finite_difference_grad, max_relative_error, Graph, NumericsError, Padding, Rng, Tensor, Var,
};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;

/// Outcome of one layer-kind check across all random shapes/seeds.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Deliberate gradient corruption, used by tests to prove the suite catches
/// a wrong derivative.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckFault {
    Conv1dWeightGrad,
}

fn random_tensor(rng: &mut Rng, shape: Vec<usize>, spread: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.normal() * spread).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Checks one op: analytic gradients of a random scalar projection of the
/// output against finite differences over every input jointly.
fn check_case(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
    rng: &mut Rng,
    fault_on: Option<usize>,
) -> f64 {
    let eval = |flat: &[f64], want_grads: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let mut vars = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for t in inputs {
            let n = t.numel();
            let tensor = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())
                .expect("shape/data agree");
            vars.push(g.leaf_owned(tensor));
            offset += n;
        }
        let out = build(&mut g, &vars).expect("gradcheck ops are shape-valid");
        let scalar = if g.value(out).len() == 1 {
            out
        } else {
            // Fixed random projection to a scalar exercises the whole output.
            let mut proj_rng = Rng::new(0x5eed);
            let proj = random_tensor(&mut proj_rng, g.shape_of(out).to_vec(), 1.0);
            let p = g.leaf_owned(proj);
            let prod = g.mul(out, p).expect("same shape");
            g.sum_all(prod)
        };
        let value = g.value(scalar)[0];
        if !want_grads {
            return (value, Vec::new());
        }
        g.backward(scalar).expect("scalar output");
        let mut grads = Vec::new();
        for &v in &vars {
            grads.extend_from_slice(g.grad(v));
        }
        (value, grads)
    };

    let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let (_, mut analytic) = eval(&point, true);
    if let Some(idx) = fault_on {
        let i = idx.min(analytic.len() - 1);
        analytic[i] += 0.05 * (1.0 + analytic[i].abs());
    }
    let numeric = finite_difference_grad(|x| eval(x, false).0, &point, GRADCHECK_EPS);
    let _ = rng;
    max_relative_error(&analytic, &numeric)
}

fn report(name: &'static str, errs: &[f64]) -> GradCheckReport {
    let max = errs.iter().copied().fold(0.0f64, f64::max);
    GradCheckReport { name, cases: errs.len(), max_rel_err: max, tolerance: LAYER_TOLERANCE }
}

/// Run the full layer suite: `seeds` random shape/value draws per kind.
pub fn check_layers(seeds: u64, fault: Option<GradCheckFault>) -> Vec<GradCheckReport> {
    let mut out = Vec::new();

    // linear
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(100 + s);
        let (m, k, n) = (1 + rng.below(5), 1 + rng.below(6), 1 + rng.below(5));
        let inputs = vec![
            random_tensor(&mut rng, vec![m, k], 1.0),
            random_tensor(&mut rng, vec![n, k], 1.0),
            random_tensor(&mut rng, vec![n], 0.5),
        ];
        errs.push(check_case(&inputs, |g, v| g.linear(v[0], v[1], v[2]), &mut rng, None));
    }
    out.push(report("linear", &errs));

    // conv1d over random stride/dilation/padding
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(200 + s);
        let (cin, cout) = (1 + rng.below(3), 1 + rng.below(3));
        let k = 1 + rng.below(4);
        let dilation = 1 + rng.below(3);
        let stride = 1 + rng.below(3);
        let pad = if rng.bernoulli(0.5) { Padding::Same } else { Padding::Valid };
        let t = (k - 1) * dilation + 1 + rng.below(8);
        let inputs = vec![
            random_tensor(&mut rng, vec![cin, t], 1.0),
            random_tensor(&mut rng, vec![cout, cin, k], 1.0),
            random_tensor(&mut rng, vec![cout], 0.5),
        ];
        let fault_idx = match fault {
            Some(GradCheckFault::Conv1dWeightGrad) => Some(cin * t), // first weight element
            None => None,
        };
        errs.push(check_case(
            &inputs,
            |g, v| g.conv1d(v[0], v[1], v[2], stride, dilation, pad),
            &mut rng,
            fault_idx,
        ));
    }
    out.push(report("conv1d", &errs));

    // layer_norm
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(300 + s);
        let (m, n) = (1 + rng.below(5), 2 + rng.below(6));
        let inputs = vec![
            random_tensor(&mut rng, vec![m, n], 1.5),
            random_tensor(&mut rng, vec![n], 1.0),
            random_tensor(&mut rng, vec![n], 0.5),
        ];
        errs.push(check_case(&inputs, |g, v| g.layer_norm(v[0], v[1], v[2]), &mut rng, None));
    }
    out.push(report("layer_norm", &errs));

    // gelu
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(400 + s);
        let n = 1 + rng.below(12);
        let inputs = vec![random_tensor(&mut rng, vec![1, n], 2.0)];
        errs.push(check_case(&inputs, |g, v| Ok(g.gelu(v[0])), &mut rng, None));
    }
    out.push(report("gelu", &errs));

    // softmax self-attention (composite: linear/slice/matmul/transpose/softmax/concat)
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(500 + s);
        let heads = [1, 2][rng.below(2)];
        let dh = 1 + rng.below(3);
        let d = heads * dh;
        let t = 1 + rng.below(5);
        let mut inputs = vec![random_tensor(&mut rng, vec![t, d], 1.0)];
        for _ in 0..4 {
            inputs.push(random_tensor(&mut rng, vec![d, d], 0.8));
            inputs.push(random_tensor(&mut rng, vec![d], 0.3));
        }
        errs.push(check_case(
            &inputs,
            |g, v| {
                g.self_attention(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], heads)
            },
            &mut rng,
            None,
        ));
    }
    out.push(report("softmax_self_attention", &errs));

    // embedding lookup (with repeated indices)
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(600 + s);
        let (v, d) = (2 + rng.below(5), 1 + rng.below(5));
        let count = 1 + rng.below(6);
        let indices: Vec<usize> = (0..count).map(|_| rng.below(v)).collect();
        let inputs = vec![random_tensor(&mut rng, vec![v, d], 1.0)];
        errs.push(check_case(&inputs, |g, vars| g.embedding(vars[0], &indices), &mut rng, None));
    }
    out.push(report("embedding_lookup", &errs));

    // temporal linear interpolation
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(700 + s);
        let (tin, d) = (2 + rng.below(8), 1 + rng.below(4));
        let tout = 1 + rng.below(12);
        let pos = super::interp_positions(tin, tout);
        let inputs = vec![random_tensor(&mut rng, vec![tin, d], 1.0)];
        errs.push(check_case(&inputs, |g, v| g.temporal_interp(v[0], &pos), &mut rng, None));
    }
    out.push(report("temporal_linear_interp", &errs));

    // matmul + transpose
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(800 + s);
        let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let inputs =
            vec![random_tensor(&mut rng, vec![m, k], 1.0), random_tensor(&mut rng, vec![n, k], 1.0)];
        errs.push(check_case(
            &inputs,
            |g, v| {
                let bt = g.transpose(v[1])?;
                g.matmul(v[0], bt)
            },
            &mut rng,
            None,
        ));
    }
    out.push(report("matmul_transpose", &errs));

    // broadcast ops
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(900 + s);
        let (m, n) = (1 + rng.below(4), 1 + rng.below(4));
        let inputs = vec![
            random_tensor(&mut rng, vec![m, n], 1.0),
            random_tensor(&mut rng, vec![n], 1.0),
            random_tensor(&mut rng, vec![m], 1.0),
            random_tensor(&mut rng, vec![1], 1.0),
        ];
        errs.push(check_case(
            &inputs,
            |g, v| {
                let a = g.add_row_broadcast(v[0], v[1])?;
                let b = g.add_col_broadcast(a, v[2])?;
                let c = g.mul_col_broadcast(b, v[2])?;
                g.mul_scalar(c, v[3])
            },
            &mut rng,
            None,
        ));
    }
    out.push(report("broadcast_ops", &errs));

    // slice/concat plumbing
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(1000 + s);
        let (m, n) = (2 + rng.below(4), 2 + rng.below(4));
        let inputs = vec![random_tensor(&mut rng, vec![m, n], 1.0)];
        errs.push(check_case(
            &inputs,
            |g, v| {
                let left = g.slice_cols(v[0], 0, n / 2)?;
                let right = g.slice_cols(v[0], n / 2, n - n / 2)?;
                let swapped = g.concat_cols(&[right, left])?;
                let top = g.slice_rows(swapped, 0, m / 2)?;
                let bottom = g.slice_rows(swapped, m / 2, m - m / 2)?;
                g.concat_rows(&[bottom, top])
            },
            &mut rng,
            None,
        ));
    }
    out.push(report("slice_concat", &errs));

    // rotation coefficients (domain u = theta^2 >= 0; probes stay clear of
    // zero so central differences never leave the domain — the series branch
    // has its own continuity test)
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(1100 + s);
        let mag = if s % 3 == 0 { 1e-4 } else { 1.0 };
        let u: Vec<f64> = (0..4).map(|_| (rng.uniform() * mag).max(3.0 * GRADCHECK_EPS)).collect();
        let inputs = vec![Tensor::new(vec![4], u).unwrap()];
        errs.push(check_case(
            &inputs,
            |g, v| {
                let a = g.rot_coeff_sin(v[0]);
                let b = g.rot_coeff_vers(v[0]);
                g.add(a, b)
            },
            &mut rng,
            None,
        ));
    }
    out.push(report("rotation_coeffs", &errs));

    // reductions / mse
    let mut errs = Vec::new();
    for s in 0..seeds {
        let mut rng = Rng::new(1200 + s);
        let (m, n) = (1 + rng.below(4), 1 + rng.below(4));
        let inputs =
            vec![random_tensor(&mut rng, vec![m, n], 1.0), random_tensor(&mut rng, vec![m, n], 1.0)];
        errs.push(check_case(
            &inputs,
            |g, v| {
                let e = g.mse(v[0], v[1])?;
                let s1 = g.sum_all(v[0]);
                let sc = g.scale(s1, 0.25);
                g.add(e, sc)
            },
            &mut rng,
            None,
        ));
    }
    out.push(report("reductions_mse", &errs));

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_layer_kinds_pass_at_tolerance() {
        for rep in check_layers(20, None) {
            assert!(
                rep.passed(),
                "{}: max rel err {:.3e} over {} cases",
                rep.name,
                rep.max_rel_err,
                rep.cases
            );
        }
    }

    #[test]
    fn injected_conv_gradient_fault_is_detected() {
        let reports = check_layers(3, Some(GradCheckFault::Conv1dWeightGrad));
        let conv = reports.iter().find(|r| r.name == "conv1d").unwrap();
        assert!(!conv.passed(), "corrupted conv1d gradient must fail the check");
        // Other layers stay unaffected.
        let linear = reports.iter().find(|r| r.name == "linear").unwrap();
        assert!(linear.passed());
    }

    #[test]
    fn rotation_coefficient_series_matches_exact_branch_at_the_cutoff() {
        // Value and derivative must be continuous where the series takes over.
        let mut g = Graph::<f64>::new();
        for u in [0.9e-6, 1.1e-6] {
            let x = g.leaf_owned(Tensor::scalar(u));
            let f = g.rot_coeff_sin(x);
            let h = g.rot_coeff_vers(x);
            let s = u.sqrt();
            let half = (s / 2.0).sin();
            assert!((g.value(f)[0] - s.sin() / s).abs() < 1e-14);
            assert!((g.value(h)[0] - 2.0 * half * half / u).abs() < 1e-14);
        }
        // Derivatives near zero approach the series limits -1/6 and -1/24.
        let x = g.leaf_owned(Tensor::scalar(1e-9));
        let f = g.rot_coeff_sin(x);
        g.backward(f).unwrap();
        assert!((g.grad(x)[0] + 1.0 / 6.0).abs() < 1e-8);
        let x2 = g.leaf_owned(Tensor::scalar(1e-9));
        let h = g.rot_coeff_vers(x2);
        g.backward(h).unwrap();
        assert!((g.grad(x2)[0] + 1.0 / 24.0).abs() < 1e-8);
    }
}
