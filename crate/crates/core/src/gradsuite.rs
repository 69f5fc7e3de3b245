//! Finite-difference certification of every backward rule, from single
//! operators up to the whole (thin) network.

use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradient_piecewise, finite_diff_gradcheck, GradcheckOptions, GradcheckReport, Tape, Var};
use crate::error::Result;
use crate::model::{sr_attention_head, Builder, Forward, HeadWeights, ReductionWeights, SeUNetTrans, TransformerBlock, UNetBlock, UNetBlockConfig, Variant, VariantSpec};
use crate::ops::{ConvSpec, Mode, RunningStats};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Tolerance for the smooth elementwise and matrix operators.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for everything else: convolution, pooling, batch norm and
/// attention paths.
pub const PIECEWISE_TOL: f64 = 1e-4;
/// Tolerance for the end-to-end model.
pub const END_TO_END_TOL: f64 = 1e-3;

/// Aggregated result of one case over all seeds.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Probes discarded because they sat on a kink.
    pub coords_skipped: usize,
    pub passed: bool,
}

type Case = fn(u64, f64) -> Result<GradcheckReport>;

/// `(name, tolerance, check)` for every case in the suite.
pub fn cases() -> Vec<(&'static str, f64, Case)> {
    vec![
        ("matmul", SMOOTH_TOL, matmul as Case),
        ("linear", SMOOTH_TOL, linear),
        ("softmax", SMOOTH_TOL, softmax),
        ("gelu", SMOOTH_TOL, gelu),
        ("sigmoid", SMOOTH_TOL, sigmoid),
        ("layernorm", SMOOTH_TOL, layernorm),
        ("bilinear_resize", SMOOTH_TOL, bilinear),
        ("concat_channels", SMOOTH_TOL, concat),
        ("bce_loss", SMOOTH_TOL, bce),
        ("attention", PIECEWISE_TOL, attention),
        ("sr_attention_head", PIECEWISE_TOL, sr_head),
        ("relu", PIECEWISE_TOL, relu),
        ("conv2d", PIECEWISE_TOL, conv2d),
        ("conv_transpose2d", PIECEWISE_TOL, conv_transpose2d),
        ("maxpool2d", PIECEWISE_TOL, maxpool),
        ("batchnorm2d_train", PIECEWISE_TOL, batchnorm_train),
        ("batchnorm2d_eval", PIECEWISE_TOL, batchnorm_eval),
        ("unet_block", PIECEWISE_TOL, unet_block),
        ("transformer_block", PIECEWISE_TOL, transformer_block),
        ("model_end_to_end", END_TO_END_TOL, end_to_end),
    ]
}

/// A case fails if more than this share of its probes landed on kinks.
pub const MAX_SKIPPED_FRACTION: f64 = 0.25;

/// Which cases to run and how strictly.
#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: usize,
    /// Overrides the tolerance of every operator-level case.
    pub tolerance: Option<f64>,
    /// Overrides the end-to-end tolerance.
    pub e2e_tolerance: Option<f64>,
    /// Only cases whose name contains this.
    pub filter: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { seeds: 20, tolerance: None, e2e_tolerance: None, filter: None }
    }
}

/// Run the selected cases, calling `progress` after each one.
pub fn run_suite(o: &SuiteOptions, mut progress: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (name, tol, case) in cases() {
        if o.filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let tol = if name == "model_end_to_end" { o.e2e_tolerance } else { o.tolerance }.unwrap_or(tol);
        let mut r = CaseResult { name, tolerance: tol, seeds: o.seeds, max_rel_error: 0.0, coords_checked: 0, coords_skipped: 0, passed: true };
        for seed in 0..o.seeds as u64 {
            let rep = case(seed, tol)?;
            r.max_rel_error = r.max_rel_error.max(rep.max_rel_error);
            r.coords_checked += rep.coords_checked;
            r.coords_skipped += rep.coords_skipped;
        }
        let probes = (r.coords_checked + r.coords_skipped) as f64;
        r.passed = r.max_rel_error <= tol && r.coords_checked > 0 && (r.coords_skipped as f64) <= MAX_SKIPPED_FRACTION * probes;
        progress(&r);
        out.push(r);
    }
    Ok(out)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let d = Uniform::new(lo, hi);
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.sample(d)).collect()).expect("sizes agree")
}

fn opts(seed: u64, tol: f64) -> GradcheckOptions {
    GradcheckOptions { tolerance: tol, max_coords: Some(64), seed, ..GradcheckOptions::default() }
}

fn worst(a: GradcheckReport, b: GradcheckReport) -> GradcheckReport {
    let (coords, skipped) = (a.coords_checked + b.coords_checked, a.coords_skipped + b.coords_skipped);
    let mut w = if b.max_rel_error > a.max_rel_error { b } else { a };
    w.coords_checked = coords;
    w.coords_skipped = skipped;
    w.passed = w.max_rel_error <= w.tolerance;
    w
}

/// Check `f(inputs)` with respect to each input in turn, the others held
/// constant. `f` returns a tensor that is reduced by a random weighted sum.
fn check_inputs<F>(seed: u64, tol: f64, inputs: Vec<Tensor<f64>>, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_inputs_with(seed, tol, inputs, f, false)
}

/// With `kinks`, probes that straddle a ReLU kink are refined or skipped.
fn check_inputs_with<F>(seed: u64, tol: f64, inputs: Vec<Tensor<f64>>, f: F, kinks: bool) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed ^ 0xabcdef);
    let weights = {
        let mut probe = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        let y = f(&mut probe, &vars)?;
        uniform(&mut r, probe.shape(y), -1.0, 1.0)
    };
    let mut report: Option<GradcheckReport> = None;
    for i in 0..inputs.len() {
        let scalar = |tape: &mut Tape<f64>, x: Var| {
            let vars: Vec<Var> = inputs.iter().enumerate().map(|(j, t)| if j == i { x } else { tape.constant(t.clone()) }).collect();
            let y = f(tape, &vars)?;
            tape.weighted_sum(y, &weights)
        };
        let rep = if kinks {
            let mut tape = Tape::new();
            let x = tape.leaf(inputs[i].clone());
            let y = scalar(&mut tape, x)?;
            let analytic = tape.backward(y)?.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
            let eval = |p: &Tensor<f64>| {
                let mut t = Tape::inference();
                let x = t.leaf(p.clone());
                let y = scalar(&mut t, x)?;
                Ok(t.value(y).item())
            };
            check_gradient_piecewise(&analytic, &inputs[i], eval, &opts(seed, tol), E2E_REFINEMENTS, 1e-8)?
        } else {
            finite_diff_gradcheck(scalar, &inputs[i], &opts(seed, tol))?
        };
        report = Some(match report {
            Some(prev) => worst(prev, rep),
            None => rep,
        });
    }
    Ok(report.expect("at least one input"))
}

fn matmul(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (a, b) = (uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[4, 5], -1.0, 1.0));
    check_inputs(seed, tol, vec![a, b], |t, v| t.matmul(v[0], v[1]))
}

fn linear(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 5, 4], -1.0, 1.0);
    let (w, b) = (uniform(&mut r, &[4, 3], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0));
    check_inputs(seed, tol, vec![x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2])))
}

fn softmax(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let x = uniform(&mut rng(seed), &[3, 4, 6], -2.0, 2.0);
    check_inputs(seed, tol, vec![x], |t, v| t.softmax_lastdim(v[0]))
}

fn gelu(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let x = uniform(&mut rng(seed), &[4, 8], -3.0, 3.0);
    check_inputs(seed, tol, vec![x], |t, v| Ok(t.gelu(v[0])))
}

fn sigmoid(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let x = uniform(&mut rng(seed), &[4, 8], -4.0, 4.0);
    check_inputs(seed, tol, vec![x], |t, v| Ok(t.sigmoid(v[0])))
}

fn relu(seed: u64, tol: f64) -> Result<GradcheckReport> {
    // Keep inputs away from the kink.
    let x = uniform(&mut rng(seed), &[4, 8], 0.01, 1.0).zip_map(&uniform(&mut rng(seed + 1000), &[4, 8], -1.0, 1.0), |m, s| m * s.signum())?;
    check_inputs(seed, tol, vec![x], |t, v| Ok(t.relu(v[0])))
}

fn layernorm(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 6], -2.0, 2.0);
    let (g, b) = (uniform(&mut r, &[6], 0.5, 1.5), uniform(&mut r, &[6], -0.5, 0.5));
    check_inputs(seed, tol, vec![x, g, b], |t, v| t.layernorm(v[0], v[1], v[2]))
}

fn bilinear(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let x = uniform(&mut rng(seed), &[1, 2, 3, 4], -1.0, 1.0);
    let factor = 2 + (seed % 3) as usize;
    check_inputs(seed, tol, vec![x], move |t, v| t.bilinear_resize(v[0], factor))
}

fn concat(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (a, b) = (uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0));
    check_inputs(seed, tol, vec![a, b], |t, v| t.concat_channels(v[0], v[1]))
}

fn bce(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let z = uniform(&mut r, &[2, 1, 4, 4], -4.0, 4.0);
    let y = uniform(&mut r, &[2, 1, 4, 4], 0.0, 1.0).map(|u| if u < 0.5 { 0.0 } else { 1.0 });
    finite_diff_gradcheck(|t, x| t.bce_loss(x, &y), &z, &opts(seed, tol))
}

fn attention(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let q = uniform(&mut r, &[2, 6, 8], -1.0, 1.0);
    let k = uniform(&mut r, &[2, 3, 8], -1.0, 1.0);
    let v = uniform(&mut r, &[2, 3, 8], -1.0, 1.0);
    check_inputs(seed, tol, vec![q, k, v], |t, x| t.attention(x[0], x[1], x[2], 2))
}

fn sr_head(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (d, dh, ratio) = (4, 2, 2);
    let inputs = vec![
        uniform(&mut r, &[1, 6, d], -1.0, 1.0),
        uniform(&mut r, &[d, dh], -1.0, 1.0),
        uniform(&mut r, &[d, dh], -1.0, 1.0),
        uniform(&mut r, &[d, dh], -1.0, 1.0),
        uniform(&mut r, &[d * ratio, d], -1.0, 1.0),
        uniform(&mut r, &[d], -0.5, 0.5),
        uniform(&mut r, &[d], 0.5, 1.5),
        uniform(&mut r, &[d], -0.5, 0.5),
    ];
    check_inputs(seed, tol, inputs, move |t, v| {
        let w = HeadWeights {
            query: v[1],
            key: v[2],
            value: v[3],
            reduction: Some(ReductionWeights { weight: v[4], bias: v[5], norm_gamma: v[6], norm_beta: v[7] }),
        };
        sr_attention_head(t, v[0], ratio, &w)
    })
}

fn conv2d(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let stride = 1 + (seed % 2) as usize;
    let spec = ConvSpec::new(2, 3, 3, stride, 1);
    let x = uniform(&mut r, &[2, 2, 5, 5], -1.0, 1.0);
    let w = uniform(&mut r, &spec.weight_shape(), -1.0, 1.0);
    let b = uniform(&mut r, &[3], -1.0, 1.0);
    check_inputs(seed, tol, vec![x, w, b], move |t, v| t.conv2d(v[0], v[1], Some(v[2]), &spec))
}

fn conv_transpose2d(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let spec = ConvSpec::new(3, 2, 2, 2, 0);
    let x = uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
    let w = uniform(&mut r, &spec.transposed_weight_shape(), -1.0, 1.0);
    let b = uniform(&mut r, &[2], -1.0, 1.0);
    check_inputs(seed, tol, vec![x, w, b], move |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), &spec))
}

fn maxpool(seed: u64, tol: f64) -> Result<GradcheckReport> {
    // Distinct values spaced well beyond the step so no window has a near tie.
    let mut r = rng(seed);
    let n = 2 * 2 * 4 * 4;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.gen_range(0..=i));
    }
    let x = Tensor::from_vec([2, 2, 4, 4], vals)?;
    check_inputs(seed, tol, vec![x], |t, v| t.maxpool2d(v[0]))
}

fn batchnorm_train(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 3, 3], -2.0, 2.0);
    let (g, b) = (uniform(&mut r, &[3], 0.5, 1.5), uniform(&mut r, &[3], -0.5, 0.5));
    let running = RunningStats::new(3);
    check_inputs(seed, tol, vec![x, g, b], move |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], &running, Mode::Train)?.0))
}

fn batchnorm_eval(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 3, 3], -2.0, 2.0);
    let (g, b) = (uniform(&mut r, &[3], 0.5, 1.5), uniform(&mut r, &[3], -0.5, 0.5));
    let running = RunningStats { mean: uniform(&mut r, &[3], -1.0, 1.0), var: uniform(&mut r, &[3], 0.5, 2.0) };
    check_inputs(seed, tol, vec![x, g, b], move |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], &running, Mode::Eval)?.0))
}

/// Parameters and running statistics for a single layer under test.
struct Harness {
    params: ParamStore<f64>,
    running: Vec<RunningStats<f64>>,
}

impl Harness {
    fn build<L>(seed: u64, make: impl FnOnce(&mut Builder<'_, f64, ChaCha8Rng>) -> Result<L>) -> Result<(Self, L)> {
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut names = Vec::new();
        let mut r = rng(seed + 77);
        let layer = make(&mut Builder { params: &mut params, running: &mut running, norm_names: &mut names, rng: &mut r })?;
        Ok((Harness { params, running }, layer))
    }
}

fn unet_block(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let (h, block) = Harness::build(seed, |b| UNetBlock::new(b, "block", UNetBlockConfig::new(2, 3, 2)))?;
    let x = uniform(&mut rng(seed), &[2, 2, 4, 4], -1.0, 1.0);
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let mut f = Forward::new(t, &h.params, &h.running, Mode::Train);
        block.forward(&mut f, v[0])
    };
    check_inputs_with(seed, tol, vec![x], f, true)
}

fn transformer_block(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let (h, block) = Harness::build(seed, |b| TransformerBlock::new(b, "block", 4, 2, 2, 2))?;
    let x = uniform(&mut rng(seed), &[1, 6, 4], -1.0, 1.0);
    check_inputs(seed, tol, vec![x], |t, v| {
        let mut f = Forward::new(t, &h.params, &h.running, Mode::Train);
        block.forward(&mut f, v[0])
    })
}

/// Size of the end-to-end check input.
pub const END_TO_END_SIZE: usize = 32;

/// Step refinements tried when a probe straddles a ReLU or pooling kink.
const E2E_REFINEMENTS: usize = 3;
/// Gradients smaller than this are compared in absolute terms. Biases that
/// feed straight into batch norm have an exact zero gradient.
const E2E_FLOOR: f64 = 1e-5;

/// BCE loss of the thin M model against a random mask, differentiated with
/// respect to a sample of parameter coordinates and input pixels. Each seed
/// starts its round-robin over the parameter tensors at a different place so
/// that a handful of seeds touches every tensor.
fn end_to_end(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let mut model = SeUNetTrans::<f64>::new(VariantSpec::thin(Variant::M), seed)?;
    let s = END_TO_END_SIZE;
    let image = uniform(&mut r, &[1, 3, s, s], 0.0, 1.0);
    let mask = uniform(&mut r, &[1, 1, s, s], 0.0, 1.0).map(|u| if u < 0.4 { 1.0 } else { 0.0 });

    let loss_of = |model: &SeUNetTrans<f64>, image: &Tensor<f64>, tape: &mut Tape<f64>| -> Result<(Var, Var)> {
        let x = tape.leaf(image.clone());
        let out = model.forward(tape, x, Mode::Train)?;
        Ok((x, tape.bce_loss(out.logits, &mask)?))
    };

    let mut tape = Tape::new();
    let (x, loss) = loss_of(&model, &image, &mut tape)?;
    let grads = tape.backward(loss)?;
    let image_grad = grads.wrt(x).cloned().expect("input is a leaf");
    model.params_mut().zero_grad();
    grads.accumulate_into(model.params_mut())?;

    // Coordinates: `None` is an input pixel, `Some(id)` a parameter element.
    let ids: Vec<ParamId> = model.params().iter().map(|(id, _)| id).collect();
    let slots = ids.len() + 1;
    let coords: Vec<(Option<ParamId>, usize)> = (0..64usize)
        .map(|k| {
            let slot = (seed as usize * 64 + k) % slots;
            if slot == ids.len() {
                (None, r.gen_range(0..image.numel()))
            } else {
                let id = ids[slot];
                (Some(id), r.gen_range(0..model.params().get(id).value.numel()))
            }
        })
        .collect();
    let read = |model: &SeUNetTrans<f64>, image: &Tensor<f64>, c: &(Option<ParamId>, usize)| match c.0 {
        Some(id) => model.params().get(id).value.data()[c.1],
        None => image.data()[c.1],
    };
    let analytic = Tensor::from_vec(
        [coords.len()],
        coords
            .iter()
            .map(|c| match c.0 {
                Some(id) => model.params().get(id).grad.data()[c.1],
                None => image_grad.data()[c.1],
            })
            .collect(),
    )?;
    let point = Tensor::from_vec([coords.len()], coords.iter().map(|c| read(&model, &image, c)).collect())?;
    let mut image = image;
    check_gradient_piecewise(
        &analytic,
        &point,
        |p| {
            for (c, &v) in coords.iter().zip(p.data()) {
                match c.0 {
                    Some(id) => model.params_mut().get_mut(id).value.data_mut()[c.1] = v,
                    None => image.data_mut()[c.1] = v,
                }
            }
            let mut t = Tape::inference();
            let (_, l) = loss_of(&model, &image, &mut t)?;
            Ok(t.value(l).item())
        },
        &GradcheckOptions { tolerance: tol, ..GradcheckOptions::default() },
        E2E_REFINEMENTS,
        E2E_FLOOR,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_rule_is_caught() {
        // A backward rule scaled by 2 must fail the check.
        let x = uniform(&mut rng(0), &[5], -1.0, 1.0);
        let rep = finite_diff_gradcheck(
            |t, x| {
                let v = t.value(x).map(|a| a * a);
                let xv = t.value(x).clone();
                let y = t.push_op(v, &[x], move |g| Ok(vec![Some(xv.zip_map(g, |a, g| 4.0 * a * g)?)]));
                Ok(t.sum(y))
            },
            &x,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn every_case_passes_one_seed() {
        for (name, tol, case) in cases() {
            let rep = case(3, tol).unwrap();
            assert!(rep.passed, "{name}: {} > {tol}", rep.max_rel_error);
        }
    }
}
