//! Central finite-difference gradient checks.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{build_model, Backbone, InputShape, ModelSpec};
use crate::qim::{qim_eval, QimConfig, QimKernel, QimMode, QimParams};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// QIM test points closer than this to a ReLU or max switch are redrawn,
/// since a central difference straddling the switch measures neither side.
pub const KINK_MARGIN: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error per input tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Which coordinates of each input are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Sampling {
    /// At most this many coordinates per input; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

/// Compares the reverse-mode gradient of the scalar `f(inputs)` with
/// `(f(x+ε) − f(x−ε)) / 2ε` for every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, Sampling::default())
}

pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor<f64>], eps: f64, sampling: Sampling) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("perturbation {eps} must be positive")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::dim(format!("grad_check needs a scalar output, got {:?}", tape.value(out).shape())));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = values.iter().map(|x| t.param(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut work = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let coords: Vec<usize> = match sampling.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for j in coords {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
        per_input.push(worst);
    }
    Ok(GradCheck { per_input })
}

/// One line of a suite report.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub component: String,
    pub input: String,
    pub max_rel_error: f64,
    /// Configuration and seed that produced the worst error.
    pub worst_case: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub seeds: usize,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteEntry> {
        self.entries.iter().filter(|e| e.max_rel_error.is_nan() || e.max_rel_error > self.tolerance)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.component.len() + e.input.len() + 1).max().unwrap_or(0);
        for e in &self.entries {
            let status = if e.max_rel_error <= self.tolerance { "ok  " } else { "FAIL" };
            let label = format!("{}.{}", e.component, e.input);
            writeln!(f, "{status} {label:<width$}  {:.3e}  ({})", e.max_rel_error, e.worst_case)?;
        }
        let failed = self.failures().count();
        write!(f, "{} entries over {} seeds, {failed} above {:.0e}", self.entries.len(), self.seeds, self.tolerance)
    }
}

/// A custom op to include in the suite, with the input shapes to draw.
#[derive(Clone)]
pub struct CustomCase {
    pub op: Arc<dyn CustomOp<f64>>,
    pub input_shapes: Vec<Vec<usize>>,
}

#[derive(Default)]
struct Collector {
    worst: BTreeMap<(usize, String, String), (f64, String)>,
    order: usize,
    index: BTreeMap<(String, String), usize>,
}

impl Collector {
    fn record(&mut self, component: &str, names: &[&str], check: &GradCheck, case: String) {
        for (name, &err) in names.iter().zip(&check.per_input) {
            let key = (component.to_string(), name.to_string());
            let order = *self.index.entry(key.clone()).or_insert_with(|| {
                self.order += 1;
                self.order
            });
            let slot = self.worst.entry((order, key.0, key.1)).or_insert((0.0, case.clone()));
            if err > slot.0 || err.is_nan() {
                *slot = (err, case.clone());
            }
        }
    }

    fn finish(self, seeds: usize) -> SuiteReport {
        let entries = self
            .worst
            .into_iter()
            .map(|((_, component, input), (max_rel_error, worst_case))| SuiteEntry {
                component,
                input,
                max_rel_error,
                worst_case,
            })
            .collect();
        SuiteReport { entries, seeds, tolerance: TOLERANCE }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero so ReLU kinks stay out of reach of ε.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape).map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

/// `Σ r ⊙ out` with fixed random `r`.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    tape.weighted_sum(out, r.clone())
}

/// QIM configurations the suite sweeps: both modes, `d ∈ {6, 12, 25}`,
/// `k ∈ {2, 5}`, `c ∈ {1, 3}`.
pub fn qim_grid() -> Vec<(QimMode, usize, usize, usize)> {
    let mut grid = Vec::new();
    for mode in [QimMode::Paired, QimMode::Summed] {
        for d in [6, 12, 25] {
            for k in [2, 5] {
                for c in [1, 3] {
                    grid.push((mode, d, k, c));
                }
            }
        }
    }
    grid
}

fn check_ops(col: &mut Collector, rng: &mut ChaCha8Rng, seed: u64) -> Result<()> {
    let eps = DEFAULT_EPS;
    let case = |what: &str| format!("{what} seed {seed}");

    let (a, k) = (randn(rng, &[7, 6]), randn(rng, &[3, 2]));
    let r = randn(rng, &[5, 5]);
    let g = grad_check(
        |t, v| {
            let y = t.conv2d_valid(v[0], v[1])?;
            project(t, y, &r)
        },
        &[a, k],
        eps,
    )?;
    col.record("conv2d_valid", &["input", "kernel"], &g, case("7×6 * 3×2"));

    let x = off_zero(rng, &[4, 5]);
    let r = randn(rng, &[4, 5]);
    let g = grad_check(
        |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, &r)
        },
        &[x],
        eps,
    )?;
    col.record("relu", &["input"], &g, case("4×5"));

    let m = randn(rng, &[5, 5]);
    let r = randn(rng, &[2, 5]);
    let g = grad_check(
        |t, v| {
            let y = t.row_col_max(v[0])?;
            project(t, y, &r)
        },
        &[m],
        eps,
    )?;
    col.record("row_col_max", &["input"], &g, case("5×5"));

    let (x, w, b) = (randn(rng, &[3, 4]), randn(rng, &[5, 4]), randn(rng, &[5]));
    let r = randn(rng, &[3, 5]);
    let g = grad_check(
        |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            project(t, y, &r)
        },
        &[x, w, b],
        eps,
    )?;
    col.record("affine", &["x", "weight", "bias"], &g, case("batch 3, 4→5"));

    let logits = randn(rng, &[4, 6]);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
    let g = grad_check(|t, v| t.softmax_cross_entropy(v[0], &labels), &[logits], eps)?;
    col.record("softmax_cross_entropy", &["logits"], &g, case("4×6"));

    let (x, w, b) = (randn(rng, &[2, 3, 6, 5]), randn(rng, &[4, 3, 3, 3]), randn(rng, &[4]));
    let r = randn(rng, &[2, 4, 4, 3]);
    let g = grad_check(
        |t, v| {
            let y = t.conv_layer(v[0], v[1], v[2])?;
            project(t, y, &r)
        },
        &[x, w, b],
        eps,
    )?;
    col.record("conv2d_layer", &["input", "weight", "bias"], &g, case("2×3×6×5, 4 filters 3×3"));

    let x = randn(rng, &[2, 3, 5, 4]);
    let r = randn(rng, &[2, 3, 2, 2]);
    let g = grad_check(
        |t, v| {
            let y = t.max_pool2(v[0])?;
            project(t, y, &r)
        },
        &[x],
        eps,
    )?;
    col.record("max_pool2", &["input"], &g, case("2×3×5×4"));

    for normalize in [true, false] {
        let u = randn(rng, &[7]);
        let r = randn(rng, &[7, 7]);
        let g = grad_check(
            |t, v| {
                let y = t.dyad(v[0], normalize)?;
                project(t, y, &r)
            },
            &[u],
            eps,
        )?;
        let name = if normalize { "dyad" } else { "dyad_unnormalized" };
        col.record(name, &["input"], &g, case("d=7"));
    }

    let (p, q) = (randn(rng, &[3, 4]), randn(rng, &[3, 4]));
    let r = randn(rng, &[3, 4]);
    let g = grad_check(
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, &r)
        },
        &[p, q],
        eps,
    )?;
    col.record("mul", &["a", "b"], &g, case("3×4"));
    Ok(())
}

fn check_qim(col: &mut Collector, rng: &mut ChaCha8Rng, seed: u64) -> Result<()> {
    for (mode, d, k, c) in qim_grid() {
        let s = d - k + 1;
        let channels = if mode == QimMode::Paired { c } else { 4 };
        let bound = QimConfig::new(c, s).with_mode(mode).bind(d)?;
        let batch = 2;
        let (params, vectors) = loop {
            let mut params = QimParams::<f64>::init(&bound, channels, rng)?;
            params.biases = randn(rng, &[c]).map(|x| 0.1 * x);
            if let Some(l) = params.logits.as_mut() {
                *l = randn(rng, &[channels]);
            }
            let vectors = randn(rng, &[batch, channels, d]);
            if qim_margin(&vectors, &params, &bound)? >= KINK_MARGIN {
                break (params, vectors);
            }
        };
        let r = randn(rng, &[batch, bound.output_len()]);
        let mut inputs = vec![vectors, params.kernels.clone(), params.biases.clone()];
        let mut names = vec!["vectors", "kernels", "biases"];
        if let Some(l) = &params.logits {
            inputs.push(l.clone());
            names.push("logits");
        }
        for kernel in [QimKernel::Dense, QimKernel::Fused] {
            let g = grad_check(
                |t, v| {
                    let y = t.qim(v[0], v[1], v[2], v.get(3).copied(), &bound, kernel)?;
                    project(t, y, &r)
                },
                &inputs,
                DEFAULT_EPS,
            )?;
            let component = format!("qim[{},{}]", mode.as_str(), kernel_name(kernel));
            col.record(&component, &names, &g, format!("d={d} k={k} c={c} seed {seed}"));
        }
    }
    Ok(())
}

/// Smallest [`QimOutput::kink_margin`] over a batch of channels×d inputs.
fn qim_margin(vectors: &Tensor<f64>, params: &QimParams<f64>, bound: &crate::qim::BoundQim) -> Result<f64> {
    let &[batch, channels, d] = vectors.shape() else { unreachable!() };
    let mut margin = f64::INFINITY;
    for sample in vectors.data().chunks(channels * d) {
        let v = Tensor::from_vec(&[channels, d], sample.to_vec())?;
        let out = qim_eval(&v, params, bound, QimKernel::Dense, true)?;
        margin = margin.min(out.kink_margin().expect("retained state"));
    }
    debug_assert!(batch >= 1);
    Ok(margin)
}

fn kernel_name(kernel: QimKernel) -> &'static str {
    match kernel {
        QimKernel::Dense => "dense",
        QimKernel::Fused => "fused",
    }
}

/// Tiny networks on 8×8 synthetic images with 3 classes (checked with
/// random biases so no unit starts exactly on a ReLU switch): StandardCNN with
/// QIM after the first pool and LeNet-5 with QIM after its first conv.
pub fn tiny_network_specs() -> Vec<(String, ModelSpec)> {
    let input = InputShape::new(8, 8, 1);
    vec![
        (
            "standardcnn+qim".into(),
            ModelSpec::new(Backbone::StandardCnn, input, 3).with_qim_at(QimConfig::new(3, 4), 1),
        ),
        ("lenet5+qim".into(), ModelSpec::new(Backbone::LeNet5, input, 3).with_qim_at(QimConfig::new(2, 5), 0)),
    ]
}

fn check_networks(col: &mut Collector, rng: &mut ChaCha8Rng, seed: u64, max_coords: usize) -> Result<()> {
    for (name, spec) in tiny_network_specs() {
        let (net, batch) = loop {
            let mut net = build_model::<f64>(&spec, seed)?;
            for p in net.params_mut().iter_mut().filter(|p| p.name.ends_with("bias") || p.name.ends_with("biases")) {
                p.value = randn(rng, p.value.shape()).map(|x| 0.1 * x);
            }
            let batch = randn(rng, &[2, 8, 8, 1]).map(|x| 0.5 * (x + 1.0));
            let mut tape = Tape::new();
            net.forward_tape(&mut tape, &batch)?;
            if tape.kink_margin() >= KINK_MARGIN {
                break (net, batch);
            }
        };
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
        let inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
        let names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
        let g = grad_check_sampled(
            |t, v| {
                let (logits, _) = net.forward_with_params(t, &batch, v)?;
                t.softmax_cross_entropy(logits, &labels)
            },
            &inputs,
            DEFAULT_EPS,
            Sampling { max_coords: Some(max_coords), seed },
        )?;
        col.record(&name, &names, &g, format!("8×8×1, 3 classes, seed {seed}"));
    }
    Ok(())
}

fn check_custom(col: &mut Collector, rng: &mut ChaCha8Rng, seed: u64, cases: &[CustomCase]) -> Result<()> {
    for case in cases {
        let inputs: Vec<Tensor<f64>> = case.input_shapes.iter().map(|s| randn(rng, s)).collect();
        let probe = {
            let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
            case.op.forward(&refs)?
        };
        let r = randn(rng, probe.shape());
        let op = case.op.clone();
        let g = grad_check(
            |t, v| {
                let y = t.custom(op.clone(), v)?;
                project(t, y, &r)
            },
            &inputs,
            DEFAULT_EPS,
        )?;
        let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        col.record(case.op.name(), &names, &g, format!("seed {seed}"));
    }
    Ok(())
}

/// Runs every check for `seeds` consecutive seeds starting at `seed` and
/// keeps the worst error per component input.
pub fn gradcheck_suite(seed: u64, seeds: usize, custom: &[CustomCase]) -> Result<SuiteReport> {
    let mut col = Collector::default();
    for s in seed..seed + seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        check_ops(&mut col, &mut rng, s)?;
        check_qim(&mut col, &mut rng, s)?;
        check_networks(&mut col, &mut rng, s, 24)?;
        check_custom(&mut col, &mut rng, s, custom)?;
    }
    Ok(col.finish(seeds))
}
