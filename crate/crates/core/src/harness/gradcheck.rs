//! Finite-difference verification of the reverse pass at 64 bits.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::nn::{forward_branch, forward_skip, softmax_cross_entropy, Mode, NetworkSpec, ParamStore, Preset};
use crate::rng::{self, Prng, Stream};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Denominator floor of the relative error, so that gradients that are
/// zero up to rounding compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-4;
pub const BATCH: usize = 4;
const ENTRIES_PER_TENSOR: usize = 6;
const INPUT_ENTRIES: usize = 12;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Per-sample input shape and class count the check uses for a preset.
pub fn check_geometry(preset: Preset) -> (Vec<usize>, usize) {
    match preset {
        Preset::ResMlpS => (vec![1, 1, 2], 2),
        Preset::ResNet8 => (vec![3, 8, 8], 10),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindResult {
    /// Layer kind tag, `network`, `overlap-skip` or `overlap-branch`.
    pub kind: String,
    pub checked: usize,
    /// Entries passed over because a perturbation flipped a ReLU input's
    /// sign, where finite differences do not measure the derivative.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Where the largest error occurred.
    pub worst: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub preset: Preset,
    pub tolerance: f64,
    pub kinds: Vec<KindResult>,
    pub elapsed_s: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.kinds.iter().all(|k| k.max_rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &KindResult> {
        self.kinds.iter().filter(|k| k.max_rel_error > self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.kinds.iter().map(|k| k.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradcheck {} (h = {STEP:e}, tolerance {:e})", self.preset, self.tolerance)?;
        writeln!(
            f,
            "{:<16} {:>8} {:>8} {:>14}  worst entry",
            "kind", "checked", "kinks", "max rel err"
        )?;
        for k in &self.kinds {
            let flag = if k.max_rel_error > self.tolerance { "  FAIL" } else { "" };
            writeln!(
                f,
                "{:<16} {:>8} {:>8} {:>14.3e}  {}{flag}",
                k.kind, k.checked, k.skipped, k.max_rel_error, k.worst
            )?;
        }
        write!(
            f,
            "{} in {:.1}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.elapsed_s
        )
    }
}

#[derive(Default)]
struct Tally {
    kinds: BTreeMap<String, KindResult>,
    order: Vec<String>,
}

impl Tally {
    /// `err` is `None` for an entry skipped at a kink.
    fn record(&mut self, kind: &str, location: String, err: Option<f64>) {
        if !self.kinds.contains_key(kind) {
            self.order.push(kind.to_string());
        }
        let entry = self.kinds.entry(kind.to_string()).or_insert_with(|| KindResult {
            kind: kind.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst: String::new(),
        });
        let Some(err) = err else {
            entry.skipped += 1;
            return;
        };
        entry.checked += 1;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if entry.worst.is_empty() || err > entry.max_rel_error {
            entry.max_rel_error = err;
            entry.worst = location;
        }
    }

    fn into_results(mut self) -> Vec<KindResult> {
        self.order.iter().filter_map(|k| self.kinds.remove(k)).collect()
    }
}

fn gaussian(shape: &[usize], r: &mut Prng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(r)).collect()).expect("positive extents")
}

/// Checks up to `count` entries of a tensor with `numel` entries, in random
/// order. `numeric(i)` returns `None` at a kink; such entries are reported
/// as skipped and replaced by the next ones.
fn check_entries(
    numel: usize,
    count: usize,
    r: &mut Prng,
    mut numeric: impl FnMut(usize) -> Result<Option<f64>>,
    mut record: impl FnMut(usize, Option<f64>),
) -> Result<()> {
    let mut order: Vec<usize> = (0..numel).collect();
    rng::shuffle(r, &mut order);
    let mut checked = 0;
    for i in order {
        if checked == count {
            break;
        }
        let n = numeric(i)?;
        checked += usize::from(n.is_some());
        record(i, n);
    }
    Ok(())
}

fn perturbed(t: &Tensor<f64>, index: usize, delta: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[index] += delta;
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Randomized parameters: the seeded initialization plus Gaussian noise, so
/// that biases, gammas and betas are all away from their initial constants.
fn jittered(net: &NetworkSpec, seed: u64, r: &mut Prng) -> Result<ParamStore<f64>> {
    let mut params = ParamStore::<f64>::init(net, seed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let v = params.value(&name)?;
        let noise = gaussian(v.shape(), r).scale(0.1);
        let next = v.add(&noise)?;
        params.set_value(&name, next)?;
    }
    Ok(params)
}

enum Objective {
    CrossEntropy(Vec<usize>),
    /// `L = Σ weights ⊙ y`.
    Linear(Tensor<f64>),
}

impl Objective {
    fn eval(&self, y: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        match self {
            Objective::CrossEntropy(labels) => softmax_cross_entropy(y, labels),
            Objective::Linear(w) => Ok((w.dot(y)?, w.clone())),
        }
    }

    /// Central difference from the outputs at `+h` and `-h`. The linear
    /// objective is differenced output by output, so outputs that the
    /// perturbation leaves untouched cancel exactly.
    fn central_difference(&self, plus: &Tensor<f64>, minus: &Tensor<f64>) -> Result<f64> {
        let delta = match self {
            Objective::CrossEntropy(labels) => cross_entropy_difference(plus, minus, labels),
            Objective::Linear(w) => w.dot(&plus.sub(minus)?)?,
        };
        Ok(delta / (2.0 * STEP))
    }
}

/// `CE(plus) - CE(minus)` for `[N, C]` logits, mean over samples, computed
/// from per-logit differences: with `d = plus - minus` and `p = softmax(minus)`,
/// `lse(plus) - lse(minus) = ln(1 + Σ p ⊙ expm1(d))`.
fn cross_entropy_difference(plus: &Tensor<f64>, minus: &Tensor<f64>, labels: &[usize]) -> f64 {
    let n = labels.len();
    let c = plus.numel() / n;
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let zp = &plus.data()[s * c..(s + 1) * c];
        let zm = &minus.data()[s * c..(s + 1) * c];
        let m = zm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = zm.iter().map(|z| (z - m).exp()).sum();
        let shift: f64 = zp
            .iter()
            .zip(zm)
            .map(|(a, b)| ((b - m).exp() / denom) * (a - b).exp_m1())
            .sum();
        total += shift.ln_1p() - (zp[label] - zm[label]);
    }
    total / n as f64
}

/// Finite difference of `objective` between two forward passes, or `None`
/// when either pass saw a ReLU sign pattern different from `signs`.
fn difference(
    objective: &Objective,
    signs: &[bool],
    plus: (Tensor<f64>, Vec<bool>),
    minus: (Tensor<f64>, Vec<bool>),
) -> Result<Option<f64>> {
    if plus.1 != signs || minus.1 != signs {
        return Ok(None);
    }
    objective.central_difference(&plus.0, &minus.0).map(Some)
}

/// Checks parameter and input gradients of `net` under `objective`.
fn check_net(
    net: &NetworkSpec,
    params: &ParamStore<f64>,
    x: &Tensor<f64>,
    objective: &Objective,
    r: &mut Prng,
    mut record: impl FnMut(String, Option<f64>),
) -> Result<()> {
    let output = |p: &ParamStore<f64>, x: &Tensor<f64>| -> Result<(Tensor<f64>, Vec<bool>)> {
        let (y, cache) = net.forward(p, x, Mode::Train)?;
        Ok((y, cache.relu_signs()))
    };
    let (y, mut cache) = net.forward(params, x, Mode::Train)?;
    let signs = cache.relu_signs();
    let (_, dy) = objective.eval(&y)?;
    let grads = net.backward(params, &mut cache, &dy)?;
    for (name, g) in &grads.params {
        let value = params.value(name)?;
        check_entries(
            value.numel(),
            ENTRIES_PER_TENSOR,
            r,
            |i| {
                let mut plus = params.clone();
                plus.set_value(name, perturbed(value, i, STEP))?;
                let mut minus = params.clone();
                minus.set_value(name, perturbed(value, i, -STEP))?;
                difference(objective, &signs, output(&plus, x)?, output(&minus, x)?)
            },
            |i, n| record(format!("{name}[{i}]"), n.map(|n| rel_error(g.data()[i], n))),
        )?;
    }
    check_entries(
        x.numel(),
        INPUT_ENTRIES,
        r,
        |i| {
            difference(
                objective,
                &signs,
                output(params, &perturbed(x, i, STEP))?,
                output(params, &perturbed(x, i, -STEP))?,
            )
        },
        |i, n| record(format!("input[{i}]"), n.map(|n| rel_error(grads.input.data()[i], n))),
    )
}

/// Gradient check of a preset:
///
/// * each layer kind on its own, at its first occurrence in the preset,
///   under a random linear objective (parameter and input gradients);
/// * the whole network under softmax cross-entropy;
/// * the skip and branch parts of every residual block's input gradient,
///   each against differences of `⟨upstream, path(x)⟩`.
pub fn gradcheck(preset: Preset, seed: u64) -> Result<GradcheckReport> {
    let started = Instant::now();
    let (input_shape, classes) = check_geometry(preset);
    let net = preset.build(&input_shape, classes)?;
    let mut r = rng::stream(seed, Stream::Gradcheck);
    let mut tally = Tally::default();

    let mut seen = Vec::new();
    for (path, layer, shape) in net.layer_inputs() {
        let tag = layer.kind.tag();
        if seen.contains(&tag) {
            continue;
        }
        seen.push(tag);
        let single = NetworkSpec::new(shape.clone(), vec![layer.clone()])?;
        let params = jittered(&single, seed, &mut r)?;
        let mut batch_shape = vec![BATCH];
        batch_shape.extend_from_slice(&shape);
        let x = gaussian(&batch_shape, &mut r);
        let mut out_shape = vec![BATCH];
        out_shape.extend(single.output_shape()?);
        let objective = Objective::Linear(gaussian(&out_shape, &mut r));
        check_net(&single, &params, &x, &objective, &mut r, |loc, err| {
            tally.record(tag, format!("{path}: {loc}"), err)
        })?;
    }

    let params = jittered(&net, seed, &mut r)?;
    let mut batch_shape = vec![BATCH];
    batch_shape.extend_from_slice(&input_shape);
    let x = gaussian(&batch_shape, &mut r);
    let labels: Vec<usize> = (0..BATCH).map(|_| rng::below(&mut r, classes)).collect();
    let objective = Objective::CrossEntropy(labels.clone());
    check_net(&net, &params, &x, &objective, &mut r, |loc, err| {
        tally.record("network", loc, err)
    })?;

    let (logits, mut cache) = net.forward(&params, &x, Mode::Train)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, &labels)?;
    let grads = net.backward_probed(&params, &mut cache, &dlogits)?;
    for b in &grads.blocks {
        let block = net.block(&b.path).expect("recorded block exists");
        let input = &cache.block(&b.path).expect("cached block").input;
        for (kind, analytic, is_skip) in [("overlap-skip", &b.skip, true), ("overlap-branch", &b.branch, false)] {
            let path_output = |x: &Tensor<f64>| -> Result<(Tensor<f64>, Vec<bool>)> {
                if is_skip {
                    forward_skip(block, &b.path, &params, x.clone(), Mode::Train)
                } else {
                    forward_branch(block, &b.path, &params, x.clone(), Mode::Train)
                }
            };
            let signs = path_output(input)?.1;
            // d/dx of ⟨upstream, path(x)⟩ is the path's share of ∂L/∂x.
            let objective = Objective::Linear(b.upstream.clone());
            check_entries(
                input.numel(),
                INPUT_ENTRIES,
                &mut r,
                |i| {
                    difference(
                        &objective,
                        &signs,
                        path_output(&perturbed(input, i, STEP))?,
                        path_output(&perturbed(input, i, -STEP))?,
                    )
                },
                |i, n| {
                    tally.record(
                        kind,
                        format!("{}: input[{i}]", b.path),
                        n.map(|n| rel_error(analytic.data()[i], n)),
                    )
                },
            )?;
        }
    }

    Ok(GradcheckReport {
        preset,
        tolerance: TOLERANCE,
        kinds: tally.into_results(),
        elapsed_s: started.elapsed().as_secs_f64(),
    })
}
