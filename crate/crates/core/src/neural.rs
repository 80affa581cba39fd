//! Small fully connected networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>`. For each layer the weights come
//! first (row-major, `out x in`), then the biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Floor applied to softmax probabilities before renormalizing.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Identity,
    Softmax,
}

/// Layer widths (input first, output last). Hidden layers use ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    head: OutputHead,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, output_head: OutputHead) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(invalid("an MLP needs at least input and output widths"));
        }
        if layer_widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if output_head == OutputHead::Softmax && *layer_widths.last().unwrap() < 2 {
            return Err(invalid("softmax head needs at least two outputs"));
        }
        Ok(MlpSpec {
            widths: layer_widths,
            head: output_head,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn output_head(&self) -> OutputHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Offset of layer `l`'s weight block in the flat vector.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.n_layers());
        let mut acc = 0;
        for w in self.widths.windows(2) {
            off.push(acc);
            acc += (w[0] + 1) * w[1];
        }
        off
    }
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// Raw softmax before flooring (softmax head only).
    raw_probs: Vec<f64>,
    /// Final output after the head.
    output: Vec<f64>,
    n_params: usize,
}

impl ForwardTape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    spec: MlpSpec,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    spec: Vec<usize>,
    head: OutputHead,
    values: Vec<f64>,
}

impl Serialize for ParamVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawParams {
            spec: self.spec.widths.clone(),
            head: self.spec.head,
            values: self.values.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawParams::deserialize(d)?;
        let spec = MlpSpec::new(raw.spec, raw.head).map_err(serde::de::Error::custom)?;
        ParamVector::from_values(spec, raw.values).map_err(serde::de::Error::custom)
    }
}

impl ParamVector {
    /// Uniform fan-based initialization, zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(spec.n_params());
        for w in spec.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                values.push(rng.gen_range(-a..=a));
            }
            values.extend(std::iter::repeat(0.0).take(fan_out));
        }
        ParamVector {
            spec: spec.clone(),
            values,
        }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        ParamVector {
            spec: spec.clone(),
            values: vec![0.0; spec.n_params()],
        }
    }

    pub fn from_values(spec: MlpSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_params() {
            return Err(invalid(format!(
                "parameter vector has {} values, spec needs {}",
                values.len(),
                spec.n_params()
            )));
        }
        Ok(ParamVector { spec, values })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same spec with different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(self.spec.clone(), values)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_dim() {
            return Err(invalid(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardTape)> {
        self.check_input(input)?;
        let spec = &self.spec;
        let n_layers = spec.n_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut x = input.to_vec();
        let mut off = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let z = affine(&self.values[off..], &x, fan_in, fan_out);
            off += (fan_in + 1) * fan_out;
            let next = if l + 1 < n_layers {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        let (raw_probs, output) = match spec.head {
            OutputHead::Identity => (Vec::new(), x),
            OutputHead::Softmax => {
                let p = softmax(&x);
                let out = floor_renormalize(&p);
                (p, out)
            }
        };
        let tape = ForwardTape {
            inputs,
            pre,
            raw_probs,
            output: output.clone(),
            n_params: self.values.len(),
        };
        Ok((output, tape))
    }

    /// Forward pass without keeping a tape.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Scalar output of a width-1 network.
    pub fn eval_scalar(&self, input: &[f64]) -> Result<f64> {
        let out = self.eval(input)?;
        if out.len() != 1 {
            return Err(invalid("eval_scalar on a network with more than one output"));
        }
        Ok(out[0])
    }

    /// Gradient of `<output_gradient, output>` with respect to the parameters.
    pub fn backward(&self, tape: &ForwardTape, output_gradient: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.values.len()];
        self.backward_into(tape, output_gradient, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale` times the parameter gradient into `acc`.
    pub fn backward_into(&self, tape: &ForwardTape, output_gradient: &[f64], scale: f64, acc: &mut [f64]) -> Result<()> {
        let spec = &self.spec;
        if tape.n_params != self.values.len() || tape.pre.len() != spec.n_layers() {
            return Err(invalid("forward tape does not belong to this network"));
        }
        if output_gradient.len() != spec.output_dim() {
            return Err(invalid(format!(
                "output gradient has length {}, network has {} outputs",
                output_gradient.len(),
                spec.output_dim()
            )));
        }
        if acc.len() != self.values.len() {
            return Err(invalid("gradient accumulator has the wrong length"));
        }
        let mut delta: Vec<f64> = match spec.head {
            OutputHead::Identity => output_gradient.iter().map(|g| g * scale).collect(),
            OutputHead::Softmax => softmax_backward(&tape.raw_probs, &tape.output, output_gradient)
                .into_iter()
                .map(|g| g * scale)
                .collect(),
        };
        let offsets = spec.layer_offsets();
        for l in (0..spec.n_layers()).rev() {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let off = offsets[l];
            let x = &tape.inputs[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut acc[off + o * fan_in..off + (o + 1) * fan_in];
                for (r, &xi) in row.iter_mut().zip(x) {
                    *r += d * xi;
                }
                acc[off + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let w = &self.values[off..off + fan_in * fan_out];
                let below = &tape.pre[l - 1];
                let mut next = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (n, &wi) in next.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *n += d * wi;
                    }
                }
                for (n, &z) in next.iter_mut().zip(below) {
                    if z <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
        Ok(())
    }
}

fn affine(params: &[f64], x: &[f64], fan_in: usize, fan_out: usize) -> Vec<f64> {
    let (w, rest) = params.split_at(fan_in * fan_out);
    let b = &rest[..fan_out];
    (0..fan_out)
        .map(|o| {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            row.iter().zip(x).fold(b[o], |acc, (wi, xi)| acc + wi * xi)
        })
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn floor_renormalize(p: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = p.iter().map(|&v| v.max(PROB_FLOOR)).collect();
    let s: f64 = q.iter().sum();
    q.into_iter().map(|v| v / s).collect()
}

/// Backpropagates through `out = max(p, eps) / sum(max(p, eps))` and the softmax.
fn softmax_backward(p: &[f64], out: &[f64], og: &[f64]) -> Vec<f64> {
    let s: f64 = p.iter().map(|&v| v.max(PROB_FLOOR)).sum();
    let dot: f64 = og.iter().zip(out).map(|(g, o)| g * o).sum();
    let dp: Vec<f64> = p
        .iter()
        .zip(og)
        .map(|(&pi, &g)| if pi >= PROB_FLOOR { (g - dot) / s } else { 0.0 })
        .collect();
    let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
    p.iter().zip(&dp).map(|(&pi, &d)| pi * (d - inner)).collect()
}

fn check_policy(params: &ParamVector) -> Result<()> {
    if params.spec.head != OutputHead::Softmax {
        return Err(invalid("policy network must have a softmax head"));
    }
    Ok(())
}

/// Log of the floored softmax probability of `action`.
pub fn log_prob(policy: &ParamVector, state: &[f64], action: usize) -> Result<f64> {
    check_policy(policy)?;
    let out = policy.eval(state)?;
    out.get(action)
        .map(|p| p.ln())
        .ok_or_else(|| invalid(format!("action {action} out of range for {} actions", out.len())))
}

/// `log pi(action | state)` and its gradient with respect to the policy parameters.
pub fn log_prob_grad(policy: &ParamVector, state: &[f64], action: usize) -> Result<(f64, Vec<f64>)> {
    check_policy(policy)?;
    let (out, tape) = policy.forward(state)?;
    let p = *out
        .get(action)
        .ok_or_else(|| invalid(format!("action {action} out of range for {} actions", out.len())))?;
    let mut og = vec![0.0; out.len()];
    og[action] = 1.0 / p;
    Ok((p.ln(), policy.backward(&tape, &og)?))
}

/// Draws an action from the floored softmax by inverting its CDF.
pub fn sample_action<R: Rng + ?Sized>(policy: &ParamVector, state: &[f64], rng: &mut R) -> Result<usize> {
    check_policy(policy)?;
    let probs = policy.eval(state)?;
    Ok(sample_categorical(&probs, rng))
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Central finite differences of `f` around `params`.
pub fn finite_diff_grad<F>(params: &[f64], f: F, h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max(1, max |b|)`, the relative error used by gradient checks.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(1.0, f64::max);
    diff / scale
}
