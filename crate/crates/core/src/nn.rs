//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters of an [`Mlp`] live in one flat buffer. Layer `l` stores its
//! weight matrix row-major (`out x in`) followed by its bias vector, so
//! gradients, optimizer moments and soft updates all operate on plain
//! slices of the same length.
//!
//! Hidden layers use the rectifier; the output layer applies a [`Head`].

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Output activation of the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Identity,
    /// `scale * logistic(z)`, bounded in `[0, scale]`.
    Bounded {
        scale: f64,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    head: Head,
    params: Vec<f64>,
    /// Offset of each layer's weight block; the bias block follows it.
    offsets: Vec<usize>,
}

/// Activations recorded by [`Mlp::forward_trace`] for a later backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[l]` the post-activation of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Gradients with respect to every parameter and to the input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Reusable buffers for [`Mlp::backward_into`].
#[derive(Debug, Clone, Default)]
pub struct BackwardScratch {
    delta: Vec<f64>,
    next: Vec<f64>,
}

fn layout(sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(sizes.len().saturating_sub(1));
    let mut total = 0;
    for pair in sizes.windows(2) {
        offsets.push(total);
        total += pair[0] * pair[1] + pair[1];
    }
    (offsets, total)
}

impl Mlp {
    /// A network with every parameter set to zero.
    pub fn zeros(sizes: &[usize], head: Head) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Architecture(format!("invalid layer sizes {sizes:?}")));
        }
        if let Head::Bounded { scale } = head {
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(Error::Architecture(format!("bounded head scale {scale}")));
            }
        }
        let (offsets, total) = layout(sizes);
        Ok(Self {
            sizes: sizes.to_vec(),
            head,
            params: vec![0.0; total],
            offsets,
        })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, head)?;
        for l in 0..net.layer_count() {
            let fan_in = net.sizes[l];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let (start, end) = net.layer_range(l);
            for p in &mut net.params[start..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], head: Head, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes, head)?;
        if params.len() != net.params.len() {
            return Err(Error::Dimension {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Architecture("non-finite parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer_range(&self, l: usize) -> (usize, usize) {
        let start = self.offsets[l];
        (start, start + self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1])
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.offsets[l];
        let w = &self.params[start..start + inp * out];
        let b = &self.params[start + inp * out..start + inp * out + out];
        (w, b)
    }

    /// Same layer sizes and head.
    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes && self.head == other.head
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut trace = Trace::default();
        self.forward_trace(input, &mut trace)?;
        Ok(trace.acts.pop().unwrap())
    }

    /// Forward pass recording activations into `trace` (buffers are reused).
    pub fn forward_trace<'t>(&self, input: &[f64], trace: &'t mut Trace) -> Result<&'t [f64]> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let layers = self.layer_count();
        trace.acts.resize_with(layers + 1, Vec::new);
        trace.pre.resize_with(layers, Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(input);

        for l in 0..layers {
            let (w, b) = self.layer(l);
            let inp = self.sizes[l];
            let (before, after) = trace.acts.split_at_mut(l + 1);
            let x = &before[l];
            let z = &mut trace.pre[l];
            z.clear();
            z.extend(
                b.iter()
                    .zip(w.chunks_exact(inp))
                    .map(|(bias, row)| bias + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()),
            );
            let a = &mut after[0];
            a.clear();
            if l + 1 < layers {
                a.extend(z.iter().map(|&v| v.max(0.0)));
            } else {
                match self.head {
                    Head::Identity => a.extend_from_slice(z),
                    Head::Bounded { scale } => a.extend(z.iter().map(|&v| scale * logistic(v))),
                    Head::Softmax => {
                        a.extend_from_slice(z);
                        softmax_in_place(a);
                    }
                }
            }
        }
        Ok(trace.output())
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Exact gradients of `upstream . output` with respect to parameters and input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<GradientBundle> {
        let mut trace = Trace::default();
        self.forward_trace(input, &mut trace)?;
        let mut params = self.zero_grads();
        let mut grad_in = Vec::new();
        self.backward_into(
            &trace,
            upstream,
            Some(&mut params),
            &mut grad_in,
            &mut BackwardScratch::default(),
        )?;
        Ok(GradientBundle { params, input: grad_in })
    }

    /// Backward pass over a recorded trace.
    ///
    /// Parameter gradients are *accumulated* into `param_grads` when given;
    /// pass `None` when only the input gradient is needed. The input gradient
    /// overwrites `input_grad`.
    pub fn backward_into(
        &self,
        trace: &Trace,
        upstream: &[f64],
        mut param_grads: Option<&mut Vec<f64>>,
        input_grad: &mut Vec<f64>,
        scratch: &mut BackwardScratch,
    ) -> Result<()> {
        let layers = self.layer_count();
        if trace.acts.len() != layers + 1 || trace.acts[0].len() != self.input_dim() {
            return Err(Error::Architecture("trace does not belong to this network".into()));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if let Some(g) = param_grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::Dimension {
                    expected: self.params.len(),
                    got: g.len(),
                });
            }
        }

        // dL/dz for the last layer.
        let out = trace.output();
        let delta = &mut scratch.delta;
        delta.clear();
        match self.head {
            Head::Identity => delta.extend_from_slice(upstream),
            Head::Bounded { scale } => {
                delta.extend(
                    out.iter()
                        .zip(upstream)
                        .map(|(&y, &u)| if scale > 0.0 { u * y * (1.0 - y / scale) } else { 0.0 }),
                )
            }
            Head::Softmax => {
                let dot: f64 = out.iter().zip(upstream).map(|(y, u)| y * u).sum();
                delta.extend(out.iter().zip(upstream).map(|(&y, &u)| y * (u - dot)));
            }
        }

        for l in (0..layers).rev() {
            let (inp, outd) = (self.sizes[l], self.sizes[l + 1]);
            let start = self.offsets[l];
            let x = &trace.acts[l];
            if let Some(g) = param_grads.as_deref_mut() {
                let (gw, gb) = g[start..start + inp * outd + outd].split_at_mut(inp * outd);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (gwi, &xi) in gw[o * inp..(o + 1) * inp].iter_mut().zip(x) {
                        *gwi += d * xi;
                    }
                }
            }
            let w = &self.params[start..start + inp * outd];
            let next = &mut scratch.next;
            next.clear();
            next.resize(inp, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (ni, &wi) in next.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                    *ni += d * wi;
                }
            }
            if l > 0 {
                for (ni, &z) in next.iter_mut().zip(&trace.pre[l - 1]) {
                    if z <= 0.0 {
                        *ni = 0.0;
                    }
                }
            }
            std::mem::swap(delta, next);
        }
        input_grad.clear();
        input_grad.extend_from_slice(delta);
        Ok(())
    }

    pub fn to_document(&self) -> NetDocument {
        NetDocument {
            format: NET_FORMAT.to_string(),
            version: NET_FORMAT_VERSION,
            sizes: self.sizes.clone(),
            hidden_activation: "relu".to_string(),
            head: self.head,
            params: self.params.clone(),
        }
    }

    pub fn from_document(doc: &NetDocument) -> Result<Self> {
        if doc.format != NET_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format {:?}", doc.format)));
        }
        if doc.version != NET_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", doc.version)));
        }
        if doc.hidden_activation != "relu" {
            return Err(Error::Checkpoint(format!(
                "unsupported hidden activation {:?}",
                doc.hidden_activation
            )));
        }
        Self::from_params(&doc.sizes, doc.head, doc.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_document())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: NetDocument = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_document(&doc)
    }
}

pub const NET_FORMAT: &str = "edgebid-mlp";
pub const NET_FORMAT_VERSION: u32 = 1;

/// Persisted form of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDocument {
    pub format: String,
    pub version: u32,
    pub sizes: Vec<usize>,
    pub hidden_activation: String,
    pub head: Head,
    pub params: Vec<f64>,
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; net.param_count()],
            v: vec![0.0; net.param_count()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Descends along `grads` (pass negated gradients to ascend).
    pub fn step(&mut self, net: &mut Mlp, grads: &[f64]) -> Result<()> {
        if grads.len() != net.param_count() || self.m.len() != net.param_count() {
            return Err(Error::Dimension {
                expected: net.param_count(),
                got: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = self.lr / c1;
        for (((p, &g), m), v) in net.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= step_size * *m / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `target <- tau * online + (1 - tau) * target`, parameter-wise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !target.same_architecture(online) {
        return Err(Error::Architecture(format!(
            "soft update between {:?} and {:?}",
            target.sizes, online.sizes
        )));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("soft-update rate {tau} outside (0, 1]")));
    }
    for (t, &o) in target.params.iter_mut().zip(&online.params) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Standard Gumbel draw `-ln(-ln U)` with `U` kept away from 0 and 1.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// `softmax((log_softmax(logits) + noise) / tau)`.
pub fn gumbel_softmax_with_noise(logits: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    debug_assert_eq!(logits.len(), noise.len());
    let mut v: Vec<f64> = log_softmax(logits)
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / tau)
        .collect();
    softmax_in_place(&mut v);
    v
}

/// Relaxed categorical sample with fresh Gumbel noise per coordinate.
pub fn gumbel_softmax<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..logits.len()).map(|_| sample_gumbel(rng)).collect();
    gumbel_softmax_with_noise(logits, &noise, tau)
}

/// Vector-Jacobian product of [`gumbel_softmax_with_noise`] with respect to
/// the logits, given its output `sample`. The log-softmax shift cancels
/// inside the outer softmax, so only the softmax Jacobian scaled by
/// `1 / tau` remains.
pub fn gumbel_softmax_backward(sample: &[f64], tau: f64, upstream: &[f64]) -> Vec<f64> {
    let dot: f64 = sample.iter().zip(upstream).map(|(y, u)| y * u).sum();
    sample
        .iter()
        .zip(upstream)
        .map(|(&y, &u)| y * (u - dot) / tau)
        .collect()
}
