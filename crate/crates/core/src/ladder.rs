//! The parametric mapping: input projection, a Ladder encoder/decoder with
//! gated lateral combinators, the output projection, and the optional
//! per-group classification head.
//!
//! Groups are folded into the batch axis, so a `[B, K, N]` state becomes
//! `B * K` independent rows that all share one set of weights.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, NormMode, RunningStats, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Number of per-unit coefficients in a lateral combinator.
pub const COMBINATOR_COEFFS: usize = 10;

/// Initial combinator coefficients `a1..a10`.
const COMBINATOR_INIT: [f64; COMBINATOR_COEFFS] = [0., 1., 0., 0., 0., 0., 1., 0., 0., 0.];

#[derive(Clone, Debug, PartialEq)]
pub struct LadderConfig {
    /// Widths of the Ladder levels, bottom first. `layers[0]` is the width
    /// of the input projection; each further entry adds an encoder layer.
    pub layers: Vec<usize>,
    pub norm: NormMode,
    /// Number of classes for the head; 0 disables it.
    pub classes: usize,
}

impl LadderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.contains(&0) {
            return Err(Error::Config(format!(
                "ladder layer sizes must be non-empty and positive, got {:?}",
                self.layers
            )));
        }
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        self.layers[0]
    }

    pub fn top_width(&self) -> usize {
        *self.layers.last().expect("validated")
    }

    /// Number of encoder layers above the input projection.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Normalization sites: input projection, each encoder layer, the top
    /// of the decoder, and each decoder layer below it.
    pub fn norm_sites(&self) -> usize {
        2 * self.depth() + 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: T,
    pub scale: T,
    pub shift: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combinator<T> {
    pub coeffs: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassHead<T> {
    pub hidden_weight: T,
    pub hidden_bias: T,
    pub out_weight: T,
    pub out_bias: T,
}

/// Every trainable quantity of the model. Instantiated with [`Tensor`] for
/// stored weights, with [`Var`] once bound into a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub input: Layer<T>,
    pub encoder: Vec<Layer<T>>,
    /// `decoder[l]` maps level `l + 1` down to level `l`.
    pub decoder: Vec<T>,
    /// One per level, bottom first.
    pub combinators: Vec<Combinator<T>>,
    pub output_weight: T,
    pub output_bias: T,
    pub class_head: Option<ClassHead<T>>,
    pub log_v: T,
}

pub type TaggerParams = Params<Tensor>;
pub type BoundParams = Params<Var>;

impl<T> Params<T> {
    /// Visits every parameter with a stable dotted name.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        let layer = |f: &mut dyn FnMut(String, &'a T), p: &str, l: &'a Layer<T>| {
            f(format!("{p}.weight"), &l.weight);
            f(format!("{p}.scale"), &l.scale);
            f(format!("{p}.shift"), &l.shift);
        };
        layer(&mut f, "input", &self.input);
        for (i, l) in self.encoder.iter().enumerate() {
            layer(&mut f, &format!("encoder.{}", i + 1), l);
        }
        for (i, w) in self.decoder.iter().enumerate() {
            f(format!("decoder.{i}.weight"), w);
        }
        for (i, c) in self.combinators.iter().enumerate() {
            for (j, a) in c.coeffs.iter().enumerate() {
                f(format!("combinator.{i}.a{}", j + 1), a);
            }
        }
        f("output.weight".into(), &self.output_weight);
        f("output.bias".into(), &self.output_bias);
        if let Some(h) = &self.class_head {
            f("class.hidden.weight".into(), &h.hidden_weight);
            f("class.hidden.bias".into(), &h.hidden_bias);
            f("class.out.weight".into(), &h.out_weight);
            f("class.out.bias".into(), &h.out_bias);
        }
        f("log_v".into(), &self.log_v);
    }

    /// Builds a structurally identical tree, in [`Params::visit`] order.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let mut layer = |p: &str, l: &Layer<T>| Layer {
            weight: f(&format!("{p}.weight"), &l.weight),
            scale: f(&format!("{p}.scale"), &l.scale),
            shift: f(&format!("{p}.shift"), &l.shift),
        };
        let input = layer("input", &self.input);
        let encoder = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, l)| layer(&format!("encoder.{}", i + 1), l))
            .collect();
        let decoder = self
            .decoder
            .iter()
            .enumerate()
            .map(|(i, w)| f(&format!("decoder.{i}.weight"), w))
            .collect();
        let combinators = self
            .combinators
            .iter()
            .enumerate()
            .map(|(i, c)| Combinator {
                coeffs: c
                    .coeffs
                    .iter()
                    .enumerate()
                    .map(|(j, a)| f(&format!("combinator.{i}.a{}", j + 1), a))
                    .collect(),
            })
            .collect();
        let output_weight = f("output.weight", &self.output_weight);
        let output_bias = f("output.bias", &self.output_bias);
        let class_head = self.class_head.as_ref().map(|h| ClassHead {
            hidden_weight: f("class.hidden.weight", &h.hidden_weight),
            hidden_bias: f("class.hidden.bias", &h.hidden_bias),
            out_weight: f("class.out.weight", &h.out_weight),
            out_bias: f("class.out.bias", &h.out_bias),
        });
        let log_v = f("log_v", &self.log_v);
        Params {
            input,
            encoder,
            decoder,
            combinators,
            output_weight,
            output_bias,
            class_head,
            log_v,
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n));
        out
    }
}

impl<T> Params<T> {
    /// Mutable visit, in [`Params::visit`] order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        fn layer<T>(f: &mut dyn FnMut(&str, &mut T), p: &str, l: &mut Layer<T>) {
            f(&format!("{p}.weight"), &mut l.weight);
            f(&format!("{p}.scale"), &mut l.scale);
            f(&format!("{p}.shift"), &mut l.shift);
        }
        layer(&mut f, "input", &mut self.input);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            layer(&mut f, &format!("encoder.{}", i + 1), l);
        }
        for (i, w) in self.decoder.iter_mut().enumerate() {
            f(&format!("decoder.{i}.weight"), w);
        }
        for (i, c) in self.combinators.iter_mut().enumerate() {
            for (j, a) in c.coeffs.iter_mut().enumerate() {
                f(&format!("combinator.{i}.a{}", j + 1), a);
            }
        }
        f("output.weight", &mut self.output_weight);
        f("output.bias", &mut self.output_bias);
        if let Some(h) = &mut self.class_head {
            f("class.hidden.weight", &mut h.hidden_weight);
            f("class.hidden.bias", &mut h.hidden_bias);
            f("class.out.weight", &mut h.out_weight);
            f("class.out.bias", &mut h.out_bias);
        }
        f("log_v", &mut self.log_v);
    }
}

fn gaussian(dims: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let s: f64 = StandardNormal.sample(rng);
        s * std
    })
}

fn dense(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    gaussian(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl TaggerParams {
    /// Fresh parameters for inputs of `input_size` elements.
    ///
    /// `z_bias` initializes the reconstruction half of the output bias (the
    /// data mean, or its logit for binary inputs); `v_init` is the initial
    /// group variance.
    pub fn init(
        config: &LadderConfig,
        input_size: usize,
        z_bias: f64,
        v_init: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if input_size == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        let layers = &config.layers;
        let make_layer = |fan_in: usize, fan_out: usize, rng: &mut Rng| Layer {
            weight: dense(fan_in, fan_out, rng),
            scale: Tensor::ones(&[fan_out]),
            shift: Tensor::zeros(&[fan_out]),
        };
        let input = make_layer(4 * input_size, layers[0], rng);
        let encoder = layers
            .windows(2)
            .map(|w| make_layer(w[0], w[1], rng))
            .collect();
        let decoder = layers
            .windows(2)
            .map(|w| dense(w[1], w[0], rng))
            .collect();
        let combinators = layers
            .iter()
            .map(|&width| Combinator {
                coeffs: COMBINATOR_INIT
                    .iter()
                    .map(|&a| Tensor::full(&[width], a))
                    .collect(),
            })
            .collect();
        let output_weight = dense(layers[0], 2 * input_size, rng);
        let output_bias = Tensor::from_fn(&[2 * input_size], |i| {
            if i < input_size {
                z_bias
            } else {
                0.0
            }
        });
        let class_head = (config.classes > 0)
            .then(|| ClassHead::init(config.top_width(), config.classes, rng));
        Ok(Params {
            input,
            encoder,
            decoder,
            combinators,
            output_weight,
            output_bias,
            class_head,
            log_v: Tensor::scalar(v_init.ln()),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.map(|_, t| g.param(t.clone()))
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    pub fn variance(&self) -> f64 {
        self.log_v.data()[0].exp()
    }

    pub fn input_size(&self) -> usize {
        self.output_bias.numel() / 2
    }
}

impl ClassHead<Tensor> {
    /// Two fresh layers on top of the encoder's top level; the output has
    /// one extra "no class" unit.
    pub fn init(top: usize, classes: usize, rng: &mut Rng) -> Self {
        ClassHead {
            hidden_weight: dense(top, top, rng),
            hidden_bias: Tensor::zeros(&[top]),
            out_weight: dense(top, classes + 1, rng),
            out_bias: Tensor::zeros(&[classes + 1]),
        }
    }
}

/// Running statistics for every batch-normalization site, kept separately
/// for each iteration of the grouping loop: the inputs drift as the groups
/// sharpen, so pooling them would skew evaluation. Slots are added as
/// training reaches new iterations; evaluation past the last trained
/// iteration reuses the last slot.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub slots: Vec<Vec<RunningStats>>,
}

impl NormStats {
    pub fn new(config: &LadderConfig) -> Self {
        NormStats {
            slots: vec![Self::fresh_slot(config)],
        }
    }

    pub fn fresh_slot(config: &LadderConfig) -> Vec<RunningStats> {
        let l = &config.layers;
        let depth = config.depth();
        let mut sites = vec![RunningStats::new(l[0])];
        for &w in &l[1..] {
            sites.push(RunningStats::new(w));
        }
        sites.push(RunningStats::new(l[depth]));
        for lvl in (0..depth).rev() {
            sites.push(RunningStats::new(l[lvl]));
        }
        sites
    }

    /// Statistics for `iteration`; training grows the slot list on demand.
    fn slot_mut(&mut self, config: &LadderConfig, iteration: usize, training: bool) -> &mut Vec<RunningStats> {
        if training {
            while self.slots.len() <= iteration {
                self.slots.push(Self::fresh_slot(config));
            }
        }
        let i = iteration.min(self.slots.len() - 1);
        &mut self.slots[i]
    }
}

/// Everything a forward pass through the mapping needs besides the weights.
pub struct MappingCtx<'a> {
    pub config: &'a LadderConfig,
    pub stats: &'a mut NormStats,
    pub training: bool,
    /// Zero-based iteration of the grouping loop, selects the stats slot.
    pub iteration: usize,
    /// Running-statistics momentum for training passes.
    pub momentum: f64,
}

impl MappingCtx<'_> {
    fn normalize(&mut self, g: &mut Graph, x: Var, site: usize) -> Result<Var> {
        let mode = self.config.norm;
        let running = match mode {
            NormMode::Batch => Some((
                &mut self.stats.slot_mut(self.config, self.iteration, self.training)[site],
                self.momentum,
            )),
            NormMode::Layer => None,
        };
        g.normalize(x, mode, running, self.training)
    }
}

/// Concatenates `[z, m, δz, L(m)]` per group row and projects it to the
/// hidden width: `relu(scale * norm(W_h [..]) + shift)`.
pub fn input_projection(
    g: &mut Graph,
    p: &BoundParams,
    ctx: &mut MappingCtx<'_>,
    inputs: [Var; 4],
) -> Result<Var> {
    let dims = g.dims(inputs[0]).to_vec();
    if dims.len() != 3 || inputs.iter().any(|&v| g.dims(v) != dims.as_slice()) {
        return Err(Error::shape(format!(
            "input projection needs four [B, K, N] tensors, got {:?}",
            inputs.map(|v| g.dims(v).to_vec())
        )));
    }
    let rows = dims[0] * dims[1];
    let n = dims[2];
    let mut flat = [inputs[0]; 4];
    for (slot, &v) in flat.iter_mut().zip(&inputs) {
        *slot = g.reshape(v, &[rows, n])?;
    }
    let stacked = g.concat(&flat, 1)?;
    let pre = g.matmul(stacked, p.input.weight)?;
    let normed = ctx.normalize(g, pre, 0)?;
    affine_relu(g, normed, &p.input)
}

fn affine_relu(g: &mut Graph, x: Var, layer: &Layer<Var>) -> Result<Var> {
    let scaled = g.mul(x, layer.scale)?;
    let shifted = g.add(scaled, layer.shift)?;
    g.relu(shifted)
}

/// Gated lateral combinator:
/// `(lateral - μ(u)) * sigmoid(v(u)) + μ(u)` with
/// `μ(u) = a1·σ(a2·u + a3) + a4·u + a5` and
/// `v(u) = a6·σ(a7·u + a8) + a9·u + a10`. Returns the output and the gate.
pub fn combinator(
    g: &mut Graph,
    c: &Combinator<Var>,
    lateral: Var,
    u: Var,
) -> Result<(Var, Var)> {
    let a = &c.coeffs;
    let affine_sigmoid = |g: &mut Graph, s: usize| -> Result<Var> {
        // a[s]·σ(a[s+1]·u + a[s+2]) + a[s+3]·u + a[s+4]
        let inner = g.mul(a[s + 1], u)?;
        let inner = g.add(inner, a[s + 2])?;
        let sig = g.sigmoid(inner)?;
        let first = g.mul(a[s], sig)?;
        let lin = g.mul(a[s + 3], u)?;
        let sum = g.add(first, lin)?;
        g.add(sum, a[s + 4])
    };
    let mu = affine_sigmoid(g, 0)?;
    let v = affine_sigmoid(g, 5)?;
    let gate = g.sigmoid(v)?;
    let diff = g.sub(lateral, mu)?;
    let gated = g.mul(diff, gate)?;
    Ok((g.add(gated, mu)?, gate))
}

/// Output of [`ladder_forward`].
pub struct LadderOutput {
    /// Bottom-level reconstruction, `[B*K, H]`.
    pub u: Var,
    /// Top encoder activation, `[B*K, top]`.
    pub top: Var,
    /// Combinator gates per level, bottom first.
    pub gates: Vec<Var>,
}

/// Runs the encoder bottom-up and the decoder top-down. No noise is injected
/// and no per-layer denoising cost is formed.
pub fn ladder_forward(
    g: &mut Graph,
    p: &BoundParams,
    ctx: &mut MappingCtx<'_>,
    h: Var,
) -> Result<LadderOutput> {
    let depth = ctx.config.depth();
    if g.dims(h).len() != 2 || g.dims(h)[1] != ctx.config.hidden_width() {
        return Err(Error::shape(format!(
            "ladder input {:?} does not match hidden width {}",
            g.dims(h),
            ctx.config.hidden_width()
        )));
    }
    let mut laterals = vec![h];
    let mut act = h;
    for (l, layer) in p.encoder.iter().enumerate() {
        let pre = g.matmul(act, layer.weight)?;
        let normed = ctx.normalize(g, pre, l + 1)?;
        laterals.push(normed);
        act = affine_relu(g, normed, layer)?;
    }
    let top = act;

    let mut gates = vec![top; depth + 1];
    let mut site = depth + 1;
    let mut u = ctx.normalize(g, top, site)?;
    let (mut recon, gate) = combinator(g, &p.combinators[depth], laterals[depth], u)?;
    gates[depth] = gate;
    for l in (0..depth).rev() {
        site += 1;
        let pre = g.matmul(recon, p.decoder[l])?;
        u = ctx.normalize(g, pre, site)?;
        let (r, gate) = combinator(g, &p.combinators[l], laterals[l], u)?;
        recon = r;
        gates[l] = gate;
    }
    Ok(LadderOutput {
        u: recon,
        top,
        gates,
    })
}

/// Projects the bottom reconstruction to `(z, m_logits)`, each `[B, K, N]`.
/// The z half is returned pre-activation; binary inputs apply a sigmoid.
pub fn output_projection(
    g: &mut Graph,
    p: &BoundParams,
    u: Var,
    batch: usize,
    groups: usize,
) -> Result<(Var, Var)> {
    let out = g.matmul(u, p.output_weight)?;
    let out = g.add(out, p.output_bias)?;
    let n = g.dims(out)[1] / 2;
    let z = g.slice(out, 1, 0, n)?;
    let m = g.slice(out, 1, n, 2 * n)?;
    let z = g.reshape(z, &[batch, groups, n])?;
    let m = g.reshape(m, &[batch, groups, n])?;
    Ok((z, m))
}

/// Per-group class distribution `[B, K, C + 1]`; the last unit is "no class".
pub fn class_head(g: &mut Graph, p: &BoundParams, top: Var, batch: usize, groups: usize) -> Result<Var> {
    let head = p
        .class_head
        .as_ref()
        .ok_or_else(|| Error::contract("class head is disabled for this model"))?;
    let hidden = g.matmul(top, head.hidden_weight)?;
    let hidden = g.add(hidden, head.hidden_bias)?;
    let hidden = g.relu(hidden)?;
    let logits = g.matmul(hidden, head.out_weight)?;
    let logits = g.add(logits, head.out_bias)?;
    let width = g.dims(logits)[1];
    let logits = g.reshape(logits, &[batch, groups, width])?;
    g.softmax(logits, 2)
}

/// Sums the per-group class probabilities (dropping "no class") over groups
/// and renormalizes each row; an all-"no class" row becomes uniform.
pub fn combine_class_predictions(g: &mut Graph, per_group: Var) -> Result<Var> {
    let dims = g.dims(per_group).to_vec();
    if dims.len() != 3 || dims[2] < 2 {
        return Err(Error::shape(format!(
            "per-group class predictions must be [B, K, C+1] with C >= 1, got {dims:?}"
        )));
    }
    let classes = g.slice(per_group, 2, 0, dims[2] - 1)?;
    let summed = g.sum_axis(classes, 1)?;
    g.normalize_sum(summed, 1)
}
