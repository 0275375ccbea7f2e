//! The iterative grouping mechanism: corruption, state initialization,
//! per-group likelihoods of the corrupted input, the modeling-error signal
//! δz, the likelihood ratio L(m), the mixture cost on the clean input, and
//! the unrolled T-iteration loop.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::ladder::{self, BoundParams, LadderConfig, MappingCtx, NormStats};
use crate::rng::Rng;

/// Logit assigned to an ablated group before the final softmax.
pub const ABLATION_LOGIT: f64 = -1e9;

/// Smallest magnitude allowed for the binary δz denominator.
pub const DENOMINATOR_CLAMP: f64 = 1e-9;

/// Corruption applied to the clean input during training; also fixes the
/// input type (binary for bit flips, continuous for Gaussian noise).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Corruption {
    Gaussian { sigma: f64 },
    BitFlip { beta: f64 },
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Corruption::Gaussian { sigma } if !(sigma > 0.0) => Err(Error::Config(format!(
                "gaussian corruption needs sigma > 0, got {sigma}"
            ))),
            Corruption::BitFlip { beta } if !(beta > 0.0 && beta < 0.5) => Err(Error::Config(
                format!("bit-flip corruption needs 0 < beta < 0.5, got {beta}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, Corruption::BitFlip { .. })
    }

    /// The noise level (σ or β).
    pub fn level(&self) -> f64 {
        match *self {
            Corruption::Gaussian { sigma } => sigma,
            Corruption::BitFlip { beta } => beta,
        }
    }
}

/// Draws `x̃` from `x`: additive Gaussian noise, or XOR with Bernoulli(β).
pub fn corrupt(x: &Tensor, spec: &Corruption, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    match *spec {
        Corruption::Gaussian { sigma } => {
            let data = x
                .data()
                .iter()
                .map(|&v| {
                    let n: f64 = StandardNormal.sample(rng);
                    v + sigma * n
                })
                .collect();
            Tensor::new(x.dims(), data)
        }
        Corruption::BitFlip { beta } => {
            if x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::domain("bit-flip corruption needs inputs in {0, 1}"));
            }
            let data = x
                .data()
                .iter()
                .map(|&v| if rng.gen::<f64>() < beta { 1.0 - v } else { v })
                .collect();
            Tensor::new(x.dims(), data)
        }
    }
}

/// Per-group estimates at one iteration. `z` holds Gaussian means for
/// continuous inputs and Bernoulli probabilities (post-sigmoid) for binary
/// inputs; `m` holds the group assignment posteriors. Both are `[B, K, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupState {
    pub z: Tensor,
    pub m: Tensor,
    pub iteration: usize,
}

/// `m⁰ = softmax_K(N(0, I))` and `z⁰ = data_mean` everywhere.
pub fn init_state(
    batch: usize,
    groups: usize,
    n: usize,
    data_mean: f64,
    rng: &mut Rng,
) -> Result<GroupState> {
    if groups == 0 {
        return Err(Error::Config("need at least one group".into()));
    }
    let logits = Tensor::from_fn(&[batch, groups, n], |_| StandardNormal.sample(rng));
    let mut g = Graph::new();
    let l = g.constant(logits);
    let m = g.softmax(l, 1)?;
    Ok(GroupState {
        z: Tensor::full(&[batch, groups, n], data_mean),
        m: g.value(m).clone(),
        iteration: 0,
    })
}

/// Largest deviation of `m` (`[B, K, N]`) from the probability simplex over
/// groups: negative entries or column sums away from one.
pub fn simplex_violation(m: &Tensor) -> f64 {
    let d = m.dims();
    let (b, k, n) = (d[0], d[1], d[2]);
    let v = m.data();
    let mut worst: f64 = 0.0;
    for bi in 0..b {
        for j in 0..n {
            let mut sum = 0.0;
            for ki in 0..k {
                let x = v[(bi * k + ki) * n + j];
                if x < 0.0 || !x.is_finite() {
                    return f64::INFINITY;
                }
                sum += x;
            }
            worst = worst.max((sum - 1.0).abs());
        }
    }
    worst
}

/// `ẑ_k = N(x̃; z_k, (v + σ²) I)` elementwise; `total_var` is the scalar
/// `v + σ²`.
pub fn group_likelihood_continuous(g: &mut Graph, x_tilde: Var, z: Var, total_var: Var) -> Result<Var> {
    g.gauss_pdf(x_tilde, z, total_var)
}

/// Binary likelihood of the corrupted input: `ξ_k = z_k (1 − 2β) + β` and
/// `ẑ_k = x̃ ξ_k + (1 − x̃)(1 − ξ_k)`. Returns `(ξ, ẑ)`.
pub fn group_likelihood_binary(g: &mut Graph, x_tilde: Var, z_prob: Var, beta: f64) -> Result<(Var, Var)> {
    let xi = g.scale(z_prob, 1.0 - 2.0 * beta);
    let xi = g.offset(xi, beta);
    // ẑ = (1 − x̃) + ξ (2x̃ − 1)
    let two_x_minus_one = {
        let t = g.value(x_tilde).map(|x| 2.0 * x - 1.0);
        g.constant(t)
    };
    let one_minus_x = {
        let t = g.value(x_tilde).map(|x| 1.0 - x);
        g.constant(t)
    };
    let signed = g.mul(xi, two_x_minus_one)?;
    let zhat = g.add(signed, one_minus_x)?;
    Ok((xi, zhat))
}

/// `δz_k = (x̃ − z_k) m_k ẑ_k`.
pub fn delta_z_continuous(g: &mut Graph, x_tilde: Var, z: Var, m: Var, zhat: Var) -> Result<Var> {
    let diff = g.sub(x_tilde, z)?;
    let weighted = g.mul(diff, m)?;
    g.mul(weighted, zhat)
}

/// `δz_k = m_k / (Σ_h ξ_h m_h − 1 + x̃)`, with the denominator kept at least
/// [`DENOMINATOR_CLAMP`] in magnitude (sign preserved).
pub fn delta_z_binary(g: &mut Graph, x_tilde: Var, m: Var, xi: Var) -> Result<Var> {
    let dims = g.dims(m).to_vec();
    let prod = g.mul(xi, m)?;
    let sum = g.sum_axis(prod, 1)?;
    let sum = g.reshape(sum, &[dims[0], 1, dims[2]])?;
    let denom = g.add(sum, x_tilde)?;
    let denom = g.offset(denom, -1.0);
    let denom = g.clamp_abs_min(denom, DENOMINATOR_CLAMP);
    g.div(m, denom)
}

/// `L(m_k) = ẑ_k / Σ_h ẑ_h` over the group axis; columns where every group
/// has zero likelihood become uniform.
pub fn likelihood_ratio(g: &mut Graph, zhat: Var) -> Result<Var> {
    g.normalize_sum(zhat, 1)
}

/// Input type of the mixture cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CostMode {
    /// Gaussian groups with the given variance node (shape `[1]`).
    Continuous { v: Var },
    /// Bernoulli groups; `z` must be the pre-sigmoid logits.
    Binary,
}

/// Per-element log-likelihood `log q(x) = log Σ_k q(x | g_k) m_k` of the
/// clean input `x` (`[B, 1, N]`), shape `[B, N]`. `log_m` is `log m`.
pub fn mixture_log_likelihood(g: &mut Graph, x: Var, z: Var, log_m: Var, mode: CostMode) -> Result<Var> {
    let group_ll = match mode {
        CostMode::Continuous { v } => g.gauss_log_pdf(x, z, v)?,
        CostMode::Binary => {
            let on = g.log_sigmoid(z)?;
            let neg_z = g.neg(z)?;
            let off = g.log_sigmoid(neg_z)?;
            let one_minus_x = {
                let t = g.value(x).map(|v| 1.0 - v);
                g.constant(t)
            };
            let a = g.mul(on, x)?;
            let b = g.mul(off, one_minus_x)?;
            g.add(a, b)?
        }
    };
    let joint = g.add(group_ll, log_m)?;
    g.logsumexp(joint, 1)
}

/// `C_i`: negative log-likelihood of the clean input under the group
/// mixture, averaged over batch and elements.
pub fn mixture_cost(g: &mut Graph, x: Var, z: Var, log_m: Var, mode: CostMode) -> Result<Var> {
    let ll = mixture_log_likelihood(g, x, z, log_m, mode)?;
    let mean = g.mean_all(ll);
    g.neg(mean)
}

/// Sets group `k`'s logits to [`ABLATION_LOGIT`] and applies the softmax
/// over groups, so the remaining groups renormalize among themselves.
pub fn ablate_group(m_logits: &Tensor, k: usize) -> Result<Tensor> {
    let d = m_logits.dims();
    if d.len() != 3 || k >= d[1] {
        return Err(Error::contract(format!(
            "cannot ablate group {k} of logits shaped {d:?}"
        )));
    }
    let mut g = Graph::new();
    let l = g.constant(ablated_logits(m_logits, k));
    let m = g.softmax(l, 1)?;
    Ok(g.value(m).clone())
}

fn ablated_logits(m_logits: &Tensor, k: usize) -> Tensor {
    let d = m_logits.dims();
    let (groups, n) = (d[1], d[2]);
    let mut out = m_logits.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if (i / n) % groups == k {
            *v = ABLATION_LOGIT;
        }
    }
    out
}

/// How likelihood terms treat the noise level when the input is not corrupted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalNoise {
    /// Keep `v + σ²` (or β) exactly as during training.
    #[default]
    Keep,
    /// Drop σ (or β) from the likelihood terms.
    Zero,
}

/// Static description of the model the loop drives.
#[derive(Clone, Debug, PartialEq)]
pub struct MechanismConfig {
    pub input_size: usize,
    pub corruption: Corruption,
    pub ladder: LadderConfig,
}

#[derive(Clone, Debug)]
pub struct UnrollOptions {
    pub iterations: usize,
    pub training: bool,
    pub eval_noise: EvalNoise,
    /// Group whose logits are suppressed at the last iteration.
    pub ablate: Option<usize>,
    /// Which iterations feed the class head (none when the head is absent).
    pub class_iterations: ClassIterations,
    /// Running-statistics momentum for training passes.
    pub norm_momentum: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassIterations {
    #[default]
    Last,
    All,
}

/// Graph handles for one iteration's outputs.
#[derive(Clone, Debug)]
pub struct IterationVars {
    /// Network-facing reconstruction (probabilities for binary inputs).
    pub z: Var,
    /// Pre-activation reconstruction (logits for binary inputs).
    pub z_pre: Var,
    pub m_logits: Var,
    pub m: Var,
    /// Per-element mixture log-likelihood of the clean input, `[B, N]`.
    pub log_q: Var,
    pub cost: Var,
    /// Combined class prediction `[B, C]` when the head ran on this iteration.
    pub class_probs: Option<Var>,
}

/// The recorded unrolled computation.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub iterations: Vec<IterationVars>,
    /// `Σ_i C_i`.
    pub total_cost: Var,
    pub variance: Var,
}

/// Runs `iterations` steps of the grouping loop from `init`.
///
/// `x` is the clean input and only enters the per-iteration costs; every
/// network input is derived from `x_tilde`. Both are `[B, N]`.
#[allow(clippy::too_many_arguments)]
pub fn unroll(
    g: &mut Graph,
    config: &MechanismConfig,
    params: &BoundParams,
    stats: &mut NormStats,
    x: &Tensor,
    x_tilde: &Tensor,
    init: &GroupState,
    opts: &UnrollOptions,
) -> Result<Unrolled> {
    let n = config.input_size;
    let d = init.z.dims().to_vec();
    if d.len() != 3 || d[2] != n || init.m.dims() != d.as_slice() {
        return Err(Error::shape(format!(
            "initial state {:?} does not match input size {n}",
            init.z.dims()
        )));
    }
    let (batch, groups) = (d[0], d[1]);
    if x.dims() != [batch, n] || x_tilde.dims() != [batch, n] {
        return Err(Error::shape(format!(
            "inputs {:?}/{:?} do not match [{batch}, {n}]",
            x.dims(),
            x_tilde.dims()
        )));
    }
    if opts.iterations == 0 {
        return Err(Error::Config("need at least one iteration".into()));
    }
    if let Some(k) = opts.ablate {
        if k >= groups {
            return Err(Error::contract(format!("ablated group {k} of {groups}")));
        }
    }
    let binary = config.corruption.is_binary();
    let noise = match opts.eval_noise {
        EvalNoise::Zero if !opts.training => 0.0,
        _ => config.corruption.level(),
    };

    let xv = g.constant(x.clone().reshape(&[batch, 1, n])?);
    let xt = g.constant(x_tilde.clone().reshape(&[batch, 1, n])?);
    let v = g.exp(params.log_v)?;
    let total_var = g.offset(v, noise * noise);

    let mut z = g.constant(init.z.clone());
    let mut m = g.constant(init.m.clone());
    let mut out = Vec::with_capacity(opts.iterations);
    let mut ctx = MappingCtx {
        config: &config.ladder,
        stats,
        training: opts.training,
        iteration: 0,
        momentum: opts.norm_momentum,
    };
    let class_enabled = params.class_head.is_some();

    for i in 0..opts.iterations {
        ctx.iteration = i;
        let (zhat, dz) = if binary {
            let (xi, zhat) = group_likelihood_binary(g, xt, z, noise)?;
            (zhat, delta_z_binary(g, xt, m, xi)?)
        } else {
            let zhat = group_likelihood_continuous(g, xt, z, total_var)?;
            (zhat, delta_z_continuous(g, xt, z, m, zhat)?)
        };
        let ratio = likelihood_ratio(g, zhat)?;
        let h = ladder::input_projection(g, params, &mut ctx, [z, m, dz, ratio])?;
        let mapped = ladder::ladder_forward(g, params, &mut ctx, h)?;
        let (z_pre, mut m_logits) = ladder::output_projection(g, params, mapped.u, batch, groups)?;

        let last = i + 1 == opts.iterations;
        if let (true, Some(k)) = (last, opts.ablate) {
            let keep = Tensor::from_fn(&[1, groups, 1], |kk| if kk == k { 0.0 } else { 1.0 });
            let fill = Tensor::from_fn(&[1, groups, 1], |kk| if kk == k { ABLATION_LOGIT } else { 0.0 });
            let keep = g.constant(keep);
            let fill = g.constant(fill);
            let kept = g.mul(m_logits, keep)?;
            m_logits = g.add(kept, fill)?;
        }
        let m_next = g.softmax(m_logits, 1)?;
        let log_m = g.log_softmax(m_logits, 1)?;
        // Non-finite masks are reported as numeric errors by the caller.
        debug_assert!(
            !g.value(m_next).all_finite() || simplex_violation(g.value(m_next)) <= 1e-6,
            "group assignments left the simplex at iteration {}",
            i + 1
        );
        let z_next = if binary { g.sigmoid(z_pre)? } else { z_pre };
        let mode = if binary {
            CostMode::Binary
        } else {
            CostMode::Continuous { v }
        };
        let log_q = mixture_log_likelihood(g, xv, z_pre, log_m, mode)?;
        let mean = g.mean_all(log_q);
        let cost = g.neg(mean)?;

        let class_probs = if class_enabled
            && (last || opts.class_iterations == ClassIterations::All)
        {
            let per_group = ladder::class_head(g, params, mapped.top, batch, groups)?;
            Some(ladder::combine_class_predictions(g, per_group)?)
        } else {
            None
        };

        out.push(IterationVars {
            z: z_next,
            z_pre,
            m_logits,
            m: m_next,
            log_q,
            cost,
            class_probs,
        });
        z = z_next;
        m = m_next;
    }

    let mut total = out[0].cost;
    for it in &out[1..] {
        total = g.add(total, it.cost)?;
    }
    Ok(Unrolled {
        iterations: out,
        total_cost: total,
        variance: v,
    })
}
