//! The assembled model: configuration, weights, normalization statistics,
//! and convenience entry points for training and evaluation passes.

use crate::autodiff::{Graph, NormMode, Tensor, NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::ladder::{BoundParams, LadderConfig, NormStats, TaggerParams};
use crate::rng::Rng;
use crate::tag::{
    self, ClassIterations, Corruption, EvalNoise, GroupState, MechanismConfig, UnrollOptions,
    Unrolled,
};

/// Initial group variance `v`.
pub const INITIAL_VARIANCE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub corruption: Corruption,
    pub ladder: LadderConfig,
    /// Value every `z⁰` starts from (the data mean).
    pub data_mean: f64,
    /// Groups and iterations used for training; evaluation may override both.
    pub groups: usize,
    pub iterations: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.corruption.validate()?;
        self.ladder.validate()?;
        if self.input_size == 0 || self.groups == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "input size, groups and iterations must all be positive".into(),
            ));
        }
        if self.corruption.is_binary() && !(self.data_mean > 0.0 && self.data_mean < 1.0) {
            return Err(Error::Config(format!(
                "binary inputs need a data mean in (0, 1), got {}",
                self.data_mean
            )));
        }
        Ok(())
    }

    pub fn mechanism(&self) -> MechanismConfig {
        MechanismConfig {
            input_size: self.input_size,
            corruption: self.corruption,
            ladder: self.ladder.clone(),
        }
    }
}

/// Per-pass switches; see [`Tagger::forward`].
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub groups: usize,
    pub iterations: usize,
    pub training: bool,
    pub eval_noise: EvalNoise,
    pub ablate: Option<usize>,
    pub class_iterations: ClassIterations,
    /// Running-statistics momentum for training passes.
    pub norm_momentum: f64,
}

/// Values recorded by one pass.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `T + 1` states, starting with the initialization.
    pub states: Vec<GroupState>,
    /// `q_i(x)` per element, `[B, N]`, for `i = 1..=T`.
    pub q: Vec<Tensor>,
    /// Per-iteration mixture cost `C_i` (mean over batch and elements).
    pub costs: Vec<f64>,
    /// `Σ_i C_i`.
    pub total_cost: f64,
    /// Mask logits of the final iteration (after any ablation).
    pub final_logits: Tensor,
    /// Combined class predictions `[B, C]` from the last iteration.
    pub class_probs: Option<Tensor>,
}

impl Trajectory {
    pub fn last(&self) -> &GroupState {
        self.states.last().expect("non-empty")
    }
}

/// Expected input under the group mixture: `Σ_k m_k E[x | g_k]`, `[B, N]`.
pub fn reconstruction(state: &GroupState) -> Tensor {
    let d = state.z.dims();
    let (b, k, n) = (d[0], d[1], d[2]);
    Tensor::from_fn(&[b, n], |i| {
        let (bi, j) = (i / n, i % n);
        (0..k)
            .map(|kk| {
                let e = (bi * k + kk) * n + j;
                state.m.data()[e] * state.z.data()[e]
            })
            .sum()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tagger {
    pub config: ModelConfig,
    pub params: TaggerParams,
    pub stats: NormStats,
}

impl Tagger {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let z_bias = if config.corruption.is_binary() {
            (config.data_mean / (1.0 - config.data_mean)).ln()
        } else {
            config.data_mean
        };
        let params = TaggerParams::init(
            &config.ladder,
            config.input_size,
            z_bias,
            INITIAL_VARIANCE,
            rng,
        )?;
        let stats = NormStats::new(&config.ladder);
        Ok(Tagger {
            config,
            params,
            stats,
        })
    }

    /// Options for a training pass with the configured K and T.
    pub fn training_options(&self) -> RunOptions {
        RunOptions {
            groups: self.config.groups,
            iterations: self.config.iterations,
            training: true,
            eval_noise: EvalNoise::Keep,
            ablate: None,
            class_iterations: ClassIterations::Last,
            norm_momentum: NORM_MOMENTUM,
        }
    }

    /// Options for an evaluation pass with `groups` and `iterations`.
    pub fn eval_options(&self, groups: usize, iterations: usize) -> RunOptions {
        RunOptions {
            groups,
            iterations,
            training: false,
            eval_noise: EvalNoise::Keep,
            ablate: None,
            class_iterations: ClassIterations::Last,
            norm_momentum: NORM_MOMENTUM,
        }
    }

    /// Records one pass over the clean batch `x` (`[B, N]`) into `g`.
    ///
    /// Training passes corrupt `x` once and update batch-norm statistics;
    /// evaluation passes feed the clean input as `x̃`. The same `rng` draws
    /// the corruption and then `m⁰`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: &Tensor,
        rng: &mut Rng,
        opts: &RunOptions,
    ) -> Result<(BoundParams, Unrolled)> {
        let x_tilde = if opts.training {
            tag::corrupt(x, &self.config.corruption, rng)?
        } else {
            x.clone()
        };
        let init = self.init_state(x, opts.groups, rng)?;
        self.forward_from(g, x, &x_tilde, &init, opts)
    }

    pub fn init_state(&self, x: &Tensor, groups: usize, rng: &mut Rng) -> Result<GroupState> {
        if x.dims().len() != 2 || x.dims()[1] != self.config.input_size {
            return Err(Error::shape(format!(
                "input {:?} does not have {} elements per example",
                x.dims(),
                self.config.input_size
            )));
        }
        tag::init_state(x.dims()[0], groups, self.config.input_size, self.config.data_mean, rng)
    }

    /// Like [`Tagger::forward`] with explicit `x̃` and initial state.
    pub fn forward_from(
        &mut self,
        g: &mut Graph,
        x: &Tensor,
        x_tilde: &Tensor,
        init: &GroupState,
        opts: &RunOptions,
    ) -> Result<(BoundParams, Unrolled)> {
        let Tagger {
            config,
            params,
            stats,
        } = self;
        unroll_model(config, params, stats, g, x, x_tilde, init, opts)
    }

    /// Re-estimates the batch-norm running statistics with the current
    /// weights: each training-mode pass over `batches` contributes equally,
    /// per iteration slot. Moving averages taken while the weights were
    /// still changing lag behind them; this replaces them. A no-op for
    /// layer normalization.
    pub fn recalibrate_norm(&mut self, batches: &[Tensor], rng: &mut Rng) -> Result<()> {
        if self.config.ladder.norm != NormMode::Batch || batches.is_empty() {
            return Ok(());
        }
        let mut stats = NormStats::new(&self.config.ladder);
        let mut opts = self.training_options();
        for (i, x) in batches.iter().enumerate() {
            // Momentum i/(i+1) keeps a running plain average.
            opts.norm_momentum = i as f64 / (i + 1) as f64;
            let x_tilde = tag::corrupt(x, &self.config.corruption, rng)?;
            let init = self.init_state(x, opts.groups, rng)?;
            let mut g = Graph::new();
            unroll_model(&self.config, &self.params, &mut stats, &mut g, x, &x_tilde, &init, &opts)?;
        }
        self.stats = stats;
        Ok(())
    }

    /// An evaluation pass that leaves the model untouched.
    pub fn run(&self, x: &Tensor, rng: &mut Rng, opts: &RunOptions) -> Result<Trajectory> {
        let x_tilde = if opts.training {
            tag::corrupt(x, &self.config.corruption, rng)?
        } else {
            x.clone()
        };
        let init = self.init_state(x, opts.groups, rng)?;
        self.run_from(x, &x_tilde, &init, opts)
    }

    pub fn run_from(
        &self,
        x: &Tensor,
        x_tilde: &Tensor,
        init: &GroupState,
        opts: &RunOptions,
    ) -> Result<Trajectory> {
        let mut stats = self.stats.clone();
        let mut g = Graph::new();
        let (_, unrolled) =
            unroll_model(&self.config, &self.params, &mut stats, &mut g, x, x_tilde, init, opts)?;
        Ok(collect(&g, init, &unrolled))
    }
}

#[allow(clippy::too_many_arguments)]
fn unroll_model(
    config: &ModelConfig,
    params: &TaggerParams,
    stats: &mut NormStats,
    g: &mut Graph,
    x: &Tensor,
    x_tilde: &Tensor,
    init: &GroupState,
    opts: &RunOptions,
) -> Result<(BoundParams, Unrolled)> {
    let bound = params.bind(g);
    let unroll_opts = UnrollOptions {
        iterations: opts.iterations,
        training: opts.training,
        eval_noise: opts.eval_noise,
        ablate: opts.ablate,
        class_iterations: opts.class_iterations,
        norm_momentum: opts.norm_momentum,
    };
    let unrolled = tag::unroll(
        g,
        &config.mechanism(),
        &bound,
        stats,
        x,
        x_tilde,
        init,
        &unroll_opts,
    )?;
    Ok((bound, unrolled))
}

/// Copies the values of an unrolled pass out of its graph.
pub fn collect(g: &Graph, init: &GroupState, unrolled: &Unrolled) -> Trajectory {
    let mut states = vec![init.clone()];
    let mut q = Vec::new();
    let mut costs = Vec::new();
    for (i, it) in unrolled.iterations.iter().enumerate() {
        states.push(GroupState {
            z: g.value(it.z).clone(),
            m: g.value(it.m).clone(),
            iteration: i + 1,
        });
        q.push(g.value(it.log_q).map(f64::exp));
        costs.push(g.value(it.cost).data()[0]);
    }
    let last = unrolled.iterations.last().expect("at least one iteration");
    Trajectory {
        states,
        q,
        costs,
        total_cost: g.value(unrolled.total_cost).data()[0],
        final_logits: g.value(last.m_logits).clone(),
        class_probs: last.class_probs.map(|c| g.value(c).clone()),
    }
}
