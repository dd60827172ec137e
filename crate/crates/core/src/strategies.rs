//! Update rules and the per-dataset training loop.
//!
//! Every rule is a descent step `W <- W - gamma * H` where `H` combines the
//! new-task cross-entropy gradient with rule-specific terms:
//!
//! | rule      | weight direction `H`                                  |
//! |-----------|--------------------------------------------------------|
//! | finetune  | `g`                                                    |
//! | owm       | `g P`                                                  |
//! | awm       | `g R`                                                  |
//! | rawm      | `(1 - eta) g R + eta g_reg`                            |
//! | lwf       | `g + lambda0 g_reg`                                    |
//! | ewc       | `g + ewc_lambda F * (theta - theta*)`                  |
//!
//! `g` is the weight gradient (`out x in`), so input-space projectors act from
//! the right. Biases always take the unprojected mixture of the same terms.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{reg_grad_from_trace, TeacherContext};
use crate::error::{Error, Result};
use crate::matcore::{Matrix, Vector};
use crate::netcore::{backward, forward, GradientSet, Network};
use crate::projector::{
    adaptive_direction, compute_beta, init_projectors, project_gradient, validate_stable, BetaSpec,
    MatrixNorm, ProjectorState,
};
use crate::taskgen::{Dataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Finetune,
    Owm,
    Awm,
    Rawm,
    Lwf,
    Ewc,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Finetune,
        StrategyKind::Owm,
        StrategyKind::Awm,
        StrategyKind::Rawm,
        StrategyKind::Lwf,
        StrategyKind::Ewc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Finetune => "finetune",
            StrategyKind::Owm => "owm",
            StrategyKind::Awm => "awm",
            StrategyKind::Rawm => "rawm",
            StrategyKind::Lwf => "lwf",
            StrategyKind::Ewc => "ewc",
        }
    }

    /// Rules that maintain input projectors.
    pub fn uses_projectors(self) -> bool {
        matches!(self, StrategyKind::Owm | StrategyKind::Awm | StrategyKind::Rawm)
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, StrategyKind::Rawm | StrategyKind::Lwf)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Weight of the distillation term against the projected new-task gradient.
    pub eta: f64,
    /// Scale of the complement term in the adaptive direction.
    pub m: f64,
    pub t_reg: f64,
    /// Learning rate.
    pub gamma: f64,
    pub lambda0: f64,
    pub ewc_lambda: f64,
    pub stable_classes: BTreeSet<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Projector alpha per layer; a single value applies to every layer.
    pub alpha: Vec<f64>,
    pub alpha_decay: f64,
    pub tau_rel: f64,
    pub norm: MatrixNorm,
    /// Skip projector accumulation while training the first dataset.
    pub strict_alg1_p: bool,
    /// Use the projectors captured at the last dataset transition for every
    /// step of the next dataset instead of the live per-batch projectors.
    pub frozen_r: bool,
    /// Keep the first teacher for all later datasets instead of re-snapshotting.
    pub fixed_teacher: bool,
    /// Scale the distillation term by `gamma` like the new-task term.
    pub reg_gamma_scaled: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::Rawm,
            eta: 0.5,
            m: 0.1,
            t_reg: 2.0,
            gamma: 0.05,
            lambda0: 1.0,
            ewc_lambda: 100.0,
            stable_classes: BTreeSet::from([0]),
            epochs: 10,
            batch_size: 16,
            seed: 0,
            alpha: vec![0.1],
            alpha_decay: 1.0,
            tau_rel: 1e-3,
            norm: MatrixNorm::Frobenius,
            strict_alg1_p: false,
            frozen_r: false,
            fixed_teacher: false,
            reg_gamma_scaled: true,
        }
    }
}

impl StrategyConfig {
    /// Hyperparameters as used with the full-size audio classifier:
    /// learning rate 1e-4 and batches of two.
    pub fn audio_scale() -> Self {
        StrategyConfig {
            gamma: 1e-4,
            batch_size: 2,
            ..StrategyConfig::default()
        }
    }

    pub fn with_kind(mut self, kind: StrategyKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0,1], got {}", self.eta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.t_reg > 0.0 && self.t_reg.is_finite()) {
            return bad(format!("t_reg must be positive, got {}", self.t_reg));
        }
        for (name, v) in [("m", self.m), ("lambda0", self.lambda0), ("ewc_lambda", self.ewc_lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad(format!("alpha values must be positive, got {:?}", self.alpha));
        }
        if self.stable_classes.is_empty() {
            return bad("stable_classes must not be empty".into());
        }
        Ok(())
    }

    pub fn alpha_for(&self, layers: usize) -> Result<Vec<f64>> {
        match self.alpha.len() {
            1 => Ok(vec![self.alpha[0]; layers]),
            n if n == layers => Ok(self.alpha.clone()),
            n => Err(Error::Config(format!("{n} alpha values for {layers} layers"))),
        }
    }

    /// Returns a copy with one field replaced, addressed by its config key.
    pub fn with_field(&self, key: &str, value: toml::Value) -> Result<Self> {
        let mut table = toml::Table::try_from(self)
            .map_err(|e| Error::Config(format!("cannot serialize strategy: {e}")))?;
        if !table.contains_key(key) {
            return Err(Error::Config(format!("'{key}' is not a strategy field")));
        }
        table.insert(key.to_string(), value);
        let out: StrategyConfig = table
            .try_into()
            .map_err(|e| Error::Config(format!("invalid value for '{key}': {e}")))?;
        out.validate()?;
        Ok(out)
    }

    pub fn has_field(key: &str) -> bool {
        toml::Table::try_from(StrategyConfig::default())
            .map(|t| t.contains_key(key))
            .unwrap_or(false)
    }
}

/// Anchor weights and accumulated diagonal Fisher information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwcAnchor {
    pub params: Network,
    pub fisher: GradientSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub net: Network,
    pub projectors: ProjectorState,
    pub teacher: Option<TeacherContext>,
    pub ewc_anchor: Option<EwcAnchor>,
    /// Number of datasets trained so far; the next dataset has index `dataset_index + 1`.
    pub dataset_index: usize,
}

impl TrainState {
    pub fn new(net: Network, config: &StrategyConfig) -> Result<Self> {
        config.validate()?;
        validate_stable(&config.stable_classes, net.num_classes())?;
        let alphas = config.alpha_for(net.num_layers())?;
        let projectors = init_projectors(&net.input_dims(), &alphas, config.alpha_decay, config.tau_rel)?;
        Ok(TrainState {
            net,
            projectors,
            teacher: None,
            ewc_anchor: None,
            dataset_index: 0,
        })
    }

    /// Index (1-based) of the dataset currently being trained.
    pub fn current_dataset(&self) -> usize {
        self.dataset_index + 1
    }
}

/// The update a step applied, plus the new-task loss it saw.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub delta: GradientSet,
}

fn descent(grads: &GradientSet, gamma: f64) -> GradientSet {
    grads.scale(-gamma)
}

fn replace_weights(grads: &GradientSet, weights: Vec<Matrix>) -> GradientSet {
    GradientSet {
        weights,
        biases: grads.biases.clone(),
    }
}

fn update_projectors(state: &mut TrainState, means: &[Vector]) -> Result<()> {
    for (l, xbar) in means.iter().enumerate() {
        state.projectors.update_p(l, xbar)?;
    }
    Ok(())
}

/// Gradient with each weight matrix multiplied by the layer's projector.
fn owm_direction(state: &TrainState, config: &StrategyConfig, grads: &GradientSet) -> Result<GradientSet> {
    let weights = grads
        .weights
        .iter()
        .enumerate()
        .map(|(l, g)| project_gradient(g, state.projectors.active(l, config.frozen_r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(replace_weights(grads, weights))
}

/// Gradient with each weight matrix multiplied by the adaptive direction `R`.
fn awm_direction(
    state: &TrainState,
    config: &StrategyConfig,
    grads: &GradientSet,
    labels: &[usize],
) -> Result<GradientSet> {
    let beta = compute_beta(&BetaSpec::from_labels(
        &config.stable_classes,
        labels,
        state.net.num_classes(),
    )?);
    let weights = grads
        .weights
        .iter()
        .enumerate()
        .map(|(l, g)| {
            let p = state.projectors.active(l, config.frozen_r);
            let r = adaptive_direction(p, beta, config.m, state.projectors.tau_rel, config.norm)?;
            project_gradient(g, &r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(replace_weights(grads, weights))
}

fn require_teacher(state: &TrainState) -> Result<&TeacherContext> {
    state
        .teacher
        .as_ref()
        .ok_or_else(|| Error::State("distillation step needs a teacher (only available after the first dataset)".into()))
}

fn require_later_dataset(state: &TrainState, what: &str) -> Result<()> {
    if state.dataset_index == 0 {
        return Err(Error::State(format!("{what} step is only defined after the first dataset")));
    }
    Ok(())
}

/// Computes the update for one batch under `kind`, updating projectors as a
/// side effect where the rule requires it. The network is not modified.
pub fn compute_step(
    kind: StrategyKind,
    state: &mut TrainState,
    config: &StrategyConfig,
    batch: &Matrix,
    labels: &[usize],
) -> Result<StepOutcome> {
    let (_, trace) = forward(&state.net, batch)?;
    let (loss, grads) = backward(&state.net, &trace, labels)?;
    let gamma = config.gamma;
    let delta = match kind {
        StrategyKind::Finetune => descent(&grads, gamma),
        StrategyKind::Owm => {
            require_later_dataset(state, "owm")?;
            update_projectors(state, &trace.mean_inputs)?;
            descent(&owm_direction(state, config, &grads)?, gamma)
        }
        StrategyKind::Awm => {
            require_later_dataset(state, "awm")?;
            update_projectors(state, &trace.mean_inputs)?;
            descent(&awm_direction(state, config, &grads, labels)?, gamma)
        }
        StrategyKind::Rawm => {
            require_later_dataset(state, "rawm")?;
            let teacher = require_teacher(state)?;
            let targets = teacher.soft_labels(batch)?;
            let (_, reg) = reg_grad_from_trace(&state.net, &trace, &targets, config.t_reg)?;
            update_projectors(state, &trace.mean_inputs)?;
            let adaptive = awm_direction(state, config, &grads, labels)?;
            let eta = config.eta;
            if config.reg_gamma_scaled {
                adaptive.combine(-gamma * (1.0 - eta), &reg, -gamma * eta)
            } else {
                adaptive.combine(-gamma * (1.0 - eta), &reg, -eta)
            }
        }
        StrategyKind::Lwf => {
            require_later_dataset(state, "lwf")?;
            let teacher = require_teacher(state)?;
            let targets = teacher.soft_labels(batch)?;
            let (_, reg) = reg_grad_from_trace(&state.net, &trace, &targets, config.t_reg)?;
            grads.combine(-gamma, &reg, -gamma * config.lambda0)
        }
        StrategyKind::Ewc => {
            require_later_dataset(state, "ewc")?;
            let anchor = state
                .ewc_anchor
                .as_ref()
                .ok_or_else(|| Error::State("ewc step needs an anchor".into()))?;
            let penalty = ewc_penalty_grad(&state.net, anchor)?;
            grads.combine(-gamma, &penalty, -gamma * config.ewc_lambda)
        }
    };
    if !delta.is_finite() {
        return Err(Error::Numeric(format!("{kind} update is not finite")));
    }
    Ok(StepOutcome { loss, delta })
}

fn apply(kind: StrategyKind, state: &mut TrainState, config: &StrategyConfig, batch: &Matrix, labels: &[usize]) -> Result<StepOutcome> {
    let out = compute_step(kind, state, config, batch, labels)?;
    state.net.apply_update(&out.delta)?;
    Ok(out)
}

/// Plain gradient descent on the new-task loss.
pub fn step_finetune(state: &mut TrainState, config: &StrategyConfig, batch: &Matrix, labels: &[usize]) -> Result<StepOutcome> {
    apply(StrategyKind::Finetune, state, config, batch, labels)
}

/// Projector update, then descent along `g P`.
pub fn step_owm(state: &mut TrainState, config: &StrategyConfig, batch: &Matrix, labels: &[usize]) -> Result<StepOutcome> {
    apply(StrategyKind::Owm, state, config, batch, labels)
}

/// Projector update, per-batch class ratio, then descent along `g R`.
pub fn step_awm(state: &mut TrainState, config: &StrategyConfig, batch: &Matrix, labels: &[usize]) -> Result<StepOutcome> {
    apply(StrategyKind::Awm, state, config, batch, labels)
}

/// Adaptive direction mixed with the distillation gradient by `eta`.
pub fn step_rawm(state: &mut TrainState, config: &StrategyConfig, batch: &Matrix, labels: &[usize]) -> Result<StepOutcome> {
    apply(StrategyKind::Rawm, state, config, batch, labels)
}

/// New-task loss plus `lambda0` times the soft-label loss against the teacher.
pub fn step_lwf(state: &mut TrainState, config: &StrategyConfig, batch: &Matrix, labels: &[usize]) -> Result<StepOutcome> {
    apply(StrategyKind::Lwf, state, config, batch, labels)
}

/// New-task loss plus the quadratic Fisher-weighted anchor penalty.
pub fn step_ewc(state: &mut TrainState, config: &StrategyConfig, batch: &Matrix, labels: &[usize]) -> Result<StepOutcome> {
    apply(StrategyKind::Ewc, state, config, batch, labels)
}

/// Gradient of `0.5 * sum F (theta - theta*)^2`.
pub fn ewc_penalty_grad(net: &Network, anchor: &EwcAnchor) -> Result<GradientSet> {
    anchor.fisher.check_matches(net)?;
    let mut out = GradientSet::zeros_like(net);
    for (l, layer) in net.layers().iter().enumerate() {
        let star = &anchor.params.layers()[l];
        let w: Vec<f64> = layer
            .weights
            .data()
            .iter()
            .zip(star.weights.data())
            .zip(anchor.fisher.weights[l].data())
            .map(|((t, s), f)| f * (t - s))
            .collect();
        out.weights[l] = Matrix::new(layer.weights.rows(), layer.weights.cols(), w)?;
        let b: Vec<f64> = layer
            .bias
            .as_slice()
            .iter()
            .zip(star.bias.as_slice())
            .zip(anchor.fisher.biases[l].as_slice())
            .map(|((t, s), f)| f * (t - s))
            .collect();
        out.biases[l] = Vector::new(b)?;
    }
    Ok(out)
}

pub fn ewc_penalty(net: &Network, anchor: &EwcAnchor) -> f64 {
    let theta = net.flat_params();
    let star = anchor.params.flat_params();
    let fisher = anchor.fisher.flat();
    0.5 * theta
        .iter()
        .zip(&star)
        .zip(&fisher)
        .map(|((t, s), f)| f * (t - s) * (t - s))
        .sum::<f64>()
}

/// Diagonal empirical Fisher: mean over examples of squared per-example
/// log-likelihood gradients at the current weights.
pub fn diagonal_fisher(net: &Network, features: &Matrix, labels: &[usize]) -> Result<GradientSet> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::Input("Fisher estimate needs at least one example".into()));
    }
    let mut acc = GradientSet::zeros_like(net);
    for i in 0..n {
        let x = features.select_rows(&[i]);
        let (_, trace) = forward(net, &x)?;
        let (_, g) = backward(net, &trace, &labels[i..=i])?;
        acc = acc.combine(1.0, &g.map(|v| v * v), 1.0);
    }
    Ok(acc.scale(1.0 / n as f64))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the batch order of one epoch of one dataset.
pub fn epoch_seed(seed: u64, dataset: usize, epoch: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ dataset as u64) ^ epoch as u64)
}

/// Trains one dataset of the stream and performs the transition bookkeeping
/// for the next one. Returns the mean new-task loss of every epoch.
///
/// The first dataset always uses plain descent; projector rules still
/// accumulate their projectors there unless `strict_alg1_p` is set.
pub fn train_dataset(state: &mut TrainState, dataset: &Dataset, config: &StrategyConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.dim() != state.net.input_dim() {
        return Err(Error::Shape(format!(
            "dataset '{}' has {} features, network expects {}",
            dataset.name(),
            dataset.dim(),
            state.net.input_dim()
        )));
    }
    if dataset.classes() > state.net.num_classes() {
        return Err(Error::Shape(format!(
            "dataset '{}' has {} classes, network outputs {}",
            dataset.name(),
            dataset.classes(),
            state.net.num_classes()
        )));
    }
    let first = state.dataset_index == 0;
    if !first && config.kind.uses_teacher() && state.teacher.is_none() {
        return Err(Error::State(format!("{} needs a teacher for dataset {}", config.kind, state.current_dataset())));
    }
    if !first && config.kind == StrategyKind::Ewc && state.ewc_anchor.is_none() {
        return Err(Error::State("ewc needs an anchor after the first dataset".into()));
    }

    let (features, labels) = dataset.split_data(Split::Train);
    if labels.is_empty() {
        return Err(Error::Input(format!("dataset '{}' has no training rows", dataset.name())));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, state.current_dataset(), epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = if first {
                if config.kind.uses_projectors() && !config.strict_alg1_p {
                    let (_, trace) = forward(&state.net, &x)?;
                    update_projectors(state, &trace.mean_inputs)?;
                }
                step_finetune(state, config, &x, &y)?
            } else {
                apply(config.kind, state, config, &x, &y)?
            };
            total += out.loss * chunk.len() as f64;
        }
        epoch_losses.push(total / labels.len() as f64);
    }

    finish_dataset(state, config, &features, &labels)?;
    Ok(epoch_losses)
}

/// Transition to the next dataset: teacher snapshot, EWC anchor, alpha decay
/// and (for the frozen-direction mode) projector capture.
fn finish_dataset(state: &mut TrainState, config: &StrategyConfig, features: &Matrix, labels: &[usize]) -> Result<()> {
    if config.kind.uses_teacher() && !(config.fixed_teacher && state.teacher.is_some()) {
        state.teacher = Some(TeacherContext::new(state.net.snapshot(), config.t_reg)?);
    }
    if config.kind == StrategyKind::Ewc {
        let fisher = diagonal_fisher(&state.net, features, labels)?;
        // Online accumulation: Fisher terms add up, the anchor moves to the latest weights.
        let fisher = match &state.ewc_anchor {
            Some(prev) => prev.fisher.combine(1.0, &fisher, 1.0),
            None => fisher,
        };
        state.ewc_anchor = Some(EwcAnchor {
            params: state.net.snapshot(),
            fisher,
        });
    }
    if config.kind.uses_projectors() {
        state.projectors.decay_alpha();
        if config.frozen_r {
            state.projectors.freeze();
        }
    }
    state.dataset_index += 1;
    Ok(())
}
