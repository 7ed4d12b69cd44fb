//! Softmax-linear classifiers over one-hot encoded world features, a
//! deterministic full-batch gradient trainer, and the ensembling objectives
//! used for debiased training.
//!
//! Everything here is exact and reproducible: models initialize at zero,
//! training is full-batch gradient descent with a loss-change stopping rule,
//! and the bias expert is frozen behind [`BiasExpert`] so no gradient can
//! reach it. Each training objective exposes `value` / `value_and_grad` on a
//! flat parameter vector, which is what both the trainer and the
//! finite-difference gradient checks consume.

use serde::{Deserialize, Serialize};

use crate::prob::{cross_entropy, softmax_slice, Dataset, LogitVector, ProbVector, Sample};
use crate::world::DiscreteWorld;
use crate::{Error, Result, PROB_FLOOR};

/// Which feature blocks a model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    BiasOnly,
    SignalOnly,
    Full,
}

/// Encodes a [`Sample`] as a concatenation of one-hot blocks over the
/// selected feature factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureEncoder {
    mode: EncoderMode,
    num_signals: usize,
    num_biases: usize,
}

/// Active one-hot positions for one sample (at most one per block).
#[derive(Debug, Clone, Copy)]
pub struct ActiveFeatures {
    idx: [usize; 2],
    n: usize,
}

impl ActiveFeatures {
    pub fn as_slice(&self) -> &[usize] {
        &self.idx[..self.n]
    }
}

impl FeatureEncoder {
    pub fn new(mode: EncoderMode, world: &DiscreteWorld) -> Self {
        Self {
            mode,
            num_signals: world.num_signals(),
            num_biases: world.num_biases(),
        }
    }

    pub fn with_dims(mode: EncoderMode, num_signals: usize, num_biases: usize) -> Self {
        Self {
            mode,
            num_signals,
            num_biases,
        }
    }

    pub fn mode(&self) -> EncoderMode {
        self.mode
    }

    /// Encoded dimension; fixed per mode.
    pub fn dim(&self) -> usize {
        match self.mode {
            EncoderMode::BiasOnly => self.num_biases,
            EncoderMode::SignalOnly => self.num_signals,
            EncoderMode::Full => self.num_signals + self.num_biases,
        }
    }

    /// Dense one-hot encoding.
    pub fn encode(&self, sample: &Sample) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for &j in self.active(sample).as_slice() {
            out[j] = 1.0;
        }
        out
    }

    /// Indices of the 1-entries; the cheap path used by training loops.
    pub fn active(&self, sample: &Sample) -> ActiveFeatures {
        match self.mode {
            EncoderMode::BiasOnly => ActiveFeatures {
                idx: [sample.bias_id, 0],
                n: 1,
            },
            EncoderMode::SignalOnly => ActiveFeatures {
                idx: [sample.signal_id, 0],
                n: 1,
            },
            EncoderMode::Full => ActiveFeatures {
                idx: [sample.signal_id, self.num_signals + sample.bias_id],
                n: 2,
            },
        }
    }
}

/// Linear-logits classifier: `z = W phi(x) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLinearModel {
    k: usize,
    d: usize,
    /// Row-major `k x d`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl SoftmaxLinearModel {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            k,
            d,
            weights: vec![0.0; k * d],
            bias: vec![0.0; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.weights[class * self.d + feature]
    }

    pub fn bias_term(&self, class: usize) -> f64 {
        self.bias[class]
    }

    fn logits_active(&self, active: &ActiveFeatures) -> Vec<f64> {
        let mut z = self.bias.clone();
        for &j in active.as_slice() {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += self.weights[c * self.d + j];
            }
        }
        z
    }

    pub fn predict_logits(&self, encoder: &FeatureEncoder, sample: &Sample) -> Result<LogitVector> {
        if encoder.dim() != self.d {
            return Err(Error::Domain(format!(
                "encoder dimension {} does not match model dimension {}",
                encoder.dim(),
                self.d
            )));
        }
        LogitVector::new(self.logits_active(&encoder.active(sample)))
    }

    pub fn predict(&self, encoder: &FeatureEncoder, sample: &Sample) -> Result<ProbVector> {
        Ok(softmax_slice(self.predict_logits(encoder, sample)?.entries()))
    }

    fn from_flat(k: usize, d: usize, params: &[f64]) -> Self {
        Self {
            k,
            d,
            weights: params[..k * d].to_vec(),
            bias: params[k * d..k * d + k].to_vec(),
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.weights.clone();
        flat.extend_from_slice(&self.bias);
        flat
    }
}

/// Checkpoint schema `{mode, K, D, weights, bias}`; weights are row-major
/// `K x D` nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub mode: EncoderMode,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn new(model: &SoftmaxLinearModel, mode: EncoderMode) -> Self {
        Self {
            mode,
            k: model.k,
            d: model.d,
            weights: (0..model.k)
                .map(|c| model.weights[c * model.d..(c + 1) * model.d].to_vec())
                .collect(),
            bias: model.bias.clone(),
        }
    }

    /// Validate and rebuild the model; the encoder is reconstructed by the
    /// caller from the world this checkpoint belongs to.
    pub fn into_model(self) -> Result<SoftmaxLinearModel> {
        if self.k < 2 {
            return Err(Error::Construction(format!("checkpoint needs K >= 2, got {}", self.k)));
        }
        if self.d == 0 {
            return Err(Error::Construction("checkpoint needs D >= 1".into()));
        }
        self.k
            .checked_mul(self.d)
            .filter(|&n| n <= 16_000_000)
            .ok_or_else(|| Error::Construction("checkpoint dimensions are implausibly large".into()))?;
        if self.weights.len() != self.k || self.bias.len() != self.k {
            return Err(Error::Construction(format!(
                "checkpoint has {} weight rows and {} bias entries, expected {}",
                self.weights.len(),
                self.bias.len(),
                self.k
            )));
        }
        let mut flat = Vec::with_capacity(self.k * self.d);
        for (r, row) in self.weights.iter().enumerate() {
            if row.len() != self.d {
                return Err(Error::Construction(format!(
                    "checkpoint weight row {r} has {} entries, expected {}",
                    row.len(),
                    self.d
                )));
            }
            flat.extend_from_slice(row);
        }
        if flat.iter().chain(self.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Construction("checkpoint contains non-finite parameters".into()));
        }
        Ok(SoftmaxLinearModel {
            k: self.k,
            d: self.d,
            weights: flat,
            bias: self.bias,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Full-batch gradient descent settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop when the loss changes by less than this between epochs.
    pub tolerance: f64,
    pub seed: u64,
    /// Optional per-sample weights (e.g. exact-objective atom masses).
    #[serde(default)]
    pub sample_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_epochs: 500,
            tolerance: 1e-8,
            seed: 0,
            sample_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Construction(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Construction("max_epochs must be positive".into()));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Construction(format!(
                "tolerance must be non-negative, got {}",
                self.tolerance
            )));
        }
        if let Some(w) = &self.sample_weights {
            if w.len() != n_samples {
                return Err(Error::Construction(format!(
                    "{} sample weights for {} samples",
                    w.len(),
                    n_samples
                )));
            }
            if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::Construction(
                    "sample weights must be finite and non-negative".into(),
                ));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Construction("sample weights must not all be zero".into()));
            }
        }
        Ok(())
    }
}

/// How the bias expert's output is folded into the main model's training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnsembleStrategy {
    /// Product of the bias expert's probabilities and the main softmax.
    Poe,
    /// Product in logit space: `exp(bias logits) * exp(main logits)`.
    Drift,
    /// Gated product `(p^b)^{g(x)}` with an entropy penalty on the combined
    /// distribution; the gate is trained jointly with the main model.
    LearnedMixin {
        #[serde(default = "default_entropy_weight")]
        entropy_weight: f64,
    },
    /// Loss reweighting by the inverse bias-expert probability of the
    /// observed label, capped and renormalized to mean one.
    InverseReweight {
        #[serde(default = "default_weight_cap")]
        weight_cap: f64,
    },
}

fn default_entropy_weight() -> f64 {
    0.03
}

fn default_weight_cap() -> f64 {
    100.0
}

impl EnsembleStrategy {
    pub fn learned_mixin_default() -> Self {
        EnsembleStrategy::LearnedMixin {
            entropy_weight: default_entropy_weight(),
        }
    }

    pub fn inverse_reweight_default() -> Self {
        EnsembleStrategy::InverseReweight {
            weight_cap: default_weight_cap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnsembleStrategy::LearnedMixin { entropy_weight } if *entropy_weight < 0.0 => Err(
                Error::Construction(format!("entropy weight must be >= 0, got {entropy_weight}")),
            ),
            EnsembleStrategy::InverseReweight { weight_cap } if *weight_cap < 1.0 => Err(
                Error::Construction(format!("weight cap must be >= 1, got {weight_cap}")),
            ),
            _ => Ok(()),
        }
    }
}

/// A frozen source of bias-only uncertainty estimates. Implementations must
/// expose a consistent pair: `bias_logits` is a logit representation of
/// `bias_probs` (equal up to a per-sample constant shift).
pub trait BiasExpert: Sync {
    fn bias_probs(&self, sample: &Sample) -> Result<ProbVector>;

    fn bias_logits(&self, sample: &Sample) -> Result<LogitVector> {
        LogitVector::new(self.bias_probs(sample)?.log_floored())
    }
}

/// A trained model plus its encoder, frozen.
pub struct ModelExpert<'a> {
    pub model: &'a SoftmaxLinearModel,
    pub encoder: &'a FeatureEncoder,
}

impl BiasExpert for ModelExpert<'_> {
    fn bias_probs(&self, sample: &Sample) -> Result<ProbVector> {
        self.model.predict(self.encoder, sample)
    }

    fn bias_logits(&self, sample: &Sample) -> Result<LogitVector> {
        self.model.predict_logits(self.encoder, sample)
    }
}

/// The exact bias posterior of a world (the idealized bias-only model).
pub struct OracleBiasExpert<'a> {
    pub world: &'a DiscreteWorld,
}

impl BiasExpert for OracleBiasExpert<'_> {
    fn bias_probs(&self, sample: &Sample) -> Result<ProbVector> {
        self.world.posterior_bias(sample.bias_id)
    }
}

/// A bias expert that always reports the uniform distribution.
pub struct UniformExpert {
    pub k: usize,
}

impl BiasExpert for UniformExpert {
    fn bias_probs(&self, _sample: &Sample) -> Result<ProbVector> {
        Ok(ProbVector::uniform(self.k))
    }
}

/// Outcome of one gradient-descent fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// True when the loss-change rule fired before `max_epochs`.
    pub converged: bool,
    #[serde(skip)]
    pub loss_trace: Vec<f64>,
}

/// Anything the gradient-descent driver (and the finite-difference checks)
/// can optimize.
pub trait DifferentiableObjective {
    fn dim(&self) -> usize;
    fn value(&self, params: &[f64]) -> f64;
    /// Returns the loss and writes the full gradient into `grad`.
    fn value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> f64;
}

/// Deterministic full-batch gradient descent from `init`.
pub fn gradient_descent<O: DifferentiableObjective>(
    objective: &O,
    init: Vec<f64>,
    learning_rate: f64,
    max_epochs: usize,
    tolerance: f64,
) -> Result<(Vec<f64>, ConvergenceRecord)> {
    let mut params = init;
    assert_eq!(params.len(), objective.dim());
    let mut grad = vec![0.0; params.len()];
    let mut trace = Vec::new();
    let mut prev: Option<f64> = None;
    let mut converged = false;
    let mut epochs_run = 0;

    for epoch in 0..max_epochs {
        let loss = objective.value_and_grad(&params, &mut grad);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("loss is {loss}"),
            });
        }
        trace.push(loss);
        if let Some(p) = prev {
            if (p - loss).abs() < tolerance {
                converged = true;
                break;
            }
        }
        prev = Some(loss);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= learning_rate * g;
        }
        epochs_run = epoch + 1;
    }

    let final_loss = objective.value(&params);
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: epochs_run,
            detail: format!("final loss is {final_loss}"),
        });
    }
    let record = ConvergenceRecord {
        epochs_run,
        initial_loss: trace.first().copied().unwrap_or(final_loss),
        final_loss,
        converged,
        loss_trace: trace,
    };
    Ok((params, record))
}

/// Weighted cross-entropy over a softmax-linear model, with an optional
/// frozen per-sample logit offset (the bias expert's contribution for the
/// indirect ensembling strategies).
///
/// Parameter layout: `[W row-major (k*d), bias (k)]`.
pub struct CombinedCeObjective {
    k: usize,
    d: usize,
    actives: Vec<ActiveFeatures>,
    labels: Vec<usize>,
    weights: Vec<f64>,
    weight_sum: f64,
    offsets: Option<Vec<Vec<f64>>>,
}

impl CombinedCeObjective {
    pub fn new(
        encoder: &FeatureEncoder,
        samples: &[Sample],
        k: usize,
        weights: Vec<f64>,
        offsets: Option<Vec<Vec<f64>>>,
    ) -> Self {
        let actives = samples.iter().map(|s| encoder.active(s)).collect();
        let labels = samples.iter().map(|s| s.label).collect();
        let weight_sum = weights.iter().sum();
        Self {
            k,
            d: encoder.dim(),
            actives,
            labels,
            weights,
            weight_sum,
            offsets,
        }
    }

    fn sample_logits(&self, params: &[f64], i: usize) -> Vec<f64> {
        let mut z: Vec<f64> = (0..self.k).map(|c| params[self.k * self.d + c]).collect();
        for &j in self.actives[i].as_slice() {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += params[c * self.d + j];
            }
        }
        if let Some(offsets) = &self.offsets {
            for (zc, o) in z.iter_mut().zip(&offsets[i]) {
                *zc += o;
            }
        }
        z
    }
}

impl DifferentiableObjective for CombinedCeObjective {
    fn dim(&self) -> usize {
        self.k * self.d + self.k
    }

    fn value(&self, params: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.labels.len() {
            let q = softmax_slice(&self.sample_logits(params, i));
            total += self.weights[i] * cross_entropy(self.labels[i], &q);
        }
        total / self.weight_sum
    }

    fn value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let mut total = 0.0;
        for i in 0..self.labels.len() {
            let q = softmax_slice(&self.sample_logits(params, i));
            total += self.weights[i] * cross_entropy(self.labels[i], &q);
            let scale = self.weights[i] / self.weight_sum;
            for c in 0..self.k {
                let delta = scale * (q.get(c) - if c == self.labels[i] { 1.0 } else { 0.0 });
                grad[self.k * self.d + c] += delta;
                for &j in self.actives[i].as_slice() {
                    grad[c * self.d + j] += delta;
                }
            }
        }
        total / self.weight_sum
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gated-product objective: the bias expert enters as `(p^b)^{g(x)}` with a
/// trainable gate `g(x) = softplus(w_g . phi(x) + b_g)`, plus an entropy
/// penalty on the combined distribution.
///
/// Parameter layout: `[W (k*d), bias (k), gate weights (d), gate bias (1)]`.
pub struct LearnedMixinObjective {
    k: usize,
    d: usize,
    actives: Vec<ActiveFeatures>,
    labels: Vec<usize>,
    weights: Vec<f64>,
    weight_sum: f64,
    bias_log_probs: Vec<Vec<f64>>,
    entropy_weight: f64,
}

impl LearnedMixinObjective {
    pub fn new(
        encoder: &FeatureEncoder,
        samples: &[Sample],
        k: usize,
        weights: Vec<f64>,
        bias_log_probs: Vec<Vec<f64>>,
        entropy_weight: f64,
    ) -> Self {
        let actives = samples.iter().map(|s| encoder.active(s)).collect();
        let labels = samples.iter().map(|s| s.label).collect();
        let weight_sum = weights.iter().sum();
        Self {
            k,
            d: encoder.dim(),
            actives,
            labels,
            weights,
            weight_sum,
            bias_log_probs,
            entropy_weight,
        }
    }

    fn gate_raw(&self, params: &[f64], i: usize) -> f64 {
        let base = self.k * self.d + self.k;
        let mut r = params[base + self.d];
        for &j in self.actives[i].as_slice() {
            r += params[base + j];
        }
        r
    }

    fn combined(&self, params: &[f64], i: usize, gate: f64) -> ProbVector {
        let mut z: Vec<f64> = (0..self.k).map(|c| params[self.k * self.d + c]).collect();
        for &j in self.actives[i].as_slice() {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += params[c * self.d + j];
            }
        }
        for (zc, u) in z.iter_mut().zip(&self.bias_log_probs[i]) {
            *zc += gate * u;
        }
        softmax_slice(&z)
    }

    fn sample_loss(&self, q: &ProbVector, label: usize) -> f64 {
        let entropy: f64 = -q
            .entries()
            .iter()
            .map(|&p| p * p.max(PROB_FLOOR).ln())
            .sum::<f64>();
        cross_entropy(label, q) + self.entropy_weight * entropy
    }
}

impl DifferentiableObjective for LearnedMixinObjective {
    fn dim(&self) -> usize {
        self.k * self.d + self.k + self.d + 1
    }

    fn value(&self, params: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.labels.len() {
            let gate = softplus(self.gate_raw(params, i));
            let q = self.combined(params, i, gate);
            total += self.weights[i] * self.sample_loss(&q, self.labels[i]);
        }
        total / self.weight_sum
    }

    fn value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let gate_base = self.k * self.d + self.k;
        let mut total = 0.0;
        for i in 0..self.labels.len() {
            let raw = self.gate_raw(params, i);
            let gate = softplus(raw);
            let q = self.combined(params, i, gate);
            let label = self.labels[i];
            total += self.weights[i] * self.sample_loss(&q, label);

            let entropy: f64 = -q
                .entries()
                .iter()
                .map(|&p| p * p.max(PROB_FLOOR).ln())
                .sum::<f64>();
            let scale = self.weights[i] / self.weight_sum;
            // d(loss_i)/dz_c for the combined logits z = W phi + b + g*u
            let mut dz = vec![0.0; self.k];
            for c in 0..self.k {
                let qc = q.get(c);
                let ce_part = qc - if c == label { 1.0 } else { 0.0 };
                let ent_part = -qc * (qc.max(PROB_FLOOR).ln() + entropy);
                dz[c] = ce_part + self.entropy_weight * ent_part;
            }
            for c in 0..self.k {
                let delta = scale * dz[c];
                grad[self.k * self.d + c] += delta;
                for &j in self.actives[i].as_slice() {
                    grad[c * self.d + j] += delta;
                }
            }
            // gate chain: dz/dg = u, dg/draw = sigmoid(raw)
            let dloss_dgate: f64 = dz
                .iter()
                .zip(&self.bias_log_probs[i])
                .map(|(&dzc, &u)| dzc * u)
                .sum();
            let draw = scale * dloss_dgate * sigmoid(raw);
            grad[gate_base + self.d] += draw;
            for &j in self.actives[i].as_slice() {
                grad[gate_base + j] += draw;
            }
        }
        total / self.weight_sum
    }
}

/// Inverse-probability weights `min(1 / p^b_y, cap)`, composed with any base
/// weights and renormalized so their (base-weighted) mean is one.
pub fn inverse_reweight_weights(
    bias_probs: &[ProbVector],
    labels: &[usize],
    weight_cap: f64,
    base: Option<&[f64]>,
) -> Vec<f64> {
    let raw: Vec<f64> = bias_probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| (1.0 / p.get(y).max(PROB_FLOOR)).min(weight_cap))
        .collect();
    match base {
        None => {
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            raw.into_iter().map(|w| w / mean).collect()
        }
        Some(base) => {
            let base_sum: f64 = base.iter().sum();
            let weighted_mean = raw.iter().zip(base).map(|(w, b)| w * b).sum::<f64>() / base_sum;
            raw.into_iter()
                .zip(base)
                .map(|(w, b)| b * (w / weighted_mean))
                .collect()
        }
    }
}

/// Train a plain (optionally weighted) cross-entropy model.
pub fn train(
    dataset: &Dataset,
    encoder: &FeatureEncoder,
    config: &TrainConfig,
) -> Result<(SoftmaxLinearModel, ConvergenceRecord)> {
    config.validate(dataset.len())?;
    let k = dataset.label_space().size();
    let weights = config
        .sample_weights
        .clone()
        .unwrap_or_else(|| vec![1.0; dataset.len()]);
    let objective = CombinedCeObjective::new(encoder, dataset.samples(), k, weights, None);
    let init = SoftmaxLinearModel::zeros(k, encoder.dim()).to_flat();
    let (params, record) = gradient_descent(
        &objective,
        init,
        config.learning_rate,
        config.max_epochs,
        config.tolerance,
    )?;
    Ok((SoftmaxLinearModel::from_flat(k, encoder.dim(), &params), record))
}

/// Combine a frozen bias expert's output with the main model's logits.
///
/// - `Poe`: normalized `p^b * softmax(main)`.
/// - `Drift`: normalized `exp(bias logits) * exp(main logits)`.
/// - `LearnedMixin`: normalized `(p^b)^gate * softmax(main)`; needs `gate`.
/// - `InverseReweight`: the direct strategy does not alter the prediction
///   function, so this is `softmax(main)`.
///
/// Products are evaluated in log space after flooring the probabilities at
/// [`PROB_FLOOR`], which equals the normalized floored product and cannot
/// underflow to an all-zero vector.
pub fn combine(
    strategy: &EnsembleStrategy,
    bias_probs: &ProbVector,
    bias_logits: &LogitVector,
    main_logits: &LogitVector,
    gate: Option<f64>,
) -> Result<ProbVector> {
    let k = main_logits.len();
    if bias_probs.len() != k || bias_logits.len() != k {
        return Err(Error::Domain(format!(
            "combine dimension mismatch: bias probs {}, bias logits {}, main logits {k}",
            bias_probs.len(),
            bias_logits.len()
        )));
    }
    let z: Vec<f64> = match strategy {
        EnsembleStrategy::Poe => {
            let u = bias_probs.log_floored();
            main_logits.entries().iter().zip(u).map(|(&m, u)| m + u).collect()
        }
        EnsembleStrategy::Drift => main_logits
            .entries()
            .iter()
            .zip(bias_logits.entries())
            .map(|(&m, &b)| m + b)
            .collect(),
        EnsembleStrategy::LearnedMixin { .. } => {
            let g = gate.ok_or_else(|| {
                Error::Domain("learned-mixin combination needs a gate value".into())
            })?;
            if !g.is_finite() {
                return Err(Error::Domain(format!("gate value must be finite, got {g}")));
            }
            let u = bias_probs.log_floored();
            main_logits
                .entries()
                .iter()
                .zip(u)
                .map(|(&m, u)| m + g * u)
                .collect()
        }
        EnsembleStrategy::InverseReweight { .. } => main_logits.entries().to_vec(),
    };
    Ok(softmax_slice(&z))
}

/// Gate parameters of a trained Learned-Mixin model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl GateParams {
    pub fn value(&self, encoder: &FeatureEncoder, sample: &Sample) -> f64 {
        let mut r = self.bias;
        for &j in encoder.active(sample).as_slice() {
            r += self.weights[j];
        }
        softplus(r)
    }
}

/// A debiased main model: the trained linear model, the strategy it was
/// trained under, and the gate when the strategy has one.
#[derive(Debug, Clone)]
pub struct DebiasedModel {
    pub main: SoftmaxLinearModel,
    pub strategy: EnsembleStrategy,
    pub gate: Option<GateParams>,
}

impl DebiasedModel {
    /// The deployed prediction: the main model alone.
    pub fn main_probs(&self, encoder: &FeatureEncoder, sample: &Sample) -> Result<ProbVector> {
        self.main.predict(encoder, sample)
    }

    /// The training-time combined distribution.
    pub fn combined_probs(
        &self,
        encoder: &FeatureEncoder,
        expert: &dyn BiasExpert,
        sample: &Sample,
    ) -> Result<ProbVector> {
        let gate = self.gate.as_ref().map(|g| g.value(encoder, sample));
        combine(
            &self.strategy,
            &expert.bias_probs(sample)?,
            &expert.bias_logits(sample)?,
            &self.main.predict_logits(encoder, sample)?,
            gate,
        )
    }
}

/// Train the main model against a frozen bias expert.
///
/// The main model always uses the `Full` encoder. For `InverseReweight` the
/// expert sets per-sample loss weights; for the indirect strategies its
/// output enters the loss as a fixed logit offset (or gated offset).
pub fn train_debiased(
    dataset: &Dataset,
    strategy: &EnsembleStrategy,
    expert: &dyn BiasExpert,
    encoder: &FeatureEncoder,
    config: &TrainConfig,
) -> Result<(DebiasedModel, ConvergenceRecord)> {
    if encoder.mode() != EncoderMode::Full {
        return Err(Error::Construction(
            "debiased training requires the full encoder for the main model".into(),
        ));
    }
    strategy.validate()?;
    config.validate(dataset.len())?;
    let k = dataset.label_space().size();
    let base_weights = config
        .sample_weights
        .clone()
        .unwrap_or_else(|| vec![1.0; dataset.len()]);

    let bias_probs: Vec<ProbVector> = dataset
        .samples()
        .iter()
        .map(|s| expert.bias_probs(s))
        .collect::<Result<_>>()?;

    let (objective_params, gate) = match strategy {
        EnsembleStrategy::InverseReweight { weight_cap } => {
            let labels: Vec<usize> = dataset.samples().iter().map(|s| s.label).collect();
            let weights = inverse_reweight_weights(
                &bias_probs,
                &labels,
                *weight_cap,
                config.sample_weights.as_deref(),
            );
            let objective = CombinedCeObjective::new(encoder, dataset.samples(), k, weights, None);
            let init = SoftmaxLinearModel::zeros(k, encoder.dim()).to_flat();
            (
                gradient_descent(
                    &objective,
                    init,
                    config.learning_rate,
                    config.max_epochs,
                    config.tolerance,
                )?,
                None,
            )
        }
        EnsembleStrategy::Poe | EnsembleStrategy::Drift => {
            let offsets: Vec<Vec<f64>> = if matches!(strategy, EnsembleStrategy::Poe) {
                bias_probs.iter().map(|p| p.log_floored()).collect()
            } else {
                dataset
                    .samples()
                    .iter()
                    .map(|s| expert.bias_logits(s).map(|z| z.entries().to_vec()))
                    .collect::<Result<_>>()?
            };
            let objective =
                CombinedCeObjective::new(encoder, dataset.samples(), k, base_weights, Some(offsets));
            let init = SoftmaxLinearModel::zeros(k, encoder.dim()).to_flat();
            (
                gradient_descent(
                    &objective,
                    init,
                    config.learning_rate,
                    config.max_epochs,
                    config.tolerance,
                )?,
                None,
            )
        }
        EnsembleStrategy::LearnedMixin { entropy_weight } => {
            let bias_log_probs: Vec<Vec<f64>> = bias_probs.iter().map(|p| p.log_floored()).collect();
            let objective = LearnedMixinObjective::new(
                encoder,
                dataset.samples(),
                k,
                base_weights,
                bias_log_probs,
                *entropy_weight,
            );
            // gate starts at softplus(b) = 1 so the bias expert is fully on
            let mut init = vec![0.0; objective.dim()];
            let gate_bias_idx = k * encoder.dim() + k + encoder.dim();
            init[gate_bias_idx] = (std::f64::consts::E - 1.0).ln();
            let out = gradient_descent(
                &objective,
                init,
                config.learning_rate,
                config.max_epochs,
                config.tolerance,
            )?;
            let d = encoder.dim();
            let gate = GateParams {
                weights: out.0[k * d + k..k * d + k + d].to_vec(),
                bias: out.0[k * d + k + d],
            };
            (out, Some(gate))
        }
    };

    let (params, record) = objective_params;
    Ok((
        DebiasedModel {
            main: SoftmaxLinearModel::from_flat(k, encoder.dim(), &params),
            strategy: strategy.clone(),
            gate,
        },
        record,
    ))
}

/// Central finite differences of `f` at `point`.
pub fn finite_difference_gradient<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], step: f64) -> Vec<f64> {
    let mut probe = point.to_vec();
    let mut grads = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe);
        probe[i] = point[i] - step;
        let down = f(&probe);
        probe[i] = point[i];
        grads.push((up - down) / (2.0 * step));
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{LabelSpace, Provenance};
    use crate::world::build_world;
    use approx::assert_relative_eq;

    fn demo_world() -> DiscreteWorld {
        build_world(
            2,
            vec![0.5, 0.5],
            vec![vec![0.8, 0.2], vec![0.2, 0.8]],
            vec![vec![0.7, 0.3], vec![0.3, 0.7]],
        )
        .unwrap()
    }

    fn tiny_dataset(labels: &[usize]) -> Dataset {
        let samples: Vec<Sample> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| Sample {
                signal_id: i % 2,
                bias_id: y,
                label: y,
            })
            .collect();
        Dataset::new(
            samples,
            LabelSpace::new(2).unwrap(),
            Provenance {
                seed: 0,
                world_id: "test".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn encoder_dimensions_and_one_hots() {
        let w = demo_world();
        let sample = Sample {
            signal_id: 1,
            bias_id: 0,
            label: 0,
        };
        let bias_enc = FeatureEncoder::new(EncoderMode::BiasOnly, &w);
        assert_eq!(bias_enc.dim(), 2);
        assert_eq!(bias_enc.encode(&sample), vec![1.0, 0.0]);
        let full_enc = FeatureEncoder::new(EncoderMode::Full, &w);
        assert_eq!(full_enc.dim(), 4);
        assert_eq!(full_enc.encode(&sample), vec![0.0, 1.0, 1.0, 0.0]);
        for enc in [bias_enc, full_enc] {
            let dense = enc.encode(&sample);
            let ones: usize = dense.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(ones, enc.active(&sample).as_slice().len());
        }
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let w = demo_world();
        let enc = FeatureEncoder::new(EncoderMode::Full, &w);
        let model = SoftmaxLinearModel::zeros(2, enc.dim());
        let p = model
            .predict(&enc, &Sample { signal_id: 0, bias_id: 1, label: 0 })
            .unwrap();
        assert_eq!(p.entries(), &[0.5, 0.5]);
    }

    #[test]
    fn predict_is_softmax_of_logits() {
        let w = demo_world();
        let enc = FeatureEncoder::new(EncoderMode::Full, &w);
        let ds = w.sample_dataset(200, 3).unwrap();
        let (model, _) = train(&ds, &enc, &TrainConfig::default()).unwrap();
        for s in ds.samples().iter().take(10) {
            let z = model.predict_logits(&enc, s).unwrap();
            let p = model.predict(&enc, s).unwrap();
            let q = crate::prob::softmax(&z);
            for c in 0..2 {
                assert_relative_eq!(p.get(c), q.get(c), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn predict_rejects_mismatched_encoder() {
        let w = demo_world();
        let enc_bias = FeatureEncoder::new(EncoderMode::BiasOnly, &w);
        let enc_full = FeatureEncoder::new(EncoderMode::Full, &w);
        let model = SoftmaxLinearModel::zeros(2, enc_bias.dim());
        let s = Sample { signal_id: 0, bias_id: 0, label: 0 };
        assert!(model.predict(&enc_full, &s).is_err());
    }

    #[test]
    fn training_on_single_class_drives_loss_down_monotonically() {
        let ds = tiny_dataset(&[0, 0, 0, 0]);
        let enc = FeatureEncoder::with_dims(EncoderMode::Full, 2, 2);
        let config = TrainConfig {
            max_epochs: 2000,
            tolerance: 0.0,
            ..TrainConfig::default()
        };
        let (model, record) = train(&ds, &enc, &config).unwrap();
        for pair in record.loss_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "loss increased: {pair:?}");
        }
        assert!(record.final_loss < 0.05, "final loss {}", record.final_loss);
        let p = model
            .predict(&enc, &Sample { signal_id: 0, bias_id: 0, label: 0 })
            .unwrap();
        assert!(p.get(0) > 0.9);
    }

    #[test]
    fn separable_bias_only_problem_reaches_low_loss() {
        // bias value determines the label exactly
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let ds = tiny_dataset(&labels);
        let enc = FeatureEncoder::with_dims(EncoderMode::BiasOnly, 2, 2);
        let config = TrainConfig {
            max_epochs: 3000,
            tolerance: 0.0,
            ..TrainConfig::default()
        };
        let (_, record) = train(&ds, &enc, &config).unwrap();
        assert!(record.final_loss < 0.05, "final loss {}", record.final_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let w = demo_world();
        let ds = w.sample_dataset(500, 9).unwrap();
        let enc = FeatureEncoder::new(EncoderMode::BiasOnly, &w);
        let (a, _) = train(&ds, &enc, &TrainConfig::default()).unwrap();
        let (b, _) = train(&ds, &enc, &TrainConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bias_only_training_approaches_oracle_posterior() {
        let w = demo_world();
        let ds = w.sample_dataset(100_000, 21).unwrap();
        let enc = FeatureEncoder::new(EncoderMode::BiasOnly, &w);
        let config = TrainConfig {
            max_epochs: 3000,
            tolerance: 1e-12,
            ..TrainConfig::default()
        };
        let (model, _) = train(&ds, &enc, &config).unwrap();
        for b in 0..2 {
            let sample = Sample { signal_id: 0, bias_id: b, label: 0 };
            let learned = model.predict(&enc, &sample).unwrap();
            let oracle = w.posterior_bias(b).unwrap();
            let tv = learned.total_variation(&oracle);
            assert!(tv < 0.02, "bias {b}: tv {tv}");
        }
    }

    #[test]
    fn final_loss_matches_recomputation_from_predictions() {
        let w = demo_world();
        let ds = w.sample_dataset(2000, 5).unwrap();
        let enc = FeatureEncoder::new(EncoderMode::BiasOnly, &w);
        let (model, record) = train(&ds, &enc, &TrainConfig::default()).unwrap();
        let mut total = 0.0;
        for s in ds.samples() {
            total += cross_entropy(s.label, &model.predict(&enc, s).unwrap());
        }
        assert_relative_eq!(total / ds.len() as f64, record.final_loss, epsilon = 1e-12);
    }

    #[test]
    fn combine_poe_examples() {
        let strategy = EnsembleStrategy::Poe;
        let uniform = ProbVector::uniform(2);
        let main = LogitVector::new(vec![(0.3f64).ln(), (0.7f64).ln()]).unwrap();
        let logits = LogitVector::new(uniform.log_floored()).unwrap();
        let out = combine(&strategy, &uniform, &logits, &main, None).unwrap();
        assert_relative_eq!(out.get(0), 0.3, epsilon = 1e-12);
        assert_relative_eq!(out.get(1), 0.7, epsilon = 1e-12);

        let biased = ProbVector::new(vec![0.8, 0.2]).unwrap();
        let logits = LogitVector::new(biased.log_floored()).unwrap();
        let out = combine(&strategy, &biased, &logits, &main, None).unwrap();
        // hand value: (0.24, 0.14) / 0.38
        assert_relative_eq!(out.get(0), 0.24 / 0.38, epsilon = 1e-12);
        assert_relative_eq!(out.get(0), 0.631578947368421, epsilon = 1e-12);
    }

    #[test]
    fn combine_learned_mixin_gate_zero_disables_bias() {
        let strategy = EnsembleStrategy::learned_mixin_default();
        let biased = ProbVector::new(vec![0.95, 0.05]).unwrap();
        let logits = LogitVector::new(biased.log_floored()).unwrap();
        let main = LogitVector::new(vec![1.0, -0.5]).unwrap();
        let out = combine(&strategy, &biased, &logits, &main, Some(0.0)).unwrap();
        let plain = crate::prob::softmax(&main);
        for c in 0..2 {
            assert_relative_eq!(out.get(c), plain.get(c), epsilon = 1e-12);
        }
        // missing gate is an error
        assert!(combine(&strategy, &biased, &logits, &main, None).is_err());
    }

    #[test]
    fn poe_and_drift_coincide_on_consistent_experts() {
        let p = ProbVector::new(vec![0.6, 0.3, 0.1]).unwrap();
        let logits = LogitVector::new(p.log_floored()).unwrap();
        let main = LogitVector::new(vec![0.2, -1.0, 0.8]).unwrap();
        let poe = combine(&EnsembleStrategy::Poe, &p, &logits, &main, None).unwrap();
        let drift = combine(&EnsembleStrategy::Drift, &p, &logits, &main, None).unwrap();
        for c in 0..3 {
            assert!((poe.get(c) - drift.get(c)).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_bias_expert_is_identity_for_all_indirect_strategies() {
        let uniform = ProbVector::uniform(3);
        let logits = LogitVector::new(uniform.log_floored()).unwrap();
        let main = LogitVector::new(vec![0.4, 0.1, -0.9]).unwrap();
        let plain = crate::prob::softmax(&main);
        for (strategy, gate) in [
            (EnsembleStrategy::Poe, None),
            (EnsembleStrategy::Drift, None),
            (EnsembleStrategy::learned_mixin_default(), Some(2.7)),
        ] {
            let out = combine(&strategy, &uniform, &logits, &main, gate).unwrap();
            for c in 0..3 {
                assert_relative_eq!(out.get(c), plain.get(c), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn inverse_reweight_weights_cap_and_renormalize() {
        let probs = vec![
            ProbVector::new(vec![0.5, 0.5]).unwrap(),
            ProbVector::new(vec![1e-6, 1.0 - 1e-6]).unwrap(),
        ];
        let weights = inverse_reweight_weights(&probs, &[0, 0], 100.0, None);
        // raw weights (2, 100) have mean 51
        assert_relative_eq!(weights[0], 2.0 / 51.0, epsilon = 1e-12);
        assert_relative_eq!(weights[1], 100.0 / 51.0, epsilon = 1e-12);
        let mean: f64 = weights.iter().sum::<f64>() / 2.0;
        assert_relative_eq!(mean, 1.0, epsilon = 1e-12);

        // cap 1 flattens everything to plain CE
        let weights = inverse_reweight_weights(&probs, &[0, 0], 1.0, None);
        assert_eq!(weights, vec![1.0, 1.0]);
    }

    #[test]
    fn inverse_reweight_with_uniform_bias_matches_plain_ce_bitwise() {
        let w = demo_world();
        let ds = w.sample_dataset(400, 13).unwrap();
        let enc = FeatureEncoder::new(EncoderMode::Full, &w);
        let config = TrainConfig {
            max_epochs: 200,
            ..TrainConfig::default()
        };
        let (plain, _) = train(&ds, &enc, &config).unwrap();
        let expert = UniformExpert { k: 2 };
        let (debiased, _) = train_debiased(
            &ds,
            &EnsembleStrategy::inverse_reweight_default(),
            &expert,
            &enc,
            &config,
        )
        .unwrap();
        assert_eq!(plain, debiased.main);
    }

    #[test]
    fn weight_cap_one_degenerates_to_plain_ce() {
        let w = demo_world();
        let ds = w.sample_dataset(300, 14).unwrap();
        let enc = FeatureEncoder::new(EncoderMode::Full, &w);
        let config = TrainConfig {
            max_epochs: 150,
            ..TrainConfig::default()
        };
        let (plain, _) = train(&ds, &enc, &config).unwrap();
        let expert = OracleBiasExpert { world: &w };
        let (debiased, _) = train_debiased(
            &ds,
            &EnsembleStrategy::InverseReweight { weight_cap: 1.0 },
            &expert,
            &enc,
            &config,
        )
        .unwrap();
        assert_eq!(plain, debiased.main);
    }

    #[test]
    fn debiased_training_requires_full_encoder() {
        let w = demo_world();
        let ds = w.sample_dataset(50, 2).unwrap();
        let enc = FeatureEncoder::new(EncoderMode::BiasOnly, &w);
        let expert = OracleBiasExpert { world: &w };
        let err = train_debiased(&ds, &EnsembleStrategy::Poe, &expert, &enc, &TrainConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let w = demo_world();
        let ds = w.sample_dataset(500, 4).unwrap();
        let enc = FeatureEncoder::new(EncoderMode::BiasOnly, &w);
        let (model, _) = train(&ds, &enc, &TrainConfig::default()).unwrap();
        let json = ModelCheckpoint::new(&model, EncoderMode::BiasOnly).to_json();
        let back = ModelCheckpoint::from_json(&json).unwrap().into_model().unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn checkpoint_rejects_inconsistent_shapes() {
        let json = r#"{"mode":"bias_only","K":2,"D":3,"weights":[[1.0,2.0],[3.0,4.0]],"bias":[0.0,0.0]}"#;
        assert!(ModelCheckpoint::from_json(json).unwrap().into_model().is_err());
        let json = r#"{"mode":"full","K":2,"D":2,"weights":[[1.0,2.0],[3.0,null]],"bias":[0.0,0.0]}"#;
        assert!(ModelCheckpoint::from_json(json).is_err());
    }

    fn check_gradients<O: DifferentiableObjective>(objective: &O, params: &[f64]) {
        let mut grad = vec![0.0; objective.dim()];
        objective.value_and_grad(params, &mut grad);
        let fd = finite_difference_gradient(|p| objective.value(p), params, 1e-5);
        for (i, (&a, &f)) in grad.iter().zip(&fd).enumerate() {
            let rel = (a - f).abs() / f.abs().max(1.0);
            assert!(rel <= 1e-4, "component {i}: analytic {a}, fd {f}");
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let w = demo_world();
        let ds = w.sample_dataset(24, 8).unwrap();
        let enc = FeatureEncoder::new(EncoderMode::Full, &w);
        let k = 2;
        let params: Vec<f64> = (0..(k * enc.dim() + k))
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.13)
            .collect();

        let plain = CombinedCeObjective::new(&enc, ds.samples(), k, vec![1.0; ds.len()], None);
        check_gradients(&plain, &params);

        let oracle = OracleBiasExpert { world: &w };
        let offsets: Vec<Vec<f64>> = ds
            .samples()
            .iter()
            .map(|s| oracle.bias_probs(s).unwrap().log_floored())
            .collect();
        let poe = CombinedCeObjective::new(
            &enc,
            ds.samples(),
            k,
            vec![1.0; ds.len()],
            Some(offsets.clone()),
        );
        check_gradients(&poe, &params);

        let mixin =
            LearnedMixinObjective::new(&enc, ds.samples(), k, vec![1.0; ds.len()], offsets, 0.03);
        let mut mixin_params: Vec<f64> = (0..mixin.dim())
            .map(|i| ((i * 29 % 13) as f64 - 6.0) * 0.11)
            .collect();
        let last = mixin.dim() - 1;
        mixin_params[last] = 0.4;
        check_gradients(&mixin, &mixin_params);
    }

    #[test]
    fn non_finite_loss_reports_divergence_with_epoch() {
        // sample weights large enough to overflow the weighted loss sum
        let ds = tiny_dataset(&[0, 0, 1]);
        let enc = FeatureEncoder::with_dims(EncoderMode::Full, 2, 2);
        let config = TrainConfig {
            sample_weights: Some(vec![1e308; 3]),
            ..TrainConfig::default()
        };
        match train(&ds, &enc, &config) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
