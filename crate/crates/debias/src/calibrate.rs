//! Post-hoc calibration of a frozen bias-only model: temperature scaling, a
//! Dirichlet map with off-diagonal/intercept regularization, fold-averaged
//! ensembles of calibrators, and a distortion wrapper that manufactures
//! controlled miscalibration for experiments.

use serde::{Deserialize, Serialize};

use crate::model::{
    gradient_descent, BiasExpert, ConvergenceRecord, DifferentiableObjective,
};
use crate::prob::{cross_entropy, softmax_slice, Dataset, LogitVector, ProbVector, Sample};
use crate::{Error, Result, PROB_FLOOR};

/// Single-scalar temperature transform `softmax(z / T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScaler {
    pub t: f64,
}

impl TemperatureScaler {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Domain(format!("temperature must be positive, got {t}")));
        }
        Ok(Self { t })
    }

    /// Scaled softmax; the argmax is unchanged for every `T > 0`.
    pub fn apply(&self, logits: &LogitVector) -> ProbVector {
        let scaled: Vec<f64> = logits.entries().iter().map(|&z| z / self.t).collect();
        softmax_slice(&scaled)
    }
}

/// Result of a temperature fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub scaler: TemperatureScaler,
    pub mean_ce: f64,
    /// Set when the held-out data contains a single class; the fitted value
    /// is returned but should not be trusted.
    pub degenerate: bool,
}

/// Deterministic golden-section minimizer on `[lo, hi]`.
fn golden_section_min<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while (hi - lo) > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Fit a temperature on precomputed logits by minimizing the (optionally
/// weighted) mean cross-entropy over `ln T` in `[-3, 3]`.
pub fn fit_temperature_on(
    logits: &[LogitVector],
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<TemperatureFit> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Domain(format!(
            "temperature fit needs matching non-empty logits/labels, got {} and {}",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != logits.len() {
            return Err(Error::Domain("weight length mismatch in temperature fit".into()));
        }
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total_weight: f64 = (0..logits.len()).map(weight).sum();
    let mean_ce = |log_t: f64| {
        let t = log_t.exp();
        let mut total = 0.0;
        for (i, (z, &y)) in logits.iter().zip(labels).enumerate() {
            let scaled: Vec<f64> = z.entries().iter().map(|&v| v / t).collect();
            total += weight(i) * cross_entropy(y, &softmax_slice(&scaled));
        }
        total / total_weight
    };
    let best_log_t = golden_section_min(mean_ce, -3.0, 3.0, 1e-6);
    let first = labels[0];
    let degenerate = labels.iter().all(|&y| y == first);
    Ok(TemperatureFit {
        scaler: TemperatureScaler::new(best_log_t.exp())?,
        mean_ce: mean_ce(best_log_t),
        degenerate,
    })
}

/// Fit a temperature for a frozen bias expert on a held-out dataset.
pub fn fit_temperature(
    expert: &dyn BiasExpert,
    heldout: &Dataset,
    weights: Option<&[f64]>,
) -> Result<TemperatureFit> {
    let logits: Vec<LogitVector> = heldout
        .samples()
        .iter()
        .map(|s| expert.bias_logits(s))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = heldout.samples().iter().map(|s| s.label).collect();
    fit_temperature_on(&logits, &labels, weights)
}

/// Linear map on log-probabilities: `softmax(W ln p + b')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletCalibrator {
    k: usize,
    /// Row-major `k x k`.
    w: Vec<f64>,
    b_prime: Vec<f64>,
    pub lambda: f64,
}

impl DirichletCalibrator {
    /// The identity transform: `W = I`, `b' = 0`.
    pub fn identity(k: usize, lambda: f64) -> Self {
        let mut w = vec![0.0; k * k];
        for i in 0..k {
            w[i * k + i] = 1.0;
        }
        Self {
            k,
            w,
            b_prime: vec![0.0; k],
            lambda,
        }
    }

    pub fn from_parts(w: Vec<Vec<f64>>, b_prime: Vec<f64>, lambda: f64) -> Result<Self> {
        let k = w.len();
        if k < 2 {
            return Err(Error::Construction("Dirichlet map needs K >= 2".into()));
        }
        if b_prime.len() != k {
            return Err(Error::Construction(format!(
                "intercept has {} entries, expected {k}",
                b_prime.len()
            )));
        }
        let mut flat = Vec::with_capacity(k * k);
        for (r, row) in w.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Construction(format!(
                    "Dirichlet matrix row {r} has {} entries, expected {k}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        if flat.iter().chain(b_prime.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Construction("Dirichlet map has non-finite parameters".into()));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Construction(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self {
            k,
            w: flat,
            b_prime,
            lambda,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn matrix_rows(&self) -> Vec<Vec<f64>> {
        (0..self.k).map(|r| self.w[r * self.k..(r + 1) * self.k].to_vec()).collect()
    }

    pub fn intercept(&self) -> &[f64] {
        &self.b_prime
    }

    pub fn apply(&self, probs: &ProbVector) -> ProbVector {
        let u = probs.log_floored();
        let mut z = self.b_prime.clone();
        for r in 0..self.k {
            for (c, &uc) in u.iter().enumerate() {
                z[r] += self.w[r * self.k + c] * uc;
            }
        }
        softmax_slice(&z)
    }

    /// Off-diagonal and intercept penalty:
    /// `lambda * (mean of squared off-diagonal W + mean of squared b')`.
    /// Zero exactly when `W` is diagonal and `b'` is zero.
    pub fn odir_penalty(&self) -> f64 {
        odir_penalty(self.k, &self.w, Some(&self.b_prime), self.lambda)
    }
}

fn odir_penalty(k: usize, w: &[f64], b_prime: Option<&[f64]>, lambda: f64) -> f64 {
    let off_count = (k * (k - 1)) as f64;
    let mut off_sq = 0.0;
    for r in 0..k {
        for c in 0..k {
            if r != c {
                off_sq += w[r * k + c] * w[r * k + c];
            }
        }
    }
    let mut penalty = off_sq / off_count;
    if let Some(b) = b_prime {
        penalty += b.iter().map(|v| v * v).sum::<f64>() / k as f64;
    }
    lambda * penalty
}

/// Cross-entropy plus ODIR penalty over Dirichlet-map parameters.
///
/// Inputs are floored log-probabilities of the model being calibrated.
/// Parameter layout: `[W row-major (k*k), b' (k)]`, the intercept block
/// omitted when `drop_bias` is set.
pub struct DirichletObjective {
    k: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    weights: Vec<f64>,
    weight_sum: f64,
    lambda: f64,
    drop_bias: bool,
}

impl DirichletObjective {
    pub fn new(
        probs: &[ProbVector],
        labels: &[usize],
        weights: Vec<f64>,
        lambda: f64,
        drop_bias: bool,
    ) -> Self {
        let k = probs[0].len();
        let inputs: Vec<Vec<f64>> = probs.iter().map(|p| p.log_floored()).collect();
        let weight_sum = weights.iter().sum();
        Self {
            k,
            inputs,
            labels: labels.to_vec(),
            weights,
            weight_sum,
            lambda,
            drop_bias,
        }
    }

    /// Identity-transform initial parameters.
    pub fn identity_init(&self) -> Vec<f64> {
        let mut init = vec![0.0; self.dim()];
        for i in 0..self.k {
            init[i * self.k + i] = 1.0;
        }
        init
    }

    fn logits(&self, params: &[f64], i: usize) -> Vec<f64> {
        let u = &self.inputs[i];
        let mut z = vec![0.0; self.k];
        for r in 0..self.k {
            let mut acc = if self.drop_bias {
                0.0
            } else {
                params[self.k * self.k + r]
            };
            for (c, &uc) in u.iter().enumerate() {
                acc += params[r * self.k + c] * uc;
            }
            z[r] = acc;
        }
        z
    }

    fn penalty(&self, params: &[f64]) -> f64 {
        let b = if self.drop_bias {
            None
        } else {
            Some(&params[self.k * self.k..self.k * self.k + self.k])
        };
        odir_penalty(self.k, &params[..self.k * self.k], b.map(|v| &v[..]), self.lambda)
    }
}

impl DifferentiableObjective for DirichletObjective {
    fn dim(&self) -> usize {
        self.k * self.k + if self.drop_bias { 0 } else { self.k }
    }

    fn value(&self, params: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.labels.len() {
            let q = softmax_slice(&self.logits(params, i));
            total += self.weights[i] * cross_entropy(self.labels[i], &q);
        }
        total / self.weight_sum + self.penalty(params)
    }

    fn value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let k = self.k;
        let mut total = 0.0;
        for i in 0..self.labels.len() {
            let q = softmax_slice(&self.logits(params, i));
            total += self.weights[i] * cross_entropy(self.labels[i], &q);
            let scale = self.weights[i] / self.weight_sum;
            let u = &self.inputs[i];
            for r in 0..k {
                let delta = scale * (q.get(r) - if r == self.labels[i] { 1.0 } else { 0.0 });
                for c in 0..k {
                    grad[r * k + c] += delta * u[c];
                }
                if !self.drop_bias {
                    grad[k * k + r] += delta;
                }
            }
        }
        // penalty gradients
        let off_count = (k * (k - 1)) as f64;
        for r in 0..k {
            for c in 0..k {
                if r != c {
                    grad[r * k + c] += 2.0 * self.lambda * params[r * k + c] / off_count;
                }
            }
        }
        if !self.drop_bias {
            for r in 0..k {
                grad[k * k + r] += 2.0 * self.lambda * params[k * k + r] / k as f64;
            }
        }
        total / self.weight_sum + self.penalty(params)
    }
}

/// Settings for fitting the Dirichlet calibrator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirichletFitConfig {
    pub lambda: f64,
    pub k_folds: usize,
    /// Drop the intercept term entirely.
    pub drop_bias: bool,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
}

impl Default for DirichletFitConfig {
    fn default() -> Self {
        Self {
            lambda: 0.06,
            k_folds: 5,
            drop_bias: false,
            learning_rate: 0.05,
            max_epochs: 2000,
            tolerance: 1e-10,
        }
    }
}

/// Average-of-members calibrator ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorEnsemble {
    members: Vec<DirichletCalibrator>,
}

impl CalibratorEnsemble {
    pub fn new(members: Vec<DirichletCalibrator>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Construction("ensemble needs at least one member".into()));
        }
        let k = members[0].num_classes();
        if members.iter().any(|m| m.num_classes() != k) {
            return Err(Error::Construction("ensemble members disagree on K".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[DirichletCalibrator] {
        &self.members
    }

    /// Mean of the member output distributions.
    pub fn apply(&self, probs: &ProbVector) -> ProbVector {
        let k = probs.len();
        let mut acc = vec![0.0; k];
        for member in &self.members {
            let out = member.apply(probs);
            for (a, v) in acc.iter_mut().zip(out.entries()) {
                *a += v;
            }
        }
        let n = self.members.len() as f64;
        ProbVector::new(acc.into_iter().map(|v| v / n).collect())
            .expect("average of distributions is a distribution")
    }
}

/// Fitted Dirichlet ensemble plus per-fold convergence records.
#[derive(Debug, Clone)]
pub struct DirichletFit {
    pub ensemble: CalibratorEnsemble,
    pub fold_records: Vec<ConvergenceRecord>,
}

/// Fit a Dirichlet calibrator on precomputed probabilities with internal
/// cross-validation: member `j` trains on the complement of fold `j`, and
/// predictions are averaged. With `k_folds = 1` the single member trains on
/// the full held-out set.
pub fn fit_dirichlet_on(
    probs: &[ProbVector],
    labels: &[usize],
    config: &DirichletFitConfig,
    weights: Option<&[f64]>,
) -> Result<DirichletFit> {
    let n = probs.len();
    if n == 0 || labels.len() != n {
        return Err(Error::Domain(format!(
            "Dirichlet fit needs matching non-empty probs/labels, got {n} and {}",
            labels.len()
        )));
    }
    if config.k_folds == 0 || n < config.k_folds {
        return Err(Error::Domain(format!(
            "held-out size {n} must be at least k_folds {}",
            config.k_folds
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Domain("weight length mismatch in Dirichlet fit".into()));
        }
    }
    let k = probs[0].len();
    let base_weight = |i: usize| weights.map_or(1.0, |w| w[i]);

    let mut members = Vec::with_capacity(config.k_folds);
    let mut fold_records = Vec::with_capacity(config.k_folds);
    for fold in 0..config.k_folds {
        let lo = fold * n / config.k_folds;
        let hi = (fold + 1) * n / config.k_folds;
        let keep: Vec<usize> = if config.k_folds == 1 {
            (0..n).collect()
        } else {
            (0..n).filter(|i| *i < lo || *i >= hi).collect()
        };
        let fold_probs: Vec<ProbVector> = keep.iter().map(|&i| probs[i].clone()).collect();
        let fold_labels: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
        let fold_weights: Vec<f64> = keep.iter().map(|&i| base_weight(i)).collect();
        let objective = DirichletObjective::new(
            &fold_probs,
            &fold_labels,
            fold_weights,
            config.lambda,
            config.drop_bias,
        );
        let (params, record) = gradient_descent(
            &objective,
            objective.identity_init(),
            config.learning_rate,
            config.max_epochs,
            config.tolerance,
        )
        .map_err(|e| match e {
            Error::Divergence { epoch, detail } => Error::Divergence {
                epoch,
                detail: format!("fold {fold}: {detail}"),
            },
            other => other,
        })?;
        let rows: Vec<Vec<f64>> = (0..k).map(|r| params[r * k..(r + 1) * k].to_vec()).collect();
        let b_prime = if config.drop_bias {
            vec![0.0; k]
        } else {
            params[k * k..k * k + k].to_vec()
        };
        members.push(DirichletCalibrator::from_parts(rows, b_prime, config.lambda)?);
        fold_records.push(record);
    }
    Ok(DirichletFit {
        ensemble: CalibratorEnsemble::new(members)?,
        fold_records,
    })
}

/// Fit a Dirichlet calibrator for a frozen bias expert on a held-out set.
pub fn fit_dirichlet(
    expert: &dyn BiasExpert,
    heldout: &Dataset,
    config: &DirichletFitConfig,
    weights: Option<&[f64]>,
) -> Result<DirichletFit> {
    let probs: Vec<ProbVector> = heldout
        .samples()
        .iter()
        .map(|s| expert.bias_probs(s))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = heldout.samples().iter().map(|s| s.label).collect();
    fit_dirichlet_on(&probs, &labels, config, weights)
}

/// A fitted calibrator of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibrator {
    Temperature {
        #[serde(rename = "T")]
        t: f64,
    },
    Dirichlet {
        lambda: f64,
        folds: Vec<DirichletFold>,
    },
}

/// Checkpoint form of one Dirichlet ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletFold {
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub b_prime: Vec<f64>,
}

impl Calibrator {
    pub fn from_temperature(scaler: TemperatureScaler) -> Self {
        Calibrator::Temperature { t: scaler.t }
    }

    pub fn from_dirichlet(ensemble: &CalibratorEnsemble) -> Self {
        Calibrator::Dirichlet {
            lambda: ensemble.members()[0].lambda,
            folds: ensemble
                .members()
                .iter()
                .map(|m| DirichletFold {
                    w: m.matrix_rows(),
                    b_prime: m.intercept().to_vec(),
                })
                .collect(),
        }
    }

    /// Validate checkpoint contents and build the runtime pieces.
    pub fn validate(&self) -> Result<()> {
        match self {
            Calibrator::Temperature { t } => TemperatureScaler::new(*t).map(|_| ()),
            Calibrator::Dirichlet { lambda, folds } => {
                let members = folds
                    .iter()
                    .map(|f| DirichletCalibrator::from_parts(f.w.clone(), f.b_prime.clone(), *lambda))
                    .collect::<Result<Vec<_>>>()?;
                CalibratorEnsemble::new(members).map(|_| ())
            }
        }
    }

    /// Calibrated distribution from the base model's (probs, logits) pair.
    pub fn calibrate(&self, probs: &ProbVector, logits: &LogitVector) -> Result<ProbVector> {
        match self {
            Calibrator::Temperature { t } => Ok(TemperatureScaler::new(*t)?.apply(logits)),
            Calibrator::Dirichlet { lambda, folds } => {
                let members = folds
                    .iter()
                    .map(|f| DirichletCalibrator::from_parts(f.w.clone(), f.b_prime.clone(), *lambda))
                    .collect::<Result<Vec<_>>>()?;
                Ok(CalibratorEnsemble::new(members)?.apply(probs))
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibrator serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let calibrator: Calibrator = serde_json::from_str(text)?;
        calibrator.validate()?;
        Ok(calibrator)
    }
}

/// A bias expert with a calibrator applied on top. Exposes the consistent
/// pair: logits are the floored log of the calibrated probabilities.
pub struct CalibratedExpert<'a> {
    pub base: &'a dyn BiasExpert,
    pub calibrator: Calibrator,
}

impl CalibratedExpert<'_> {
    fn calibrated(&self, sample: &Sample) -> Result<ProbVector> {
        match &self.calibrator {
            Calibrator::Temperature { t } => {
                Ok(TemperatureScaler::new(*t)?.apply(&self.base.bias_logits(sample)?))
            }
            other => other.calibrate(
                &self.base.bias_probs(sample)?,
                &self.base.bias_logits(sample)?,
            ),
        }
    }
}

impl BiasExpert for CalibratedExpert<'_> {
    fn bias_probs(&self, sample: &Sample) -> Result<ProbVector> {
        self.calibrated(sample)
    }
}

/// Controlled miscalibration: `z / temperature_factor + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub temperature_factor: f64,
    pub logit_offset: Vec<f64>,
}

impl Distortion {
    pub fn new(temperature_factor: f64, logit_offset: Vec<f64>) -> Result<Self> {
        if !(temperature_factor > 0.0 && temperature_factor.is_finite()) {
            return Err(Error::Construction(format!(
                "distortion factor must be positive, got {temperature_factor}"
            )));
        }
        if logit_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::Construction("distortion offsets must be finite".into()));
        }
        Ok(Self {
            temperature_factor,
            logit_offset,
        })
    }

    pub fn apply(&self, logits: &LogitVector) -> Result<LogitVector> {
        if logits.len() != self.logit_offset.len() {
            return Err(Error::Domain(format!(
                "distortion offset has {} entries for {} logits",
                self.logit_offset.len(),
                logits.len()
            )));
        }
        LogitVector::new(
            logits
                .entries()
                .iter()
                .zip(&self.logit_offset)
                .map(|(&z, &o)| z / self.temperature_factor + o)
                .collect(),
        )
    }
}

/// A bias expert seen through a distortion; probs and logits stay a
/// consistent pair.
pub struct DistortedExpert<'a> {
    pub base: &'a dyn BiasExpert,
    pub distortion: Distortion,
}

impl BiasExpert for DistortedExpert<'_> {
    fn bias_probs(&self, sample: &Sample) -> Result<ProbVector> {
        Ok(softmax_slice(self.bias_logits(sample)?.entries()))
    }

    fn bias_logits(&self, sample: &Sample) -> Result<LogitVector> {
        self.distortion.apply(&self.base.bias_logits(sample)?)
    }
}

/// Entropy of a distribution, used by reports.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.entries()
        .iter()
        .map(|&v| v * v.max(PROB_FLOOR).ln())
        .sum::<f64>()
}
