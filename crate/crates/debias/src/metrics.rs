//! Calibration and performance measurement: classwise expected calibration
//! error, reliability-diagram binning, and agreement rates.
//!
//! Binning is equal-width over [0,1] with right-closed intervals
//! `(low, high]`; the first bin additionally includes 0, so bin `j` of `M`
//! is `(j/M, (j+1)/M]` for `j > 0` and `[0, 1/M]` for `j = 0`. ECE values
//! are reported multiplied by 100, the usual table convention.

use serde::{Deserialize, Serialize};

use crate::prob::{argmax, ProbVector};
use crate::world::DiscreteWorld;
use crate::{Error, Result};

/// Equal-width binning over [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub num_bins: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self { num_bins: 10 }
    }
}

impl BinningConfig {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::Construction("need at least one bin".into()));
        }
        Ok(Self { num_bins })
    }

    /// Bin index for a probability: right-closed intervals, zero lands in
    /// the first bin.
    pub fn bin_of(&self, p: f64) -> usize {
        if p <= 0.0 {
            return 0;
        }
        let idx = (p * self.num_bins as f64).ceil() as usize;
        idx.saturating_sub(1).min(self.num_bins - 1)
    }

    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        let m = self.num_bins as f64;
        (bin as f64 / m, (bin + 1) as f64 / m)
    }
}

/// Classwise expected calibration error, reported x100.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EceReport {
    /// `100 / K * sum_k sum_bins (count/N) * |mean p_k - freq(y = k)|`.
    pub classwise_ece_pct: f64,
    /// Per-class contributions, x100 (their mean is `classwise_ece_pct`).
    pub per_class_pct: Vec<f64>,
    pub num_bins: usize,
    pub n_samples: usize,
}

impl EceReport {
    /// The raw (unscaled) classwise ECE in [0, 1].
    pub fn raw(&self) -> f64 {
        self.classwise_ece_pct / 100.0
    }
}

fn check_lengths(predictions: &[ProbVector], labels: &[usize]) -> Result<usize> {
    if predictions.is_empty() {
        return Err(Error::Domain("no predictions".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Domain(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let k = predictions[0].len();
    if predictions.iter().any(|p| p.len() != k) {
        return Err(Error::Domain("predictions have inconsistent class counts".into()));
    }
    if labels.iter().any(|&y| y >= k) {
        return Err(Error::Domain(format!("label out of range for {k} classes")));
    }
    Ok(k)
}

/// Classwise ECE over a batch of predictions.
pub fn classwise_ece(
    predictions: &[ProbVector],
    labels: &[usize],
    config: BinningConfig,
) -> Result<EceReport> {
    let k = check_lengths(predictions, labels)?;
    let n = predictions.len() as f64;
    let m = config.num_bins;
    let mut per_class = Vec::with_capacity(k);
    for class in 0..k {
        let mut count = vec![0usize; m];
        let mut pred_sum = vec![0.0; m];
        let mut hits = vec![0usize; m];
        for (p, &y) in predictions.iter().zip(labels) {
            let bin = config.bin_of(p.get(class));
            count[bin] += 1;
            pred_sum[bin] += p.get(class);
            if y == class {
                hits[bin] += 1;
            }
        }
        let mut contribution = 0.0;
        for bin in 0..m {
            if count[bin] == 0 {
                continue;
            }
            let mean_pred = pred_sum[bin] / count[bin] as f64;
            let freq = hits[bin] as f64 / count[bin] as f64;
            contribution += (count[bin] as f64 / n) * (mean_pred - freq).abs();
        }
        per_class.push(contribution);
    }
    let raw = per_class.iter().sum::<f64>() / k as f64;
    Ok(EceReport {
        classwise_ece_pct: 100.0 * raw,
        per_class_pct: per_class.into_iter().map(|c| 100.0 * c).collect(),
        num_bins: m,
        n_samples: predictions.len(),
    })
}

/// Which statistic a reliability diagram bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityMode {
    /// Per class: predicted probability of the class vs observed class
    /// frequency.
    Classwise,
    /// Per sample: confidence (max probability) vs accuracy.
    Confidence,
}

/// One bar of a reliability diagram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityRow {
    /// Class index in classwise mode, `None` in confidence mode.
    pub class: Option<usize>,
    pub bin_low: f64,
    pub bin_high: f64,
    pub mean_pred: f64,
    /// Observed class frequency (classwise) or accuracy (confidence).
    pub observed: f64,
    pub count: usize,
}

/// Binned reliability statistics; empty bins are omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityDiagram {
    pub mode: ReliabilityMode,
    pub num_bins: usize,
    pub n_samples: usize,
    pub rows: Vec<ReliabilityRow>,
}

/// Exact binned reliability statistics for a batch of predictions.
pub fn reliability(
    predictions: &[ProbVector],
    labels: &[usize],
    config: BinningConfig,
    mode: ReliabilityMode,
) -> Result<ReliabilityDiagram> {
    let k = check_lengths(predictions, labels)?;
    let m = config.num_bins;
    let mut rows = Vec::new();
    match mode {
        ReliabilityMode::Classwise => {
            for class in 0..k {
                let mut count = vec![0usize; m];
                let mut pred_sum = vec![0.0; m];
                let mut hits = vec![0usize; m];
                for (p, &y) in predictions.iter().zip(labels) {
                    let bin = config.bin_of(p.get(class));
                    count[bin] += 1;
                    pred_sum[bin] += p.get(class);
                    if y == class {
                        hits[bin] += 1;
                    }
                }
                for bin in 0..m {
                    if count[bin] == 0 {
                        continue;
                    }
                    let (lo, hi) = config.bin_edges(bin);
                    rows.push(ReliabilityRow {
                        class: Some(class),
                        bin_low: lo,
                        bin_high: hi,
                        mean_pred: pred_sum[bin] / count[bin] as f64,
                        observed: hits[bin] as f64 / count[bin] as f64,
                        count: count[bin],
                    });
                }
            }
        }
        ReliabilityMode::Confidence => {
            let mut count = vec![0usize; m];
            let mut conf_sum = vec![0.0; m];
            let mut correct = vec![0usize; m];
            for (p, &y) in predictions.iter().zip(labels) {
                let top = argmax(p.entries());
                let conf = p.get(top);
                let bin = config.bin_of(conf);
                count[bin] += 1;
                conf_sum[bin] += conf;
                if top == y {
                    correct[bin] += 1;
                }
            }
            for bin in 0..m {
                if count[bin] == 0 {
                    continue;
                }
                let (lo, hi) = config.bin_edges(bin);
                rows.push(ReliabilityRow {
                    class: None,
                    bin_low: lo,
                    bin_high: hi,
                    mean_pred: conf_sum[bin] / count[bin] as f64,
                    observed: correct[bin] as f64 / count[bin] as f64,
                    count: count[bin],
                });
            }
        }
    }
    Ok(ReliabilityDiagram {
        mode,
        num_bins: m,
        n_samples: predictions.len(),
        rows,
    })
}

impl ReliabilityDiagram {
    /// Plot-ready CSV: `class,bin_low,bin_high,mean_pred,freq,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,bin_low,bin_high,mean_pred,freq,count\n");
        for row in &self.rows {
            let class = row
                .class
                .map(|c| c.to_string())
                .unwrap_or_else(|| "confidence".into());
            out.push_str(&format!(
                "{class},{:.6},{:.6},{:.6},{:.6},{}\n",
                row.bin_low, row.bin_high, row.mean_pred, row.observed, row.count
            ));
        }
        out
    }
}

/// Fraction of positions where the two label sequences agree.
pub fn agreement(predicted: &[usize], reference: &[usize]) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::Domain(format!(
            "agreement length mismatch: {} vs {}",
            predicted.len(),
            reference.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Domain("agreement over empty sequences".into()));
    }
    let hits = predicted
        .iter()
        .zip(reference)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Probability-weighted agreement of two per-input labelings over a world's
/// support: the exact `n -> infinity` limit of sampled agreement.
pub fn exact_agreement<F, G>(world: &DiscreteWorld, predicted: F, reference: G) -> f64
where
    F: Fn(usize, usize) -> usize,
    G: Fn(usize, usize) -> usize,
{
    world
        .support()
        .into_iter()
        .filter(|a| predicted(a.signal_id, a.bias_id) == reference(a.signal_id, a.bias_id))
        .map(|a| a.prob)
        .sum()
}
