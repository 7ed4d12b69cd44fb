//! Finite synthetic worlds with exact posterior queries.
//!
//! A [`DiscreteWorld`] is a joint distribution over (signal value, bias
//! value, label) factored as `P(y) * P(s|y) * P(b|y)`, so the signal and the
//! bias are conditionally independent given the label by construction. All
//! posteriors are computed by direct Bayes inversion of the enumerated
//! joint; this module is the oracle the learned components are tested
//! against.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prob::{argmax, normalize, Dataset, LabelSpace, ProbVector, Provenance, Sample};
use crate::{Error, Result};

/// Hard cap on `|S| * |B| * K`; worlds must stay exactly enumerable.
pub const MAX_ATOMS: usize = 1_000_000;

/// Tolerance when validating that a conditional column sums to one.
pub const COLUMN_TOL: f64 = 1e-6;

/// Serialization schema for a world: `{K, label_prior, signal_table,
/// bias_table}`. Tables are row-major with one row per feature value and one
/// column per label; column `y` is the distribution of the feature given
/// `Y = y`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub label_prior: Vec<f64>,
    pub signal_table: Vec<Vec<f64>>,
    pub bias_table: Vec<Vec<f64>>,
}

/// A fully enumerable world satisfying `X^S ⊥ X^B | Y` by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldSpec", into = "WorldSpec")]
pub struct DiscreteWorld {
    k: usize,
    label_prior: Vec<f64>,
    /// `signal_given_label[s][y] = P(X^S = s | Y = y)`.
    signal_given_label: Vec<Vec<f64>>,
    /// `bias_given_label[b][y] = P(X^B = b | Y = y)`.
    bias_given_label: Vec<Vec<f64>>,
}

impl TryFrom<WorldSpec> for DiscreteWorld {
    type Error = Error;

    fn try_from(spec: WorldSpec) -> Result<Self> {
        build_world(spec.k, spec.label_prior, spec.signal_table, spec.bias_table)
    }
}

impl From<DiscreteWorld> for WorldSpec {
    fn from(w: DiscreteWorld) -> Self {
        WorldSpec {
            k: w.k,
            label_prior: w.label_prior,
            signal_table: w.signal_given_label,
            bias_table: w.bias_given_label,
        }
    }
}

fn validate_table(name: &str, table: &[Vec<f64>], k: usize) -> Result<()> {
    if table.is_empty() {
        return Err(Error::Construction(format!("{name} has no rows")));
    }
    for (r, row) in table.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Construction(format!(
                "{name} row {r} has {} entries, expected {k}",
                row.len()
            )));
        }
        for (c, &v) in row.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Construction(format!(
                    "{name}[{r}][{c}] is {v}, expected a finite non-negative probability"
                )));
            }
        }
    }
    for c in 0..k {
        let col_sum: f64 = table.iter().map(|row| row[c]).sum();
        if (col_sum - 1.0).abs() > COLUMN_TOL {
            return Err(Error::Construction(format!(
                "{name} column {c} sums to {col_sum}, expected 1 within {COLUMN_TOL:e}"
            )));
        }
    }
    Ok(())
}

/// Build a world from its factor tables, validating every invariant.
pub fn build_world(
    k: usize,
    label_prior: Vec<f64>,
    signal_table: Vec<Vec<f64>>,
    bias_table: Vec<Vec<f64>>,
) -> Result<DiscreteWorld> {
    if k < 2 {
        return Err(Error::Construction(format!("world needs K >= 2, got {k}")));
    }
    if label_prior.len() != k {
        return Err(Error::Construction(format!(
            "label prior has {} entries, expected {k}",
            label_prior.len()
        )));
    }
    for (i, &p) in label_prior.iter().enumerate() {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Construction(format!(
                "label prior entry {i} is {p}, expected a finite non-negative probability"
            )));
        }
    }
    let prior_sum: f64 = label_prior.iter().sum();
    if (prior_sum - 1.0).abs() > COLUMN_TOL {
        return Err(Error::Construction(format!(
            "label prior sums to {prior_sum}, expected 1 within {COLUMN_TOL:e}"
        )));
    }
    validate_table("signal_table", &signal_table, k)?;
    validate_table("bias_table", &bias_table, k)?;

    let atoms = signal_table
        .len()
        .checked_mul(bias_table.len())
        .and_then(|v| v.checked_mul(k))
        .ok_or_else(|| Error::Construction("atom count overflows".into()))?;
    if atoms > MAX_ATOMS {
        return Err(Error::Construction(format!(
            "world has {atoms} atoms, exceeding the enumerability cap of {MAX_ATOMS}"
        )));
    }

    let world = DiscreteWorld {
        k,
        label_prior,
        signal_given_label: signal_table,
        bias_given_label: bias_table,
    };

    // The factored joint must be a distribution.
    let total: f64 = world.enumerate_atoms().map(|a| a.prob).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Construction(format!(
            "enumerated joint sums to {total}, expected 1 within 1e-9"
        )));
    }
    Ok(world)
}

/// One positive-or-zero probability cell of the enumerated input space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub signal_id: usize,
    pub bias_id: usize,
    /// Marginal input probability `P(X^S = s, X^B = b)`.
    pub prob: f64,
}

/// How to produce an out-of-distribution variant of a world.
#[derive(Debug, Clone)]
pub enum BiasShift {
    /// Replace every column of the bias table with the original bias
    /// marginal, severing the bias-label correlation.
    Remove,
    /// Reverse the label order of the bias table columns, reversing the
    /// bias-label correlation. An involution.
    Flip,
    /// Replace the bias table wholesale.
    Custom(Vec<Vec<f64>>),
}

/// Global certainty level of the signal principle: the minimum over
/// reachable signal values of the largest signal-posterior entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertaintyLevel {
    pub alpha: f64,
}

impl DiscreteWorld {
    pub fn num_labels(&self) -> usize {
        self.k
    }

    pub fn num_signals(&self) -> usize {
        self.signal_given_label.len()
    }

    pub fn num_biases(&self) -> usize {
        self.bias_given_label.len()
    }

    pub fn label_space(&self) -> LabelSpace {
        LabelSpace::new(self.k).expect("validated at construction")
    }

    pub fn label_prior(&self) -> ProbVector {
        ProbVector::new(self.label_prior.clone()).expect("validated at construction")
    }

    /// `P(X^S = s, X^B = b, Y = y)` from the factorization.
    pub fn joint(&self, signal_id: usize, bias_id: usize, label: usize) -> f64 {
        self.label_prior[label]
            * self.signal_given_label[signal_id][label]
            * self.bias_given_label[bias_id][label]
    }

    /// Marginal `P(X^S = s, X^B = b)`.
    pub fn input_prob(&self, signal_id: usize, bias_id: usize) -> f64 {
        (0..self.k).map(|y| self.joint(signal_id, bias_id, y)).sum()
    }

    /// Marginal `P(X^B = b)`.
    pub fn bias_marginal(&self, bias_id: usize) -> f64 {
        (0..self.k)
            .map(|y| self.label_prior[y] * self.bias_given_label[bias_id][y])
            .sum()
    }

    /// All input cells, including zero-probability ones.
    pub fn enumerate_atoms(&self) -> impl Iterator<Item = Atom> + '_ {
        (0..self.num_signals()).flat_map(move |s| {
            (0..self.num_biases()).map(move |b| Atom {
                signal_id: s,
                bias_id: b,
                prob: self.input_prob(s, b),
            })
        })
    }

    /// Input cells with positive probability.
    pub fn support(&self) -> Vec<Atom> {
        self.enumerate_atoms().filter(|a| a.prob > 0.0).collect()
    }

    /// Exact `P(Y | X^S = s, X^B = b)`. Errors if the conditioning event has
    /// zero probability.
    pub fn posterior_full(&self, signal_id: usize, bias_id: usize) -> Result<ProbVector> {
        self.check_ids(signal_id, bias_id)?;
        let weights: Vec<f64> = (0..self.k).map(|y| self.joint(signal_id, bias_id, y)).collect();
        normalize(&weights).map_err(|_| {
            Error::Domain(format!(
                "conditioning event (signal {signal_id}, bias {bias_id}) has zero probability"
            ))
        })
    }

    /// Exact `P(Y | X^S = s)`.
    pub fn posterior_signal(&self, signal_id: usize) -> Result<ProbVector> {
        if signal_id >= self.num_signals() {
            return Err(Error::Domain(format!("signal id {signal_id} out of range")));
        }
        let weights: Vec<f64> = (0..self.k)
            .map(|y| self.label_prior[y] * self.signal_given_label[signal_id][y])
            .collect();
        normalize(&weights).map_err(|_| {
            Error::Domain(format!("signal value {signal_id} has zero probability"))
        })
    }

    /// Exact `P(Y | X^B = b)`.
    pub fn posterior_bias(&self, bias_id: usize) -> Result<ProbVector> {
        if bias_id >= self.num_biases() {
            return Err(Error::Domain(format!("bias id {bias_id} out of range")));
        }
        let weights: Vec<f64> = (0..self.k)
            .map(|y| self.label_prior[y] * self.bias_given_label[bias_id][y])
            .collect();
        normalize(&weights)
            .map_err(|_| Error::Domain(format!("bias value {bias_id} has zero probability")))
    }

    fn check_ids(&self, signal_id: usize, bias_id: usize) -> Result<()> {
        if signal_id >= self.num_signals() {
            return Err(Error::Domain(format!("signal id {signal_id} out of range")));
        }
        if bias_id >= self.num_biases() {
            return Err(Error::Domain(format!("bias id {bias_id} out of range")));
        }
        Ok(())
    }

    /// Draw `n` i.i.d. samples from the joint. Identical seeds give
    /// identical datasets.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Domain("sample count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior_cdf = cumulative(&self.label_prior);
        let signal_cdfs: Vec<Vec<f64>> = (0..self.k)
            .map(|y| cumulative(&column(&self.signal_given_label, y)))
            .collect();
        let bias_cdfs: Vec<Vec<f64>> = (0..self.k)
            .map(|y| cumulative(&column(&self.bias_given_label, y)))
            .collect();

        let samples: Vec<Sample> = (0..n)
            .map(|_| {
                let y = draw(&prior_cdf, &mut rng);
                let s = draw(&signal_cdfs[y], &mut rng);
                let b = draw(&bias_cdfs[y], &mut rng);
                Sample {
                    signal_id: s,
                    bias_id: b,
                    label: y,
                }
            })
            .collect();
        Dataset::new(
            samples,
            self.label_space(),
            Provenance {
                seed,
                world_id: self.fingerprint(),
            },
        )
    }

    /// Produce an out-of-distribution variant: the label prior and the
    /// signal table are untouched, only the bias table changes.
    pub fn shift_bias(&self, mode: &BiasShift) -> Result<DiscreteWorld> {
        let bias_table = match mode {
            BiasShift::Remove => {
                let marginal: Vec<f64> =
                    (0..self.num_biases()).map(|b| self.bias_marginal(b)).collect();
                marginal.iter().map(|&m| vec![m; self.k]).collect()
            }
            BiasShift::Flip => self
                .bias_given_label
                .iter()
                .map(|row| (0..self.k).map(|y| row[self.k - 1 - y]).collect())
                .collect(),
            BiasShift::Custom(table) => table.clone(),
        };
        build_world(
            self.k,
            self.label_prior.clone(),
            self.signal_given_label.clone(),
            bias_table,
        )
    }

    /// Exact certainty level of the signal principle.
    pub fn certainty_alpha(&self) -> CertaintyLevel {
        let mut alpha = 1.0f64;
        for s in 0..self.num_signals() {
            if let Ok(post) = self.posterior_signal(s) {
                let top = post.entries().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                alpha = alpha.min(top);
            }
        }
        CertaintyLevel { alpha }
    }

    /// Max entrywise deviation, over the positive-probability support,
    /// between `P(Y|X)` and the normalized product
    /// `P(Y|X^B) * P(Y|X^S) / P(Y)`.
    pub fn decomposition_max_deviation(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for atom in self.support() {
            let full = self.posterior_full(atom.signal_id, atom.bias_id)?;
            let sig = self.posterior_signal(atom.signal_id)?;
            let bias = self.posterior_bias(atom.bias_id)?;
            let product: Vec<f64> = (0..self.k)
                .map(|y| bias.get(y) * sig.get(y) / self.label_prior[y].max(crate::PROB_FLOOR))
                .collect();
            let recomposed = normalize(&product)?;
            for y in 0..self.k {
                worst = worst.max((full.get(y) - recomposed.get(y)).abs());
            }
        }
        Ok(worst)
    }

    /// Stable content fingerprint (FNV-1a over the canonical JSON).
    pub fn fingerprint(&self) -> String {
        let json = self.to_json();
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in json.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<DiscreteWorld> {
        Ok(serde_json::from_str(text)?)
    }
}

fn column(table: &[Vec<f64>], y: usize) -> Vec<f64> {
    table.iter().map(|row| row[y]).collect()
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|&p| {
            acc += p;
            acc
        })
        .collect()
}

fn draw<R: Rng>(cdf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>() * cdf.last().copied().unwrap_or(1.0);
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

/// Per-atom oracle labels and posteriors for a world.
#[derive(Debug, Clone)]
pub struct WorldLabels {
    pub atoms: Vec<AtomRecord>,
}

/// Oracle record for one positive-probability input cell.
#[derive(Debug, Clone)]
pub struct AtomRecord {
    pub signal_id: usize,
    pub bias_id: usize,
    pub prob: f64,
    pub posterior_full: ProbVector,
    pub posterior_signal: ProbVector,
    pub posterior_bias: ProbVector,
    /// Argmax of the full posterior (ideal in-distribution predictor).
    pub y_hat: usize,
    /// Argmax of the signal posterior (label of the signal principle).
    pub y_signal: usize,
}

impl WorldLabels {
    pub fn compute(world: &DiscreteWorld) -> Result<WorldLabels> {
        let atoms = world
            .support()
            .into_iter()
            .map(|a| {
                let posterior_full = world.posterior_full(a.signal_id, a.bias_id)?;
                let posterior_signal = world.posterior_signal(a.signal_id)?;
                let posterior_bias = world.posterior_bias(a.bias_id)?;
                Ok(AtomRecord {
                    signal_id: a.signal_id,
                    bias_id: a.bias_id,
                    prob: a.prob,
                    y_hat: argmax(posterior_full.entries()),
                    y_signal: argmax(posterior_signal.entries()),
                    posterior_full,
                    posterior_signal,
                    posterior_bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WorldLabels { atoms })
    }
}

/// Uniformly random stochastic column with entries bounded away from zero,
/// so every conditioning event in generated worlds is reachable.
fn random_column<R: Rng>(rows: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn random_table<R: Rng>(rows: usize, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<f64>> = (0..k).map(|_| random_column(rows, rng)).collect();
    (0..rows).map(|r| (0..k).map(|c| cols[c][r]).collect()).collect()
}

/// Random world with `K in 2..=max_k`, `|S| in 2..=max_s`, `|B| in 2..=max_b`.
pub fn random_world<R: Rng>(rng: &mut R, max_k: usize, max_s: usize, max_b: usize) -> DiscreteWorld {
    let k = rng.gen_range(2..=max_k.max(2));
    let s = rng.gen_range(2..=max_s.max(2));
    let b = rng.gen_range(2..=max_b.max(2));
    let prior = random_column(k, rng);
    let signal = random_table(s, k, rng);
    let bias = random_table(b, k, rng);
    build_world(k, prior, signal, bias).expect("randomly generated tables are valid")
}

/// Random binary world with an exactly balanced label prior.
pub fn random_balanced_binary_world<R: Rng>(rng: &mut R, max_s: usize, max_b: usize) -> DiscreteWorld {
    let s = rng.gen_range(2..=max_s.max(2));
    let b = rng.gen_range(2..=max_b.max(2));
    let signal = random_table(s, 2, rng);
    let bias = random_table(b, 2, rng);
    build_world(2, vec![0.5, 0.5], signal, bias).expect("randomly generated tables are valid")
}
