//! Discrete binary testbed for the robustness/accuracy dilemma.
//!
//! Each feature `x_i` equals `eta_i * y` with probability `p` and `-eta_i * y`
//! otherwise, independently, with `y` uniform on `{-1, +1}`. Linear sign
//! classifiers are scored exactly by enumerating all `2^d` agreement patterns,
//! both clean and under the worst-case `linf` adversary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Largest feature count accepted by the enumeration oracle.
pub const MAX_ENUM_DIM: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DilemmaSpec {
    pub p: f64,
    pub d: usize,
    pub eta: Vec<f64>,
    pub epsilon: f64,
}

impl Default for DilemmaSpec {
    /// Four weak features of magnitude 0.01, three strong ones of magnitude 1.
    fn default() -> Self {
        DilemmaSpec {
            p: 0.8,
            d: 7,
            eta: vec![0.01, 0.01, 0.01, 0.01, 1.0, 1.0, 1.0],
            epsilon: 0.02,
        }
    }
}

impl DilemmaSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.5 && self.p <= 1.0) {
            return Err(Error::Validation(format!("p must lie in (0.5, 1], got {}", self.p)));
        }
        if self.d == 0 || self.d % 2 == 0 {
            return Err(Error::Validation(format!("d must be odd, got {}", self.d)));
        }
        if self.eta.len() != self.d {
            return Err(Error::Validation(format!(
                "eta has {} entries for d = {}",
                self.eta.len(),
                self.d
            )));
        }
        if let Some(e) = self.eta.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(Error::Validation(format!("eta entries must be positive, got {e}")));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Validation(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        DilemmaSpec { epsilon, ..self.clone() }
    }
}

/// `h(x) = sign(w . x)`; a zero score counts as wrong for either label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSignClassifier {
    pub name: String,
    pub w: Vec<f64>,
}

impl LinearSignClassifier {
    /// Weights `1 / eta_i`: every feature gets one equal vote.
    pub fn h0(spec: &DilemmaSpec) -> Self {
        LinearSignClassifier {
            name: "h0".into(),
            w: spec.eta.iter().map(|e| 1.0 / e).collect(),
        }
    }

    /// Votes only with the features an `epsilon` adversary cannot flip.
    pub fn h1(spec: &DilemmaSpec) -> Self {
        LinearSignClassifier {
            name: "h1".into(),
            w: spec
                .eta
                .iter()
                .map(|&e| if 2.0 * e > spec.epsilon { 1.0 / e } else { 0.0 })
                .collect(),
        }
    }

    fn check(&self, spec: &DilemmaSpec) -> Result<()> {
        if self.w.len() != spec.d {
            return Err(Error::dim("classifier weights", &[self.w.len()], &[spec.d]));
        }
        if self.w.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("classifier weights must be finite".into()));
        }
        Ok(())
    }

    /// True when `sign(w . x') == y` after the worst-case shift.
    pub fn correct(&self, x: &[f64], y: f64, epsilon: f64) -> bool {
        let score: f64 = self
            .w
            .iter()
            .zip(x)
            .map(|(&w, &v)| w * (v - epsilon * y * sign(w)))
            .sum();
        score * y > 0.0
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_enum(spec: &DilemmaSpec, clf: &LinearSignClassifier) -> Result<()> {
    spec.validate()?;
    clf.check(spec)?;
    if spec.d > MAX_ENUM_DIM {
        return Err(Error::Validation(format!(
            "enumeration refused for d = {} (limit {MAX_ENUM_DIM})",
            spec.d
        )));
    }
    Ok(())
}

fn enumerate(spec: &DilemmaSpec, clf: &LinearSignClassifier, epsilon: f64) -> f64 {
    let d = spec.d;
    let mut x = vec![0.0; d];
    let mut acc = 0.0;
    for y in [1.0, -1.0] {
        for pattern in 0u32..(1u32 << d) {
            let mut weight = 0.5;
            for (i, xi) in x.iter_mut().enumerate() {
                if pattern >> i & 1 == 1 {
                    *xi = spec.eta[i] * y;
                    weight *= spec.p;
                } else {
                    *xi = -spec.eta[i] * y;
                    weight *= 1.0 - spec.p;
                }
            }
            if clf.correct(&x, y, epsilon) {
                acc += weight;
            }
        }
    }
    acc
}

/// Exact expected clean accuracy over all `2^d` agreement patterns.
pub fn exact_standard_accuracy(spec: &DilemmaSpec, clf: &LinearSignClassifier) -> Result<f64> {
    check_enum(spec, clf)?;
    Ok(enumerate(spec, clf, 0.0))
}

/// Exact expected accuracy when every feature is shifted by `epsilon`
/// against the classifier's vote, the optimal `linf` attack on a linear
/// score. A feature with `2 * eta_i <= epsilon` thereby reaches `-eta_i * y`.
pub fn exact_adversarial_accuracy(spec: &DilemmaSpec, clf: &LinearSignClassifier) -> Result<f64> {
    check_enum(spec, clf)?;
    Ok(enumerate(spec, clf, spec.epsilon))
}

/// `n` draws, row-major `n x d`, labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DilemmaSample {
    pub d: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl DilemmaSample {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Two-class dataset with `y = -1` as class 0 and `y = +1` as class 1.
    pub fn to_dataset(&self, split: &str) -> Result<Dataset> {
        let labels = self.y.iter().map(|&y| usize::from(y > 0.0)).collect();
        let data = self.x.iter().map(|&v| v as f32).collect();
        Dataset::new(vec![self.d], data, labels, 2, split)
    }
}

pub fn sample_dataset(spec: &DilemmaSpec, n: usize, seed: u64) -> Result<DilemmaSample> {
    spec.validate()?;
    let mut rng = rng::seeded(seed, stream::SAMPLE);
    let mut x = Vec::with_capacity(n * spec.d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let label = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for &eta in &spec.eta {
            let agree = rng.random::<f64>() < spec.p;
            x.push(if agree { eta * label } else { -eta * label });
        }
        y.push(label);
    }
    Ok(DilemmaSample { d: spec.d, x, y })
}

/// Empirical accuracy on `n` fresh draws, optionally under the worst-case shift.
pub fn monte_carlo_accuracy(
    spec: &DilemmaSpec,
    clf: &LinearSignClassifier,
    n: usize,
    seed: u64,
    adversarial: bool,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Validation("empty sample".into()));
    }
    clf.check(spec)?;
    let sample = sample_dataset(spec, n, seed)?;
    let eps = if adversarial { spec.epsilon } else { 0.0 };
    let hits = (0..n).filter(|&i| clf.correct(sample.row(i), sample.y[i], eps)).count();
    Ok(hits as f64 / n as f64)
}

/// Binomial standard error of an accuracy estimate.
pub fn binomial_sigma(q: f64, n: usize) -> f64 {
    (q * (1.0 - q) / n as f64).sqrt()
}

/// A closed-form accuracy expression and its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub expression: String,
    pub value: f64,
}

/// Truncated closed forms commonly quoted for the default setting; they
/// drop the `p`-weighted factors of the binomial terms.
pub fn quoted_closed_form(name: &str, spec: &DilemmaSpec) -> Option<ClosedForm> {
    if *spec != DilemmaSpec::default() {
        return None;
    }
    match name {
        "h0" => Some(ClosedForm {
            expression: "1 - 35 * 0.0016".into(),
            value: 0.944,
        }),
        "h1" => Some(ClosedForm {
            expression: "1 - 3 * 0.04".into(),
            value: 0.88,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRow {
    pub classifier: LinearSignClassifier,
    pub exact_standard: f64,
    pub exact_adversarial: f64,
    pub monte_carlo_standard: Estimate,
    pub monte_carlo_adversarial: Estimate,
    pub quoted_standard: Option<ClosedForm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilemmaReport {
    pub spec: DilemmaSpec,
    pub n: usize,
    pub seed: u64,
    pub rows: Vec<ClassifierRow>,
}

/// Exact and sampled accuracies of `h0` and `h1`.
pub fn report(spec: &DilemmaSpec, n: usize, seed: u64) -> Result<DilemmaReport> {
    let mut rows = Vec::new();
    for clf in [LinearSignClassifier::h0(spec), LinearSignClassifier::h1(spec)] {
        let mc = |adv| -> Result<Estimate> {
            let value = monte_carlo_accuracy(spec, &clf, n, seed, adv)?;
            Ok(Estimate { value, sigma: binomial_sigma(value, n) })
        };
        rows.push(ClassifierRow {
            exact_standard: exact_standard_accuracy(spec, &clf)?,
            exact_adversarial: exact_adversarial_accuracy(spec, &clf)?,
            monte_carlo_standard: mc(false)?,
            monte_carlo_adversarial: mc(true)?,
            quoted_standard: quoted_closed_form(&clf.name, spec),
            classifier: clf,
        });
    }
    Ok(DilemmaReport { spec: spec.clone(), n, seed, rows })
}

impl DilemmaReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "p={} d={} eps={} n={}\n{:<4} {:>10} {:>10} {:>16} {:>16} {:>8}\n",
            self.spec.p, self.spec.d, self.spec.epsilon, self.n,
            "clf", "exact std", "exact adv", "mc std", "mc adv", "quoted"
        );
        for r in &self.rows {
            let quoted = r
                .quoted_standard
                .as_ref()
                .map_or("-".to_string(), |q| format!("{}", q.value));
            out.push_str(&format!(
                "{:<4} {:>10.6} {:>10.6} {:>9.4}±{:<6.4} {:>9.4}±{:<6.4} {:>8}\n",
                r.classifier.name,
                r.exact_standard,
                r.exact_adversarial,
                r.monte_carlo_standard.value,
                r.monte_carlo_standard.sigma,
                r.monte_carlo_adversarial.value,
                r.monte_carlo_adversarial.sigma,
                quoted
            ));
        }
        out
    }
}

/// Exact adversarial accuracy of `clf` at each budget.
pub fn adversarial_curve(spec: &DilemmaSpec, clf: &LinearSignClassifier, eps: &[f64]) -> Result<Vec<f64>> {
    eps.iter()
        .map(|&e| exact_adversarial_accuracy(&spec.with_epsilon(e), clf))
        .collect()
}
