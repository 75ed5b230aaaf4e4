//! Projected gradient ascent on the input against one way's cross-entropy.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ThreeWayModel, Way};
use crate::rng::{self, stream};
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" | "inf" => Ok(Norm::Linf),
            "l2" | "2" => Ok(Norm::L2),
            other => Err(Error::Usage(format!("unknown norm '{other}' (linf|l2)"))),
        }
    }
}

fn default_clamp() -> Option<[f64; 2]> {
    Some([0.0, 1.0])
}

/// Threat model and solver settings of one PGD run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    /// Seed for the random start; unused otherwise.
    #[serde(default)]
    pub seed: u64,
    /// Value range enforced after every step; `None` for unbounded features.
    #[serde(default = "default_clamp")]
    pub clamp: Option<[f64; 2]>,
}

impl AttackConfig {
    pub fn new(norm: Norm, epsilon: f64, alpha: f64, steps: usize) -> Self {
        AttackConfig {
            norm,
            epsilon,
            alpha,
            steps,
            random_start: false,
            seed: 0,
            clamp: default_clamp(),
        }
    }

    /// MNIST training attack: l2, eps 0.3, step 0.01, 5 steps.
    pub fn mnist_train() -> Self {
        Self::new(Norm::L2, 0.3, 0.01, 5)
    }

    /// MNIST evaluation attack: l2, eps 0.3, step 0.01, 10 steps.
    pub fn mnist_test() -> Self {
        Self::new(Norm::L2, 0.3, 0.01, 10)
    }

    pub fn cifar_train() -> Self {
        Self::new(Norm::Linf, 8.0 / 255.0, 2.0 / 255.0, 10)
    }

    pub fn cifar_test_linf() -> Self {
        Self::new(Norm::Linf, 8.0 / 255.0, 2.0 / 255.0, 20)
    }

    pub fn cifar_test_l2() -> Self {
        Self::new(Norm::L2, 0.3, 0.1, 20)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Validation(format!(
                "attack epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Validation(format!(
                "attack step size must be finite and > 0, got {}",
                self.alpha
            )));
        }
        if let Some([lo, hi]) = self.clamp {
            if !(lo < hi) {
                return Err(Error::Validation(format!("bad clamp range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!(
            "{} eps={} alpha={} k={}",
            self.norm, self.epsilon, self.alpha, self.steps
        )
    }
}

/// Gradient of the summed cross-entropy of `way` with respect to the input.
pub fn input_gradient<T: Scalar>(
    model: &ThreeWayModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    way: Way,
) -> Result<(Tensor<T>, T)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let xv = g.leaf(&x.clone().with_requires_grad(true));
    let logits = model.way_var(&mut g, &b, xv, way)?;
    let ce = g.cross_entropy(logits, y)?;
    // Summed rather than averaged so per-sample gradients are batch-size free.
    let loss = g.scale(ce, T::of(y.len() as f64));
    g.backward(loss)?;
    let grad = g.grad(xv).expect("input gradient").to_vec();
    Ok((Tensor::new(x.shape().to_vec(), grad)?, g.scalar(ce)))
}

fn project_rows<T: Scalar>(delta: &mut [T], per: usize, norm: Norm, eps: T) {
    match norm {
        Norm::Linf => delta.iter_mut().for_each(|d| *d = d.max(-eps).min(eps)),
        Norm::L2 => {
            for row in delta.chunks_mut(per) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if n > eps {
                    let s = eps / n;
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }
}

fn random_start<T: Scalar>(n: usize, per: usize, cfg: &AttackConfig) -> Vec<T> {
    let mut rng = rng::seeded(cfg.seed, stream::ATTACK_START);
    match cfg.norm {
        Norm::Linf => (0..n * per)
            .map(|_| T::of(rng::symmetric(&mut rng, cfg.epsilon)))
            .collect(),
        Norm::L2 => {
            // Uniform in the ball: Gaussian direction, radius eps * u^(1/D).
            let mut out = Vec::with_capacity(n * per);
            for _ in 0..n {
                let dir: Vec<f64> = (0..per).map(|_| rng.sample(StandardNormal)).collect();
                let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let r = cfg.epsilon * rng.random::<f64>().powf(1.0 / per as f64);
                out.extend(dir.iter().map(|v| T::of(v / len * r)));
            }
            out
        }
    }
}

/// Generates adversarial examples `x + delta` with `||delta|| <= eps`
/// (per sample) and every value inside the clamp range.
///
/// Each step ascends the chosen way's loss: sign steps for `linf`,
/// normalized-gradient steps for `l2`, followed by projection onto the ball
/// and the pixel range. The model is only read.
pub fn pgd<T: Scalar>(
    model: &ThreeWayModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    way: Way,
    cfg: &AttackConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let n = y.len();
    if x.shape().first() != Some(&n) {
        return Err(Error::dim("pgd labels", x.shape(), &[n]));
    }
    let per = x.len() / n;
    let (lo, hi) = match cfg.clamp {
        Some([lo, hi]) => (T::of(lo), T::of(hi)),
        None => (T::neg_infinity(), T::infinity()),
    };
    let eps = T::of(cfg.epsilon);
    let alpha = T::of(cfg.alpha);
    let clamp = |v: T| v.max(lo).min(hi);

    let mut adv: Vec<T> = if cfg.random_start && cfg.epsilon > 0.0 {
        let mut delta = random_start::<T>(n, per, cfg);
        project_rows(&mut delta, per, cfg.norm, eps);
        x.data().iter().zip(&delta).map(|(&a, &d)| clamp(a + d)).collect()
    } else {
        x.data().to_vec()
    };
    if cfg.epsilon == 0.0 {
        return Tensor::new(x.shape().to_vec(), adv);
    }

    let mut delta = vec![T::zero(); x.len()];
    let guard = T::of(1e-12);
    for _ in 0..cfg.steps {
        let cur = Tensor::new(x.shape().to_vec(), adv)?;
        let (grad, _) = input_gradient(model, &cur, y, way)?;
        adv = cur.into_data();
        for (i, d) in delta.iter_mut().enumerate() {
            *d = adv[i] - x.data()[i];
        }
        match cfg.norm {
            Norm::Linf => {
                for (d, &g) in delta.iter_mut().zip(grad.data()) {
                    if g > T::zero() {
                        *d += alpha;
                    } else if g < T::zero() {
                        *d -= alpha;
                    }
                }
            }
            Norm::L2 => {
                for (drow, grow) in delta.chunks_mut(per).zip(grad.data().chunks(per)) {
                    let gn = grow.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if gn < guard {
                        continue;
                    }
                    let s = alpha / gn;
                    drow.iter_mut().zip(grow).for_each(|(d, &g)| *d += s * g);
                }
            }
        }
        project_rows(&mut delta, per, cfg.norm, eps);
        for ((a, &xv), &d) in adv.iter_mut().zip(x.data()).zip(&delta) {
            *a = clamp(xv + d);
        }
    }
    Tensor::new(x.shape().to_vec(), adv)
}

/// Largest per-sample perturbation norm between `x` and `adv`.
pub fn max_perturbation<T: Scalar>(x: &Tensor<T>, adv: &Tensor<T>, norm: Norm) -> f64 {
    let n = x.shape()[0];
    let per = x.len() / n;
    x.data()
        .chunks(per)
        .zip(adv.data().chunks(per))
        .map(|(a, b)| {
            let diffs = a.iter().zip(b).map(|(&p, &q)| (q - p).as_f64());
            match norm {
                Norm::Linf => diffs.fold(0.0f64, |m, d| m.max(d.abs())),
                Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            }
        })
        .fold(0.0, f64::max)
}

/// Virtual labels: the way's own argmax on `x_adv`, plus the mask of samples
/// it misclassifies (the only ones that carry asymmetric supervision).
pub fn pseudo_label<T: Scalar>(
    model: &ThreeWayModel<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    way: Way,
) -> Result<(Vec<usize>, Vec<bool>)> {
    let yhat = model.predict(x_adv, way)?;
    let mask = yhat.iter().zip(y).map(|(a, b)| a != b).collect();
    Ok((yhat, mask))
}
