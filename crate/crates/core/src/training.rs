//! Loss assembly for standard and asymmetric adversarial training, and the
//! SGD loop around it.
//!
//! One training step generates up to three independent attacks from the
//! same natural batch (against the standard, robust and non-robust ways),
//! freezes the adversarial inputs and virtual labels, then builds a single
//! graph holding every enabled term:
//!
//! * `st`: cross-entropy of all three ways on natural inputs;
//! * `as`: on standard-way adversarials the standard way gets wrong, the
//!   robust way is fit to `y` and the non-robust way to the wrong label;
//! * `ar`: robust way on robust-way adversarials, full batch;
//! * `an`: non-robust way on its own misclassified adversarials, fit to the
//!   label it predicted.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, pseudo_label, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, WayAccuracy};
use crate::model::{Bound, ThreeWayModel, Way};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Which loss terms are summed into the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub use_st: bool,
    pub use_as: bool,
    pub use_ar: bool,
    pub use_an: bool,
}

impl LossConfig {
    pub fn st_only() -> Self {
        LossConfig { use_st: true, use_as: false, use_ar: false, use_an: false }
    }

    pub fn aat() -> Self {
        LossConfig { use_as: true, ..Self::st_only() }
    }

    pub fn aat_plus_plus() -> Self {
        LossConfig { use_st: true, use_as: true, use_ar: true, use_an: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.use_st || self.use_as || self.use_ar || self.use_an) {
            return Err(Error::Validation("loss config enables no term".into()));
        }
        Ok(())
    }
}

impl fmt::Display for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.use_st, "st"),
            (self.use_as, "as"),
            (self.use_ar, "ar"),
            (self.use_an, "an"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LossConfig {
    type Err = Error;

    /// Comma list of `st`, `as`, `ar`, `an`; also `aat` and `aat++`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "aat" => return Ok(Self::aat()),
            "aat++" => return Ok(Self::aat_plus_plus()),
            _ => {}
        }
        let mut cfg = LossConfig { use_st: false, use_as: false, use_ar: false, use_an: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let flag = match part {
                "st" => &mut cfg.use_st,
                "as" => &mut cfg.use_as,
                "ar" => &mut cfg.use_ar,
                "an" => &mut cfg.use_an,
                other => return Err(Error::Usage(format!("unknown loss term '{other}' (st,as,ar,an)"))),
            };
            *flag = true;
        }
        cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Divisor of the masked asymmetric terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskDenominator {
    /// Mean over misclassified samples only.
    #[default]
    Masked,
    /// Sum over misclassified samples divided by the batch size.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epoch indices at which the learning rate is multiplied by 0.1.
    #[serde(default)]
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub attack_train: AttackConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub mask_denominator: MaskDenominator,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("lr", self.lr)?;
        finite_nonneg("momentum", self.momentum)?;
        finite_nonneg("weight_decay", self.weight_decay)?;
        if self.momentum >= 1.0 {
            return Err(Error::Validation(format!("momentum must be < 1, got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        if let Some(&m) = self.milestones.last() {
            if m >= self.epochs {
                return Err(Error::Validation(format!(
                    "milestone {m} is not below the epoch count {}",
                    self.epochs
                )));
            }
        }
        self.attack_train.validate()?;
        self.loss.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * 0.1f64.powi(decays as i32)
    }
}

/// Values of the individual terms for one batch (or their epoch means).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub st: f64,
    #[serde(rename = "as")]
    pub as_: f64,
    pub ar: f64,
    pub an: f64,
    pub total: f64,
    /// Fraction of the batch misclassified by the standard way under attack.
    pub as_mask: f64,
    /// Fraction of the batch misclassified by the non-robust way under attack.
    pub an_mask: f64,
}

impl LossTerms {
    fn first_non_finite(&self) -> Option<&'static str> {
        [("st", self.st), ("as", self.as_), ("ar", self.ar), ("an", self.an), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.st += o.st * s;
        self.as_ += o.as_ * s;
        self.ar += o.ar * s;
        self.an += o.an * s;
        self.total += o.total * s;
        self.as_mask += o.as_mask * s;
        self.an_mask += o.an_mask * s;
    }
}

/// Frozen adversarial inputs and virtual labels of one batch.
struct AdvBatch<T: Scalar> {
    standard: Option<Masked<T>>,
    robust: Option<Tensor<T>>,
    nonrobust: Option<Masked<T>>,
}

/// Misclassified rows of an adversarial batch with their original and
/// predicted labels.
struct Masked<T: Scalar> {
    x: Option<Tensor<T>>,
    y: Vec<usize>,
    yhat: Vec<usize>,
    fraction: f64,
}

fn masked<T: Scalar>(
    model: &ThreeWayModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    way: Way,
    attack: &AttackConfig,
) -> Result<Masked<T>> {
    let adv = pgd(model, x, y, way, attack)?;
    let (pred, mask) = pseudo_label(model, &adv, y, way)?;
    let keep: Vec<usize> = (0..y.len()).filter(|&i| mask[i]).collect();
    let per = adv.len() / y.len();
    let fraction = keep.len() as f64 / y.len() as f64;
    let ys: Vec<usize> = keep.iter().map(|&i| y[i]).collect();
    let yhat: Vec<usize> = keep.iter().map(|&i| pred[i]).collect();
    for (a, b) in ys.iter().zip(&yhat) {
        assert_ne!(a, b, "virtual label equals the true label on a masked sample");
    }
    if keep.is_empty() {
        return Ok(Masked { x: None, y: ys, yhat, fraction });
    }
    let mut data = Vec::with_capacity(keep.len() * per);
    for &i in &keep {
        data.extend_from_slice(&adv.data()[i * per..(i + 1) * per]);
    }
    let mut shape = adv.shape().to_vec();
    shape[0] = keep.len();
    Ok(Masked { x: Some(Tensor::new(shape, data)?), y: ys, yhat, fraction })
}

fn prepare<T: Scalar>(
    model: &ThreeWayModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    loss: &LossConfig,
    attack: &AttackConfig,
) -> Result<AdvBatch<T>> {
    Ok(AdvBatch {
        standard: if loss.use_as { Some(masked(model, x, y, Way::Standard, attack)?) } else { None },
        robust: if loss.use_ar { Some(pgd(model, x, y, Way::Robust, attack)?) } else { None },
        nonrobust: if loss.use_an { Some(masked(model, x, y, Way::NonRobust, attack)?) } else { None },
    })
}

/// Graph nodes of the enabled, non-empty terms.
struct TermVars {
    st: Option<Var>,
    as_: Option<Var>,
    ar: Option<Var>,
    an: Option<Var>,
    total: Option<Var>,
}

fn assemble<T: Scalar>(
    model: &ThreeWayModel<T>,
    g: &mut Graph<T>,
    b: &Bound,
    x: &Tensor<T>,
    y: &[usize],
    adv: &AdvBatch<T>,
    loss: &LossConfig,
    denom: MaskDenominator,
) -> Result<TermVars> {
    let n = y.len() as f64;
    let mask_scale = |g: &mut Graph<T>, v: Var, m: usize| match denom {
        MaskDenominator::Masked => v,
        MaskDenominator::Batch => g.scale(v, T::of(m as f64 / n)),
    };

    let st = if loss.use_st {
        let xv = g.constant(x);
        let [s, r, nr] = model.all_ways_var(g, b, xv)?;
        let ls = g.cross_entropy(s, y)?;
        let lr = g.cross_entropy(r, y)?;
        let ln = g.cross_entropy(nr, y)?;
        let sr = g.add(ls, lr)?;
        Some(g.add(sr, ln)?)
    } else {
        None
    };

    let as_ = match adv.standard.as_ref() {
        Some(Masked { x: Some(xa), y: ys, yhat, .. }) => {
            let xv = g.constant(xa);
            let [_, r, nr] = model.all_ways_var(g, b, xv)?;
            let lr = g.cross_entropy(r, ys)?;
            let ln = g.cross_entropy(nr, yhat)?;
            let sum = g.add(lr, ln)?;
            Some(mask_scale(g, sum, ys.len()))
        }
        _ => None,
    };

    let ar = match adv.robust.as_ref() {
        Some(xa) => {
            let xv = g.constant(xa);
            let r = model.way_var(g, b, xv, Way::Robust)?;
            Some(g.cross_entropy(r, y)?)
        }
        None => None,
    };

    let an = match adv.nonrobust.as_ref() {
        Some(Masked { x: Some(xa), yhat, .. }) => {
            let xv = g.constant(xa);
            let nr = model.way_var(g, b, xv, Way::NonRobust)?;
            let l = g.cross_entropy(nr, yhat)?;
            Some(mask_scale(g, l, yhat.len()))
        }
        _ => None,
    };

    let mut total: Option<Var> = None;
    for v in [st, as_, ar, an].into_iter().flatten() {
        total = Some(match total {
            Some(t) => g.add(t, v)?,
            None => v,
        });
    }
    Ok(TermVars { st, as_, ar, an, total })
}

fn term_values<T: Scalar>(g: &Graph<T>, t: &TermVars, adv: &AdvBatch<T>) -> LossTerms {
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).as_f64());
    LossTerms {
        st: val(t.st),
        as_: val(t.as_),
        ar: val(t.ar),
        an: val(t.an),
        total: val(t.total),
        as_mask: adv.standard.as_ref().map_or(0.0, |m| m.fraction),
        an_mask: adv.nonrobust.as_ref().map_or(0.0, |m| m.fraction),
    }
}

/// Evaluates the enabled terms on one batch and, when `grads` is set, adds
/// the gradient of their sum into the model's parameter gradients.
pub fn loss_step<T: Scalar>(
    model: &mut ThreeWayModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    loss: &LossConfig,
    attack: &AttackConfig,
    denom: MaskDenominator,
    grads: bool,
) -> Result<LossTerms> {
    let adv = prepare(model, x, y, loss, attack)?;
    let mut g = Graph::new();
    let b = model.bind(&mut g, grads);
    let vars = assemble(model, &mut g, &b, x, y, &adv, loss, denom)?;
    let terms = term_values(&g, &vars, &adv);
    if grads && terms.first_non_finite().is_none() {
        if let Some(t) = vars.total {
            g.backward(t)?;
            model.accumulate_grads(&g, &b);
        }
    }
    Ok(terms)
}

fn single_term<T: Scalar>(
    model: &ThreeWayModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    loss: LossConfig,
    attack: &AttackConfig,
) -> Result<LossTerms> {
    let adv = prepare(model, x, y, &loss, attack)?;
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let vars = assemble(model, &mut g, &b, x, y, &adv, &loss, MaskDenominator::Masked)?;
    Ok(term_values(&g, &vars, &adv))
}

const NONE: LossConfig = LossConfig { use_st: false, use_as: false, use_ar: false, use_an: false };

/// Sum of the three ways' mean cross-entropies on natural inputs.
pub fn loss_st<T: Scalar>(model: &ThreeWayModel<T>, x: &Tensor<T>, y: &[usize]) -> Result<f64> {
    let unused = AttackConfig::new(crate::attack::Norm::Linf, 0.0, 1.0, 0);
    Ok(single_term(model, x, y, LossConfig { use_st: true, ..NONE }, &unused)?.st)
}

/// Asymmetric term on standard-way adversarials; 0 when none is misclassified.
pub fn loss_as<T: Scalar>(model: &ThreeWayModel<T>, x: &Tensor<T>, y: &[usize], attack: &AttackConfig) -> Result<f64> {
    Ok(single_term(model, x, y, LossConfig { use_as: true, ..NONE }, attack)?.as_)
}

/// Robust-way cross-entropy on robust-way adversarials.
pub fn loss_ar<T: Scalar>(model: &ThreeWayModel<T>, x: &Tensor<T>, y: &[usize], attack: &AttackConfig) -> Result<f64> {
    Ok(single_term(model, x, y, LossConfig { use_ar: true, ..NONE }, attack)?.ar)
}

/// Non-robust way fit to its own wrong predictions under attack; 0 when none.
pub fn loss_an<T: Scalar>(model: &ThreeWayModel<T>, x: &Tensor<T>, y: &[usize], attack: &AttackConfig) -> Result<f64> {
    Ok(single_term(model, x, y, LossConfig { use_an: true, ..NONE }, attack)?.an)
}

pub fn total_loss<T: Scalar>(
    model: &ThreeWayModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    loss: &LossConfig,
    attack: &AttackConfig,
) -> Result<LossTerms> {
    single_term(model, x, y, *loss, attack)
}

/// SGD with momentum; weight decay is added to the gradient before the
/// momentum update.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &ThreeWayModel<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: model.params().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, model: &mut ThreeWayModel<T>, lr: f64) {
        let (lr, mu, wd) = (T::of(lr), T::of(self.momentum), T::of(self.weight_decay));
        for (p, vel) in model.params_mut().zip(&mut self.velocity) {
            let grad: Vec<T> = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.tensor.len()],
            };
            for ((w, v), g) in p.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
            p.tensor.zero_grad();
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossTerms,
    /// Clean accuracy of each way on the monitoring set, in percent.
    pub clean: WayAccuracy,
}

/// Trains in place. Each finished epoch is written to `sink` as one JSON
/// line and also returned. Clean accuracy is measured on `monitor` when
/// given, otherwise on the training set.
pub fn train<T: Scalar>(
    model: &mut ThreeWayModel<T>,
    data: &Dataset,
    monitor: Option<&Dataset>,
    cfg: &TrainConfig,
    sink: &mut dyn Write,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut opt = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    model.zero_grad();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let epoch_seed = cfg.seed.wrapping_add(epoch as u64);
        let mut mean = LossTerms::default();
        for (bi, idx) in data.batches(cfg.batch_size, epoch_seed, true).iter().enumerate() {
            let (x, y) = data.gather::<T>(idx);
            let terms = loss_step(model, &x, &y, &cfg.loss, &cfg.attack_train, cfg.mask_denominator, true)?;
            if let Some(term) = terms.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite '{term}' loss at epoch {epoch}, batch {bi}"
                )));
            }
            opt.step(model, lr);
            mean.add_scaled(&terms, y.len() as f64 / data.len() as f64);
        }
        let clean = eval::clean_accuracy(model, monitor.unwrap_or(data), eval::EVAL_BATCH)?;
        let entry = EpochLog { epoch, lr, loss: mean, clean };
        serde_json::to_writer(&mut *sink, &entry)?;
        sink.write_all(b"\n")?;
        log::info!(
            "epoch {epoch} lr {lr} loss {:.4} clean S/R/N {:.1}/{:.1}/{:.1} ({:.1}s)",
            entry.loss.total,
            entry.clean.standard,
            entry.clean.robust,
            entry.clean.nonrobust,
            started.elapsed().as_secs_f64()
        );
        logs.push(entry);
    }
    Ok(logs)
}
