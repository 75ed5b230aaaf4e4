//! Accuracy protocols, the agreement detector, calibration and the
//! disentanglement scores.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{pgd, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ThreeWayModel, Way};
use crate::rng::{self, stream};
use crate::tensor::{Scalar, Tensor};

/// Batch size used for inference-only passes.
pub const EVAL_BATCH: usize = 250;

/// Percent accuracy of each way.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WayAccuracy {
    pub standard: f64,
    pub robust: f64,
    pub nonrobust: f64,
}

impl WayAccuracy {
    pub fn get(&self, way: Way) -> f64 {
        match way {
            Way::Standard => self.standard,
            Way::Robust => self.robust,
            Way::NonRobust => self.nonrobust,
        }
    }

    fn set(&mut self, way: Way, v: f64) {
        match way {
            Way::Standard => self.standard = v,
            Way::Robust => self.robust = v,
            Way::NonRobust => self.nonrobust = v,
        }
    }
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

fn check_nonempty(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    Ok(())
}

fn hits(pred: &[usize], y: &[usize]) -> usize {
    pred.iter().zip(y).filter(|(a, b)| a == b).count()
}

/// Percent of samples whose argmax under `way` equals the label.
pub fn accuracy<T: Scalar>(model: &ThreeWayModel<T>, ds: &Dataset, way: Way) -> Result<f64> {
    check_nonempty(ds)?;
    let mut correct = 0;
    for idx in ds.batches(EVAL_BATCH, 0, false) {
        let (x, y) = ds.gather::<T>(&idx);
        correct += hits(&model.predict(&x, way)?, &y);
    }
    Ok(percent(correct, ds.len()))
}

/// Clean accuracy of all three ways, each encoder run once per batch.
pub fn clean_accuracy<T: Scalar>(model: &ThreeWayModel<T>, ds: &Dataset, batch: usize) -> Result<WayAccuracy> {
    check_nonempty(ds)?;
    let mut correct = [0usize; 3];
    for idx in ds.batches(batch, 0, false) {
        let (x, y) = ds.gather::<T>(&idx);
        let out = model.forward_all(&x)?;
        for (c, way) in correct.iter_mut().zip(Way::ALL) {
            *c += hits(&out.get(way).argmax_rows(), &y);
        }
    }
    let mut acc = WayAccuracy::default();
    for (c, way) in correct.iter().zip(Way::ALL) {
        acc.set(way, percent(*c, ds.len()));
    }
    Ok(acc)
}

/// Robust and non-robust accuracy, each under an attack on its own way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerWayAdv {
    pub robust: f64,
    pub nonrobust: f64,
    pub dia: f64,
}

/// Robust-way minus non-robust-way accuracy.
pub fn dia(adv_r: f64, adv_n: f64) -> f64 {
    adv_r - adv_n
}

pub fn eval_per_way_adv<T: Scalar>(model: &ThreeWayModel<T>, ds: &Dataset, attack: &AttackConfig) -> Result<PerWayAdv> {
    check_nonempty(ds)?;
    let mut correct = [0usize; 2];
    for idx in ds.batches(EVAL_BATCH, 0, false) {
        let (x, y) = ds.gather::<T>(&idx);
        for (c, way) in correct.iter_mut().zip([Way::Robust, Way::NonRobust]) {
            let adv = pgd(model, &x, &y, way, attack)?;
            *c += hits(&model.predict(&adv, way)?, &y);
        }
    }
    let (r, n) = (percent(correct[0], ds.len()), percent(correct[1], ds.len()));
    Ok(PerWayAdv { robust: r, nonrobust: n, dia: dia(r, n) })
}

fn digest<T: Scalar>(t: &Tensor<T>) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.as_f64().to_le_bytes());
    }
    h.finalize().into()
}

/// All three ways evaluated on the same standard-way adversarial batch.
pub fn eval_standard_way_adv<T: Scalar>(model: &ThreeWayModel<T>, ds: &Dataset, attack: &AttackConfig) -> Result<WayAccuracy> {
    check_nonempty(ds)?;
    let mut correct = [0usize; 3];
    for idx in ds.batches(EVAL_BATCH, 0, false) {
        let (x, y) = ds.gather::<T>(&idx);
        let adv = pgd(model, &x, &y, Way::Standard, attack)?;
        let h = digest(&adv);
        for (c, way) in correct.iter_mut().zip(Way::ALL) {
            *c += hits(&model.predict(&adv, way)?, &y);
            assert_eq!(digest(&adv), h, "adversarial batch changed between ways");
        }
    }
    let mut acc = WayAccuracy::default();
    for (c, way) in correct.iter().zip(Way::ALL) {
        acc.set(way, percent(*c, ds.len()));
    }
    Ok(acc)
}

/// 1 where the robust and non-robust ways disagree (flagged adversarial).
pub fn detect<T: Scalar>(model: &ThreeWayModel<T>, x: &Tensor<T>) -> Result<Vec<u8>> {
    let out = model.forward_all(x)?;
    Ok(detect_from_predictions(&out.robust.argmax_rows(), &out.nonrobust.argmax_rows()))
}

pub fn detect_from_predictions(yr: &[usize], yn: &[usize]) -> Vec<u8> {
    yr.iter().zip(yn).map(|(a, b)| u8::from(a != b)).collect()
}

/// Equal numbers of natural and adversarial samples, shuffled, with the
/// adversarial tag kept alongside.
#[derive(Debug, Clone)]
pub struct MixedSet {
    pub data: Dataset,
    /// `true` for adversarial samples.
    pub adversarial: Vec<bool>,
}

/// Natural samples followed by their standard-way adversarial versions,
/// shuffled with `seed`.
pub fn build_mixed_set(model: &ThreeWayModel<f32>, ds: &Dataset, attack: &AttackConfig, seed: u64) -> Result<MixedSet> {
    check_nonempty(ds)?;
    let mut pixels = ds.data().to_vec();
    let mut labels = ds.labels().to_vec();
    for idx in ds.batches(EVAL_BATCH, 0, false) {
        let (x, y) = ds.gather::<f32>(&idx);
        let adv = pgd(model, &x, &y, Way::Standard, attack)?;
        pixels.extend_from_slice(adv.data());
        labels.extend_from_slice(&y);
    }
    let n = ds.len();
    let ordered = Dataset::new(ds.sample_shape().to_vec(), pixels, labels, ds.num_classes(), "mixed")?;
    let mut rng = rng::seeded(seed, stream::MIXTURE);
    let perm = rng::permutation(2 * n, &mut rng);
    let mut data = ordered.select(&perm);
    data.split = format!("{}-mixed", ds.split);
    let adversarial = perm.iter().map(|&i| i >= n).collect();
    Ok(MixedSet { data, adversarial })
}

/// Percent of mixed-set samples whose detector verdict matches the tag.
pub fn rad<T: Scalar>(model: &ThreeWayModel<T>, mixed: &MixedSet) -> Result<f64> {
    check_nonempty(&mixed.data)?;
    let mut correct = 0;
    for idx in mixed.data.batches(EVAL_BATCH, 0, false) {
        let (x, _) = mixed.data.gather::<T>(&idx);
        let flags = detect(model, &x)?;
        correct += flags
            .iter()
            .zip(&idx)
            .filter(|(f, &i)| (**f == 1) == mixed.adversarial[i])
            .count();
    }
    Ok(percent(correct, mixed.data.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Standard-way accuracy.
    pub raw: f64,
    /// Robust way on flagged samples, standard way elsewhere.
    pub calibrated: f64,
}

pub fn calibrate<T: Scalar>(model: &ThreeWayModel<T>, mixed: &MixedSet) -> Result<Calibration> {
    check_nonempty(&mixed.data)?;
    let (mut ys, mut yr, mut yn) = (Vec::new(), Vec::new(), Vec::new());
    for idx in mixed.data.batches(EVAL_BATCH, 0, false) {
        let (x, _) = mixed.data.gather::<T>(&idx);
        let out = model.forward_all(&x)?;
        ys.extend(out.standard.argmax_rows());
        yr.extend(out.robust.argmax_rows());
        yn.extend(out.nonrobust.argmax_rows());
    }
    Ok(calibrate_from_predictions(mixed.data.labels(), &ys, &yr, &yn))
}

/// Raw and calibrated accuracy from the three ways' predictions.
pub fn calibrate_from_predictions(y: &[usize], ys: &[usize], yr: &[usize], yn: &[usize]) -> Calibration {
    let flags = detect_from_predictions(yr, yn);
    let (mut raw, mut cal) = (0, 0);
    for i in 0..y.len() {
        raw += usize::from(ys[i] == y[i]);
        let chosen = if flags[i] == 1 { yr[i] } else { ys[i] };
        cal += usize::from(chosen == y[i]);
    }
    Calibration { raw: percent(raw, y.len()), calibrated: percent(cal, y.len()) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvEntry {
    pub attack: AttackConfig,
    pub per_way: PerWayAdv,
    pub standard_way: WayAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub attack: AttackConfig,
    pub rad: f64,
    pub raw: f64,
    pub calibrated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub clean: WayAccuracy,
    pub adversarial: Vec<AdvEntry>,
    #[serde(default)]
    pub detection: Option<DetectionEntry>,
}

/// Clean, per-way and standard-way protocols for every attack; detection
/// and calibration on a mixed set built with the first attack.
pub fn full_report(
    model: &ThreeWayModel<f32>,
    ds: &Dataset,
    attacks: &[AttackConfig],
    detection_seed: Option<u64>,
) -> Result<EvalReport> {
    let clean = clean_accuracy(model, ds, EVAL_BATCH)?;
    let mut adversarial = Vec::new();
    for a in attacks {
        adversarial.push(AdvEntry {
            attack: a.clone(),
            per_way: eval_per_way_adv(model, ds, a)?,
            standard_way: eval_standard_way_adv(model, ds, a)?,
        });
    }
    let detection = match (detection_seed, attacks.first()) {
        (Some(seed), Some(a)) => {
            let mixed = build_mixed_set(model, ds, a, seed)?;
            let c = calibrate(model, &mixed)?;
            Some(DetectionEntry { attack: a.clone(), rad: rad(model, &mixed)?, raw: c.raw, calibrated: c.calibrated })
        }
        _ => None,
    };
    Ok(EvalReport { samples: ds.len(), clean, adversarial, detection })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Aligned text table with `S R N DIA` columns.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<40} {:>7} {:>7} {:>7} {:>7}\n",
            format!("protocol (n={})", self.samples),
            "S",
            "R",
            "N",
            "DIA"
        );
        let row = |name: String, s: Option<f64>, r: f64, n: f64, d: Option<f64>| {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            format!("{:<40} {:>7} {:>7.2} {:>7.2} {:>7}\n", name, f(s), r, n, f(d))
        };
        let c = &self.clean;
        out += &row("clean".into(), Some(c.standard), c.robust, c.nonrobust, None);
        for e in &self.adversarial {
            let p = &e.per_way;
            out += &row(format!("per-way {}", e.attack.label()), None, p.robust, p.nonrobust, Some(p.dia));
            let s = &e.standard_way;
            out += &row(format!("standard-way {}", e.attack.label()), Some(s.standard), s.robust, s.nonrobust, None);
        }
        if let Some(d) = &self.detection {
            out += &format!(
                "detection ({}): RAD {:.2}  raw {:.2}  calibrated {:.2}\n",
                d.attack.label(),
                d.rad,
                d.raw,
                d.calibrated
            );
        }
        out
    }
}
