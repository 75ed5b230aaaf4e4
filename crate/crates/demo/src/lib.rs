//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string. The plain functions hold the logic so
//! they can be tested natively; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use aat_core::attack::{pgd, AttackConfig, Norm};
use aat_core::dilemma::{
    adversarial_curve, binomial_sigma, exact_adversarial_accuracy, exact_standard_accuracy, monte_carlo_accuracy,
    DilemmaSpec, LinearSignClassifier,
};
use aat_core::model::{BackboneSpec, ThreeWayModel, Way};
use aat_core::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Side of the decision-region grid returned with a PGD path.
pub const GRID: usize = 32;

type Out = Result<String, String>;

fn to_json(v: &impl Serialize) -> Out {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn spec(p: f64, eta: &str, epsilon: f64) -> Result<DilemmaSpec, String> {
    let eta: Vec<f64> = eta
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("bad eta entry '{s}': {e}")))
        .collect::<Result<_, _>>()?;
    let spec = DilemmaSpec { p, d: eta.len(), eta, epsilon };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

#[derive(Serialize)]
struct Curve {
    eps: Vec<f64>,
    h0: Vec<f64>,
    h1: Vec<f64>,
    h0_standard: f64,
    h1_standard: f64,
}

/// Exact adversarial accuracy of `h0` and `h1` at `points` budgets in
/// `[0, eps_max]`; `h1` keeps the features a budget-`epsilon` adversary cannot flip.
pub fn curve(p: f64, eta: &str, epsilon: f64, eps_max: f64, points: usize) -> Out {
    let s = spec(p, eta, epsilon)?;
    if points < 2 || !(eps_max.is_finite() && eps_max > 0.0) {
        return Err("need at least 2 points and a positive budget".into());
    }
    let eps: Vec<f64> = (0..points).map(|i| eps_max * i as f64 / (points - 1) as f64).collect();
    let (h0, h1) = (LinearSignClassifier::h0(&s), LinearSignClassifier::h1(&s));
    let err = |e: aat_core::Error| e.to_string();
    to_json(&Curve {
        h0: adversarial_curve(&s, &h0, &eps).map_err(err)?,
        h1: adversarial_curve(&s, &h1, &eps).map_err(err)?,
        h0_standard: exact_standard_accuracy(&s, &h0).map_err(err)?,
        h1_standard: exact_standard_accuracy(&s, &h1).map_err(err)?,
        eps,
    })
}

#[derive(Serialize)]
struct Sampled {
    name: String,
    adversarial: bool,
    exact: f64,
    sampled: f64,
    sigma: f64,
}

/// Monte-Carlo estimates next to the exact values for both classifiers.
pub fn sampled(p: f64, eta: &str, epsilon: f64, n: usize, seed: u64) -> Out {
    let s = spec(p, eta, epsilon)?;
    if n == 0 {
        return Err("sample count must be positive".into());
    }
    let err = |e: aat_core::Error| e.to_string();
    let mut rows = Vec::new();
    for clf in [LinearSignClassifier::h0(&s), LinearSignClassifier::h1(&s)] {
        for adversarial in [false, true] {
            let exact = if adversarial {
                exact_adversarial_accuracy(&s, &clf).map_err(err)?
            } else {
                exact_standard_accuracy(&s, &clf).map_err(err)?
            };
            let sampled = monte_carlo_accuracy(&s, &clf, n, seed, adversarial).map_err(err)?;
            rows.push(Sampled { name: clf.name.clone(), adversarial, exact, sampled, sigma: binomial_sigma(exact, n) });
        }
    }
    to_json(&rows)
}

#[derive(Serialize)]
struct Path {
    points: Vec<[f64; 2]>,
    /// Predicted class of each way at every point of the path.
    predictions: Vec<[usize; 3]>,
    /// Row-major `GRID x GRID` predictions of the attacked way over the unit square.
    grid: Vec<usize>,
}

/// PGD path of a 2-D point against one way of a small randomly initialized model.
#[allow(clippy::too_many_arguments)]
pub fn pgd_path(x: f64, y: f64, label: usize, way: &str, norm: &str, eps: f64, alpha: f64, steps: usize, seed: u64) -> Out {
    let way: Way = way.parse().map_err(|e: aat_core::Error| e.to_string())?;
    let norm: Norm = norm.parse().map_err(|e: aat_core::Error| e.to_string())?;
    if label > 1 || steps > 200 {
        return Err("label must be 0 or 1 and steps at most 200".into());
    }
    let spec = BackboneSpec::Mlp { input_dim: 2, input_scale: None, hidden: vec![16], latent_dim: 8, num_classes: 2 };
    let model = ThreeWayModel::<f64>::init(&spec, seed).map_err(|e| e.to_string())?;
    let start = Tensor::new(vec![1, 2], vec![x, y]).map_err(|e| e.to_string())?;
    let predict = |t: &Tensor<f64>| -> Result<Vec<[usize; 3]>, String> {
        let out = model.forward_all(t).map_err(|e| e.to_string())?;
        let (s, r, n) = (out.standard.argmax_rows(), out.robust.argmax_rows(), out.nonrobust.argmax_rows());
        Ok((0..s.len()).map(|i| [s[i], r[i], n[i]]).collect())
    };
    let mut points = vec![[x, y]];
    let mut predictions = predict(&start)?;
    for k in 1..=steps {
        let cfg = AttackConfig::new(norm, eps, alpha, k);
        let adv = pgd(&model, &start, &[label], way, &cfg).map_err(|e| e.to_string())?;
        points.push([adv.data()[0], adv.data()[1]]);
        predictions.extend(predict(&adv)?);
    }
    let cells: Vec<f64> = (0..GRID * GRID)
        .flat_map(|i| [((i % GRID) as f64 + 0.5) / GRID as f64, ((i / GRID) as f64 + 0.5) / GRID as f64])
        .collect();
    let grid_in = Tensor::new(vec![GRID * GRID, 2], cells).map_err(|e| e.to_string())?;
    let grid = model.forward_way(&grid_in, way).map_err(|e| e.to_string())?.argmax_rows();
    to_json(&Path { points, predictions, grid })
}

#[wasm_bindgen(js_name = dilemmaCurve)]
pub fn dilemma_curve_js(p: f64, eta: &str, epsilon: f64, eps_max: f64, points: usize) -> Result<String, JsValue> {
    curve(p, eta, epsilon, eps_max, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = dilemmaSampled)]
pub fn dilemma_sampled_js(p: f64, eta: &str, epsilon: f64, n: usize, seed: u64) -> Result<String, JsValue> {
    sampled(p, eta, epsilon, n, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = pgdPath)]
#[allow(clippy::too_many_arguments)]
pub fn pgd_path_js(
    x: f64,
    y: f64,
    label: usize,
    way: &str,
    norm: &str,
    eps: f64,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> Result<String, JsValue> {
    pgd_path(x, y, label, way, norm, eps, alpha, steps, seed).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    const ETA: &str = "0.01,0.01,0.01,0.01,1,1,1";

    fn parse(s: Out) -> Value {
        serde_json::from_str(&s.unwrap()).unwrap()
    }

    #[test]
    fn curve_starts_at_standard_accuracy_and_h0_breaks_early() {
        let v = parse(curve(0.8, ETA, 0.02, 1.5, 16));
        assert_eq!(v["h0"][0], v["h0_standard"]);
        assert_eq!(v["h1"][0], v["h1_standard"]);
        assert_eq!(v["h0"][1].as_f64(), Some(0.0));
        assert_eq!(v["h1"][1], v["h1_standard"]);
        assert_eq!(v["h1"][15].as_f64(), Some(0.0));
    }

    #[test]
    fn sampled_estimates_sit_near_exact_values() {
        let v = parse(sampled(0.8, ETA, 0.02, 20_000, 3));
        for row in v.as_array().unwrap() {
            let (e, s, sd) = (row["exact"].as_f64().unwrap(), row["sampled"].as_f64().unwrap(), row["sigma"].as_f64().unwrap());
            assert!((e - s).abs() <= 4.0 * sd.max(1e-9), "{row}");
        }
    }

    #[test]
    fn pgd_path_stays_in_the_ball_and_unit_square() {
        for norm in ["linf", "l2"] {
            let v = parse(pgd_path(0.4, 0.6, 1, "nonrobust", norm, 0.2, 0.05, 12, 4));
            let pts = v["points"].as_array().unwrap();
            assert_eq!(pts.len(), 13);
            assert_eq!(v["predictions"].as_array().unwrap().len(), 13);
            assert_eq!(v["grid"].as_array().unwrap().len(), GRID * GRID);
            for p in pts {
                let (a, b) = (p[0].as_f64().unwrap(), p[1].as_f64().unwrap());
                assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
                let (da, db) = (a - 0.4, b - 0.6);
                let dist = if norm == "linf" { da.abs().max(db.abs()) } else { (da * da + db * db).sqrt() };
                assert!(dist <= 0.2 + 1e-9);
            }
        }
    }

    #[test]
    fn bad_inputs_are_errors() {
        assert!(curve(0.4, ETA, 0.02, 1.0, 8).is_err());
        assert!(curve(0.8, "0.1,x,1", 0.02, 1.0, 8).is_err());
        assert!(sampled(0.8, ETA, 0.02, 0, 0).is_err());
        assert!(pgd_path(0.5, 0.5, 2, "robust", "l2", 0.1, 0.01, 5, 0).is_err());
        assert!(pgd_path(0.5, 0.5, 0, "sideways", "l2", 0.1, 0.01, 5, 0).is_err());
    }
}
