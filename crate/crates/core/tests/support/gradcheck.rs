//! Central finite differences (f64, step 1e-5) against reverse-mode gradients.

use std::collections::BTreeMap;

use aat_core::model::{BackboneSpec, ThreeWayModel};
use aat_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const CONFIGS: u64 = 20;

/// Norm-wise relative error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut xp = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + STEP;
            let up = f(&xp);
            xp.data_mut()[i] = orig - STEP;
            let down = f(&xp);
            xp.data_mut()[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).with_requires_grad(true)
}

/// Largest relative error over the inputs of `f`.
fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let auto = g.grad(vars[k]).unwrap().to_vec();
        let num = numeric_grad(&inputs[k], |t| {
            let mut ts = inputs.to_vec();
            ts[k] = t.clone();
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
            let l = f(&mut g, &vars).unwrap();
            g.scalar(l)
        });
        worst = worst.max(rel_err(&auto, &num));
    }
    worst
}

/// Reduces a tensor-valued node to a scalar with a fixed random target.
fn reduce(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let target: Vec<f64> = (0..g.value(v).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.sq_dist(v, &target)
}

/// Worst relative error of every graph op over `CONFIGS` random shapes.
pub fn op_errors() -> BTreeMap<&'static str, f64> {
    let mut worst = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0f64);
        *w = w.max(e);
    };
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;

        let (n, k, m) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5));
        let a = rand_tensor(rng, &[n, k]);
        let b = rand_tensor(rng, &[k, m]);
        let bias = rand_tensor(rng, &[m]);
        let row_bias = rand_tensor(rng, &[k]);
        note("matmul", check(&[a.clone(), b.clone()], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            reduce(g, y, seed)
        }));
        note("add_bias", check(&[a.clone(), row_bias], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            reduce(g, y, seed)
        }));
        note("linear", check(&[a.clone(), b, bias], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            reduce(g, y, seed)
        }));

        let a2 = rand_tensor(rng, &[n, k]);
        let s = rng.random_range(-2.0..2.0);
        let cols: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        note("add", check(&[a.clone(), a2], |g, v| {
            let y = g.add(v[0], v[1])?;
            reduce(g, y, seed)
        }));
        note("scale", check(&[a.clone()], |g, v| {
            let y = g.scale(v[0], s);
            reduce(g, y, seed)
        }));
        note("mul_cols", check(&[a.clone()], |g, v| {
            let y = g.mul_cols(v[0], &cols)?;
            reduce(g, y, seed)
        }));
        note("relu", check(&[a.clone()], |g, v| {
            let y = g.relu(v[0]);
            reduce(g, y, seed)
        }));
        note("sum", check(&[a.clone()], |g, v| {
            let y = g.sum(v[0]);
            let y2 = g.scale(y, 0.5);
            reduce(g, y2, seed)
        }));
        let extra = rng.random_range(1..4);
        let c = rand_tensor(rng, &[n, extra]);
        note("concat", check(&[a.clone(), c], |g, v| {
            let y = g.concat(v[0], v[1])?;
            reduce(g, y, seed)
        }));
        let start = rng.random_range(0..k);
        let end = rng.random_range(start + 1..=k);
        note("slice_cols", check(&[a.clone()], |g, v| {
            let y = g.slice_cols(v[0], start, end)?;
            reduce(g, y, seed)
        }));
        note("reshape", check(&[a], |g, v| {
            let y = g.reshape(v[0], &[n * k])?;
            reduce(g, y, seed)
        }));

        let (bn, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4));
        let kk = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let h = kk + rng.random_range(0..4) * stride;
        let x = rand_tensor(rng, &[bn, c, h, h]);
        let w = rand_tensor(rng, &[o, c, kk, kk]);
        let cb = rand_tensor(rng, &[o]);
        note("conv2d", check(&[x, w, cb], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            reduce(g, y, seed)
        }));
        let hp = 2 * rng.random_range(1..4);
        let xp = rand_tensor(rng, &[bn, c, hp, hp + 2]);
        note("max_pool2d", check(&[xp], |g, v| {
            let y = g.max_pool2d(v[0])?;
            let f = g.flatten(y)?;
            reduce(g, f, seed)
        }));

        let (rows, classes) = (rng.random_range(1..6), rng.random_range(2..6));
        let logits = rand_tensor(rng, &[rows, classes]);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        note("cross_entropy", check(&[logits.clone()], |g, v| g.cross_entropy(v[0], &labels)));
        note("sq_dist", check(&[logits], |g, v| reduce(g, v[0], seed)));
    }
    worst
}

pub fn small_cnn() -> BackboneSpec {
    BackboneSpec::SmallCnn { input: [1, 8, 8], channels: vec![2], kernel: 3, latent_dim: 3, num_classes: 3 }
}

/// Sum of the three ways' cross-entropies with parameters taken from `model`.
fn three_way_loss(model: &ThreeWayModel<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let xv = g.constant(x);
    let ways = model.all_ways_var(&mut g, &b, xv).unwrap();
    ways.iter()
        .map(|&w| {
            let l = g.cross_entropy(w, y).unwrap();
            g.scalar(l)
        })
        .sum()
}

/// Worst relative error of the small-CNN three-way loss with respect to
/// every parameter tensor and the input, over `CONFIGS` seeds.
pub fn composite_error() -> (f64, String) {
    let mut worst = (0.0f64, String::new());
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut model = ThreeWayModel::<f64>::init(&small_cnn(), seed).unwrap();
        // Zero biases over dead channels put the head exactly on a relu kink.
        for p in model.params_mut().filter(|p| p.name.ends_with("bias")) {
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random_range(0.0..1.0));
        let y = vec![rng.random_range(0..3), rng.random_range(0..3)];

        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let xv = g.leaf(&x.clone().with_requires_grad(true));
        let ways = model.all_ways_var(&mut g, &b, xv).unwrap();
        let mut total = g.cross_entropy(ways[0], &y).unwrap();
        for &w in &ways[1..] {
            let l = g.cross_entropy(w, &y).unwrap();
            total = g.add(total, l).unwrap();
        }
        g.backward(total).unwrap();
        let x_grad = g.grad(xv).unwrap().to_vec();
        model.zero_grad();
        model.accumulate_grads(&g, &b);

        let mut record = |e: f64, what: String| {
            if e >= worst.0 {
                worst = (e, what);
            }
        };
        let count = model.params().count();
        for pi in 0..count {
            let p = model.params().nth(pi).unwrap();
            let (name, auto, value) = (p.name.clone(), p.tensor.grad().unwrap().to_vec(), p.tensor.clone());
            let num = numeric_grad(&value, |t| {
                let mut m = model.clone();
                m.params_mut().nth(pi).unwrap().tensor.data_mut().copy_from_slice(t.data());
                three_way_loss(&m, &x, &y)
            });
            record(rel_err(&auto, &num), format!("seed {seed} {name}"));
        }
        let num = numeric_grad(&x, |t| three_way_loss(&model, t, &y));
        record(rel_err(&x_grad, &num), format!("seed {seed} input"));
    }
    worst
}
