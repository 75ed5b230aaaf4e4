//! The three-way model: robust and non-robust encoders feeding a shared
//! classifier head, either concatenated or with one representation replaced
//! by an exact zero block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Which prediction path to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Way {
    /// `f([z_r, z_n])`
    Standard,
    /// `f([z_r, 0])`
    Robust,
    /// `f([0, z_n])`
    NonRobust,
}

impl Way {
    pub const ALL: [Way; 3] = [Way::Standard, Way::Robust, Way::NonRobust];

    pub fn as_str(self) -> &'static str {
        match self {
            Way::Standard => "standard",
            Way::Robust => "robust",
            Way::NonRobust => "nonrobust",
        }
    }

    /// Column letter used in report tables.
    pub fn letter(self) -> char {
        match self {
            Way::Standard => 'S',
            Way::Robust => 'R',
            Way::NonRobust => 'N',
        }
    }
}

impl fmt::Display for Way {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Way {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "s" => Ok(Way::Standard),
            "robust" | "r" => Ok(Way::Robust),
            "nonrobust" | "non-robust" | "n" => Ok(Way::NonRobust),
            other => Err(Error::Usage(format!("unknown way '{other}'"))),
        }
    }
}

/// One of the two representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Robust,
    NonRobust,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Robust => "robust",
            Representation::NonRobust => "nonrobust",
        })
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robust" | "r" => Ok(Representation::Robust),
            "nonrobust" | "non-robust" | "n" => Ok(Representation::NonRobust),
            other => Err(Error::Usage(format!("unknown representation '{other}'"))),
        }
    }
}

/// Encoder architecture shared by both encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackboneSpec {
    /// `[conv(kernel) -> relu -> pool2x2] per channel entry -> flatten -> dense(latent)`
    SmallCnn {
        /// `[channels, height, width]`
        input: [usize; 3],
        channels: Vec<usize>,
        kernel: usize,
        latent_dim: usize,
        num_classes: usize,
    },
    /// `dense -> relu` per hidden entry, then `dense(latent)`.
    Mlp {
        input_dim: usize,
        /// Fixed per-feature multiplier applied before the first layer, so
        /// attacks still act on unscaled inputs.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_scale: Option<Vec<f64>>,
        hidden: Vec<usize>,
        latent_dim: usize,
        num_classes: usize,
    },
}

impl BackboneSpec {
    /// conv(1->16, 5x5) -> relu -> pool -> conv(16->32, 5x5) -> relu -> pool -> dense(128).
    pub fn mnist_cnn() -> Self {
        BackboneSpec::SmallCnn {
            input: [1, 28, 28],
            channels: vec![16, 32],
            kernel: 5,
            latent_dim: 128,
            num_classes: 10,
        }
    }

    /// `d -> 32 -> 32` binary classifier for the discrete feature problem.
    pub fn dilemma_mlp(d: usize) -> Self {
        BackboneSpec::Mlp {
            input_dim: d,
            input_scale: None,
            hidden: vec![32],
            latent_dim: 32,
            num_classes: 2,
        }
    }

    /// Sets the fixed input multiplier of an MLP; other backbones are returned unchanged.
    pub fn with_input_scale(mut self, scale: Vec<f64>) -> Self {
        if let BackboneSpec::Mlp { input_scale, .. } = &mut self {
            *input_scale = Some(scale);
        }
        self
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            BackboneSpec::SmallCnn { latent_dim, .. } | BackboneSpec::Mlp { latent_dim, .. } => {
                *latent_dim
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            BackboneSpec::SmallCnn { num_classes, .. } | BackboneSpec::Mlp { num_classes, .. } => {
                *num_classes
            }
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            BackboneSpec::SmallCnn { input, .. } => input.to_vec(),
            BackboneSpec::Mlp { input_dim, .. } => vec![*input_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim() == 0 || self.num_classes() < 2 {
            return bad("latent_dim must be positive and num_classes >= 2".into());
        }
        match self {
            BackboneSpec::SmallCnn {
                input,
                channels,
                kernel,
                ..
            } => {
                if input.iter().any(|&d| d == 0) || *kernel == 0 || channels.contains(&0) {
                    return bad(format!("degenerate small-cnn spec: {self:?}"));
                }
                let (mut h, mut w) = (input[1], input[2]);
                for _ in channels {
                    if h < *kernel || w < *kernel {
                        return bad(format!("input {input:?} too small for {} conv stages", channels.len()));
                    }
                    h = (h - kernel + 1) / 2;
                    w = (w - kernel + 1) / 2;
                    if h == 0 || w == 0 {
                        return bad(format!("input {input:?} pooled away to nothing"));
                    }
                }
            }
            BackboneSpec::Mlp {
                input_dim,
                input_scale,
                hidden,
                ..
            } => {
                if *input_dim == 0 || hidden.contains(&0) {
                    return bad(format!("degenerate mlp spec: {self:?}"));
                }
                if let Some(s) = input_scale {
                    if s.len() != *input_dim || s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                        return bad(format!("input_scale needs {input_dim} positive finite entries"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    /// Indices of weight and bias in the owning stack's parameter list.
    Conv(usize, usize),
    Dense(usize, usize),
    Relu,
    Pool,
    Flatten,
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// A feed-forward stack of layers with its own parameters.
#[derive(Debug, Clone, PartialEq)]
struct Stack<T: Scalar> {
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
    /// Constant per-feature input multiplier, not trained.
    input_scale: Option<Vec<T>>,
}

struct StackBuilder<T: Scalar, R: rand::Rng> {
    prefix: &'static str,
    rng: R,
    stack: Stack<T>,
}

impl<T: Scalar, R: rand::Rng> StackBuilder<T, R> {
    fn new(prefix: &'static str, rng: R) -> Self {
        StackBuilder {
            prefix,
            rng,
            stack: Stack {
                layers: Vec::new(),
                params: Vec::new(),
                input_scale: None,
            },
        }
    }

    fn add_param(&mut self, name: String, shape: &[usize], fan_in: Option<usize>) -> usize {
        let tensor = match fan_in {
            Some(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| T::of(rng::symmetric(rng, bound)))
            }
            None => Tensor::zeros(shape),
        };
        self.stack.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(true),
        });
        self.stack.params.len() - 1
    }

    fn conv(&mut self, idx: usize, cin: usize, cout: usize, k: usize) {
        let w = self.add_param(
            format!("{}.conv{idx}.weight", self.prefix),
            &[cout, cin, k, k],
            Some(cin * k * k),
        );
        let b = self.add_param(format!("{}.conv{idx}.bias", self.prefix), &[cout], None);
        self.stack.layers.push(Layer::Conv(w, b));
    }

    fn dense(&mut self, idx: usize, fan_in: usize, out: usize) {
        let w = self.add_param(
            format!("{}.fc{idx}.weight", self.prefix),
            &[fan_in, out],
            Some(fan_in),
        );
        let b = self.add_param(format!("{}.fc{idx}.bias", self.prefix), &[out], None);
        self.stack.layers.push(Layer::Dense(w, b));
    }

    fn push(&mut self, layer: Layer) {
        self.stack.layers.push(layer);
    }

    fn finish(self) -> Stack<T> {
        self.stack
    }
}

fn build_encoder<T: Scalar>(spec: &BackboneSpec, prefix: &'static str, seed: u64, id: u64) -> Stack<T> {
    let mut b = StackBuilder::new(prefix, rng::seeded(seed, id));
    match spec {
        BackboneSpec::SmallCnn {
            input,
            channels,
            kernel,
            latent_dim,
            ..
        } => {
            let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
            for (i, &out) in channels.iter().enumerate() {
                b.conv(i + 1, c, out, *kernel);
                b.push(Layer::Relu);
                b.push(Layer::Pool);
                c = out;
                h = (h - kernel + 1) / 2;
                w = (w - kernel + 1) / 2;
            }
            b.push(Layer::Flatten);
            b.dense(1, c * h * w, *latent_dim);
        }
        BackboneSpec::Mlp {
            input_dim,
            input_scale,
            hidden,
            latent_dim,
            ..
        } => {
            b.stack.input_scale = input_scale.as_ref().map(|s| s.iter().map(|&v| T::of(v)).collect());
            b.push(Layer::Flatten);
            let mut width = *input_dim;
            for (i, &hdim) in hidden.iter().enumerate() {
                b.dense(i + 1, width, hdim);
                b.push(Layer::Relu);
                width = hdim;
            }
            b.dense(hidden.len() + 1, width, *latent_dim);
        }
    }
    b.finish()
}

fn build_head<T: Scalar>(spec: &BackboneSpec, seed: u64) -> Stack<T> {
    let h = spec.latent_dim();
    let mut b = StackBuilder::new("head", rng::seeded(seed, stream::INIT_HEAD));
    b.dense(1, 2 * h, h);
    b.push(Layer::Relu);
    b.dense(2, h, spec.num_classes());
    b.finish()
}

impl<T: Scalar> Stack<T> {
    fn bind(&self, g: &mut Graph<T>, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if track {
                    g.leaf(&p.tensor)
                } else {
                    g.constant(&p.tensor)
                }
            })
            .collect()
    }

    fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(s) = &self.input_scale {
            h = g.flatten(h)?;
            h = g.mul_cols(h, s)?;
        }
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv(w, b) => g.conv2d(h, vars[w], vars[b], 1, 0)?,
                Layer::Dense(w, b) => g.linear(h, vars[w], vars[b])?,
                Layer::Relu => g.relu(h),
                Layer::Pool => g.max_pool2d(h)?,
                Layer::Flatten => g.flatten(h)?,
            };
        }
        Ok(h)
    }
}

/// Graph handles for every parameter of a model bound to one [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    robust: Vec<Var>,
    nonrobust: Vec<Var>,
    head: Vec<Var>,
}

/// Logits of all three ways for one batch.
#[derive(Debug, Clone)]
pub struct WayLogits<T: Scalar = f32> {
    pub standard: Tensor<T>,
    pub robust: Tensor<T>,
    pub nonrobust: Tensor<T>,
}

impl<T: Scalar> WayLogits<T> {
    pub fn get(&self, way: Way) -> &Tensor<T> {
        match way {
            Way::Standard => &self.standard,
            Way::Robust => &self.robust,
            Way::NonRobust => &self.nonrobust,
        }
    }
}

/// Encoders `g_r`, `g_n` and the shared head `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeWayModel<T: Scalar = f32> {
    spec: BackboneSpec,
    robust: Stack<T>,
    nonrobust: Stack<T>,
    head: Stack<T>,
}

impl<T: Scalar> ThreeWayModel<T> {
    /// Uniform `±sqrt(6 / fan_in)` weights and zero biases; the two encoders
    /// and the head draw from independent streams of `seed`.
    pub fn init(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(ThreeWayModel {
            spec: spec.clone(),
            robust: build_encoder(spec, "robust", seed, stream::INIT_ROBUST),
            nonrobust: build_encoder(spec, "nonrobust", seed, stream::INIT_NONROBUST),
            head: build_head(spec, seed),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// All parameters: robust encoder, non-robust encoder, head.
    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.robust
            .params
            .iter()
            .chain(&self.nonrobust.params)
            .chain(&self.head.params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.robust
            .params
            .iter_mut()
            .chain(&mut self.nonrobust.params)
            .chain(&mut self.head.params)
    }

    pub fn encoder_params(&self, which: Representation) -> &[Param<T>] {
        match which {
            Representation::Robust => &self.robust.params,
            Representation::NonRobust => &self.nonrobust.params,
        }
    }

    pub fn encoder_params_mut(&mut self, which: Representation) -> &mut [Param<T>] {
        match which {
            Representation::Robust => &mut self.robust.params,
            Representation::NonRobust => &mut self.nonrobust.params,
        }
    }

    pub fn head_params(&self) -> &[Param<T>] {
        &self.head.params
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records every parameter on `g`; with `track` they become gradient leaves.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Bound {
        Bound {
            robust: self.robust.bind(g, track),
            nonrobust: self.nonrobust.bind(g, track),
            head: self.head.bind(g, track),
        }
    }

    /// Adds the leaf gradients held by `g` into the parameters' gradients.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        let parts = [
            (&mut self.robust, &bound.robust),
            (&mut self.nonrobust, &bound.nonrobust),
            (&mut self.head, &bound.head),
        ];
        for (stack, vars) in parts {
            for (p, &v) in stack.params.iter_mut().zip(vars) {
                if let Some(grad) = g.grad(v) {
                    p.tensor.accumulate_grad(grad);
                }
            }
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.spec.input_shape();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] {
            let mut expect = vec![shape.first().copied().unwrap_or(0)];
            expect.extend(want);
            return Err(Error::dim("model input", shape, &expect));
        }
        Ok(())
    }

    pub fn encode_var(&self, g: &mut Graph<T>, b: &Bound, x: Var, which: Representation) -> Result<Var> {
        self.check_input(g.shape(x))?;
        match which {
            Representation::Robust => self.robust.forward(g, &b.robust, x),
            Representation::NonRobust => self.nonrobust.forward(g, &b.nonrobust, x),
        }
    }

    /// Head over `[z_r, z_n]`; a missing side is an exact zero block with no
    /// gradient path to its encoder.
    pub fn head_var(&self, g: &mut Graph<T>, b: &Bound, zr: Option<Var>, zn: Option<Var>) -> Result<Var> {
        let (zr, zn) = match (zr, zn) {
            (Some(r), Some(n)) => (r, n),
            (Some(r), None) => (r, g.zeros_like(r)),
            (None, Some(n)) => (g.zeros_like(n), n),
            (None, None) => return Err(Error::Usage("head needs at least one representation".into())),
        };
        let joined = g.concat(zr, zn)?;
        self.head.forward(g, &b.head, joined)
    }

    pub fn way_var(&self, g: &mut Graph<T>, b: &Bound, x: Var, way: Way) -> Result<Var> {
        match way {
            Way::Standard => {
                let zr = self.encode_var(g, b, x, Representation::Robust)?;
                let zn = self.encode_var(g, b, x, Representation::NonRobust)?;
                self.head_var(g, b, Some(zr), Some(zn))
            }
            Way::Robust => {
                let zr = self.encode_var(g, b, x, Representation::Robust)?;
                self.head_var(g, b, Some(zr), None)
            }
            Way::NonRobust => {
                let zn = self.encode_var(g, b, x, Representation::NonRobust)?;
                self.head_var(g, b, None, Some(zn))
            }
        }
    }

    /// Logits of all three ways, running each encoder once.
    pub fn all_ways_var(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<[Var; 3]> {
        let zr = self.encode_var(g, b, x, Representation::Robust)?;
        let zn = self.encode_var(g, b, x, Representation::NonRobust)?;
        Ok([
            self.head_var(g, b, Some(zr), Some(zn))?,
            self.head_var(g, b, Some(zr), None)?,
            self.head_var(g, b, None, Some(zn))?,
        ])
    }

    /// Representation `z_r` or `z_n` for a batch, `N x H`.
    pub fn encode(&self, x: &Tensor<T>, which: Representation) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x);
        let z = self.encode_var(&mut g, &b, xv, which)?;
        Ok(g.tensor(z))
    }

    /// Logits `N x C` of one way.
    pub fn forward_way(&self, x: &Tensor<T>, way: Way) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x);
        let y = self.way_var(&mut g, &b, xv, way)?;
        Ok(g.tensor(y))
    }

    pub fn forward_all(&self, x: &Tensor<T>) -> Result<WayLogits<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x);
        let [s, r, n] = self.all_ways_var(&mut g, &b, xv)?;
        Ok(WayLogits {
            standard: g.tensor(s),
            robust: g.tensor(r),
            nonrobust: g.tensor(n),
        })
    }

    /// Argmax predictions of one way (lowest index wins ties).
    pub fn predict(&self, x: &Tensor<T>, way: Way) -> Result<Vec<usize>> {
        Ok(self.forward_way(x, way)?.argmax_rows())
    }

    pub fn cast<U: Scalar>(&self) -> ThreeWayModel<U> {
        let cast = |s: &Stack<T>| Stack {
            layers: s.layers.clone(),
            input_scale: s.input_scale.as_ref().map(|v| v.iter().map(|x| U::of(x.as_f64())).collect()),
            params: s
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        };
        ThreeWayModel {
            spec: self.spec.clone(),
            robust: cast(&self.robust),
            nonrobust: cast(&self.nonrobust),
            head: cast(&self.head),
        }
    }

    /// True when every parameter is bit-identical to `other`'s.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.params().zip(other.params()).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
