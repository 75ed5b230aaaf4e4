//! Qualitative probes: input-gradient images and representation inversion.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::input_gradient;
use crate::error::{Error, Result};
use crate::model::{Representation, ThreeWayModel, Way};
use crate::rng::{self, stream};
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample: Option<usize>,
    /// Way or representation the image was derived from.
    pub source: String,
    pub operation: String,
}

/// A `channels x height x width` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArtifact {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub provenance: Provenance,
}

impl ImageArtifact {
    pub fn new(shape: &[usize], pixels: Vec<f32>, provenance: Provenance) -> Result<Self> {
        let (c, h, w) = match *shape {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => return Err(Error::Validation(format!("image shape must be [c, h, w], got {shape:?}"))),
        };
        if c * h * w != pixels.len() {
            return Err(Error::dim("image pixels", shape, &[pixels.len()]));
        }
        let pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(ImageArtifact { channels: c, height: h, width: w, pixels, provenance })
    }

    /// Binary PGM (one channel) or PPM (three channels), 8-bit.
    pub fn to_pnm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::Validation(format!("cannot write a {c}-channel image as PNM"))),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.height * self.width;
        for p in 0..plane {
            for c in 0..self.channels {
                out.push((self.pixels[c * plane + p] * 255.0).round() as u8);
            }
        }
        Ok(out)
    }

    pub fn write_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_pnm()?)?;
        Ok(())
    }
}

/// Clips to mean +- 3 standard deviations, then maps min to 0 and max to 1.
/// Constant input yields 0.5 everywhere.
pub fn rescale_for_display(values: &[f64]) -> Vec<f32> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        log::warn!("zero-variance gradient rendered as mid-gray");
        return vec![0.5; values.len()];
    }
    let clipped: Vec<f64> = values.iter().map(|v| v.clamp(mean - 3.0 * std, mean + 3.0 * std)).collect();
    let lo = clipped.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = clipped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    clipped.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect()
}

/// Gradient of `way`'s cross-entropy with respect to one input sample.
pub fn grad_visual<T: Scalar>(
    model: &ThreeWayModel<T>,
    x: &Tensor<T>,
    y: usize,
    way: Way,
    sample: Option<usize>,
) -> Result<ImageArtifact> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = Tensor::new(shape, x.data().to_vec())?;
    let (grad, _) = input_gradient(model, &batch, &[y], way)?;
    let values: Vec<f64> = grad.data().iter().map(|v| v.as_f64()).collect();
    ImageArtifact::new(
        x.shape(),
        rescale_for_display(&values),
        Provenance { sample, source: way.to_string(), operation: "grad-visual".into() },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub image: ImageArtifact,
    pub initial_distance: f64,
    pub distance: f64,
    /// Squared norm of the target, for relative distances.
    pub target_norm: f64,
    /// Accepted distance after every step.
    pub history: Vec<f64>,
}

impl Inversion {
    pub fn relative_distance(&self) -> f64 {
        self.distance / self.target_norm.max(f64::MIN_POSITIVE)
    }
}

fn distance_and_grad<T: Scalar>(
    model: &ThreeWayModel<T>,
    x: &Tensor<T>,
    target: &[T],
    which: Representation,
) -> Result<(f64, Vec<T>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let xv = g.leaf(&x.clone().with_requires_grad(true));
    let z = model.encode_var(&mut g, &b, xv, which)?;
    let d = g.sq_dist(z, target)?;
    g.backward(d)?;
    Ok((g.scalar(d).as_f64(), g.grad(xv).expect("input gradient").to_vec()))
}

/// Squared distance between `encode(x, which)` and `target`.
pub fn representation_distance<T: Scalar>(
    model: &ThreeWayModel<T>,
    x: &Tensor<T>,
    target: &[T],
    which: Representation,
) -> Result<f64> {
    let z = model.encode(x, which)?;
    if z.len() != target.len() {
        return Err(Error::dim("representation", z.shape(), &[target.len()]));
    }
    Ok(z.data().iter().zip(target).map(|(&a, &t)| ((a - t) * (a - t)).as_f64()).sum())
}

/// Seeded uniform noise in `[0, 1]`.
pub fn noise_image<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = rng::seeded(seed, stream::INVERSION);
    Tensor::from_fn(shape, |_| T::of(rng.random::<f64>()))
}

/// Finds an input in `[0, 1]` whose representation is close to `target`.
///
/// Gradient descent from seeded noise on the squared distance; a step that
/// would increase the distance is rejected and the step size halved, so the
/// accepted distance never increases.
pub fn invert_representation<T: Scalar>(
    model: &ThreeWayModel<T>,
    target: &[T],
    which: Representation,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Inversion> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Validation(format!("inversion step size must be > 0, got {lr}")));
    }
    let mut shape = vec![1];
    shape.extend(model.spec().input_shape());
    let mut x = noise_image::<T>(&shape, seed);
    let (mut dist, mut grad) = distance_and_grad(model, &x, target, which)?;
    if !dist.is_finite() {
        return Err(Error::Numeric("non-finite inversion distance at step 0".into()));
    }
    let initial = dist;
    let mut step = lr;
    let mut history = Vec::with_capacity(steps);
    for i in 0..steps {
        let s = T::of(step);
        let cand = Tensor::new(
            shape.clone(),
            x.data()
                .iter()
                .zip(&grad)
                .map(|(&v, &g)| (v - s * g).max(T::zero()).min(T::one()))
                .collect(),
        )?;
        let (d, g) = distance_and_grad(model, &cand, target, which)?;
        if !d.is_finite() {
            return Err(Error::Numeric(format!("non-finite inversion distance at step {}", i + 1)));
        }
        if d <= dist {
            x = cand;
            dist = d;
            grad = g;
        } else {
            step *= 0.5;
        }
        history.push(dist);
    }
    let target_norm = target.iter().map(|v| (*v * *v).as_f64()).sum();
    let pixels = x.data().iter().map(|v| v.as_f64() as f32).collect();
    let image = ImageArtifact::new(
        &shape[1..],
        pixels,
        Provenance { sample: None, source: which.to_string(), operation: "invert".into() },
    )?;
    Ok(Inversion { image, initial_distance: initial, distance: dist, target_norm, history })
}
