//! Fixed random-feature perceptual distance.
//!
//! A three-stage strided convolutional extractor with seeded random weights,
//! frozen at construction. The distance is the mean squared difference of the
//! feature maps; it stands in for a pre-trained perceptual network at desk
//! scale while keeping the loss's functional role.

use crate::error::{Error, Result};
use crate::numerics::conv::conv2d;
use crate::numerics::ops;
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;
use crate::numerics::rng::RngStream;

#[derive(Clone, Debug)]
pub struct PerceptualNet {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl PerceptualNet {
    /// Build the frozen extractor for `channels`-channel inputs.
    pub fn new(channels: usize, rng: &RngStream) -> Self {
        let dims = [(channels, 8), (8, 16), (16, 16)];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, (cin, cout)) in dims.iter().enumerate() {
            let fan_in = (3 * 3 * cin) as f64;
            let scale = (2.0 / fan_in).sqrt();
            let w = rng.derive(&format!("perc{i}"));
            weights.push(Tensor::from_fn(&[3, 3, *cin, *cout], |k| {
                w.normal_at(k as u64) * scale
            }));
            biases.push(Tensor::zeros(&[*cout]));
        }
        Self { weights, biases }
    }

    fn features(&self, x: &Var) -> Result<Vec<Var>> {
        let tape = x.tape().clone();
        let mut cur = x.clone();
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let dims = cur.dims();
            if dims[0] < 3 || dims[1] < 3 {
                break;
            }
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            cur = ops::tanh(&conv2d(&cur, &wv, &bv, 2)?);
            out.push(cur.clone());
        }
        if out.is_empty() {
            return Err(Error::domain(
                "perceptual",
                format!("input {:?} too small for the extractor", x.shape()),
            ));
        }
        Ok(out)
    }

    /// Mean squared distance between the feature stacks of `a` and `b`.
    pub fn distance(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape().as_slice() != b.shape().as_slice() {
            return Err(Error::shape(
                "perceptual",
                format!("{:?}", a.shape()),
                format!("{:?}", b.shape()),
            ));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let tape = a.tape().clone();
        let mut total = tape.scalar_const(0.0);
        let stages = fa.len();
        for (x, y) in fa.iter().zip(&fb) {
            let diff = ops::sub(x, y)?;
            total = ops::add(&total, &ops::mean(&ops::square(&diff)?)?)?;
        }
        Ok(ops::mul_scalar(&total, 1.0 / stages as f64))
    }
}
