//! Dense host tensors: a shape plus shared 64-bit element storage.
//!
//! `Tensor` is the immutable value type that flows through the tape. Training
//! parameters live as plain `Vec<f64>` buffers in the parameter store and are
//! wrapped into tensors when a step's graph is recorded.

use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor_new",
                format!("{} elements for shape {:?}", n, shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data: Rc::new(data),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: Rc::new(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Rc::new(vec![0.0; n]),
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Rc::new(vec![v; n]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Rc::new((0..n).map(|i| f(i)).collect()),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("shape {:?} ({} elements)", shape, n),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Rc::clone(&self.data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn fmt_shape(shape: &[usize]) -> String {
    format!("{:?}", shape)
}
