//! Field MLPs: two hidden layers of width 64 with a tanh nonlinearity and a
//! zero-initialized output layer, so every field starts as the identity
//! deformation. The first linear layer's output is exposed for
//! representation capture.

use crate::error::Result;
use crate::numerics::ops;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::Var;
use crate::params::{Bindings, ParamStore};

pub const FIELD_HIDDEN: usize = 64;

#[derive(Clone, Debug)]
pub struct FieldMlp {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden: usize,
}

impl FieldMlp {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            in_dim,
            out_dim,
            hidden: FIELD_HIDDEN,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &RngStream) -> Result<()> {
        let p = &self.prefix;
        store.add_xavier(&format!("{p}.w1"), &[self.in_dim, self.hidden], rng)?;
        store.add_zeros(&format!("{p}.b1"), &[self.hidden])?;
        store.add_xavier(&format!("{p}.w2"), &[self.hidden, self.hidden], rng)?;
        store.add_zeros(&format!("{p}.b2"), &[self.hidden])?;
        // Zero-initialized output layer: fields start as the identity.
        store.add_zeros(&format!("{p}.w3"), &[self.hidden, self.out_dim])?;
        store.add_zeros(&format!("{p}.b3"), &[self.out_dim])?;
        Ok(())
    }

    /// First linear layer output (pre-activation), (n, hidden).
    pub fn first_layer(&self, binds: &Bindings, input: &Var) -> Result<Var> {
        let p = &self.prefix;
        ops::add_bias(
            &ops::matmul(input, &binds.get(&format!("{p}.w1")))?,
            &binds.get(&format!("{p}.b1")),
        )
    }

    /// Full forward, (n, out_dim).
    pub fn forward(&self, binds: &Bindings, input: &Var) -> Result<Var> {
        let p = &self.prefix;
        let h1 = ops::tanh(&self.first_layer(binds, input)?);
        let h2 = ops::tanh(&ops::add_bias(
            &ops::matmul(&h1, &binds.get(&format!("{p}.w2")))?,
            &binds.get(&format!("{p}.b2")),
        )?);
        ops::add_bias(
            &ops::matmul(&h2, &binds.get(&format!("{p}.w3")))?,
            &binds.get(&format!("{p}.b3")),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn zero_init_output_layer() {
        let mut store = ParamStore::new();
        let mlp = FieldMlp::new("t", 5, 3);
        mlp.register(&mut store, &RngStream::new(1, 1)).unwrap();
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let x = tape.constant(Tensor::filled(&[4, 5], 0.37));
        let y = mlp.forward(&binds, &x).unwrap();
        assert!(y.value().iter().all(|v| *v == 0.0));
        // First layer is generally nonzero.
        let h = mlp.first_layer(&binds, &x).unwrap();
        assert!(h.value().iter().any(|v| *v != 0.0));
    }
}
