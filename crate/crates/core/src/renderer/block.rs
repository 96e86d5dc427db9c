//! Conditioned transformer blocks: adaptive layer norm, multi-head
//! self-attention, pointwise MLP, and conditioning-regressed residual gates.
//!
//! All modulation and gate heads are zero-initialized, so before training
//! every block is the identity map on tokens and the adaptive norm reduces to
//! plain layer normalization.

use crate::error::Result;
use crate::numerics::ops;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::Var;
use crate::params::{Bindings, ParamStore};

pub const LN_EPS: f64 = 1e-6;

/// (1 + scale) * LayerNorm(x) + shift, with scale and shift regressed from
/// the conditioning vector by a zero-initialized linear head.
pub fn adaln_modulate(x: &Var, cond: &Var, binds: &Bindings, head: &str) -> Result<Var> {
    let d = *x.shape().last().unwrap();
    let w = binds.get(&format!("{head}.w"));
    let b = binds.get(&format!("{head}.b"));
    let cond_row = ops::reshape(cond, &[1, cond.len()])?;
    let both = ops::add_bias(&ops::matmul(&cond_row, &w)?, &b)?;
    let both = ops::reshape(&both, &[2 * d])?;
    let scale = ops::narrow(&both, 0, 0, d)?;
    let shift = ops::narrow(&both, 0, d, d)?;
    let normed = ops::layer_norm(x, LN_EPS)?;
    ops::add_bias(
        &ops::mul_bias(&normed, &ops::add_scalar(&scale, 1.0))?,
        &shift,
    )
}

/// Residual gate vector regressed from the conditioning vector.
fn gate(cond: &Var, binds: &Bindings, head: &str) -> Result<Var> {
    let w = binds.get(&format!("{head}.w"));
    let b = binds.get(&format!("{head}.b"));
    let cond_row = ops::reshape(cond, &[1, cond.len()])?;
    let g = ops::add_bias(&ops::matmul(&cond_row, &w)?, &b)?;
    let d = *g.shape().last().unwrap();
    ops::reshape(&g, &[d])
}

/// Multi-head self-attention over (T, D) tokens.
pub fn attention(x: &Var, binds: &Bindings, prefix: &str, heads: usize) -> Result<Var> {
    let dims = x.dims();
    let (_t, d) = (dims[0], dims[1]);
    let dh = d / heads;
    let proj = |name: &str| -> Result<Var> {
        ops::add_bias(
            &ops::matmul(x, &binds.get(&format!("{prefix}.{name}.w")))?,
            &binds.get(&format!("{prefix}.{name}.b")),
        )
    };
    let q = proj("wq")?;
    let k = proj("wk")?;
    let v = proj("wv")?;
    let mut head_outs = Vec::with_capacity(heads);
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let qh = ops::narrow(&q, 1, h * dh, dh)?;
        let kh = ops::narrow(&k, 1, h * dh, dh)?;
        let vh = ops::narrow(&v, 1, h * dh, dh)?;
        let scores = ops::mul_scalar(&ops::matmul(&qh, &ops::transpose2d(&kh)?)?, scale);
        let attn = ops::softmax(&scores, 1)?;
        head_outs.push(ops::matmul(&attn, &vh)?);
    }
    let cat = ops::concat(&head_outs.iter().collect::<Vec<_>>(), 1)?;
    ops::add_bias(
        &ops::matmul(&cat, &binds.get(&format!("{prefix}.wo.w")))?,
        &binds.get(&format!("{prefix}.wo.b")),
    )
}

/// Attention weights of head 0, exposed for tests.
pub fn attention_weights_head0(x: &Var, binds: &Bindings, prefix: &str, heads: usize) -> Result<Var> {
    let dims = x.dims();
    let d = dims[1];
    let dh = d / heads;
    let q = ops::add_bias(
        &ops::matmul(x, &binds.get(&format!("{prefix}.wq.w")))?,
        &binds.get(&format!("{prefix}.wq.b")),
    )?;
    let k = ops::add_bias(
        &ops::matmul(x, &binds.get(&format!("{prefix}.wk.w")))?,
        &binds.get(&format!("{prefix}.wk.b")),
    )?;
    let qh = ops::narrow(&q, 1, 0, dh)?;
    let kh = ops::narrow(&k, 1, 0, dh)?;
    let scores = ops::mul_scalar(&ops::matmul(&qh, &ops::transpose2d(&kh)?)?, 1.0 / (dh as f64).sqrt());
    ops::softmax(&scores, 1)
}

/// Pre-norm DiT block: gated attention and gated pointwise MLP, both behind
/// adaptive layer norm.
pub fn dit_block(x: &Var, cond: &Var, binds: &Bindings, prefix: &str, heads: usize) -> Result<Var> {
    let modulated = adaln_modulate(x, cond, binds, &format!("{prefix}.adaln1"))?;
    let attn = attention(&modulated, binds, &format!("{prefix}.attn"), heads)?;
    let g1 = gate(cond, binds, &format!("{prefix}.gate1"))?;
    let x = ops::add(x, &ops::mul_bias(&attn, &g1)?)?;

    let modulated = adaln_modulate(&x, cond, binds, &format!("{prefix}.adaln2"))?;
    let h = ops::tanh(&ops::add_bias(
        &ops::matmul(&modulated, &binds.get(&format!("{prefix}.mlp.w1")))?,
        &binds.get(&format!("{prefix}.mlp.b1")),
    )?);
    let mlp = ops::add_bias(
        &ops::matmul(&h, &binds.get(&format!("{prefix}.mlp.w2")))?,
        &binds.get(&format!("{prefix}.mlp.b2")),
    )?;
    let g2 = gate(cond, binds, &format!("{prefix}.gate2"))?;
    ops::add(&x, &ops::mul_bias(&mlp, &g2)?)
}

/// Register one block's parameters.
pub fn register_block(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    cond_dim: usize,
    rng: &RngStream,
) -> Result<()> {
    for name in ["wq", "wk", "wv", "wo"] {
        store.add_xavier(&format!("{prefix}.attn.{name}.w"), &[dim, dim], rng)?;
        store.add_zeros(&format!("{prefix}.attn.{name}.b"), &[dim])?;
    }
    store.add_xavier(&format!("{prefix}.mlp.w1"), &[dim, 4 * dim], rng)?;
    store.add_zeros(&format!("{prefix}.mlp.b1"), &[4 * dim])?;
    store.add_xavier(&format!("{prefix}.mlp.w2"), &[4 * dim, dim], rng)?;
    store.add_zeros(&format!("{prefix}.mlp.b2"), &[dim])?;
    // Zero-initialized modulation and gates: identity at construction.
    store.add_zeros(&format!("{prefix}.adaln1.w"), &[cond_dim, 2 * dim])?;
    store.add_zeros(&format!("{prefix}.adaln1.b"), &[2 * dim])?;
    store.add_zeros(&format!("{prefix}.adaln2.w"), &[cond_dim, 2 * dim])?;
    store.add_zeros(&format!("{prefix}.adaln2.b"), &[2 * dim])?;
    store.add_zeros(&format!("{prefix}.gate1.w"), &[cond_dim, dim])?;
    store.add_zeros(&format!("{prefix}.gate1.b"), &[dim])?;
    store.add_zeros(&format!("{prefix}.gate2.w"), &[cond_dim, dim])?;
    store.add_zeros(&format!("{prefix}.gate2.b"), &[dim])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::Tensor;

    fn setup(dim: usize, cond_dim: usize) -> ParamStore {
        let mut store = ParamStore::new();
        register_block(&mut store, "block0", dim, cond_dim, &RngStream::new(7, 0)).unwrap();
        store
    }

    #[test]
    fn zero_init_adaln_is_plain_layer_norm() {
        let store = setup(16, 6);
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let rng = RngStream::new(1, 2);
        let x = tape.constant(rng.normal_tensor(&[5, 16]));
        let c = tape.constant(rng.derive("c").normal_tensor(&[6]));
        let out = adaln_modulate(&x, &c, &binds, "block0.adaln1").unwrap();
        let plain = ops::layer_norm(&x, LN_EPS).unwrap();
        let max = out
            .value()
            .iter()
            .zip(plain.value().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert_eq!(max, 0.0);
    }

    #[test]
    fn scale_minus_one_collapses_to_shift() {
        let mut store = setup(4, 2);
        // Biases: scale = -1 everywhere, shift = 0.7.
        let mut b = vec![-1.0; 4];
        b.extend(vec![0.7; 4]);
        store
            .set("block0.adaln1.b", &Tensor::from_vec(&[8], b).unwrap())
            .unwrap();
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let rng = RngStream::new(2, 2);
        let x = tape.constant(rng.normal_tensor(&[3, 4]));
        let c = tape.constant(Tensor::zeros(&[2]));
        let out = adaln_modulate(&x, &c, &binds, "block0.adaln1").unwrap();
        assert!(out.value().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn adaln_matches_hand_formula() {
        let mut store = setup(4, 3);
        let rng = RngStream::new(9, 1);
        store
            .set("block0.adaln1.w", &rng.derive("w").uniform_tensor(&[3, 8], -0.5, 0.5))
            .unwrap();
        store
            .set("block0.adaln1.b", &rng.derive("b").uniform_tensor(&[8], -0.2, 0.2))
            .unwrap();
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let x = tape.constant(rng.derive("x").normal_tensor(&[2, 4]));
        let c = tape.constant(rng.derive("c").normal_tensor(&[3]));
        let out = adaln_modulate(&x, &c, &binds, "block0.adaln1").unwrap();

        // Hand evaluation.
        let w = store.get("block0.adaln1.w").unwrap();
        let b = store.get("block0.adaln1.b").unwrap();
        let cv = c.value();
        let mut head = b.to_vec();
        for o in 0..8 {
            for i in 0..3 {
                head[o] += cv[i] * w.data()[i * 8 + o];
            }
        }
        let xv = x.value();
        for r in 0..2 {
            let row = &xv[r * 4..(r + 1) * 4];
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            for j in 0..4 {
                let ln = (row[j] - mean) / (var + LN_EPS).sqrt();
                let expect = (1.0 + head[j]) * ln + head[4 + j];
                let got = out.value()[r * 4 + j];
                assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn zero_init_block_is_identity() {
        let store = setup(16, 6);
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let rng = RngStream::new(4, 5);
        let x = tape.constant(rng.normal_tensor(&[7, 16]));
        let c = tape.constant(rng.derive("c").normal_tensor(&[6]));
        let out = dit_block(&x, &c, &binds, "block0", 4).unwrap();
        let max = out
            .value()
            .iter()
            .zip(x.value().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-12, "deviation {max}");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let store = setup(16, 6);
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let rng = RngStream::new(5, 5);
        let x = tape.constant(rng.normal_tensor(&[6, 16]));
        let w = attention_weights_head0(&x, &binds, "block0.attn", 4).unwrap();
        let v = w.value();
        for r in 0..6 {
            let s: f64 = v[r * 6..(r + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn block_permutation_equivariant() {
        // Permuting tokens (with their embedded positions) permutes the
        // output identically: attention has no positional bias of its own.
        let mut store = setup(8, 4);
        let rng = RngStream::new(6, 1);
        // Random gates/modulation so the block is non-trivial.
        for name in ["adaln1", "adaln2"] {
            store
                .set(
                    &format!("block0.{name}.w"),
                    &rng.derive(name).uniform_tensor(&[4, 16], -0.3, 0.3),
                )
                .unwrap();
        }
        for name in ["gate1", "gate2"] {
            store
                .set(
                    &format!("block0.{name}.b"),
                    &rng.derive(name).uniform_tensor(&[8], 0.1, 0.8),
                )
                .unwrap();
        }
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let tokens = rng.derive("x").normal_tensor(&[5, 8]);
        let c = tape.constant(rng.derive("c").normal_tensor(&[4]));
        let x = tape.constant(tokens.clone());
        let out = dit_block(&x, &c, &binds, "block0", 2).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| tokens.data()[i * 8..(i + 1) * 8].to_vec())
            .collect();
        let xp = tape.constant(Tensor::from_vec(&[5, 8], permuted).unwrap());
        let out_p = dit_block(&xp, &c, &binds, "block0", 2).unwrap();
        let base = out.value();
        let permv = out_p.value();
        for (pi, &si) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!(
                    (permv[pi * 8 + j] - base[si * 8 + j]).abs() < 1e-12,
                    "token {pi} vs {si}"
                );
            }
        }
    }
}
