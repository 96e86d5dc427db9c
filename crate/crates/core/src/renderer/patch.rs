//! Patchify/unpatchify and the deterministic embeddings.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

/// (h, w, c) -> (T, p*p*c) tokens, row-major over the patch grid.
/// Pure data movement: the round trip through [`unpatchify`] is bit-exact.
pub fn patchify(latent: &Var, p: usize) -> Result<Var> {
    let s = latent.shape();
    if s.len() != 3 {
        return Err(Error::shape("patchify", "(h,w,c)", format!("{:?}", s)));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::domain(
            "patchify",
            format!("grid {h}x{w} not divisible by patch {p}"),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let v = latent.value();
    let dim = p * p * c;
    let mut out = vec![0.0; gh * gw * dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let t = gy * gw + gx;
            for py in 0..p {
                for px in 0..p {
                    let src = ((gy * p + py) * w + gx * p + px) * c;
                    let dst = t * dim + (py * p + px) * c;
                    out[dst..dst + c].copy_from_slice(&v[src..src + c]);
                }
            }
        }
    }
    let ia = latent.id();
    Ok(latent.tape().op(
        &[latent],
        vec![gh * gw, dim],
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let t = gy * gw + gx;
                        for py in 0..p {
                            for px in 0..p {
                                let dst = ((gy * p + py) * w + gx * p + px) * c;
                                let src = t * dim + (py * p + px) * c;
                                for k in 0..c {
                                    buf[dst + k] += g[src + k];
                                }
                            }
                        }
                    }
                }
            })
        }),
    ))
}

/// Inverse of [`patchify`]: (T, p*p*c) tokens back to (h, w, c).
pub fn unpatchify(tokens: &Var, p: usize, gh: usize, gw: usize, c: usize) -> Result<Var> {
    let s = tokens.shape();
    let dim = p * p * c;
    if s.len() != 2 || s[0] != gh * gw || s[1] != dim {
        return Err(Error::shape(
            "unpatchify",
            format!("({}, {})", gh * gw, dim),
            format!("{:?}", s),
        ));
    }
    let (h, w) = (gh * p, gw * p);
    let v = tokens.value();
    let mut out = vec![0.0; h * w * c];
    for gy in 0..gh {
        for gx in 0..gw {
            let t = gy * gw + gx;
            for py in 0..p {
                for px in 0..p {
                    let dst = ((gy * p + py) * w + gx * p + px) * c;
                    let src = t * dim + (py * p + px) * c;
                    out[dst..dst + c].copy_from_slice(&v[src..src + c]);
                }
            }
        }
    }
    let ia = tokens.id();
    Ok(tokens.tape().op(
        &[tokens],
        vec![h, w, c],
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let t = gy * gw + gx;
                        for py in 0..p {
                            for px in 0..p {
                                let src = ((gy * p + py) * w + gx * p + px) * c;
                                let dst = t * dim + (py * p + px) * c;
                                for k in 0..c {
                                    buf[dst + k] += g[src + k];
                                }
                            }
                        }
                    }
                }
            })
        }),
    ))
}

/// Deterministic 2D sinusoidal positional embedding: half the channels encode
/// the row index and half the column, each as interleaved-free sin/cos pairs
/// (all sines first, then all cosines per axis).
pub fn pos_embed(gh: usize, gw: usize, dim: usize) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::domain(
            "pos_embed",
            format!("dim {dim} not divisible by 4"),
        ));
    }
    let half = dim / 2;
    let quarter = half / 2;
    let axis_embed = |pos: f64| -> Vec<f64> {
        let mut sins = Vec::with_capacity(quarter);
        let mut coss = Vec::with_capacity(quarter);
        for k in 0..quarter {
            let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
            sins.push((pos * omega).sin());
            coss.push((pos * omega).cos());
        }
        sins.extend(coss);
        sins
    };
    let mut out = vec![0.0; gh * gw * dim];
    for r in 0..gh {
        let re = axis_embed(r as f64);
        for cidx in 0..gw {
            let ce = axis_embed(cidx as f64);
            let t = r * gw + cidx;
            out[t * dim..t * dim + half].copy_from_slice(&re);
            out[t * dim + half..(t + 1) * dim].copy_from_slice(&ce);
        }
    }
    Tensor::from_vec(&[gh * gw, dim], out)
}

/// Sinusoidal timestep encoding: all sines, then all cosines.
pub fn timestep_sinusoid(t: usize, dim: usize, t_max: usize) -> Result<Tensor> {
    if t > t_max {
        return Err(Error::domain(
            "timestep_embedding",
            format!("t = {t} outside [0, {t_max}]"),
        ));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
        out[k] = (t as f64 * omega).sin();
        out[half + k] = (t as f64 * omega).cos();
    }
    Tensor::from_vec(&[dim], out)
}

/// Convenience: is this var's storage identical (bitwise) to another's?
pub fn bit_identical(a: &Var, b: &Var) -> bool {
    let (va, vb) = (a.value(), b.value());
    va.len() == vb.len()
        && Rc::ptr_eq(&va, &vb)
        || va
            .iter()
            .zip(vb.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;
    use crate::numerics::tape::Tape;

    #[test]
    fn patch_shapes_and_roundtrip() {
        let tape = Tape::new();
        let rng = RngStream::new(2, 8);
        let latent = tape.constant(rng.uniform_tensor(&[8, 8, 4], -1.0, 1.0));
        let tokens = patchify(&latent, 2).unwrap();
        assert_eq!(tokens.dims(), vec![16, 16]);
        let back = unpatchify(&tokens, 2, 4, 4, 4).unwrap();
        assert!(bit_identical(&latent, &back));
    }

    #[test]
    fn roundtrip_matrix() {
        let rng = RngStream::new(3, 9);
        for (h, w, p, c) in [(4, 4, 1, 3), (8, 8, 2, 4), (6, 4, 2, 2), (8, 8, 4, 4), (9, 9, 3, 1)] {
            let tape = Tape::new();
            let latent = tape.constant(rng.derive(&format!("{h}{w}{p}{c}")).uniform_tensor(&[h, w, c], -2.0, 2.0));
            let tokens = patchify(&latent, p).unwrap();
            let back = unpatchify(&tokens, p, h / p, w / p, c).unwrap();
            assert!(bit_identical(&latent, &back), "case {h}x{w} p{p} c{c}");
        }
    }

    #[test]
    fn single_patch_token_is_flattened_latent() {
        let tape = Tape::new();
        let rng = RngStream::new(4, 4);
        let latent = tape.constant(rng.uniform_tensor(&[4, 4, 2], 0.0, 1.0));
        let tokens = patchify(&latent, 4).unwrap();
        assert_eq!(tokens.dims(), vec![1, 32]);
        assert_eq!(tokens.value().as_slice(), latent.value().as_slice());
    }

    #[test]
    fn divisibility_rejected() {
        let tape = Tape::new();
        let latent = tape.constant(Tensor::zeros(&[6, 6, 2]));
        assert!(patchify(&latent, 4).is_err());
    }

    #[test]
    fn pos_embed_origin_and_separability() {
        let e = pos_embed(4, 4, 16).unwrap();
        // Token (0,0): all sines zero, all cosines one.
        let row = &e.data()[0..16];
        assert_eq!(&row[0..4], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&row[4..8], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(&row[8..12], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&row[12..16], &[1.0, 1.0, 1.0, 1.0]);
        // Same row, different column: row half identical.
        let t_a = &e.data()[(2 * 4 + 1) * 16..(2 * 4 + 1) * 16 + 8];
        let t_b = &e.data()[(2 * 4 + 3) * 16..(2 * 4 + 3) * 16 + 8];
        assert_eq!(t_a, t_b);
        // Deterministic.
        let e2 = pos_embed(4, 4, 16).unwrap();
        assert_eq!(e.data(), e2.data());
    }

    #[test]
    fn pos_embed_lowest_frequency_dot_decays() {
        let gw = 8;
        let e = pos_embed(1, gw, 16).unwrap();
        // Dot product of the lowest-frequency column pair (sin, cos) against
        // column 0 decays monotonically with distance: it equals cos(d).
        let pair = |t: usize| {
            let base = t * 16 + 8;
            (e.data()[base], e.data()[base + 4])
        };
        let (s0, c0) = pair(0);
        let mut prev = f64::INFINITY;
        for t in 1..gw.min(4) {
            let (s, c) = pair(t);
            let dot = s0 * s + c0 * c;
            assert!(dot < prev, "dot {dot} did not decay at {t}");
            prev = dot;
        }
    }

    #[test]
    fn timestep_zero_layout_and_function() {
        let e = timestep_sinusoid(0, 8, 50).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let a = timestep_sinusoid(7, 8, 50).unwrap();
        let b = timestep_sinusoid(7, 8, 50).unwrap();
        assert_eq!(a.data(), b.data());
        let c = timestep_sinusoid(8, 8, 50).unwrap();
        let diff: f64 = a.data().iter().zip(c.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 0.0);
        assert!(timestep_sinusoid(51, 8, 50).is_err());
    }
}
