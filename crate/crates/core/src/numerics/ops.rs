//! Primitive tensor operations with reverse-mode derivatives.
//!
//! Forward values follow the closed-form definitions; every backward closure
//! accumulates additively into its parents' gradient buffers. Shape mismatches
//! are rejected with a diagnostic before anything is recorded.

use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{fmt_shape, strides_of};

fn check_same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape().as_slice() != b.shape().as_slice() {
        return Err(Error::shape(
            op,
            fmt_shape(&a.shape()),
            fmt_shape(&b.shape()),
        ));
    }
    if !a.same_tape(b) {
        return Err(Error::domain(op, "operands recorded on different tapes"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise binaries
// ---------------------------------------------------------------------------

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    check_same_shape("add", a, b)?;
    let (av, bv) = (a.value(), b.value());
    let out: Vec<f64> = av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect();
    let (ia, ib) = (a.id(), b.id());
    Ok(a.tape().op(
        &[a, b],
        a.dims(),
        out,
        Box::new(move |g, sink| {
            sink.accumulate(ia, g);
            sink.accumulate(ib, g);
        }),
    ))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    check_same_shape("sub", a, b)?;
    let (av, bv) = (a.value(), b.value());
    let out: Vec<f64> = av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect();
    let (ia, ib) = (a.id(), b.id());
    Ok(a.tape().op(
        &[a, b],
        a.dims(),
        out,
        Box::new(move |g, sink| {
            sink.accumulate(ia, g);
            sink.with(ib, |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o -= gi;
                }
            });
        }),
    ))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    check_same_shape("mul", a, b)?;
    let (av, bv) = (a.value(), b.value());
    let out: Vec<f64> = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
    let (ia, ib) = (a.id(), b.id());
    Ok(a.tape().op(
        &[a, b],
        a.dims(),
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for ((o, gi), y) in buf.iter_mut().zip(g).zip(bv.iter()) {
                    *o += gi * y;
                }
            });
            sink.with(ib, |buf| {
                for ((o, gi), x) in buf.iter_mut().zip(g).zip(av.iter()) {
                    *o += gi * x;
                }
            });
        }),
    ))
}

pub fn div(a: &Var, b: &Var) -> Result<Var> {
    check_same_shape("div", a, b)?;
    let (av, bv) = (a.value(), b.value());
    let out: Vec<f64> = av.iter().zip(bv.iter()).map(|(x, y)| x / y).collect();
    let (ia, ib) = (a.id(), b.id());
    Ok(a.tape().op(
        &[a, b],
        a.dims(),
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for ((o, gi), y) in buf.iter_mut().zip(g).zip(bv.iter()) {
                    *o += gi / y;
                }
            });
            sink.with(ib, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }),
    ))
}

// ---------------------------------------------------------------------------
// Scalar / unary
// ---------------------------------------------------------------------------

pub fn add_scalar(a: &Var, c: f64) -> Var {
    let av = a.value();
    let out: Vec<f64> = av.iter().map(|x| x + c).collect();
    let ia = a.id();
    a.tape().op(
        &[a],
        a.dims(),
        out,
        Box::new(move |g, sink| sink.accumulate(ia, g)),
    )
}

pub fn mul_scalar(a: &Var, c: f64) -> Var {
    let av = a.value();
    let out: Vec<f64> = av.iter().map(|x| x * c).collect();
    let ia = a.id();
    a.tape().op(
        &[a],
        a.dims(),
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi * c;
                }
            })
        }),
    )
}

pub fn neg(a: &Var) -> Var {
    mul_scalar(a, -1.0)
}

fn unary(
    a: &Var,
    f: impl Fn(f64) -> f64,
    dfdx_from_in_out: impl Fn(f64, f64) -> f64 + 'static,
) -> Var {
    let av = a.value();
    let out: Vec<f64> = av.iter().map(|x| f(*x)).collect();
    let out_rc = Rc::new(out);
    let saved_out = Rc::clone(&out_rc);
    let ia = a.id();
    let tape = a.tape().clone();
    let needs = a.needs_grad();
    tape.push(
        a.dims(),
        out_rc,
        if needs {
            Some(Box::new(move |g, sink| {
                sink.with(ia, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * dfdx_from_in_out(av[i], saved_out[i]);
                    }
                })
            }))
        } else {
            None
        },
        needs,
    )
}

pub fn exp(a: &Var) -> Var {
    unary(a, |x| x.exp(), |_, y| y)
}

pub fn sigmoid(a: &Var) -> Var {
    unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
}

pub fn tanh(a: &Var) -> Var {
    unary(a, |x| x.tanh(), |_, y| 1.0 - y * y)
}

pub fn sin(a: &Var) -> Var {
    unary(a, |x| x.sin(), |x, _| x.cos())
}

pub fn cos(a: &Var) -> Var {
    unary(a, |x| x.cos(), |x, _| -x.sin())
}

/// Domain: x > 0 for a finite derivative (1 / 2sqrt(x)).
pub fn sqrt(a: &Var) -> Var {
    unary(a, |x| x.sqrt(), |_, y| 0.5 / y)
}

/// Domain: x != 0.
pub fn recip(a: &Var) -> Var {
    unary(a, |x| 1.0 / x, |_, y| -y * y)
}

/// Subgradient 0 at x = 0.
pub fn abs(a: &Var) -> Var {
    unary(
        a,
        |x| x.abs(),
        |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        },
    )
}

pub fn square(a: &Var) -> Result<Var> {
    mul(a, a)
}

/// Clamp with pass-through gradient strictly inside [lo, hi], zero outside.
pub fn clamp(a: &Var, lo: f64, hi: f64) -> Var {
    let av = a.value();
    let out: Vec<f64> = av.iter().map(|x| x.clamp(lo, hi)).collect();
    let ia = a.id();
    a.tape().op(
        &[a],
        a.dims(),
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for i in 0..buf.len() {
                    if av[i] > lo && av[i] < hi {
                        buf[i] += g[i];
                    }
                }
            })
        }),
    )
}

/// Arccosine with the input clamped to (-1, 1) by a 1e-12 margin so the
/// derivative stays finite at the endpoints.
pub fn acos(a: &Var) -> Var {
    const M: f64 = 1.0 - 1e-12;
    let av = a.value();
    let out: Vec<f64> = av.iter().map(|x| x.clamp(-M, M).acos()).collect();
    let ia = a.id();
    a.tape().op(
        &[a],
        a.dims(),
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for i in 0..buf.len() {
                    let x = av[i].clamp(-M, M);
                    buf[i] += g[i] * (-1.0 / (1.0 - x * x).sqrt());
                }
            })
        }),
    )
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

/// (m,k) x (k,n) -> (m,n). Rows are computed in parallel for large products;
/// each output element is a sequential sum, so results are deterministic.
pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape(
            "matmul",
            "(m,k) x (k,n)",
            format!("{} x {}", fmt_shape(&sa), fmt_shape(&sb)),
        ));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (av, bv) = (a.value(), b.value());
    let out = matmul_raw(&av, &bv, m, k, n);
    let (ia, ib) = (a.id(), b.id());
    Ok(a.tape().op(
        &[a, b],
        vec![m, n],
        out,
        Box::new(move |g, sink| {
            // dA = g . B^T
            sink.with(ia, |buf| matmul_nt_acc(g, &bv, m, n, k, buf));
            // dB = A^T . g
            sink.with(ib, |buf| matmul_tn_acc(&av, g, m, k, n, buf));
        }),
    ))
}

/// out (m,k) += A (m,n) . B^T where B is (k,n); rows in parallel.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    let body = |(i, row): (usize, &mut [f64])| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for c in 0..n {
                s += arow[c] * brow[c];
            }
            *o += s;
        }
    };
    if m * n * k > 65_536 {
        out.par_chunks_mut(k).enumerate().for_each(body);
    } else {
        out.chunks_mut(k).enumerate().for_each(body);
    }
}

/// out (k,n) += A^T . B with A (m,k), B (m,n); output rows in parallel.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let body = |(i, row): (usize, &mut [f64])| {
        for r in 0..m {
            let ai = a[r * k + i];
            if ai == 0.0 {
                continue;
            }
            let brow = &b[r * n..(r + 1) * n];
            for c in 0..n {
                row[c] += ai * brow[c];
            }
        }
    };
    if m * n * k > 65_536 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let work = m * n * k;
    let body = |(i, row): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, &aij) in arow.iter().enumerate() {
            if aij == 0.0 {
                continue;
            }
            let brow = &b[j * n..(j + 1) * n];
            for c in 0..n {
                row[c] += aij * brow[c];
            }
        }
    };
    if work > 65_536 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

pub fn transpose2d(a: &Var) -> Result<Var> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::shape("transpose2d", "rank 2", fmt_shape(&s)));
    }
    let (m, n) = (s[0], s[1]);
    let av = a.value();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = av[i * n + j];
        }
    }
    let ia = a.id();
    Ok(a.tape().op(
        &[a],
        vec![n, m],
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            })
        }),
    ))
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

/// Enumerate lanes along `axis`: yields (base offset, stride) per lane.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, Vec<(usize, usize)>) {
    let strides = strides_of(shape);
    let axis_len = shape[axis];
    let stride = strides[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            out.push((o * axis_len * inner + i, stride));
        }
    }
    (axis_len, stride, out)
}

/// Softmax along `axis`; rows sum to one.
pub fn softmax(a: &Var, axis: usize) -> Result<Var> {
    let s = a.shape();
    if axis >= s.len() || s[axis] == 0 {
        return Err(Error::BadAxis {
            op: "softmax",
            axis,
            shape: fmt_shape(&s),
        });
    }
    let av = a.value();
    let (alen, _, lane_list) = lanes(&s, axis);
    let mut out = vec![0.0; av.len()];
    for &(base, stride) in &lane_list {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..alen {
            mx = mx.max(av[base + j * stride]);
        }
        let mut z = 0.0;
        for j in 0..alen {
            let e = (av[base + j * stride] - mx).exp();
            out[base + j * stride] = e;
            z += e;
        }
        for j in 0..alen {
            out[base + j * stride] /= z;
        }
    }
    let out_rc = Rc::new(out);
    let y = Rc::clone(&out_rc);
    let ia = a.id();
    let needs = a.needs_grad();
    Ok(a.tape().push(
        a.dims(),
        out_rc,
        if needs {
            Some(Box::new(move |g, sink| {
                sink.with(ia, |buf| {
                    for &(base, stride) in &lane_list {
                        let mut dot = 0.0;
                        for j in 0..alen {
                            let idx = base + j * stride;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..alen {
                            let idx = base + j * stride;
                            buf[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                })
            }))
        } else {
            None
        },
        needs,
    ))
}

/// Layer normalization over the last axis with stabilizer `eps`.
/// A zero-variance lane maps to all zeros.
pub fn layer_norm(a: &Var, eps: f64) -> Result<Var> {
    let s = a.shape();
    if s.is_empty() || *s.last().unwrap() == 0 {
        return Err(Error::BadAxis {
            op: "layer_norm",
            axis: s.len().saturating_sub(1),
            shape: fmt_shape(&s),
        });
    }
    let d = *s.last().unwrap();
    let av = a.value();
    let rows = av.len() / d;
    let mut out = vec![0.0; av.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &av[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * is;
        }
    }
    let out_rc = Rc::new(out);
    let y = Rc::clone(&out_rc);
    let ia = a.id();
    let needs = a.needs_grad();
    Ok(a.tape().push(
        a.dims(),
        out_rc,
        if needs {
            Some(Box::new(move |g, sink| {
                sink.with(ia, |buf| {
                    for r in 0..rows {
                        let is = inv_std[r];
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let mean_g = gr.iter().sum::<f64>() / d as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum::<f64>() / d as f64;
                        for j in 0..d {
                            buf[r * d + j] += is * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                })
            }))
        } else {
            None
        },
        needs,
    ))
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum(a: &Var) -> Result<Var> {
    let av = a.value();
    let total: f64 = av.iter().sum();
    let ia = a.id();
    let n = av.len();
    Ok(a.tape().op(
        &[a],
        vec![],
        vec![total],
        Box::new(move |g, sink| {
            let g0 = g[0];
            sink.with(ia, |buf| {
                for o in buf.iter_mut().take(n) {
                    *o += g0;
                }
            })
        }),
    ))
}

pub fn mean(a: &Var) -> Result<Var> {
    if a.is_empty() {
        return Err(Error::domain("mean", "empty tensor"));
    }
    let n = a.len() as f64;
    Ok(mul_scalar(&sum(a)?, 1.0 / n))
}

/// Sum along `axis`, removing it.
pub fn sum_axis(a: &Var, axis: usize) -> Result<Var> {
    let s = a.shape();
    if axis >= s.len() || s[axis] == 0 {
        return Err(Error::BadAxis {
            op: "sum_axis",
            axis,
            shape: fmt_shape(&s),
        });
    }
    let av = a.value();
    let (alen, _, lane_list) = lanes(&s, axis);
    let mut out = vec![0.0; av.len() / alen];
    for (li, &(base, stride)) in lane_list.iter().enumerate() {
        let mut acc = 0.0;
        for j in 0..alen {
            acc += av[base + j * stride];
        }
        out[li] = acc;
    }
    let mut new_shape = s.as_ref().clone();
    new_shape.remove(axis);
    let ia = a.id();
    Ok(a.tape().op(
        &[a],
        new_shape,
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for (li, &(base, stride)) in lane_list.iter().enumerate() {
                    for j in 0..alen {
                        buf[base + j * stride] += g[li];
                    }
                }
            })
        }),
    ))
}

pub fn mean_axis(a: &Var, axis: usize) -> Result<Var> {
    let n = a.shape()[axis] as f64;
    Ok(mul_scalar(&sum_axis(a, axis)?, 1.0 / n))
}

// ---------------------------------------------------------------------------
// Structure: concat / narrow / reshape / broadcast helpers
// ---------------------------------------------------------------------------

pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::domain("concat", "no inputs"));
    }
    let s0 = parts[0].shape();
    if axis >= s0.len() {
        return Err(Error::BadAxis {
            op: "concat",
            axis,
            shape: fmt_shape(&s0),
        });
    }
    for p in parts {
        let sp = p.shape();
        if sp.len() != s0.len() {
            return Err(Error::shape("concat", fmt_shape(&s0), fmt_shape(&sp)));
        }
        for (d, (&x, &y)) in s0.iter().zip(sp.iter()).enumerate() {
            if d != axis && x != y {
                return Err(Error::shape("concat", fmt_shape(&s0), fmt_shape(&sp)));
            }
        }
    }
    let outer: usize = s0[..axis].iter().product();
    let inner: usize = s0[axis + 1..].iter().product();
    let axis_total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = s0.as_ref().clone();
    out_shape[axis] = axis_total;
    let mut out = vec![0.0; outer * axis_total * inner];
    // (part id, axis offset, axis len, value)
    let mut meta = Vec::new();
    let mut off = 0usize;
    for p in parts {
        let alen = p.shape()[axis];
        meta.push((p.id(), off, alen, p.value()));
        off += alen;
    }
    for o in 0..outer {
        for &(_, aoff, alen, ref val) in &meta {
            for j in 0..alen {
                let dst = (o * axis_total + aoff + j) * inner;
                let src = (o * alen + j) * inner;
                out[dst..dst + inner].copy_from_slice(&val[src..src + inner]);
            }
        }
    }
    let back_meta: Vec<(usize, usize, usize)> =
        meta.iter().map(|&(id, aoff, alen, _)| (id, aoff, alen)).collect();
    Ok(parts[0].tape().op(
        parts,
        out_shape,
        out,
        Box::new(move |g, sink| {
            for &(id, aoff, alen) in &back_meta {
                sink.with(id, |buf| {
                    for o in 0..outer {
                        for j in 0..alen {
                            let src = (o * axis_total + aoff + j) * inner;
                            let dst = (o * alen + j) * inner;
                            for i in 0..inner {
                                buf[dst + i] += g[src + i];
                            }
                        }
                    }
                });
            }
        }),
    ))
}

/// Slice `len` entries starting at `start` along `axis`.
pub fn narrow(a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
    let s = a.shape();
    if axis >= s.len() || start + len > s[axis] {
        return Err(Error::BadAxis {
            op: "narrow",
            axis,
            shape: format!("{} (start {start}, len {len})", fmt_shape(&s)),
        });
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let alen = s[axis];
    let av = a.value();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = (o * alen + start + j) * inner;
            let dst = (o * len + j) * inner;
            out[dst..dst + inner].copy_from_slice(&av[src..src + inner]);
        }
    }
    let mut out_shape = s.as_ref().clone();
    out_shape[axis] = len;
    let ia = a.id();
    Ok(a.tape().op(
        &[a],
        out_shape,
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for o in 0..outer {
                    for j in 0..len {
                        let dst = (o * alen + start + j) * inner;
                        let src = (o * len + j) * inner;
                        for i in 0..inner {
                            buf[dst + i] += g[src + i];
                        }
                    }
                }
            })
        }),
    ))
}

pub fn reshape(a: &Var, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    if n != a.len() {
        return Err(Error::shape(
            "reshape",
            format!("{} elements", a.len()),
            format!("{:?}", shape),
        ));
    }
    let ia = a.id();
    let needs = a.needs_grad();
    Ok(a.tape().push(
        shape.to_vec(),
        a.value(),
        if needs {
            Some(Box::new(move |g, sink| sink.accumulate(ia, g)))
        } else {
            None
        },
        needs,
    ))
}

/// Broadcast-add a vector over the last axis: (..., d) + (d).
pub fn add_bias(a: &Var, bias: &Var) -> Result<Var> {
    let s = a.shape();
    let bs = bias.shape();
    let d = *s.last().ok_or_else(|| Error::shape("add_bias", "rank >= 1", fmt_shape(&s)))?;
    if bs.len() != 1 || bs[0] != d {
        return Err(Error::shape("add_bias", format!("({d})"), fmt_shape(&bs)));
    }
    let (av, bv) = (a.value(), bias.value());
    let out: Vec<f64> = av
        .iter()
        .enumerate()
        .map(|(i, x)| x + bv[i % d])
        .collect();
    let (ia, ib) = (a.id(), bias.id());
    Ok(a.tape().op(
        &[a, bias],
        a.dims(),
        out,
        Box::new(move |g, sink| {
            sink.accumulate(ia, g);
            sink.with(ib, |buf| {
                for (i, gi) in g.iter().enumerate() {
                    buf[i % d] += gi;
                }
            });
        }),
    ))
}

/// Broadcast-multiply a vector over the last axis: (..., d) * (d).
pub fn mul_bias(a: &Var, scale: &Var) -> Result<Var> {
    let s = a.shape();
    let bs = scale.shape();
    let d = *s.last().ok_or_else(|| Error::shape("mul_bias", "rank >= 1", fmt_shape(&s)))?;
    if bs.len() != 1 || bs[0] != d {
        return Err(Error::shape("mul_bias", format!("({d})"), fmt_shape(&bs)));
    }
    let (av, bv) = (a.value(), scale.value());
    let out: Vec<f64> = av
        .iter()
        .enumerate()
        .map(|(i, x)| x * bv[i % d])
        .collect();
    let (ia, ib) = (a.id(), scale.id());
    Ok(a.tape().op(
        &[a, scale],
        a.dims(),
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for (i, gi) in g.iter().enumerate() {
                    buf[i] += gi * bv[i % d];
                }
            });
            sink.with(ib, |buf| {
                for (i, gi) in g.iter().enumerate() {
                    buf[i % d] += gi * av[i];
                }
            });
        }),
    ))
}

/// Scale row i of (n, d) by c[i].
pub fn scale_rows(a: &Var, c: &Var) -> Result<Var> {
    let s = a.shape();
    let cs = c.shape();
    if s.len() != 2 || cs.len() != 1 || cs[0] != s[0] {
        return Err(Error::shape(
            "scale_rows",
            "(n,d) with (n)",
            format!("{} with {}", fmt_shape(&s), fmt_shape(&cs)),
        ));
    }
    let (n, d) = (s[0], s[1]);
    let (av, cv) = (a.value(), c.value());
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = av[i * d + j] * cv[i];
        }
    }
    let (ia, ic) = (a.id(), c.id());
    Ok(a.tape().op(
        &[a, c],
        vec![n, d],
        out,
        Box::new(move |g, sink| {
            sink.with(ia, |buf| {
                for i in 0..n {
                    for j in 0..d {
                        buf[i * d + j] += g[i * d + j] * cv[i];
                    }
                }
            });
            sink.with(ic, |buf| {
                for i in 0..n {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += g[i * d + j] * av[i * d + j];
                    }
                    buf[i] += s;
                }
            });
        }),
    ))
}

/// Tile a vector (d) into rows of (n, d).
pub fn tile_rows(v: &Var, n: usize) -> Result<Var> {
    let s = v.shape();
    if s.len() != 1 {
        return Err(Error::shape("tile_rows", "rank 1", fmt_shape(&s)));
    }
    let d = s[0];
    let vv = v.value();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        out[i * d..(i + 1) * d].copy_from_slice(&vv);
    }
    let iv = v.id();
    Ok(v.tape().op(
        &[v],
        vec![n, d],
        out,
        Box::new(move |g, sink| {
            sink.with(iv, |buf| {
                for i in 0..n {
                    for j in 0..d {
                        buf[j] += g[i * d + j];
                    }
                }
            })
        }),
    ))
}

/// Dot product of two equal-shape tensors, as a scalar.
pub fn dot(a: &Var, b: &Var) -> Result<Var> {
    sum(&mul(a, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::Tensor;

    fn v(tape: &Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.var(Tensor::from_vec(shape, data).unwrap())
    }

    #[test]
    fn softmax_symmetry() {
        let tape = Tape::new();
        let x = v(&tape, &[2], vec![0.0, 0.0]);
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.value().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = v(&tape, &[4, 5], (0..20).map(|i| (i as f64) * 0.37 - 3.0).collect());
        let y = softmax(&x, 1).unwrap();
        let val = y.value();
        for r in 0..4 {
            let s: f64 = val[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn softmax_interior_axis() {
        let tape = Tape::new();
        let x = v(&tape, &[2, 3, 2], (0..12).map(|i| i as f64 * 0.1).collect());
        let y = softmax(&x, 1).unwrap();
        let val = y.value();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| val[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let tape = Tape::new();
        let x = v(&tape, &[3], vec![5.0, 5.0, 5.0]);
        let y = layer_norm(&x, 1e-5).unwrap();
        assert_eq!(y.value().as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let tape = Tape::new();
        let x = v(&tape, &[2, 0], vec![]);
        assert!(layer_norm(&x, 1e-5).is_err());
        assert!(softmax(&x, 1).is_err());
    }

    #[test]
    fn matmul_shape_diagnostics() {
        let tape = Tape::new();
        let a = v(&tape, &[2, 3], vec![0.0; 6]);
        let b = v(&tape, &[2, 3], vec![0.0; 6]);
        let err = matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn matmul_grad_of_sum_matches_row_sums_of_b() {
        // d/dA sum(A.B) = ones . B^T: every row equals the row sums of B.
        let tape = Tape::new();
        let a = v(&tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = v(&tape, &[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let loss = sum(&matmul(&a, &b).unwrap()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).data(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let tape = Tape::new();
        let a = v(&tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = v(&tape, &[2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.dims(), vec![2, 5]);
        assert_eq!(
            c.value().as_slice(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]
        );
        let a2 = narrow(&c, 1, 0, 2).unwrap();
        assert_eq!(a2.value().as_slice(), a.value().as_slice());
        let b2 = narrow(&c, 1, 2, 3).unwrap();
        assert_eq!(b2.value().as_slice(), b.value().as_slice());
    }

    #[test]
    fn clamp_zero_gradient_outside() {
        let tape = Tape::new();
        let x = v(&tape, &[3], vec![-2.0, 0.5, 2.0]);
        let y = clamp(&x, 0.0, 1.0);
        let loss = sum(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn abs_subgradient_zero_at_kink() {
        let tape = Tape::new();
        let x = v(&tape, &[3], vec![-2.0, 0.0, 3.0]);
        let loss = sum(&abs(&x)).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).data(), &[-1.0, 0.0, 1.0]);
    }
}
