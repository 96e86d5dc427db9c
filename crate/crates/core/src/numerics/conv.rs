//! Strided 2D convolution, transposed convolution, and a box filter, each as
//! a single fused tape node with analytic backward.
//!
//! Layout: images are (h, w, c) row-major; convolution weights are
//! (kh, kw, c_in, c_out). No padding; output size is the valid range.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::fmt_shape;

/// Valid convolution with stride: (h, w, cin) -> ((h-kh)/s+1, (w-kw)/s+1, cout).
pub fn conv2d(input: &Var, weight: &Var, bias: &Var, stride: usize) -> Result<Var> {
    let is = input.shape();
    let ws = weight.shape();
    let bs = bias.shape();
    if is.len() != 3 || ws.len() != 4 || bs.len() != 1 {
        return Err(Error::shape(
            "conv2d",
            "(h,w,cin), (kh,kw,cin,cout), (cout)",
            format!("{} {} {}", fmt_shape(&is), fmt_shape(&ws), fmt_shape(&bs)),
        ));
    }
    let (h, w, cin) = (is[0], is[1], is[2]);
    let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
    if wcin != cin || bs[0] != cout {
        return Err(Error::shape(
            "conv2d",
            format!("cin {cin}, cout {}", bs[0]),
            format!("weight cin {wcin}, cout {cout}"),
        ));
    }
    if stride == 0 || h < kh || w < kw {
        return Err(Error::domain(
            "conv2d",
            format!("input {h}x{w} too small for kernel {kh}x{kw} stride {stride}"),
        ));
    }
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let (iv, wv, bv) = (input.value(), weight.value(), bias.value());

    let mut out = vec![0.0; oh * ow * cout];
    let row_work = ow * cout * kh * kw * cin;
    let (ivs, wvs, bvs): (&[f64], &[f64], &[f64]) = (&iv, &wv, &bv);
    let body = move |(oy, orow): (usize, &mut [f64])| {
        for ox in 0..ow {
            let (y0, x0) = (oy * stride, ox * stride);
            let dst = ox * cout;
            for ky in 0..kh {
                for kx in 0..kw {
                    let isrc = ((y0 + ky) * w + x0 + kx) * cin;
                    let wsrc = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let x = ivs[isrc + ci];
                        if x == 0.0 {
                            continue;
                        }
                        let wrow = &wvs[wsrc + ci * cout..wsrc + (ci + 1) * cout];
                        for co in 0..cout {
                            orow[dst + co] += x * wrow[co];
                        }
                    }
                }
            }
            for co in 0..cout {
                orow[dst + co] += bvs[co];
            }
        }
    };
    if row_work * oh > 200_000 {
        out.par_chunks_mut(ow * cout).enumerate().for_each(body);
    } else {
        out.chunks_mut(ow * cout).enumerate().for_each(body);
    }

    let (ii, iw, ib) = (input.id(), weight.id(), bias.id());
    Ok(input.tape().op(
        &[input, weight, bias],
        vec![oh, ow, cout],
        out,
        Box::new(move |g, sink| {
            // Input gradient in gather form: each input row is independent.
            sink.with(ii, |buf| {
                let wv: &[f64] = &wv;
                let body = |(iy, row): (usize, &mut [f64])| {
                    for ix in 0..w {
                        for ky in 0..kh {
                            if iy < ky || (iy - ky) % stride != 0 {
                                continue;
                            }
                            let oy = (iy - ky) / stride;
                            if oy >= oh {
                                continue;
                            }
                            for kx in 0..kw {
                                if ix < kx || (ix - kx) % stride != 0 {
                                    continue;
                                }
                                let ox = (ix - kx) / stride;
                                if ox >= ow {
                                    continue;
                                }
                                let gdst = (oy * ow + ox) * cout;
                                let wsrc = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let wrow = &wv[wsrc + ci * cout..wsrc + (ci + 1) * cout];
                                    let mut s = 0.0;
                                    for co in 0..cout {
                                        s += g[gdst + co] * wrow[co];
                                    }
                                    row[ix * cin + ci] += s;
                                }
                            }
                        }
                    }
                };
                if oh * ow * cout * kh * kw * cin > 200_000 {
                    buf.par_chunks_mut(w * cin).enumerate().for_each(body);
                } else {
                    buf.chunks_mut(w * cin).enumerate().for_each(body);
                }
            });
            // Weight gradient: each (ky, kx, ci) slab is independent.
            sink.with(iw, |buf| {
                let iv: &[f64] = &iv;
                let body = |(slab, wrow): (usize, &mut [f64])| {
                    let ky = slab / (kw * cin);
                    let kx = (slab / cin) % kw;
                    let ci = slab % cin;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let x = iv[((oy * stride + ky) * w + ox * stride + kx) * cin + ci];
                            if x == 0.0 {
                                continue;
                            }
                            let gdst = (oy * ow + ox) * cout;
                            for co in 0..cout {
                                wrow[co] += x * g[gdst + co];
                            }
                        }
                    }
                };
                if oh * ow * cout * kh * kw * cin > 200_000 {
                    buf.par_chunks_mut(cout).enumerate().for_each(body);
                } else {
                    buf.chunks_mut(cout).enumerate().for_each(body);
                }
            });
            sink.with(ib, |buf| {
                for p in 0..oh * ow {
                    for co in 0..cout {
                        buf[co] += g[p * cout + co];
                    }
                }
            });
        }),
    ))
}

/// Transposed convolution: (h, w, cin) -> ((h-1)*s + kh, (w-1)*s + kw, cout).
/// Weight layout (kh, kw, cin, cout); each input pixel scatters a kernel.
pub fn conv2d_transpose(input: &Var, weight: &Var, bias: &Var, stride: usize) -> Result<Var> {
    let is = input.shape();
    let ws = weight.shape();
    let bs = bias.shape();
    if is.len() != 3 || ws.len() != 4 || bs.len() != 1 {
        return Err(Error::shape(
            "conv2d_transpose",
            "(h,w,cin), (kh,kw,cin,cout), (cout)",
            format!("{} {} {}", fmt_shape(&is), fmt_shape(&ws), fmt_shape(&bs)),
        ));
    }
    let (h, w, cin) = (is[0], is[1], is[2]);
    let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
    if wcin != cin || bs[0] != cout || stride == 0 {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("cin {cin}, cout {}", bs[0]),
            format!("weight cin {wcin}, cout {cout}, stride {stride}"),
        ));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let (iv, wv, bv) = (input.value(), weight.value(), bias.value());

    let mut out = vec![0.0; oh * ow * cout];
    for p in 0..oh * ow {
        out[p * cout..(p + 1) * cout].copy_from_slice(&bv);
    }
    for iy in 0..h {
        for ix in 0..w {
            let isrc = (iy * w + ix) * cin;
            for ky in 0..kh {
                for kx in 0..kw {
                    let (oy, ox) = (iy * stride + ky, ix * stride + kx);
                    let dst = (oy * ow + ox) * cout;
                    let wsrc = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let x = iv[isrc + ci];
                        if x == 0.0 {
                            continue;
                        }
                        let wrow = &wv[wsrc + ci * cout..wsrc + (ci + 1) * cout];
                        for co in 0..cout {
                            out[dst + co] += x * wrow[co];
                        }
                    }
                }
            }
        }
    }

    let (ii, iw, ib) = (input.id(), weight.id(), bias.id());
    Ok(input.tape().op(
        &[input, weight, bias],
        vec![oh, ow, cout],
        out,
        Box::new(move |g, sink| {
            sink.with(ii, |buf| {
                for iy in 0..h {
                    for ix in 0..w {
                        let idst = (iy * w + ix) * cin;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let (oy, ox) = (iy * stride + ky, ix * stride + kx);
                                let gsrc = (oy * ow + ox) * cout;
                                let wsrc = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let mut s = 0.0;
                                    let wrow = &wv[wsrc + ci * cout..wsrc + (ci + 1) * cout];
                                    for co in 0..cout {
                                        s += g[gsrc + co] * wrow[co];
                                    }
                                    buf[idst + ci] += s;
                                }
                            }
                        }
                    }
                }
            });
            sink.with(iw, |buf| {
                for iy in 0..h {
                    for ix in 0..w {
                        let isrc = (iy * w + ix) * cin;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let (oy, ox) = (iy * stride + ky, ix * stride + kx);
                                let gsrc = (oy * ow + ox) * cout;
                                let wsrc = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let x = iv[isrc + ci];
                                    if x == 0.0 {
                                        continue;
                                    }
                                    for co in 0..cout {
                                        buf[wsrc + ci * cout + co] += x * g[gsrc + co];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            sink.with(ib, |buf| {
                for p in 0..oh * ow {
                    for co in 0..cout {
                        buf[co] += g[p * cout + co];
                    }
                }
            });
        }),
    ))
}

/// Per-channel sliding-window sum: (h, w, c) -> (h-win+1, w-win+1, c).
pub fn box_filter(input: &Var, win: usize) -> Result<Var> {
    let is = input.shape();
    if is.len() != 3 {
        return Err(Error::shape("box_filter", "(h,w,c)", fmt_shape(&is)));
    }
    let (h, w, c) = (is[0], is[1], is[2]);
    if win == 0 || h < win || w < win {
        return Err(Error::domain(
            "box_filter",
            format!("image {h}x{w} smaller than window {win}"),
        ));
    }
    let (oh, ow) = (h - win + 1, w - win + 1);
    let iv = input.value();
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = (oy * ow + ox) * c;
            for ky in 0..win {
                for kx in 0..win {
                    let src = ((oy + ky) * w + ox + kx) * c;
                    for ch in 0..c {
                        out[dst + ch] += iv[src + ch];
                    }
                }
            }
        }
    }
    let ii = input.id();
    Ok(input.tape().op(
        &[input],
        vec![oh, ow, c],
        out,
        Box::new(move |g, sink| {
            sink.with(ii, |buf| {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let src = (oy * ow + ox) * c;
                        for ky in 0..win {
                            for kx in 0..win {
                                let dst = ((oy + ky) * w + ox + kx) * c;
                                for ch in 0..c {
                                    buf[dst + ch] += g[src + ch];
                                }
                            }
                        }
                    }
                }
            })
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn conv_output_shape() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[64, 64, 3]));
        let w = tape.var(Tensor::zeros(&[4, 4, 3, 8]));
        let b = tape.var(Tensor::zeros(&[8]));
        let y = conv2d(&x, &w, &b, 4).unwrap();
        assert_eq!(y.dims(), vec![16, 16, 8]);
    }

    #[test]
    fn conv_transpose_inverts_shape() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[8, 8, 4]));
        let w = tape.var(Tensor::zeros(&[2, 2, 4, 16]));
        let b = tape.var(Tensor::zeros(&[16]));
        let y = conv2d_transpose(&x, &w, &b, 2).unwrap();
        assert_eq!(y.dims(), vec![16, 16, 16]);
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.var(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.var(Tensor::zeros(&[1]));
        let y = conv2d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.value().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn box_filter_sums_window() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(&[3, 3, 1], (1..=9).map(|i| i as f64).collect()).unwrap());
        let y = box_filter(&x, 2).unwrap();
        assert_eq!(y.dims(), vec![2, 2, 1]);
        assert_eq!(y.value().as_slice(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn small_image_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[3, 3, 1]));
        assert!(box_filter(&x, 7).is_err());
    }
}
