// Raw loops behind the tape primitives. Shapes are validated by the caller.

/// `[outer, axis, inner]` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (x[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..len {
                out[base + a * inner] /= sum;
            }
        }
    }
    out
}

pub(crate) fn log_softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                sum += (x[base + a * inner] - max).exp();
            }
            let lse = max + sum.ln();
            for a in 0..len {
                out[base + a * inner] = x[base + a * inner] - lse;
            }
        }
    }
    out
}

/// `[m,k] x [k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T` for a `[m,n]` matrix.
pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    /// Range of output columns whose input column `x + kx - pad` is in bounds.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let ow = self.out_w();
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(ow);
        (lo, hi.max(lo))
    }
}

/// Stride-1 zero-padded cross-correlation.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.n * d.o * oh * ow];
    for n in 0..d.n {
        for o in 0..d.o {
            let plane = &mut out[(n * d.o + o) * oh * ow..(n * d.o + o + 1) * oh * ow];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..d.c {
                let src = &x[(n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = w[((o * d.c + c) * d.kh + ky) * d.kw + kx];
                        let (x0, x1) = d.col_range(kx);
                        for y in 0..oh {
                            let iy = y + ky;
                            if iy < d.pad || iy - d.pad >= d.h {
                                continue;
                            }
                            let iy = iy - d.pad;
                            let dst = &mut plane[y * ow + x0..y * ow + x1];
                            let s0 = iy * d.w + x0 + kx - d.pad;
                            let srow = &src[s0..s0 + (x1 - x0)];
                            for (o, &s) in dst.iter_mut().zip(srow) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input if requested, grad_weight if requested, grad_bias).
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gw = want_weight.then(|| vec![0.0; w.len()]);
    let mut gb = vec![0.0; d.o];
    for n in 0..d.n {
        for o in 0..d.o {
            let gplane = &g[(n * d.o + o) * oh * ow..(n * d.o + o + 1) * oh * ow];
            gb[o] += gplane.iter().sum::<f64>();
            for c in 0..d.c {
                let xoff = (n * d.c + c) * d.h * d.w;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let widx = ((o * d.c + c) * d.kh + ky) * d.kw + kx;
                        let wv = w[widx];
                        let (x0, x1) = d.col_range(kx);
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let iy = y + ky;
                            if iy < d.pad || iy - d.pad >= d.h {
                                continue;
                            }
                            let iy = iy - d.pad;
                            let grow = &gplane[y * ow + x0..y * ow + x1];
                            let s0 = xoff + iy * d.w + x0 + kx - d.pad;
                            if gw.is_some() {
                                let srow = &x[s0..s0 + (x1 - x0)];
                                acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gx) = gx.as_mut() {
                                let dst = &mut gx[s0..s0 + (x1 - x0)];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// 2x2 stride-2 max pool over `[N,C,H,W]`; returns values and flat argmax.
pub(crate) fn max_pool2(x: &[f64], nc: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
