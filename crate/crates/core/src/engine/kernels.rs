//! Raw forward/backward kernels over flat row-major buffers.
//!
//! Layouts: signals `[B, C, T]`, conv weights `[Cout, Cin, k]`, transposed
//! conv weights `[Cin, Cout, k]`, embedding tables `[C, E]`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Range of output positions `t'` whose tap `j` lands inside `[0, t_in)`.
    #[inline]
    fn valid_range(&self, j: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > j {
            (self.pad - j).div_ceil(s).min(self.t_out)
        } else {
            0
        };
        let hi_excl = if self.t_in + self.pad > j {
            ((self.t_in - 1 + self.pad - j) / s + 1).min(self.t_out)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }
}

pub fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, ti, to) = (g.kernel, g.t_in, g.t_out);
    let mut y = vec![0.0; g.batch * g.c_out * to];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let yrow = &mut y[(b * g.c_out + o) * to..][..to];
            yrow.fill(bias[o]);
            for c in 0..g.c_in {
                let xrow = &x[(b * g.c_in + c) * ti..][..ti];
                let wrow = &w[(o * g.c_in + c) * k..][..k];
                for (j, &wv) in wrow.iter().enumerate() {
                    let (lo, hi) = g.valid_range(j);
                    if hi <= lo {
                        continue;
                    }
                    if g.stride == 1 {
                        let off = lo + j - g.pad;
                        let xs = &xrow[off..off + (hi - lo)];
                        for (yv, xv) in yrow[lo..hi].iter_mut().zip(xs) {
                            *yv += wv * xv;
                        }
                    } else {
                        for (tp, yv) in yrow.iter_mut().enumerate().take(hi).skip(lo) {
                            *yv += wv * xrow[tp * g.stride + j - g.pad];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients `(dx, dw, db)` of a conv1d given the upstream gradient `dy`.
/// `dx` is skipped (empty) when `need_dx` is false.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (k, ti, to) = (g.kernel, g.t_in, g.t_out);
    let mut dx = if need_dx {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let dyrow = &dy[(b * g.c_out + o) * to..][..to];
            db[o] += dyrow.iter().sum::<f64>();
            for c in 0..g.c_in {
                let xbase = (b * g.c_in + c) * ti;
                let xrow = &x[xbase..][..ti];
                let wbase = (o * g.c_in + c) * k;
                for j in 0..k {
                    let (lo, hi) = g.valid_range(j);
                    if hi <= lo {
                        continue;
                    }
                    let wv = w[wbase + j];
                    if g.stride == 1 {
                        let off = lo + j - g.pad;
                        let n = hi - lo;
                        let dys = &dyrow[lo..hi];
                        dw[wbase + j] += dys.iter().zip(&xrow[off..off + n]).map(|(a, b)| a * b).sum::<f64>();
                        if need_dx {
                            for (dxv, dyv) in dx[xbase + off..xbase + off + n].iter_mut().zip(dys) {
                                *dxv += wv * dyv;
                            }
                        }
                    } else {
                        let mut acc = 0.0;
                        for tp in lo..hi {
                            let xi = tp * g.stride + j - g.pad;
                            acc += dyrow[tp] * xrow[xi];
                            if need_dx {
                                dx[xbase + xi] += wv * dyrow[tp];
                            }
                        }
                        dw[wbase + j] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution without padding: output length `(T - 1)·s + k`.
pub fn conv_transpose1d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, ti, to, s) = (g.kernel, g.t_in, g.t_out, g.stride);
    let mut y = vec![0.0; g.batch * g.c_out * to];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            y[(b * g.c_out + o) * to..][..to].fill(bias[o]);
        }
        for c in 0..g.c_in {
            let xrow = &x[(b * g.c_in + c) * ti..][..ti];
            for o in 0..g.c_out {
                let yrow = &mut y[(b * g.c_out + o) * to..][..to];
                let wrow = &w[(c * g.c_out + o) * k..][..k];
                for (j, &wv) in wrow.iter().enumerate() {
                    for (t, &xv) in xrow.iter().enumerate() {
                        yrow[t * s + j] += wv * xv;
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (k, ti, to, s) = (g.kernel, g.t_in, g.t_out, g.stride);
    let mut dx = if need_dx {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            db[o] += dy[(b * g.c_out + o) * to..][..to].iter().sum::<f64>();
        }
        for c in 0..g.c_in {
            let xbase = (b * g.c_in + c) * ti;
            for o in 0..g.c_out {
                let dyrow = &dy[(b * g.c_out + o) * to..][..to];
                let wbase = (c * g.c_out + o) * k;
                for j in 0..k {
                    let wv = w[wbase + j];
                    let mut acc = 0.0;
                    for t in 0..ti {
                        let d = dyrow[t * s + j];
                        acc += x[xbase + t] * d;
                        if need_dx {
                            dx[xbase + t] += wv * d;
                        }
                    }
                    dw[wbase + j] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Max over disjoint windows; returns values and the flat argmax index of
/// each window (lowest index on ties).
pub fn maxpool1d_forward(x: &[f64], rows: usize, t_in: usize, window: usize) -> (Vec<f64>, Vec<usize>) {
    let t_out = t_in / window;
    let mut y = Vec::with_capacity(rows * t_out);
    let mut arg = Vec::with_capacity(rows * t_out);
    for r in 0..rows {
        for t in 0..t_out {
            let start = r * t_in + t * window;
            let mut best = start;
            for i in start + 1..start + window {
                if x[i] > x[best] {
                    best = i;
                }
            }
            y.push(x[best]);
            arg.push(best);
        }
    }
    (y, arg)
}

/// `out[b, e, t] = Σ_c table[c, e] · onehot[b, c, t]`.
pub fn embedding_forward(table: &[f64], onehot: &[f64], batch: usize, classes: usize, dim: usize, t: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * dim * t];
    for b in 0..batch {
        for c in 0..classes {
            let ohrow = &onehot[(b * classes + c) * t..][..t];
            for e in 0..dim {
                let wv = table[c * dim + e];
                if wv == 0.0 {
                    continue;
                }
                let yrow = &mut y[(b * dim + e) * t..][..t];
                for (yv, ov) in yrow.iter_mut().zip(ohrow) {
                    *yv += wv * ov;
                }
            }
        }
    }
    y
}

/// Per-column softmax over the channel axis of a `[B, C, T]` buffer.
pub fn softmax_columns(z: &[f64], batch: usize, classes: usize, t: usize) -> Vec<f64> {
    let mut p = vec![0.0; z.len()];
    for b in 0..batch {
        let base = b * classes * t;
        for tt in 0..t {
            let mut m = f64::NEG_INFINITY;
            for c in 0..classes {
                m = m.max(z[base + c * t + tt]);
            }
            let mut sum = 0.0;
            for c in 0..classes {
                let e = (z[base + c * t + tt] - m).exp();
                p[base + c * t + tt] = e;
                sum += e;
            }
            for c in 0..classes {
                p[base + c * t + tt] /= sum;
            }
        }
    }
    p
}

/// Channel index of the maximum in each `(b, t)` column, lowest on ties.
/// Returned in `[B, T]` order.
pub fn argmax_columns(z: &[f64], batch: usize, classes: usize, t: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch * t);
    for b in 0..batch {
        let base = b * classes * t;
        for tt in 0..t {
            let mut best = 0;
            for c in 1..classes {
                if z[base + c * t + tt] > z[base + best * t + tt] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

pub fn one_hot_columns(ids: &[usize], batch: usize, classes: usize, t: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * classes * t];
    for b in 0..batch {
        for tt in 0..t {
            let c = ids[b * t + tt];
            y[(b * classes + c) * t + tt] = 1.0;
        }
    }
    y
}
