//! Inner loops for the graph ops. Row-major throughout.

use super::Element;

const LANES: usize = 8;

/// Dot product with independent accumulators so the compiler can vectorize.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[b, o] = x[b, :] . w[o, :] + bias[o]`
pub fn dense_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    inp: usize,
    out: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * out];
    for b in 0..batch {
        let xr = &x[b * inp..(b + 1) * inp];
        let yr = &mut y[b * out..(b + 1) * out];
        for o in 0..out {
            let mut v = dot(xr, &w[o * inp..(o + 1) * inp]);
            if let Some(bias) = bias {
                v += bias[o];
            }
            yr[o] = v;
        }
    }
    y
}

pub fn dense_backward_input<T: Element>(
    dy: &[T],
    w: &[T],
    batch: usize,
    inp: usize,
    out: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * inp];
    for b in 0..batch {
        let dxr = &mut dx[b * inp..(b + 1) * inp];
        for o in 0..out {
            let g = dy[b * out + o];
            if g != T::zero() {
                axpy(g, &w[o * inp..(o + 1) * inp], dxr);
            }
        }
    }
    dx
}

pub fn dense_backward_weight<T: Element>(
    dy: &[T],
    x: &[T],
    batch: usize,
    inp: usize,
    out: usize,
) -> Vec<T> {
    let mut dw = vec![T::zero(); out * inp];
    for b in 0..batch {
        let xr = &x[b * inp..(b + 1) * inp];
        for o in 0..out {
            let g = dy[b * out + o];
            if g != T::zero() {
                axpy(g, xr, &mut dw[o * inp..(o + 1) * inp]);
            }
        }
    }
    dw
}

/// Per-row sums over the batch: `db[o] = sum_b dy[b, o]`.
pub fn bias_backward<T: Element>(dy: &[T], batch: usize, out: usize) -> Vec<T> {
    let mut db = vec![T::zero(); out];
    for b in 0..batch {
        for (d, &g) in db.iter_mut().zip(&dy[b * out..(b + 1) * out]) {
            *d += g;
        }
    }
    db
}

/// Geometry of a 2-D cross-correlation over `[C, H, W]` planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Unfolds one `[C, H, W]` sample into a `[C*KH*KW, OH*OW]` patch matrix.
pub fn im2col<T: Element>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto a `[C, H, W]` sample.
pub fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation over a batch. Returns the output and, when
/// `keep_cols` is set, the unfolded inputs for the weight gradient.
pub fn conv_forward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    keep_cols: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let k = g.patch_len();
    let p = g.positions();
    let mut out = vec![T::zero(); batch * g.out_channels * p];
    let mut kept = if keep_cols {
        Some(vec![T::zero(); batch * k * p])
    } else {
        None
    };
    let mut scratch = vec![T::zero(); k * p];
    for b in 0..batch {
        let xs = &x[b * g.input_len()..(b + 1) * g.input_len()];
        let cols: &mut [T] = match kept.as_mut() {
            Some(all) => &mut all[b * k * p..(b + 1) * k * p],
            None => &mut scratch,
        };
        im2col(g, xs, cols);
        let ob = &mut out[b * g.out_channels * p..(b + 1) * g.out_channels * p];
        for co in 0..g.out_channels {
            let orow = &mut ob[co * p..(co + 1) * p];
            if let Some(bias) = bias {
                orow.fill(bias[co]);
            }
            let wrow = &w[co * k..(co + 1) * k];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv != T::zero() {
                    axpy(wv, &cols[r * p..(r + 1) * p], orow);
                }
            }
        }
    }
    (out, kept)
}

pub fn conv_backward_input<T: Element>(g: &ConvGeometry, dy: &[T], w: &[T], batch: usize) -> Vec<T> {
    let k = g.patch_len();
    let p = g.positions();
    let mut dx = vec![T::zero(); batch * g.input_len()];
    let mut dcols = vec![T::zero(); k * p];
    for b in 0..batch {
        dcols.fill(T::zero());
        let db = &dy[b * g.out_channels * p..(b + 1) * g.out_channels * p];
        for co in 0..g.out_channels {
            let grow = &db[co * p..(co + 1) * p];
            let wrow = &w[co * k..(co + 1) * k];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv != T::zero() {
                    axpy(wv, grow, &mut dcols[r * p..(r + 1) * p]);
                }
            }
        }
        col2im(g, &dcols, &mut dx[b * g.input_len()..(b + 1) * g.input_len()]);
    }
    dx
}

pub fn conv_backward_weight<T: Element>(g: &ConvGeometry, dy: &[T], cols: &[T], batch: usize) -> Vec<T> {
    let k = g.patch_len();
    let p = g.positions();
    let mut dw = vec![T::zero(); g.out_channels * k];
    for b in 0..batch {
        let db = &dy[b * g.out_channels * p..(b + 1) * g.out_channels * p];
        let cb = &cols[b * k * p..(b + 1) * k * p];
        for co in 0..g.out_channels {
            let grow = &db[co * p..(co + 1) * p];
            let dwrow = &mut dw[co * k..(co + 1) * k];
            for (r, d) in dwrow.iter_mut().enumerate() {
                *d += dot(grow, &cb[r * p..(r + 1) * p]);
            }
        }
    }
    dw
}

pub fn conv_backward_bias<T: Element>(g: &ConvGeometry, dy: &[T], batch: usize) -> Vec<T> {
    let p = g.positions();
    let mut db = vec![T::zero(); g.out_channels];
    for b in 0..batch {
        for (co, d) in db.iter_mut().enumerate() {
            let off = (b * g.out_channels + co) * p;
            *d += dy[off..off + p].iter().copied().sum::<T>();
        }
    }
    db
}

/// Non-overlapping `k x k` mean pooling over `[planes, H, W]`; trailing
/// rows/columns that do not fill a window are dropped.
pub fn mean_pool_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::of((k * k) as f64);
    let mut y = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut y[pl * oh * ow..(pl + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..k {
                    let row = &src[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                    for &v in row {
                        s += v;
                    }
                }
                dst[oy * ow + ox] = s * scale;
            }
        }
    }
    y
}

pub fn mean_pool_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::of((k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * scale;
                for dy in 0..k {
                    for dx in 0..k {
                        dst[(oy * k + dy) * w + ox * k + dx] += g;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation used to check the im2col path.
    fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; g.out_channels * oh * ow];
        for co in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                s += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * w[((co * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                            }
                        }
                    }
                    y[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeometry {
            in_channels: 2,
            height: 5,
            width: 6,
            out_channels: 3,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..54).map(|i| ((i * 5) % 13) as f64 * 0.1 - 0.6).collect();
        let (y, _) = conv_forward(&g, &x, &w, None, 1, false);
        assert_eq!(y, naive_conv(&g, &x, &w));
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let expected: f64 = a.iter().map(|v| v * v).sum();
        assert_eq!(dot(&a, &a), expected);
    }

    #[test]
    fn mean_pool_drops_ragged_edge() {
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let y = mean_pool_forward(&x, 1, 3, 3, 2);
        assert_eq!(y, vec![(0.0 + 1.0 + 3.0 + 4.0) / 4.0]);
    }
}
