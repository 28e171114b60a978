//! Fourier-space convolution: FFT, truncated complex channel mixing, inverse FFT.
//!
//! Weights are stored as two real tensors (real and imaginary parts) of shape
//! `[2, modes_h, modes_w, Cin, Cout]`. Block 0 covers the lowest `modes_h`
//! positive row frequencies and block 1 the `modes_h` highest (negative) ones;
//! columns cover frequencies `0..modes_w` of the half spectrum. The inverse
//! transform follows the real-input convention: every column other than the
//! zero and Nyquist columns stands for itself and its conjugate mirror.

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn spectral_weight_shape(modes_h: usize, modes_w: usize, cin: usize, cout: usize) -> [usize; 5] {
    [2, modes_h, modes_w, cin, cout]
}

/// Row frequency index for each `(block, r)` pair, `None` when the high block
/// row duplicates a low block row.
pub fn retained_rows(h: usize, modes_h: usize) -> Vec<(usize, usize, Option<usize>)> {
    let mut rows = Vec::with_capacity(2 * modes_h);
    for r in 0..modes_h {
        rows.push((0, r, Some(r)));
    }
    for r in 0..modes_h {
        let ky = h - modes_h + r;
        rows.push((1, r, (ky >= modes_h).then_some(ky)));
    }
    rows
}

struct Plans<T: Scalar> {
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    h: usize,
    w: usize,
}

impl<T: Scalar> Plans<T> {
    fn new(h: usize, w: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            row_fwd: p.plan_fft_forward(w),
            row_inv: p.plan_fft_inverse(w),
            col_fwd: p.plan_fft_forward(h),
            col_inv: p.plan_fft_inverse(h),
            h,
            w,
        }
    }

    /// Unnormalized 2-D transform in place on a row-major `h×w` buffer.
    fn fft2(&self, buf: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(buf);
        let mut col = vec![Complex::new(T::zero(), T::zero()); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            cols.process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
    }

    fn forward_real(&self, x: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.fft2(&mut buf, false);
        buf
    }
}

fn column_weight<T: Scalar>(kx: usize, w: usize) -> T {
    if kx == 0 || (w % 2 == 0 && kx == w / 2) {
        T::one()
    } else {
        T::from_f64_lossy(2.0)
    }
}

impl<T: Scalar> Graph<T> {
    /// `x: [N, Cin, H, W]`, `w_re`/`w_im`: [`spectral_weight_shape`]. Output `[N, Cout, H, W]`.
    pub fn spectral_conv2d(&mut self, x: Var, w_re: Var, w_im: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w_re).to_vec();
        if xs.len() != 4 || ws.len() != 5 || ws[0] != 2 || self.shape(w_im) != ws.as_slice() {
            return Err(Error::Shape(format!("spectral_conv2d: input {xs:?}, weights {ws:?}")));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (mh, mw, wcin, cout) = (ws[1], ws[2], ws[3], ws[4]);
        if wcin != cin {
            return Err(Error::Shape(format!("spectral_conv2d: {cin} channels vs weights for {wcin}")));
        }
        let bound = h.min(w) / 2 + 1;
        if mh > bound || mw > bound || mh > h || mw > w / 2 + 1 {
            return Err(Error::InvalidArgument(format!(
                "retained modes ({mh}, {mw}) exceed the {h}x{w} grid (max {bound})"
            )));
        }
        let plans = Plans::<T>::new(h, w);
        let rows = retained_rows(h, mh);
        let hw = h * w;
        let inv_hw = T::one() / T::from_usize_lossy(hw);
        let xv = self.value(x).data();
        let wr = self.value(w_re).data();
        let wi = self.value(w_im).data();
        let widx = move |blk: usize, r: usize, kx: usize, i: usize, o: usize| {
            (((blk * mh + r) * mw + kx) * cin + i) * cout + o
        };
        let zero = Complex::new(T::zero(), T::zero());
        let mut out = vec![T::zero(); n * cout * hw];
        let mut spectra: Vec<Vec<Complex<T>>> = Vec::with_capacity(n * cin);
        for s in 0..n {
            for i in 0..cin {
                spectra.push(plans.forward_real(&xv[(s * cin + i) * hw..(s * cin + i + 1) * hw]));
            }
            for o in 0..cout {
                let mut z = vec![zero; hw];
                for &(blk, r, ky) in &rows {
                    let Some(ky) = ky else { continue };
                    for kx in 0..mw {
                        let mut acc = zero;
                        for i in 0..cin {
                            let wc = Complex::new(wr[widx(blk, r, kx, i, o)], wi[widx(blk, r, kx, i, o)]);
                            acc = acc + wc * spectra[s * cin + i][ky * w + kx];
                        }
                        z[ky * w + kx] = acc * column_weight::<T>(kx, w);
                    }
                }
                plans.fft2(&mut z, true);
                for (dst, v) in out[(s * cout + o) * hw..(s * cout + o + 1) * hw].iter_mut().zip(&z) {
                    *dst = v.re * inv_hw;
                }
            }
        }
        let out = Tensor::from_vec(&[n, cout, h, w], out)?;
        let (wri, wii) = (w_re.index(), w_im.index());
        Ok(self.push(out, &[x, w_re, w_im], move |nodes, g, need| {
            let wr = nodes[wri].value().data();
            let wi = nodes[wii].value().data();
            let gv = g.data();
            let mut dx = vec![T::zero(); n * cin * hw];
            let mut dwr = vec![T::zero(); wr.len()];
            let mut dwi = vec![T::zero(); wi.len()];
            for s in 0..n {
                // gradient with respect to the pre-inverse spectrum of each output
                let gz: Vec<Vec<Complex<T>>> = (0..cout)
                    .map(|o| plans.forward_real(&gv[(s * cout + o) * hw..(s * cout + o + 1) * hw]))
                    .collect();
                let mut gx: Vec<Vec<Complex<T>>> = vec![vec![zero; hw]; cin];
                for &(blk, r, ky) in &rows {
                    let Some(ky) = ky else { continue };
                    for kx in 0..mw {
                        let cw = column_weight::<T>(kx, w) * inv_hw;
                        for o in 0..cout {
                            let gzo = gz[o][ky * w + kx] * cw;
                            for i in 0..cin {
                                let k = widx(blk, r, kx, i, o);
                                if need[1] || need[2] {
                                    let gw = gzo * spectra[s * cin + i][ky * w + kx].conj();
                                    dwr[k] += gw.re;
                                    dwi[k] += gw.im;
                                }
                                if need[0] {
                                    let wc = Complex::new(wr[k], wi[k]);
                                    gx[i][ky * w + kx] = gx[i][ky * w + kx] + gzo * wc.conj();
                                }
                            }
                        }
                    }
                }
                if need[0] {
                    for (i, mut buf) in gx.into_iter().enumerate() {
                        plans.fft2(&mut buf, true);
                        for (dst, v) in dx[(s * cin + i) * hw..(s * cin + i + 1) * hw].iter_mut().zip(&buf) {
                            *dst = v.re;
                        }
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::from_vec(&[n, cin, h, w], dx).expect("sized")),
                need[1].then(|| Tensor::from_vec(&ws, dwr).expect("sized")),
                need[2].then(|| Tensor::from_vec(&ws, dwi).expect("sized")),
            ]
        }))
    }
}
