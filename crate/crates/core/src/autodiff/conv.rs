//! 2-D convolution via im2col and a matrix product.

use rayon::prelude::*;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{matmul, matmul_a_bt_acc, matmul_at_b_acc, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dConfig {
    /// Stride-1 convolution that keeps the spatial size for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn dilated_same(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            ..Self::default()
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin_g: usize,
    cout_g: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cfg: Conv2dConfig,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Columns for one sample and group: `[cin_g*kh*kw, ho*wo]`.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let Conv2dConfig {
            stride,
            padding,
            dilation,
            ..
        } = self.cfg;
        let hw_out = self.hw_out();
        for c in 0..self.cin_g {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..self.ho {
                        let ii = (oi * stride + ki * dilation) as isize - padding as isize;
                        let line = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ii as usize * self.w..(ii as usize + 1) * self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let jj = (oj * stride + kj * dilation) as isize - padding as isize;
                            *v = if jj < 0 || jj >= self.w as isize {
                                T::zero()
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let Conv2dConfig {
            stride,
            padding,
            dilation,
            ..
        } = self.cfg;
        let hw_out = self.hw_out();
        for c in 0..self.cin_g {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..self.ho {
                        let ii = (oi * stride + ki * dilation) as isize - padding as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base = ii as usize * self.w;
                        for oj in 0..self.wo {
                            let jj = (oj * stride + kj * dilation) as isize - padding as isize;
                            if jj >= 0 && jj < self.w as isize {
                                plane[base + jj as usize] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// `x: [N, Cin, H, W]`, `weight: [Cout, Cin/groups, kh, kw]`, `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, cfg: Conv2dConfig) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d: input {xs:?}, weight {ws:?}")));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let groups = cfg.groups.max(1);
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::Shape(format!(
                "conv2d: {cin} input channels, weight {ws:?}, groups {groups}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!("conv2d bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let span_h = cfg.dilation * (kh - 1) + 1;
        let span_w = cfg.dilation * (kw - 1) + 1;
        if h + 2 * cfg.padding < span_h || w + 2 * cfg.padding < span_w || cfg.stride == 0 {
            return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} does not fit {h}x{w}")));
        }
        let geo = Geometry {
            cin_g,
            cout_g: cout / groups,
            h,
            w,
            kh,
            kw,
            ho: (h + 2 * cfg.padding - span_h) / cfg.stride + 1,
            wo: (w + 2 * cfg.padding - span_w) / cfg.stride + 1,
            cfg,
        };
        let (k, hw_out) = (geo.k(), geo.hw_out());
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = bias.map(|b| self.value(b).data());
        let per_sample = cout * hw_out;
        let mut out = vec![T::zero(); n * per_sample];
        out.par_chunks_mut(per_sample)
            .enumerate()
            .for_each(|(s, ys)| {
                let mut cols = vec![T::zero(); k * hw_out];
                for grp in 0..groups {
                    let xin = &xv[(s * cin + grp * cin_g) * h * w..];
                    geo.im2col(xin, &mut cols);
                    let wg = &wv[grp * geo.cout_g * k..(grp + 1) * geo.cout_g * k];
                    let yg = &mut ys[grp * geo.cout_g * hw_out..(grp + 1) * geo.cout_g * hw_out];
                    matmul(geo.cout_g, k, hw_out, wg, &cols, yg);
                }
                if let Some(bv) = bv {
                    for (o, &b) in bv.iter().enumerate() {
                        for v in &mut ys[o * hw_out..(o + 1) * hw_out] {
                            *v += b;
                        }
                    }
                }
            });
        let out = Tensor::from_vec(&[n, cout, geo.ho, geo.wo], out)?;
        let (xi, wi) = (x.index(), weight.index());
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(out, &parents, move |nodes, g, need| {
            let xv = nodes[xi].value().data();
            let wv = nodes[wi].value().data();
            let gv = g.data();
            // per-sample partial results, reduced in sample order for determinism
            let partial: Vec<(Vec<T>, Vec<T>)> = (0..n)
                .into_par_iter()
                .map(|s| {
                    let mut dx = if need[0] { vec![T::zero(); cin * h * w] } else { Vec::new() };
                    let mut dw = if need[1] { vec![T::zero(); cout * k] } else { Vec::new() };
                    let mut cols = vec![T::zero(); k * hw_out];
                    let mut dcols = vec![T::zero(); k * hw_out];
                    for grp in 0..groups {
                        let gy = &gv[(s * cout + grp * geo.cout_g) * hw_out..][..geo.cout_g * hw_out];
                        if need[1] {
                            geo.im2col(&xv[(s * cin + grp * cin_g) * h * w..], &mut cols);
                            let dwg = &mut dw[grp * geo.cout_g * k..(grp + 1) * geo.cout_g * k];
                            matmul_a_bt_acc(geo.cout_g, hw_out, k, gy, &cols, dwg);
                        }
                        if need[0] {
                            let wg = &wv[grp * geo.cout_g * k..(grp + 1) * geo.cout_g * k];
                            dcols.fill(T::zero());
                            matmul_at_b_acc(k, geo.cout_g, hw_out, wg, gy, &mut dcols);
                            geo.col2im(&dcols, &mut dx[grp * cin_g * h * w..(grp + 1) * cin_g * h * w]);
                        }
                    }
                    (dx, dw)
                })
                .collect();
            let mut res = Vec::with_capacity(3);
            if need[0] {
                let mut dx = Vec::with_capacity(n * cin * h * w);
                for (d, _) in &partial {
                    dx.extend_from_slice(d);
                }
                res.push(Some(Tensor::from_vec(&[n, cin, h, w], dx).expect("sized")));
            } else {
                res.push(None);
            }
            if need[1] {
                let mut dw = vec![T::zero(); cout * k];
                for (_, d) in &partial {
                    for (a, &b) in dw.iter_mut().zip(d) {
                        *a += b;
                    }
                }
                res.push(Some(Tensor::from_vec(&[cout, cin_g, kh, kw], dw).expect("sized")));
            } else {
                res.push(None);
            }
            if has_bias {
                res.push(need[2].then(|| {
                    let mut db = vec![T::zero(); cout];
                    for s in 0..n {
                        for (o, d) in db.iter_mut().enumerate() {
                            let base = (s * cout + o) * hw_out;
                            *d += gv[base..base + hw_out].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::from_vec(&[cout], db).expect("sized")
                }));
            }
            res
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_relative_error;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], cfg: Conv2dConfig) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, cin_g, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let cout_g = cout / cfg.groups;
        let ho = (h + 2 * cfg.padding - cfg.dilation * (kh - 1) - 1) / cfg.stride + 1;
        let wo = (wd + 2 * cfg.padding - cfg.dilation * (kw - 1) - 1) / cfg.stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for s in 0..n {
            for o in 0..cout {
                let grp = o / cout_g;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = b[o];
                        for c in 0..cin_g {
                            let ci = grp * cin_g + c;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (oi * cfg.stride + ki * cfg.dilation) as isize - cfg.padding as isize;
                                    let jj = (oj * cfg.stride + kj * cfg.dilation) as isize - cfg.padding as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                        acc += x.data()[((s * cin + ci) * h + ii as usize) * wd + jj as usize]
                                            * w.data()[((o * cin_g + c) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * cout + o) * ho + oi) * wo + oj] = acc;
                    }
                }
            }
        }
        let _ = cin;
        out
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (Conv2dConfig::same(3), 4, 6, 1),
            (Conv2dConfig::same(3).with_stride(2), 4, 6, 1),
            (Conv2dConfig::dilated_same(3, 2), 4, 4, 4),
            (Conv2dConfig::default(), 2, 3, 1),
        ];
        for (cfg, cin, cout, groups) in cases {
            let cfg = cfg.with_groups(groups);
            let x = Tensor::<f64>::uniform(&[2, cin, 7, 6], 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(&[cout, cin / groups, 3, 3], 1.0, &mut rng);
            let b: Vec<f64> = (0..cout).map(|i| i as f64 * 0.1).collect();
            let expect = naive_conv(&x, &w, &b, cfg);
            let mut g = Graph::inference();
            let xv = g.constant(x);
            let wv = g.constant(w);
            let bv = g.constant(Tensor::from_vec(&[cout], b).unwrap());
            let y = g.conv2d(xv, wv, Some(bv), cfg).unwrap();
            assert_eq!(g.shape(y), expect.shape());
            for (a, e) in g.value(y).data().iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (cfg, groups) in [
            (Conv2dConfig::same(3), 1),
            (Conv2dConfig::same(3).with_stride(2), 1),
            (Conv2dConfig::dilated_same(3, 2), 2),
        ] {
            let cfg = cfg.with_groups(groups);
            let x = Tensor::<f64>::uniform(&[2, 2, 4, 4], 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(&[2, 2 / groups, 3, 3], 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(&[2], 1.0, &mut rng);
            let err = max_relative_error(&[x, w, b], 1e-6, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), cfg).unwrap();
                let t = g.tanh(y);
                g.sum(t)
            });
            assert!(err < 1e-6, "{cfg:?}: {err}");
        }
    }

    #[test]
    fn rejects_bad_group_layout() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(g.conv2d(x, w, None, Conv2dConfig::same(3).with_groups(2)).is_err());
    }
}
