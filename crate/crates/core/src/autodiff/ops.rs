//! Element-wise, broadcasting and shape operations.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Scalar> Graph<T> {
    fn unary<F, D>(&mut self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + Send + 'static,
    {
        let out = self.value(x).map(f);
        let xi = x.index();
        let yi = self.len();
        self.push(out, &[x], move |nodes, g, _| {
            let xv = nodes[xi].value().data();
            let yv = nodes[yi].value().data();
            let data = g
                .data()
                .iter()
                .zip(xv.iter().zip(yv))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data).expect("same shape"))]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    /// `ln(c / (1 - c))` with `c` clamped to `[margin, 1 - margin]`; zero
    /// gradient where the clamp is active.
    pub fn logit(&mut self, x: Var, margin: f64) -> Var {
        let lo = T::from_f64(margin).expect("representable");
        let hi = T::one() - lo;
        self.unary(
            x,
            move |v| {
                let c = v.max(lo).min(hi);
                (c / (T::one() - c)).ln()
            },
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one() / (x * (T::one() - x))
                }
            },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, |x, _| gelu_grad(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    fn binary_same(&mut self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], |_, g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, &[a, b], |_, g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| g.map(|v| -v)),
            ]
        }))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let (ai, bi) = (a.index(), b.index());
        Ok(self.push(out, &[a, b], move |nodes, g, need| {
            let av = nodes[ai].value();
            let bv = nodes[bi].value();
            vec![
                need[0].then(|| g.zip_map(bv, |g, b| g * b)),
                need[1].then(|| g.zip_map(av, |g, a| g * a)),
            ]
        }))
    }

    /// Sum of several equally shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Shape("add_n of nothing".into()))?;
        let mut acc = self.value(first).clone();
        for &x in rest {
            if self.shape(x) != acc.shape() {
                return Err(Error::Shape(format!(
                    "add_n: {:?} vs {:?}",
                    self.shape(x),
                    acc.shape()
                )));
            }
            acc.add_assign(self.value(x));
        }
        let n = xs.len();
        Ok(self.push(acc, xs, move |_, g, need| {
            (0..n).map(|i| need[i].then(|| g.clone())).collect()
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x).to_vec();
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], move |_, g, _| {
            vec![Some(g.clone().reshape(&old).expect("same length"))]
        }))
    }

    /// Broadcast `x` to `shape`. `x` must have the same rank, with every
    /// dimension either equal to the target or 1.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if src.len() != shape.len()
            || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::Shape(format!("cannot broadcast {src:?} to {shape:?}")));
        }
        let src_strides = strides(&src);
        let dst_strides = strides(shape);
        let total: usize = shape.iter().product();
        // source offset for every destination element
        let map: Vec<usize> = (0..total)
            .map(|flat| {
                let mut rem = flat;
                let mut off = 0;
                for d in 0..shape.len() {
                    let idx = rem / dst_strides[d];
                    rem %= dst_strides[d];
                    if src[d] != 1 {
                        off += idx * src_strides[d];
                    }
                }
                off
            })
            .collect();
        let xv = self.value(x).data();
        let data = map.iter().map(|&o| xv[o]).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, &[x], move |_, g, _| {
            let mut acc = Tensor::zeros(&src);
            let a = acc.data_mut();
            for (&o, &gv) in map.iter().zip(g.data()) {
                a[o] += gv;
            }
            vec![Some(acc)]
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow axis {axis} [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(out, &[x], move |_, g, _| {
            let mut acc = Tensor::zeros(&shape);
            let a = acc.data_mut();
            let gv = g.data();
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                a[dst..dst + len * inner].copy_from_slice(&gv[src..src + len * inner]);
            }
            vec![Some(acc)]
        }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &sz) in xs.iter().zip(&sizes) {
                let xv = self.value(x).data();
                data.extend_from_slice(&xv[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let out = Tensor::from_vec(&out_shape, data)?;
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&x| self.shape(x).to_vec()).collect();
        Ok(self.push(out, xs, move |_, g, need| {
            let gv = g.data();
            let mut offset = 0;
            let mut res = Vec::with_capacity(sizes.len());
            for (i, &sz) in sizes.iter().enumerate() {
                if need[i] {
                    let mut part = Vec::with_capacity(outer * sz * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&gv[base..base + sz * inner]);
                    }
                    res.push(Some(Tensor::from_vec(&shapes[i], part).expect("sized")));
                } else {
                    res.push(None);
                }
                offset += sz;
            }
            res
        }))
    }

    /// Mean over the two trailing spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn mean_hw(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("mean_hw expects NCHW, got {shape:?}")));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv = T::one() / T::from_usize_lossy(hw);
        let xv = self.value(x).data();
        let data = (0..n * c)
            .map(|i| xv[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(out, &[x], move |_, g, _| {
            let mut acc = Tensor::zeros(&shape);
            let a = acc.data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                for v in &mut a[i * hw..(i + 1) * hw] {
                    *v = gv * inv;
                }
            }
            vec![Some(acc)]
        }))
    }

    /// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("upsample2 expects NCHW, got {shape:?}")));
        }
        let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (h2, w2) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); nc * h2 * w2];
        for p in 0..nc {
            for i in 0..h2 {
                for j in 0..w2 {
                    data[p * h2 * w2 + i * w2 + j] = xv[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[shape[0], shape[1], h2, w2], data)?;
        Ok(self.push(out, &[x], move |_, g, _| {
            let mut acc = Tensor::zeros(&shape);
            let a = acc.data_mut();
            let gv = g.data();
            for p in 0..nc {
                for i in 0..h2 {
                    for j in 0..w2 {
                        a[p * h * w + (i / 2) * w + j / 2] += gv[p * h2 * w2 + i * w2 + j];
                    }
                }
            }
            vec![Some(acc)]
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], move |_, g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    // sqrt(2/pi), 0.044715
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

fn gelu<T: Scalar>(x: T) -> T {
    let (k, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (k, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_relative_error;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn elementwise_gradients() {
        let a = rand_t(&[2, 3], 1);
        let b = rand_t(&[2, 3], 2);
        let err = max_relative_error(&[a, b], 1e-6, |g, v| {
            let s = g.sigmoid(v[0]);
            let t = g.tanh(v[1]);
            let m = g.mul(s, t).unwrap();
            let ge = g.gelu(m);
            let d = g.sub(ge, v[1]).unwrap();
            let sq = g.mul(d, d).unwrap();
            g.sum(sq)
        });
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn logit_inverts_sigmoid_and_clamps() {
        let x = Tensor::from_vec(&[4], vec![0.2, 0.5, 0.9, 1.0]).unwrap();
        let mut g = Graph::<f64>::inference();
        let v = g.constant(x);
        let l = g.logit(v, 1e-6);
        assert!((g.value(l).data()[0] - (0.25f64).ln()).abs() < 1e-12);
        assert_eq!(g.value(l).data()[1], 0.0);
        assert!((g.value(l).data()[3] - ((1.0 - 1e-6) / 1e-6f64).ln()).abs() < 1e-6);
        let s = g.sigmoid(l);
        assert!((g.value(s).data()[2] - 0.9).abs() < 1e-12);

        let a = rand_t(&[2, 3], 3).map(|v| 0.5 + 0.4 * v);
        let err = max_relative_error(&[a], 1e-7, |g, v| {
            let l = g.logit(v[0], 1e-6);
            let sq = g.mul(l, l).unwrap();
            g.sum(sq)
        });
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn shape_op_gradients() {
        let a = rand_t(&[2, 3, 2, 2], 3);
        let b = rand_t(&[2, 1, 2, 2], 4);
        let c = rand_t(&[2, 3], 5);
        let err = max_relative_error(&[a, b, c], 1e-6, |g, v| {
            let cat = g.concat(&[v[0], v[1]], 1).unwrap();
            let nar = g.narrow(cat, 1, 1, 3).unwrap();
            let up = g.upsample2(nar).unwrap();
            let pooled = g.mean_hw(up).unwrap();
            let cg = g.reshape(v[2], &[2, 3, 1, 1]).unwrap();
            let cb = g.broadcast(cg, &[2, 3, 2, 2]).unwrap();
            let prod = g.mul(nar, cb).unwrap();
            let p2 = g.mean_hw(prod).unwrap();
            let both = g.add_n(&[pooled, p2, pooled]).unwrap();
            let sq = g.mul(both, both).unwrap();
            g.mean(sq)
        });
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let mut g = Graph::<f64>::inference();
        let a = g.constant(rand_t(&[2, 5, 3], 9));
        let p1 = g.narrow(a, 1, 0, 2).unwrap();
        let p2 = g.narrow(a, 1, 2, 3).unwrap();
        let back = g.concat(&[p1, p2], 1).unwrap();
        assert_eq!(g.value(back), g.value(a));
    }

    #[test]
    fn mismatched_add_is_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.add(a, b).is_err());
        assert!(g.broadcast(b, &[2, 2]).is_err());
    }
}
