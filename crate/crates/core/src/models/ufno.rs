//! U-FNO with time folded into channels.
//!
//! Lift → `F` Fourier layers → `F'` U-Fourier layers → projection. A Fourier
//! layer sums a truncated spectral convolution and a 1×1 bypass; a
//! U-Fourier layer adds a two-level strided-convolution U-path to that sum.

use rand::Rng;

use super::params::{conv, Bound, Init, ParamSet};
use super::{output_head, ModelSpec};
use crate::autodiff::{spectral_weight_shape, Conv2dConfig, Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn spectral<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, width: usize, modes: usize) {
    let shape = spectral_weight_shape(modes, modes, width, width);
    let bound = 1.0 / (width * width) as f64;
    init.uniform(&format!("{name}.wr"), &shape, bound);
    init.uniform(&format!("{name}.wi"), &shape, bound);
}

pub(super) fn init<T: Scalar, R: Rng>(spec: &ModelSpec, rng: &mut R) -> ParamSet<T> {
    let mut init = Init::new(rng);
    let w = spec.hidden;
    init.conv("lift", w, spec.m * spec.in_channels + 2, 1, 1);
    for l in 0..spec.fourier_layers {
        spectral(&mut init, &format!("f{l}"), w, spec.modes);
        init.conv(&format!("f{l}.lin"), w, w, 1, 1);
    }
    for l in 0..spec.u_fourier_layers {
        let name = format!("u{l}");
        spectral(&mut init, &name, w, spec.modes);
        init.conv(&format!("{name}.lin"), w, w, 1, 1);
        init.conv(&format!("{name}.down1"), w, w, 3, 1);
        init.conv(&format!("{name}.down2"), w, w, 3, 1);
        init.conv(&format!("{name}.up2"), w, w, 3, 1);
        init.conv(&format!("{name}.up1"), w, 2 * w, 3, 1);
    }
    init.conv("proj1", 2 * w, w, 1, 1);
    init.conv("proj2", spec.n * spec.out_channels, 2 * w, 1, 1);
    init.finish()
}

fn grid<T: Scalar>(b: usize, h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(b * 2 * h * w);
    let (sh, sw) = ((h.max(2) - 1) as f64, (w.max(2) - 1) as f64);
    for _ in 0..b {
        for i in 0..h {
            for _ in 0..w {
                data.push(T::from_f64_lossy(i as f64 / sh));
            }
        }
        for _ in 0..h {
            for j in 0..w {
                data.push(T::from_f64_lossy(j as f64 / sw));
            }
        }
    }
    Tensor::from_vec(&[b, 2, h, w], data).expect("grid size")
}

fn fourier_sum<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let sp = g.spectral_conv2d(x, p.var(&format!("{name}.wr")), p.var(&format!("{name}.wi")))?;
    let lin = conv(g, p, &format!("{name}.lin"), x, Conv2dConfig::same(1))?;
    g.add(sp, lin)
}

fn u_path<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let down = Conv2dConfig::same(3).with_stride(2);
    let d1 = conv(g, p, &format!("{name}.down1"), x, down)?;
    let d1 = g.gelu(d1);
    let d2 = conv(g, p, &format!("{name}.down2"), d1, down)?;
    let d2 = g.gelu(d2);
    let u2 = g.upsample2(d2)?;
    let u2 = conv(g, p, &format!("{name}.up2"), u2, Conv2dConfig::same(3))?;
    let u2 = g.gelu(u2);
    let skip = g.concat(&[u2, d1], 1)?;
    let u1 = g.upsample2(skip)?;
    conv(g, p, &format!("{name}.up1"), u1, Conv2dConfig::same(3))
}

pub(super) fn forward<T: Scalar>(spec: &ModelSpec, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, w) = (s[0], s[3], s[4]);
    let folded = g.reshape(x, &[b, spec.m * spec.in_channels, h, w])?;
    let coords = g.constant(grid(b, h, w));
    let input = g.concat(&[folded, coords], 1)?;
    let mut z = conv(g, p, "lift", input, Conv2dConfig::same(1))?;
    for l in 0..spec.fourier_layers {
        let y = fourier_sum(g, p, &format!("f{l}"), z)?;
        z = g.gelu(y);
    }
    for l in 0..spec.u_fourier_layers {
        let name = format!("u{l}");
        let y = fourier_sum(g, p, &name, z)?;
        let u = u_path(g, p, &name, z)?;
        let y = g.add(y, u)?;
        z = g.gelu(y);
    }
    let y = conv(g, p, "proj1", z, Conv2dConfig::same(1))?;
    let y = g.gelu(y);
    let y = conv(g, p, "proj2", y, Conv2dConfig::same(1))?;
    let y = output_head(g, spec, y, folded)?;
    g.reshape(y, &[b, spec.n, spec.out_channels, h, w])
}
