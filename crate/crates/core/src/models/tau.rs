//! Recurrence-free encoder / temporal-attention translator / decoder.
//!
//! Frames are encoded independently at half resolution, stacked along the
//! channel axis, and refined by attention blocks. Each block multiplies the
//! values by a static spatial attention map (depthwise, dilated depthwise and
//! pointwise convolutions) and a dynamic per-channel gate (pooled two-layer
//! MLP with sigmoid), then applies a residual MLP.

use rand::Rng;

use super::params::{conv, Bound, Init, ParamSet};
use super::{output_head, ModelSpec};
use crate::autodiff::{Conv2dConfig, Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;

const GATE_REDUCTION: usize = 4;

fn translator_channels(spec: &ModelSpec) -> usize {
    spec.m * spec.hidden
}

fn gate_hidden(c: usize) -> usize {
    (c / GATE_REDUCTION).max(4)
}

pub(super) fn init<T: Scalar, R: Rng>(spec: &ModelSpec, rng: &mut R) -> ParamSet<T> {
    let mut init = Init::new(rng);
    let hid = spec.hidden;
    let c = translator_channels(spec);
    init.conv("enc1", hid, spec.in_channels, 3, 1);
    init.conv("enc2", hid, hid, 3, 1);
    for b in 0..spec.tau_blocks {
        let name = format!("t{b}");
        init.conv(&format!("{name}.dw"), c, c, 5, c);
        init.conv(&format!("{name}.dwd"), c, c, 7, c);
        init.conv(&format!("{name}.pw"), c, c, 1, 1);
        init.conv(&format!("{name}.fc1"), gate_hidden(c), c, 1, 1);
        init.conv(&format!("{name}.fc2"), c, gate_hidden(c), 1, 1);
        init.conv(&format!("{name}.mlp1"), 2 * c, c, 1, 1);
        init.conv(&format!("{name}.mlp2"), c, 2 * c, 1, 1);
    }
    if spec.m != spec.n {
        init.conv("remap", spec.n * hid, c, 1, 1);
    }
    init.conv("dec1", hid, hid, 3, 1);
    init.conv("dec2", spec.out_channels, hid, 1, 1);
    init.finish()
}

/// Dynamic channel gate of translator block `block`: `[B, C, H, W] -> [B, C, 1, 1]`, values in (0, 1).
pub fn dynamic_gate<T: Scalar>(g: &mut Graph<T>, p: &Bound, block: usize, z: Var) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let pooled = g.mean_hw(z)?;
    let pooled = g.reshape(pooled, &[s[0], s[1], 1, 1])?;
    let a = conv(g, p, &format!("t{block}.fc1"), pooled, Conv2dConfig::same(1))?;
    let a = g.relu(a);
    let a = conv(g, p, &format!("t{block}.fc2"), a, Conv2dConfig::same(1))?;
    Ok(g.sigmoid(a))
}

/// Translator block `b` applied to `[B, C, H, W]` features.
pub fn tau_block<T: Scalar>(g: &mut Graph<T>, p: &Bound, b: usize, z: Var) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    let c = shape[1];
    let name = format!("t{b}");
    let s = conv(g, p, &format!("{name}.dw"), z, Conv2dConfig::same(5).with_groups(c))?;
    let s = conv(g, p, &format!("{name}.dwd"), s, Conv2dConfig::dilated_same(7, 3).with_groups(c))?;
    let s = conv(g, p, &format!("{name}.pw"), s, Conv2dConfig::same(1))?;
    let gate = dynamic_gate(g, p, b, z)?;
    let gate = g.broadcast(gate, &shape)?;
    let attn = g.mul(s, gate)?;
    let attended = g.mul(attn, z)?;
    let z = g.add(z, attended)?;
    let m = conv(g, p, &format!("{name}.mlp1"), z, Conv2dConfig::same(1))?;
    let m = g.gelu(m);
    let m = conv(g, p, &format!("{name}.mlp2"), m, Conv2dConfig::same(1))?;
    g.add(z, m)
}

pub(super) fn forward<T: Scalar>(spec: &ModelSpec, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, w) = (s[0], s[3], s[4]);
    let hid = spec.hidden;
    let frames = g.reshape(x, &[b * spec.m, spec.in_channels, h, w])?;
    let e1 = conv(g, p, "enc1", frames, Conv2dConfig::same(3))?;
    let e1 = g.gelu(e1);
    let e2 = conv(g, p, "enc2", e1, Conv2dConfig::same(3).with_stride(2))?;
    let e2 = g.gelu(e2);

    let (h2, w2) = (h / 2, w / 2);
    let mut z = g.reshape(e2, &[b, spec.m * hid, h2, w2])?;
    for k in 0..spec.tau_blocks {
        z = tau_block(g, p, k, z)?;
    }
    if spec.m != spec.n {
        z = conv(g, p, "remap", z, Conv2dConfig::same(1))?;
    }

    let z = g.reshape(z, &[b * spec.n, hid, h2, w2])?;
    let up = g.upsample2(z)?;
    let d = conv(g, p, "dec1", up, Conv2dConfig::same(3))?;
    let mut d = g.gelu(d);
    if spec.m == spec.n {
        // full-resolution skip from the matching input frame
        d = g.add(d, e1)?;
    }
    let y = conv(g, p, "dec2", d, Conv2dConfig::same(1))?;
    let y = output_head(g, spec, y, frames)?;
    g.reshape(y, &[b, spec.n, spec.out_channels, h, w])
}
