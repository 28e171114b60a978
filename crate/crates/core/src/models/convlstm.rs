//! Encoder-decoder ConvLSTM with peephole connections.

use rand::Rng;

use super::params::{conv, Bound, Init, ParamSet};
use super::{output_head, ModelSpec};
use crate::autodiff::{Conv2dConfig, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Graph handles of one cell's parameters.
///
/// `wx: [4·hid, cin, k, k]`, `wh: [4·hid, hid, k, k]`, `b: [4·hid]` with gate
/// order (i, f, g, o); peepholes `wci, wcf, wco: [hid]` act per channel.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub wci: Var,
    pub wcf: Var,
    pub wco: Var,
}

impl CellVars {
    pub fn from_bound(p: &Bound, name: &str) -> Self {
        let v = |s: &str| p.var(&format!("{name}.{s}"));
        Self {
            wx: v("wx"),
            wh: v("wh"),
            b: v("b"),
            wci: v("wci"),
            wcf: v("wcf"),
            wco: v("wco"),
        }
    }
}

fn init_cell<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cin: usize, hid: usize, k: usize) {
    let bound = 1.0 / (((cin + hid) * k * k) as f64).sqrt();
    init.uniform(&format!("{name}.wx"), &[4 * hid, cin, k, k], bound);
    init.uniform(&format!("{name}.wh"), &[4 * hid, hid, k, k], bound);
    init.uniform(&format!("{name}.b"), &[4 * hid], bound);
    for peep in ["wci", "wcf", "wco"] {
        init.uniform(&format!("{name}.{peep}"), &[hid], 0.1);
    }
}

pub(super) fn init<T: Scalar, R: Rng>(spec: &ModelSpec, rng: &mut R) -> ParamSet<T> {
    let mut init = Init::new(rng);
    let (hid, k) = (spec.hidden, spec.kernel);
    for part in ["enc", "dec"] {
        for l in 0..spec.layers {
            let cin = match (part, l) {
                ("enc", 0) => spec.in_channels,
                _ => hid,
            };
            init_cell(&mut init, &format!("{part}{l}"), cin, hid, k);
        }
    }
    init.conv("head", spec.out_channels, 3 * hid, k, 1);
    init.finish()
}

fn peephole<T: Scalar>(g: &mut Graph<T>, w: Var, c: Var) -> Result<Var> {
    let shape = g.shape(c).to_vec();
    let hid = shape[1];
    let w4 = g.reshape(w, &[1, hid, 1, 1])?;
    let wb = g.broadcast(w4, &shape)?;
    g.mul(wb, c)
}

/// One ConvLSTM update:
///
/// ```text
/// i = σ(Wxi*x + Whi*h + wci∘c_prev + bi)
/// f = σ(Wxf*x + Whf*h + wcf∘c_prev + bf)
/// c = f∘c_prev + i∘tanh(Wxc*x + Whc*h + bc)
/// o = σ(Wxo*x + Who*h + wco∘c + bo)
/// h = o∘tanh(c)
/// ```
pub fn convlstm_cell_step<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &CellVars,
) -> Result<(Var, Var)> {
    let (xs, hs, cs) = (g.shape(x).to_vec(), g.shape(h_prev).to_vec(), g.shape(c_prev).to_vec());
    if xs.len() != 4 || hs != cs || hs.len() != 4 || xs[0] != hs[0] || xs[2..] != hs[2..] {
        return Err(Error::Shape(format!("convlstm cell: x {xs:?}, h {hs:?}, c {cs:?}")));
    }
    let hid = hs[1];
    let k = g.shape(p.wx)[2];
    let xh = g.concat(&[x, h_prev], 1)?;
    let w = g.concat(&[p.wx, p.wh], 1)?;
    let z = g.conv2d(xh, w, Some(p.b), Conv2dConfig::same(k))?;
    let zi = g.narrow(z, 1, 0, hid)?;
    let zf = g.narrow(z, 1, hid, hid)?;
    let zg = g.narrow(z, 1, 2 * hid, hid)?;
    let zo = g.narrow(z, 1, 3 * hid, hid)?;

    let pi = peephole(g, p.wci, c_prev)?;
    let ai = g.add(zi, pi)?;
    let i = g.sigmoid(ai);
    let pf = peephole(g, p.wcf, c_prev)?;
    let af = g.add(zf, pf)?;
    let f = g.sigmoid(af);
    let cand = g.tanh(zg);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let po = peephole(g, p.wco, c)?;
    let ao = g.add(zo, po)?;
    let o = g.sigmoid(ao);
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

fn frame<T: Scalar>(g: &mut Graph<T>, x: Var, t: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let f = g.narrow(x, 1, t, 1)?;
    g.reshape(f, &[s[0], s[2], s[3], s[4]])
}

pub(super) fn forward<T: Scalar>(spec: &ModelSpec, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, w) = (s[0], s[3], s[4]);
    let hid = spec.hidden;
    let zero = g.constant(Tensor::zeros(&[b, hid, h, w]));
    let enc: Vec<CellVars> = (0..spec.layers).map(|l| CellVars::from_bound(p, &format!("enc{l}"))).collect();
    let dec: Vec<CellVars> = (0..spec.layers).map(|l| CellVars::from_bound(p, &format!("dec{l}"))).collect();

    let mut state = vec![(zero, zero); spec.layers];
    for t in 0..spec.m {
        let mut input = frame(g, x, t)?;
        for (l, cell) in enc.iter().enumerate() {
            let (hn, cn) = convlstm_cell_step(g, input, state[l].0, state[l].1, cell)?;
            state[l] = (hn, cn);
            input = hn;
        }
    }

    // the decoder is driven by its own previous top hidden state
    let mut feed = state[spec.layers - 1].0;
    let mut hiddens = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let mut input = feed;
        for (l, cell) in dec.iter().enumerate() {
            let (hn, cn) = convlstm_cell_step(g, input, state[l].0, state[l].1, cell)?;
            state[l] = (hn, cn);
            input = hn;
        }
        feed = input;
        hiddens.push(input);
    }

    // temporal kernel 3 over decoder hiddens, zero padded at both ends
    let mut frames = Vec::with_capacity(spec.n);
    for t in 0..spec.n {
        let prev = if t > 0 { hiddens[t - 1] } else { zero };
        let next = if t + 1 < spec.n { hiddens[t + 1] } else { zero };
        let stacked = g.concat(&[prev, hiddens[t], next], 1)?;
        let y = conv(g, p, "head", stacked, Conv2dConfig::same(spec.kernel))?;
        let xt = if spec.input_skip { frame(g, x, t)? } else { y };
        let y = output_head(g, spec, y, xt)?;
        frames.push(g.reshape(y, &[b, 1, spec.out_channels, h, w])?);
    }
    g.concat(&frames, 1)
}
