//! Sequence-to-sequence networks mapping `m` input frames to `n` output frames.
//!
//! All families take `[B, m, C_in, H, W]` and return `[B, n, 4, H, W]` with a
//! sigmoid head, so outputs live in the normalized `[0, 1]` range.

mod checkpoint;
mod convlstm;
mod params;
mod tau;
mod ufno;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, KlDirection, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, EpochRecord, TrainingLog};
pub use convlstm::{convlstm_cell_step, CellVars};
pub use params::{Bound, ParamSet};
pub use tau::{dynamic_gate, tau_block};

/// Number of predicted physical channels.
pub const OUT_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Convlstm,
    Ufno,
    Tau,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Convlstm, Family::Ufno, Family::Tau];

    pub fn name(self) -> &'static str {
        match self {
            Family::Convlstm => "convlstm",
            Family::Ufno => "ufno",
            Family::Tau => "tau",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model family `{s}`")))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture and loss settings. Fields that a family does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub m: usize,
    pub n: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// ConvLSTM hidden channels, U-FNO width, TAU encoder channels.
    pub hidden: usize,
    /// ConvLSTM gate kernel size.
    pub kernel: usize,
    /// Stacked ConvLSTM layers in the encoder and in the decoder.
    pub layers: usize,
    /// Retained Fourier modes per axis.
    pub modes: usize,
    pub fourier_layers: usize,
    pub u_fourier_layers: usize,
    pub tau_blocks: usize,
    /// Weight of the inter-frame divergence term of the TAU loss.
    pub alpha: f64,
    pub kl_direction: KlDirection,
    /// Add the logit of the input frames to the head pre-activation, with the
    /// final projection starting at zero, so a fresh network is the identity.
    /// Set on correction levels.
    #[serde(default)]
    pub input_skip: bool,
}

impl ModelSpec {
    /// Desk-scale defaults.
    pub fn new(family: Family, m: usize, n: usize, in_channels: usize) -> Self {
        Self {
            family,
            m,
            n,
            in_channels,
            out_channels: OUT_CHANNELS,
            hidden: match family {
                Family::Convlstm => 16,
                Family::Ufno => 24,
                Family::Tau => 16,
            },
            kernel: 3,
            layers: 2,
            modes: 8,
            fourier_layers: 2,
            u_fourier_layers: 2,
            tau_blocks: 4,
            alpha: 0.1,
            kl_direction: KlDirection::TrueToPred,
            input_skip: false,
        }
    }

    /// Reduced sizes for quick experiments and tests.
    pub fn small(family: Family, m: usize, n: usize, in_channels: usize) -> Self {
        Self {
            hidden: match family {
                Family::Convlstm => 8,
                Family::Ufno => 12,
                Family::Tau => 8,
            },
            layers: 1,
            modes: 6,
            fourier_layers: 1,
            u_fourier_layers: 1,
            tau_blocks: 2,
            ..Self::new(family, m, n, in_channels)
        }
    }

    /// Same architecture with a different number of input channels.
    pub fn with_in_channels(&self, in_channels: usize) -> Self {
        Self {
            in_channels,
            ..self.clone()
        }
    }

    /// Spec of a correction level stacked on a network with this spec.
    pub fn correction(&self) -> Self {
        Self {
            in_channels: OUT_CHANNELS,
            input_skip: true,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.m == 0 || self.n == 0 {
            return bad(format!("m={} n={} must be positive", self.m, self.n));
        }
        if self.input_skip && (self.m != self.n || self.in_channels != OUT_CHANNELS) {
            return bad("input_skip needs m = n and predicted-state inputs".into());
        }
        if self.out_channels != OUT_CHANNELS {
            return bad(format!("out_channels must be {OUT_CHANNELS}, got {}", self.out_channels));
        }
        if self.in_channels == 0 || self.hidden == 0 {
            return bad("in_channels and hidden must be positive".into());
        }
        match self.family {
            Family::Convlstm if self.kernel % 2 == 0 || self.layers == 0 => {
                bad(format!("convlstm needs an odd kernel and ≥1 layer, got {} / {}", self.kernel, self.layers))
            }
            Family::Ufno if self.modes == 0 => bad("ufno needs at least one mode".into()),
            Family::Tau if !(self.alpha >= 0.0 && self.alpha.is_finite()) => {
                bad(format!("alpha must be ≥ 0, got {}", self.alpha))
            }
            _ => Ok(()),
        }
    }

    /// Grid-dependent checks performed before a forward pass.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        match self.family {
            Family::Ufno => {
                let bound = h.min(w) / 2 + 1;
                if self.modes > bound {
                    return Err(Error::InvalidArgument(format!(
                        "{} modes exceed the bound {bound} for a {h}x{w} grid",
                        self.modes
                    )));
                }
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Shape(format!("ufno needs H, W divisible by 4, got {h}x{w}")));
                }
            }
            Family::Tau if h % 2 != 0 || w % 2 != 0 => {
                return Err(Error::Shape(format!("tau needs even H, W, got {h}x{w}")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Anything that maps an input batch to a predicted batch.
pub trait SeqModel<T: Scalar>: Send + Sync {
    fn spec(&self) -> &ModelSpec;

    /// `[B, m, C_in, H, W] -> [B, n, 4, H, W]`.
    fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// A trainable network: spec plus named parameters.
pub struct Network<T: Scalar> {
    spec: ModelSpec,
    params: ParamSet<T>,
    forwards: AtomicUsize,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            params: self.params.clone(),
            forwards: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("parameters", &self.params.count())
            .finish()
    }
}

impl<T: Scalar> Network<T> {
    /// Freshly initialized network.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = match spec.family {
            Family::Convlstm => convlstm::init(&spec, &mut rng),
            Family::Ufno => ufno::init(&spec, &mut rng),
            Family::Tau => tau::init(&spec, &mut rng),
        };
        if spec.input_skip {
            let head = head_name(spec.family);
            for (name, t) in params.names().to_vec().iter().zip(params.tensors_mut()) {
                if name == &format!("{head}.w") || name == &format!("{head}.b") {
                    t.data_mut().iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
        Ok(Self::from_params(spec, params))
    }

    pub fn from_params(spec: ModelSpec, params: ParamSet<T>) -> Self {
        Self {
            spec,
            params,
            forwards: AtomicUsize::new(0),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Number of `predict` calls so far.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Record the forward pass on `g`. `bound` must come from [`ParamSet::bind`]
    /// on this network's parameters.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let s = &self.spec;
        if shape.len() != 5 || shape[1] != s.m || shape[2] != s.in_channels {
            return Err(Error::Shape(format!(
                "{} expects [B, {}, {}, H, W], got {shape:?}",
                s.family, s.m, s.in_channels
            )));
        }
        s.check_grid(shape[3], shape[4])?;
        match s.family {
            Family::Convlstm => convlstm::forward(s, g, bound, x),
            Family::Ufno => ufno::forward(s, g, bound, x),
            Family::Tau => tau::forward(s, g, bound, x),
        }
    }

    /// Family training objective: mean squared error, or the TAU sum with the
    /// inter-frame divergence term.
    pub fn loss(&self, g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
        match self.spec.family {
            Family::Tau => tau_loss(g, pred, target, self.spec.alpha, self.spec.kl_direction),
            _ => mse_loss(g, pred, target),
        }
    }
}

impl<T: Scalar> SeqModel<T> for Network<T> {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::inference();
        let bound = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv)?;
        Ok(g.into_value(out))
    }
}

/// Final projection feeding the sigmoid.
fn head_name(family: Family) -> &'static str {
    match family {
        Family::Convlstm => "head",
        Family::Ufno => "proj2",
        Family::Tau => "dec2",
    }
}

const SKIP_MARGIN: f64 = 1e-6;

/// Sigmoid head; with `input_skip`, `frames` (input frames laid out like
/// `pre`) enter as logits.
pub(crate) fn output_head<T: Scalar>(g: &mut Graph<T>, spec: &ModelSpec, pre: Var, frames: Var) -> Result<Var> {
    let pre = if spec.input_skip {
        let l = g.logit(frames, SKIP_MARGIN);
        g.add(pre, l)?
    } else {
        pre
    };
    Ok(g.sigmoid(pre))
}

/// Mean of squared differences over all elements.
pub fn mse_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Shape(format!("mse: {:?} vs {:?}", g.shape(pred), g.shape(target))));
    }
    g.mse(pred, target)
}

/// `Σ (Ŷ - Y)² + α Σ_k KL(...)` over the `n - 1` inter-frame differences of
/// `[B, n, C, H, W]` sequences. Each difference map is flattened and passed
/// through a softmax.
pub fn tau_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    alpha: f64,
    direction: KlDirection,
) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != g.shape(target) || shape.len() != 5 {
        return Err(Error::Shape(format!("tau_loss: {shape:?} vs {:?}", g.shape(target))));
    }
    let n = shape[1];
    if n < 2 {
        return Err(Error::InvalidArgument("tau_loss needs at least two output frames".into()));
    }
    let sq = g.sum_sq(pred, target)?;
    if alpha == 0.0 {
        return Ok(sq);
    }
    let rows = shape[0] * (n - 1);
    let d: usize = shape[2..].iter().product();
    let diffs = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let next = g.narrow(v, 1, 1, n - 1)?;
        let prev = g.narrow(v, 1, 0, n - 1)?;
        let diff = g.sub(next, prev)?;
        g.reshape(diff, &[rows, d])
    };
    let dp = diffs(g, pred)?;
    let dt = diffs(g, target)?;
    let kl = match direction {
        KlDirection::TrueToPred => g.kl_softmax(dt, dp)?,
        KlDirection::PredToTrue => g.kl_softmax(dp, dt)?,
    };
    let reg = g.scale(kl, T::from_f64_lossy(alpha));
    g.add(sq, reg)
}
