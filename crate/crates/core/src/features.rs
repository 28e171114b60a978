//! Engineered input channels, normalization statistics and training windows.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Channel, Simulation, State, StateMap, Window};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp for the concentration log transform.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-10;
/// Concentration threshold of the dissolution mask.
pub const FILTER_MIN_C: f64 = 1e-4;
pub const FILTER_EPS_RANGE: (f64, f64) = (0.01, 0.99);

pub fn velocity_magnitude<T: Scalar>(ux: &StateMap<T>, uy: &StateMap<T>) -> Result<StateMap<T>> {
    ux.ensure_same_dims(uy)?;
    let values = ux
        .values()
        .iter()
        .zip(uy.values())
        .map(|(&a, &b)| a.hypot(b))
        .collect();
    StateMap::new(Channel::U, ux.height(), ux.width(), values)
}

/// `log10(max(c, floor))` rescaled so that `floor ↦ 0` and `1 ↦ 1`.
pub fn scaled_concentration<T: Scalar>(c: &StateMap<T>, floor: f64) -> Result<StateMap<T>> {
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::InvalidArgument(format!("log floor {floor} must be in (0, 1)")));
    }
    let lo = floor.log10();
    let values = c
        .values()
        .iter()
        .map(|&v| {
            let v = v.to_f64_lossy().max(floor);
            T::from_f64_lossy((v.log10() - lo) / (0.0 - lo))
        })
        .collect();
    StateMap::new(Channel::CScaled, c.height(), c.width(), values)
}

pub fn filter_active(c: f64, eps: f64) -> bool {
    c >= FILTER_MIN_C && eps >= FILTER_EPS_RANGE.0 && eps <= FILTER_EPS_RANGE.1
}

/// Binary mask of cells where grains are dissolving.
pub fn combined_filter<T: Scalar>(c: &StateMap<T>, eps: &StateMap<T>) -> Result<StateMap<T>> {
    c.ensure_same_dims(eps)?;
    let values = c
        .values()
        .iter()
        .zip(eps.values())
        .map(|(&cv, &ev)| {
            if filter_active(cv.to_f64_lossy(), ev.to_f64_lossy()) {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    StateMap::new(Channel::Filter, c.height(), c.width(), values)
}

/// Physical channels followed by `U`, `Cscaled` and `Filter`.
pub fn engineer_state<T: Scalar>(state: &State<T>) -> Result<State<T>> {
    let find = |ch: Channel| {
        state
            .iter()
            .find(|m| m.channel == ch)
            .ok_or_else(|| Error::Data(format!("state has no {ch} map")))
    };
    let (c, eps, ux, uy) = (find(Channel::C)?, find(Channel::Eps)?, find(Channel::Ux)?, find(Channel::Uy)?);
    Ok(vec![
        c.clone(),
        eps.clone(),
        ux.clone(),
        uy.clone(),
        velocity_magnitude(ux, uy)?,
        scaled_concentration(c, DEFAULT_LOG_FLOOR)?,
        combined_filter(c, eps)?,
    ])
}

pub fn engineer_simulation<T: Scalar>(sim: &Simulation<T>) -> Result<Simulation<T>> {
    let states = sim.states().iter().map(engineer_state).collect::<Result<Vec<_>>>()?;
    let mut out = Simulation::new(sim.id.clone(), states);
    out.dt_index = sim.dt_index;
    Ok(out)
}

/// Which input channels the base network sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSet {
    /// `C, eps, Ux, Uy`
    #[serde(rename = "4")]
    Physical,
    /// Physical channels plus `U, Cscaled, Filter`.
    #[default]
    #[serde(rename = "7")]
    Engineered,
}

impl FeatureSet {
    pub fn channels(self) -> &'static [Channel] {
        match self {
            FeatureSet::Physical => &Channel::PHYSICAL,
            FeatureSet::Engineered => &Channel::ALL,
        }
    }

    pub fn count(self) -> usize {
        self.channels().len()
    }

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            4 => Ok(FeatureSet::Physical),
            7 => Ok(FeatureSet::Engineered),
            _ => Err(Error::InvalidArgument(format!("feature count must be 4 or 7, got {n}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub channel: Channel,
    pub mean: f64,
    pub std: f64,
    /// `false` for channels passed through unscaled.
    pub standardized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRange {
    pub channel: Channel,
    pub min: f64,
    pub max: f64,
}

/// Per-channel normalization fitted on the training split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub inputs: Vec<InputStats>,
    pub outputs: Vec<OutputRange>,
}

fn exempt(ch: Channel) -> bool {
    matches!(ch, Channel::CScaled | Channel::Filter)
}

impl NormStats {
    pub fn is_fitted(&self) -> bool {
        self.inputs.len() == Channel::ALL.len() && self.outputs.len() == Channel::PHYSICAL.len()
    }

    fn require_fitted(&self) -> Result<()> {
        if self.is_fitted() {
            Ok(())
        } else {
            Err(Error::InvalidArgument("normalization statistics are not fitted".into()))
        }
    }

    pub fn input(&self, ch: Channel) -> Result<&InputStats> {
        self.inputs
            .iter()
            .find(|s| s.channel == ch)
            .ok_or_else(|| Error::InvalidArgument(format!("no input statistics for {ch}")))
    }

    pub fn output(&self, ch: Channel) -> Result<&OutputRange> {
        self.outputs
            .iter()
            .find(|s| s.channel == ch)
            .ok_or_else(|| Error::InvalidArgument(format!("no output range for {ch}")))
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_vec(self).expect("stats serialize");
        hex_digest(&text)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Means and standard deviations over every pixel, step and training
/// simulation; output ranges over the physical channels.
pub fn fit_norm_stats<T: Scalar>(train: &[&Simulation<T>]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot fit statistics on an empty training set".into()));
    }
    let engineered = train
        .iter()
        .map(|s| engineer_simulation(s))
        .collect::<Result<Vec<_>>>()?;
    let mut inputs = Vec::with_capacity(Channel::ALL.len());
    let mut outputs = Vec::with_capacity(Channel::PHYSICAL.len());
    for ch in Channel::ALL {
        let maps: Vec<&StateMap<T>> = engineered
            .iter()
            .flat_map(|s| (0..s.n_steps()).filter_map(move |t| s.map(t, ch)))
            .collect();
        let count: usize = maps.iter().map(|m| m.values().len()).sum();
        let mean = maps
            .iter()
            .flat_map(|m| m.values())
            .map(|v| v.to_f64_lossy())
            .sum::<f64>()
            / count as f64;
        let var = maps
            .iter()
            .flat_map(|m| m.values())
            .map(|v| (v.to_f64_lossy() - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        let std = var.sqrt();
        if !exempt(ch) && !(std > 0.0) {
            return Err(Error::Data(format!("channel {ch} is constant over the training set")));
        }
        inputs.push(InputStats {
            channel: ch,
            mean,
            std,
            standardized: !exempt(ch),
        });
        if Channel::PHYSICAL.contains(&ch) {
            let (min, max) = maps
                .iter()
                .flat_map(|m| m.values())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    let v = v.to_f64_lossy();
                    (lo.min(v), hi.max(v))
                });
            if !(max > min) {
                return Err(Error::Data(format!("channel {ch} has an empty output range")));
            }
            outputs.push(OutputRange { channel: ch, min, max });
        }
    }
    Ok(NormStats { inputs, outputs })
}

/// Standardized `[steps, channels, H, W]` tensor for the requested channels.
pub fn normalize_inputs<T: Scalar>(states: &[State<T>], channels: &[Channel], stats: &NormStats) -> Result<Tensor<T>> {
    stats.require_fitted()?;
    let (h, w) = first_dims(states)?;
    let mut data = Vec::with_capacity(states.len() * channels.len() * h * w);
    for state in states {
        for &ch in channels {
            let map = find_map(state, ch)?;
            let s = stats.input(ch)?;
            if s.standardized {
                let (mean, inv) = (T::from_f64_lossy(s.mean), T::from_f64_lossy(1.0 / s.std));
                data.extend(map.values().iter().map(|&v| (v - mean) * inv));
            } else {
                data.extend_from_slice(map.values());
            }
        }
    }
    Tensor::from_vec(&[states.len(), channels.len(), h, w], data)
}

/// Min-max scaled `[steps, 4, H, W]` tensor of the physical channels.
pub fn normalize_outputs<T: Scalar>(states: &[State<T>], stats: &NormStats) -> Result<Tensor<T>> {
    stats.require_fitted()?;
    let (h, w) = first_dims(states)?;
    let mut data = Vec::with_capacity(states.len() * 4 * h * w);
    for state in states {
        for ch in Channel::PHYSICAL {
            let map = find_map(state, ch)?;
            let r = stats.output(ch)?;
            let (lo, span) = (T::from_f64_lossy(r.min), T::from_f64_lossy(r.max - r.min));
            data.extend(map.values().iter().map(|&v| (v - lo) / span));
        }
    }
    Tensor::from_vec(&[states.len(), 4, h, w], data)
}

/// Inverse of [`normalize_outputs`] for a `[steps, 4, H, W]` tensor.
pub fn denormalize_outputs<T: Scalar>(pred: &Tensor<T>, stats: &NormStats) -> Result<Vec<State<T>>> {
    stats.require_fitted()?;
    if pred.ndim() != 4 || pred.dim(1) != 4 {
        return Err(Error::Shape(format!("expected [steps, 4, H, W], got {:?}", pred.shape())));
    }
    let (steps, h, w) = (pred.dim(0), pred.dim(2), pred.dim(3));
    let plane = h * w;
    (0..steps)
        .map(|t| {
            Channel::PHYSICAL
                .iter()
                .enumerate()
                .map(|(k, &ch)| {
                    let r = stats.output(ch)?;
                    let (lo, span) = (T::from_f64_lossy(r.min), T::from_f64_lossy(r.max - r.min));
                    let base = (t * 4 + k) * plane;
                    let values = pred.data()[base..base + plane].iter().map(|&v| v * span + lo).collect();
                    StateMap::new(ch, h, w, values)
                })
                .collect()
        })
        .collect()
}

fn first_dims<T: Scalar>(states: &[State<T>]) -> Result<(usize, usize)> {
    states
        .first()
        .and_then(|s| s.first())
        .map(StateMap::dims)
        .ok_or_else(|| Error::Shape("no states to normalize".into()))
}

fn find_map<T: Scalar>(state: &State<T>, ch: Channel) -> Result<&StateMap<T>> {
    state
        .iter()
        .find(|m| m.channel == ch)
        .ok_or_else(|| Error::Data(format!("state has no {ch} map")))
}

/// Windows anchored at `t = m-1, m-1+stride, ...` while the target fits.
pub fn make_windows<T: Scalar>(sim: &Simulation<T>, m: usize, n: usize, stride: usize) -> Result<Vec<Window>> {
    if m == 0 || n == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!("m={m}, n={n}, stride={stride} must be positive")));
    }
    let steps = sim.n_steps();
    if steps < m + n {
        return Err(Error::InvalidArgument(format!(
            "{}: {steps} steps cannot hold {m} inputs and {n} targets",
            sim.id
        )));
    }
    Ok((m - 1..=steps - n - 1)
        .step_by(stride)
        .map(|t| Window::new(sim.id.clone(), t, m, n))
        .collect())
}
