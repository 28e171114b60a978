//! Simulation data model: state maps, trajectories, ensembles and windows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Physical and engineered channels, in canonical tensor order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    C,
    #[serde(rename = "eps")]
    Eps,
    Ux,
    Uy,
    U,
    #[serde(rename = "Cscaled")]
    CScaled,
    Filter,
}

impl Channel {
    /// The four simulated fields; also the prediction targets.
    pub const PHYSICAL: [Channel; 4] = [Channel::C, Channel::Eps, Channel::Ux, Channel::Uy];
    /// Physical fields followed by the engineered features.
    pub const ALL: [Channel; 7] = [
        Channel::C,
        Channel::Eps,
        Channel::Ux,
        Channel::Uy,
        Channel::U,
        Channel::CScaled,
        Channel::Filter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::C => "C",
            Channel::Eps => "eps",
            Channel::Ux => "Ux",
            Channel::Uy => "Uy",
            Channel::U => "U",
            Channel::CScaled => "Cscaled",
            Channel::Filter => "Filter",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One field on an `height × width` grid at one time step (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct StateMap<T> {
    pub channel: Channel,
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> StateMap<T> {
    pub fn new(channel: Channel, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "{channel} map {height}x{width} with {} values",
                values.len()
            )));
        }
        Ok(Self {
            channel,
            height,
            width,
            values,
        })
    }

    pub fn filled(channel: Channel, height: usize, width: usize, value: T) -> Self {
        Self {
            channel,
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_fn(channel: Channel, height: usize, width: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let values = (0..height * width).map(|k| f(k / width, k % width)).collect();
        Self {
            channel,
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: T) {
        self.values[row * self.width + col] = v;
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::from_usize_lossy(self.values.len())
    }

    pub fn with_channel(mut self, channel: Channel) -> Self {
        self.channel = channel;
        self
    }

    pub fn cast<U: Scalar>(&self) -> StateMap<U> {
        StateMap {
            channel: self.channel,
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub(crate) fn ensure_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{} is {:?} but {} is {:?}",
                self.channel,
                self.dims(),
                other.channel,
                other.dims()
            )));
        }
        Ok(())
    }
}

/// All channels at one time step.
pub type State<T> = Vec<StateMap<T>>;

/// One dissolution trajectory: `N` consecutive multi-channel states.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation<T> {
    pub id: String,
    pub dt_index: usize,
    states: Vec<State<T>>,
}

impl<T: Scalar> Simulation<T> {
    /// Unchecked construction; run [`validate_simulation`] to audit.
    pub fn new(id: impl Into<String>, states: Vec<State<T>>) -> Self {
        Self {
            id: id.into(),
            dt_index: 1,
            states,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[State<T>] {
        &self.states
    }

    pub fn state(&self, step: usize) -> &State<T> {
        &self.states[step]
    }

    pub fn states_mut(&mut self) -> &mut Vec<State<T>> {
        &mut self.states
    }

    pub fn channels(&self) -> Vec<Channel> {
        self.states
            .first()
            .map(|s| s.iter().map(|m| m.channel).collect())
            .unwrap_or_default()
    }

    /// Grid size of the first map of the first step.
    pub fn dims(&self) -> (usize, usize) {
        self.states
            .first()
            .and_then(|s| s.first())
            .map(StateMap::dims)
            .unwrap_or((0, 0))
    }

    pub fn map(&self, step: usize, channel: Channel) -> Option<&StateMap<T>> {
        self.states.get(step)?.iter().find(|m| m.channel == channel)
    }

    pub fn require_map(&self, step: usize, channel: Channel) -> Result<&StateMap<T>> {
        self.map(step, channel)
            .ok_or_else(|| Error::Data(format!("{}: step {step} has no {channel} map", self.id)))
    }

    /// Copy keeping only the four physical channels.
    pub fn physical(&self) -> Result<Self> {
        let states = (0..self.n_steps())
            .map(|t| {
                Channel::PHYSICAL
                    .iter()
                    .map(|&c| self.require_map(t, c).cloned())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: self.id.clone(),
            dt_index: self.dt_index,
            states,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Simulation<U> {
        Simulation {
            id: self.id.clone(),
            dt_index: self.dt_index,
            states: self
                .states
                .iter()
                .map(|s| s.iter().map(StateMap::cast).collect())
                .collect(),
        }
    }
}

/// A single invariant violation found by [`validate_simulation`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Empty,
    ChannelSet { step: usize, expected: Vec<Channel>, found: Vec<Channel> },
    Shape { step: usize, channel: Channel, expected: (usize, usize), found: (usize, usize) },
    NonFinite { step: usize, channel: Channel, row: usize, col: usize },
    EpsOutOfRange { step: usize, row: usize, col: usize, value: f64 },
    FilterNotBinary { step: usize, row: usize, col: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "simulation has no steps"),
            Violation::ChannelSet { step, expected, found } => {
                write!(f, "step {step}: channels {found:?}, expected {expected:?}")
            }
            Violation::Shape { step, channel, expected, found } => write!(
                f,
                "step {step}: {channel} map is {}x{}, expected {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            Violation::NonFinite { step, channel, row, col } => {
                write!(f, "step {step}: non-finite {channel} at ({row}, {col})")
            }
            Violation::EpsOutOfRange { step, row, col, value } => {
                write!(f, "step {step}: eps = {value} outside [0, 1] at ({row}, {col})")
            }
            Violation::FilterNotBinary { step, row, col, value } => {
                write!(f, "step {step}: Filter = {value} not in {{0, 1}} at ({row}, {col})")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_simulation<T: Scalar>(sim: &Simulation<T>) -> ValidationReport {
    let mut violations = Vec::new();
    let Some(first) = sim.states.first() else {
        return ValidationReport {
            violations: vec![Violation::Empty],
        };
    };
    let expected_channels: Vec<Channel> = first.iter().map(|m| m.channel).collect();
    let expected_dims = sim.dims();
    for (step, state) in sim.states.iter().enumerate() {
        let found: Vec<Channel> = state.iter().map(|m| m.channel).collect();
        if found != expected_channels {
            violations.push(Violation::ChannelSet {
                step,
                expected: expected_channels.clone(),
                found,
            });
        }
        for map in state {
            if map.dims() != expected_dims {
                violations.push(Violation::Shape {
                    step,
                    channel: map.channel,
                    expected: expected_dims,
                    found: map.dims(),
                });
            }
            for (k, &v) in map.values.iter().enumerate() {
                let (row, col) = (k / map.width, k % map.width);
                if !v.is_finite() {
                    violations.push(Violation::NonFinite {
                        step,
                        channel: map.channel,
                        row,
                        col,
                    });
                    continue;
                }
                match map.channel {
                    Channel::Eps if v < T::zero() || v > T::one() => {
                        violations.push(Violation::EpsOutOfRange {
                            step,
                            row,
                            col,
                            value: v.to_f64_lossy(),
                        })
                    }
                    Channel::Filter if v != T::zero() && v != T::one() => {
                        violations.push(Violation::FilterNotBinary {
                            step,
                            row,
                            col,
                            value: v.to_f64_lossy(),
                        })
                    }
                    _ => {}
                }
            }
        }
    }
    ValidationReport { violations }
}

/// Remove an even margin so every map becomes `target_h × target_w`,
/// taking the same number of rows from top and bottom (columns likewise).
pub fn crop_borders<T: Scalar>(sim: &Simulation<T>, target_h: usize, target_w: usize) -> Result<Simulation<T>> {
    let (h, w) = sim.dims();
    if target_h == 0 || target_w == 0 || target_h > h || target_w > w {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {h}x{w} to {target_h}x{target_w}: margin would be negative"
        )));
    }
    if (h - target_h) % 2 != 0 || (w - target_w) % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {h}x{w} to {target_h}x{target_w}: margins {} and {} must be even",
            h - target_h,
            w - target_w
        )));
    }
    let (top, left) = ((h - target_h) / 2, (w - target_w) / 2);
    let mut states = Vec::with_capacity(sim.n_steps());
    for (step, state) in sim.states.iter().enumerate() {
        let mut cropped = Vec::with_capacity(state.len());
        for map in state {
            if map.dims() != (h, w) {
                return Err(Error::Shape(format!(
                    "step {step}: {} is {:?}, expected {:?}",
                    map.channel,
                    map.dims(),
                    (h, w)
                )));
            }
            let mut values = Vec::with_capacity(target_h * target_w);
            for r in top..top + target_h {
                values.extend_from_slice(&map.values[r * w + left..r * w + left + target_w]);
            }
            cropped.push(StateMap::new(map.channel, target_h, target_w, values)?);
        }
        states.push(cropped);
    }
    Ok(Simulation {
        id: sim.id.clone(),
        dt_index: sim.dt_index,
        states,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Set of trajectories and their train/validation assignment.
#[derive(Clone, Debug)]
pub struct Ensemble<T> {
    pub simulations: Vec<Simulation<T>>,
    pub split: BTreeMap<String, Split>,
}

impl<T: Scalar> Ensemble<T> {
    /// Every simulation starts in the training split.
    pub fn new(simulations: Vec<Simulation<T>>) -> Result<Self> {
        let mut split = BTreeMap::new();
        for s in &simulations {
            if split.insert(s.id.clone(), Split::Train).is_some() {
                return Err(Error::Data(format!("duplicate simulation id {}", s.id)));
            }
        }
        Ok(Self { simulations, split })
    }

    pub fn with_split(simulations: Vec<Simulation<T>>, split: BTreeMap<String, Split>) -> Result<Self> {
        let ids: BTreeSet<&str> = simulations.iter().map(|s| s.id.as_str()).collect();
        if ids.len() != simulations.len() {
            return Err(Error::Data("duplicate simulation ids".into()));
        }
        if split.len() != ids.len() || !split.keys().all(|k| ids.contains(k.as_str())) {
            return Err(Error::Data("split must assign every simulation exactly once".into()));
        }
        Ok(Self { simulations, split })
    }

    pub fn ids(&self) -> Vec<&str> {
        self.simulations.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn part(&self, which: Split) -> Vec<&Simulation<T>> {
        self.simulations
            .iter()
            .filter(|s| self.split.get(&s.id) == Some(&which))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&Simulation<T>> {
        self.simulations.iter().find(|s| s.id == id)
    }
}

/// Assign `train_count` simulations, chosen uniformly at random with `seed`,
/// to training and the rest to validation.
pub fn split_ensemble<T: Scalar>(ens: Ensemble<T>, train_count: usize, seed: u64) -> Result<Ensemble<T>> {
    let split = split_ids(&ens.ids(), train_count, seed)?;
    Ensemble::with_split(ens.simulations, split)
}

/// Split over bare ids; result depends only on the id set, count and seed.
pub fn split_ids(ids: &[&str], train_count: usize, seed: u64) -> Result<BTreeMap<String, Split>> {
    if train_count == 0 || train_count >= ids.len() {
        return Err(Error::InvalidArgument(format!(
            "train_count {train_count} must be in 1..{}",
            ids.len()
        )));
    }
    let mut sorted: Vec<&str> = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Data("duplicate simulation ids".into()));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < train_count { Split::Train } else { Split::Validation };
            (id.to_string(), s)
        })
        .collect())
}

/// Input/target step ranges of one training pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub sim_id: String,
    /// Index of the last input step.
    pub t: usize,
    pub input: Range<usize>,
    pub target: Range<usize>,
}

impl Window {
    pub fn new(sim_id: impl Into<String>, t: usize, m: usize, n: usize) -> Self {
        Self {
            sim_id: sim_id.into(),
            t,
            input: t + 1 - m..t + 1,
            target: t + 1..t + 1 + n,
        }
    }

    pub fn anchor(&self) -> (&str, usize) {
        (&self.sim_id, self.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(id: &str, n: usize, h: usize, w: usize) -> Simulation<f64> {
        let states = (0..n)
            .map(|t| {
                Channel::PHYSICAL
                    .iter()
                    .map(|&c| {
                        StateMap::from_fn(c, h, w, |r, k| {
                            let v = (t * 1000 + r * w + k) as f64 / (n * 1000 + h * w) as f64;
                            if c == Channel::Eps { v.min(1.0) } else { v }
                        })
                    })
                    .collect()
            })
            .collect();
        Simulation::new(id, states)
    }

    #[test]
    fn consistent_simulation_is_valid() {
        assert!(validate_simulation(&sim("a", 6, 8, 8)).is_valid());
    }

    #[test]
    fn eps_out_of_range_is_located() {
        let mut s = sim("a", 3, 4, 4);
        s.states_mut()[1][1].set(2, 3, 1.5);
        let rep = validate_simulation(&s);
        assert_eq!(
            rep.violations,
            vec![Violation::EpsOutOfRange { step: 1, row: 2, col: 3, value: 1.5 }]
        );
    }

    #[test]
    fn column_mismatch_names_the_step() {
        let mut s = sim("a", 9, 8, 8);
        s.states_mut()[7][2] = StateMap::filled(Channel::Ux, 8, 7, 0.0);
        let rep = validate_simulation(&s);
        assert_eq!(rep.violations.len(), 1);
        assert!(matches!(rep.violations[0], Violation::Shape { step: 7, found: (8, 7), .. }));
    }

    #[test]
    fn nan_and_filter_are_reported() {
        let mut s = sim("a", 2, 3, 3);
        s.states_mut()[0][0].set(0, 0, f64::NAN);
        s.states_mut()[1].push(StateMap::filled(Channel::Filter, 3, 3, 0.5));
        let rep = validate_simulation(&s);
        assert!(rep.violations.iter().any(|v| matches!(v, Violation::NonFinite { step: 0, .. })));
        assert!(rep.violations.iter().any(|v| matches!(v, Violation::ChannelSet { step: 1, .. })));
        assert_eq!(
            rep.violations.iter().filter(|v| matches!(v, Violation::FilterNotBinary { .. })).count(),
            9
        );
    }

    #[test]
    fn crop_removes_two_wide_border() {
        let s = sim("a", 2, 260, 260);
        let c = crop_borders(&s, 256, 256).unwrap();
        assert_eq!(c.dims(), (256, 256));
        let before = s.map(1, Channel::C).unwrap();
        let after = c.map(1, Channel::C).unwrap();
        assert_eq!(after.get(0, 0), before.get(2, 2));
        assert_eq!(after.get(255, 255), before.get(257, 257));
    }

    #[test]
    fn crop_to_same_size_is_identity() {
        let s = sim("a", 3, 16, 16);
        assert_eq!(crop_borders(&s, 16, 16).unwrap(), s);
    }

    #[test]
    fn crop_drops_every_border_sentinel() {
        let mut s = sim("a", 1, 10, 10);
        for map in &mut s.states_mut()[0] {
            for r in 0..10 {
                for k in 0..10 {
                    if r < 2 || r >= 8 || k < 2 || k >= 8 {
                        map.set(r, k, -777.0);
                    }
                }
            }
        }
        let c = crop_borders(&s, 6, 6).unwrap();
        for map in c.state(0) {
            assert!(map.values().iter().all(|&v| v != -777.0));
        }
        assert_eq!(c.map(0, Channel::C).unwrap().get(0, 0), s.map(0, Channel::C).unwrap().get(2, 2));
    }

    #[test]
    fn crop_rejects_odd_or_negative_margin() {
        let s = sim("a", 1, 10, 10);
        assert!(crop_borders(&s, 7, 6).is_err());
        assert!(crop_borders(&s, 12, 10).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let sims: Vec<_> = (0..32).map(|i| sim(&format!("s{i:02}"), 1, 2, 2)).collect();
        let ens = Ensemble::new(sims).unwrap();
        let a = split_ensemble(ens.clone(), 24, 7).unwrap();
        assert_eq!(a.part(Split::Train).len(), 24);
        assert_eq!(a.part(Split::Validation).len(), 8);
        let b = split_ensemble(ens.clone(), 24, 7).unwrap();
        assert_eq!(a.split, b.split);
        let others: Vec<_> = (0..10).map(|s| split_ensemble(ens.clone(), 24, 100 + s).unwrap().split).collect();
        assert!(others.iter().any(|o| *o != a.split));

        let two = Ensemble::new(vec![sim("x", 1, 2, 2), sim("y", 1, 2, 2)]).unwrap();
        let two = split_ensemble(two, 1, 0).unwrap();
        assert_eq!(two.part(Split::Train).len(), 1);
        assert_eq!(two.part(Split::Validation).len(), 1);
    }

    #[test]
    fn split_rejects_out_of_range_counts() {
        let ens = Ensemble::new(vec![sim("x", 1, 2, 2), sim("y", 1, 2, 2)]).unwrap();
        assert!(split_ensemble(ens.clone(), 0, 0).is_err());
        assert!(split_ensemble(ens, 2, 0).is_err());
    }

    #[test]
    fn split_is_independent_of_input_order() {
        let a = split_ids(&["a", "b", "c", "d"], 2, 3).unwrap();
        let b = split_ids(&["d", "c", "b", "a"], 2, 3).unwrap();
        assert_eq!(a, b);
    }
}
