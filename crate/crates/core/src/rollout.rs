//! Iterative full-trajectory prediction.
//!
//! The first `m` true states seed the loop; each iteration predicts `n`
//! states from the latest `m` and appends them, so later iterations consume
//! predictions only.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Channel, Simulation, State};
use crate::error::{Error, Result};
use crate::features::{denormalize_outputs, engineer_state, normalize_inputs, FeatureSet, NormStats};
use crate::io::{read_json, read_simulation, write_json, write_simulation};
use crate::scalar::Scalar;
use crate::stacking::Stack;

/// `⌊total / n⌋ - 1`, the number of `n`-step predictions in a trajectory
/// of `total` steps seeded by its first `n` states.
pub fn num_iterations(total: usize, n: usize) -> Result<usize> {
    if n == 0 || total < 2 * n {
        return Err(Error::InvalidArgument(format!(
            "a {total}-step trajectory cannot hold two windows of {n}"
        )));
    }
    Ok(total / n - 1)
}

/// Physical-unit predictor driven by the rollout loop.
pub trait Predictor: Sync {
    fn m(&self) -> usize;
    fn n(&self) -> usize;
    /// Model forward passes per call, for timing reports.
    fn forwards_per_call(&self) -> usize {
        1
    }
    /// Predict steps `start .. start + n` from the `m` physical states before them.
    fn predict(&self, start: usize, history: &[State<f64>]) -> Result<Vec<State<f64>>>;
}

/// A trained stack with its normalization statistics.
pub struct StackPredictor<'a, T: Scalar> {
    stack: &'a Stack<T>,
    stats: &'a NormStats,
    features: FeatureSet,
}

impl<'a, T: Scalar> StackPredictor<'a, T> {
    /// `stats` must hash to the value recorded when the stack was trained.
    pub fn new(stack: &'a Stack<T>, stats: &'a NormStats, features: FeatureSet, trained_hash: &str) -> Result<Self> {
        if stats.hash() != trained_hash {
            return Err(Error::Mismatch("normalization statistics differ from the ones used for training".into()));
        }
        if stack.spec().in_channels != features.count() {
            return Err(Error::Mismatch(format!(
                "base level reads {} channels, feature set has {}",
                stack.spec().in_channels,
                features.count()
            )));
        }
        Ok(Self { stack, stats, features })
    }
}

impl<T: Scalar> Predictor for StackPredictor<'_, T> {
    fn m(&self) -> usize {
        self.stack.spec().m
    }

    fn n(&self) -> usize {
        self.stack.spec().n
    }

    fn forwards_per_call(&self) -> usize {
        self.stack.len()
    }

    fn predict(&self, _start: usize, history: &[State<f64>]) -> Result<Vec<State<f64>>> {
        let engineered = history.iter().map(engineer_state).collect::<Result<Vec<_>>>()?;
        let x = normalize_inputs(&engineered, self.features.channels(), self.stats)?;
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let x = x.reshape(&shape)?.cast::<T>();
        let y = self.stack.refine(&x)?;
        let y = y.index_axis0(0).cast::<f64>();
        denormalize_outputs(&y, self.stats)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Truth,
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub sim_id: String,
    pub m: usize,
    pub n: usize,
    /// Physical states, truth first, then predictions.
    pub states: Vec<State<f64>>,
    pub provenance: Vec<Provenance>,
    /// First step of each predicted block.
    pub anchors: Vec<usize>,
    /// Wall-clock seconds of each iteration.
    pub iteration_seconds: Vec<f64>,
    pub forwards_per_iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    sim_id: String,
    m: usize,
    n: usize,
    provenance: Vec<Provenance>,
    anchors: Vec<usize>,
    iteration_seconds: Vec<f64>,
    forwards_per_iteration: usize,
}

pub const PROVENANCE_FILE: &str = "provenance.json";

impl RolloutResult {
    pub fn n_steps(&self) -> usize {
        self.states.len()
    }

    /// Steps that hold predictions.
    pub fn predicted_steps(&self) -> std::ops::Range<usize> {
        self.m..self.states.len()
    }

    pub fn map(&self, step: usize, channel: Channel) -> Option<&crate::data::StateMap<f64>> {
        self.states.get(step)?.iter().find(|m| m.channel == channel)
    }

    pub fn total_seconds(&self) -> f64 {
        self.iteration_seconds.iter().sum()
    }

    pub fn to_simulation(&self) -> Simulation<f64> {
        Simulation::new(self.sim_id.clone(), self.states.clone())
    }

    /// Native simulation directory plus a provenance sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_simulation(&self.to_simulation(), dir)?;
        write_json(
            &dir.join(PROVENANCE_FILE),
            &Sidecar {
                sim_id: self.sim_id.clone(),
                m: self.m,
                n: self.n,
                provenance: self.provenance.clone(),
                anchors: self.anchors.clone(),
                iteration_seconds: self.iteration_seconds.clone(),
                forwards_per_iteration: self.forwards_per_iteration,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sim: Simulation<f64> = read_simulation(dir)?;
        let side: Sidecar = read_json(&dir.join(PROVENANCE_FILE))?;
        if side.provenance.len() != sim.n_steps() {
            return Err(Error::Format(format!("{}: provenance does not cover every step", dir.display())));
        }
        Ok(Self {
            sim_id: side.sim_id,
            m: side.m,
            n: side.n,
            states: sim.states().to_vec(),
            provenance: side.provenance,
            anchors: side.anchors,
            iteration_seconds: side.iteration_seconds,
            forwards_per_iteration: side.forwards_per_iteration,
        })
    }
}

/// Roll a predictor over a simulation's trajectory. When `m = n` this runs
/// exactly `num_iterations(N, n)` iterations; otherwise it stops before
/// exceeding `N` steps.
pub fn rollout(predictor: &dyn Predictor, sim: &Simulation<f64>) -> Result<RolloutResult> {
    let (m, n) = (predictor.m(), predictor.n());
    let total = sim.n_steps();
    let iterations = num_iterations(total, n)?.min(total.saturating_sub(m) / n);
    if total < m + n {
        return Err(Error::InvalidArgument(format!("{}: {total} steps are fewer than m + n", sim.id)));
    }
    let physical = sim.physical()?;
    let mut states: Vec<State<f64>> = physical.states()[..m].to_vec();
    let mut provenance = vec![Provenance::Truth; m];
    let mut anchors = Vec::with_capacity(iterations);
    let mut seconds = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = states.len();
        let clock = Instant::now();
        let pred = predictor.predict(start, &states[start - m..])?;
        seconds.push(clock.elapsed().as_secs_f64());
        if pred.len() != n {
            return Err(Error::Shape(format!("predictor returned {} states, expected {n}", pred.len())));
        }
        anchors.push(start);
        states.extend(pred);
        provenance.extend(std::iter::repeat(Provenance::Predicted).take(n));
    }
    Ok(RolloutResult {
        sim_id: sim.id.clone(),
        m,
        n,
        states,
        provenance,
        anchors,
        iteration_seconds: seconds,
        forwards_per_iteration: predictor.forwards_per_call(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::features::fit_norm_stats;
    use crate::models::{Family, ModelSpec, Network, SeqModel};
    use crate::synth::{generate_simulation, SynthConfig};

    /// Replays the true trajectory.
    struct Oracle<'a> {
        sim: &'a Simulation<f64>,
        m: usize,
        n: usize,
    }

    impl Predictor for Oracle<'_> {
        fn m(&self) -> usize {
            self.m
        }

        fn n(&self) -> usize {
            self.n
        }

        fn predict(&self, start: usize, _history: &[State<f64>]) -> Result<Vec<State<f64>>> {
            Ok(self.sim.physical()?.states()[start..start + self.n].to_vec())
        }
    }

    fn sim(steps: usize) -> Simulation<f64> {
        generate_simulation(&SynthConfig {
            height: 16,
            width: 16,
            steps,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn iteration_counts() {
        assert_eq!(num_iterations(100, 5).unwrap(), 19);
        assert_eq!(num_iterations(10, 5).unwrap(), 1);
        assert_eq!(num_iterations(23, 5).unwrap(), 3);
        assert!(num_iterations(9, 5).is_err());
        assert!(num_iterations(10, 0).is_err());
    }

    proptest! {
        #[test]
        fn iteration_count_matches_loop(n in 1usize..12, total in 0usize..200) {
            // step-by-step: keep predicting while a full block fits after the seed window
            let mut steps = n;
            let mut count = 0;
            while steps + n <= total {
                steps += n;
                count += 1;
            }
            match num_iterations(total, n) {
                Ok(k) => prop_assert_eq!(k, count),
                Err(_) => prop_assert!(total < 2 * n),
            }
        }
    }

    #[test]
    fn oracle_rollout_reproduces_truth() {
        let s = sim(20);
        let r = rollout(&Oracle { sim: &s, m: 5, n: 5 }, &s).unwrap();
        assert_eq!(r.anchors, vec![5, 10, 15]);
        assert_eq!(r.n_steps(), 20);
        assert_eq!(r.to_simulation().states(), s.states());
        assert!(r.provenance[..5].iter().all(|p| *p == Provenance::Truth));
        assert!(r.provenance[5..].iter().all(|p| *p == Provenance::Predicted));
        assert_eq!(r.predicted_steps(), 5..20);
    }

    #[test]
    fn trailing_steps_are_not_predicted() {
        let s = sim(23);
        let r = rollout(&Oracle { sim: &s, m: 5, n: 5 }, &s).unwrap();
        assert_eq!(r.n_steps(), 20);
        let r = rollout(&Oracle { sim: &s, m: 7, n: 5 }, &s).unwrap();
        assert_eq!(r.n_steps(), 22);
        assert!(r.n_steps() <= 23);
    }

    #[test]
    fn result_persists_with_provenance() {
        let s = sim(10);
        let r = rollout(&Oracle { sim: &s, m: 5, n: 5 }, &s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path()).unwrap();
        let back = RolloutResult::load(dir.path()).unwrap();
        assert_eq!(back.provenance, r.provenance);
        assert_eq!(back.anchors, r.anchors);
        assert_eq!(back.n_steps(), 10);
    }

    #[test]
    fn stack_predictor_checks_stats_and_stays_in_envelope() {
        let s = sim(12);
        let stats = fit_norm_stats(&[&s]).unwrap();
        let net = Network::<f32>::new(ModelSpec::small(Family::Tau, 3, 3, 7), 0).unwrap();
        let stack = Stack::new(vec![Box::new(net) as Box<dyn SeqModel<f32>>]).unwrap();
        assert!(StackPredictor::new(&stack, &stats, FeatureSet::Engineered, "other").is_err());
        assert!(StackPredictor::new(&stack, &stats, FeatureSet::Physical, &stats.hash()).is_err());
        let p = StackPredictor::new(&stack, &stats, FeatureSet::Engineered, &stats.hash()).unwrap();
        let r = rollout(&p, &s).unwrap();
        assert_eq!(r.anchors, vec![3, 6, 9]);
        for t in r.predicted_steps() {
            for ch in Channel::PHYSICAL {
                let range = stats.output(ch).unwrap();
                let slack = 1e-6 * (range.max - range.min);
                for &v in r.map(t, ch).unwrap().values() {
                    assert!(v >= range.min - slack && v <= range.max + slack);
                }
            }
        }
    }
}
