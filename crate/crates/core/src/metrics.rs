//! Per-step similarity and error scores averaged over samples.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Channel, Simulation, StateMap};
use crate::error::{Error, Result};
use crate::rollout::RolloutResult;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pcc,
    Mse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Pcc => "pcc",
            Metric::Mse => "mse",
        }
    }
}

/// Pearson correlation over all pixels; `None` when either map is constant.
pub fn pcc<T: Scalar>(pred: &StateMap<T>, truth: &StateMap<T>) -> Result<Option<f64>> {
    pred.ensure_same_dims(truth)?;
    let n = pred.values().len() as f64;
    let a: Vec<f64> = pred.values().iter().map(|v| v.to_f64_lossy()).collect();
    let b: Vec<f64> = truth.values().iter().map(|v| v.to_f64_lossy()).collect();
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(&a) || constant(&b) || va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)))
}

/// Mean squared pixel error.
pub fn mse_map<T: Scalar>(pred: &StateMap<T>, truth: &StateMap<T>) -> Result<f64> {
    pred.ensure_same_dims(truth)?;
    let s: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum();
    Ok(s / pred.values().len() as f64)
}

/// Signed `pred - truth`.
pub fn difference_map<T: Scalar>(pred: &StateMap<T>, truth: &StateMap<T>) -> Result<StateMap<T>> {
    pred.ensure_same_dims(truth)?;
    let values = pred.values().iter().zip(truth.values()).map(|(&a, &b)| a - b).collect();
    StateMap::new(pred.channel, pred.height(), pred.width(), values)
}

/// One metric for one channel over the predicted steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub channel: Channel,
    pub metric: Metric,
    pub steps: Vec<usize>,
    /// Sample mean per step; `None` when every sample was excluded.
    pub values: Vec<Option<f64>>,
    /// Samples contributing to each step.
    pub counts: Vec<usize>,
}

impl MetricCurve {
    pub fn value_at(&self, step: usize) -> Option<f64> {
        self.steps.iter().position(|&s| s == step).and_then(|i| self.values[i])
    }

    /// `step,value,count` lines with a header; missing values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,value,count\n");
        for ((s, v), c) in self.steps.iter().zip(&self.values).zip(&self.counts) {
            let v = v.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(out, "{s},{v},{c}");
        }
        out
    }
}

/// Per channel and metric: score every sample at every predicted step, then
/// average the defined values.
pub fn curves(results: &[RolloutResult], truths: &[&Simulation<f64>], channels: &[Channel]) -> Result<Vec<MetricCurve>> {
    if results.len() != truths.len() || results.is_empty() {
        return Err(Error::Mismatch(format!(
            "{} results paired with {} simulations",
            results.len(),
            truths.len()
        )));
    }
    let steps: Vec<usize> = results[0].predicted_steps().collect();
    for (r, t) in results.iter().zip(truths) {
        if r.sim_id != t.id {
            return Err(Error::Mismatch(format!("result {} paired with simulation {}", r.sim_id, t.id)));
        }
        if r.predicted_steps().collect::<Vec<_>>() != steps || t.n_steps() < r.n_steps() {
            return Err(Error::Mismatch(format!("{}: predicted steps differ between samples", r.sim_id)));
        }
    }
    let mut out = Vec::new();
    for &ch in channels {
        for metric in [Metric::Pcc, Metric::Mse] {
            let mut values = Vec::with_capacity(steps.len());
            let mut counts = Vec::with_capacity(steps.len());
            for &step in &steps {
                let mut acc = Vec::new();
                for (r, t) in results.iter().zip(truths) {
                    let pred = r
                        .map(step, ch)
                        .ok_or_else(|| Error::Data(format!("{}: no {ch} at step {step}", r.sim_id)))?;
                    let truth = t.require_map(step, ch)?;
                    let v = match metric {
                        Metric::Pcc => pcc(pred, truth)?,
                        Metric::Mse => Some(mse_map(pred, truth)?),
                    };
                    acc.extend(v);
                }
                counts.push(acc.len());
                values.push((!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64));
            }
            out.push(MetricCurve {
                channel: ch,
                metric,
                steps: steps.clone(),
                values,
                counts,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::rollout::Provenance;

    fn random_map(seed: u64, n: usize) -> StateMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n * n).map(|_| rng.gen::<f64>()).collect();
        StateMap::new(Channel::Eps, n, n, v).unwrap()
    }

    fn two_pass_pcc(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        for i in 0..a.len() {
            cov += (a[i] - ma) * (b[i] - mb);
        }
        let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n).sqrt();
        cov / n / (sa * sb)
    }

    #[test]
    fn pcc_identities() {
        let a = random_map(1, 16);
        assert!((pcc(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let mean = a.mean();
        let mirrored = StateMap::new(Channel::Eps, 16, 16, a.values().iter().map(|v| -v + 2.0 * mean).collect()).unwrap();
        assert!((pcc(&mirrored, &a).unwrap().unwrap() + 1.0).abs() < 1e-12);
        let flat = StateMap::filled(Channel::Eps, 16, 16, 0.3);
        assert_eq!(pcc(&flat, &a).unwrap(), None);
        assert!(pcc(&a, &StateMap::filled(Channel::Eps, 8, 8, 0.0)).is_err());
    }

    #[test]
    fn pcc_matches_two_pass_oracle() {
        for seed in 0..100 {
            let (a, b) = (random_map(seed, 16), random_map(seed + 1000, 16));
            let got = pcc(&a, &b).unwrap().unwrap();
            assert!((got - two_pass_pcc(a.values(), b.values())).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn pcc_affine_invariance(seed in 0u64..1000, scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
            let (a, b) = (random_map(seed, 8), random_map(seed + 7, 8));
            let t = StateMap::new(Channel::Eps, 8, 8, a.values().iter().map(|v| scale * v + shift).collect()).unwrap();
            let (p, q) = (pcc(&a, &b).unwrap().unwrap(), pcc(&t, &b).unwrap().unwrap());
            prop_assert!((p - q).abs() < 1e-10);
            prop_assert!((-1.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn mse_and_difference() {
        let a = random_map(2, 8);
        assert_eq!(mse_map(&a, &a).unwrap(), 0.0);
        let off = StateMap::new(Channel::Eps, 8, 8, a.values().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((mse_map(&off, &a).unwrap() - 0.01).abs() < 1e-12);
        let b = random_map(3, 8);
        let mut acc = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                acc += (a.get(i, j) - b.get(i, j)).powi(2);
            }
        }
        assert!((mse_map(&a, &b).unwrap() - acc / 64.0).abs() < 1e-14);
        assert!(difference_map(&a, &a).unwrap().values().iter().all(|&v| v == 0.0));
        let plus = StateMap::new(Channel::Eps, 8, 8, a.values().iter().map(|v| v + 1.0).collect()).unwrap();
        assert!(difference_map(&plus, &a).unwrap().values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let ab = difference_map(&a, &b).unwrap();
        let ba = difference_map(&b, &a).unwrap();
        assert!(ab.values().iter().zip(ba.values()).all(|(x, y)| *x == -*y));
    }

    fn trajectory(id: &str, steps: usize, seed: u64) -> Simulation<f64> {
        let states = (0..steps)
            .map(|t| {
                Channel::PHYSICAL
                    .iter()
                    .map(|&ch| random_map(seed * 100 + t as u64, 6).with_channel(ch))
                    .collect()
            })
            .collect();
        Simulation::new(id, states)
    }

    fn as_result(sim: &Simulation<f64>, m: usize) -> RolloutResult {
        let n = sim.n_steps();
        RolloutResult {
            sim_id: sim.id.clone(),
            m,
            n: m,
            states: sim.states().to_vec(),
            provenance: (0..n).map(|t| if t < m { Provenance::Truth } else { Provenance::Predicted }).collect(),
            anchors: (m..n).step_by(m).collect(),
            iteration_seconds: vec![],
            forwards_per_iteration: 1,
        }
    }

    #[test]
    fn perfect_results_give_unit_curves() {
        let s = trajectory("a", 10, 1);
        let c = curves(&[as_result(&s, 5)], &[&s], &Channel::PHYSICAL).unwrap();
        assert_eq!(c.len(), 8);
        for curve in &c {
            assert_eq!(curve.steps, (5..10).collect::<Vec<_>>());
            let expect = if curve.metric == Metric::Pcc { 1.0 } else { 0.0 };
            assert!(curve.values.iter().all(|v| (v.unwrap() - expect).abs() < 1e-12));
        }
        assert!(c[0].to_csv().starts_with("step,value,count\n5,"));
    }

    #[test]
    fn curves_average_and_exclude_constant_maps() {
        let truth_a = trajectory("a", 10, 1);
        let truth_b = trajectory("b", 10, 2);
        let mut ra = as_result(&truth_a, 5);
        let rb = as_result(&truth_b, 5);
        // sample a: constant eps prediction at step 6
        let eps = ra.states[6].iter_mut().find(|m| m.channel == Channel::Eps).unwrap();
        *eps = StateMap::filled(Channel::Eps, 6, 6, 0.5);
        let c = curves(&[ra.clone(), rb.clone()], &[&truth_a, &truth_b], &[Channel::Eps]).unwrap();
        let p = &c[0];
        assert_eq!(p.metric, Metric::Pcc);
        assert_eq!(p.counts, vec![2, 1, 2, 2, 2]);
        assert!((p.value_at(6).unwrap() - 1.0).abs() < 1e-12);
        // permutation invariance
        let swapped = curves(&[rb, ra], &[&truth_b, &truth_a], &[Channel::Eps]).unwrap();
        for (x, y) in c.iter().zip(&swapped) {
            for (u, v) in x.values.iter().zip(&y.values) {
                assert!((u.unwrap() - v.unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn curve_mean_of_two_samples() {
        // pcc 0.8 and 1.0 at one step average to 0.9
        let truth = StateMap::new(Channel::Eps, 1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        // y = x + k*e with e ⟂ x and unit-free: solve for pcc 0.8
        let e = [2.0, -1.0, -2.0, -1.0, 2.0];
        let sx: f64 = v.iter().map(|x| (x - 2.0f64).powi(2)).sum::<f64>();
        let se: f64 = e.iter().map(|x: &f64| x * x).sum();
        let k = (sx / se * (1.0 / 0.64 - 1.0)).sqrt();
        let pred = StateMap::new(Channel::Eps, 1, 5, v.iter().zip(&e).map(|(x, d)| x + k * d).collect()).unwrap();
        assert!((pcc(&pred, &truth).unwrap().unwrap() - 0.8).abs() < 1e-12);
        let make = |id: &str, p: &StateMap<f64>| {
            let states: Vec<_> = (0..2)
                .map(|t| {
                    let m = if t == 0 { truth.clone() } else { p.clone() };
                    vec![m]
                })
                .collect();
            let sim = Simulation::new(id, states);
            let truth_sim = Simulation::new(id, vec![vec![truth.clone()], vec![truth.clone()]]);
            (as_result(&sim, 1), truth_sim)
        };
        let (ra, ta) = make("a", &pred);
        let (rb, tb) = make("b", &truth);
        let c = curves(&[ra, rb], &[&ta, &tb], &[Channel::Eps]).unwrap();
        assert!((c[0].value_at(1).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn curves_reject_bad_pairing() {
        let a = trajectory("a", 10, 1);
        let b = trajectory("b", 10, 2);
        assert!(curves(&[as_result(&a, 5)], &[&b], &[Channel::Eps]).is_err());
        assert!(curves(&[as_result(&a, 5)], &[&a, &b], &[Channel::Eps]).is_err());
    }
}
