//! Domain-averaged porosity and a Darcy-conductance permeability proxy.
//!
//! The proxy solves the generator's pressure equation with a unit pressure
//! drop. Its values are dimensionless conductances of the `k(eps)` law and
//! only their evolution over time is meaningful.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Channel, Simulation, StateMap};
use crate::error::{Error, Result};
use crate::rollout::RolloutResult;
use crate::synth::{percolates, solve_pressure, PressureBc, SynthConfig};

pub const DEFAULT_STEPS: [usize; 10] = [5, 15, 25, 35, 45, 55, 65, 75, 85, 95];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Porosity,
    Permeability,
}

impl Property {
    pub fn name(self) -> &'static str {
        match self {
            Property::Porosity => "porosity",
            Property::Permeability => "permeability",
        }
    }
}

pub fn porosity(eps: &StateMap<f64>) -> f64 {
    eps.mean()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Permeability {
    pub value: f64,
    /// False when no open path joins inlet and outlet; `value` is then 0.
    pub percolating: bool,
}

/// Outlet flux per unit cross-section divided by the applied pressure gradient.
pub fn permeability_proxy(eps: &StateMap<f64>, cfg: &SynthConfig) -> Result<Permeability> {
    if !percolates(eps) {
        return Ok(Permeability {
            value: 0.0,
            percolating: false,
        });
    }
    let (h, w) = eps.dims();
    let field = solve_pressure(eps, cfg, PressureBc::default())?;
    let flux = field.column_flux(w - 2) / h as f64;
    let gradient = 1.0 / (w - 1) as f64;
    Ok(Permeability {
        value: flux / gradient,
        percolating: true,
    })
}

/// One property over the sampled steps for the truth and every variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BulkSeries {
    pub sim_id: String,
    pub property: Property,
    pub steps: Vec<usize>,
    pub truth: Vec<f64>,
    pub variants: BTreeMap<String, Vec<f64>>,
    /// `(series, step)` pairs whose permeability was flagged as non-percolating.
    pub flagged: Vec<(String, usize)>,
}

impl BulkSeries {
    /// `step,truth,<variant>...` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,truth");
        for name in self.variants.keys() {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, step) in self.steps.iter().enumerate() {
            out.push_str(&format!("{step},{}", self.truth[i]));
            for v in self.variants.values() {
                out.push_str(&format!(",{}", v[i]));
            }
            out.push('\n');
        }
        out
    }
}

fn eps_at<'a>(maps: Option<&'a StateMap<f64>>, who: &str, step: usize) -> Result<&'a StateMap<f64>> {
    maps.ok_or_else(|| Error::Data(format!("{who}: no eps map at step {step}")))
}

/// Porosity and permeability series for a simulation and its predicted variants.
pub fn bulk_series(
    truth: &Simulation<f64>,
    variants: &BTreeMap<String, RolloutResult>,
    steps: &[usize],
    cfg: &SynthConfig,
) -> Result<[BulkSeries; 2]> {
    if steps.windows(2).any(|s| s[1] <= s[0]) {
        return Err(Error::InvalidArgument("sampled steps must be strictly increasing".into()));
    }
    let empty = |property| BulkSeries {
        sim_id: truth.id.clone(),
        property,
        steps: steps.to_vec(),
        truth: Vec::new(),
        variants: BTreeMap::new(),
        flagged: Vec::new(),
    };
    let (mut por, mut perm) = (empty(Property::Porosity), empty(Property::Permeability));
    let mut record = |name: Option<&str>, eps: &StateMap<f64>, step: usize| -> Result<()> {
        let k = permeability_proxy(eps, cfg)?;
        let label = name.unwrap_or("truth").to_string();
        if !k.percolating {
            perm.flagged.push((label.clone(), step));
        }
        match name {
            None => {
                por.truth.push(porosity(eps));
                perm.truth.push(k.value);
            }
            Some(n) => {
                por.variants.entry(label.clone()).or_default().push(porosity(eps));
                perm.variants.entry(n.to_string()).or_default().push(k.value);
            }
        }
        Ok(())
    };
    for &step in steps {
        record(None, eps_at(truth.map(step, Channel::Eps), &truth.id, step)?, step)?;
        for (name, r) in variants {
            if r.sim_id != truth.id {
                return Err(Error::Mismatch(format!("variant {name} belongs to {}", r.sim_id)));
            }
            record(Some(name), eps_at(r.map(step, Channel::Eps), name, step)?, step)?;
        }
    }
    Ok([por, perm])
}

/// Per-step root mean squared error across samples; rows are samples.
pub fn rmse_series(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Mismatch(format!("{} predicted vs {} true series", pred.len(), truth.len())));
    }
    let steps = truth[0].len();
    if pred.iter().chain(truth).any(|s| s.len() != steps) {
        return Err(Error::Mismatch("series are not aligned".into()));
    }
    Ok((0..steps)
        .map(|i| {
            let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p[i] - t[i]).powi(2)).sum();
            (sq / pred.len() as f64).sqrt()
        })
        .collect())
}
