//! Desk-scale quasi-static reactive dissolution generator.
//!
//! Each step solves a Darcy-type pressure equation on the current porosity
//! map, reconstructs cell velocities from conservative face fluxes, relaxes
//! the advection-diffusion-reaction equation for concentration to steady
//! state, and then dissolves solid where the combined filter is active.
//! The conductivity law is `k(eps) = eps^exponent + k_min`; this is a proxy
//! with the same state variables as a micro-continuum solver, not a
//! replacement for one.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Channel, Simulation, StateMap};
use crate::error::{Error, Result};
use crate::features::filter_active;

/// Porosity assigned to solid cells.
pub const GRAIN_EPS: f64 = 0.02;
const MAX_GEOMETRY_RETRIES: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutletBc {
    /// No diffusive flux through the outlet; advection carries solute out.
    ZeroGradient,
    /// Outlet column held at zero concentration.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub seed: u64,
    pub grain_fraction: f64,
    /// Box-blur radius applied to the random field before thresholding.
    pub smoothing: usize,
    /// Pore columns kept open at the inlet and outlet.
    pub buffer_columns: usize,
    pub c_in: f64,
    pub pressure_drop: f64,
    pub conductivity_exponent: f64,
    pub k_min: f64,
    /// Length scale (cells) used to turn the dimensionless targets into coefficients.
    pub length_scale: f64,
    pub peclet: f64,
    pub kinetic: f64,
    /// Overrides the diffusion coefficient derived from `peclet`.
    pub diffusion: Option<f64>,
    /// Overrides the reaction-rate constant derived from `kinetic`.
    pub reaction_rate: Option<f64>,
    /// Dissolution time step.
    pub dt: f64,
    pub outlet: OutletBc,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            steps: 20,
            seed: 0,
            grain_fraction: 0.45,
            smoothing: 2,
            buffer_columns: 1,
            c_in: 1.0,
            pressure_drop: 31.0,
            conductivity_exponent: 3.0,
            k_min: 1e-6,
            length_scale: 4.0,
            peclet: 1.0,
            kinetic: 1.0,
            diffusion: None,
            reaction_rate: None,
            dt: 4.0,
            outlet: OutletBc::ZeroGradient,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_in", self.c_in),
            ("pressure_drop", self.pressure_drop),
            ("conductivity_exponent", self.conductivity_exponent),
            ("k_min", self.k_min),
            ("length_scale", self.length_scale),
            ("peclet", self.peclet),
            ("kinetic", self.kinetic),
            ("dt", self.dt),
            ("diffusion", self.diffusion.unwrap_or(1.0)),
            ("reaction_rate", self.reaction_rate.unwrap_or(1.0)),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.height < 2 || self.width < 3 || self.steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid {}x{} with {} steps is too small",
                self.height, self.width, self.steps
            )));
        }
        if !(0.0..1.0).contains(&self.grain_fraction) {
            return Err(Error::InvalidArgument("grain_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn conductivity(&self, eps: f64) -> f64 {
        eps.powf(self.conductivity_exponent) + self.k_min
    }
}

fn box_blur(field: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return field.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            let mut n = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (i + di, j + dj);
                    if a >= 0 && b >= 0 && a < h as isize && b < w as isize {
                        acc += field[a as usize * w + b as usize];
                        n += 1.0;
                    }
                }
            }
            out[i as usize * w + j as usize] = acc / n;
        }
    }
    out
}

/// Whether cells with `eps > 0.5` connect column 0 to the last column.
pub fn percolates(eps: &StateMap<f64>) -> bool {
    let (h, w) = eps.dims();
    let open = |i: usize, j: usize| eps.get(i, j) > 0.5;
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    for i in 0..h {
        if open(i, 0) {
            seen[i * w] = true;
            queue.push_back((i, 0));
        }
    }
    while let Some((i, j)) = queue.pop_front() {
        if j == w - 1 {
            return true;
        }
        let mut push = |a: usize, b: usize| {
            if !seen[a * w + b] && open(a, b) {
                seen[a * w + b] = true;
                queue.push_back((a, b));
            }
        };
        if i > 0 {
            push(i - 1, j);
        }
        if i + 1 < h {
            push(i + 1, j);
        }
        if j > 0 {
            push(i, j - 1);
        }
        if j + 1 < w {
            push(i, j + 1);
        }
    }
    false
}

fn geometry_attempt(seed: u64, h: usize, w: usize, grain_fraction: f64, smoothing: usize, buffer: usize) -> StateMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
    let smooth = box_blur(&noise, h, w, smoothing);
    let mut sorted = smooth.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = (grain_fraction * (h * w) as f64).round() as usize;
    let threshold = if cut == 0 { f64::NEG_INFINITY } else { sorted[cut - 1] };
    StateMap::from_fn(Channel::Eps, h, w, |i, j| {
        let buffered = j < buffer || j + buffer >= w;
        if !buffered && smooth[i * w + j] <= threshold {
            GRAIN_EPS
        } else {
            1.0
        }
    })
}

/// Random grain packing with a guaranteed inlet-to-outlet pore path.
pub fn generate_geometry(seed: u64, height: usize, width: usize, grain_fraction: f64) -> Result<StateMap<f64>> {
    let d = SynthConfig::default();
    geometry_with(seed, height, width, grain_fraction, d.smoothing, 0)
}

fn geometry_with(
    seed: u64,
    height: usize,
    width: usize,
    grain_fraction: f64,
    smoothing: usize,
    buffer: usize,
) -> Result<StateMap<f64>> {
    if !(0.0..1.0).contains(&grain_fraction) || height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "grain_fraction {grain_fraction} on {height}x{width}"
        )));
    }
    for attempt in 0..MAX_GEOMETRY_RETRIES {
        let sub_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt);
        let eps = geometry_attempt(sub_seed, height, width, grain_fraction, smoothing, buffer);
        if percolates(&eps) {
            return Ok(eps);
        }
    }
    Err(Error::NoConvergence(format!(
        "no connected pore path after {MAX_GEOMETRY_RETRIES} geometries (seed {seed})"
    )))
}

/// Solved pressure with the conservative face fluxes it implies.
#[derive(Clone, Debug)]
pub struct PressureField {
    pub height: usize,
    pub width: usize,
    pub pressure: Vec<f64>,
    /// Flux through the face between `(i, j)` and `(i, j+1)`, `h × (w-1)`.
    pub flux_x: Vec<f64>,
    /// Flux through the face between `(i, j)` and `(i+1, j)`, `(h-1) × w`.
    pub flux_y: Vec<f64>,
    pub iterations: usize,
}

impl PressureField {
    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.pressure[i * self.width + j]
    }

    /// Net flow through the face between columns `j` and `j+1`.
    pub fn column_flux(&self, j: usize) -> f64 {
        (0..self.height).map(|i| self.flux_x[i * (self.width - 1) + j]).sum()
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Boundary settings of the pressure problem.
#[derive(Clone, Copy, Debug)]
pub struct PressureBc {
    pub inlet: f64,
    pub outlet: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PressureBc {
    fn default() -> Self {
        Self {
            inlet: 1.0,
            outlet: 0.0,
            tolerance: 1e-10,
            max_iterations: 100_000,
        }
    }
}

/// Solve `div(k grad p) = 0` with fixed pressure on the first and last
/// columns and no flux through the top and bottom walls, using
/// Jacobi-preconditioned conjugate gradients.
pub fn solve_pressure(eps: &StateMap<f64>, cfg: &SynthConfig, bc: PressureBc) -> Result<PressureField> {
    let (h, w) = eps.dims();
    if w < 3 {
        return Err(Error::InvalidArgument("pressure solve needs at least 3 columns".into()));
    }
    let k: Vec<f64> = eps.values().iter().map(|&e| cfg.conductivity(e)).collect();
    let tx = |i: usize, j: usize| harmonic(k[i * w + j], k[i * w + j + 1]);
    let ty = |i: usize, j: usize| harmonic(k[i * w + j], k[(i + 1) * w + j]);

    // unknowns: columns 1..w-1
    let wi = w - 2;
    let n = h * wi;
    let id = |i: usize, j: usize| i * wi + (j - 1);
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..h {
        for j in 1..w - 1 {
            let r = id(i, j);
            let (west, east) = (tx(i, j - 1), tx(i, j));
            diag[r] += west + east;
            if j == 1 {
                rhs[r] += west * bc.inlet;
            }
            if j == w - 2 {
                rhs[r] += east * bc.outlet;
            }
            if i > 0 {
                diag[r] += ty(i - 1, j);
            }
            if i + 1 < h {
                diag[r] += ty(i, j);
            }
        }
    }
    let apply = |x: &[f64], y: &mut [f64]| {
        for i in 0..h {
            for j in 1..w - 1 {
                let r = id(i, j);
                let mut v = diag[r] * x[r];
                if j > 1 {
                    v -= tx(i, j - 1) * x[id(i, j - 1)];
                }
                if j < w - 2 {
                    v -= tx(i, j) * x[id(i, j + 1)];
                }
                if i > 0 {
                    v -= ty(i - 1, j) * x[id(i - 1, j)];
                }
                if i + 1 < h {
                    v -= ty(i, j) * x[id(i + 1, j)];
                }
                y[r] = v;
            }
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    // linear initial guess
    let mut x: Vec<f64> = (0..n)
        .map(|r| {
            let j = r % wi + 1;
            bc.inlet + (bc.outlet - bc.inlet) * j as f64 / (w - 1) as f64
        })
        .collect();
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut res: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let bnorm = dot(&rhs, &rhs).sqrt().max(f64::MIN_POSITIVE);
    let mut z: Vec<f64> = res.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut dir = z.clone();
    let mut rz = dot(&res, &z);
    let mut iterations = 0;
    let mut ad = vec![0.0; n];
    while dot(&res, &res).sqrt() / bnorm > bc.tolerance {
        if iterations >= bc.max_iterations {
            return Err(Error::NoConvergence(format!(
                "pressure solve stalled at relative residual {:.3e}",
                dot(&res, &res).sqrt() / bnorm
            )));
        }
        apply(&dir, &mut ad);
        let alpha = rz / dot(&dir, &ad);
        for r in 0..n {
            x[r] += alpha * dir[r];
            res[r] -= alpha * ad[r];
        }
        for r in 0..n {
            z[r] = res[r] / diag[r];
        }
        let rz_new = dot(&res, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for r in 0..n {
            dir[r] = z[r] + beta * dir[r];
        }
        iterations += 1;
    }
    let mut pressure = vec![0.0; h * w];
    for i in 0..h {
        pressure[i * w] = bc.inlet;
        pressure[i * w + w - 1] = bc.outlet;
        for j in 1..w - 1 {
            pressure[i * w + j] = x[id(i, j)];
        }
    }
    let mut flux_x = vec![0.0; h * (w - 1)];
    for i in 0..h {
        for j in 0..w - 1 {
            flux_x[i * (w - 1) + j] = tx(i, j) * (pressure[i * w + j] - pressure[i * w + j + 1]);
        }
    }
    let mut flux_y = vec![0.0; (h - 1) * w];
    for i in 0..h - 1 {
        for j in 0..w {
            flux_y[i * w + j] = ty(i, j) * (pressure[i * w + j] - pressure[(i + 1) * w + j]);
        }
    }
    Ok(PressureField {
        height: h,
        width: w,
        pressure,
        flux_x,
        flux_y,
        iterations,
    })
}

/// Cell velocities as the average of the two opposite face fluxes; boundary
/// cells use their single interior face (walls contribute zero).
pub fn velocity_from_pressure(field: &PressureField) -> (StateMap<f64>, StateMap<f64>) {
    let (h, w) = (field.height, field.width);
    let fx = |i: usize, j: usize| field.flux_x[i * (w - 1) + j];
    let fy = |i: usize, j: usize| field.flux_y[i * w + j];
    let ux = StateMap::from_fn(Channel::Ux, h, w, |i, j| {
        if j == 0 {
            fx(i, 0)
        } else if j == w - 1 {
            fx(i, w - 2)
        } else {
            0.5 * (fx(i, j - 1) + fx(i, j))
        }
    });
    let uy = StateMap::from_fn(Channel::Uy, h, w, |i, j| {
        let up = if i > 0 { fy(i - 1, j) } else { 0.0 };
        let down = if i + 1 < h { fy(i, j) } else { 0.0 };
        if h == 1 {
            0.0
        } else if i == 0 {
            down
        } else if i == h - 1 {
            up
        } else {
            0.5 * (up + down)
        }
    });
    (ux, uy)
}

/// Diffusion and reaction coefficients of the concentration problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transport {
    pub diffusion: f64,
    pub reaction_rate: f64,
    pub c_in: f64,
    pub outlet: OutletBc,
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Apply the sink on every cell instead of only where the filter is active.
    pub react_everywhere: bool,
}

impl Transport {
    pub fn new(diffusion: f64, reaction_rate: f64) -> Self {
        Self {
            diffusion,
            reaction_rate,
            c_in: 1.0,
            outlet: OutletBc::ZeroGradient,
            tolerance: 1e-7,
            max_sweeps: 400_000,
            react_everywhere: false,
        }
    }
}

/// Steady concentration plus the operator data needed to audit it.
#[derive(Clone, Debug)]
pub struct ConcentrationField {
    pub c: StateMap<f64>,
    /// Cells where the sink was applied in the final solve.
    pub active: Vec<bool>,
    pub residual: f64,
    pub sweeps: usize,
}

/// Finite-volume operator of one cell: `diag * c_i - Σ coeff * c_nb = 0`.
struct CellRow {
    diag: f64,
    nb: [(usize, f64); 4],
    len: usize,
}

fn transport_rows(eps: &StateMap<f64>, field: &PressureField, tr: &Transport, active: &[bool]) -> Vec<CellRow> {
    let (h, w) = eps.dims();
    let e = eps.values();
    let mut rows = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let c = i * w + j;
            let mut row = CellRow {
                diag: 0.0,
                nb: [(0, 0.0); 4],
                len: 0,
            };
            // (neighbour, outward flux)
            let mut faces: [(usize, f64); 4] = [(0, 0.0); 4];
            let mut nf = 0;
            if j > 0 {
                faces[nf] = (c - 1, -field.flux_x[i * (w - 1) + j - 1]);
                nf += 1;
            }
            if j + 1 < w {
                faces[nf] = (c + 1, field.flux_x[i * (w - 1) + j]);
                nf += 1;
            }
            if i > 0 {
                faces[nf] = (c - w, -field.flux_y[(i - 1) * w + j]);
                nf += 1;
            }
            if i + 1 < h {
                faces[nf] = (c + w, field.flux_y[i * w + j]);
                nf += 1;
            }
            let mut inflow = 0.0;
            for &(nb, f) in &faces[..nf] {
                let d = tr.diffusion * harmonic(e[c], e[nb]);
                row.diag += d + f.max(0.0);
                inflow += (-f).max(0.0);
                row.nb[row.len] = (nb, d + (-f).max(0.0));
                row.len += 1;
            }
            if j == w - 1 {
                // advective outflow balancing what enters the outlet column
                let outflow: f64 = faces[..nf].iter().map(|&(_, f)| f).sum::<f64>();
                row.diag += (-outflow).max(0.0).min(inflow);
            }
            if active[c] {
                row.diag += tr.reaction_rate;
            }
            rows.push(row);
        }
    }
    rows
}

fn is_fixed(j: usize, w: usize, outlet: OutletBc) -> Option<bool> {
    if j == 0 {
        Some(true)
    } else if j == w - 1 && outlet == OutletBc::Fixed {
        Some(false)
    } else {
        None
    }
}

fn max_residual(rows: &[CellRow], c: &[f64], w: usize, outlet: OutletBc) -> f64 {
    rows.iter()
        .enumerate()
        .filter(|(k, _)| is_fixed(k % w, w, outlet).is_none())
        .map(|(k, row)| {
            let s: f64 = row.nb[..row.len].iter().map(|&(nb, a)| a * c[nb]).sum();
            (row.diag * c[k] - s).abs()
        })
        .fold(0.0, f64::max)
}

fn relax(rows: &[CellRow], c: &mut [f64], w: usize, tr: &Transport) -> Result<(f64, usize)> {
    let omega = 1.6;
    let mut sweeps = 0;
    loop {
        for k in 0..c.len() {
            if is_fixed(k % w, w, tr.outlet).is_some() {
                continue;
            }
            let row = &rows[k];
            let s: f64 = row.nb[..row.len].iter().map(|&(nb, a)| a * c[nb]).sum();
            let gs = s / row.diag;
            c[k] += omega * (gs - c[k]);
        }
        sweeps += 1;
        if sweeps % 20 == 0 {
            let r = max_residual(rows, c, w, tr.outlet);
            if r < tr.tolerance {
                return Ok((r, sweeps));
            }
            if !r.is_finite() || sweeps >= tr.max_sweeps {
                return Err(Error::NoConvergence(format!(
                    "concentration relaxation at residual {r:.3e} after {sweeps} sweeps"
                )));
            }
        }
    }
}

/// Relax upwind advection, diffusion (`D * eps` at faces) and the first-order
/// sink on filter-active cells to steady state. The active set depends on
/// the solution: solves repeat, dropping cells whose concentration fell
/// below the filter threshold, until no cell is dropped.
pub fn steady_concentration(eps: &StateMap<f64>, field: &PressureField, tr: &Transport) -> Result<ConcentrationField> {
    let (h, w) = eps.dims();
    let mut c = vec![0.0; h * w];
    for i in 0..h {
        c[i * w] = tr.c_in;
    }
    let mut active: Vec<bool> = eps
        .values()
        .iter()
        .map(|&e| tr.react_everywhere || filter_active(tr.c_in, e))
        .collect();
    let mut total_sweeps = 0;
    // Cells only ever leave the reactive set, so the loop terminates; a
    // two-sided update can cycle around the concentration threshold.
    loop {
        let rows = transport_rows(eps, field, tr, &active);
        let (residual, sweeps) = relax(&rows, &mut c, w, tr)?;
        total_sweeps += sweeps;
        let next: Vec<bool> = c
            .iter()
            .zip(eps.values())
            .zip(&active)
            .map(|((&cv, &e), &a)| a && (tr.react_everywhere || filter_active(cv, e)))
            .collect();
        if next == active {
            let values = c.iter().map(|&v| v.clamp(0.0, tr.c_in)).collect();
            return Ok(ConcentrationField {
                c: StateMap::new(Channel::C, h, w, values)?,
                active,
                residual,
                sweeps: total_sweeps,
            });
        }
        active = next;
    }
}

/// Residual of the discrete steady operator for an audited solution.
pub fn concentration_residual(eps: &StateMap<f64>, field: &PressureField, tr: &Transport, sol: &ConcentrationField) -> f64 {
    let rows = transport_rows(eps, field, tr, &sol.active);
    max_residual(&rows, sol.c.values(), eps.width(), tr.outlet)
}

/// Dissolve solid on filter-active cells: `eps' = min(1, eps + dt * r * C)`.
pub fn step_eps(eps: &StateMap<f64>, c: &StateMap<f64>, reaction_rate: f64, dt: f64) -> Result<StateMap<f64>> {
    eps.ensure_same_dims(c)?;
    let values = eps
        .values()
        .iter()
        .zip(c.values())
        .map(|(&e, &cv)| {
            if filter_active(cv, e) {
                (e + dt * reaction_rate * cv).min(1.0)
            } else {
                e
            }
        })
        .collect();
    StateMap::new(Channel::Eps, eps.height(), eps.width(), values)
}

/// Coefficients actually used for a configuration, derived from the
/// dimensionless targets and the mean pore speed of the initial geometry
/// unless overridden.
pub fn transport_for(cfg: &SynthConfig, mean_speed: f64) -> Transport {
    let diffusion = cfg
        .diffusion
        .unwrap_or(mean_speed * cfg.length_scale / cfg.peclet);
    let reaction_rate = cfg
        .reaction_rate
        .unwrap_or(cfg.kinetic * mean_speed / cfg.length_scale);
    Transport {
        c_in: cfg.c_in,
        outlet: cfg.outlet,
        ..Transport::new(diffusion, reaction_rate)
    }
}

fn mean_pore_speed(eps: &StateMap<f64>, ux: &StateMap<f64>, uy: &StateMap<f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for ((&e, &a), &b) in eps.values().iter().zip(ux.values()).zip(uy.values()) {
        if e > 0.5 {
            s += a.hypot(b);
            n += 1.0;
        }
    }
    if n > 0.0 { s / n } else { 0.0 }
}

/// Run the quasi-static loop for `cfg.steps` steps, recording `(C, eps, Ux, Uy)`.
pub fn generate_simulation(cfg: &SynthConfig) -> Result<Simulation<f64>> {
    cfg.validate()?;
    let mut eps = geometry_with(
        cfg.seed,
        cfg.height,
        cfg.width,
        cfg.grain_fraction,
        cfg.smoothing,
        cfg.buffer_columns,
    )?;
    let bc = PressureBc {
        inlet: cfg.pressure_drop,
        ..PressureBc::default()
    };
    let mut transport = None;
    let mut states = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let field = solve_pressure(&eps, cfg, bc)?;
        let (ux, uy) = velocity_from_pressure(&field);
        let tr = *transport.get_or_insert_with(|| transport_for(cfg, mean_pore_speed(&eps, &ux, &uy)));
        let conc = steady_concentration(&eps, &field, &tr)?;
        let next = step_eps(&eps, &conc.c, tr.reaction_rate, cfg.dt)?;
        states.push(vec![conc.c, eps, ux, uy]);
        eps = next;
    }
    let mut sim = Simulation::new(format!("synth_{:05}", cfg.seed), states);
    sim.dt_index = 1;
    Ok(sim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_simulation;

    fn open_box(h: usize, w: usize, value: f64) -> StateMap<f64> {
        StateMap::filled(Channel::Eps, h, w, value)
    }

    #[test]
    fn zero_grain_fraction_is_all_pore() {
        let eps = generate_geometry(3, 16, 16, 0.0).unwrap();
        assert!(eps.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn geometry_percolates_and_is_deterministic() {
        for seed in 0..10 {
            let a = generate_geometry(seed, 24, 24, 0.5).unwrap();
            assert!(percolates(&a));
            assert_eq!(a, generate_geometry(seed, 24, 24, 0.5).unwrap());
        }
        assert!(generate_geometry(1, 8, 8, 1.2).is_err());
    }

    #[test]
    fn percolation_detects_blocked_column() {
        let mut eps = open_box(6, 6, 1.0);
        for i in 0..6 {
            eps.set(i, 3, 0.0);
        }
        assert!(!percolates(&eps));
    }

    #[test]
    fn open_box_pressure_is_linear() {
        let cfg = SynthConfig::default();
        let (h, w) = (8, 12);
        let field = solve_pressure(&open_box(h, w, 1.0), &cfg, PressureBc::default()).unwrap();
        for i in 0..h {
            for j in 0..w {
                let exact = 1.0 - j as f64 / (w - 1) as f64;
                assert!((field.p(i, j) - exact).abs() < 1e-6);
            }
        }
        let (ux, uy) = velocity_from_pressure(&field);
        let expect = cfg.conductivity(1.0) / (w - 1) as f64;
        assert!(ux.values().iter().all(|&v| (v - expect).abs() < 1e-9));
        assert!(uy.values().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn uniform_pressure_gives_no_flow() {
        let cfg = SynthConfig::default();
        let bc = PressureBc { inlet: 0.3, outlet: 0.3, ..PressureBc::default() };
        let field = solve_pressure(&generate_geometry(4, 10, 10, 0.3).unwrap(), &cfg, bc);
        // zero right-hand side norm: the linear guess is already exact
        let field = field.unwrap();
        let (ux, uy) = velocity_from_pressure(&field);
        assert!(ux.max_abs() < 1e-12 && uy.max_abs() < 1e-12);
    }

    trait MaxAbs {
        fn max_abs(&self) -> f64;
    }
    impl MaxAbs for StateMap<f64> {
        fn max_abs(&self) -> f64 {
            self.values().iter().fold(0.0, |a, v| a.max(v.abs()))
        }
    }

    #[test]
    fn mirrored_geometry_gives_mirrored_pressure() {
        let cfg = SynthConfig::default();
        let base = generate_geometry(9, 10, 12, 0.4).unwrap();
        let h = base.height();
        let sym = StateMap::from_fn(Channel::Eps, h, 12, |i, j| base.get(i.min(h - 1 - i), j));
        let field = solve_pressure(&sym, &cfg, PressureBc::default()).unwrap();
        for i in 0..h {
            for j in 0..12 {
                assert!((field.p(i, j) - field.p(h - 1 - i, j)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn flux_divergence_vanishes_in_interior() {
        let cfg = SynthConfig::default();
        let eps = generate_geometry(2, 12, 12, 0.4).unwrap();
        let f = solve_pressure(&eps, &cfg, PressureBc::default()).unwrap();
        let w = 12;
        for i in 0..12 {
            for j in 1..w - 1 {
                let mut div = f.flux_x[i * (w - 1) + j] - f.flux_x[i * (w - 1) + j - 1];
                if i > 0 {
                    div -= f.flux_y[(i - 1) * w + j];
                }
                if i + 1 < 12 {
                    div += f.flux_y[i * w + j];
                }
                assert!(div.abs() < 1e-6, "({i},{j}) {div}");
            }
        }
    }

    #[test]
    fn cross_section_flux_is_conserved() {
        let cfg = SynthConfig::default();
        let eps = generate_geometry(5, 16, 16, 0.45).unwrap();
        let f = solve_pressure(&eps, &cfg, PressureBc::default()).unwrap();
        let (ux, _) = velocity_from_pressure(&f);
        let q0: f64 = (0..16).map(|i| ux.get(i, 0)).sum();
        for j in 0..16 {
            let q: f64 = (0..16).map(|i| ux.get(i, j)).sum();
            assert!((q - q0).abs() <= 1e-4 * q0.abs(), "column {j}: {q} vs {q0}");
        }
    }

    #[test]
    fn pure_diffusion_box_is_linear() {
        let cfg = SynthConfig::default();
        let eps = open_box(6, 11, 1.0);
        let bc = PressureBc { inlet: 0.0, outlet: 0.0, ..PressureBc::default() };
        let field = solve_pressure(&eps, &cfg, bc).unwrap();
        let tr = Transport {
            outlet: OutletBc::Fixed,
            ..Transport::new(1.0, 0.0)
        };
        let sol = steady_concentration(&eps, &field, &tr).unwrap();
        for i in 0..6 {
            for j in 0..11 {
                let exact = 1.0 - j as f64 / 10.0;
                assert!((sol.c.get(i, j) - exact).abs() < 1e-5, "({i},{j})");
            }
        }
    }

    #[test]
    fn strong_sink_kills_concentration_away_from_inlet() {
        let cfg = SynthConfig::default();
        let eps = open_box(6, 12, 0.5);
        let field = solve_pressure(&eps, &cfg, PressureBc::default()).unwrap();
        let tr = Transport {
            react_everywhere: true,
            ..Transport::new(0.1, 1e6)
        };
        let sol = steady_concentration(&eps, &field, &tr).unwrap();
        for i in 0..6 {
            for j in 2..12 {
                assert!(sol.c.get(i, j) < 1e-6);
            }
        }
    }

    #[test]
    fn concentration_residual_is_small_and_bounded() {
        let cfg = SynthConfig::default();
        let eps = generate_geometry(8, 12, 12, 0.4).unwrap();
        let field = solve_pressure(&eps, &cfg, PressureBc { inlet: 11.0, ..PressureBc::default() }).unwrap();
        let tr = Transport::new(0.5, 0.1);
        let sol = steady_concentration(&eps, &field, &tr).unwrap();
        assert!(concentration_residual(&eps, &field, &tr, &sol) < 1e-7);
        assert!(sol.c.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn eps_update_rules() {
        let eps = StateMap::from_fn(Channel::Eps, 4, 4, |i, j| [0.02, 0.5, 0.98, 1.0][(i + j) % 4]);
        let zero = StateMap::filled(Channel::C, 4, 4, 0.0);
        assert_eq!(step_eps(&eps, &zero, 0.3, 2.0).unwrap(), eps);

        let c = StateMap::from_fn(Channel::C, 4, 4, |i, j| 0.001 * (1 + i * 4 + j) as f64);
        let (r, dt) = (0.3, 0.5);
        let next = step_eps(&eps, &c, r, dt).unwrap();
        let mut active_c = 0.0;
        for k in 0..16 {
            assert!(next.values()[k] >= eps.values()[k]);
            if filter_active(c.values()[k], eps.values()[k]) {
                active_c += c.values()[k];
            }
        }
        let dissolved: f64 = next.values().iter().zip(eps.values()).map(|(a, b)| a - b).sum();
        assert!((dissolved - dt * r * active_c).abs() < 1e-10);
    }

    #[test]
    fn small_simulation_is_valid_monotone_and_deterministic() {
        let cfg = SynthConfig {
            height: 16,
            width: 16,
            steps: 8,
            seed: 3,
            ..SynthConfig::default()
        };
        let sim = generate_simulation(&cfg).unwrap();
        assert_eq!(sim.n_steps(), 8);
        assert!(validate_simulation(&sim).is_valid());
        let porosity: Vec<f64> = (0..8).map(|t| sim.map(t, Channel::Eps).unwrap().mean()).collect();
        assert!(porosity.windows(2).all(|p| p[1] >= p[0]));
        assert!(porosity[7] > porosity[0]);
        assert_eq!(sim, generate_simulation(&cfg).unwrap());
    }
}
