//! Native on-disk format and the manifest-driven import adapter.
//!
//! A simulation directory holds `manifest.json` plus one raw little-endian
//! `f32` file per time step (`step_00000.bin`, ...), each storing the channels
//! in manifest order as `[channel, row, col]`. An ensemble root holds
//! `ensemble.json` listing simulation directories and their split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Channel, Ensemble, Simulation, Split, StateMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ENSEMBLE_FILE: &str = "ensemble.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub id: String,
    pub dt_index: usize,
    pub height: usize,
    pub width: usize,
    pub n_steps: usize,
    pub channels: Vec<Channel>,
    pub dtype: String,
    pub step_files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEntry {
    pub id: String,
    pub dir: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleIndex {
    pub simulations: Vec<EnsembleEntry>,
}

pub fn step_file_name(step: usize) -> String {
    format!("step_{step:05}.bin")
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_simulation<T: Scalar>(sim: &Simulation<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (height, width) = sim.dims();
    let channels = sim.channels();
    let mut step_files = Vec::with_capacity(sim.n_steps());
    for (step, state) in sim.states().iter().enumerate() {
        let mut bytes = Vec::with_capacity(channels.len() * height * width * 4);
        for (map, &ch) in state.iter().zip(&channels) {
            if map.channel != ch || map.dims() != (height, width) {
                return Err(Error::Data(format!(
                    "{}: step {step} does not match the channel layout of step 0",
                    sim.id
                )));
            }
            for &v in map.values() {
                bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        let name = step_file_name(step);
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        step_files.push(name);
    }
    let manifest = SimManifest {
        id: sim.id.clone(),
        dt_index: sim.dt_index,
        height,
        width,
        n_steps: sim.n_steps(),
        channels,
        dtype: "f32".into(),
        step_files,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

fn decode(bytes: &[u8], dtype: &str, path: &Path) -> Result<Vec<f64>> {
    match dtype {
        "f32" => Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()),
        "f64" => Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()),
        other => Err(Error::Format(format!("{}: unsupported dtype {other}", path.display()))),
    }
}

fn read_step<T: Scalar>(
    path: &Path,
    dtype: &str,
    channels: &[Channel],
    height: usize,
    width: usize,
) -> Result<Vec<StateMap<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = decode(&bytes, dtype, path)?;
    let plane = height * width;
    if values.len() != plane * channels.len() {
        return Err(Error::Format(format!(
            "{}: expected {} values, found {}",
            path.display(),
            plane * channels.len(),
            values.len()
        )));
    }
    channels
        .iter()
        .enumerate()
        .map(|(k, &ch)| {
            let v = values[k * plane..(k + 1) * plane]
                .iter()
                .map(|&x| T::from_f64_lossy(x))
                .collect();
            StateMap::new(ch, height, width, v)
        })
        .collect()
}

pub fn read_simulation<T: Scalar>(dir: &Path) -> Result<Simulation<T>> {
    let manifest: SimManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.step_files.len() != manifest.n_steps {
        return Err(Error::Format(format!(
            "{}: manifest lists {} step files for {} steps",
            dir.display(),
            manifest.step_files.len(),
            manifest.n_steps
        )));
    }
    let states = manifest
        .step_files
        .iter()
        .map(|f| read_step(&dir.join(f), &manifest.dtype, &manifest.channels, manifest.height, manifest.width))
        .collect::<Result<Vec<_>>>()?;
    let mut sim = Simulation::new(manifest.id, states);
    sim.dt_index = manifest.dt_index;
    Ok(sim)
}

/// Write every simulation into `root/<id>/` and the index into `root/ensemble.json`.
pub fn write_ensemble<T: Scalar>(ens: &Ensemble<T>, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut index = EnsembleIndex::default();
    for sim in &ens.simulations {
        write_simulation(sim, &root.join(&sim.id))?;
        index.simulations.push(EnsembleEntry {
            id: sim.id.clone(),
            dir: sim.id.clone(),
            split: ens.split[&sim.id],
        });
    }
    write_json(&root.join(ENSEMBLE_FILE), &index)
}

pub fn read_ensemble_index(root: &Path) -> Result<EnsembleIndex> {
    read_json(&root.join(ENSEMBLE_FILE))
}

pub fn write_ensemble_index(root: &Path, index: &EnsembleIndex) -> Result<()> {
    write_json(&root.join(ENSEMBLE_FILE), index)
}

pub fn read_ensemble<T: Scalar>(root: &Path) -> Result<Ensemble<T>> {
    let index = read_ensemble_index(root)?;
    let mut sims = Vec::with_capacity(index.simulations.len());
    let mut split = BTreeMap::new();
    for e in &index.simulations {
        let sim: Simulation<T> = read_simulation(&root.join(&e.dir))?;
        if sim.id != e.id {
            return Err(Error::Data(format!("index id {} but manifest id {}", e.id, sim.id)));
        }
        split.insert(e.id.clone(), e.split);
        sims.push(sim);
    }
    Ensemble::with_split(sims, split)
}

/// Describes an external ensemble of raw array files.
///
/// Each step file holds `external_channels.len()` planes of
/// `grid[0] × grid[1]` values in `dtype`, little-endian. `channel_map`
/// renames external channel names to `C`, `eps`, `Ux`, `Uy`; unmapped
/// channels are dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportManifest {
    pub grid: [usize; 2],
    pub dtype: String,
    pub external_channels: Vec<String>,
    pub channel_map: BTreeMap<String, String>,
    pub simulations: Vec<ImportSimulation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportSimulation {
    pub id: String,
    /// Paths relative to the import manifest.
    pub steps: Vec<PathBuf>,
}

/// Load an external ensemble into canonical channel order `(C, eps, Ux, Uy)`.
pub fn import_ensemble<T: Scalar>(manifest_path: &Path) -> Result<Ensemble<T>> {
    let m: ImportManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let [height, width] = m.grid;
    let mut positions = Vec::with_capacity(4);
    for target in Channel::PHYSICAL {
        let ext = m
            .channel_map
            .iter()
            .find(|(_, v)| Channel::parse(v) == Some(target))
            .map(|(k, _)| k)
            .ok_or_else(|| Error::Format(format!("channel_map has no source for {target}")))?;
        let pos = m
            .external_channels
            .iter()
            .position(|c| c == ext)
            .ok_or_else(|| Error::Format(format!("mapped channel {ext} not in external_channels")))?;
        positions.push((target, pos));
    }
    let n_ext = m.external_channels.len();
    let placeholder: Vec<Channel> = (0..n_ext).map(|_| Channel::C).collect();
    let mut sims = Vec::with_capacity(m.simulations.len());
    for s in &m.simulations {
        let mut states = Vec::with_capacity(s.steps.len());
        for p in &s.steps {
            let raw: Vec<StateMap<T>> = read_step(&base.join(p), &m.dtype, &placeholder, height, width)?;
            states.push(
                positions
                    .iter()
                    .map(|&(ch, pos)| raw[pos].clone().with_channel(ch))
                    .collect(),
            );
        }
        sims.push(Simulation::new(s.id.clone(), states));
    }
    Ensemble::new(sims)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Simulation<f64> {
        let states = (0..3)
            .map(|t| {
                Channel::PHYSICAL
                    .iter()
                    .map(|&c| StateMap::from_fn(c, 4, 5, |r, k| (t + r * 5 + k) as f64 * 0.01))
                    .collect()
            })
            .collect();
        Simulation::new("sim_a", states)
    }

    #[test]
    fn simulation_round_trip_through_native_format() {
        let dir = tempfile::tempdir().unwrap();
        let sim = sample();
        write_simulation(&sim, dir.path()).unwrap();
        assert!(dir.path().join("step_00002.bin").exists());
        let back: Simulation<f64> = read_simulation(dir.path()).unwrap();
        // f32 storage
        assert_eq!(back.n_steps(), 3);
        for (a, b) in back.states().iter().flatten().zip(sim.states().iter().flatten()) {
            assert_eq!(a.channel, b.channel);
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn ensemble_index_keeps_split() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = sample();
        b.id = "sim_b".into();
        let ens = crate::data::split_ensemble(Ensemble::new(vec![sample(), b]).unwrap(), 1, 4).unwrap();
        write_ensemble(&ens, dir.path()).unwrap();
        let back: Ensemble<f32> = read_ensemble(dir.path()).unwrap();
        assert_eq!(back.split, ens.split);
    }

    #[test]
    fn import_maps_external_names() {
        let dir = tempfile::tempdir().unwrap();
        // external order: vy, porosity, conc, vx, pressure
        let plane = 2 * 3;
        let mut bytes = Vec::new();
        for ch in 0..5 {
            for k in 0..plane {
                bytes.extend_from_slice(&((ch * 100 + k) as f32).to_le_bytes());
            }
        }
        fs::write(dir.path().join("s0.raw"), &bytes).unwrap();
        let manifest = ImportManifest {
            grid: [2, 3],
            dtype: "f32".into(),
            external_channels: ["vy", "porosity", "conc", "vx", "pressure"].map(String::from).to_vec(),
            channel_map: [("conc", "C"), ("porosity", "eps"), ("vx", "Ux"), ("vy", "Uy")]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            simulations: vec![ImportSimulation {
                id: "ext".into(),
                steps: vec!["s0.raw".into()],
            }],
        };
        let path = dir.path().join("import.json");
        write_json(&path, &manifest).unwrap();
        let ens: Ensemble<f64> = import_ensemble(&path).unwrap();
        let sim = &ens.simulations[0];
        assert_eq!(sim.channels(), Channel::PHYSICAL.to_vec());
        assert_eq!(sim.map(0, Channel::C).unwrap().get(0, 0), 200.0);
        assert_eq!(sim.map(0, Channel::Eps).unwrap().get(0, 1), 101.0);
        assert_eq!(sim.map(0, Channel::Uy).unwrap().get(1, 2), 5.0);
    }
}
