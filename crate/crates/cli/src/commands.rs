//! Subcommand implementations. Each returns a short human-readable summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use porestack::bulk::{bulk_series, BulkSeries};
use porestack::data::{crop_borders, split_ids, validate_simulation, Channel, Ensemble, Simulation, Split};
use porestack::features::{fit_norm_stats, NormStats};
use porestack::io::{import_ensemble, read_ensemble, write_ensemble, ENSEMBLE_FILE};
use porestack::metrics::{curves, Metric, MetricCurve};
use porestack::models::{Checkpoint, Family, TrainingLog};
use porestack::rollout::{rollout, RolloutResult, StackPredictor, PROVENANCE_FILE};
use porestack::stacking::{
    build_level_dataset, dataset_mse, prediction_mse, train_correction_level, train_level0, SampleSet, StackedModel,
    STACK_MANIFEST,
};
use porestack::synth::generate_simulation;
use porestack::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, Dtype};
use crate::error::{Category, CliError, Result};
use crate::svg::{line_chart, Series};
use crate::workspace::{claim, require, write_output, Workspace};

pub const SOLVER_TIMING_FILE: &str = "solver_timing.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CURVES_FILE: &str = "curves.json";

/// Wall-clock seconds the synthetic solver spent per generated trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverTiming {
    pub seconds: Vec<f64>,
}

/// Per-(family, level) rollout timing, the analog of a forward-time table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub family: Family,
    pub level: usize,
    pub parameters: usize,
    pub trajectories: usize,
    pub forwards: usize,
    pub mean_forward_ms: f64,
    pub std_forward_ms: f64,
    pub mean_rollout_s: f64,
    pub total_rollout_s: f64,
}

fn to_json<S: Serialize>(v: &S) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(Category::InvalidData, format!("{}: {e}", path.display())))
}

fn split_seed(ws: &Workspace) -> u64 {
    derive_seed(ws.config.seed, "split")
}

fn write_new_ensemble(ws: &Workspace, sims: Vec<Simulation<f64>>) -> Result<Ensemble<f64>> {
    let ids: Vec<&str> = sims.iter().map(|s| s.id.as_str()).collect();
    let split = split_ids(&ids, ws.config.data.train_count, split_seed(ws))?;
    let ens = Ensemble::with_split(sims, split)?;
    write_ensemble(&ens, &ws.data_dir())?;
    Ok(ens)
}

fn describe_split(ens: &Ensemble<f64>) -> String {
    format!(
        "{} train / {} validation",
        ens.part(Split::Train).len(),
        ens.part(Split::Validation).len()
    )
}

pub fn cmd_generate(ws: &Workspace, force: bool) -> Result<String> {
    let cfg = &ws.config;
    if cfg.data.simulations <= cfg.data.train_count {
        return Err(CliError::config("data.simulations must exceed data.train_count"));
    }
    let dir = ws.data_dir();
    claim(&dir, force)?;
    let mut sims = Vec::with_capacity(cfg.data.simulations);
    let mut seconds = Vec::with_capacity(cfg.data.simulations);
    for i in 0..cfg.data.simulations {
        let t = Instant::now();
        let mut sim = generate_simulation(&cfg.synth_for(i))?;
        seconds.push(t.elapsed().as_secs_f64());
        sim.id = format!("sim_{i:03}");
        sims.push(sim);
    }
    let ens = write_new_ensemble(ws, sims)?;
    write_output(&ws.root.join(SOLVER_TIMING_FILE), &to_json(&SolverTiming { seconds }), true)?;
    Ok(format!(
        "generated {} simulations of {}x{}x{} in {} ({})",
        cfg.data.simulations,
        cfg.synth.height,
        cfg.synth.width,
        cfg.synth.steps,
        dir.display(),
        describe_split(&ens)
    ))
}

pub fn cmd_import(ws: &Workspace, manifest: &Path, force: bool) -> Result<String> {
    require(manifest, "import manifest", "import --manifest <file>")?;
    let dir = ws.data_dir();
    claim(&dir, force)?;
    let ens: Ensemble<f64> = import_ensemble(manifest)?;
    let mut sims = ens.simulations;
    if let Some([h, w]) = ws.config.data.crop {
        sims = sims.iter().map(|s| crop_borders(s, h, w)).collect::<porestack::Result<_>>()?;
    }
    for s in &sims {
        let report = validate_simulation(s);
        if !report.is_valid() {
            return Err(CliError::new(
                Category::InvalidData,
                format!("{}: {}", s.id, report.violations[0]),
            ));
        }
    }
    let n = sims.len();
    let ens = write_new_ensemble(ws, sims)?;
    Ok(format!("imported {n} simulations into {} ({})", dir.display(), describe_split(&ens)))
}

fn load_ensemble(ws: &Workspace) -> Result<Ensemble<f64>> {
    let dir = ws.data_dir();
    require(&dir.join(ENSEMBLE_FILE), "ensemble", "generate` or `porestack import")?;
    Ok(read_ensemble(&dir)?)
}

fn load_stats(ws: &Workspace) -> Result<NormStats> {
    let p = ws.stats_path();
    require(&p, "normalization statistics", "preprocess")?;
    read_json(&p)
}

pub fn cmd_preprocess(ws: &Workspace, force: bool) -> Result<String> {
    let ens = load_ensemble(ws)?;
    for s in &ens.simulations {
        let report = validate_simulation(s);
        if !report.is_valid() {
            return Err(CliError::new(
                Category::InvalidData,
                format!("{}: {}", s.id, report.violations[0]),
            ));
        }
    }
    let stats = fit_norm_stats(&ens.part(Split::Train))?;
    write_output(&ws.stats_path(), &to_json(&stats), force)?;
    Ok(format!("statistics {} fitted on {} training simulations", stats.hash(), ens.part(Split::Train).len()))
}

fn sample_sets<T: Scalar>(ws: &Workspace, ens: &Ensemble<f64>, stats: &NormStats) -> Result<(SampleSet<T>, Option<SampleSet<T>>)> {
    let cfg = &ws.config;
    let fs = cfg.feature_set()?;
    let train = SampleSet::from_simulations(&ens.part(Split::Train), stats, fs, cfg.m, cfg.n)?;
    let val_sims = ens.part(Split::Validation);
    let val = if val_sims.is_empty() {
        None
    } else {
        Some(SampleSet::from_simulations(&val_sims, stats, fs, cfg.m, cfg.n)?)
    };
    Ok((train, val))
}

fn log_csv(log: &TrainingLog) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
    for r in &log.epochs {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{val},{}", r.epoch, r.train_loss, r.seconds);
    }
    out
}

fn log_file(level: usize) -> String {
    format!("level_{level}_log.csv")
}

fn describe_level(family: Family, ck: &Checkpoint) -> String {
    let log = &ck.training_log;
    let first = log.epochs.first().map(|r| r.train_loss).unwrap_or(f64::NAN);
    let last = log.epochs.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    format!(
        "{family} level {}: {} epochs, train loss {first:.4e} -> {last:.4e}, kept epoch {}",
        ck.level,
        log.epochs.len(),
        log.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into())
    )
}

fn train_family<T: Scalar>(
    ws: &Workspace,
    family: Family,
    train: &SampleSet<T>,
    val: Option<&SampleSet<T>>,
    stats: &NormStats,
) -> Result<String> {
    let spec = ws.config.spec(family)?;
    let tc = ws.config.train_config_for(&format!("train/{family}/0"));
    let ck = train_level0(&spec, train, val, &tc, &stats.hash())?;
    let dir = ws.model_dir(family);
    StackedModel::new(ck.clone())?.save(&dir)?;
    write_output(&dir.join(log_file(0)), log_csv(&ck.training_log).as_bytes(), true)?;
    Ok(describe_level(family, &ck))
}

pub fn cmd_train(ws: &Workspace, families: &[Family], force: bool) -> Result<String> {
    let ens = load_ensemble(ws)?;
    let stats = load_stats(ws)?;
    for &f in families {
        ws.config.spec(f)?.check_grid(ens.simulations[0].dims().0, ens.simulations[0].dims().1)?;
        claim(&ws.model_dir(f), force)?;
    }
    let mut lines = Vec::new();
    match ws.config.dtype {
        Dtype::F32 => {
            let (train, val) = sample_sets::<f32>(ws, &ens, &stats)?;
            for &f in families {
                lines.push(train_family(ws, f, &train, val.as_ref(), &stats)?);
            }
        }
        Dtype::F64 => {
            let (train, val) = sample_sets::<f64>(ws, &ens, &stats)?;
            for &f in families {
                lines.push(train_family(ws, f, &train, val.as_ref(), &stats)?);
            }
        }
    }
    Ok(lines.join("\n"))
}

fn load_model(ws: &Workspace, family: Family, stats: &NormStats) -> Result<StackedModel> {
    let dir = ws.model_dir(family);
    require(&dir.join(STACK_MANIFEST), &format!("{family} model"), "train")?;
    let model = StackedModel::load(&dir)?;
    if model.norm_stats_hash() != stats.hash() {
        return Err(CliError::new(
            Category::Mismatch,
            format!(
                "{family} model was trained with statistics {} but {} holds {}; retrain or restore the statistics",
                model.norm_stats_hash(),
                ws.stats_path().display(),
                stats.hash()
            ),
        ));
    }
    Ok(model)
}

fn stack_level<T: Scalar>(
    ws: &Workspace,
    family: Family,
    model: &mut StackedModel,
    train0: &SampleSet<T>,
    val0: Option<&SampleSet<T>>,
) -> Result<String> {
    let k = model.checkpoints.len();
    let frozen: Vec<String> = model.checkpoints.iter().map(|c| c.content_hash()).collect();
    let prefix = model.stack::<T>(k)?;
    let train = build_level_dataset(&prefix, train0)?;
    let val = val0.map(|v| build_level_dataset(&prefix, v)).transpose()?;
    let tc = ws.config.train_config_for(&format!("train/{family}/{k}"));
    let base_spec = model.checkpoints[0].spec.clone();
    let ck = train_correction_level(k, &base_spec, &train, val.as_ref(), &tc, model.norm_stats_hash())?;
    let before = dataset_mse(&train)?;
    let after = prediction_mse(&ck.to_network::<T>()?, &train)?;
    model.push(ck.clone())?;
    let dir = ws.model_dir(family);
    model.save(&dir)?;
    write_output(&dir.join(log_file(k)), log_csv(&ck.training_log).as_bytes(), true)?;
    let reloaded = StackedModel::load(&dir)?;
    let now: Vec<String> = reloaded.checkpoints[..k].iter().map(|c| c.content_hash()).collect();
    if now != frozen {
        return Err(CliError::new(Category::Internal, format!("{family}: frozen levels changed while adding level {k}")));
    }
    Ok(format!(
        "{}; training-split MSE {before:.4e} -> {after:.4e}",
        describe_level(family, &ck)
    ))
}

/// Add correction levels until the stack has `levels` of them.
pub fn cmd_stack(ws: &Workspace, families: &[Family], levels: usize, force: bool) -> Result<String> {
    let ens = load_ensemble(ws)?;
    let stats = load_stats(ws)?;
    let mut lines = Vec::new();
    for &family in families {
        let mut model = load_model(ws, family, &stats)?;
        if model.corrections() >= levels {
            if !force {
                lines.push(format!("{family}: already has {} correction levels", model.corrections()));
                continue;
            }
            model.checkpoints.truncate(levels.max(1));
            let dir = ws.model_dir(family);
            for k in model.checkpoints.len().. {
                let p = dir.join(StackedModel::level_file(k));
                if !p.exists() {
                    break;
                }
                fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
                let _ = fs::remove_file(dir.join(log_file(k)));
            }
            model.save(&dir)?;
        }
        match ws.config.dtype {
            Dtype::F32 => {
                let (train, val) = sample_sets::<f32>(ws, &ens, &stats)?;
                while model.corrections() < levels {
                    lines.push(stack_level(ws, family, &mut model, &train, val.as_ref())?);
                }
            }
            Dtype::F64 => {
                let (train, val) = sample_sets::<f64>(ws, &ens, &stats)?;
                while model.corrections() < levels {
                    lines.push(stack_level(ws, family, &mut model, &train, val.as_ref())?);
                }
            }
        }
    }
    Ok(lines.join("\n"))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

fn rollout_level<T: Scalar>(
    ws: &Workspace,
    model: &StackedModel,
    level: usize,
    sims: &[&Simulation<f64>],
    stats: &NormStats,
) -> Result<TimingReport> {
    let family = model.checkpoints[0].spec.family;
    let stack = model.stack::<T>(level + 1)?;
    let predictor = StackPredictor::new(&stack, stats, ws.config.feature_set()?, model.norm_stats_hash())?;
    let dir = ws.results_dir(family, level);
    let mut forward_ms = Vec::new();
    let mut rollout_s = Vec::new();
    for sim in sims {
        let r = rollout(&predictor, sim)?;
        let per = r.forwards_per_iteration.max(1) as f64;
        forward_ms.extend(r.iteration_seconds.iter().map(|s| s * 1e3 / per));
        rollout_s.push(r.total_seconds());
        r.save(&dir.join(&r.sim_id))?;
    }
    let parameters = model.checkpoints[..=level]
        .iter()
        .map(|c| c.to_network::<T>().map(|n| n.param_count()))
        .sum::<porestack::Result<usize>>()?;
    let (mean_forward_ms, std_forward_ms) = mean_std(&forward_ms);
    let report = TimingReport {
        family,
        level,
        parameters,
        trajectories: sims.len(),
        forwards: forward_ms.len(),
        mean_forward_ms,
        std_forward_ms,
        mean_rollout_s: mean_std(&rollout_s).0,
        total_rollout_s: rollout_s.iter().sum(),
    };
    write_output(&dir.join(TIMING_FILE), &to_json(&report), true)?;
    Ok(report)
}

fn solver_seconds(ws: &Workspace) -> Option<f64> {
    let t: SolverTiming = read_json(&ws.root.join(SOLVER_TIMING_FILE)).ok()?;
    let (mean, _) = mean_std(&t.seconds);
    mean.is_finite().then_some(mean)
}

/// Markdown table of forward and rollout times with a speedup note.
pub fn timing_table(reports: &[TimingReport], solver_s: Option<f64>) -> String {
    let mut out = String::from(
        "| Model | Level | Parameters | Forward Time (ms) | Rollout Time (s) | Trajectories |\n\
         |---|---|---|---|---|---|\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.3} ± {:.3} | {:.4} | {} |",
            r.family, r.level, r.parameters, r.mean_forward_ms, r.std_forward_ms, r.mean_rollout_s, r.trajectories
        );
    }
    out.push('\n');
    out.push_str(
        "Forward Time is the mean wall-clock time of one network forward pass; Rollout Time is the mean wall-clock \
         time of one full trajectory rollout.\n\n",
    );
    out.push_str(
        "Context: surrogates of this kind are reported to run 10^3 to 10^4 times faster than the pore-scale \
         numerical solver they replace.",
    );
    match solver_s {
        Some(s) => {
            let _ = write!(out, " Here the synthetic solver took {s:.3} s per trajectory");
            for r in reports {
                if r.mean_rollout_s > 0.0 {
                    let _ = write!(out, "; {} L{}: {:.1}x", r.family, r.level, s / r.mean_rollout_s);
                }
            }
            out.push_str(".\n");
        }
        None => out.push_str(" No solver timing is available for this dataset.\n"),
    }
    out
}

fn rollout_sims<'a>(ens: &'a Ensemble<f64>, all: bool) -> Vec<&'a Simulation<f64>> {
    if all {
        ens.simulations.iter().collect()
    } else {
        ens.part(Split::Validation)
    }
}

/// Roll out levels `0..=levels` of each family and record timings.
pub fn cmd_rollout(ws: &Workspace, families: &[Family], levels: usize, all: bool, force: bool) -> Result<String> {
    let ens = load_ensemble(ws)?;
    let stats = load_stats(ws)?;
    let sims = rollout_sims(&ens, all);
    if sims.is_empty() {
        return Err(CliError::new(Category::MissingInput, "no simulations selected for rollout"));
    }
    let mut reports = Vec::new();
    for &family in families {
        let model = load_model(ws, family, &stats)?;
        if model.corrections() < levels {
            return Err(CliError::new(
                Category::MissingInput,
                format!(
                    "{family} has {} correction levels, {levels} requested (run `porestack stack` first)",
                    model.corrections()
                ),
            ));
        }
        for level in 0..=levels {
            claim(&ws.results_dir(family, level), force)?;
            reports.push(match ws.config.dtype {
                Dtype::F32 => rollout_level::<f32>(ws, &model, level, &sims, &stats)?,
                Dtype::F64 => rollout_level::<f64>(ws, &model, level, &sims, &stats)?,
            });
        }
    }
    let table = timing_table(&reports, solver_seconds(ws));
    write_output(&ws.root.join("results").join("timing.md"), table.as_bytes(), true)?;
    Ok(table)
}

/// `(family, level)` pairs with rollout results on disk.
fn result_levels(ws: &Workspace, families: &[Family]) -> Vec<(Family, usize)> {
    let mut out = Vec::new();
    for &f in families {
        for level in 0.. {
            if !ws.results_dir(f, level).join(TIMING_FILE).exists() {
                break;
            }
            out.push((f, level));
        }
    }
    out
}

fn load_results(dir: &Path) -> Result<Vec<RolloutResult>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(PROVENANCE_FILE).exists())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| RolloutResult::load(d).map_err(CliError::from)).collect()
}

fn curve_series(name: &str, c: &MetricCurve) -> Series {
    Series {
        name: name.to_string(),
        points: c.steps.iter().zip(&c.values).map(|(&s, &v)| (s as f64, v)).collect(),
    }
}

fn metric_label(m: Metric) -> &'static str {
    match m {
        Metric::Pcc => "PCC",
        Metric::Mse => "MSE",
    }
}

pub fn cmd_eval(ws: &Workspace, families: &[Family], force: bool) -> Result<String> {
    let ens = load_ensemble(ws)?;
    let pairs = result_levels(ws, families);
    if pairs.is_empty() {
        return Err(CliError::new(Category::MissingInput, "no rollout results found (run `porestack rollout` first)"));
    }
    let mut all: BTreeMap<(Family, usize), Vec<MetricCurve>> = BTreeMap::new();
    let mut lines = Vec::new();
    for &(family, level) in &pairs {
        let results = load_results(&ws.results_dir(family, level))?;
        let truths = results
            .iter()
            .map(|r| {
                ens.get(&r.sim_id)
                    .ok_or_else(|| CliError::new(Category::Mismatch, format!("result {} has no simulation", r.sim_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let cs = curves(&results, &truths, &Channel::PHYSICAL)?;
        let dir = ws.eval_dir(family, level);
        write_output(&dir.join(CURVES_FILE), &to_json(&cs), force)?;
        let mut csv = String::from("channel,metric,step,value,count\n");
        for c in &cs {
            for ((s, v), n) in c.steps.iter().zip(&c.values).zip(&c.counts) {
                let v = v.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(csv, "{},{},{s},{v},{n}", c.channel, c.metric.name());
            }
        }
        write_output(&dir.join("curves.csv"), csv.as_bytes(), force)?;
        for c in &cs {
            let title = format!("{family} L{level}: {} of {}", metric_label(c.metric), c.channel);
            let svg = line_chart(&title, "time step", metric_label(c.metric), &[curve_series(&format!("{family} L{level}"), c)]);
            write_output(&dir.join(format!("{}_{}.svg", c.metric.name(), c.channel)), svg.as_bytes(), force)?;
        }
        let first = cs
            .iter()
            .find(|c| c.channel == Channel::Eps && c.metric == Metric::Pcc)
            .and_then(|c| c.values.first().copied().flatten());
        lines.push(format!(
            "{family} L{level}: {} trajectories, eps PCC at first predicted step {}",
            results.len(),
            first.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into())
        ));
        all.insert((family, level), cs);
    }
    for ch in Channel::PHYSICAL {
        for metric in [Metric::Pcc, Metric::Mse] {
            let series: Vec<Series> = all
                .iter()
                .filter_map(|((f, l), cs)| {
                    cs.iter()
                        .find(|c| c.channel == ch && c.metric == metric)
                        .map(|c| curve_series(&format!("{f} L{l}"), c))
                })
                .collect();
            let svg = line_chart(&format!("{} of {ch}", metric_label(metric)), "time step", metric_label(metric), &series);
            write_output(&ws.root.join("eval").join(format!("{}_{ch}.svg", metric.name())), svg.as_bytes(), force)?;
        }
    }
    Ok(lines.join("\n"))
}

/// Bulk series of one simulation plus the requested steps that could not be sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BulkRecord {
    pub sim_id: String,
    pub series: Vec<BulkSeries>,
    pub missing_steps: Vec<usize>,
}

pub fn cmd_bulk(ws: &Workspace, families: &[Family], force: bool) -> Result<String> {
    let ens = load_ensemble(ws)?;
    let pairs = result_levels(ws, families);
    if pairs.is_empty() {
        return Err(CliError::new(Category::MissingInput, "no rollout results found (run `porestack rollout` first)"));
    }
    let mut variants: BTreeMap<String, BTreeMap<String, RolloutResult>> = BTreeMap::new();
    for &(family, level) in &pairs {
        for r in load_results(&ws.results_dir(family, level))? {
            variants.entry(r.sim_id.clone()).or_default().insert(format!("{family}_L{level}"), r);
        }
    }
    let mut lines = Vec::new();
    for (sim_id, vs) in &variants {
        let truth = ens
            .get(sim_id)
            .ok_or_else(|| CliError::new(Category::Mismatch, format!("result {sim_id} has no simulation")))?;
        let available = vs.values().map(|r| r.n_steps()).min().unwrap_or(0).min(truth.n_steps());
        let (steps, missing): (Vec<usize>, Vec<usize>) = ws.config.bulk.steps.iter().partition(|&&s| s < available);
        let series = bulk_series(truth, vs, &steps, &ws.config.synth)?;
        let dir = ws.bulk_dir().join(sim_id);
        for s in &series {
            let name = s.property.name();
            write_output(&dir.join(format!("{name}.csv")), s.to_csv().as_bytes(), force)?;
            let mut chart = vec![Series {
                name: "truth".into(),
                points: s.steps.iter().zip(&s.truth).map(|(&x, &y)| (x as f64, Some(y))).collect(),
            }];
            chart.extend(s.variants.iter().map(|(n, v)| Series {
                name: n.clone(),
                points: s.steps.iter().zip(v).map(|(&x, &y)| (x as f64, Some(y))).collect(),
            }));
            let svg = line_chart(&format!("{sim_id}: {name}"), "time step", name, &chart);
            write_output(&dir.join(format!("{name}.svg")), svg.as_bytes(), force)?;
        }
        let record = BulkRecord {
            sim_id: sim_id.clone(),
            series: series.to_vec(),
            missing_steps: missing.clone(),
        };
        write_output(&dir.join("bulk.json"), &to_json(&record), force)?;
        lines.push(format!(
            "{sim_id}: {} steps sampled, {} requested steps beyond the trajectory",
            steps.len(),
            missing.len()
        ));
    }
    Ok(lines.join("\n"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Collate everything on disk into `report.md`. Output depends only on the
/// files read, so regenerating without changes is a no-op.
pub fn cmd_report(ws: &Workspace, force: bool) -> Result<String> {
    let cfg = &ws.config;
    let mut out = String::from("# Experiment report\n\n");
    let _ = writeln!(
        out,
        "seed {}, m = {}, n = {}, correction levels {}, {} input features, {} training\n",
        cfg.seed,
        cfg.m,
        cfg.n,
        cfg.levels,
        cfg.features,
        match cfg.dtype {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    );

    out.push_str("## Trained models\n\n| Model | Level | Epochs | First train loss | Final train loss | Kept epoch | Best val loss | Hash |\n|---|---|---|---|---|---|---|---|\n");
    let mut trained = 0;
    for &family in &Family::ALL {
        let dir = ws.model_dir(family);
        if !dir.join(STACK_MANIFEST).exists() {
            continue;
        }
        let model = StackedModel::load(&dir)?;
        for ck in &model.checkpoints {
            trained += 1;
            let log = &ck.training_log;
            let best_val = log
                .epochs
                .iter()
                .filter_map(|r| r.val_loss)
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))));
            let _ = writeln!(
                out,
                "| {family} | {} | {} | {} | {} | {} | {} | {} |",
                ck.level,
                log.epochs.len(),
                fmt_opt(log.epochs.first().map(|r| r.train_loss)),
                fmt_opt(log.epochs.last().map(|r| r.train_loss)),
                log.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
                fmt_opt(best_val),
                &ck.content_hash()[..12]
            );
        }
    }
    if trained == 0 {
        out.push_str("\nNo trained models found.\n");
    }

    let pairs = result_levels(ws, &Family::ALL);
    out.push_str("\n## Timing\n\n");
    if pairs.is_empty() {
        out.push_str("No rollout results found.\n");
    } else {
        let reports = pairs
            .iter()
            .map(|&(f, l)| read_json::<TimingReport>(&ws.results_dir(f, l).join(TIMING_FILE)))
            .collect::<Result<Vec<_>>>()?;
        out.push_str(&timing_table(&reports, solver_seconds(ws)));
    }

    out.push_str("\n## Metrics\n\n");
    let mut evaluated = 0;
    for &(f, l) in &pairs {
        let p = ws.eval_dir(f, l).join(CURVES_FILE);
        if !p.exists() {
            let _ = writeln!(out, "- {f} L{l}: not evaluated (run `porestack eval`)");
            continue;
        }
        if evaluated == 0 {
            out.push_str("| Model | Level | Channel | Metric | First predicted step | Last step | Mean |\n|---|---|---|---|---|---|---|\n");
        }
        evaluated += 1;
        let cs: Vec<MetricCurve> = read_json(&p)?;
        for c in &cs {
            let defined: Vec<f64> = c.values.iter().flatten().copied().collect();
            let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            let _ = writeln!(
                out,
                "| {f} | {l} | {} | {} | {} | {} | {} |",
                c.channel,
                metric_label(c.metric),
                fmt_opt(c.values.first().copied().flatten()),
                fmt_opt(c.values.last().copied().flatten()),
                fmt_opt(mean)
            );
        }
    }
    if pairs.is_empty() {
        out.push_str("No evaluation results found.\n");
    }

    out.push_str("\n## Bulk properties\n\n");
    let bulk_dir = ws.bulk_dir();
    let mut sims: Vec<PathBuf> = fs::read_dir(&bulk_dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path().join("bulk.json"))).filter(|p| p.exists()).collect())
        .unwrap_or_default();
    sims.sort();
    if sims.is_empty() {
        out.push_str("No bulk series found.\n");
    }
    for p in &sims {
        let rec: BulkRecord = read_json(p)?;
        let _ = writeln!(out, "### {}\n", rec.sim_id);
        for s in &rec.series {
            let last = s.steps.len().checked_sub(1);
            let _ = write!(out, "- {}: ", s.property.name());
            match last {
                Some(i) => {
                    let _ = write!(out, "at step {} truth {:.4e}", s.steps[i], s.truth[i]);
                    for (name, v) in &s.variants {
                        let _ = write!(out, ", {name} {:.4e}", v[i]);
                    }
                    out.push('\n');
                }
                None => out.push_str("no steps sampled\n"),
            }
            for (who, step) in &s.flagged {
                let _ = writeln!(out, "  - flagged: {who} does not percolate at step {step}");
            }
        }
        if !rec.missing_steps.is_empty() {
            let _ = writeln!(
                out,
                "- gap: requested steps {:?} are absent from the trajectory",
                rec.missing_steps
            );
        }
        out.push('\n');
    }
    write_output(&ws.report_path(), out.as_bytes(), force)?;
    Ok(format!("wrote {}", ws.report_path().display()))
}
