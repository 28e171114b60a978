//! Level-0 training, correction levels and stacked inference.
//!
//! Level 0 maps normalized input windows to normalized targets. Level `k > 0`
//! is the same architecture with four input channels, trained on the frozen
//! prefix's predictions for the training windows against the same targets.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{Simulation, Window};
use crate::error::{Error, Result};
use crate::features::{engineer_simulation, make_windows, normalize_inputs, normalize_outputs, FeatureSet, NormStats};
use crate::io::{read_json, write_json};
use crate::models::{Checkpoint, EpochRecord, Family, ModelSpec, Network, SeqModel, TrainingLog, OUT_CHANNELS};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            max_epochs: 100,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument("batch_size and max_epochs must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::InvalidArgument(format!("invalid optimizer settings {:?}", self.adam)));
        }
        Ok(())
    }
}

/// Input/target pairs in normalized units.
///
/// `level` is the number of stack levels that produced the inputs: 0 for
/// ground-truth windows, `k` for predictions of a `k`-level prefix.
#[derive(Clone, Debug)]
pub struct SampleSet<T> {
    pub windows: Vec<Window>,
    /// `[m, C, H, W]` per window.
    pub inputs: Vec<Tensor<T>>,
    /// `[n, 4, H, W]` per window.
    pub targets: Vec<Tensor<T>>,
    pub level: usize,
}

/// Pairs produced by a frozen stack prefix.
pub type LevelDataset<T> = SampleSet<T>;

fn slice_steps<T: Scalar>(t: &Tensor<T>, range: std::ops::Range<usize>) -> Tensor<T> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = range.len();
    Tensor::from_vec(&shape, t.data()[range.start * per..range.end * per].to_vec()).expect("in bounds")
}

impl<T: Scalar> SampleSet<T> {
    /// Every stride-1 window of every simulation.
    pub fn from_simulations(
        sims: &[&Simulation<f64>],
        stats: &NormStats,
        features: FeatureSet,
        m: usize,
        n: usize,
    ) -> Result<Self> {
        let mut set = Self {
            windows: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
            level: 0,
        };
        for sim in sims {
            let physical = sim.physical()?;
            let engineered = engineer_simulation(&physical)?;
            let x = normalize_inputs(engineered.states(), features.channels(), stats)?.cast::<T>();
            let y = normalize_outputs(physical.states(), stats)?.cast::<T>();
            for w in make_windows(sim, m, n, 1)? {
                set.inputs.push(slice_steps(&x, w.input.clone()));
                set.targets.push(slice_steps(&y, w.target.clone()));
                set.windows.push(w);
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Stacked `([B, m, C, H, W], [B, n, 4, H, W])` for the given indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let xs: Vec<Tensor<T>> = idx.iter().map(|&i| self.inputs[i].clone()).collect();
        let ys: Vec<Tensor<T>> = idx.iter().map(|&i| self.targets[i].clone()).collect();
        Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
    }
}

/// Per-sample weight of a batch loss so that epoch losses are per-sample means.
fn batch_weight(family: Family, batch: usize) -> f64 {
    match family {
        Family::Tau => 1.0,
        _ => batch as f64,
    }
}

/// Mean per-sample family loss over a set, without recording gradients.
pub fn evaluate<T: Scalar>(net: &Network<T>, set: &SampleSet<T>, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = set.batch(chunk)?;
        let mut g = Graph::inference();
        let p = net.params().bind(&mut g);
        let (xv, yv) = (g.constant(x), g.constant(y));
        let pred = net.forward(&mut g, &p, xv)?;
        let l = net.loss(&mut g, pred, yv)?;
        total += g.value(l).item().to_f64_lossy() * batch_weight(net.spec().family, chunk.len());
    }
    Ok(total / set.len() as f64)
}

/// Adam with per-epoch shuffling and early stopping on validation loss
/// (training loss when no validation set is given). Returns the parameters
/// of the best monitored epoch.
pub fn fit<T: Scalar>(
    mut net: Network<T>,
    train: &SampleSet<T>,
    val: Option<&SampleSet<T>>,
    cfg: &TrainConfig,
) -> Result<(Network<T>, TrainingLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut opt = Adam::new(cfg.adam, net.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Network<T>)> = None;
    let family = net.spec().family;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let mut g = Graph::new();
            let p = net.params().bind(&mut g);
            let (xv, yv) = (g.constant(x), g.constant(y));
            let pred = net.forward(&mut g, &p, xv)?;
            let l = net.loss(&mut g, pred, yv)?;
            let value = g.value(l).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NoConvergence(format!("loss became {value} in epoch {epoch}")));
            }
            total += value * batch_weight(family, chunk.len());
            let mut grads = g.backward(l);
            let gs: Vec<Option<Tensor<T>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
            opt.update(net.params_mut().tensors_mut(), &gs);
        }
        let train_loss = total / train.len() as f64;
        let val_loss = val.map(|v| evaluate(&net, v, cfg.batch_size)).transpose()?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        let monitored = val_loss.unwrap_or(train_loss);
        if best.as_ref().map_or(true, |(b, _)| monitored < *b) {
            best = Some((monitored, net.clone()));
            log.best_epoch = Some(epoch);
        } else if epoch - log.best_epoch.unwrap_or(0) >= cfg.patience {
            log.stopped_early = true;
            break;
        }
    }
    let (_, best_net) = best.expect("at least one epoch ran");
    Ok((best_net, log))
}

/// Train the base network on ground-truth windows.
pub fn train_level0<T: Scalar>(
    spec: &ModelSpec,
    train: &SampleSet<T>,
    val: Option<&SampleSet<T>>,
    cfg: &TrainConfig,
    norm_stats_hash: &str,
) -> Result<Checkpoint> {
    if train.level != 0 || val.is_some_and(|v| v.level != 0) {
        return Err(Error::Mismatch("level 0 trains on ground-truth windows".into()));
    }
    check_set(spec, train)?;
    let net = Network::<T>::new(spec.clone(), cfg.seed)?;
    let (net, log) = fit(net, train, val, cfg)?;
    Ok(Checkpoint::from_network(&net, norm_stats_hash, log, 0))
}

fn check_set<T: Scalar>(spec: &ModelSpec, set: &SampleSet<T>) -> Result<()> {
    let Some(x) = set.inputs.first() else {
        return Err(Error::InvalidArgument("training set is empty".into()));
    };
    let y = &set.targets[0];
    if x.dim(0) != spec.m || x.dim(1) != spec.in_channels || y.dim(0) != spec.n || y.dim(1) != OUT_CHANNELS {
        return Err(Error::Shape(format!(
            "samples {:?} -> {:?} do not fit a {} spec with m={}, n={}, C_in={}",
            x.shape(),
            y.shape(),
            spec.family,
            spec.m,
            spec.n,
            spec.in_channels
        )));
    }
    Ok(())
}

/// Levels applied in order; level 0 sees the original inputs.
pub struct Stack<T: Scalar> {
    levels: Vec<Box<dyn SeqModel<T>>>,
}

impl<T: Scalar> Stack<T> {
    pub fn new(levels: Vec<Box<dyn SeqModel<T>>>) -> Result<Self> {
        let Some(base) = levels.first() else {
            return Err(Error::InvalidArgument("a stack needs at least one level".into()));
        };
        let b = base.spec().clone();
        for (k, level) in levels.iter().enumerate().skip(1) {
            let s = level.spec();
            if s.family != b.family || s.m != b.m || s.n != b.n || s.out_channels != b.out_channels {
                return Err(Error::Mismatch(format!("level {k} spec differs from level 0")));
            }
            if s.in_channels != OUT_CHANNELS || s.m != s.n {
                return Err(Error::Mismatch(format!(
                    "level {k} must read {OUT_CHANNELS}-channel predictions with m = n"
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn from_checkpoints(cks: &[Checkpoint]) -> Result<Self> {
        let levels = cks
            .iter()
            .map(|c| c.to_network::<T>().map(|n| Box::new(n) as Box<dyn SeqModel<T>>))
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn spec(&self) -> &ModelSpec {
        self.levels[0].spec()
    }

    pub fn level(&self, k: usize) -> &dyn SeqModel<T> {
        self.levels[k].as_ref()
    }

    /// `level_L(... level_1(level_0(x)))`.
    pub fn refine(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.levels[0].predict(x)?;
        for level in &self.levels[1..] {
            y = level.predict(&y)?;
        }
        Ok(y)
    }
}

pub fn stack_refine<T: Scalar>(stack: &Stack<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    stack.refine(x)
}

/// Run the frozen prefix on every ground-truth window and pair the final
/// predictions with the true targets.
pub fn build_level_dataset<T: Scalar>(prefix: &Stack<T>, windows: &SampleSet<T>) -> Result<LevelDataset<T>> {
    if windows.level != 0 {
        return Err(Error::Mismatch("level datasets are built from ground-truth windows".into()));
    }
    let mut out = SampleSet {
        windows: windows.windows.clone(),
        inputs: Vec::with_capacity(windows.len()),
        targets: windows.targets.clone(),
        level: prefix.len(),
    };
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(8) {
        let (x, _) = windows.batch(chunk)?;
        let y = prefix.refine(&x)?;
        out.inputs.extend((0..chunk.len()).map(|b| y.index_axis0(b)));
    }
    Ok(out)
}

/// Train correction level `k` on a dataset built from a `k`-level prefix.
pub fn train_correction_level<T: Scalar>(
    k: usize,
    base_spec: &ModelSpec,
    train: &LevelDataset<T>,
    val: Option<&LevelDataset<T>>,
    cfg: &TrainConfig,
    norm_stats_hash: &str,
) -> Result<Checkpoint> {
    if k == 0 {
        return Err(Error::InvalidArgument("correction levels start at 1".into()));
    }
    if train.level != k || val.is_some_and(|v| v.level != k) {
        return Err(Error::Mismatch(format!(
            "level {k} needs data from a {k}-level prefix, got {}",
            train.level
        )));
    }
    if base_spec.m != base_spec.n {
        return Err(Error::InvalidArgument("stacking requires m = n".into()));
    }
    let spec = base_spec.correction();
    check_set(&spec, train)?;
    let net = Network::<T>::new(spec, cfg.seed.wrapping_add(k as u64))?;
    let (net, log) = fit(net, train, val, cfg)?;
    Ok(Checkpoint::from_network(&net, norm_stats_hash, log, k))
}

/// Mean squared error of `inputs` against `targets` (for level datasets,
/// the error of the prefix that built them).
pub fn dataset_mse<T: Scalar>(set: &SampleSet<T>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in set.inputs.iter().zip(&set.targets) {
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        total += x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
            .sum::<f64>();
        count += x.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Mean squared error of a model's predictions over a set.
pub fn prediction_mse<T: Scalar>(model: &dyn SeqModel<T>, set: &SampleSet<T>) -> Result<f64> {
    let mut pred = SampleSet {
        windows: set.windows.clone(),
        inputs: Vec::with_capacity(set.len()),
        targets: set.targets.clone(),
        level: set.level + 1,
    };
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(8) {
        let (x, _) = set.batch(chunk)?;
        let y = model.predict(&x)?;
        pred.inputs.extend((0..chunk.len()).map(|b| y.index_axis0(b)));
    }
    dataset_mse(&pred)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub level: usize,
    pub file: String,
    pub hash: String,
}

/// Ordered list of level checkpoints with their content hashes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    pub family: Family,
    pub norm_stats_hash: String,
    pub levels: Vec<LevelEntry>,
}

pub const STACK_MANIFEST: &str = "stack.json";

/// Persisted stack: level checkpoints in order.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedModel {
    pub checkpoints: Vec<Checkpoint>,
}

impl StackedModel {
    pub fn new(base: Checkpoint) -> Result<Self> {
        let s = Self {
            checkpoints: vec![base],
        };
        s.validate()?;
        Ok(s)
    }

    /// Number of correction levels.
    pub fn corrections(&self) -> usize {
        self.checkpoints.len() - 1
    }

    pub fn push(&mut self, level: Checkpoint) -> Result<()> {
        self.checkpoints.push(level);
        if let Err(e) = self.validate() {
            self.checkpoints.pop();
            return Err(e);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let base = self
            .checkpoints
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty stack".into()))?;
        for (k, ck) in self.checkpoints.iter().enumerate() {
            if ck.level != k {
                return Err(Error::Mismatch(format!("checkpoint at position {k} is level {}", ck.level)));
            }
            if ck.norm_stats_hash != base.norm_stats_hash {
                return Err(Error::Mismatch(format!("level {k} was trained with different statistics")));
            }
            let expected = if k == 0 {
                base.spec.clone()
            } else {
                base.spec.correction()
            };
            if ck.spec != expected {
                return Err(Error::Mismatch(format!("level {k} spec differs from the base spec")));
            }
        }
        Ok(())
    }

    pub fn norm_stats_hash(&self) -> &str {
        &self.checkpoints[0].norm_stats_hash
    }

    /// Runtime stack over the first `levels` checkpoints.
    pub fn stack<T: Scalar>(&self, levels: usize) -> Result<Stack<T>> {
        if levels == 0 || levels > self.checkpoints.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {levels} levels of a {}-level stack",
                self.checkpoints.len()
            )));
        }
        Stack::from_checkpoints(&self.checkpoints[..levels])
    }

    pub fn level_file(level: usize) -> String {
        format!("level_{level}.json")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut levels = Vec::new();
        for ck in &self.checkpoints {
            let file = Self::level_file(ck.level);
            ck.save(&dir.join(&file))?;
            levels.push(LevelEntry {
                level: ck.level,
                file,
                hash: ck.content_hash(),
            });
        }
        let manifest = StackManifest {
            family: self.checkpoints[0].spec.family,
            norm_stats_hash: self.norm_stats_hash().to_string(),
            levels,
        };
        write_json(&dir.join(STACK_MANIFEST), &manifest)
    }

    /// Load and verify every level hash against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: StackManifest = read_json(&dir.join(STACK_MANIFEST))?;
        let mut checkpoints = Vec::new();
        for entry in &manifest.levels {
            let path: PathBuf = dir.join(&entry.file);
            let ck = Checkpoint::load(&path)?;
            if ck.content_hash() != entry.hash {
                return Err(Error::Mismatch(format!("{} does not match its manifest hash", path.display())));
            }
            checkpoints.push(ck);
        }
        let s = Self { checkpoints };
        s.validate()?;
        Ok(s)
    }
}
