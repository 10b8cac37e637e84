//! Loss, normalization statistics, training, rollout and evaluation metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{adam_step, AdamState, LrSchedule, ParamEntry};
use crate::error::{invalid, Error, Result};
use crate::graph::{Particle, RelationKind};
use crate::io;
use crate::math::{self, Vec3};
use crate::model::{LevelStats, Model, ModelConfig, NormStats, SceneContext, StepInput, StepOutput};
use crate::sim::{Frame, Trajectory};

const STD_FLOOR: f64 = 1e-8;
/// Samples per data-parallel work unit. Fixed so that results do not depend
/// on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.beta >= 0.0) {
            return invalid("alpha must lie in [0, 1] and beta must be non-negative");
        }
        Ok(())
    }
}

/// Ground-truth node deltas for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub local: Vec<Vec3>,
    pub world: Vec<Vec3>,
}

/// Node deltas implied by two consecutive leaf frames.
pub fn truth_deltas(ctx: &SceneContext, current: &[Particle], next: &[Particle]) -> Result<Truth> {
    let h = &ctx.hierarchy;
    let a = h.reaggregate(current)?;
    let b = h.reaggregate(next)?;
    let world: Vec<Vec3> = a.iter().zip(&b).map(|(p, q)| math::sub(q.position, p.position)).collect();
    let local = (0..h.len())
        .map(|i| match h.parent(i) {
            Some(p) => math::sub(world[i], world[p]),
            None => world[i],
        })
        .collect();
    Ok(Truth { local, world })
}

/// Loss value split into its three terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub local: f64,
    pub global: f64,
    pub preserve: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.total += o.total * s;
        self.local += o.local * s;
        self.global += o.global * s;
        self.preserve += o.preserve * s;
    }
}

/// Per-node loss gradients with respect to predicted local and world deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub local: Vec<Vec3>,
    pub world: Vec<Vec3>,
}

fn supervised(ctx: &SceneContext, node: usize) -> bool {
    ctx.node_active[node] && (node >= ctx.hierarchy.n_leaves() || ctx.is_free_leaf(node))
}

/// Unordered within-sibling pairs of dynamic objects.
pub fn sibling_pairs(ctx: &SceneContext) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = ctx
        .hierarchy
        .relations()
        .iter()
        .filter(|r| r.kind == RelationKind::WithinSibling && r.sender < r.receiver && ctx.node_active[r.receiver])
        .map(|r| (r.sender, r.receiver))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Three-term loss of one prediction and its gradient.
///
/// `nodes` are the current (re-aggregated) node states. The global and
/// preservation terms are divided by the squared velocity scale so that all
/// three terms are dimensionless.
pub fn compute_loss(
    pred: &StepOutput,
    truth: &Truth,
    nodes: &[Particle],
    ctx: &SceneContext,
    stats: &NormStats,
    cfg: &LossConfig,
) -> Result<(LossTerms, LossGrad)> {
    let h = &ctx.hierarchy;
    let n = h.len();
    if pred.local.len() != n || truth.local.len() != n || nodes.len() != n {
        return invalid("prediction, truth and hierarchy disagree on the node count");
    }
    let mut grad = LossGrad {
        local: vec![math::ZERO; n],
        world: vec![math::ZERO; n],
    };
    let members: Vec<usize> = (0..n).filter(|&i| supervised(ctx, i)).collect();
    let count = members.len().max(1) as f64;
    let v2 = stats.velocity_scale * stats.velocity_scale;
    let (alpha, beta) = (cfg.alpha, cfg.beta);

    let mut local = 0.0;
    let mut global = 0.0;
    for &i in &members {
        let sd = stats.level(h.level(i))?.std;
        for c in 0..3 {
            let d = (pred.local[i][c] - truth.local[i][c]) / sd[c];
            local += d * d;
            grad.local[i][c] += alpha * 2.0 * d / sd[c] / count;
            let g = pred.world[i][c] - truth.world[i][c];
            global += g * g / v2;
            grad.world[i][c] += alpha * beta * 2.0 * g / v2 / count;
        }
    }
    local /= count;
    global /= count;

    let pairs = sibling_pairs(ctx);
    let np = pairs.len().max(1) as f64;
    let mut preserve = 0.0;
    let effective = |i: usize| if i < h.n_leaves() && !ctx.is_free_leaf(i) { math::ZERO } else { pred.world[i] };
    for &(i, j) in &pairs {
        let pi = math::add(nodes[i].position, effective(i));
        let pj = math::add(nodes[j].position, effective(j));
        let ti = math::add(nodes[i].position, truth.world[i]);
        let tj = math::add(nodes[j].position, truth.world[j]);
        let diff = math::sub(pi, pj);
        let dh = math::norm(diff);
        let d = math::norm(math::sub(ti, tj));
        let e = dh - d;
        preserve += e * e / v2;
        if dh > 0.0 {
            let g = math::scale(diff, (1.0 - alpha) * 2.0 * e / v2 / np / dh);
            if i >= h.n_leaves() || ctx.is_free_leaf(i) {
                math::add_assign(&mut grad.world[i], g);
            }
            if j >= h.n_leaves() || ctx.is_free_leaf(j) {
                grad.world[j] = math::sub(grad.world[j], g);
            }
        }
    }
    preserve /= np;

    let total = alpha * (local + beta * global) + (1.0 - alpha) * preserve;
    Ok((
        LossTerms {
            total,
            local,
            global,
            preserve,
        },
        grad,
    ))
}

/// A trajectory together with its precomputed scene structure.
#[derive(Clone, Debug)]
pub struct Episode {
    pub traj: Trajectory,
    pub ctx: SceneContext,
}

impl Episode {
    pub fn new(traj: Trajectory) -> Result<Self> {
        traj.validate()?;
        let ctx = SceneContext::from_header(&traj.header)?;
        Ok(Self { traj, ctx })
    }

    /// Current-frame indices `t` with `history` frames up to `t` and a
    /// continuous transition to `t + 1`.
    pub fn sample_frames(&self, history: usize) -> Vec<usize> {
        let n = self.traj.n_frames();
        (history.saturating_sub(1)..n.saturating_sub(1))
            .filter(|&t| self.traj.is_continuous(t + 1 - history, t + 1))
            .collect()
    }

    pub fn input(&self, t: usize, history: usize) -> Result<StepInput<'_>> {
        if t + 1 < history || t >= self.traj.n_frames() {
            return invalid(format!("frame {t} has no {history}-frame history"));
        }
        let frames: Vec<Vec<Particle>> = (t + 1 - history..=t).map(|k| self.traj.leaf_states(k)).collect();
        StepInput::new(&self.ctx, &frames, self.traj.frames[t].forces.clone(), self.traj.header.gravity)
    }

    pub fn truth(&self, t: usize) -> Result<Truth> {
        truth_deltas(&self.ctx, &self.traj.leaf_states(t), &self.traj.leaf_states(t + 1))
    }

    /// Input and target for frame `t`, optionally with random-walk noise of
    /// standard deviation `sigma` on the free leaves' history. Velocities
    /// follow the perturbed positions and the target still lands on the
    /// true next frame.
    pub fn sample(&self, t: usize, history: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<(StepInput<'_>, Truth)> {
        if sigma <= 0.0 {
            return Ok((self.input(t, history)?, self.truth(t)?));
        }
        if t + 1 < history || t + 1 >= self.traj.n_frames() {
            return invalid(format!("frame {t} has no {history}-frame history"));
        }
        let step = Normal::new(0.0, sigma / (history as f64).sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let n = self.traj.n_particles();
        let mut walk = vec![math::ZERO; n];
        let mut frames = Vec::with_capacity(history);
        for k in t + 1 - history..=t {
            let mut leaves = self.traj.leaf_states(k);
            for (l, p) in leaves.iter_mut().enumerate() {
                if !self.ctx.is_free_leaf(l) {
                    continue;
                }
                let eps = [step.sample(rng), step.sample(rng), step.sample(rng)];
                math::add_assign(&mut walk[l], eps);
                math::add_assign(&mut p.position, walk[l]);
                math::add_assign(&mut p.velocity, eps);
            }
            frames.push(leaves);
        }
        let truth = truth_deltas(&self.ctx, &frames[history - 1], &self.traj.leaf_states(t + 1))?;
        let input = StepInput::new(&self.ctx, &frames, self.traj.frames[t].forces.clone(), self.traj.header.gravity)?;
        Ok((input, truth))
    }
}

#[derive(Default, Clone)]
struct Moments {
    n: f64,
    sum: [f64; 3],
    sq: [f64; 3],
}

impl Moments {
    fn push(&mut self, v: Vec3) {
        self.n += 1.0;
        for c in 0..3 {
            self.sum[c] += v[c];
            self.sq[c] += v[c] * v[c];
        }
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        for c in 0..3 {
            self.sum[c] += o.sum[c];
            self.sq[c] += o.sq[c];
        }
    }

    fn stats(&self) -> LevelStats {
        let n = self.n.max(1.0);
        let mut mean = math::ZERO;
        let mut std = math::ZERO;
        for c in 0..3 {
            mean[c] = self.sum[c] / n;
            std[c] = (self.sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(STD_FLOOR);
        }
        LevelStats { mean, std }
    }

    fn rms(&self) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        ((self.sq[0] + self.sq[1] + self.sq[2]) / (3.0 * self.n)).sqrt()
    }
}

#[derive(Default, Clone)]
struct StatAccum {
    levels: BTreeMap<usize, Moments>,
    leaf_world: Moments,
    position: Moments,
    force: Moments,
    gravity: f64,
}

impl StatAccum {
    fn merge(&mut self, o: &StatAccum) {
        for (l, m) in &o.levels {
            self.levels.entry(*l).or_default().merge(m);
        }
        self.leaf_world.merge(&o.leaf_world);
        self.position.merge(&o.position);
        self.force.merge(&o.force);
        self.gravity = self.gravity.max(o.gravity);
    }

    fn key(&self) -> Vec<f64> {
        let mut k = vec![self.leaf_world.n, self.position.sq[0], self.force.sq[0]];
        k.extend(self.leaf_world.sum);
        k.extend(self.leaf_world.sq);
        k
    }
}

fn accumulate(ep: &Episode, history: usize) -> Result<StatAccum> {
    let h = &ep.ctx.hierarchy;
    let mut acc = StatAccum {
        gravity: math::norm(ep.traj.header.gravity),
        ..StatAccum::default()
    };
    for t in ep.sample_frames(history) {
        let cur = ep.traj.leaf_states(t);
        let truth = ep.truth(t)?;
        let nodes = h.reaggregate(&cur)?;
        for i in 0..h.len() {
            if !supervised(&ep.ctx, i) {
                continue;
            }
            acc.levels.entry(h.level(i)).or_default().push(truth.local[i]);
            if i < h.n_leaves() {
                acc.leaf_world.push(truth.world[i]);
                acc.position.push(math::sub(nodes[i].position, nodes[h.root_of(i)].position));
                let f = ep.traj.frames[t].forces[i];
                if f != math::ZERO {
                    acc.force.push(f);
                }
            }
        }
    }
    Ok(acc)
}

/// Feature scales and per-level local-delta statistics of a training set.
///
/// Per-trajectory partial sums are combined in a canonical order, so the
/// result does not depend on the order of `episodes`.
pub fn fit_norm_stats(episodes: &[Episode], history: usize) -> Result<NormStats> {
    if episodes.is_empty() {
        return invalid("cannot fit statistics on an empty dataset");
    }
    let mut parts = episodes
        .iter()
        .map(|e| accumulate(e, history))
        .collect::<Result<Vec<_>>>()?;
    parts.sort_by(|a, b| {
        a.key()
            .iter()
            .zip(b.key().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let mut all = StatAccum::default();
    for p in &parts {
        all.merge(p);
    }
    if all.leaf_world.n == 0.0 {
        return invalid("dataset has no usable transitions");
    }
    let positive = |v: f64| if v > STD_FLOOR { v } else { 1.0 };
    Ok(NormStats {
        position_scale: positive(all.position.rms()),
        velocity_scale: all.leaf_world.rms().max(STD_FLOOR),
        force_scale: positive(all.force.rms()),
        gravity_scale: positive(all.gravity),
        levels: all.levels.iter().map(|(l, m)| (*l, m.stats())).collect(),
        leaf_world: all.leaf_world.stats(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cap on training samples drawn per epoch (0 = all).
    pub samples_per_epoch: usize,
    /// Learning-rate decays at these fractions of the total step count.
    pub decay_fractions: Vec<f64>,
    /// Validation samples scored each epoch (0 = all).
    pub val_samples: usize,
    /// Random-walk input noise, in units of the velocity scale.
    pub noise: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            samples_per_epoch: 0,
            decay_fractions: vec![0.5, 0.75, 0.9],
            val_samples: 256,
            noise: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 {
            return invalid("learning rate must be non-negative and batch size positive");
        }
        if !(self.noise >= 0.0) {
            return invalid("noise must be non-negative");
        }
        if self.decay_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return invalid("decay fractions must lie in [0, 1]");
        }
        Ok(())
    }

    fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        let n = if self.samples_per_epoch > 0 {
            self.samples_per_epoch.min(n_samples)
        } else {
            n_samples
        };
        n.div_ceil(self.batch_size) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Trained parameters plus everything needed to rebuild or resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamState,
    pub seed: u64,
    pub epoch: usize,
    pub curve: Vec<EpochRecord>,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    epoch: usize,
    step: u64,
    model: ModelConfig,
    stats: NormStats,
    params: Vec<ParamEntry>,
    n_params: usize,
    schedule: LrSchedule,
    curve: Vec<EpochRecord>,
    config: serde_json::Value,
}

const CHECKPOINT_FORMAT: &str = "hrn-checkpoint";

impl Checkpoint {
    /// Writes `manifest.json`, `params.bin` and `optimizer.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            seed: self.seed,
            epoch: self.epoch,
            step: self.optimizer.step,
            model: self.model.cfg.clone(),
            stats: self.model.stats.clone(),
            params: self.model.params.entries().to_vec(),
            n_params: self.model.params.len(),
            schedule: self.optimizer.schedule.clone(),
            curve: self.curve.clone(),
            config: self.config.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        io::write_f32s(&dir.join("params.bin"), self.model.params.data())?;
        let mut moments = self.optimizer.m.clone();
        moments.extend_from_slice(&self.optimizer.v);
        io::write_f32s(&dir.join("optimizer.bin"), &moments)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bytes = fs::read(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_slice(&bytes)?;
        if m.format != CHECKPOINT_FORMAT || m.version != 1 {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported checkpoint {} v{}", m.format, m.version),
            });
        }
        let mut model = Model::new(m.model, m.stats, m.seed)?;
        if model.params.entries() != m.params.as_slice() || model.params.len() != m.n_params {
            return Err(Error::Format {
                offset: 0,
                message: "checkpoint parameter layout does not match its model config".into(),
            });
        }
        let values = io::read_f32s(&dir.join("params.bin"), m.n_params)?;
        model.params.load(&values)?;
        let mut optimizer = AdamState::new(m.n_params, m.schedule);
        optimizer.step = m.step;
        let path = dir.join("optimizer.bin");
        if path.exists() {
            let mv = io::read_f32s(&path, 2 * m.n_params)?;
            optimizer.m.copy_from_slice(&mv[..m.n_params]);
            optimizer.v.copy_from_slice(&mv[m.n_params..]);
        }
        Ok(Self {
            model,
            optimizer,
            seed: m.seed,
            epoch: m.epoch,
            curve: m.curve,
            config: m.config,
        })
    }
}

/// Mean loss and summed gradient over a batch of `(episode, frame)` samples.
pub fn batch_loss_grad(
    model: &Model,
    episodes: &[Episode],
    samples: &[(usize, usize)],
    loss: &LossConfig,
    noise: Option<(f64, u64)>,
    with_grad: bool,
) -> Result<(LossTerms, Vec<f64>)> {
    let n = samples.len().max(1) as f64;
    let (sigma, key) = noise.unwrap_or((0.0, 0));
    let parts = samples
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<(LossTerms, Vec<f64>)> {
            let (inputs, truths): (Vec<_>, Vec<_>) = chunk
                .iter()
                .map(|&(e, t)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(key ^ ((e as u64) << 32 | t as u64));
                    episodes[e].sample(t, model.cfg.history, sigma, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            let refs: Vec<&StepInput> = inputs.iter().collect();
            let tape = model.forward_batch(&refs)?;
            let mut terms = LossTerms::default();
            let mut gl = Vec::with_capacity(chunk.len());
            let mut gw = Vec::with_capacity(chunk.len());
            for (k, &(e, _)) in chunk.iter().enumerate() {
                let ep = &episodes[e];
                let (lt, mut g) = compute_loss(
                    &tape.outputs()[k],
                    &truths[k],
                    &refs[k].frames[refs[k].frames.len() - 1],
                    &ep.ctx,
                    &model.stats,
                    loss,
                )?;
                terms.add_scaled(&lt, 1.0 / n);
                for v in g.local.iter_mut().chain(g.world.iter_mut()) {
                    *v = math::scale(*v, 1.0 / n);
                }
                gl.push(g.local);
                gw.push(g.world);
            }
            let mut grads = Vec::new();
            if with_grad {
                grads = vec![0.0; model.params.len()];
                model.backward(&tape, &gl, &gw, &mut grads)?;
            }
            Ok((terms, grads))
        })
        .collect::<Vec<_>>();
    let mut terms = LossTerms::default();
    let mut grads = if with_grad { vec![0.0; model.params.len()] } else { Vec::new() };
    for part in parts {
        let (t, g) = part?;
        terms.add_scaled(&t, 1.0);
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((terms, grads))
}

/// All `(episode, frame)` training samples in canonical order.
pub fn all_samples(episodes: &[Episode], history: usize) -> Vec<(usize, usize)> {
    episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| ep.sample_frames(history).into_iter().map(move |t| (e, t)))
        .collect()
}

fn evenly(samples: &[(usize, usize)], cap: usize) -> Vec<(usize, usize)> {
    if cap == 0 || samples.len() <= cap {
        return samples.to_vec();
    }
    (0..cap).map(|i| samples[i * samples.len() / cap]).collect()
}

pub struct TrainSetup<'a> {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Continue from this checkpoint instead of a fresh initialisation.
    pub resume: Option<Checkpoint>,
    pub config: serde_json::Value,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Minibatch one-step training with Adam.
///
/// Results are a pure function of the inputs and the seed; the thread count
/// only changes speed.
pub fn train(train_set: &[Episode], val_set: &[Episode], mut setup: TrainSetup) -> Result<Checkpoint> {
    setup.loss.validate()?;
    setup.optim.validate()?;
    let history = setup.model.history;
    let samples = all_samples(train_set, history);
    if samples.is_empty() {
        return invalid("training set has no usable transitions");
    }
    let val_samples = evenly(&all_samples(val_set, history), setup.optim.val_samples);

    let (mut model, mut opt, start_epoch, mut curve) = match setup.resume.take() {
        Some(ck) => (ck.model, ck.optimizer, ck.epoch, ck.curve),
        None => {
            let stats = fit_norm_stats(train_set, history)?;
            let model = Model::new(setup.model.clone(), stats, setup.seed)?;
            let total = setup.optim.steps_per_epoch(samples.len()) * setup.optim.epochs as u64;
            let schedule = LrSchedule::at_fractions(setup.optim.learning_rate, total, &setup.optim.decay_fractions);
            let opt = AdamState::new(model.params.len(), schedule);
            (model, opt, 0, Vec::new())
        }
    };

    let per_epoch = if setup.optim.samples_per_epoch > 0 {
        setup.optim.samples_per_epoch.min(samples.len())
    } else {
        samples.len()
    };
    for epoch in start_epoch..setup.optim.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order = samples.clone();
        order.shuffle(&mut rng);
        order.truncate(per_epoch);
        let mut train_loss = 0.0;
        let mut batches = 0.0;
        for batch in order.chunks(setup.optim.batch_size) {
            let noise = (setup.optim.noise * model.stats.velocity_scale, rng.next_u64());
            let (terms, grads) = batch_loss_grad(&model, train_set, batch, &setup.loss, Some(noise), true)?;
            if !terms.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: opt.step,
                    message: format!("loss {} (local {}, global {}, preserve {})", terms.total, terms.local, terms.global, terms.preserve),
                });
            }
            adam_step(&mut model.params, &grads, &mut opt)?;
            train_loss += terms.total;
            batches += 1.0;
        }
        let val_loss = if val_samples.is_empty() {
            f64::NAN
        } else {
            batch_loss_grad(&model, val_set, &val_samples, &setup.loss, None, false)?.0.total
        };
        let record = EpochRecord {
            epoch,
            step: opt.step,
            lr: opt.current_lr(),
            train_loss: train_loss / batches,
            val_loss,
        };
        if let Some(cb) = setup.on_epoch.as_mut() {
            cb(&record);
        }
        curve.push(record);
    }
    Ok(Checkpoint {
        model,
        optimizer: opt,
        seed: setup.seed,
        epoch: setup.optim.epochs,
        curve,
        config: setup.config,
    })
}

/// Mean one-step position MSE over free leaves for the given samples.
pub fn one_step_position_mse(model: &Model, episodes: &[Episode], samples: &[(usize, usize)]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0.0_f64;
    for chunk in samples.chunks(CHUNK) {
        let inputs = chunk
            .iter()
            .map(|&(e, t)| episodes[e].input(t, model.cfg.history))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&StepInput> = inputs.iter().collect();
        let tape = model.forward_batch(&refs)?;
        for (k, &(e, t)) in chunk.iter().enumerate() {
            let ep = &episodes[e];
            let next = &ep.traj.frames[t + 1].positions;
            for (l, p) in tape.outputs()[k].next.iter().enumerate() {
                if ep.ctx.is_free_leaf(l) {
                    total += math::norm_sq(math::sub(p.position, next[l]));
                    count += 1.0;
                }
            }
        }
    }
    Ok(total / count.max(1.0))
}

/// Something that can continue a trajectory from frame `t0`.
pub trait Predictor {
    fn name(&self) -> &str;
    fn history(&self) -> usize;
    /// Predicted leaf positions for frames `t0 + 1 ..= t0 + n_steps`.
    fn predict(&self, ep: &Episode, t0: usize, n_steps: usize) -> Result<Vec<Vec<Vec3>>>;
}

/// Autoregressive rollout from frame `t0`. The result holds the `T` seed
/// frames followed by `n_steps` predictions; forces come from the source
/// trajectory.
pub fn rollout(model: &Model, ep: &Episode, t0: usize, n_steps: usize) -> Result<Trajectory> {
    let history = model.cfg.history;
    let traj = &ep.traj;
    if t0 + 1 < history || t0 >= traj.n_frames() {
        return invalid(format!("rollout start {t0} needs {history} seed frames"));
    }
    let mut window: Vec<Vec<Particle>> = (t0 + 1 - history..=t0).map(|k| traj.leaf_states(k)).collect();
    let mut frames: Vec<Frame> = (t0 + 1 - history..=t0).map(|k| traj.frames[k].clone()).collect();
    let n = traj.n_particles();
    for step in 0..n_steps {
        let t = t0 + step;
        let forces = traj.frames.get(t).map_or_else(|| vec![math::ZERO; n], |f| f.forces.clone());
        let input = StepInput::new(&ep.ctx, &window, forces.clone(), traj.header.gravity)?;
        let out = model.step(&input)?;
        if out.next.iter().any(|p| !math::is_finite(p.position)) {
            return Err(Error::NonFinite { step: step + 1 });
        }
        if let Some(last) = frames.last_mut() {
            last.forces = forces;
        }
        frames.push(Frame {
            positions: out.next.iter().map(|p| p.position).collect(),
            velocities: out.next.iter().map(|p| p.velocity).collect(),
            forces: vec![math::ZERO; n],
        });
        window.remove(0);
        window.push(out.next);
    }
    let mut header = traj.header.clone();
    header.resets.clear();
    Ok(Trajectory { header, frames })
}

impl Predictor for Model {
    fn name(&self) -> &str {
        "model"
    }

    fn history(&self) -> usize {
        self.cfg.history
    }

    fn predict(&self, ep: &Episode, t0: usize, n_steps: usize) -> Result<Vec<Vec<Vec3>>> {
        let t = rollout(self, ep, t0, n_steps)?;
        Ok(t.frames[self.cfg.history..].iter().map(|f| f.positions.clone()).collect())
    }
}

/// A named model for evaluation tables.
pub struct Named<'a> {
    pub name: String,
    pub model: &'a Model,
}

impl Predictor for Named<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn history(&self) -> usize {
        self.model.cfg.history
    }

    fn predict(&self, ep: &Episode, t0: usize, n_steps: usize) -> Result<Vec<Vec<Vec3>>> {
        self.model.predict(ep, t0, n_steps)
    }
}

/// Plays back the ground truth.
pub struct Oracle;

impl Predictor for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn history(&self) -> usize {
        1
    }

    fn predict(&self, ep: &Episode, t0: usize, n_steps: usize) -> Result<Vec<Vec<Vec3>>> {
        Ok((t0 + 1..=t0 + n_steps).map(|k| ep.traj.frames[k].positions.clone()).collect())
    }
}

/// Predicts no motion at all.
pub struct Frozen;

impl Predictor for Frozen {
    fn name(&self) -> &str {
        "identity"
    }

    fn history(&self) -> usize {
        1
    }

    fn predict(&self, ep: &Episode, t0: usize, n_steps: usize) -> Result<Vec<Vec<Vec3>>> {
        Ok(vec![ep.traj.frames[t0].positions.clone(); n_steps])
    }
}

/// Cumulative error series over horizons `1..=H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub windows: usize,
    pub horizons: Vec<usize>,
    pub position: Vec<f64>,
    pub delta: Vec<f64>,
    pub preserve: Vec<f64>,
}

impl MetricReport {
    pub fn final_position(&self) -> f64 {
        *self.position.last().unwrap_or(&f64::NAN)
    }

    pub fn final_delta(&self) -> f64 {
        *self.delta.last().unwrap_or(&f64::NAN)
    }

    pub fn final_preserve(&self) -> f64 {
        *self.preserve.last().unwrap_or(&f64::NAN)
    }

    pub fn has_nan(&self) -> bool {
        self.position
            .iter()
            .chain(&self.delta)
            .chain(&self.preserve)
            .any(|v| !v.is_finite())
    }

    /// `model,horizon,metric,value` rows.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (k, h) in self.horizons.iter().enumerate() {
            for (metric, v) in [
                ("position", self.position[k]),
                ("delta", self.delta[k]),
                ("preserve", self.preserve[k]),
            ] {
                s.push_str(&format!("{},{h},{metric},{v:e}\n", self.model));
            }
        }
        s
    }
}

pub const CSV_HEADER: &str = "model,horizon,metric,value\n";

/// Window starts for an evaluation horizon.
pub fn eval_windows(ep: &Episode, history: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let n = ep.traj.n_frames();
    if n < horizon + history {
        return Vec::new();
    }
    (history - 1..n - horizon)
        .step_by(stride.max(1))
        .filter(|&t| ep.traj.is_continuous(t + 1 - history, t + horizon))
        .collect()
}

fn per_step_metrics(ep: &Episode, t0: usize, pred: &[Vec<Vec3>], pairs: &[(usize, usize)]) -> Result<Vec<[f64; 3]>> {
    let h = &ep.ctx.hierarchy;
    let free: Vec<usize> = (0..h.n_leaves()).filter(|&l| ep.ctx.is_free_leaf(l)).collect();
    let nf = free.len().max(1) as f64;
    let np = pairs.len().max(1) as f64;
    let mut prev_pred = ep.traj.frames[t0].positions.clone();
    let mut out = Vec::with_capacity(pred.len());
    for (k, xp) in pred.iter().enumerate() {
        let truth = &ep.traj.frames[t0 + k + 1];
        let prev_truth = &ep.traj.frames[t0 + k].positions;
        let mut pos = 0.0;
        let mut delta = 0.0;
        for &l in &free {
            pos += math::norm_sq(math::sub(xp[l], truth.positions[l]));
            let dp = math::sub(xp[l], prev_pred[l]);
            let dt = math::sub(truth.positions[l], prev_truth[l]);
            delta += math::norm_sq(math::sub(dp, dt));
        }
        let as_leaves = |x: &[Vec3]| -> Vec<Particle> {
            x.iter()
                .zip(&ep.traj.header.scene.particles)
                .map(|(p, q)| Particle::at_rest(*p, q.mass))
                .collect()
        };
        let np_nodes = h.reaggregate(&as_leaves(xp))?;
        let nt_nodes = h.reaggregate(&as_leaves(&truth.positions))?;
        let mut pres = 0.0;
        for &(i, j) in pairs {
            let dh = math::norm(math::sub(np_nodes[i].position, np_nodes[j].position));
            let d = math::norm(math::sub(nt_nodes[i].position, nt_nodes[j].position));
            pres += (dh - d) * (dh - d);
        }
        out.push([pos / nf, delta / nf, pres / np]);
        prev_pred = xp.clone();
    }
    Ok(out)
}

/// Cumulative position, delta-position and preserve-distance errors up to
/// `horizon`, averaged over rollout windows of every test episode.
pub fn evaluate(predictor: &dyn Predictor, test: &[Episode], horizon: usize, stride: usize) -> Result<MetricReport> {
    if horizon == 0 {
        return invalid("horizon must be at least 1");
    }
    let history = predictor.history();
    if let Some(ep) = test.iter().find(|e| e.traj.n_frames() < horizon + history) {
        return invalid(format!(
            "horizon {horizon} exceeds a {}-frame test trajectory",
            ep.traj.n_frames()
        ));
    }
    let mut series: Vec<Vec<[f64; 3]>> = Vec::new();
    for ep in test {
        let pairs = sibling_pairs(&ep.ctx);
        for t0 in eval_windows(ep, history, horizon, stride) {
            let pred = predictor.predict(ep, t0, horizon)?;
            let steps = per_step_metrics(ep, t0, &pred, &pairs)?;
            let mut cum = Vec::with_capacity(horizon);
            let mut acc = [0.0; 3];
            for s in steps {
                for c in 0..3 {
                    acc[c] += s[c];
                }
                cum.push(acc);
            }
            series.push(cum);
        }
    }
    if series.is_empty() {
        return invalid("no evaluation windows fit the test trajectories");
    }
    // Canonical summation order keeps the mean independent of episode order.
    series.sort_by(|a, b| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let w = series.len() as f64;
    let mut mean = vec![[0.0; 3]; horizon];
    for s in &series {
        for (m, v) in mean.iter_mut().zip(s) {
            for c in 0..3 {
                m[c] += v[c];
            }
        }
    }
    Ok(MetricReport {
        model: predictor.name().to_string(),
        windows: series.len(),
        horizons: (1..=horizon).collect(),
        position: mean.iter().map(|m| m[0] / w).collect(),
        delta: mean.iter().map(|m| m[1] / w).collect(),
        preserve: mean.iter().map(|m| m[2] / w).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_difference_check;
    use crate::graph::{build_hierarchy, HierarchyConfig, Relation, SceneGraph};
    use crate::sim::{gen_scenario, ScenarioConfig, ScenarioName};
    use rand::Rng;

    fn two_particles() -> (SceneContext, Vec<Particle>) {
        let scene = SceneGraph {
            particles: vec![Particle::at_rest([0.0; 3], 1.0), Particle::at_rest([1.0, 0.0, 0.0], 1.0)],
            relations: vec![
                Relation::new(0, 1, vec![1.0], RelationKind::Material),
                Relation::new(1, 0, vec![1.0], RelationKind::Material),
            ],
            object_id: vec![0, 0],
        };
        let h = build_hierarchy(&scene, &HierarchyConfig::default()).unwrap();
        let ctx = SceneContext::new(h, vec![false, false], &scene.relations).unwrap();
        let nodes = ctx.hierarchy.reaggregate(&scene.particles).unwrap();
        (ctx, nodes)
    }

    fn output(ctx: &SceneContext, local: Vec<Vec3>) -> StepOutput {
        let world = crate::model::local_to_world(&ctx.hierarchy, &local).unwrap();
        StepOutput {
            local,
            world,
            next: vec![],
        }
    }

    #[test]
    fn two_particle_loss_by_hand() {
        let (ctx, nodes) = two_particles();
        let root = ctx.hierarchy.roots()[0];
        assert_eq!(root, 2);
        let mut stats = NormStats::unit(1);
        stats.levels.get_mut(&0).unwrap().std = [2.0; 3];
        stats.velocity_scale = 0.5;
        // Truth: both leaves move +x by 0.1 (root too, locals zero).
        let truth = Truth {
            local: vec![math::ZERO, math::ZERO, [0.1, 0.0, 0.0]],
            world: vec![[0.1, 0.0, 0.0]; 3],
        };
        // Prediction: leaf 0 local +0.2 x, root +0.1 x.
        let pred = output(&ctx, vec![[0.2, 0.0, 0.0], math::ZERO, [0.1, 0.0, 0.0]]);
        let cfg = LossConfig { alpha: 0.5, beta: 1.0 };
        let (terms, _) = compute_loss(&pred, &truth, &nodes, &ctx, &stats, &cfg).unwrap();
        // Local: leaf 0 contributes (0.2 / 2)^2 = 0.01 over three nodes.
        assert!((terms.local - 0.01 / 3.0).abs() < 1e-15);
        // Global: leaf 0 world error 0.2, scaled by 1 / 0.25, over three nodes.
        assert!((terms.global - 0.04 / 0.25 / 3.0).abs() < 1e-15);
        // Preserve: one sibling pair, distance 1.0 -> 0.8 predicted vs 1.0.
        assert!((terms.preserve - 0.04 / 0.25).abs() < 1e-12);
        let want = 0.5 * (terms.local + terms.global) + 0.5 * terms.preserve;
        assert!((terms.total - want).abs() < 1e-15);

        let (exact, _) = compute_loss(&output(&ctx, truth.local.clone()), &truth, &nodes, &ctx, &stats, &cfg).unwrap();
        assert_eq!(exact.total, 0.0);

        let local_only = LossConfig { alpha: 1.0, beta: 0.0 };
        let (t, _) = compute_loss(&pred, &truth, &nodes, &ctx, &stats, &local_only).unwrap();
        assert_eq!(t.total, t.local);
    }

    #[test]
    fn missing_level_stats_is_invalid_state() {
        let (ctx, nodes) = two_particles();
        let mut stats = NormStats::unit(1);
        stats.levels.remove(&1);
        let truth = Truth {
            local: vec![math::ZERO; 3],
            world: vec![math::ZERO; 3],
        };
        let pred = output(&ctx, vec![math::ZERO; 3]);
        let r = compute_loss(&pred, &truth, &nodes, &ctx, &stats, &LossConfig::default());
        assert!(matches!(r, Err(Error::InvalidState(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (ctx, nodes) = two_particles();
        let mut stats = NormStats::unit(1);
        stats.levels.get_mut(&0).unwrap().std = [0.5, 2.0, 1.0];
        stats.velocity_scale = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r3 = || [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
        let truth_local: Vec<Vec3> = (0..3).map(|_| r3()).collect();
        let truth = Truth {
            world: crate::model::local_to_world(&ctx.hierarchy, &truth_local).unwrap(),
            local: truth_local,
        };
        let x0: Vec<f64> = (0..3).flat_map(|_| r3()).collect();
        let cfg = LossConfig { alpha: 0.3, beta: 2.0 };
        let f = |x: &[f64]| {
            let local: Vec<Vec3> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            compute_loss(&output(&ctx, local), &truth, &nodes, &ctx, &stats, &cfg).unwrap()
        };
        let (_, g) = f(&x0);
        // Chain world gradients into locals through the ancestor sum.
        let h = &ctx.hierarchy;
        let mut analytic = vec![0.0; 9];
        for i in 0..3 {
            for c in 0..3 {
                analytic[i * 3 + c] += g.local[i][c];
            }
            for d in 0..3 {
                if d == i || h.ancestors(d).contains(&i) {
                    for c in 0..3 {
                        analytic[i * 3 + c] += g.world[d][c];
                    }
                }
            }
        }
        let report = finite_difference_check(|x| f(x).0.total, &x0, &analytic, &(0..9).collect::<Vec<_>>(), 1e-6);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    fn episodes(n: usize, frames: usize) -> Vec<Episode> {
        let cfg = ScenarioConfig::defaults(ScenarioName::ThrowOne);
        (0..n)
            .map(|s| Episode::new(gen_scenario(ScenarioName::ThrowOne, &cfg, s as u64, frames).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn stats_are_order_invariant_and_floored() {
        let eps = episodes(3, 30);
        let a = fit_norm_stats(&eps, 2).unwrap();
        let rev: Vec<Episode> = eps.iter().rev().cloned().collect();
        assert_eq!(a, fit_norm_stats(&rev, 2).unwrap());
        assert!(fit_norm_stats(&[], 2).is_err());
        for l in a.levels.values() {
            assert!(l.std.iter().all(|s| *s >= STD_FLOOR));
        }
    }

    #[test]
    fn stats_match_closed_form_moments() {
        let mut m = Moments::default();
        for v in [[1.0, 2.0, 0.0], [3.0, 2.0, 0.0]] {
            m.push(v);
        }
        let s = m.stats();
        assert_eq!(s.mean, [2.0, 2.0, 0.0]);
        assert_eq!(s.std, [1.0, STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let eps = episodes(2, 20);
        let model = ModelConfig {
            effect_dim: 4,
            hidden: 8,
            ..ModelConfig::default()
        };
        let run = |lr: f64| {
            train(
                &eps[..1],
                &eps[1..],
                TrainSetup {
                    model: model.clone(),
                    loss: LossConfig::default(),
                    optim: OptimConfig {
                        learning_rate: lr,
                        epochs: 2,
                        samples_per_epoch: 16,
                        batch_size: 8,
                        val_samples: 8,
                        ..OptimConfig::default()
                    },
                    seed: 3,
                    resume: None,
                    config: serde_json::Value::Null,
                    on_epoch: None,
                },
            )
            .unwrap()
        };
        let fresh = Model::new(model.clone(), fit_norm_stats(&eps[..1], 2).unwrap(), 3).unwrap();
        let frozen = run(0.0);
        assert_eq!(frozen.model.params.data(), fresh.params.data());
        let a = run(1e-3);
        let b = run(1e-3);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model.params.data(), b.model.params.data());
        assert_ne!(a.model.params.data(), fresh.params.data());
    }

    #[test]
    fn oracle_and_frozen_metrics() {
        let eps = episodes(2, 40);
        let r = evaluate(&Oracle, &eps, 9, 5).unwrap();
        assert!(r.position.iter().chain(&r.delta).chain(&r.preserve).all(|v| *v == 0.0));
        let f = evaluate(&Frozen, &eps, 9, 5).unwrap();
        for w in f.position.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let rev: Vec<Episode> = eps.iter().rev().cloned().collect();
        assert_eq!(evaluate(&Frozen, &rev, 9, 5).unwrap(), f);
        assert!(evaluate(&Oracle, &eps, 60, 5).is_err());
    }

    #[test]
    fn frozen_model_on_free_fall_matches_kinematics() {
        let mut cfg = ScenarioConfig::defaults(ScenarioName::ThrowOne);
        cfg.ground = None;
        cfg.force_magnitude = [0.0, 0.0];
        let traj = gen_scenario(ScenarioName::ThrowOne, &cfg, 0, 12).unwrap();
        let ep = Episode::new(traj).unwrap();
        let r = evaluate(&Frozen, std::slice::from_ref(&ep), 9, 100).unwrap();
        assert_eq!(r.windows, 1);
        // Substepped symplectic Euler from rest: after k frames of m substeps
        // of length h, y = -g h^2 m k (m k + 1) / 2.
        let g = 9.81;
        let m = cfg.sim.substeps as f64;
        let h = cfg.sim.dt / m;
        let mut expect = 0.0;
        for k in 1..=9 {
            let n = m * k as f64;
            let y = g * h * h * n * (n + 1.0) / 2.0;
            expect += y * y;
            let got = r.position[k - 1];
            assert!((got - expect).abs() < 1e-4 * expect, "k={k} got {got} want {expect}");
        }
    }

    #[test]
    fn rollout_seed_frames_and_zero_weights() {
        let eps = episodes(1, 30);
        let stats = fit_norm_stats(&eps, 2).unwrap();
        let mut m = Model::new(ModelConfig { effect_dim: 4, hidden: 8, ..ModelConfig::default() }, stats, 1).unwrap();
        let t0 = rollout(&m, &eps[0], 5, 0).unwrap();
        assert_eq!(t0.frames.len(), 2);
        assert_eq!(t0.frames[1].positions, eps[0].traj.frames[5].positions);
        m.zero_params();
        let r = rollout(&m, &eps[0], 5, 10).unwrap();
        for f in &r.frames[2..] {
            assert_eq!(f.positions, eps[0].traj.frames[5].positions);
        }
        let one = rollout(&m, &eps[0], 5, 1).unwrap();
        let step = m.step(&eps[0].input(5, 2).unwrap()).unwrap();
        let pos: Vec<Vec3> = step.next.iter().map(|p| p.position).collect();
        assert_eq!(one.frames[2].positions, pos);
    }

    #[test]
    fn checkpoint_round_trip() {
        let eps = episodes(1, 20);
        let stats = fit_norm_stats(&eps, 2).unwrap();
        let model = Model::new(ModelConfig { effect_dim: 4, hidden: 8, ..ModelConfig::default() }, stats, 1).unwrap();
        let n = model.params.len();
        let ck = Checkpoint {
            model,
            optimizer: AdamState::new(n, LrSchedule::alternating(1e-3, [10, 20, 30])),
            seed: 1,
            epoch: 3,
            curve: vec![],
            config: serde_json::json!({"k": 1}),
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.config, ck.config);
        for (a, b) in back.model.params.data().iter().zip(ck.model.params.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(back.model.stats, ck.model.stats);
    }
}
