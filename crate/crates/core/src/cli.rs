//! Run configuration and the `gen`, `train`, `rollout` and `eval` pipelines
//! behind the `hrn` binary.
//!
//! A run is described by one JSON document. Values are resolved in three
//! layers: built-in defaults, the config file, then `HRN_SECTION__KEY`
//! environment variables (`HRN_OPTIM__EPOCHS=5` sets `optim.epochs`).
//! Unknown keys are rejected with their full key path.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::math;
use crate::model::{Ablation, ModelConfig, ModelKind};
use crate::sim::{gen_scenario, ScenarioConfig, ScenarioName};
use crate::train::{
    self, Checkpoint, EpochRecord, Episode, LossConfig, MetricReport, Named, OptimConfig, Predictor, TrainSetup,
    CSV_HEADER,
};

pub const ENV_PREFIX: &str = "HRN_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub name: ScenarioName,
    pub n_trajectories: usize,
    pub n_frames: usize,
    /// Full generator parameters; `null` uses the scenario's defaults.
    pub params: Option<ScenarioConfig>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            name: ScenarioName::ThrowOne,
            n_trajectories: 4,
            n_frames: 200,
            params: None,
        }
    }
}

impl ScenarioSection {
    pub fn resolved(&self) -> ScenarioConfig {
        self.params.clone().unwrap_or_else(|| ScenarioConfig::defaults(self.name))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Fraction of the training directory's files held out for validation.
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { val_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub horizon: usize,
    /// Frames between consecutive evaluation windows.
    pub stride: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { horizon: 9, stride: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    /// Current frame of the seed window.
    pub start: usize,
    pub n_steps: usize,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self { start: 1, n_steps: 50 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioSection,
    pub data: DataSection,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalSection,
    pub rollout: RolloutSection,
}

impl RunConfig {
    /// The reference document with every default spelled out.
    pub fn reference() -> Value {
        let mut cfg = RunConfig::default();
        cfg.scenario.params = Some(cfg.scenario.resolved());
        serde_json::to_value(cfg).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| Error::Config {
                path: section.to_string(),
                message: e.to_string(),
            })
        };
        wrap("scenario.params", self.scenario.resolved().validate())?;
        wrap("model", self.model.validate())?;
        wrap("loss", self.loss.validate())?;
        wrap("optim", self.optim.validate())?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config {
                path: "data.val_fraction".into(),
                message: "must lie in [0, 1)".into(),
            });
        }
        if self.eval.horizon == 0 || self.eval.stride == 0 {
            return Err(Error::Config {
                path: "eval".into(),
                message: "horizon and stride must be positive".into(),
            });
        }
        Ok(())
    }

    /// Parses a config document, reporting the key path of any error.
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(v).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then `file`, then `overrides` as `(KEY, value)` pairs.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(path) = file {
            let text = fs::read_to_string(path)?;
            let user: Value = serde_json::from_str(&text).map_err(|e| Error::Config {
                path: format!("{}:{}:{}", path.display(), e.line(), e.column()),
                message: e.to_string(),
            })?;
            if !user.is_object() {
                return Err(Error::Config {
                    path: path.display().to_string(),
                    message: "config must be a JSON object".into(),
                });
            }
            merge(&mut doc, user);
        }
        for (key, raw) in overrides {
            let path = env_path(key)?;
            if path.len() > 2 && path[0] == "scenario" && path[1] == "params" && doc["scenario"]["params"].is_null() {
                let name: ScenarioName = serde_json::from_value(doc["scenario"]["name"].clone()).map_err(|e| Error::Config {
                    path: "scenario.name".into(),
                    message: e.to_string(),
                })?;
                doc["scenario"]["params"] = serde_json::to_value(ScenarioConfig::defaults(name))?;
            }
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut doc, &path, value);
        }
        Self::from_value(doc)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// `HRN_OPTIM__LEARNING_RATE` becomes `["optim", "learning_rate"]`.
fn env_path(key: &str) -> Result<Vec<String>> {
    let rest = key.strip_prefix(ENV_PREFIX).unwrap_or(key);
    let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config {
            path: key.into(),
            message: "malformed override key".into(),
        });
    }
    Ok(path)
}

fn set_path(doc: &mut Value, path: &[String], value: Value) {
    let mut cur = doc;
    for key in &path[..path.len() - 1] {
        if !cur.get(key).is_some_and(Value::is_object) {
            cur[key.as_str()] = Value::Object(Map::new());
        }
        cur = &mut cur[key.as_str()];
    }
    cur[path[path.len() - 1].as_str()] = value;
}

/// `HRN_*` variables from the process environment, sorted by name.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    v.sort();
    v
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// One generated file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenSummary {
    pub path: PathBuf,
    pub seed: u64,
    pub frames: usize,
    pub particles: usize,
    pub objects: usize,
}

/// Writes `n_trajectories` files with seeds `seed, seed + 1, ...` into `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<GenSummary>> {
    let params = cfg.scenario.resolved();
    let echo = cfg.to_value();
    let name = cfg.scenario.name;
    let n = cfg.scenario.n_trajectories;
    if n == 0 {
        return Ok(Vec::new());
    }
    fs::create_dir_all(out)?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed + i;
            let mut t = gen_scenario(name, &params, seed, cfg.scenario.n_frames)?;
            t.header.config = echo.clone();
            let path = out.join(format!("{}-{seed:06}.hrnt", name.as_str()));
            io::write_trajectory(&path, &t)?;
            Ok(GenSummary {
                path,
                seed,
                frames: t.n_frames(),
                particles: t.n_particles(),
                objects: t.header.scene.objects().len(),
            })
        })
        .collect()
}

/// Reads every trajectory in a directory.
pub fn load_dir(dir: &Path) -> Result<Vec<Episode>> {
    if !dir.is_dir() {
        return invalid(format!("data directory {} does not exist", dir.display()));
    }
    let files = io::list_trajectories(dir)?;
    if files.is_empty() {
        return invalid(format!("no .hrnt files in {}", dir.display()));
    }
    files
        .par_iter()
        .map(|p| Episode::new(io::read_trajectory(p)?))
        .collect()
}

/// Splits by whole trajectory: the last `val_fraction` of files validate.
pub fn split(episodes: Vec<Episode>, val_fraction: f64) -> (Vec<Episode>, Vec<Episode>) {
    let n = episodes.len();
    let n_val = if n < 2 {
        0
    } else {
        ((n as f64 * val_fraction).round() as usize).clamp(usize::from(val_fraction > 0.0), n - 1)
    };
    let mut train = episodes;
    let val = train.split_off(n - n_val);
    (train, val)
}

fn resolve_model(cfg: &RunConfig, train: &[Episode]) -> ModelConfig {
    let mut m = cfg.model.clone();
    if m.kind() == ModelKind::Mlp && m.mlp_particles == 0 {
        m.mlp_particles = train[0].ctx.active_leaves.len();
    }
    m
}

/// Trains on `data`, writes the checkpoint and `curve.csv` into `out`.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<Checkpoint> {
    let (train_set, val_set) = split(load_dir(data)?, cfg.data.val_fraction);
    let resume = resume.map(Checkpoint::load).transpose()?;
    let ck = train::train(
        &train_set,
        &val_set,
        TrainSetup {
            model: resolve_model(cfg, &train_set),
            loss: cfg.loss,
            optim: cfg.optim.clone(),
            seed: cfg.seed,
            resume,
            config: cfg.to_value(),
            on_epoch,
        },
    )?;
    ck.save(out)?;
    let mut csv = String::from("epoch,step,lr,train_loss,val_loss\n");
    for r in &ck.curve {
        csv.push_str(&format!("{},{},{:e},{:e},{:e}\n", r.epoch, r.step, r.lr, r.train_loss, r.val_loss));
    }
    fs::write(out.join("curve.csv"), csv)?;
    Ok(ck)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutSummary {
    pub frames: usize,
    /// Mean free-leaf position MSE against the source trajectory per
    /// predicted step, where the source has the frame.
    pub position_mse: Vec<f64>,
}

/// Rolls `n_steps` forward from frame `start` of `input`.
pub fn cmd_rollout(
    checkpoint: &Path,
    input: &Path,
    start: usize,
    n_steps: usize,
    out: &Path,
    csv: Option<&Path>,
) -> Result<RolloutSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let ep = Episode::new(io::read_trajectory(input)?)?;
    let mut pred = train::rollout(&ck.model, &ep, start, n_steps)?;
    pred.header.config = ck.config.clone();
    io::write_trajectory(out, &pred)?;
    let history = ck.model.cfg.history;
    let mut mse = Vec::new();
    for k in 1..=n_steps {
        let Some(truth) = ep.traj.frames.get(start + k) else { break };
        if !ep.traj.is_continuous(start, start + k) {
            break;
        }
        mse.push(free_leaf_mse(&ep, &pred.frames[history - 1 + k].positions, &truth.positions));
    }
    if let Some(path) = csv {
        let mut s = String::from("step,frame,position_mse\n");
        for (k, v) in mse.iter().enumerate() {
            s.push_str(&format!("{},{},{v:e}\n", k + 1, start + k + 1));
        }
        fs::write(path, s)?;
    }
    Ok(RolloutSummary {
        frames: pred.n_frames(),
        position_mse: mse,
    })
}

fn free_leaf_mse(ep: &Episode, pred: &[math::Vec3], truth: &[math::Vec3]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0_f64;
    for (l, (p, t)) in pred.iter().zip(truth).enumerate() {
        if ep.ctx.is_free_leaf(l) {
            total += math::norm_sq(math::sub(*p, *t));
            n += 1.0;
        }
    }
    total / n.max(1.0)
}

/// Display name of a checkpointed model.
pub fn model_label(cfg: &ModelConfig, loss: &LossConfig) -> String {
    let mut parts: Vec<String> = Vec::new();
    match cfg.kind() {
        ModelKind::Flat => parts.push("flat-graph".into()),
        ModelKind::Mlp => parts.push("mlp".into()),
        ModelKind::Hierarchical => parts.push("hrn".into()),
    }
    for a in &cfg.ablations {
        if !matches!(a, Ablation::FlatGraph | Ablation::MlpBaseline) {
            parts.push(serde_json::to_value(a).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
        }
    }
    if cfg.history != 2 {
        parts.push(format!("t{}", cfg.history));
    }
    if loss.alpha == 1.0 {
        parts.push(if loss.beta == 0.0 { "local-loss-only".into() } else { "no-preservation-loss".into() });
    }
    parts.join("+")
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub horizon: usize,
    pub test_trajectories: usize,
    pub reports: Vec<MetricReport>,
    /// Model names by increasing cumulative position error.
    pub ordering: Vec<String>,
    pub config: Value,
}

/// Evaluates each checkpoint on every trajectory in `test`; writes
/// `metrics.csv` and `summary.json` into `out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoints: &[PathBuf], test: &Path, out: &Path) -> Result<EvalSummary> {
    if checkpoints.is_empty() {
        return invalid("at least one checkpoint is required");
    }
    let episodes = load_dir(test)?;
    let cks = checkpoints.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(cks.len());
    for ck in &cks {
        let loss: LossConfig = ck
            .config
            .get("loss")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();
        let mut name = model_label(&ck.model.cfg, &loss);
        let dupes = reports.iter().filter(|r: &&MetricReport| r.model.starts_with(&name)).count();
        if dupes > 0 {
            name = format!("{name}#{}", dupes + 1);
        }
        let p = Named { name, model: &ck.model };
        reports.push(train::evaluate(&p as &dyn Predictor, &episodes, cfg.eval.horizon, cfg.eval.stride)?);
    }
    fs::create_dir_all(out)?;
    let mut csv = String::from(CSV_HEADER);
    for r in &reports {
        csv.push_str(&r.csv_rows());
    }
    fs::write(out.join("metrics.csv"), csv)?;
    let mut order: Vec<&MetricReport> = reports.iter().collect();
    order.sort_by(|a, b| a.final_position().total_cmp(&b.final_position()));
    let summary = EvalSummary {
        horizon: cfg.eval.horizon,
        test_trajectories: episodes.len(),
        ordering: order.iter().map(|r| r.model.clone()).collect(),
        reports,
        config: cfg.to_value(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    if let Some(bad) = summary.reports.iter().find(|r| r.has_nan()) {
        return Err(Error::InvalidState(format!("model {} produced NaN metrics", bad.model)));
    }
    Ok(summary)
}

/// Fixed-width ordering table of an evaluation.
pub fn render_table(s: &EvalSummary) -> String {
    let mut t = format!("{:<28} {:>14} {:>14} {:>14}\n", "model", "position", "delta", "preserve");
    for name in &s.ordering {
        let r = s.reports.iter().find(|r| &r.model == name).expect("ordered model exists");
        t.push_str(&format!(
            "{:<28} {:>14.6e} {:>14.6e} {:>14.6e}\n",
            r.model,
            r.final_position(),
            r.final_delta(),
            r.final_preserve()
        ));
    }
    t
}

#[derive(Parser, Debug)]
#[command(name = "hrn", version, about = "Hierarchical relation networks for particle physics")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON run config; unset keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate ground-truth trajectory files.
    Gen,
    /// Train a model on a directory of trajectories.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll a checkpoint forward from a trajectory's frames.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Per-step error CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score checkpoints on a test directory.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the reference config with all defaults.
    Config,
}

fn out_or(g: &GlobalArgs, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// Runs one parsed command line with the given `HRN_*` overrides.
pub fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let g = &cli.global;
    if g.deterministic {
        // Fails only if a pool already exists, which is then reused as is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    if let Command::Config = cli.command {
        let text = serde_json::to_string_pretty(&RunConfig::reference())? + "\n";
        match &g.out {
            Some(p) => fs::write(p, text)?,
            None => print!("{text}"),
        }
        return Ok(());
    }
    let mut cfg = RunConfig::load(g.config.as_deref(), overrides)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Gen => {
            for s in cmd_gen(&cfg, &out_or(g, "data"))? {
                println!(
                    "{}: seed {} frames {} particles {} objects {}",
                    s.path.display(),
                    s.seed,
                    s.frames,
                    s.particles,
                    s.objects
                );
            }
        }
        Command::Train { data, resume } => {
            let mut log = |r: &EpochRecord| {
                eprintln!(
                    "epoch {:>4} step {:>7} lr {:.2e} train {:.5e} val {:.5e}",
                    r.epoch, r.step, r.lr, r.train_loss, r.val_loss
                )
            };
            let out = out_or(g, "checkpoint");
            let ck = cmd_train(&cfg, &data, &out, resume.as_deref(), Some(&mut log))?;
            println!("wrote {} ({} parameters, step {})", out.display(), ck.model.params.len(), ck.optimizer.step);
        }
        Command::Rollout {
            checkpoint,
            input,
            start,
            steps,
            csv,
        } => {
            let out = out_or(g, "rollout.hrnt");
            let s = cmd_rollout(
                &checkpoint,
                &input,
                start.unwrap_or(cfg.rollout.start),
                steps.unwrap_or(cfg.rollout.n_steps),
                &out,
                csv.as_deref(),
            )?;
            println!("wrote {} ({} frames)", out.display(), s.frames);
            if let Some(last) = s.position_mse.last() {
                let mean = s.position_mse.iter().sum::<f64>() / s.position_mse.len() as f64;
                println!("position mse: final {last:.6e} mean {mean:.6e} over {} steps", s.position_mse.len());
            }
        }
        Command::Eval { checkpoints, data } => {
            let out = out_or(g, "eval");
            let s = cmd_eval(&cfg, &checkpoints, &data, &out)?;
            print!("{}", render_table(&s));
        }
        Command::Config => unreachable!(),
    }
    Ok(())
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config { .. } => 2,
        Error::Io(_) | Error::Format { .. } => 3,
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::InvalidState(_) => 4,
    }
}
