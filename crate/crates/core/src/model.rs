//! The hierarchical predictor, its module ablations and the two baselines.
//!
//! One prediction step runs in four phases:
//!
//! 1. leaf input effects `e0 = eF + eC + eH` from forces, collision pairs and
//!    the state history;
//! 2. three-stage propagation (leaf-to-ancestor, within-sibling,
//!    ancestor-to-descendant) through one shared MLP with a stage tag;
//! 3. `psi` maps each node's state, its velocity relative to the parent and
//!    its total effect to a local delta (roots also see gravity);
//! 4. world deltas are the sum of a node's local delta and those of its
//!    ancestors.
//!
//! Every phase is batched over a disjoint union of samples so that each MLP
//! runs once per phase. Summation over edges always follows the sorted edge
//! order, which keeps results bitwise reproducible.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Mlp, MlpSpec, MlpTape, ParamSet, Tensor2};
use crate::error::{invalid, Error, Result};
use crate::graph::{HierarchyGraph, Particle, Relation, RelationKind};
use crate::math::{self, Vec3};
use crate::sim::TrajectoryHeader;
use crate::spatial::SpatialGrid;

/// Per-node features: relative position, velocity, log mass, level.
pub const NODE_FEATURES: usize = 8;
const LOG_MASS_SCALE: f64 = 5.0;
const PSI_EXTRA: usize = 6;
const LEVEL_SCALE: f64 = 3.0;
const TAG_L2A: [f64; 3] = [1.0, 0.0, 0.0];
const TAG_WS: [f64; 3] = [0.0, 1.0, 0.0];
const TAG_A2D: [f64; 3] = [0.0, 0.0, 1.0];
const TAG_FLAT: [f64; 3] = [0.0; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Forces enter propagation as extra node features instead of `phi_F`.
    NoPhiF,
    /// Collision pairs become extra within-sibling edges instead of `phi_C`.
    NoPhiC,
    /// No history effect.
    NoPhiH,
    /// Pairwise convolution over the fully connected leaf graph.
    FlatGraph,
    /// One MLP over all flattened leaf states.
    MlpBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Hierarchical,
    Flat,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of input frames T.
    pub history: usize,
    /// Maximum distance D_C of a collision pair, in meters.
    pub collision_radius: f64,
    pub effect_dim: usize,
    pub hidden: usize,
    /// Hidden layers of the effect MLPs (`phi_F`, `phi_C`, `phi_H`, `eta`).
    pub effect_layers: usize,
    /// Hidden layers of `psi` and of the MLP baseline.
    pub psi_layers: usize,
    pub material_dim: usize,
    pub self_collisions: bool,
    pub ablations: Vec<Ablation>,
    /// Dynamic particle count the MLP baseline is shaped for.
    pub mlp_particles: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history: 2,
            collision_radius: 0.15,
            effect_dim: 32,
            hidden: 64,
            effect_layers: 2,
            psi_layers: 3,
            material_dim: 1,
            self_collisions: false,
            ablations: Vec::new(),
            mlp_particles: 0,
        }
    }
}

impl ModelConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn kind(&self) -> ModelKind {
        if self.has(Ablation::MlpBaseline) {
            ModelKind::Mlp
        } else if self.has(Ablation::FlatGraph) {
            ModelKind::Flat
        } else {
            ModelKind::Hierarchical
        }
    }

    /// Width of the node features seen by propagation and `psi`.
    pub fn node_dim(&self) -> usize {
        NODE_FEATURES + if self.has(Ablation::NoPhiF) { 3 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return invalid("history length T must be at least 1");
        }
        if !(self.collision_radius > 0.0) || !self.collision_radius.is_finite() {
            return invalid("collision radius must be positive");
        }
        if self.effect_dim == 0 || self.hidden == 0 || self.material_dim == 0 {
            return invalid("effect, hidden and material dims must be positive");
        }
        if self.has(Ablation::FlatGraph) && self.has(Ablation::MlpBaseline) {
            return invalid("flat-graph and mlp-baseline are mutually exclusive");
        }
        if self.kind() == ModelKind::Mlp && self.mlp_particles == 0 {
            return invalid("the MLP baseline needs mlp_particles > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub mean: Vec3,
    pub std: Vec3,
}

/// Feature scales and per-level statistics of ground-truth local deltas,
/// fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub position_scale: f64,
    /// Root-mean-square per-step leaf displacement.
    pub velocity_scale: f64,
    pub force_scale: f64,
    pub gravity_scale: f64,
    /// Local-delta statistics keyed by node level.
    pub levels: BTreeMap<usize, LevelStats>,
    /// World-delta statistics of leaves, used by the baselines.
    pub leaf_world: LevelStats,
}

impl NormStats {
    /// Unit scales with unit std for levels `0..=max_level`.
    pub fn unit(max_level: usize) -> Self {
        let unit = LevelStats {
            mean: math::ZERO,
            std: [1.0; 3],
        };
        Self {
            position_scale: 1.0,
            velocity_scale: 1.0,
            force_scale: 1.0,
            gravity_scale: 1.0,
            levels: (0..=max_level).map(|l| (l, unit)).collect(),
            leaf_world: unit,
        }
    }

    pub fn level(&self, level: usize) -> Result<&LevelStats> {
        self.levels
            .get(&level)
            .ok_or_else(|| Error::InvalidState(format!("no normalization statistics for level {level}")))
    }
}

/// Directed collision relations between leaves closer than `radius`.
///
/// Pairs from different objects are always emitted in both directions.
/// With `self_collisions`, pairs inside one object are added too unless they
/// appear in `material_pairs` (stored as `(min, max)`).
pub fn collision_pairs(
    positions: &[Vec3],
    object_id: &[usize],
    radius: f64,
    self_collisions: bool,
    material_pairs: &HashSet<(usize, usize)>,
    material_dim: usize,
) -> Vec<Relation> {
    collision_index_pairs(positions, object_id, radius, self_collisions, material_pairs)
        .into_iter()
        .map(|(s, r)| Relation::new(s, r, vec![0.0; material_dim], RelationKind::Collision))
        .collect()
}

fn collision_index_pairs(
    positions: &[Vec3],
    object_id: &[usize],
    radius: f64,
    self_collisions: bool,
    material_pairs: &HashSet<(usize, usize)>,
) -> Vec<(usize, usize)> {
    let grid = SpatialGrid::new(positions, radius);
    let pairs = grid.pairs_within(positions, radius, |i, j| {
        object_id[i] != object_id[j] || (self_collisions && !material_pairs.contains(&(i, j)))
    });
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for (i, j) in pairs {
        out.push((i, j));
        out.push((j, i));
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Edges {
    s: Vec<usize>,
    r: Vec<usize>,
    mat: Vec<f64>,
}

impl Edges {
    fn len(&self) -> usize {
        self.s.len()
    }

    fn push(&mut self, s: usize, r: usize, mat: &[f64]) {
        self.s.push(s);
        self.r.push(r);
        self.mat.extend_from_slice(mat);
    }

    fn extend_offset(&mut self, other: &Edges, off: usize) {
        self.s.extend(other.s.iter().map(|v| v + off));
        self.r.extend(other.r.iter().map(|v| v + off));
        self.mat.extend_from_slice(&other.mat);
    }
}

/// Static per-trajectory structure shared by every prediction step.
#[derive(Clone, Debug)]
pub struct SceneContext {
    pub hierarchy: HierarchyGraph,
    pub leaf_static: Vec<bool>,
    /// Node belongs to an object with at least one non-static leaf.
    pub node_active: Vec<bool>,
    /// Dynamic-object leaves in index order.
    pub active_leaves: Vec<usize>,
    pub material_pairs: HashSet<(usize, usize)>,
    material_dim: usize,
    l2a: Edges,
    ws: Edges,
    a2d: Edges,
    flat: Edges,
}

impl SceneContext {
    pub fn new(hierarchy: HierarchyGraph, leaf_static: Vec<bool>, material: &[Relation]) -> Result<Self> {
        let n_leaves = hierarchy.n_leaves();
        if leaf_static.len() != n_leaves {
            return invalid("static mask length disagrees with the hierarchy");
        }
        let mut dynamic_object = BTreeMap::new();
        for l in 0..n_leaves {
            *dynamic_object.entry(hierarchy.object_id(l)).or_insert(false) |= !leaf_static[l];
        }
        let node_active: Vec<bool> = (0..hierarchy.len())
            .map(|i| dynamic_object[&hierarchy.object_id(i)])
            .collect();
        let active_leaves: Vec<usize> = (0..n_leaves).filter(|&l| node_active[l]).collect();
        let material_dim = hierarchy
            .relations()
            .first()
            .map(|r| r.material.len())
            .or_else(|| material.first().map(|r| r.material.len()))
            .unwrap_or(1);

        let mut material_pairs = HashSet::new();
        let mut direct: BTreeMap<(usize, usize), &[f64]> = BTreeMap::new();
        for r in material {
            if r.sender >= n_leaves || r.receiver >= n_leaves {
                return invalid("material relation refers to a non-leaf");
            }
            material_pairs.insert((r.sender.min(r.receiver), r.sender.max(r.receiver)));
            direct.insert((r.sender, r.receiver), &r.material);
        }

        let (mut l2a, mut ws, mut a2d) = (Edges::default(), Edges::default(), Edges::default());
        for r in hierarchy.relations() {
            if !node_active[r.receiver] {
                continue;
            }
            if r.material.len() != material_dim {
                return invalid("inconsistent material dimension");
            }
            match r.kind {
                RelationKind::LeafToAncestor => l2a.push(r.sender, r.receiver, &r.material),
                RelationKind::WithinSibling => ws.push(r.sender, r.receiver, &r.material),
                RelationKind::AncestorToDescendant => a2d.push(r.sender, r.receiver, &r.material),
                _ => {}
            }
        }

        let zero = vec![0.0; material_dim];
        let mut flat = Edges::default();
        for &root in hierarchy.roots() {
            if !node_active[root] {
                continue;
            }
            let leaves = hierarchy.leaves_of(root);
            for &r in leaves {
                for &s in leaves {
                    if s != r {
                        let mat = direct.get(&(s, r)).copied().unwrap_or(&zero);
                        flat.push(s, r, mat);
                    }
                }
            }
        }
        let order = |e: &Edges| -> Edges {
            let mut idx: Vec<usize> = (0..e.len()).collect();
            idx.sort_by_key(|&k| (e.r[k], e.s[k]));
            let mut out = Edges::default();
            for k in idx {
                out.push(e.s[k], e.r[k], &e.mat[k * material_dim..(k + 1) * material_dim]);
            }
            out
        };
        let flat = order(&flat);

        Ok(Self {
            hierarchy,
            leaf_static,
            node_active,
            active_leaves,
            material_pairs,
            material_dim,
            l2a,
            ws,
            a2d,
            flat,
        })
    }

    pub fn from_header(header: &TrajectoryHeader) -> Result<Self> {
        Self::new(
            header.hierarchy.clone(),
            header.static_mask.clone(),
            &header.scene.relations,
        )
    }

    pub fn material_dim(&self) -> usize {
        self.material_dim
    }

    /// Leaf is predicted and supervised.
    pub fn is_free_leaf(&self, leaf: usize) -> bool {
        self.node_active[leaf] && !self.leaf_static[leaf]
    }
}

/// One prediction step's inputs: node states for frames `(t - T, t]`
/// (oldest first, re-aggregated from leaves), leaf forces and gravity.
#[derive(Clone, Debug)]
pub struct StepInput<'a> {
    pub ctx: &'a SceneContext,
    pub frames: Vec<Vec<Particle>>,
    pub forces: Vec<Vec3>,
    pub gravity: Vec3,
}

impl<'a> StepInput<'a> {
    /// Re-aggregates every frame of leaf states through the hierarchy.
    pub fn new(ctx: &'a SceneContext, leaf_frames: &[Vec<Particle>], forces: Vec<Vec3>, gravity: Vec3) -> Result<Self> {
        if leaf_frames.is_empty() {
            return invalid("at least one input frame is required");
        }
        let frames = leaf_frames
            .iter()
            .map(|f| ctx.hierarchy.reaggregate(f))
            .collect::<Result<Vec<_>>>()?;
        if forces.len() != ctx.hierarchy.n_leaves() {
            return invalid("one force per leaf is required");
        }
        Ok(Self {
            ctx,
            frames,
            forces,
            gravity,
        })
    }

    pub fn current(&self) -> &[Particle] {
        self.frames.last().expect("non-empty history")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Predicted local delta per node (zero for static objects).
    pub local: Vec<Vec3>,
    /// Predicted world delta per node.
    pub world: Vec<Vec3>,
    /// Next leaf states; static leaves stay put.
    pub next: Vec<Particle>,
}

/// Adds each node's ancestors' local deltas to its own.
pub fn local_to_world(h: &HierarchyGraph, local: &[Vec3]) -> Result<Vec<Vec3>> {
    if local.len() != h.len() {
        return invalid("one local delta per node is required");
    }
    Ok((0..h.len())
        .map(|i| {
            let mut w = local[i];
            let mut cur = i;
            while let Some(p) = h.parent(cur) {
                math::add_assign(&mut w, local[p]);
                cur = p;
            }
            w
        })
        .collect())
}

/// The disjoint union of a batch of step inputs, flattened for batched MLPs.
struct Assembled {
    nf: usize,
    n_nodes: usize,
    offsets: Vec<usize>,
    pos: Vec<Vec3>,
    feats: Vec<f64>,
    parent: Vec<Option<usize>>,
    level: Vec<usize>,
    active: Vec<bool>,
    leaves_of: Vec<(usize, usize)>,
    /// Output scale per predicted row.
    sigma: Vec<Vec3>,
    /// Rows fed to `phi_F` / `phi_H`: active leaves.
    leaves: Vec<usize>,
    force_in: Vec<f64>,
    hist_in: Vec<f64>,
    coll: Edges,
    l2a: Edges,
    ws: Edges,
    a2d: Edges,
    flat: Edges,
    /// Rows fed to `psi`.
    psi_nodes: Vec<usize>,
    /// Per-row parent-frame velocity and gravity appended to `psi` input.
    psi_extra: Vec<[f64; PSI_EXTRA]>,
    /// Leaves under each node (a leaf lists itself), indexed by `leaves_of`.
    leaves_flat: Vec<usize>,
    mlp_in: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Modules {
    phi_f: Option<Mlp>,
    phi_c: Option<Mlp>,
    phi_h: Option<Mlp>,
    eta: Option<Mlp>,
    psi: Option<Mlp>,
    mlp: Option<Mlp>,
}

/// A predictor with its parameters and normalization statistics.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub stats: NormStats,
    pub params: ParamSet,
    modules: Modules,
}

/// Everything the backward pass needs from one batched forward pass.
pub struct BatchTape {
    asm: Assembled,
    e0_taps: Vec<(Which, MlpTape, Vec<usize>)>,
    stages: Vec<(MlpTape, usize)>,
    out_tape: MlpTape,
    outputs: Vec<StepOutput>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Which {
    PhiF,
    PhiC,
    PhiH,
}

fn row_cat(dst: &mut Vec<f64>, parts: &[&[f64]]) {
    for p in parts {
        dst.extend_from_slice(p);
    }
}

impl Model {
    /// Builds a model with seeded fan-in initialisation.
    pub fn new(cfg: ModelConfig, stats: NormStats, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let e = cfg.effect_dim;
        let h = cfg.hidden;
        let nf = cfg.node_dim();
        let k = cfg.material_dim;
        let el = cfg.effect_layers;
        let kind = cfg.kind();
        let graph = kind != ModelKind::Mlp;
        let mut reg = |name: &str, spec: Result<MlpSpec>| -> Result<Mlp> { Ok(Mlp::register(&mut params, name, spec?)) };
        let modules = Modules {
            phi_f: if graph && !cfg.has(Ablation::NoPhiF) {
                Some(reg("phi_f", MlpSpec::with_hidden(NODE_FEATURES + 3, h, el, e))?)
            } else {
                None
            },
            phi_c: if graph && !cfg.has(Ablation::NoPhiC) {
                Some(reg("phi_c", MlpSpec::with_hidden(2 * NODE_FEATURES + 3, h, el, e))?)
            } else {
                None
            },
            phi_h: if graph && !cfg.has(Ablation::NoPhiH) {
                Some(reg("phi_h", MlpSpec::with_hidden(cfg.history * NODE_FEATURES, h, el, e))?)
            } else {
                None
            },
            eta: if graph {
                Some(reg("eta", MlpSpec::with_hidden(2 * nf + 3 + k + e + 3, h, el, e))?)
            } else {
                None
            },
            psi: if graph {
                Some(reg("psi", MlpSpec::with_hidden(nf + e + PSI_EXTRA, h, cfg.psi_layers, 3))?)
            } else {
                None
            },
            mlp: if graph {
                None
            } else {
                let n = cfg.mlp_particles;
                Some(reg("mlp", MlpSpec::with_hidden(n * (7 * cfg.history + 3), h, cfg.psi_layers, n * 3))?)
            },
        };
        let mut model = Self {
            cfg,
            stats,
            params,
            modules,
        };
        model.reinit(seed);
        Ok(model)
    }

    pub fn reinit(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = &self.modules;
        for mlp in [&m.phi_f, &m.phi_c, &m.phi_h, &m.eta, &m.psi, &m.mlp].into_iter().flatten() {
            mlp.init(&mut self.params, &mut rng);
        }
    }

    pub fn zero_params(&mut self) {
        self.params.data_mut().fill(0.0);
    }

    pub fn kind(&self) -> ModelKind {
        self.cfg.kind()
    }

    fn need<'m>(m: &'m Option<Mlp>, name: &str) -> Result<&'m Mlp> {
        m.as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("this model variant has no `{name}` module")))
    }

    fn base_features(&self, p: &Particle, root: Vec3, level: usize) -> [f64; NODE_FEATURES] {
        let s = &self.stats;
        let rel = math::scale(math::sub(p.position, root), 1.0 / s.position_scale);
        let v = math::scale(p.velocity, 1.0 / s.velocity_scale);
        [
            rel[0],
            rel[1],
            rel[2],
            v[0],
            v[1],
            v[2],
            p.mass.ln() / LOG_MASS_SCALE,
            level as f64 / LEVEL_SCALE,
        ]
    }

    fn check_input(&self, input: &StepInput) -> Result<()> {
        let h = &input.ctx.hierarchy;
        if input.frames.len() != self.cfg.history {
            return invalid(format!(
                "model expects {} input frames, got {}",
                self.cfg.history,
                input.frames.len()
            ));
        }
        if input.frames.iter().any(|f| f.len() != h.len()) {
            return invalid("node state count disagrees with the hierarchy");
        }
        if input.ctx.material_dim != self.cfg.material_dim {
            return invalid("material dimension disagrees with the model");
        }
        if self.kind() == ModelKind::Mlp && input.ctx.active_leaves.len() != self.cfg.mlp_particles {
            return invalid(format!(
                "MLP baseline trained for {} particles, scene has {}",
                self.cfg.mlp_particles,
                input.ctx.active_leaves.len()
            ));
        }
        Ok(())
    }

    fn assemble(&self, inputs: &[&StepInput]) -> Result<Assembled> {
        let kind = self.kind();
        let nf = self.cfg.node_dim();
        let no_phi_f = self.cfg.has(Ablation::NoPhiF);
        let s = &self.stats;
        let mut a = Assembled {
            nf,
            n_nodes: 0,
            offsets: Vec::with_capacity(inputs.len()),
            pos: Vec::new(),
            feats: Vec::new(),
            parent: Vec::new(),
            level: Vec::new(),
            active: Vec::new(),
            leaves_of: Vec::new(),
            sigma: Vec::new(),
            leaves: Vec::new(),
            force_in: Vec::new(),
            hist_in: Vec::new(),
            coll: Edges::default(),
            l2a: Edges::default(),
            ws: Edges::default(),
            a2d: Edges::default(),
            flat: Edges::default(),
            psi_nodes: Vec::new(),
            psi_extra: Vec::new(),
            leaves_flat: Vec::new(),
            mlp_in: Vec::new(),
        };
        for input in inputs {
            self.check_input(input)?;
            let ctx = input.ctx;
            let h = &ctx.hierarchy;
            let off = a.n_nodes;
            a.offsets.push(off);
            let cur = input.current();
            let force_of = |i: usize| -> Vec3 {
                if i < h.n_leaves() {
                    math::scale(input.forces[i], 1.0 / s.force_scale)
                } else {
                    math::ZERO
                }
            };
            for i in 0..h.len() {
                let root = cur[h.root_of(i)].position;
                a.feats.extend_from_slice(&self.base_features(&cur[i], root, h.level(i)));
                if no_phi_f {
                    a.feats.extend_from_slice(&force_of(i));
                }
                a.pos.push(cur[i].position);
                a.parent.push(h.parent(i).map(|p| p + off));
                a.level.push(h.level(i));
                a.active.push(ctx.node_active[i]);
                let start = a.leaves_flat.len();
                if i < h.n_leaves() {
                    a.leaves_flat.push(i + off);
                } else {
                    a.leaves_flat.extend(h.leaves_of(i).iter().map(|l| l + off));
                }
                a.leaves_of.push((start, a.leaves_flat.len()));
            }
            a.n_nodes += h.len();

            if kind == ModelKind::Mlp {
                for &l in &ctx.active_leaves {
                    for frame in &input.frames {
                        let p = frame[l];
                        let x = math::scale(p.position, 1.0 / s.position_scale);
                        let v = math::scale(p.velocity, 1.0 / s.velocity_scale);
                        row_cat(&mut a.mlp_in, &[&x, &v, &[p.mass.ln() / LOG_MASS_SCALE]]);
                    }
                    a.mlp_in.extend_from_slice(&force_of(l));
                }
                for &l in &ctx.active_leaves {
                    a.psi_nodes.push(l + off);
                    a.sigma.push(s.leaf_world.std);
                }
                continue;
            }

            for &l in &ctx.active_leaves {
                a.leaves.push(l + off);
                let base = &a.feats[(l + off) * nf..(l + off) * nf + NODE_FEATURES];
                let f = force_of(l);
                row_cat(&mut a.force_in, &[base, &f]);
                for frame in &input.frames {
                    let root = frame[h.root_of(l)].position;
                    a.hist_in.extend_from_slice(&self.base_features(&frame[l], root, 0));
                }
            }

            let leaf_pos: Vec<Vec3> = cur[..h.n_leaves()].iter().map(|p| p.position).collect();
            let pairs = collision_index_pairs(
                &leaf_pos,
                h.object_ids(),
                self.cfg.collision_radius,
                self.cfg.self_collisions,
                &ctx.material_pairs,
            );
            let zero = vec![0.0; ctx.material_dim];
            for (si, ri) in pairs {
                if ctx.node_active[ri] {
                    a.coll.push(si + off, ri + off, &zero);
                }
            }

            match kind {
                ModelKind::Hierarchical => {
                    a.l2a.extend_offset(&ctx.l2a, off);
                    a.ws.extend_offset(&ctx.ws, off);
                    a.a2d.extend_offset(&ctx.a2d, off);
                    for i in 0..h.len() {
                        if ctx.node_active[i] {
                            a.psi_nodes.push(i + off);
                            a.sigma.push(s.level(h.level(i))?.std);
                            a.psi_extra.push(self.psi_extra(input, i)?);
                        }
                    }
                }
                ModelKind::Flat => {
                    a.flat.extend_offset(&ctx.flat, off);
                    for &l in &ctx.active_leaves {
                        a.psi_nodes.push(l + off);
                        a.sigma.push(s.leaf_world.std);
                        a.psi_extra.push(self.psi_extra(input, l)?);
                    }
                }
                ModelKind::Mlp => unreachable!(),
            }
        }
        if self.cfg.has(Ablation::NoPhiC) {
            // Raw collision pairs join the within-sibling stage.
            let coll = std::mem::take(&mut a.coll);
            let mut merged = Edges::default();
            let k = self.cfg.material_dim;
            let mut idx: Vec<(bool, usize)> = (0..a.ws.len()).map(|i| (false, i)).collect();
            idx.extend((0..coll.len()).map(|i| (true, i)));
            for (is_coll, i) in idx {
                let e = if is_coll { &coll } else { &a.ws };
                merged.push(e.s[i], e.r[i], &e.mat[i * k..(i + 1) * k]);
            }
            a.ws = merged;
        }
        Ok(a)
    }

    fn pair_rows(&self, a: &Assembled, edges: &Edges, effects: &[f64], tag: [f64; 3]) -> Tensor2 {
        let nf = a.nf;
        let e = self.cfg.effect_dim;
        let k = self.cfg.material_dim;
        let cols = 2 * nf + 3 + k + e + 3;
        let mut data = Vec::with_capacity(edges.len() * cols);
        for i in 0..edges.len() {
            let (s, r) = (edges.s[i], edges.r[i]);
            let d = math::scale(math::sub(a.pos[s], a.pos[r]), 1.0 / self.stats.position_scale);
            row_cat(
                &mut data,
                &[
                    &a.feats[s * nf..(s + 1) * nf],
                    &a.feats[r * nf..(r + 1) * nf],
                    &d,
                    &edges.mat[i * k..(i + 1) * k],
                    &effects[s * e..(s + 1) * e],
                    &tag,
                ],
            );
        }
        Tensor2::from_vec(edges.len(), cols, data).expect("row layout")
    }

    fn scatter(out: &Tensor2, receivers: &[usize], dst: &mut [f64]) {
        let e = out.cols();
        for (i, &r) in receivers.iter().enumerate() {
            for (d, v) in dst[r * e..(r + 1) * e].iter_mut().zip(out.row(i)) {
                *d += v;
            }
        }
    }

    /// Leaf input effects, with tapes for the backward pass.
    fn input_effects(&self, a: &Assembled) -> Result<(Vec<f64>, Vec<(Which, MlpTape, Vec<usize>)>)> {
        let e = self.cfg.effect_dim;
        let mut e0 = vec![0.0; a.n_nodes * e];
        let mut tapes = Vec::new();
        let nl = a.leaves.len();
        if let Some(m) = &self.modules.phi_f {
            let (out, tape) = m.forward(&self.params, Tensor2::from_vec(nl, NODE_FEATURES + 3, a.force_in.clone())?)?;
            Self::scatter(&out, &a.leaves, &mut e0);
            tapes.push((Which::PhiF, tape, a.leaves.clone()));
        }
        if let Some(m) = &self.modules.phi_c {
            let mut data = Vec::with_capacity(a.coll.len() * (2 * NODE_FEATURES + 3));
            for i in 0..a.coll.len() {
                let (s, r) = (a.coll.s[i], a.coll.r[i]);
                let d = math::scale(math::sub(a.pos[s], a.pos[r]), 1.0 / self.stats.position_scale);
                row_cat(
                    &mut data,
                    &[
                        &a.feats[r * a.nf..r * a.nf + NODE_FEATURES],
                        &a.feats[s * a.nf..s * a.nf + NODE_FEATURES],
                        &d,
                    ],
                );
            }
            let (out, tape) = m.forward(&self.params, Tensor2::from_vec(a.coll.len(), 2 * NODE_FEATURES + 3, data)?)?;
            Self::scatter(&out, &a.coll.r, &mut e0);
            tapes.push((Which::PhiC, tape, a.coll.r.clone()));
        }
        if let Some(m) = &self.modules.phi_h {
            let cols = self.cfg.history * NODE_FEATURES;
            let (out, tape) = m.forward(&self.params, Tensor2::from_vec(nl, cols, a.hist_in.clone())?)?;
            Self::scatter(&out, &a.leaves, &mut e0);
            tapes.push((Which::PhiH, tape, a.leaves.clone()));
        }
        Ok((e0, tapes))
    }

    /// Three-stage propagation over the assembled union. Returns total
    /// effects and the stage tapes.
    fn propagate(&self, a: &Assembled, e0: &[f64]) -> Result<(Vec<f64>, Vec<(MlpTape, usize)>)> {
        let eta = Self::need(&self.modules.eta, "eta")?;
        let e = self.cfg.effect_dim;
        let n = a.n_nodes * e;
        let mut tapes = Vec::new();
        match self.kind() {
            ModelKind::Hierarchical => {
                let mut l2a = vec![0.0; n];
                let (out, tape) = eta.forward(&self.params, self.pair_rows(a, &a.l2a, e0, TAG_L2A))?;
                Self::scatter(&out, &a.l2a.r, &mut l2a);
                tapes.push((tape, 0));
                let mut ws = vec![0.0; n];
                let (out, tape) = eta.forward(&self.params, self.pair_rows(a, &a.ws, &l2a, TAG_WS))?;
                Self::scatter(&out, &a.ws.r, &mut ws);
                tapes.push((tape, 1));
                let up: Vec<f64> = l2a.iter().zip(&ws).map(|(x, y)| x + y).collect();
                let mut a2d = vec![0.0; n];
                let (out, tape) = eta.forward(&self.params, self.pair_rows(a, &a.a2d, &up, TAG_A2D))?;
                Self::scatter(&out, &a.a2d.r, &mut a2d);
                tapes.push((tape, 2));
                let total = (0..n).map(|i| l2a[i] + ws[i] + a2d[i]).collect();
                Ok((total, tapes))
            }
            ModelKind::Flat => {
                let mut total = e0.to_vec();
                let (out, tape) = eta.forward(&self.params, self.pair_rows(a, &a.flat, e0, TAG_FLAT))?;
                Self::scatter(&out, &a.flat.r, &mut total);
                tapes.push((tape, 3));
                Ok((total, tapes))
            }
            ModelKind::Mlp => invalid("the MLP baseline has no propagation stage"),
        }
    }

    fn psi_rows(&self, a: &Assembled, effects: &[f64]) -> Tensor2 {
        let nf = a.nf;
        let e = self.cfg.effect_dim;
        let cols = nf + e + PSI_EXTRA;
        let mut data = Vec::with_capacity(a.psi_nodes.len() * cols);
        for (row, &i) in a.psi_nodes.iter().enumerate() {
            row_cat(
                &mut data,
                &[&a.feats[i * nf..(i + 1) * nf], &effects[i * e..(i + 1) * e], &a.psi_extra[row]],
            );
        }
        Tensor2::from_vec(a.psi_nodes.len(), cols, data).expect("row layout")
    }

    /// Turns predicted rows into per-sample outputs.
    fn finish(&self, a: &Assembled, inputs: &[&StepInput], z: &Tensor2) -> Result<Vec<StepOutput>> {
        let kind = self.kind();
        let mut pred = vec![math::ZERO; a.n_nodes];
        match kind {
            ModelKind::Mlp => {
                let mut row = 0;
                let mut k = 0;
                for (si, input) in inputs.iter().enumerate() {
                    let n = input.ctx.active_leaves.len();
                    for j in 0..n {
                        let node = a.psi_nodes[k];
                        let zr = &z.row(si)[j * 3..j * 3 + 3];
                        let sg = a.sigma[k];
                        pred[node] = [zr[0] * sg[0], zr[1] * sg[1], zr[2] * sg[2]];
                        k += 1;
                    }
                    row += 1;
                }
                debug_assert_eq!(row, z.rows());
            }
            _ => {
                for (row, &i) in a.psi_nodes.iter().enumerate() {
                    let zr = z.row(row);
                    let sg = a.sigma[row];
                    pred[i] = [zr[0] * sg[0], zr[1] * sg[1], zr[2] * sg[2]];
                }
            }
        }
        let mut outputs = Vec::with_capacity(inputs.len());
        for (si, input) in inputs.iter().enumerate() {
            let off = a.offsets[si];
            let ctx = input.ctx;
            let h = &ctx.hierarchy;
            let n = h.len();
            let (local, world) = if kind == ModelKind::Hierarchical {
                let local = pred[off..off + n].to_vec();
                let world = local_to_world(h, &local)?;
                (local, world)
            } else {
                let mut world = vec![math::ZERO; n];
                for i in 0..n {
                    if !ctx.node_active[i] {
                        continue;
                    }
                    if i < h.n_leaves() {
                        world[i] = pred[off + i];
                    } else {
                        let leaves = h.leaves_of(i);
                        let mut m = math::ZERO;
                        for &l in leaves {
                            math::add_assign(&mut m, pred[off + l]);
                        }
                        world[i] = math::scale(m, 1.0 / leaves.len() as f64);
                    }
                }
                let local = (0..n)
                    .map(|i| match h.parent(i) {
                        Some(p) => math::sub(world[i], world[p]),
                        None => world[i],
                    })
                    .collect();
                (local, world)
            };
            let cur = input.current();
            let next = (0..h.n_leaves())
                .map(|l| {
                    let p = cur[l];
                    if !ctx.is_free_leaf(l) {
                        Particle::new(p.position, math::ZERO, p.mass)
                    } else {
                        Particle::new(math::add(p.position, world[l]), world[l], p.mass)
                    }
                })
                .collect();
            outputs.push(StepOutput { local, world, next });
        }
        Ok(outputs)
    }

    /// Batched forward pass that keeps a tape for [`Model::backward`].
    pub fn forward_batch(&self, inputs: &[&StepInput]) -> Result<BatchTape> {
        let a = self.assemble(inputs)?;
        let (e0_taps, stages, z, out_tape) = match self.kind() {
            ModelKind::Mlp => {
                let mlp = Self::need(&self.modules.mlp, "mlp")?;
                let cols = self.cfg.mlp_particles * (7 * self.cfg.history + 3);
                let (z, tape) = mlp.forward(&self.params, Tensor2::from_vec(inputs.len(), cols, a.mlp_in.clone())?)?;
                (Vec::new(), Vec::new(), z, tape)
            }
            _ => {
                let (e0, e0_taps) = self.input_effects(&a)?;
                let (total, stages) = self.propagate(&a, &e0)?;
                let psi = Self::need(&self.modules.psi, "psi")?;
                let (z, tape) = psi.forward(&self.params, self.psi_rows(&a, &total))?;
                (e0_taps, stages, z, tape)
            }
        };
        let outputs = self.finish(&a, inputs, &z)?;
        Ok(BatchTape {
            asm: a,
            e0_taps,
            stages,
            out_tape,
            outputs,
        })
    }

    /// One prediction step.
    pub fn step(&self, input: &StepInput) -> Result<StepOutput> {
        let tape = self.forward_batch(&[input])?;
        Ok(tape.outputs.into_iter().next().expect("one output"))
    }

    /// Accumulates parameter gradients given loss gradients with respect to
    /// each sample's predicted local and world node deltas.
    pub fn backward(&self, tape: &BatchTape, grad_local: &[Vec<Vec3>], grad_world: &[Vec<Vec3>], grads: &mut [f64]) -> Result<()> {
        let a = &tape.asm;
        if grad_local.len() != a.offsets.len() || grad_world.len() != a.offsets.len() {
            return invalid("one gradient set per sample is required");
        }
        let mut gl = vec![math::ZERO; a.n_nodes];
        let mut gw = vec![math::ZERO; a.n_nodes];
        for (si, &off) in a.offsets.iter().enumerate() {
            let n = tape.outputs[si].local.len();
            if grad_local[si].len() != n || grad_world[si].len() != n {
                return invalid("gradient length disagrees with the node count");
            }
            gl[off..off + n].copy_from_slice(&grad_local[si]);
            gw[off..off + n].copy_from_slice(&grad_world[si]);
        }

        // Gradient with respect to the raw predicted rows.
        let mut g_pred = vec![math::ZERO; a.n_nodes];
        if self.kind() == ModelKind::Hierarchical {
            // local_i feeds world_d for every d in the subtree of i.
            let mut sub = gw.clone();
            let mut order: Vec<usize> = (0..a.n_nodes).collect();
            order.sort_by_key(|&i| a.level[i]);
            for &i in &order {
                if let Some(p) = a.parent[i] {
                    let v = sub[i];
                    math::add_assign(&mut sub[p], v);
                }
            }
            for i in 0..a.n_nodes {
                g_pred[i] = math::add(gl[i], sub[i]);
            }
        } else {
            // world_n = mean of leaf worlds, local_n = world_n - world_parent.
            let mut g_world_total = vec![math::ZERO; a.n_nodes];
            for i in 0..a.n_nodes {
                if !a.active[i] {
                    continue;
                }
                g_world_total[i] = math::add(g_world_total[i], math::add(gw[i], gl[i]));
                if let Some(p) = a.parent[i] {
                    let v = gl[i];
                    g_world_total[p] = math::sub(g_world_total[p], v);
                }
            }
            for i in 0..a.n_nodes {
                if !a.active[i] {
                    continue;
                }
                let (s, e) = a.leaves_of[i];
                let w = 1.0 / (e - s) as f64;
                for &l in &a.leaves_flat[s..e] {
                    let v = math::scale(g_world_total[i], w);
                    math::add_assign(&mut g_pred[l], v);
                }
            }
        }

        match self.kind() {
            ModelKind::Mlp => {
                let mlp = Self::need(&self.modules.mlp, "mlp")?;
                let n = self.cfg.mlp_particles;
                let mut gz = Tensor2::zeros(a.offsets.len(), n * 3);
                for (k, &node) in a.psi_nodes.iter().enumerate() {
                    let (si, j) = (k / n, k % n);
                    let sg = a.sigma[k];
                    for c in 0..3 {
                        gz.row_mut(si)[j * 3 + c] = g_pred[node][c] * sg[c];
                    }
                }
                mlp.backward(&self.params, &tape.out_tape, &gz, grads)?;
                Ok(())
            }
            _ => self.backward_graph(tape, &g_pred, grads),
        }
    }

    fn backward_graph(&self, tape: &BatchTape, g_pred: &[Vec3], grads: &mut [f64]) -> Result<()> {
        let a = &tape.asm;
        let e = self.cfg.effect_dim;
        let nf = a.nf;
        let k = self.cfg.material_dim;
        let e_col = 2 * nf + 3 + k;
        let psi = Self::need(&self.modules.psi, "psi")?;
        let eta = Self::need(&self.modules.eta, "eta")?;

        let mut gz = Tensor2::zeros(a.psi_nodes.len(), 3);
        for (row, &i) in a.psi_nodes.iter().enumerate() {
            let sg = a.sigma[row];
            for c in 0..3 {
                gz.row_mut(row)[c] = g_pred[i][c] * sg[c];
            }
        }
        let g_in = psi.backward(&self.params, &tape.out_tape, &gz, grads)?;
        let mut g_e = vec![0.0; a.n_nodes * e];
        for (row, &i) in a.psi_nodes.iter().enumerate() {
            for (d, v) in g_e[i * e..(i + 1) * e].iter_mut().zip(&g_in.row(row)[nf..nf + e]) {
                *d += v;
            }
        }

        let gather = |edges: &Edges, g: &[f64]| -> Tensor2 {
            let mut t = Tensor2::zeros(edges.len(), e);
            for (i, &r) in edges.r.iter().enumerate() {
                t.row_mut(i).copy_from_slice(&g[r * e..(r + 1) * e]);
            }
            t
        };
        let spread = |edges: &Edges, g_rows: &Tensor2, dst: &mut [f64]| {
            for (i, &s) in edges.s.iter().enumerate() {
                for (d, v) in dst[s * e..(s + 1) * e].iter_mut().zip(&g_rows.row(i)[e_col..e_col + e]) {
                    *d += v;
                }
            }
        };

        let mut g_e0 = vec![0.0; a.n_nodes * e];
        match self.kind() {
            ModelKind::Hierarchical => {
                let tape_of = |id: usize| &tape.stages.iter().find(|(_, s)| *s == id).expect("stage tape").0;
                // A2D consumed l2a + ws of its senders.
                let g_rows = eta.backward(&self.params, tape_of(2), &gather(&a.a2d, &g_e), grads)?;
                let mut g_up = vec![0.0; a.n_nodes * e];
                spread(&a.a2d, &g_rows, &mut g_up);
                let g_ws: Vec<f64> = g_e.iter().zip(&g_up).map(|(x, y)| x + y).collect();
                let g_rows = eta.backward(&self.params, tape_of(1), &gather(&a.ws, &g_ws), grads)?;
                let mut g_l2a = g_ws;
                spread(&a.ws, &g_rows, &mut g_l2a);
                let g_rows = eta.backward(&self.params, tape_of(0), &gather(&a.l2a, &g_l2a), grads)?;
                spread(&a.l2a, &g_rows, &mut g_e0);
            }
            ModelKind::Flat => {
                g_e0.copy_from_slice(&g_e);
                let g_rows = eta.backward(&self.params, &tape.stages[0].0, &gather(&a.flat, &g_e), grads)?;
                spread(&a.flat, &g_rows, &mut g_e0);
            }
            ModelKind::Mlp => unreachable!(),
        }

        for (which, t, receivers) in &tape.e0_taps {
            let mlp = match which {
                Which::PhiF => &self.modules.phi_f,
                Which::PhiC => &self.modules.phi_c,
                Which::PhiH => &self.modules.phi_h,
            }
            .as_ref()
            .expect("module with a tape");
            let mut g = Tensor2::zeros(receivers.len(), e);
            for (row, &r) in receivers.iter().enumerate() {
                g.row_mut(row).copy_from_slice(&g_e0[r * e..(r + 1) * e]);
            }
            mlp.backward(&self.params, t, &g, grads)?;
        }
        Ok(())
    }

    fn single(&self, input: &StepInput) -> Result<Assembled> {
        self.assemble(&[input])
    }

    /// `phi_F` effect of one leaf.
    pub fn phi_f(&self, input: &StepInput, leaf: usize) -> Result<Vec<f64>> {
        let m = Self::need(&self.modules.phi_f, "phi_f")?;
        let h = &input.ctx.hierarchy;
        if leaf >= h.n_leaves() {
            return invalid(format!("phi_F applies to leaves only, node {leaf} is not one"));
        }
        let a = self.single(input)?;
        let mut row = a.feats[leaf * a.nf..leaf * a.nf + NODE_FEATURES].to_vec();
        row.extend_from_slice(&math::scale(input.forces[leaf], 1.0 / self.stats.force_scale));
        Ok(m.forward(&self.params, Tensor2::from_vec(1, row.len(), row)?)?.0.into_vec())
    }

    /// `phi_C` effect of one collision relation on its receiver.
    pub fn phi_c(&self, input: &StepInput, relation: &Relation) -> Result<Vec<f64>> {
        let m = Self::need(&self.modules.phi_c, "phi_c")?;
        if relation.kind != RelationKind::Collision {
            return invalid(format!("phi_C expects a collision relation, got {:?}", relation.kind));
        }
        let n = input.ctx.hierarchy.n_leaves();
        if relation.sender >= n || relation.receiver >= n {
            return invalid("collision relations join leaves");
        }
        let a = self.single(input)?;
        let (s, r) = (relation.sender, relation.receiver);
        let d = math::scale(math::sub(a.pos[s], a.pos[r]), 1.0 / self.stats.position_scale);
        let mut row = Vec::new();
        row_cat(
            &mut row,
            &[
                &a.feats[r * a.nf..r * a.nf + NODE_FEATURES],
                &a.feats[s * a.nf..s * a.nf + NODE_FEATURES],
                &d,
            ],
        );
        Ok(m.forward(&self.params, Tensor2::from_vec(1, row.len(), row)?)?.0.into_vec())
    }

    /// `phi_H` effect of one leaf's state history.
    pub fn phi_h(&self, input: &StepInput, leaf: usize) -> Result<Vec<f64>> {
        let m = Self::need(&self.modules.phi_h, "phi_h")?;
        if input.frames.len() != self.cfg.history {
            return invalid(format!(
                "phi_H needs {} frames, got {}",
                self.cfg.history,
                input.frames.len()
            ));
        }
        let h = &input.ctx.hierarchy;
        if leaf >= h.n_leaves() {
            return invalid("phi_H applies to leaves only");
        }
        let mut row = Vec::new();
        for frame in &input.frames {
            let root = frame[h.root_of(leaf)].position;
            row.extend_from_slice(&self.base_features(&frame[leaf], root, 0));
        }
        Ok(m.forward(&self.params, Tensor2::from_vec(1, row.len(), row)?)?.0.into_vec())
    }

    /// Leaf input effects `e0` (zero rows for non-leaves and static objects).
    pub fn input_effects_of(&self, input: &StepInput) -> Result<Vec<Vec<f64>>> {
        let a = self.single(input)?;
        let (e0, _) = self.input_effects(&a)?;
        Ok(e0.chunks(self.cfg.effect_dim).map(<[f64]>::to_vec).collect())
    }

    /// Propagated total effect per node for the given input effects.
    pub fn eta(&self, input: &StepInput, e0: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let e = self.cfg.effect_dim;
        let n = input.ctx.hierarchy.len();
        if e0.len() != n || e0.iter().any(|v| v.len() != e) {
            return invalid(format!("eta needs {n} effect vectors of length {e}"));
        }
        let a = self.single(input)?;
        let flat: Vec<f64> = e0.concat();
        let (total, _) = self.propagate(&a, &flat)?;
        Ok(total.chunks(e).map(<[f64]>::to_vec).collect())
    }

    /// `eta` message carried by one kinship relation when its sender holds
    /// `sender_effect`.
    pub fn eta_message(&self, input: &StepInput, relation: &Relation, sender_effect: &[f64]) -> Result<Vec<f64>> {
        let m = Self::need(&self.modules.eta, "eta")?;
        let e = self.cfg.effect_dim;
        let n = input.ctx.hierarchy.len();
        if relation.sender >= n || relation.receiver >= n || sender_effect.len() != e {
            return invalid("eta message shape mismatch");
        }
        let tag = match relation.kind {
            RelationKind::LeafToAncestor => TAG_L2A,
            RelationKind::WithinSibling => TAG_WS,
            RelationKind::AncestorToDescendant => TAG_A2D,
            k => return invalid(format!("eta messages follow kinship relations, got {k:?}")),
        };
        let a = self.single(input)?;
        let mut edges = Edges::default();
        edges.push(relation.sender, relation.receiver, &relation.material);
        let mut effects = vec![0.0; n * e];
        effects[relation.sender * e..(relation.sender + 1) * e].copy_from_slice(sender_effect);
        Ok(m.forward(&self.params, self.pair_rows(&a, &edges, &effects, tag))?.0.into_vec())
    }

    /// Velocity in the parent's frame, in units of the node's output scale,
    /// plus normalized gravity. Gravity and world-frame velocity go to roots
    /// only, or to every leaf of the flat baseline.
    fn psi_extra(&self, input: &StepInput, node: usize) -> Result<[f64; PSI_EXTRA]> {
        let h = &input.ctx.hierarchy;
        let cur = input.current();
        let s = &self.stats;
        let flat = self.kind() == ModelKind::Flat;
        let world = flat || h.is_root(node);
        let v = match h.parent(node) {
            Some(p) if !world => math::sub(cur[node].velocity, cur[p].velocity),
            _ => cur[node].velocity,
        };
        let sd = if flat { s.leaf_world.std } else { s.level(h.level(node))?.std };
        let g = if world { math::scale(input.gravity, 1.0 / s.gravity_scale) } else { math::ZERO };
        Ok([v[0] / sd[0], v[1] / sd[1], v[2] / sd[2], g[0], g[1], g[2]])
    }

    /// Raw `psi` output for one node before level scaling.
    pub fn psi(&self, input: &StepInput, node: usize, effect: &[f64]) -> Result<Vec3> {
        let m = Self::need(&self.modules.psi, "psi")?;
        let h = &input.ctx.hierarchy;
        if node >= h.len() || effect.len() != self.cfg.effect_dim {
            return invalid("psi input shape mismatch");
        }
        let a = self.single(input)?;
        let mut row = Vec::new();
        row_cat(&mut row, &[&a.feats[node * a.nf..(node + 1) * a.nf], effect, &self.psi_extra(input, node)?]);
        let out = m.forward(&self.params, Tensor2::from_vec(1, row.len(), row)?)?.0;
        Ok([out.data()[0], out.data()[1], out.data()[2]])
    }

    /// Flattened MLP-baseline input for one sample.
    pub fn mlp_input(&self, input: &StepInput) -> Result<Vec<f64>> {
        if self.kind() != ModelKind::Mlp {
            return invalid("not an MLP baseline");
        }
        Ok(self.single(input)?.mlp_in)
    }

    pub fn named_modules(&self) -> Vec<(&'static str, &Mlp)> {
        let m = &self.modules;
        [
            ("phi_f", &m.phi_f),
            ("phi_c", &m.phi_c),
            ("phi_h", &m.phi_h),
            ("eta", &m.eta),
            ("psi", &m.psi),
            ("mlp", &m.mlp),
        ]
        .into_iter()
        .filter_map(|(n, m)| m.as_ref().map(|m| (n, m)))
        .collect()
    }
}

impl BatchTape {
    pub fn outputs(&self) -> &[StepOutput] {
        &self.outputs
    }
}
