//! Procedural particle shapes and the reference mass-spring simulator used to
//! generate ground-truth trajectories.
//!
//! Objects are spring lattices integrated with symplectic Euler. Contacts are
//! resolved by projection: penetrating particles are pushed apart (or onto the
//! ground) and their approaching normal velocity is reflected with a
//! restitution factor. Static particles carry a large finite mass sentinel and
//! never move.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{build_hierarchy, HierarchyConfig, HierarchyGraph, Particle, Relation, RelationKind, SceneGraph};
use crate::math::{self, Vec3};
use crate::spatial::SpatialGrid;

/// Mass written into the state of static particles.
pub const STATIC_MASS: f64 = 1e6;

/// Lattice neighbours closer than this multiple of the spacing are joined by
/// a material relation (and a spring).
pub const NEIGHBOR_RADIUS: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Cube,
    Cuboid,
    Sphere,
    Plane,
    Slope,
    Stairs,
    ClothSheet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Bounding-box size in meters.
    pub extent: Vec3,
    pub spacing: f64,
    pub stiffness: f64,
    pub mass_total: f64,
}

impl ShapeSpec {
    pub fn cube(edge: f64, spacing: f64) -> Self {
        Self {
            kind: ShapeKind::Cube,
            extent: [edge; 3],
            spacing,
            stiffness: 1.0,
            mass_total: 1.0,
        }
    }

    pub fn plane(size: f64, spacing: f64) -> Self {
        Self {
            kind: ShapeKind::Plane,
            extent: [size, 0.0, size],
            spacing,
            stiffness: 1.0,
            mass_total: 1.0,
        }
    }

    pub fn cloth(size: f64, spacing: f64) -> Self {
        Self {
            kind: ShapeKind::ClothSheet,
            extent: [size, 0.0, size],
            spacing,
            stiffness: 0.5,
            mass_total: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) || !self.spacing.is_finite() {
            return invalid(format!("shape spacing must be positive, got {}", self.spacing));
        }
        if !(self.stiffness > 0.0 && self.stiffness <= 1.0) {
            return invalid(format!("stiffness must lie in (0, 1], got {}", self.stiffness));
        }
        if !(self.mass_total > 0.0) || !self.mass_total.is_finite() {
            return invalid("shape mass must be positive");
        }
        if self.extent.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return invalid("shape extent must be finite and non-negative");
        }
        let min_extent = self
            .extent
            .iter()
            .copied()
            .filter(|e| *e > 0.0)
            .fold(f64::INFINITY, f64::min);
        if min_extent.is_finite() && self.spacing > min_extent * (1.0 + 1e-9) {
            return invalid("spacing exceeds the smallest extent component");
        }
        Ok(())
    }
}

fn lattice_counts(spec: &ShapeSpec) -> [usize; 3] {
    let mut n = [1; 3];
    for a in 0..3 {
        n[a] = (spec.extent[a] / spec.spacing + 1e-9).floor() as usize + 1;
    }
    n
}

/// Samples a shape on a regular lattice centred on the origin and joins
/// lattice neighbours with material relations carrying `[stiffness]`.
pub fn gen_shape(spec: &ShapeSpec) -> Result<SceneGraph> {
    spec.validate()?;
    let n = lattice_counts(spec);
    let s = spec.spacing;
    let half: Vec3 = [
        (n[0] - 1) as f64 * s / 2.0,
        (n[1] - 1) as f64 * s / 2.0,
        (n[2] - 1) as f64 * s / 2.0,
    ];
    let ex = spec.extent;
    let eps = 1e-9 * s;
    let inside = |p: Vec3| -> bool {
        let u = [p[0] + half[0], p[1] + half[1], p[2] + half[2]];
        match spec.kind {
            ShapeKind::Cube | ShapeKind::Cuboid | ShapeKind::Plane | ShapeKind::ClothSheet => true,
            ShapeKind::Sphere => {
                let r = ex.iter().copied().fold(f64::INFINITY, f64::min) / 2.0;
                math::norm(p) <= r + eps
            }
            ShapeKind::Slope => ex[0] == 0.0 || u[1] <= u[0] * ex[1] / ex[0] + eps,
            ShapeKind::Stairs => {
                let steps = 3.0;
                let k = (u[0] / (ex[0] / steps) - eps).floor().clamp(0.0, steps - 1.0);
                u[1] <= (k + 1.0) * ex[1] / steps + eps
            }
        }
    };

    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut cells = Vec::new();
    let mut positions = Vec::new();
    for i in 0..n[0] {
        for j in 0..n[1] {
            for k in 0..n[2] {
                let p = [
                    i as f64 * s - half[0],
                    j as f64 * s - half[1],
                    k as f64 * s - half[2],
                ];
                if inside(p) {
                    index.insert([i, j, k], positions.len());
                    cells.push([i, j, k]);
                    positions.push(p);
                }
            }
        }
    }
    if positions.is_empty() {
        return invalid(format!("{:?} shape produced no particles", spec.kind));
    }
    let mass = spec.mass_total / positions.len() as f64;
    let particles: Vec<Particle> = positions.iter().map(|&p| Particle::at_rest(p, mass)).collect();

    let limit = (NEIGHBOR_RADIUS * s).powi(2);
    let mut relations = Vec::new();
    for (a, c) in cells.iter().enumerate() {
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                for dk in -1i64..=1 {
                    let idx = [c[0] as i64 + di, c[1] as i64 + dj, c[2] as i64 + dk];
                    if idx.iter().any(|&v| v < 0) || (di, dj, dk) == (0, 0, 0) {
                        continue;
                    }
                    let key = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
                    if let Some(&b) = index.get(&key) {
                        if math::norm_sq(math::sub(positions[a], positions[b])) <= limit {
                            relations.push(Relation::new(a, b, vec![spec.stiffness], RelationKind::Material));
                        }
                    }
                }
            }
        }
    }
    relations.sort_by_key(|r| (r.sender, r.receiver));
    let count = particles.len();
    Ok(SceneGraph {
        particles,
        relations,
        object_id: vec![0; count],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    pub rest_length: f64,
    pub stiffness: f64,
}

/// Horizontal ground: particles inside the xz bounds may not sink below
/// `height`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ground {
    pub height: f64,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Ground {
    pub fn contains_xz(&self, p: Vec3) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[2] >= self.min[1] && p[2] <= self.max[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Frame duration in seconds.
    pub dt: f64,
    pub substeps: usize,
    pub restitution: f64,
    /// Fraction of tangential relative velocity removed per contact.
    pub friction: f64,
    /// Natural frequency (rad/s) of a stiffness-1 spring on its lighter
    /// endpoint; the spring constant is `stiffness * mass * freq^2`.
    pub spring_frequency: f64,
    pub damping_ratio: f64,
    /// Minimum distance between particles of different objects.
    pub contact_distance: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 1.0 / 60.0,
            substeps: 10,
            restitution: 0.4,
            friction: 0.3,
            spring_frequency: 90.0,
            damping_ratio: 0.5,
            contact_distance: 0.1,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.substeps == 0 {
            return invalid("dt and substeps must be positive");
        }
        if !(0.0..=1.0).contains(&self.restitution) || !(0.0..=1.0).contains(&self.friction) {
            return invalid("restitution and friction must lie in [0, 1]");
        }
        if !(self.spring_frequency > 0.0) || self.damping_ratio < 0.0 || !(self.contact_distance > 0.0) {
            return invalid("spring frequency and contact distance must be positive");
        }
        Ok(())
    }
}

/// Simulator state. Unlike trajectory frames, velocities here are in m/s.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub particles: Vec<Particle>,
    pub springs: Vec<Spring>,
    pub static_mask: Vec<bool>,
    pub object_id: Vec<usize>,
    pub gravity: Vec3,
    pub ground: Option<Ground>,
}

impl SimState {
    pub fn from_scene(scene: &SceneGraph, static_mask: Vec<bool>, gravity: Vec3, ground: Option<Ground>) -> Result<Self> {
        scene.validate()?;
        if static_mask.len() != scene.len() {
            return invalid("static mask length mismatch");
        }
        let mut particles = scene.particles.clone();
        for (p, &s) in particles.iter_mut().zip(&static_mask) {
            if s {
                p.mass = STATIC_MASS;
                p.velocity = math::ZERO;
            }
        }
        let mut springs = Vec::new();
        for r in &scene.relations {
            if r.sender < r.receiver && !(static_mask[r.sender] && static_mask[r.receiver]) {
                let rest = math::norm(math::sub(particles[r.sender].position, particles[r.receiver].position));
                springs.push(Spring {
                    i: r.sender,
                    j: r.receiver,
                    rest_length: rest,
                    stiffness: r.material[0],
                });
            }
        }
        Ok(Self {
            particles,
            springs,
            static_mask,
            object_id: scene.object_id.clone(),
            gravity,
            ground,
        })
    }

    pub fn momentum(&self) -> Vec3 {
        let mut p = math::ZERO;
        for (q, &s) in self.particles.iter().zip(&self.static_mask) {
            if !s {
                math::add_assign(&mut p, math::scale(q.velocity, q.mass));
            }
        }
        p
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.particles
            .iter()
            .zip(&self.static_mask)
            .filter(|(_, &s)| !s)
            .map(|(q, _)| 0.5 * q.mass * math::norm_sq(q.velocity))
            .sum()
    }

    fn inv_mass(&self, i: usize) -> f64 {
        if self.static_mask[i] {
            0.0
        } else {
            1.0 / self.particles[i].mass
        }
    }
}

/// One symplectic Euler step of length `dt` followed by contact projection.
pub fn step(state: &SimState, dt: f64, forces: &[Vec3], params: &SimParams) -> Result<SimState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return invalid(format!("dt must be positive, got {dt}"));
    }
    if forces.len() != state.particles.len() {
        return invalid("one force per particle is required");
    }
    if forces.iter().any(|f| !math::is_finite(*f)) || !math::is_finite(state.gravity) {
        return invalid("forces must be finite");
    }
    for p in &state.particles {
        p.validate()?;
    }

    let n = state.particles.len();
    let mut accum: Vec<Vec3> = (0..n)
        .map(|i| math::add(forces[i], math::scale(state.gravity, state.particles[i].mass)))
        .collect();

    let omega2 = params.spring_frequency * params.spring_frequency;
    for s in &state.springs {
        let (a, b) = (&state.particles[s.i], &state.particles[s.j]);
        let d = math::sub(b.position, a.position);
        let len = math::norm(d);
        if len == 0.0 {
            continue;
        }
        let dir = math::scale(d, 1.0 / len);
        let m = match (state.static_mask[s.i], state.static_mask[s.j]) {
            (true, _) => b.mass,
            (_, true) => a.mass,
            _ => a.mass.min(b.mass),
        };
        let k = s.stiffness * m * omega2;
        let c = 2.0 * params.damping_ratio * (k * 0.5 * m).sqrt();
        let rel_v = math::dot(math::sub(b.velocity, a.velocity), dir);
        let f = math::scale(dir, k * (len - s.rest_length) + c * rel_v);
        math::add_assign(&mut accum[s.i], f);
        math::add_assign(&mut accum[s.j], math::scale(f, -1.0));
    }

    let mut next = state.clone();
    for i in 0..n {
        if state.static_mask[i] {
            continue;
        }
        let p = &mut next.particles[i];
        let a = math::scale(accum[i], 1.0 / p.mass);
        p.velocity = math::add(p.velocity, math::scale(a, dt));
        p.position = math::add(p.position, math::scale(p.velocity, dt));
    }
    resolve_contacts(&mut next, params);
    Ok(next)
}

fn resolve_contacts(state: &mut SimState, params: &SimParams) {
    let e = params.restitution;
    let mu = params.friction;
    let cd = params.contact_distance;
    let positions: Vec<Vec3> = state.particles.iter().map(|p| p.position).collect();
    let grid = SpatialGrid::new(&positions, cd);
    let obj = &state.object_id;
    let mask = &state.static_mask;
    let pairs = grid.pairs_within(&positions, cd, |i, j| obj[i] != obj[j] && !(mask[i] && mask[j]));
    for (i, j) in pairs {
        let (wi, wj) = (state.inv_mass(i), state.inv_mass(j));
        let w = wi + wj;
        let d = math::sub(state.particles[i].position, state.particles[j].position);
        let dist = math::norm(d);
        if dist >= cd || w == 0.0 {
            continue;
        }
        let normal = if dist > 0.0 {
            math::scale(d, 1.0 / dist)
        } else {
            [0.0, 1.0, 0.0]
        };
        let pen = cd - dist;
        let pi = state.particles[i].position;
        let pj = state.particles[j].position;
        state.particles[i].position = math::add(pi, math::scale(normal, pen * wi / w));
        state.particles[j].position = math::sub(pj, math::scale(normal, pen * wj / w));

        let rel = math::sub(state.particles[i].velocity, state.particles[j].velocity);
        let vn = math::dot(rel, normal);
        if vn < 0.0 {
            let tangential = math::sub(rel, math::scale(normal, vn));
            let jn = -(1.0 + e) * vn / w;
            let impulse = math::sub(math::scale(normal, jn), math::scale(tangential, mu / w));
            let vi = state.particles[i].velocity;
            let vj = state.particles[j].velocity;
            state.particles[i].velocity = math::add(vi, math::scale(impulse, wi));
            state.particles[j].velocity = math::sub(vj, math::scale(impulse, wj));
        }
    }

    if let Some(ground) = state.ground {
        for i in 0..state.particles.len() {
            if state.static_mask[i] {
                continue;
            }
            let p = &mut state.particles[i];
            if p.position[1] < ground.height && ground.contains_xz(p.position) {
                p.position[1] = ground.height;
                if p.velocity[1] < 0.0 {
                    p.velocity[1] *= -e;
                    p.velocity[0] *= 1.0 - mu;
                    p.velocity[2] *= 1.0 - mu;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    ThrowOne,
    ZeroGCollide,
    MultiOnPlane,
    ClothDrop,
    ClothHang,
    Tower,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 6] = [
        ScenarioName::ThrowOne,
        ScenarioName::ZeroGCollide,
        ScenarioName::MultiOnPlane,
        ScenarioName::ClothDrop,
        ScenarioName::ClothHang,
        ScenarioName::Tower,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioName::ThrowOne => "throw-one",
            ScenarioName::ZeroGCollide => "zero-g-collide",
            ScenarioName::MultiOnPlane => "multi-on-plane",
            ScenarioName::ClothDrop => "cloth-drop",
            ScenarioName::ClothHang => "cloth-hang",
            ScenarioName::Tower => "tower",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

/// Everything a scenario generator needs besides its name, seed and length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Dynamic objects, in particle order.
    pub objects: Vec<ShapeSpec>,
    /// Static ground plane placed at y = 0.
    pub ground: Option<ShapeSpec>,
    /// Total impulsive force magnitude range in newtons.
    pub force_magnitude: [f64; 2],
    /// Frames between force applications (inclusive range).
    pub force_interval: [usize; 2],
    /// Draw a random stiffness in [0.1, 0.9] per object and trajectory.
    pub soft: bool,
    pub gravity: Vec3,
    /// Range of the initial drop height above the contact surface.
    pub spawn_height: [f64; 2],
    /// Half-width of the horizontal spawn square around the centre.
    pub spawn_radius: f64,
    pub sim: SimParams,
    pub hierarchy: HierarchyConfig,
}

impl ScenarioConfig {
    pub fn defaults(name: ScenarioName) -> Self {
        let s = 0.1;
        let base = Self {
            objects: vec![ShapeSpec::cube(0.2, s)],
            ground: Some(ShapeSpec::plane(1.0, s)),
            force_magnitude: [60.0, 120.0],
            force_interval: [30, 60],
            soft: false,
            gravity: [0.0, -9.81, 0.0],
            spawn_height: [0.05, 0.25],
            spawn_radius: 0.15,
            sim: SimParams {
                contact_distance: s,
                ..SimParams::default()
            },
            hierarchy: HierarchyConfig::default(),
        };
        match name {
            ScenarioName::ThrowOne => base,
            ScenarioName::ZeroGCollide => Self {
                objects: vec![ShapeSpec::cube(0.2, s), ShapeSpec::cube(0.2, s)],
                ground: None,
                gravity: [0.0; 3],
                force_magnitude: [20.0, 60.0],
                spawn_height: [0.0, 0.0],
                spawn_radius: 0.05,
                ..base
            },
            ScenarioName::MultiOnPlane => Self {
                objects: vec![ShapeSpec::cube(0.2, s), ShapeSpec::cube(0.2, s)],
                ground: Some(ShapeSpec::plane(1.6, s)),
                force_magnitude: [30.0, 80.0],
                force_interval: [20, 40],
                spawn_height: [0.0, 0.1],
                spawn_radius: 0.05,
                ..base
            },
            ScenarioName::ClothDrop => Self {
                objects: vec![ShapeSpec::cloth(0.5, s)],
                force_magnitude: [5.0, 15.0],
                force_interval: [40, 40],
                spawn_height: [0.2, 0.4],
                ..base
            },
            ScenarioName::ClothHang => Self {
                objects: vec![ShapeSpec::cloth(0.5, s)],
                ground: None,
                force_magnitude: [5.0, 15.0],
                force_interval: [40, 40],
                ..base
            },
            ScenarioName::Tower => Self {
                objects: vec![ShapeSpec::cube(s, s); 5],
                force_magnitude: [10.0, 30.0],
                force_interval: [30, 90],
                spawn_height: [0.0, 0.0],
                spawn_radius: 0.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return invalid("a scenario needs at least one dynamic object");
        }
        for o in &self.objects {
            o.validate()?;
        }
        if let Some(g) = &self.ground {
            g.validate()?;
        }
        if self.force_magnitude[0] < 0.0 || self.force_magnitude[1] < self.force_magnitude[0] {
            return invalid("force_magnitude must be an ordered non-negative range");
        }
        if self.force_interval[0] == 0 || self.force_interval[1] < self.force_interval[0] {
            return invalid("force_interval must be an ordered positive range");
        }
        if self.spawn_height[1] < self.spawn_height[0] || self.spawn_radius < 0.0 {
            return invalid("spawn ranges must be ordered and non-negative");
        }
        self.sim.validate()?;
        self.hierarchy.validate()
    }
}

/// Static description shared by every frame of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub scenario: String,
    pub seed: u64,
    /// Frame duration in seconds.
    pub dt: f64,
    pub gravity: Vec3,
    /// Initial leaf states, material relations and object labels.
    pub scene: SceneGraph,
    pub static_mask: Vec<bool>,
    pub hierarchy: HierarchyGraph,
    /// Lattice spacing of the dynamic objects.
    pub spacing: f64,
    pub ground: Option<Ground>,
    /// Frames at which objects were teleported; frame `r` does not follow
    /// from frame `r - 1`.
    pub resets: Vec<usize>,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// One recorded frame. Velocities are per-step displacements and forces are
/// the external forces applied while advancing to the next frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub forces: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn n_particles(&self) -> usize {
        self.header.scene.len()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.header.scene.particles.iter().map(|p| p.mass).collect()
    }

    pub fn leaf_states(&self, frame: usize) -> Vec<Particle> {
        let f = &self.frames[frame];
        self.header
            .scene
            .particles
            .iter()
            .enumerate()
            .map(|(i, p)| Particle::new(f.positions[i], f.velocities[i], p.mass))
            .collect()
    }

    /// True when frames `from..=to` contain no teleport discontinuity.
    pub fn is_continuous(&self, from: usize, to: usize) -> bool {
        !self.header.resets.iter().any(|&r| r > from && r <= to)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_particles();
        if self.frames.len() < 2 {
            return invalid("a trajectory needs at least two frames");
        }
        if self.header.static_mask.len() != n || self.header.hierarchy.n_leaves() != n {
            return invalid("header arrays disagree with the particle count");
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.positions.len() != n || f.velocities.len() != n || f.forces.len() != n {
                return invalid(format!("frame {t} has the wrong particle count"));
            }
        }
        Ok(())
    }
}

struct World {
    scene: SceneGraph,
    static_mask: Vec<bool>,
    /// Particle index range of each dynamic object.
    ranges: Vec<std::ops::Range<usize>>,
    /// Shape-local lattice positions of every dynamic particle.
    local: Vec<Vec3>,
    ground: Option<Ground>,
}

fn build_world(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<World> {
    let mut scene = SceneGraph::default();
    let mut ranges = Vec::new();
    let mut local = Vec::new();
    for (o, spec) in cfg.objects.iter().enumerate() {
        let mut spec = *spec;
        if cfg.soft {
            spec.stiffness = rng.gen_range(0.1..0.9);
        }
        let frag = gen_shape(&spec)?;
        let offset = scene.append(&frag, o);
        ranges.push(offset..offset + frag.len());
        local.extend(frag.particles.iter().map(|p| p.position));
    }
    let mut static_mask = vec![false; scene.len()];
    let mut ground = None;
    if let Some(g) = &cfg.ground {
        let frag = gen_shape(g)?;
        scene.append(&frag, cfg.objects.len());
        static_mask.resize(scene.len(), true);
        let lattice = lattice_counts(g);
        let half = [
            (lattice[0] - 1) as f64 * g.spacing / 2.0,
            (lattice[2] - 1) as f64 * g.spacing / 2.0,
        ];
        ground = Some(Ground {
            height: cfg.sim.contact_distance,
            min: [-half[0], -half[1]],
            max: [half[0], half[1]],
        });
        for p in &mut scene.particles[static_mask.iter().position(|&s| s).unwrap()..] {
            p.mass = STATIC_MASS;
        }
    }
    Ok(World {
        scene,
        static_mask,
        ranges,
        local,
        ground,
    })
}

fn min_y(points: &[Vec3]) -> f64 {
    points.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min)
}

fn max_y(points: &[Vec3]) -> f64 {
    points.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max)
}

fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = math::ZERO;
    for p in points {
        math::add_assign(&mut c, *p);
    }
    math::scale(c, 1.0 / points.len() as f64)
}

fn unit(v: Vec3) -> Vec3 {
    let n = math::norm(v);
    if n == 0.0 {
        v
    } else {
        math::scale(v, 1.0 / n)
    }
}

/// Spreads a total force over the particles of one object with a Gaussian
/// kernel of width `2 * spacing` around `center`.
fn disperse(
    forces: &mut [Vec3],
    positions: &[Vec3],
    range: std::ops::Range<usize>,
    center: Vec3,
    total: Vec3,
    spacing: f64,
) {
    let sigma = 2.0 * spacing;
    let weights: Vec<f64> = range
        .clone()
        .map(|i| (-math::norm_sq(math::sub(positions[i], center)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return;
    }
    for (i, w) in range.zip(weights) {
        math::add_assign(&mut forces[i], math::scale(total, w / sum));
    }
}

struct Runner<'a> {
    name: ScenarioName,
    cfg: &'a ScenarioConfig,
    world: World,
    state: SimState,
    rng: ChaCha8Rng,
    spacing: f64,
    /// Room bounds for scenarios without a ground plane.
    room: f64,
}

impl Runner<'_> {
    fn object_positions(&self, o: usize) -> Vec<Vec3> {
        self.state.particles[self.world.ranges[o].clone()]
            .iter()
            .map(|p| p.position)
            .collect()
    }

    fn surface(&self) -> f64 {
        self.world.ground.map_or(0.0, |g| g.height)
    }

    /// Places object `o` with its lowest particle `lift` above the surface
    /// and its centroid at `(x, z)`, at rest and undeformed.
    fn place(&mut self, o: usize, x: f64, z: f64, lift: f64) {
        let range = self.world.ranges[o].clone();
        let local = &self.world.local[range.clone()];
        let c = centroid(local);
        let y = self.surface() + lift - min_y(local);
        for (k, i) in range.enumerate() {
            let p = &mut self.state.particles[i];
            p.position = [local[k][0] - c[0] + x, local[k][1] + y, local[k][2] - c[2] + z];
            p.velocity = math::ZERO;
        }
    }

    fn spawn_all(&mut self) {
        let n = self.cfg.objects.len();
        let r = self.cfg.spawn_radius;
        let [h0, h1] = self.cfg.spawn_height;
        match self.name {
            ScenarioName::Tower => {
                let mut lift = 0.0;
                for o in 0..n {
                    let jitter = 0.1 * self.spacing;
                    let x = self.rng.gen_range(-jitter..=jitter);
                    let z = self.rng.gen_range(-jitter..=jitter);
                    self.place(o, x, z, lift);
                    let top = max_y(&self.object_positions(o));
                    let gap = self.rng.gen_range(0.0..self.spacing / 20.0);
                    lift = top - self.surface() + self.cfg.sim.contact_distance + gap;
                }
            }
            ScenarioName::ClothHang => {
                let x = self.rng.gen_range(-r..=r);
                let y = self.rng.gen_range(0.6..0.9);
                let z = self.rng.gen_range(-r..=r);
                self.place(0, x, z, y);
            }
            _ => {
                // Spread objects along x so they start apart.
                let width = self.cfg.objects[0].extent[0] + 2.0 * self.spacing;
                for o in 0..n {
                    let base = (o as f64 - (n as f64 - 1.0) / 2.0) * width * 1.5;
                    let x = base + self.rng.gen_range(-r..=r);
                    let z = self.rng.gen_range(-r..=r);
                    let lift = self.rng.gen_range(h0..=h1);
                    self.place(o, x, z, lift);
                }
                if self.name == ScenarioName::ZeroGCollide {
                    for o in 0..n {
                        let v = [
                            self.rng.gen_range(-0.05..0.05),
                            self.rng.gen_range(-0.05..0.05),
                            self.rng.gen_range(-0.05..0.05),
                        ];
                        for i in self.world.ranges[o].clone() {
                            self.state.particles[i].velocity = v;
                        }
                    }
                }
            }
        }
    }

    fn out_of_bounds(&self) -> bool {
        (0..self.cfg.objects.len()).any(|o| {
            let c = centroid(&self.object_positions(o));
            match self.world.ground {
                Some(g) => !g.contains_xz(c) || c[1] < g.height - 0.5,
                None => c.iter().any(|v| v.abs() > self.room),
            }
        })
    }

    /// External forces for the transition out of the current frame.
    fn forces(&mut self) -> Vec<Vec3> {
        let mut f = vec![math::ZERO; self.state.particles.len()];
        let [m0, m1] = self.cfg.force_magnitude;
        if m1 <= 0.0 {
            return f;
        }
        let positions: Vec<Vec3> = self.state.particles.iter().map(|p| p.position).collect();
        let n = self.cfg.objects.len();
        let targets: Vec<usize> = match self.name {
            ScenarioName::ZeroGCollide | ScenarioName::MultiOnPlane if n > 1 => {
                if self.rng.gen_bool(0.5) {
                    (0..n).collect()
                } else {
                    vec![self.rng.gen_range(0..n)]
                }
            }
            ScenarioName::Tower => vec![self.rng.gen_range(0..n)],
            _ => (0..n).collect(),
        };
        let toward = self.rng.gen_bool(0.75);
        for o in targets {
            let range = self.world.ranges[o].clone();
            let pick = self.rng.gen_range(range.clone());
            let magnitude = self.rng.gen_range(m0..=m1);
            let c = centroid(&positions[range.clone()]);
            let dir = match self.name {
                ScenarioName::ThrowOne | ScenarioName::ClothDrop => unit([
                    self.rng.gen_range(-0.5..0.5),
                    1.0,
                    self.rng.gen_range(-0.5..0.5),
                ]),
                ScenarioName::ZeroGCollide | ScenarioName::MultiOnPlane => {
                    let others: Vec<Vec3> = (0..n)
                        .filter(|&k| k != o)
                        .map(|k| centroid(&positions[self.world.ranges[k].clone()]))
                        .collect();
                    let target = if others.is_empty() { math::ZERO } else { centroid(&others) };
                    let mut d = unit(math::sub(target, c));
                    if !toward {
                        d = math::scale(d, -1.0);
                    }
                    let mut noisy = [
                        d[0] + self.rng.gen_range(-0.2..0.2),
                        d[1] + self.rng.gen_range(-0.2..0.2),
                        d[2] + self.rng.gen_range(-0.2..0.2),
                    ];
                    if self.name == ScenarioName::MultiOnPlane {
                        noisy[1] = self.rng.gen_range(0.0..0.3);
                    }
                    unit(noisy)
                }
                ScenarioName::ClothHang => unit([
                    self.rng.gen_range(-1.0..1.0),
                    self.rng.gen_range(-0.3..0.3),
                    self.rng.gen_range(-1.0..1.0),
                ]),
                ScenarioName::Tower => {
                    let a: f64 = self.rng.gen_range(0.0..std::f64::consts::TAU);
                    [a.cos(), 0.0, a.sin()]
                }
            };
            disperse(&mut f, &positions, range, positions[pick], math::scale(dir, magnitude), self.spacing);
        }
        f
    }
}

fn cloth_row(local: &[Vec3]) -> usize {
    let x0 = local[0][0];
    local.iter().take_while(|p| p[0] == x0).count()
}

/// Generates one ground-truth trajectory. Frames are stored in the `f32`
/// domain so that a written file reads back identically.
pub fn gen_scenario(name: ScenarioName, cfg: &ScenarioConfig, seed: u64, n_frames: usize) -> Result<Trajectory> {
    if n_frames < 2 {
        return invalid(format!("a trajectory needs at least 2 frames, got {n_frames}"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = build_world(cfg, &mut rng)?;
    let spacing = cfg.objects[0].spacing;
    let state = SimState::from_scene(&world.scene, world.static_mask.clone(), cfg.gravity, world.ground)?;
    let mut runner = Runner {
        name,
        cfg,
        world,
        state,
        rng,
        spacing,
        room: 1.5,
    };
    if name == ScenarioName::ClothHang {
        // Pin the two corners on the first lattice row.
        let range = runner.world.ranges[0].clone();
        let row = cloth_row(&runner.world.local[range.clone()]);
        for c in [range.start, range.start + row - 1] {
            runner.state.static_mask[c] = true;
            runner.state.particles[c].mass = STATIC_MASS;
        }
    }
    runner.spawn_all();

    let mut scene = runner.world.scene.clone();
    for (p, s) in scene.particles.iter_mut().zip(&runner.state.particles) {
        p.position = math::to_f32_domain(s.position);
        p.mass = s.mass;
    }
    let static_mask = runner.state.static_mask.clone();
    let hierarchy = build_hierarchy(&scene, &cfg.hierarchy)?;

    let dt = cfg.sim.dt;
    let sub_dt = dt / cfg.sim.substeps as f64;
    let mut frames: Vec<Frame> = Vec::with_capacity(n_frames);
    let mut resets = Vec::new();
    let mut next_force = runner.rng.gen_range(cfg.force_interval[0]..=cfg.force_interval[1]);
    let mut reset_now = true;
    for t in 0..n_frames {
        let positions: Vec<Vec3> = runner
            .state
            .particles
            .iter()
            .map(|p| math::to_f32_domain(p.position))
            .collect();
        let velocities: Vec<Vec3> = if reset_now {
            runner
                .state
                .particles
                .iter()
                .map(|p| math::to_f32_domain(math::scale(p.velocity, dt)))
                .collect()
        } else {
            let prev = &frames[t - 1].positions;
            positions
                .iter()
                .zip(prev)
                .map(|(a, b)| math::to_f32_domain(math::sub(*a, *b)))
                .collect()
        };
        reset_now = false;
        let forces = if t == next_force && t + 1 < n_frames {
            next_force = t + runner.rng.gen_range(cfg.force_interval[0]..=cfg.force_interval[1]);
            runner.forces().into_iter().map(math::to_f32_domain).collect()
        } else {
            vec![math::ZERO; positions.len()]
        };
        if t + 1 < n_frames {
            for _ in 0..cfg.sim.substeps {
                runner.state = step(&runner.state, sub_dt, &forces, &cfg.sim)?;
            }
            if runner.out_of_bounds() {
                runner.spawn_all();
                resets.push(t + 1);
                reset_now = true;
            }
        }
        frames.push(Frame {
            positions,
            velocities,
            forces,
        });
    }

    Ok(Trajectory {
        header: TrajectoryHeader {
            scenario: name.as_str().to_string(),
            seed,
            dt,
            gravity: cfg.gravity,
            scene,
            static_mask,
            hierarchy,
            spacing,
            ground: runner.world.ground,
            resets,
            config: serde_json::to_value(cfg).unwrap_or_default(),
        },
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(kind: ShapeKind, extent: Vec3, spacing: f64) -> ShapeSpec {
        ShapeSpec {
            kind,
            extent,
            spacing,
            stiffness: 1.0,
            mass_total: 1.0,
        }
    }

    #[test]
    fn lattice_counts_match_closed_form() {
        assert_eq!(gen_shape(&shape(ShapeKind::Cube, [2.0; 3], 1.0)).unwrap().len(), 27);
        assert_eq!(gen_shape(&shape(ShapeKind::Plane, [10.0, 0.0, 10.0], 1.0)).unwrap().len(), 121);
        assert_eq!(gen_shape(&shape(ShapeKind::Sphere, [2.0; 3], 1.0)).unwrap().len(), 7);
    }

    #[test]
    fn shape_mass_and_relations() {
        let g = gen_shape(&ShapeSpec::cube(0.2, 0.1)).unwrap();
        for p in &g.particles {
            assert!((p.mass - 1.0 / 27.0).abs() < 1e-15);
        }
        // 3x3x3 lattice: 54 face, 72 face-diagonal, 32 body-diagonal pairs.
        assert_eq!(g.relations.len(), 2 * (54 + 72 + 32));
        assert!(g.relations.iter().all(|r| r.material == vec![1.0]));
    }

    #[test]
    fn other_kinds_produce_particles() {
        for kind in [ShapeKind::Slope, ShapeKind::Stairs, ShapeKind::Cuboid, ShapeKind::ClothSheet] {
            let ext = if kind == ShapeKind::ClothSheet { [0.4, 0.0, 0.4] } else { [0.6, 0.3, 0.3] };
            let g = gen_shape(&shape(kind, ext, 0.1)).unwrap();
            assert!(!g.is_empty(), "{kind:?}");
            g.validate().unwrap();
        }
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        let mut s = ShapeSpec::cube(0.2, 0.1);
        s.stiffness = 0.0;
        assert!(gen_shape(&s).is_err());
        let s = ShapeSpec::cube(0.2, 0.5);
        assert!(gen_shape(&s).is_err());
    }

    fn lone_particle(gravity: Vec3) -> SimState {
        let scene = SceneGraph {
            particles: vec![Particle::at_rest([0.0, 5.0, 0.0], 1.0)],
            relations: vec![],
            object_id: vec![0],
        };
        SimState::from_scene(&scene, vec![false], gravity, None).unwrap()
    }

    #[test]
    fn free_fall_single_step() {
        let s = lone_particle([0.0, -10.0, 0.0]);
        let next = step(&s, 0.01, &[math::ZERO], &SimParams::default()).unwrap();
        let p = next.particles[0];
        assert!((p.velocity[1] + 0.1).abs() < 1e-15);
        assert!((p.position[1] - (5.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn resting_state_without_gravity_is_a_fixed_point() {
        let g = gen_shape(&ShapeSpec::cube(0.2, 0.1)).unwrap();
        let s = SimState::from_scene(&g, vec![false; g.len()], math::ZERO, None).unwrap();
        let next = step(&s, 0.01, &vec![math::ZERO; g.len()], &SimParams::default()).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn nan_input_is_rejected() {
        let s = lone_particle([0.0; 3]);
        assert!(step(&s, 0.01, &[[f64::NAN, 0.0, 0.0]], &SimParams::default()).is_err());
        assert!(step(&s, 0.0, &[math::ZERO], &SimParams::default()).is_err());
    }

    #[test]
    fn spring_pair_conserves_momentum() {
        let scene = SceneGraph {
            particles: vec![
                Particle::new([0.0; 3], [0.3, -0.1, 0.2], 0.7),
                Particle::new([0.12, 0.01, 0.0], [-0.2, 0.4, 0.0], 1.3),
            ],
            relations: vec![
                Relation::new(0, 1, vec![1.0], RelationKind::Material),
                Relation::new(1, 0, vec![1.0], RelationKind::Material),
            ],
            object_id: vec![0, 0],
        };
        let mut s = SimState::from_scene(&scene, vec![false, false], math::ZERO, None).unwrap();
        s.springs[0].rest_length = 0.1;
        let params = SimParams::default();
        let p0 = s.momentum();
        for _ in 0..1000 {
            let prev = s.momentum();
            s = step(&s, 1e-3, &[math::ZERO; 2], &params).unwrap();
            let now = s.momentum();
            assert!(math::norm(math::sub(now, prev)) < 1e-10 * math::norm(p0).max(1.0));
        }
    }

    #[test]
    fn ground_contact_reflects_and_loses_energy() {
        let mut s = lone_particle([0.0; 3]);
        s.particles[0].position = [0.0, 0.105, 0.0];
        s.particles[0].velocity = [0.5, -2.0, 0.0];
        s.ground = Some(Ground {
            height: 0.1,
            min: [-1.0, -1.0],
            max: [1.0, 1.0],
        });
        let params = SimParams::default();
        let before = s.kinetic_energy();
        let next = step(&s, 0.01, &[math::ZERO], &params).unwrap();
        assert_eq!(next.particles[0].position[1], 0.1);
        assert!((next.particles[0].velocity[1] - 0.8).abs() < 1e-12);
        assert!(next.kinetic_energy() <= before);
    }

    #[test]
    fn rigid_cube_deforms_less_than_one_percent_under_weight() {
        let cfg = ScenarioConfig {
            force_magnitude: [0.0, 0.0],
            spawn_height: [0.0, 0.0],
            ..ScenarioConfig::defaults(ScenarioName::ThrowOne)
        };
        let traj = gen_scenario(ScenarioName::ThrowOne, &cfg, 1, 180).unwrap();
        let last = traj.frames.last().unwrap();
        let first = &traj.frames[0];
        let edge = 0.2;
        for r in &traj.header.scene.relations {
            if r.sender >= 27 || r.receiver >= 27 {
                continue;
            }
            let d0 = math::norm(math::sub(first.positions[r.sender], first.positions[r.receiver]));
            let d1 = math::norm(math::sub(last.positions[r.sender], last.positions[r.receiver]));
            assert!((d1 - d0).abs() < 0.01 * edge, "{} -> {}", d0, d1);
        }
    }

    #[test]
    fn throw_one_counts() {
        let cfg = ScenarioConfig::defaults(ScenarioName::ThrowOne);
        let t = gen_scenario(ScenarioName::ThrowOne, &cfg, 3, 200).unwrap();
        t.validate().unwrap();
        assert_eq!(t.n_particles(), 148);
        assert_eq!(t.n_frames(), 200);
        let forced = t
            .frames
            .iter()
            .filter(|f| f.forces.iter().any(|v| math::norm(*v) > 0.0))
            .count();
        assert!(forced >= 1);
    }

    #[test]
    fn unknown_scenario_name() {
        assert!(matches!("bogus".parse::<ScenarioName>(), Err(Error::InvalidArgument(_))));
        assert_eq!("cloth-hang".parse::<ScenarioName>().unwrap(), ScenarioName::ClothHang);
    }

    #[test]
    fn too_few_frames() {
        let cfg = ScenarioConfig::defaults(ScenarioName::ThrowOne);
        assert!(gen_scenario(ScenarioName::ThrowOne, &cfg, 0, 1).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        for name in ScenarioName::ALL {
            let cfg = ScenarioConfig::defaults(name);
            let a = gen_scenario(name, &cfg, 11, 60).unwrap();
            let b = gen_scenario(name, &cfg, 11, 60).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn no_scenario_penetrates_the_ground() {
        for name in ScenarioName::ALL {
            let cfg = ScenarioConfig::defaults(name);
            let t = gen_scenario(name, &cfg, 5, 240).unwrap();
            let Some(g) = t.header.ground else { continue };
            for f in &t.frames {
                for (i, p) in f.positions.iter().enumerate() {
                    if !t.header.static_mask[i] && g.contains_xz(*p) {
                        assert!(p[1] >= g.height - 1e-6, "{name}: {}", p[1]);
                    }
                }
            }
        }
    }

    #[test]
    fn tower_starts_stacked_with_small_gaps() {
        let cfg = ScenarioConfig::defaults(ScenarioName::Tower);
        let t = gen_scenario(ScenarioName::Tower, &cfg, 9, 2).unwrap();
        let f = &t.frames[0];
        let objects = t.header.scene.objects();
        for o in 0..4 {
            let lower = &objects[&o];
            let upper = &objects[&(o + 1)];
            assert_eq!(lower.len(), 8);
            let top = lower.iter().map(|&i| f.positions[i][1]).fold(f64::MIN, f64::max);
            let bottom = upper.iter().map(|&i| f.positions[i][1]).fold(f64::MAX, f64::min);
            let gap = bottom - top - cfg.sim.contact_distance;
            assert!(gap >= -1e-6 && gap < t.header.spacing / 10.0, "gap {gap}");
        }
    }

    #[test]
    fn zero_g_drift_is_linear_without_forces() {
        let cfg = ScenarioConfig {
            force_magnitude: [0.0, 0.0],
            ..ScenarioConfig::defaults(ScenarioName::ZeroGCollide)
        };
        let t = gen_scenario(ScenarioName::ZeroGCollide, &cfg, 2, 30).unwrap();
        assert!(t.header.resets.is_empty());
        for i in 0..t.n_particles() {
            let x0 = t.frames[0].positions[i];
            let x1 = t.frames[1].positions[i];
            for (k, f) in t.frames.iter().enumerate() {
                for a in 0..3 {
                    let expect = x0[a] + k as f64 * (x1[a] - x0[a]);
                    assert!((f.positions[i][a] - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn kinetic_energy_does_not_grow_through_contact() {
        let cube = gen_shape(&ShapeSpec::cube(0.2, 0.1)).unwrap();
        let mut scene = SceneGraph::default();
        scene.append(&cube, 0);
        scene.append(&cube, 1);
        for i in 0..27 {
            scene.particles[i].position[0] -= 0.16;
            scene.particles[i].velocity = [1.0, 0.0, 0.0];
            scene.particles[27 + i].position[0] += 0.16;
            scene.particles[27 + i].velocity = [-1.0, 0.0, 0.0];
        }
        let params = SimParams {
            damping_ratio: 0.0,
            contact_distance: 0.1,
            ..SimParams::default()
        };
        let mut s = SimState::from_scene(&scene, vec![false; 54], math::ZERO, None).unwrap();
        let zero = vec![math::ZERO; 54];
        let before = s.kinetic_energy();
        let mut touched = false;
        for _ in 0..200 {
            s = step(&s, 1e-3, &zero, &params).unwrap();
            touched |= s.particles[0].velocity[0] < 0.9;
        }
        assert!(touched);
        // Undamped springs trade kinetic for elastic energy, so compare total
        // mechanical energy.
        let elastic: f64 = s
            .springs
            .iter()
            .map(|sp| {
                let m = s.particles[sp.i].mass.min(s.particles[sp.j].mass);
                let k = sp.stiffness * m * params.spring_frequency.powi(2);
                let len = math::norm(math::sub(s.particles[sp.i].position, s.particles[sp.j].position));
                0.5 * k * (len - sp.rest_length).powi(2)
            })
            .sum();
        assert!(s.kinetic_energy() + elastic <= before * (1.0 + 1e-6));
    }
}
