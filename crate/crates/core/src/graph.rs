//! Particle scene graphs and the hierarchical grouping that turns each object
//! into a tree of aggregated super-particles.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{self, Vec3};

/// Physical state of one node: position, per-step velocity and mass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub position: Vec3,
    pub velocity: Vec3,
    pub mass: f64,
}

impl Particle {
    pub fn new(position: Vec3, velocity: Vec3, mass: f64) -> Self {
        Self {
            position,
            velocity,
            mass,
        }
    }

    pub fn at_rest(position: Vec3, mass: f64) -> Self {
        Self::new(position, math::ZERO, mass)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) || !self.mass.is_finite() {
            return invalid(format!("particle mass must be positive and finite, got {}", self.mass));
        }
        if !math::is_finite(self.position) || !math::is_finite(self.velocity) {
            return invalid("particle state has non-finite components");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationKind {
    /// Intra-object material edge of the flat scene graph.
    Material,
    WithinSibling,
    LeafToAncestor,
    AncestorToDescendant,
    Collision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub sender: usize,
    pub receiver: usize,
    pub material: Vec<f64>,
    pub kind: RelationKind,
}

impl Relation {
    pub fn new(sender: usize, receiver: usize, material: Vec<f64>, kind: RelationKind) -> Self {
        Self {
            sender,
            receiver,
            material,
            kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sender == self.receiver {
            return invalid(format!("relation sender and receiver are both {}", self.sender));
        }
        if self.material.iter().any(|m| !m.is_finite()) {
            return invalid("relation material has non-finite components");
        }
        if self.kind == RelationKind::Collision && self.material.iter().any(|&m| m != 0.0) {
            return invalid("collision relations carry a zero material vector");
        }
        Ok(())
    }
}

/// Flat leaf-level scene: particles, intra-object material relations and the
/// object label of every particle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub particles: Vec<Particle>,
    pub relations: Vec<Relation>,
    pub object_id: Vec<usize>,
}

impl SceneGraph {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Dimension K of the material vectors (1 when the scene has no relations).
    pub fn material_dim(&self) -> usize {
        self.relations.first().map_or(1, |r| r.material.len().max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_id.len() != self.particles.len() {
            return invalid(format!(
                "{} object ids for {} particles",
                self.object_id.len(),
                self.particles.len()
            ));
        }
        for p in &self.particles {
            p.validate()?;
        }
        let k = self.material_dim();
        for r in &self.relations {
            r.validate()?;
            if r.sender >= self.len() || r.receiver >= self.len() {
                return invalid(format!("relation {}->{} out of range", r.sender, r.receiver));
            }
            if self.object_id[r.sender] != self.object_id[r.receiver] {
                return invalid(format!(
                    "relation {}->{} crosses objects",
                    r.sender, r.receiver
                ));
            }
            if r.material.len() != k || k == 0 {
                return invalid("relations must share one material dimension K >= 1");
            }
        }
        Ok(())
    }

    /// Particle ids per object, ordered by object label.
    pub fn objects(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &o) in self.object_id.iter().enumerate() {
            out.entry(o).or_default().push(i);
        }
        out
    }

    fn is_connected(&self, members: &[usize]) -> bool {
        if members.len() <= 1 {
            return true;
        }
        let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for r in &self.relations {
            adj.entry(r.sender).or_default().push(r.receiver);
            adj.entry(r.receiver).or_default().push(r.sender);
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([members[0]]);
        seen.insert(members[0]);
        while let Some(n) = queue.pop_front() {
            for &m in adj.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen.len() == members.len()
    }

    /// Appends another fragment under a fresh object label, returning the id
    /// offset of the appended particles.
    pub fn append(&mut self, fragment: &SceneGraph, object: usize) -> usize {
        let offset = self.particles.len();
        self.particles.extend_from_slice(&fragment.particles);
        self.object_id
            .extend(std::iter::repeat_n(object, fragment.particles.len()));
        self.relations.extend(fragment.relations.iter().map(|r| Relation {
            sender: r.sender + offset,
            receiver: r.receiver + offset,
            ..r.clone()
        }));
        offset
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    /// Target cluster size N_C.
    pub cluster_size: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            cluster_size: 8,
            kmeans_iters: 50,
            seed: 0,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cluster_size < 2 {
            return invalid(format!("cluster_size must be >= 2, got {}", self.cluster_size));
        }
        if self.kmeans_iters == 0 {
            return invalid("kmeans_iters must be positive");
        }
        Ok(())
    }
}

fn dist_sq(a: Vec3, b: Vec3) -> f64 {
    math::norm_sq(math::sub(a, b))
}

/// Lloyd k-means with farthest-point seeding.
///
/// The first centroid is a point drawn from a ChaCha8 stream seeded with
/// `seed`; each further centroid is the point farthest from all centroids so
/// far. Ties always resolve to the lowest index. A cluster left empty after
/// an assignment pass is re-seeded with the point farthest from its own
/// centroid (taken from a cluster with more than one member).
pub fn kmeans_cluster(points: &[Vec3], k: usize, seed: u64, max_iters: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k < 1 || k > n {
        return invalid(format!("k-means needs 1 <= k <= {n}, got k = {k}"));
    }
    if points.iter().any(|p| !math::is_finite(*p)) {
        return invalid("k-means points must be finite");
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    let mut centroids = vec![points[first]];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist_sq(*p, points[first])).collect();
    while centroids.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        let c = points[best];
        centroids.push(c);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(dist_sq(*p, c));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    for _ in 0..max_iters.max(1) {
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = dist_sq(*p, centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = dist_sq(*p, *centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            next[i] = best;
        }

        let mut counts = vec![0usize; k];
        for &a in &next {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut pick = None;
            let mut pick_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                if counts[next[i]] < 2 {
                    continue;
                }
                let d = dist_sq(*p, centroids[next[i]]);
                if d > pick_d {
                    pick = Some(i);
                    pick_d = d;
                }
            }
            // k <= n guarantees some cluster still has two members.
            let i = pick.expect("k <= n leaves a cluster with at least two members");
            counts[next[i]] -= 1;
            next[i] = c;
            counts[c] = 1;
            centroids[c] = points[i];
        }

        let changed = next != assign;
        assign.copy_from_slice(&next);

        let mut sums = vec![[0.0; 3]; k];
        for (p, &a) in points.iter().zip(&assign) {
            math::add_assign(&mut sums[a], *p);
        }
        for c in 0..k {
            centroids[c] = math::scale(sums[c], 1.0 / counts[c] as f64);
        }
        if !changed {
            break;
        }
    }
    Ok(assign)
}

/// Aggregate state of a group: unweighted mean position and velocity,
/// summed mass.
pub fn aggregate_node(children: &[Particle]) -> Result<Particle> {
    if children.is_empty() {
        return invalid("cannot aggregate an empty set of particles");
    }
    Ok(aggregate_unchecked(children.iter()))
}

fn aggregate_unchecked<'a>(children: impl Iterator<Item = &'a Particle>) -> Particle {
    let mut pos = math::ZERO;
    let mut vel = math::ZERO;
    let mut mass = 0.0;
    let mut count = 0usize;
    for c in children {
        math::add_assign(&mut pos, c.position);
        math::add_assign(&mut vel, c.velocity);
        mass += c.mass;
        count += 1;
    }
    let inv = 1.0 / count as f64;
    Particle::new(math::scale(pos, inv), math::scale(vel, inv), mass)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KinKind {
    Sib,
    Anc,
    Par,
    Des,
    Leaves,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HierarchyParts {
    nodes: Vec<Particle>,
    level: Vec<usize>,
    parent: Vec<Option<usize>>,
    object_id: Vec<usize>,
    relations: Vec<Relation>,
    n_leaves: usize,
}

/// Hierarchical scene digraph. Nodes are ordered leaves first, then
/// intermediates, then one root per object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HierarchyParts", into = "HierarchyParts")]
pub struct HierarchyGraph {
    nodes: Vec<Particle>,
    level: Vec<usize>,
    parent: Vec<Option<usize>>,
    object_id: Vec<usize>,
    relations: Vec<Relation>,
    n_leaves: usize,

    children: Vec<Vec<usize>>,
    leaves_of: Vec<Vec<usize>>,
    siblings: Vec<Vec<usize>>,
    roots: Vec<usize>,
}

impl TryFrom<HierarchyParts> for HierarchyGraph {
    type Error = Error;

    fn try_from(p: HierarchyParts) -> Result<Self> {
        HierarchyGraph::from_parts(p.nodes, p.level, p.parent, p.object_id, p.relations, p.n_leaves)
    }
}

impl From<HierarchyGraph> for HierarchyParts {
    fn from(h: HierarchyGraph) -> Self {
        HierarchyParts {
            nodes: h.nodes,
            level: h.level,
            parent: h.parent,
            object_id: h.object_id,
            relations: h.relations,
            n_leaves: h.n_leaves,
        }
    }
}

impl HierarchyGraph {
    pub fn from_parts(
        nodes: Vec<Particle>,
        level: Vec<usize>,
        parent: Vec<Option<usize>>,
        object_id: Vec<usize>,
        relations: Vec<Relation>,
        n_leaves: usize,
    ) -> Result<Self> {
        let n = nodes.len();
        if level.len() != n || parent.len() != n || object_id.len() != n || n_leaves > n {
            return invalid("hierarchy arrays disagree in length");
        }
        let mut children = vec![Vec::new(); n];
        let mut roots = Vec::new();
        for (i, p) in parent.iter().enumerate() {
            match *p {
                Some(q) => {
                    if q >= n || q == i || object_id[q] != object_id[i] || level[q] <= level[i] {
                        return invalid(format!("node {i} has an invalid parent {q}"));
                    }
                    children[q].push(i);
                }
                None => {
                    if i < n_leaves {
                        return invalid(format!("leaf {i} has no parent"));
                    }
                    roots.push(i);
                }
            }
        }
        for (i, &l) in level.iter().enumerate() {
            if (i < n_leaves) != (l == 0) {
                return invalid(format!("node {i} has level {l} inconsistent with leaf count"));
            }
        }
        for r in &relations {
            r.validate()?;
            if r.sender >= n || r.receiver >= n || object_id[r.sender] != object_id[r.receiver] {
                return invalid(format!("kinship relation {}->{} is invalid", r.sender, r.receiver));
            }
        }

        // Children always sit at a strictly lower level, so visiting nodes by
        // ascending level fills every child's leaf set before its parent's.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (level[i], i));
        let mut leaves_of: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &i in &order {
            if i < n_leaves {
                continue;
            }
            let mut acc = Vec::new();
            for &c in &children[i] {
                if c < n_leaves {
                    acc.push(c);
                } else {
                    acc.extend_from_slice(&leaves_of[c]);
                }
            }
            acc.sort_unstable();
            if acc.is_empty() {
                return invalid(format!("non-leaf node {i} has no leaves"));
            }
            leaves_of[i] = acc;
        }

        let mut siblings = vec![Vec::new(); n];
        for r in &relations {
            if r.kind == RelationKind::WithinSibling {
                siblings[r.receiver].push(r.sender);
            }
        }
        for s in &mut siblings {
            s.sort_unstable();
            s.dedup();
        }

        Ok(Self {
            nodes,
            level,
            parent,
            object_id,
            relations,
            n_leaves,
            children,
            leaves_of,
            siblings,
            roots,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn nodes(&self) -> &[Particle] {
        &self.nodes
    }

    pub fn level(&self, node: usize) -> usize {
        self.level[node]
    }

    pub fn levels(&self) -> &[usize] {
        &self.level
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn object_id(&self, node: usize) -> usize {
        self.object_id[node]
    }

    pub fn object_ids(&self) -> &[usize] {
        &self.object_id
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// Leaf descendants of `node` (empty for a leaf).
    pub fn leaves_of(&self, node: usize) -> &[usize] {
        &self.leaves_of[node]
    }

    pub fn siblings(&self, node: usize) -> &[usize] {
        &self.siblings[node]
    }

    pub fn is_root(&self, node: usize) -> bool {
        self.parent[node].is_none()
    }

    pub fn root_of(&self, mut node: usize) -> usize {
        while let Some(p) = self.parent[node] {
            node = p;
        }
        node
    }

    /// Ancestors from the direct parent up to the root.
    pub fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = node;
        while let Some(p) = self.parent[cur] {
            out.push(p);
            cur = p;
        }
        out
    }

    pub fn max_level(&self) -> usize {
        self.level.iter().copied().max().unwrap_or(0)
    }

    /// Kinship query; results are sorted by node id.
    pub fn kin(&self, node: usize, kind: KinKind) -> Result<Vec<usize>> {
        if node >= self.len() {
            return invalid(format!("unknown node id {node}"));
        }
        let mut out = match kind {
            KinKind::Sib => self.siblings[node].clone(),
            KinKind::Anc => self.ancestors(node),
            KinKind::Par => self.parent[node].into_iter().collect(),
            KinKind::Leaves => self.leaves_of[node].clone(),
            KinKind::Des => {
                let mut acc = Vec::new();
                let mut stack = self.children[node].clone();
                while let Some(c) = stack.pop() {
                    acc.push(c);
                    stack.extend_from_slice(&self.children[c]);
                }
                acc
            }
        };
        out.sort_unstable();
        Ok(out)
    }

    /// Node states for one frame: leaves copied, every other node
    /// re-aggregated from its current leaf states.
    pub fn reaggregate(&self, leaves: &[Particle]) -> Result<Vec<Particle>> {
        if leaves.len() != self.n_leaves {
            return invalid(format!(
                "expected {} leaf states, got {}",
                self.n_leaves,
                leaves.len()
            ));
        }
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(leaves);
        for i in self.n_leaves..self.len() {
            out.push(aggregate_unchecked(self.leaves_of[i].iter().map(|&l| &leaves[l])));
        }
        Ok(out)
    }

    /// Number of kinship edges whose endpoints belong to `object`.
    pub fn edge_count(&self, object: usize) -> usize {
        self.relations
            .iter()
            .filter(|r| self.object_id[r.sender] == object)
            .count()
    }
}

struct ObjectBuilder {
    parent: Vec<Option<usize>>,
    leaves_of: Vec<Vec<usize>>,
    states: Vec<Particle>,
    edges: BTreeSet<(usize, usize, RelationKind)>,
}

impl ObjectBuilder {
    fn new_node(&mut self, leaves: Vec<usize>, parent: Option<usize>) -> usize {
        let state = aggregate_unchecked(leaves.iter().map(|&l| &self.states[l]));
        let id = self.states.len();
        self.states.push(state);
        self.parent.push(parent);
        self.leaves_of.push(leaves);
        id
    }

    fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = node;
        while let Some(p) = self.parent[cur] {
            out.push(p);
            cur = p;
        }
        out
    }
}

fn split_seed(base: u64, object: usize, split: usize) -> u64 {
    base ^ (object as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (split as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Builds the hierarchical scene graph by iterative k-means grouping.
///
/// Every object gets a root over all of its leaves. A node with at least
/// `cluster_size` leaves is split into `cluster_size` k-means groups; each
/// multi-leaf group becomes a new node wired to all of its ancestors and
/// leaves and is queued for further splitting, while singleton groups keep
/// their leaf as a direct child. The new nodes and singleton leaves of one
/// split form a sibling clique; a node too small to split makes its leaves a
/// clique instead.
pub fn build_hierarchy(scene: &SceneGraph, cfg: &HierarchyConfig) -> Result<HierarchyGraph> {
    scene.validate()?;
    cfg.validate()?;
    let n_leaves = scene.len();
    let objects = scene.objects();
    for (o, members) in &objects {
        if !scene.is_connected(members) {
            return invalid(format!("object {o} is not connected; split it into separate objects first"));
        }
    }

    let mut b = ObjectBuilder {
        parent: vec![None; n_leaves],
        leaves_of: vec![Vec::new(); n_leaves],
        states: scene.particles.clone(),
        edges: BTreeSet::new(),
    };
    let mut temp_roots = Vec::new();
    let mut temp_object = vec![0usize; n_leaves];
    for (i, &o) in scene.object_id.iter().enumerate() {
        temp_object[i] = o;
    }

    for (&o, members) in &objects {
        let root = b.new_node(members.clone(), None);
        temp_object.push(o);
        temp_roots.push(root);
        for &l in members {
            b.parent[l] = Some(root);
            b.edges.insert((root, l, RelationKind::AncestorToDescendant));
            b.edges.insert((l, root, RelationKind::LeafToAncestor));
        }

        let mut queue = VecDeque::from([root]);
        let mut split_index = 0usize;
        while let Some(cur) = queue.pop_front() {
            let leaves = b.leaves_of[cur].clone();
            let members_of_split: Vec<usize> = if leaves.len() >= cfg.cluster_size {
                let points: Vec<Vec3> = leaves.iter().map(|&l| b.states[l].position).collect();
                let assign = kmeans_cluster(
                    &points,
                    cfg.cluster_size,
                    split_seed(cfg.seed, o, split_index),
                    cfg.kmeans_iters,
                )?;
                split_index += 1;
                let mut groups = vec![Vec::new(); cfg.cluster_size];
                for (&l, &a) in leaves.iter().zip(&assign) {
                    groups[a].push(l);
                }
                let mut set = Vec::new();
                for group in groups {
                    if group.len() > 1 {
                        let s = b.new_node(group.clone(), Some(cur));
                        temp_object.push(o);
                        for anc in b.ancestors(s) {
                            b.edges.insert((anc, s, RelationKind::AncestorToDescendant));
                        }
                        for &l in &group {
                            b.parent[l] = Some(s);
                            b.edges.insert((s, l, RelationKind::AncestorToDescendant));
                            b.edges.insert((l, s, RelationKind::LeafToAncestor));
                        }
                        set.push(s);
                        queue.push_back(s);
                    } else {
                        set.extend(group);
                    }
                }
                set
            } else {
                leaves
            };
            for &i in &members_of_split {
                for &j in &members_of_split {
                    if i != j {
                        b.edges.insert((i, j, RelationKind::WithinSibling));
                    }
                }
            }
        }
    }

    // Renumber: leaves keep their ids, intermediates follow in creation
    // order, roots come last in object order.
    let total = b.states.len();
    let root_set: BTreeSet<usize> = temp_roots.iter().copied().collect();
    let mut remap = vec![usize::MAX; total];
    let mut next = 0;
    for (i, slot) in remap.iter_mut().enumerate().take(n_leaves) {
        *slot = i;
        next = i + 1;
    }
    for (i, slot) in remap.iter_mut().enumerate().skip(n_leaves) {
        if !root_set.contains(&i) {
            *slot = next;
            next += 1;
        }
    }
    for &r in &temp_roots {
        remap[r] = next;
        next += 1;
    }

    let mut nodes = vec![Particle::at_rest(math::ZERO, 1.0); total];
    let mut parent = vec![None; total];
    let mut object_id = vec![0; total];
    let mut leaves_of = vec![Vec::new(); total];
    for old in 0..total {
        let new = remap[old];
        nodes[new] = b.states[old];
        parent[new] = b.parent[old].map(|p| remap[p]);
        object_id[new] = temp_object[old];
        leaves_of[new] = b.leaves_of[old].clone();
    }

    // Height: leaves are level 0, every other node sits one above its
    // highest child. Children are created after their parents, so a pass
    // over decreasing creation order sees every child first.
    let mut temp_children = vec![Vec::new(); total];
    for (old, p) in b.parent.iter().enumerate() {
        if let Some(p) = *p {
            temp_children[p].push(old);
        }
    }
    let mut temp_level = vec![0usize; total];
    for old in (n_leaves..total).rev() {
        temp_level[old] = 1 + temp_children[old].iter().map(|&c| temp_level[c]).max().unwrap_or(0);
    }
    let mut level = vec![0usize; total];
    for old in 0..total {
        level[remap[old]] = temp_level[old];
    }

    let k = scene.material_dim();
    let materials = MaterialTable::new(scene, &leaves_of, &parent, n_leaves, k);
    let mut relations: Vec<Relation> = b
        .edges
        .iter()
        .map(|&(s, r, kind)| {
            let (s, r) = (remap[s], remap[r]);
            Relation::new(s, r, materials.edge(s, r), kind)
        })
        .collect();
    relations.sort_by_key(|a| (a.kind, a.sender, a.receiver));

    HierarchyGraph::from_parts(nodes, level, parent, object_id, relations, n_leaves)
}

/// Material vectors for kinship edges. Leaf-leaf edges reuse the direct
/// material relation when one exists; every other edge gets the mean of its
/// endpoints' node materials, where a node's material is the mean over the
/// material relations among its leaves.
struct MaterialTable {
    direct: BTreeMap<(usize, usize), Vec<f64>>,
    node: Vec<Vec<f64>>,
}

impl MaterialTable {
    fn new(
        scene: &SceneGraph,
        leaves_of: &[Vec<usize>],
        parent: &[Option<usize>],
        n_leaves: usize,
        k: usize,
    ) -> Self {
        let total = leaves_of.len();
        let mut direct = BTreeMap::new();
        let mut sum = vec![vec![0.0; k]; total];
        let mut cnt = vec![0usize; total];
        let chain = |mut n: usize| {
            let mut out = Vec::new();
            while let Some(p) = parent[n] {
                out.push(p);
                n = p;
            }
            out
        };
        for r in &scene.relations {
            direct.insert((r.sender, r.receiver), r.material.clone());
            let add = |node: usize, sum: &mut Vec<Vec<f64>>, cnt: &mut Vec<usize>| {
                for (acc, m) in sum[node].iter_mut().zip(&r.material) {
                    *acc += m;
                }
                cnt[node] += 1;
            };
            add(r.sender, &mut sum, &mut cnt);
            add(r.receiver, &mut sum, &mut cnt);
            // Every common ancestor contains both endpoints among its leaves.
            let from_sender: BTreeSet<usize> = chain(r.sender).into_iter().collect();
            for a in chain(r.receiver) {
                if from_sender.contains(&a) {
                    add(a, &mut sum, &mut cnt);
                }
            }
        }
        let mut node: Vec<Vec<f64>> = (0..total)
            .map(|i| sum[i].iter().map(|v| v / cnt[i].max(1) as f64).collect())
            .collect();
        for i in n_leaves..total {
            if cnt[i] == 0 {
                let leaves = &leaves_of[i];
                let mut acc = vec![0.0; k];
                for &l in leaves {
                    for (a, m) in acc.iter_mut().zip(&node[l]) {
                        *a += m;
                    }
                }
                node[i] = acc.iter().map(|v| v / leaves.len() as f64).collect();
            }
        }
        Self { direct, node }
    }

    fn edge(&self, s: usize, r: usize) -> Vec<f64> {
        if let Some(m) = self.direct.get(&(s, r)) {
            return m.clone();
        }
        self.node[s]
            .iter()
            .zip(&self.node[r])
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn grid_object(nx: usize, ny: usize, nz: usize, spacing: f64) -> SceneGraph {
        let mut particles = Vec::new();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    particles.push(Particle::at_rest(
                        [x as f64 * spacing, y as f64 * spacing, z as f64 * spacing],
                        1.0,
                    ));
                }
            }
        }
        let mut relations = Vec::new();
        for i in 0..particles.len() {
            for j in 0..particles.len() {
                if i != j && dist_sq(particles[i].position, particles[j].position) <= (1.8 * spacing).powi(2) {
                    relations.push(Relation::new(i, j, vec![1.0], RelationKind::Material));
                }
            }
        }
        let n = particles.len();
        SceneGraph {
            particles,
            relations,
            object_id: vec![0; n],
        }
    }

    #[test]
    fn kmeans_separates_pairs() {
        let pts = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [10.0, 0.0, 0.0], [10.1, 0.0, 0.0]];
        let a = kmeans_cluster(&pts, 2, 3, 50).unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn kmeans_single_cluster_and_errors() {
        let pts = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        assert_eq!(kmeans_cluster(&pts, 1, 0, 50).unwrap(), vec![0, 0, 0]);
        assert!(matches!(kmeans_cluster(&pts, 0, 0, 50), Err(Error::InvalidArgument(_))));
        assert!(matches!(kmeans_cluster(&pts, 4, 0, 50), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn kmeans_duplicate_points_fills_every_cluster() {
        let pts = vec![[0.0; 3]; 5];
        let a = kmeans_cluster(&pts, 5, 11, 50).unwrap();
        let mut seen = a.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn aggregate_examples() {
        let p = Particle::new([1.0, 2.0, 3.0], [0.5, 0.0, 0.0], 2.0);
        assert_eq!(aggregate_node(&[p]).unwrap(), p);
        let a = Particle::new([0.0; 3], [1.0, 0.0, 0.0], 1.0);
        let b = Particle::new([2.0, 0.0, 0.0], [-1.0, 0.0, 0.0], 3.0);
        let agg = aggregate_node(&[a, b]).unwrap();
        assert_eq!(agg.position, [1.0, 0.0, 0.0]);
        assert_eq!(agg.velocity, [0.0, 0.0, 0.0]);
        assert_eq!(agg.mass, 4.0);
        assert!(aggregate_node(&[]).is_err());
    }

    #[test]
    fn eight_particle_cube_is_one_level() {
        let scene = grid_object(2, 2, 2, 1.0);
        let h = build_hierarchy(&scene, &HierarchyConfig::default()).unwrap();
        assert_eq!(h.len(), 9);
        assert_eq!(h.roots(), &[8]);
        let count = |k| h.relations().iter().filter(|r| r.kind == k).count();
        assert_eq!(count(RelationKind::LeafToAncestor), 8);
        assert_eq!(count(RelationKind::AncestorToDescendant), 8);
        assert_eq!(count(RelationKind::WithinSibling), 56);
        assert_eq!(h.kin(8, KinKind::Anc).unwrap(), Vec::<usize>::new());
        assert_eq!(h.kin(8, KinKind::Des).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(h.kin(8, KinKind::Par).unwrap(), Vec::<usize>::new());
        assert_eq!(h.level(8), 1);
    }

    #[test]
    fn two_cubes_stay_disjoint() {
        let cube = grid_object(2, 2, 2, 1.0);
        let mut scene = SceneGraph::default();
        scene.append(&cube, 0);
        let mut shifted = cube.clone();
        for p in &mut shifted.particles {
            p.position[0] += 5.0;
        }
        scene.append(&shifted, 1);
        let h = build_hierarchy(&scene, &HierarchyConfig::default()).unwrap();
        assert_eq!(h.roots().len(), 2);
        for r in h.relations() {
            assert_eq!(h.object_id(r.sender), h.object_id(r.receiver));
        }
    }

    #[test]
    fn singleton_object_gets_copy_root() {
        let scene = SceneGraph {
            particles: vec![Particle::at_rest([1.0, 2.0, 3.0], 0.5)],
            relations: vec![],
            object_id: vec![4],
        };
        let h = build_hierarchy(&scene, &HierarchyConfig::default()).unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!(h.nodes()[1], scene.particles[0]);
        assert_eq!(h.relations().len(), 2);
    }

    #[test]
    fn disconnected_object_is_rejected() {
        let mut scene = grid_object(2, 1, 1, 1.0);
        scene.relations.clear();
        assert!(matches!(
            build_hierarchy(&scene, &HierarchyConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn kin_rejects_unknown_node() {
        let h = build_hierarchy(&grid_object(2, 2, 2, 1.0), &HierarchyConfig::default()).unwrap();
        assert!(h.kin(99, KinKind::Sib).is_err());
    }

    #[test]
    fn reaggregate_tracks_moved_leaves() {
        let scene = grid_object(4, 4, 4, 1.0);
        let h = build_hierarchy(&scene, &HierarchyConfig::default()).unwrap();
        let mut leaves = scene.particles.clone();
        for p in &mut leaves {
            p.position[1] += 2.0;
        }
        let nodes = h.reaggregate(&leaves).unwrap();
        let root = h.roots()[0];
        assert!((nodes[root].position[1] - (h.nodes()[root].position[1] + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip_rebuilds_caches() {
        let h = build_hierarchy(&grid_object(4, 4, 4, 1.0), &HierarchyConfig::default()).unwrap();
        let json = serde_json::to_string(&h).unwrap();
        let back: HierarchyGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(back, h);
    }
}
