//! Uniform-grid neighbour search shared by the simulator contacts and the
//! model's collision relations.

use std::collections::HashMap;

use crate::math::{self, Vec3};

type Cell = (i64, i64, i64);

pub struct SpatialGrid {
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
    keys: Vec<Cell>,
}

impl SpatialGrid {
    /// `cell` must be at least the largest query radius.
    pub fn new(points: &[Vec3], cell: f64) -> Self {
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::with_capacity(points.len());
        let mut keys = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let key = Self::key_for(*p, cell);
            cells.entry(key).or_default().push(i);
            keys.push(key);
        }
        Self { cell, cells, keys }
    }

    fn key_for(p: Vec3, cell: f64) -> Cell {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// All unordered pairs `(i, j)`, `i < j`, with distance strictly below
    /// `radius` that `keep` accepts. Sorted lexicographically.
    pub fn pairs_within(
        &self,
        points: &[Vec3],
        radius: f64,
        mut keep: impl FnMut(usize, usize) -> bool,
    ) -> Vec<(usize, usize)> {
        debug_assert!(radius <= self.cell * (1.0 + 1e-12));
        let r2 = radius * radius;
        let mut out = Vec::new();
        for (i, &(cx, cy, cz)) in self.keys.iter().enumerate() {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &j in bucket {
                            if j <= i || !keep(i, j) {
                                continue;
                            }
                            if math::norm_sq(math::sub(points[i], points[j])) < r2 {
                                out.push((i, j));
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }
}
