//! Adaptive quadtree mesh of square cells over a rectangular domain.
//!
//! Cells are addressed by `(level, i, j)`: at level `l` the domain holds
//! `nx·2^l × ny·2^l` cells of size `h0 / 2^l`. Vertices live on an integer
//! lattice at the resolution of the maximum level, so vertex identity is
//! exact. A vertex sitting at the midpoint of an active cell's edge is
//! hanging and is constrained to the average of that edge's endpoints.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub const DEFAULT_MIN_LEVEL: u8 = 0;
pub const DEFAULT_MAX_LEVEL: u8 = 5;
const MAX_SUPPORTED_LEVEL: u8 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("base grid must have at least one cell per direction, got {nx}x{ny}")]
    EmptyGrid { nx: u32, ny: u32 },
    #[error("cells are not square: width/nx = {cell_width}, height/ny = {cell_height}")]
    NonSquareCells { cell_width: f64, cell_height: f64 },
    #[error("domain extents must be positive, got {width}x{height}")]
    BadExtents { width: f64, height: f64 },
    #[error("invalid level bounds [{min}, {max}]")]
    InvalidBounds { min: u8, max: u8 },
    #[error("uniform refinement level {level} outside [{min}, {max}]")]
    LevelOutOfBounds { level: u8, min: u8, max: u8 },
    #[error("field has {got} values but the mesh has {expected} cells")]
    FieldLength { expected: usize, got: usize },
    #[error("adaptation thresholds invalid: delta_rho_hat = {delta_rho_hat}, c_r = {c_r}, c_c = {c_c}")]
    InvalidThresholds { delta_rho_hat: f64, c_r: f64, c_c: f64 },
    #[error("cell set does not tile the domain")]
    InvalidCellSet,
}

/// Allowed refinement levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelBounds {
    pub min: u8,
    pub max: u8,
}

impl Default for LevelBounds {
    fn default() -> Self {
        Self {
            min: DEFAULT_MIN_LEVEL,
            max: DEFAULT_MAX_LEVEL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub level: u8,
    pub i: u32,
    pub j: u32,
}

impl CellKey {
    pub fn new(level: u8, i: u32, j: u32) -> Self {
        Self { level, i, j }
    }

    pub fn parent(self) -> Option<CellKey> {
        (self.level > 0).then(|| CellKey::new(self.level - 1, self.i / 2, self.j / 2))
    }

    /// Children in the order south-west, south-east, north-west, north-east.
    pub fn children(self) -> [CellKey; 4] {
        let (l, i, j) = (self.level + 1, 2 * self.i, 2 * self.j);
        [
            CellKey::new(l, i, j),
            CellKey::new(l, i + 1, j),
            CellKey::new(l, i, j + 1),
            CellKey::new(l, i + 1, j + 1),
        ]
    }

    fn children_on(self, side: Side) -> [CellKey; 2] {
        let [sw, se, nw, ne] = self.children();
        match side {
            Side::West => [sw, nw],
            Side::East => [se, ne],
            Side::South => [sw, se],
            Side::North => [nw, ne],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    West,
    East,
    South,
    North,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::West, Side::East, Side::South, Side::North];

    pub fn opposite(self) -> Side {
        match self {
            Side::West => Side::East,
            Side::East => Side::West,
            Side::South => Side::North,
            Side::North => Side::South,
        }
    }
}

/// Hanging vertex constrained to the mean of two parent vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HangingConstraint {
    pub vertex: usize,
    pub parents: [usize; 2],
}

/// Element-wise density, one value in `[0, 1]` per active cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DensityField<T>(Vec<T>);

impl<T: Scalar> DensityField<T> {
    /// Wraps `values`, rejecting entries outside `[0, 1]`.
    pub fn new(values: Vec<T>) -> Option<Self> {
        values
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one())
            .then_some(Self(values))
    }

    pub fn uniform(n: usize, value: T) -> Self {
        Self(vec![value; n])
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for DensityField<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Outcome counts of one adaptation pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdaptStats {
    pub refined: usize,
    pub forced: usize,
    pub coarsened: usize,
}

impl AdaptStats {
    pub fn changed(&self) -> bool {
        self.refined + self.forced + self.coarsened > 0
    }
}

/// New mesh plus the linear map transferring cell fields onto it.
#[derive(Debug, Clone)]
pub struct AdaptationPlan<T> {
    pub mesh: AdaptiveMesh<T>,
    pub stats: AdaptStats,
    /// For every new cell, the old cells and weights it is composed of.
    sources: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> AdaptationPlan<T> {
    /// Children copy their parent, merged cells take the area-weighted mean.
    pub fn transfer(&self, field: &[T]) -> Vec<T> {
        self.sources
            .iter()
            .map(|src| src.iter().map(|&(k, w)| w * field[k]).sum())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AdaptiveMesh<T> {
    width: T,
    height: T,
    nx: u32,
    ny: u32,
    base_size: T,
    bounds: LevelBounds,
    cells: Vec<CellKey>,
    lookup: HashMap<CellKey, usize>,
    vertices: Vec<[u32; 2]>,
    cell_vertices: Vec<[usize; 4]>,
    constraints: Vec<HangingConstraint>,
    hanging: Vec<Option<[usize; 2]>>,
}

impl<T: Scalar> AdaptiveMesh<T> {
    /// Structured `nx·2^r × ny·2^r` mesh with default level bounds `[0, 5]`.
    pub fn build_initial(
        nx: u32,
        ny: u32,
        extents: (T, T),
        uniform_refines: u8,
    ) -> Result<Self, MeshError> {
        Self::build_with_bounds(nx, ny, extents, uniform_refines, LevelBounds::default())
    }

    pub fn build_with_bounds(
        nx: u32,
        ny: u32,
        extents: (T, T),
        uniform_refines: u8,
        bounds: LevelBounds,
    ) -> Result<Self, MeshError> {
        let (width, height) = extents;
        if nx == 0 || ny == 0 {
            return Err(MeshError::EmptyGrid { nx, ny });
        }
        if !(width > T::zero() && height > T::zero()) {
            return Err(MeshError::BadExtents {
                width: width.as_f64(),
                height: height.as_f64(),
            });
        }
        if bounds.min > bounds.max || bounds.max > MAX_SUPPORTED_LEVEL {
            return Err(MeshError::InvalidBounds {
                min: bounds.min,
                max: bounds.max,
            });
        }
        if uniform_refines < bounds.min || uniform_refines > bounds.max {
            return Err(MeshError::LevelOutOfBounds {
                level: uniform_refines,
                min: bounds.min,
                max: bounds.max,
            });
        }
        let cw = width / T::from_count(nx as usize);
        let ch = height / T::from_count(ny as usize);
        if (cw - ch).abs() > T::lit(1e-12) * cw.max(ch) {
            return Err(MeshError::NonSquareCells {
                cell_width: cw.as_f64(),
                cell_height: ch.as_f64(),
            });
        }
        let l = uniform_refines;
        let cells = (0..ny << l)
            .flat_map(|j| (0..nx << l).map(move |i| CellKey::new(l, i, j)))
            .collect();
        Ok(Self::from_cells(width, height, nx, ny, cw, bounds, cells))
    }

    fn from_cells(
        width: T,
        height: T,
        nx: u32,
        ny: u32,
        base_size: T,
        bounds: LevelBounds,
        mut cells: Vec<CellKey>,
    ) -> Self {
        let max = bounds.max;
        let corner = |k: &CellKey| -> [u32; 2] {
            let s = 1u32 << (max - k.level);
            [k.i * s, k.j * s]
        };
        cells.sort_by_key(|k| {
            let [x, y] = corner(k);
            (y, x)
        });
        let lookup: HashMap<CellKey, usize> =
            cells.iter().enumerate().map(|(n, &k)| (k, n)).collect();

        let mut vertex_set = BTreeSet::new();
        for k in &cells {
            let [x, y] = corner(k);
            let s = 1u32 << (max - k.level);
            for v in [[x, y], [x + s, y], [x + s, y + s], [x, y + s]] {
                vertex_set.insert((v[1], v[0]));
            }
        }
        let vertices: Vec<[u32; 2]> = vertex_set.into_iter().map(|(y, x)| [x, y]).collect();
        let vertex_index: HashMap<[u32; 2], usize> =
            vertices.iter().enumerate().map(|(n, &v)| (v, n)).collect();

        let mut cell_vertices = Vec::with_capacity(cells.len());
        let mut hanging = vec![None; vertices.len()];
        for k in &cells {
            let [x, y] = corner(k);
            let s = 1u32 << (max - k.level);
            let c = [[x, y], [x + s, y], [x + s, y + s], [x, y + s]].map(|v| vertex_index[&v]);
            cell_vertices.push(c);
            if s >= 2 {
                let h = s / 2;
                let edges = [
                    ([x + h, y], [c[0], c[1]]),
                    ([x + s, y + h], [c[1], c[2]]),
                    ([x + h, y + s], [c[3], c[2]]),
                    ([x, y + h], [c[0], c[3]]),
                ];
                for (mid, parents) in edges {
                    if let Some(&v) = vertex_index.get(&mid) {
                        hanging[v] = Some(parents);
                    }
                }
            }
        }
        let constraints = hanging
            .iter()
            .enumerate()
            .filter_map(|(v, p)| p.map(|parents| HangingConstraint { vertex: v, parents }))
            .collect();
        Self {
            width,
            height,
            nx,
            ny,
            base_size,
            bounds,
            cells,
            lookup,
            vertices,
            cell_vertices,
            constraints,
            hanging,
        }
    }

    pub fn extents(&self) -> (T, T) {
        (self.width, self.height)
    }

    pub fn base_grid(&self) -> (u32, u32) {
        (self.nx, self.ny)
    }

    pub fn base_cell_size(&self) -> T {
        self.base_size
    }

    pub fn level_bounds(&self) -> LevelBounds {
        self.bounds
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[CellKey] {
        &self.cells
    }

    pub fn cell_index(&self, key: &CellKey) -> Option<usize> {
        self.lookup.get(key).copied()
    }

    pub fn level(&self, cell: usize) -> u8 {
        self.cells[cell].level
    }

    pub fn finest_level(&self) -> u8 {
        self.cells.iter().map(|k| k.level).max().unwrap_or(0)
    }

    pub fn coarsest_level(&self) -> u8 {
        self.cells.iter().map(|k| k.level).min().unwrap_or(0)
    }

    pub fn level_size(&self, level: u8) -> T {
        self.base_size / T::from_count(1usize << level)
    }

    pub fn cell_size(&self, cell: usize) -> T {
        self.level_size(self.cells[cell].level)
    }

    pub fn cell_area(&self, cell: usize) -> T {
        let h = self.cell_size(cell);
        h * h
    }

    pub fn cell_areas(&self) -> Vec<T> {
        (0..self.n_cells()).map(|c| self.cell_area(c)).collect()
    }

    pub fn total_area(&self) -> T {
        self.width * self.height
    }

    pub fn cell_center(&self, cell: usize) -> [T; 2] {
        let k = self.cells[cell];
        let h = self.level_size(k.level);
        let half = T::lit(0.5);
        [
            (T::from_count(k.i as usize) + half) * h,
            (T::from_count(k.j as usize) + half) * h,
        ]
    }

    /// Corner vertices, counter-clockwise from the lower-left one.
    pub fn cell_vertices(&self, cell: usize) -> [usize; 4] {
        self.cell_vertices[cell]
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertex_lattice(&self, v: usize) -> [u32; 2] {
        self.vertices[v]
    }

    pub fn lattice_unit(&self) -> T {
        self.level_size(self.bounds.max)
    }

    pub fn vertex_coords(&self, v: usize) -> [T; 2] {
        let u = self.lattice_unit();
        let [x, y] = self.vertices[v];
        [T::from_count(x as usize) * u, T::from_count(y as usize) * u]
    }

    pub fn lattice_extent(&self) -> [u32; 2] {
        let s = 1u32 << self.bounds.max;
        [self.nx * s, self.ny * s]
    }

    pub fn constraints(&self) -> &[HangingConstraint] {
        &self.constraints
    }

    pub fn hanging_parents(&self, v: usize) -> Option<[usize; 2]> {
        self.hanging[v]
    }

    pub fn is_hanging(&self, v: usize) -> bool {
        self.hanging[v].is_some()
    }

    /// Expresses a vertex as a combination of non-hanging vertices,
    /// resolving chained constraints.
    pub fn vertex_expansion(&self, v: usize) -> Vec<(usize, T)> {
        let mut out: Vec<(usize, T)> = Vec::with_capacity(4);
        let mut stack = vec![(v, T::one())];
        while let Some((w, weight)) = stack.pop() {
            match self.hanging[w] {
                None => match out.iter_mut().find(|(u, _)| *u == w) {
                    Some(entry) => entry.1 += weight,
                    None => out.push((w, weight)),
                },
                Some([a, b]) => {
                    let half = weight * T::lit(0.5);
                    stack.push((a, half));
                    stack.push((b, half));
                }
            }
        }
        out.sort_by_key(|&(u, _)| u);
        out
    }

    /// Active cells sharing (part of) the given edge of `cell`.
    pub fn edge_neighbors(&self, cell: usize, side: Side) -> Vec<usize> {
        neighbor_keys(self.cells[cell], side, self.nx, self.ny, self.bounds.max, |k| {
            self.lookup.contains_key(k)
        })
        .into_iter()
        .map(|k| self.lookup[&k])
        .collect()
    }

    pub fn is_on_boundary(&self, cell: usize, side: Side) -> bool {
        let k = self.cells[cell];
        match side {
            Side::West => k.i == 0,
            Side::South => k.j == 0,
            Side::East => k.i + 1 == self.nx << k.level,
            Side::North => k.j + 1 == self.ny << k.level,
        }
    }

    /// Edge-adjacent pairs whose levels differ by more than one.
    pub fn balance_violations(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for c in 0..self.n_cells() {
            for side in Side::ALL {
                for n in self.edge_neighbors(c, side) {
                    if c < n && self.level(c).abs_diff(self.level(n)) > 1 {
                        out.push((c, n));
                    }
                }
            }
        }
        out
    }

    pub fn is_balanced(&self) -> bool {
        self.balance_violations().is_empty()
    }

    fn check_len(&self, field: &[T]) -> Result<(), MeshError> {
        if field.len() != self.n_cells() {
            return Err(MeshError::FieldLength {
                expected: self.n_cells(),
                got: field.len(),
            });
        }
        Ok(())
    }

    /// Largest absolute density difference to any edge-sharing active cell.
    pub fn max_density_jump(&self, densities: &[T], cell: usize) -> T {
        let rho = densities[cell];
        Side::ALL
            .iter()
            .flat_map(|&s| self.edge_neighbors(cell, s))
            .map(|n| (rho - densities[n]).abs())
            .fold(T::zero(), T::max)
    }

    pub fn density_jumps(&self, densities: &[T]) -> Result<Vec<T>, MeshError> {
        self.check_len(densities)?;
        Ok((0..self.n_cells())
            .map(|c| self.max_density_jump(densities, c))
            .collect())
    }

    /// Refines cells whose jump reaches `c_r·Δρ̂`, coarsens sibling groups
    /// whose jumps all stay below `c_c·Δρ̂`, restores 2:1 balance and
    /// transfers `densities` onto the new cells.
    pub fn adapt(
        &self,
        densities: &[T],
        delta_rho_hat: T,
        c_r: T,
        c_c: T,
    ) -> Result<(Self, Vec<T>), MeshError> {
        let plan = self.plan_adaptation(densities, delta_rho_hat, c_r, c_c)?;
        let transferred = plan.transfer(densities);
        Ok((plan.mesh, transferred))
    }

    /// Like [`adapt`](Self::adapt) but returns the transfer map so several
    /// fields can follow the same mesh change. Refinement goes one level per
    /// call; coarsening cascades while merged groups keep meeting the criterion.
    pub fn plan_adaptation(
        &self,
        indicator: &[T],
        delta_rho_hat: T,
        c_r: T,
        c_c: T,
    ) -> Result<AdaptationPlan<T>, MeshError> {
        self.check_len(indicator)?;
        if !(delta_rho_hat > T::zero()) || !(c_c < c_r) {
            return Err(MeshError::InvalidThresholds {
                delta_rho_hat: delta_rho_hat.as_f64(),
                c_r: c_r.as_f64(),
                c_c: c_c.as_f64(),
            });
        }
        let refine_at = c_r * delta_rho_hat;
        let coarsen_at = c_c * delta_rho_hat;
        let jumps = self.density_jumps(indicator)?;
        let (min, max) = (self.bounds.min, self.bounds.max);
        let mut stats = AdaptStats::default();

        let mut active: HashMap<CellKey, Vec<(usize, T)>> = self
            .cells
            .iter()
            .enumerate()
            .map(|(n, &k)| (k, vec![(n, T::one())]))
            .collect();
        let mut split_this_pass: HashSet<CellKey> = HashSet::new();

        let marked: Vec<CellKey> = self
            .cells
            .iter()
            .zip(&jumps)
            .filter(|(k, &jump)| jump >= refine_at && k.level < max)
            .map(|(&k, _)| k)
            .collect();
        for k in marked {
            split(&mut active, k);
            split_this_pass.insert(k);
            stats.refined += 1;
        }

        // Balance closure; forced splits never consult the density criterion.
        loop {
            let mut keys: Vec<CellKey> = active.keys().copied().collect();
            keys.sort();
            let mut forced = Vec::new();
            for &k in &keys {
                let too_coarse = Side::ALL.iter().any(|&s| {
                    neighbor_keys(k, s, self.nx, self.ny, max, |q| active.contains_key(q))
                        .iter()
                        .any(|n| n.level > k.level + 1)
                });
                if too_coarse {
                    forced.push(k);
                }
            }
            if forced.is_empty() {
                break;
            }
            for k in forced {
                split(&mut active, k);
                split_this_pass.insert(k);
                stats.forced += 1;
            }
        }

        // Coarsening cascade on the transferred indicator.
        let quarter = T::lit(0.25);
        loop {
            let values: HashMap<CellKey, T> = active
                .iter()
                .map(|(k, src)| (*k, src.iter().map(|&(n, w)| w * indicator[n]).sum()))
                .collect();
            let mut groups: BTreeMap<CellKey, usize> = BTreeMap::new();
            for (&k, &rho) in &values {
                if k.level <= min {
                    continue;
                }
                let parent = k.parent().expect("level > min has a parent");
                if split_this_pass.contains(&parent) {
                    continue;
                }
                let mut jump = T::zero();
                for s in Side::ALL {
                    for n in neighbor_keys(k, s, self.nx, self.ny, max, |q| values.contains_key(q)) {
                        jump = jump.max((rho - values[&n]).abs());
                    }
                }
                if jump <= coarsen_at && jump < refine_at {
                    *groups.entry(parent).or_default() += 1;
                }
            }
            let mut candidates: Vec<CellKey> = groups
                .into_iter()
                .filter(|&(_, count)| count == 4)
                .map(|(p, _)| p)
                .collect();
            // finest first so that finer neighbours get a chance to merge
            candidates.sort_by(|a, b| b.level.cmp(&a.level).then(a.cmp(b)));
            let mut merged = 0;
            for parent in candidates {
                let children = parent.children();
                let keeps_balance = Side::ALL.iter().all(|&s| {
                    neighbor_keys(parent, s, self.nx, self.ny, max, |q| {
                        active.contains_key(q) && !children.contains(q)
                    })
                    .iter()
                    .all(|n| n.level <= parent.level + 1)
                });
                if !keeps_balance {
                    continue;
                }
                let mut combined: Vec<(usize, T)> = Vec::new();
                for c in children {
                    for (src, w) in active.remove(&c).expect("child is active") {
                        match combined.iter_mut().find(|(s, _)| *s == src) {
                            Some(e) => e.1 += w * quarter,
                            None => combined.push((src, w * quarter)),
                        }
                    }
                }
                active.insert(parent, combined);
                merged += 1;
            }
            if merged == 0 {
                break;
            }
            stats.coarsened += merged;
        }

        let mut cells: Vec<CellKey> = active.keys().copied().collect();
        cells.sort();
        let mesh = Self::from_cells(
            self.width,
            self.height,
            self.nx,
            self.ny,
            self.base_size,
            self.bounds,
            cells,
        );
        let sources = mesh
            .cells
            .iter()
            .map(|k| active.remove(k).expect("cell has a source"))
            .collect();
        Ok(AdaptationPlan {
            mesh,
            stats,
            sources,
        })
    }

    /// Samples a cell field on the uniform grid of the finest active level.
    /// Returns `(columns, rows, cell size, values)` with row-major values.
    pub fn sample_finest(&self, field: &[T]) -> Result<(usize, usize, T, Vec<T>), MeshError> {
        self.check_len(field)?;
        let level = self.finest_level();
        let (cols, rows) = ((self.nx << level) as usize, (self.ny << level) as usize);
        let mut values = Vec::with_capacity(cols * rows);
        for j in 0..rows as u32 {
            for i in 0..cols as u32 {
                let mut found = None;
                for l in (0..=level).rev() {
                    let shift = level - l;
                    if let Some(&c) = self.lookup.get(&CellKey::new(l, i >> shift, j >> shift)) {
                        found = Some(c);
                        break;
                    }
                }
                let c = found.ok_or(MeshError::InvalidCellSet)?;
                values.push(field[c]);
            }
        }
        Ok((cols, rows, self.level_size(level), values))
    }

    /// Rebuilds a mesh from a stored cell list, validating that it tiles the domain.
    pub fn from_cell_list(
        nx: u32,
        ny: u32,
        extents: (T, T),
        bounds: LevelBounds,
        cells: Vec<CellKey>,
    ) -> Result<Self, MeshError> {
        let base = Self::build_with_bounds(nx, ny, extents, bounds.min, bounds)?;
        let mut covered: u128 = 0;
        let mut seen = HashSet::new();
        for k in &cells {
            if k.level < bounds.min
                || k.level > bounds.max
                || k.i >= nx << k.level
                || k.j >= ny << k.level
                || !seen.insert(*k)
            {
                return Err(MeshError::InvalidCellSet);
            }
            covered += 1u128 << (2 * (bounds.max - k.level) as u32);
        }
        let [lx, ly] = base.lattice_extent();
        if covered != lx as u128 * ly as u128 {
            return Err(MeshError::InvalidCellSet);
        }
        // overlapping cells would be counted twice; reject ancestors of active cells
        for k in &cells {
            let mut a = *k;
            while let Some(p) = a.parent() {
                if seen.contains(&p) {
                    return Err(MeshError::InvalidCellSet);
                }
                a = p;
            }
        }
        Ok(Self::from_cells(
            extents.0,
            extents.1,
            nx,
            ny,
            base.base_size,
            bounds,
            cells,
        ))
    }
}

fn split<T: Scalar>(active: &mut HashMap<CellKey, Vec<(usize, T)>>, k: CellKey) {
    let src = active.remove(&k).expect("split target is active");
    for c in k.children() {
        active.insert(c, src.clone());
    }
}

fn neighbor_keys(
    key: CellKey,
    side: Side,
    nx: u32,
    ny: u32,
    max_level: u8,
    is_active: impl Fn(&CellKey) -> bool,
) -> Vec<CellKey> {
    let (cols, rows) = (nx << key.level, ny << key.level);
    let (i, j) = (key.i, key.j);
    let (ni, nj) = match side {
        Side::West if i > 0 => (i - 1, j),
        Side::East if i + 1 < cols => (i + 1, j),
        Side::South if j > 0 => (i, j - 1),
        Side::North if j + 1 < rows => (i, j + 1),
        _ => return Vec::new(),
    };
    let same = CellKey::new(key.level, ni, nj);
    if is_active(&same) {
        return vec![same];
    }
    let mut a = same;
    while let Some(p) = a.parent() {
        if is_active(&p) {
            return vec![p];
        }
        a = p;
    }
    let mut out = Vec::new();
    let mut stack = vec![same];
    while let Some(c) = stack.pop() {
        if c.level >= max_level {
            continue;
        }
        for ch in c.children_on(side.opposite()) {
            if is_active(&ch) {
                out.push(ch);
            } else {
                stack.push(ch);
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(nx: u32, ny: u32, refines: u8) -> AdaptiveMesh<f64> {
        AdaptiveMesh::build_initial(nx, ny, (nx as f64, ny as f64), refines).unwrap()
    }

    #[test]
    fn initial_mesh_counts() {
        let m = mesh(20, 10, 2);
        assert_eq!(m.n_cells(), 3200);
        assert!(m.cells().iter().all(|k| k.level == 2));
        assert!(m.constraints().is_empty());
        assert_eq!(mesh(30, 10, 0).n_cells(), 300);
        let m = mesh(1, 1, 3);
        assert_eq!(m.n_cells(), 64);
        assert_eq!(m.n_vertices(), 81);
    }

    #[test]
    fn non_square_cells_rejected() {
        let err = AdaptiveMesh::<f64>::build_initial(20, 10, (20.0, 12.0), 0).unwrap_err();
        assert!(matches!(err, MeshError::NonSquareCells { .. }));
        assert!(matches!(
            AdaptiveMesh::<f64>::build_initial(0, 10, (20.0, 10.0), 0),
            Err(MeshError::EmptyGrid { .. })
        ));
        assert!(matches!(
            AdaptiveMesh::<f64>::build_initial(2, 1, (2.0, 1.0), 6),
            Err(MeshError::LevelOutOfBounds { .. })
        ));
    }

    #[test]
    fn areas_sum_to_domain() {
        let m = mesh(3, 2, 1);
        let total: f64 = m.cell_areas().iter().sum();
        assert!((total - 6.0).abs() < 1e-12 * 6.0);
    }

    #[test]
    fn jump_examples() {
        let m = mesh(4, 4, 0);
        let uniform = vec![0.3; 16];
        assert!(m.density_jumps(&uniform).unwrap().iter().all(|&j| j == 0.0));

        let mut rho = vec![0.9; 16];
        // cell (1,1) has neighbours (0,1), (2,1), (1,0), (1,2)
        let idx = |i: u32, j: u32| m.cell_index(&CellKey::new(0, i, j)).unwrap();
        rho[idx(0, 1)] = 0.6;
        let jump = m.max_density_jump(&rho, idx(1, 1));
        assert!((jump - 0.3).abs() < 1e-15);

        let single = mesh(1, 1, 0);
        assert_eq!(single.max_density_jump(&[0.7], 0), 0.0);
    }

    #[test]
    fn refinement_creates_hanging_nodes() {
        let m = mesh(2, 1, 0);
        let rho = vec![1.0, 0.0];
        let (m2, r2) = m.adapt(&rho, 1.0, 0.2, 1e-3).unwrap();
        // both cells see a jump of 1 and get split
        assert_eq!(m2.n_cells(), 8);
        assert!(m2.constraints().is_empty());
        assert_eq!(r2.iter().filter(|&&v| v == 1.0).count(), 4);

        // refine only the left cell by hand through a biased indicator
        let cells = vec![
            CellKey::new(1, 0, 0),
            CellKey::new(1, 1, 0),
            CellKey::new(1, 0, 1),
            CellKey::new(1, 1, 1),
            CellKey::new(0, 1, 0),
        ];
        let m3 = AdaptiveMesh::<f64>::from_cell_list(2, 1, (2.0, 1.0), LevelBounds::default(), cells)
            .unwrap();
        assert_eq!(m3.constraints().len(), 1);
        let c = m3.constraints()[0];
        assert_eq!(m3.vertex_coords(c.vertex), [1.0, 0.5]);
        let p: Vec<[f64; 2]> = c.parents.iter().map(|&v| m3.vertex_coords(v)).collect();
        assert!(p.contains(&[1.0, 0.0]) && p.contains(&[1.0, 1.0]));
        assert_eq!(m3.edge_neighbors(m3.cell_index(&CellKey::new(0, 1, 0)).unwrap(), Side::West).len(), 2);
    }

    #[test]
    fn coarse_neighbour_seen_from_fine_cell() {
        let cells = vec![
            CellKey::new(1, 0, 0),
            CellKey::new(1, 1, 0),
            CellKey::new(1, 0, 1),
            CellKey::new(1, 1, 1),
            CellKey::new(0, 1, 0),
        ];
        let m = AdaptiveMesh::<f64>::from_cell_list(2, 1, (2.0, 1.0), LevelBounds::default(), cells)
            .unwrap();
        let fine = m.cell_index(&CellKey::new(1, 1, 0)).unwrap();
        let coarse = m.cell_index(&CellKey::new(0, 1, 0)).unwrap();
        assert_eq!(m.edge_neighbors(fine, Side::East), vec![coarse]);
    }

    #[test]
    fn refinement_threshold_example() {
        // delta_rho_hat = 1/3, c_r = 0.2: jump 0.3 >= 0.0667 refines
        let m = mesh(2, 1, 1);
        let mut rho = vec![0.6; m.n_cells()];
        rho[0] = 0.9;
        let plan = m.plan_adaptation(&rho, 1.0 / 3.0, 0.2, 1e-3).unwrap();
        assert!(plan.stats.refined >= 1);
        assert!(plan.mesh.n_cells() > m.n_cells());
        assert!(plan.mesh.is_balanced());
    }

    #[test]
    fn uniform_field_coarsens_to_min_level() {
        let m = mesh(3, 2, 2);
        let rho = vec![0.4; m.n_cells()];
        let plan = m.plan_adaptation(&rho, 1.0, 0.2, 1e-3).unwrap();
        assert_eq!(plan.stats.refined, 0);
        assert_eq!(plan.mesh.n_cells(), 6);
        assert!(plan.mesh.cells().iter().all(|k| k.level == 0));
        assert!(plan.transfer(&rho).iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn checkerboard_at_max_level_is_stable() {
        let bounds = LevelBounds { min: 0, max: 2 };
        let m = AdaptiveMesh::<f64>::build_with_bounds(1, 1, (1.0, 1.0), 2, bounds).unwrap();
        let rho: Vec<f64> = m
            .cells()
            .iter()
            .map(|k| ((k.i + k.j) % 2) as f64)
            .collect();
        let plan = m.plan_adaptation(&rho, 1.0, 0.2, 1e-3).unwrap();
        assert!(!plan.stats.changed());
        assert_eq!(plan.mesh.cells(), m.cells());
    }

    #[test]
    fn sharp_interface_refines_and_balances() {
        let bounds = LevelBounds { min: 0, max: 4 };
        let m = AdaptiveMesh::<f64>::build_with_bounds(4, 4, (4.0, 4.0), 0, bounds).unwrap();
        let mut mesh = m;
        let field = |c: [f64; 2]| if c[0] + 0.3 * c[1] < 2.1 { 1.0 } else { 0.0 };
        for _ in 0..4 {
            let rho: Vec<f64> = (0..mesh.n_cells()).map(|c| field(mesh.cell_center(c))).collect();
            let plan = mesh.plan_adaptation(&rho, 1.0, 0.2, 1e-3).unwrap();
            mesh = plan.mesh;
            assert!(mesh.is_balanced());
            let total: f64 = mesh.cell_areas().iter().sum();
            assert!((total - 16.0).abs() < 1e-12 * 16.0);
        }
        assert_eq!(mesh.finest_level(), 4);
        assert!(!mesh.constraints().is_empty());
    }

    #[test]
    fn sample_finest_resamples_coarse_cells() {
        let cells = vec![
            CellKey::new(1, 0, 0),
            CellKey::new(1, 1, 0),
            CellKey::new(1, 0, 1),
            CellKey::new(1, 1, 1),
            CellKey::new(0, 1, 0),
        ];
        let m = AdaptiveMesh::<f64>::from_cell_list(2, 1, (2.0, 1.0), LevelBounds::default(), cells)
            .unwrap();
        let field: Vec<f64> = (0..m.n_cells()).map(|c| c as f64).collect();
        let (cols, rows, h, values) = m.sample_finest(&field).unwrap();
        assert_eq!((cols, rows, h), (4, 2, 0.5));
        let coarse = m.cell_index(&CellKey::new(0, 1, 0)).unwrap() as f64;
        assert_eq!(values[2], coarse);
        assert_eq!(values[7], coarse);
    }

    #[test]
    fn invalid_cell_lists_are_rejected() {
        let b = LevelBounds::default();
        let overlapping = vec![CellKey::new(0, 0, 0), CellKey::new(1, 0, 0), CellKey::new(1, 1, 0), CellKey::new(1, 0, 1)];
        assert!(AdaptiveMesh::<f64>::from_cell_list(1, 1, (1.0, 1.0), b, overlapping).is_err());
        let missing = vec![CellKey::new(1, 0, 0)];
        assert!(AdaptiveMesh::<f64>::from_cell_list(1, 1, (1.0, 1.0), b, missing).is_err());
    }

    #[test]
    fn expansion_resolves_chains() {
        // level-0 cell next to level-2 cells: unbalanced, but gives a constraint chain
        let mut cells = vec![CellKey::new(0, 0, 0)];
        let right = CellKey::new(0, 1, 0);
        let [sw, se, nw, ne] = right.children();
        cells.extend([se, nw, ne]);
        cells.extend(sw.children());
        let m = AdaptiveMesh::<f64>::from_cell_list(2, 1, (2.0, 1.0), LevelBounds::default(), cells)
            .unwrap();
        assert!(!m.is_balanced());
        for c in m.constraints() {
            let exp = m.vertex_expansion(c.vertex);
            let total: f64 = exp.iter().map(|e| e.1).sum();
            assert!((total - 1.0).abs() < 1e-15);
            assert!(exp.iter().all(|&(v, _)| !m.is_hanging(v)));
            // expansion reproduces the vertex position (affine exactness)
            let [x, y] = m.vertex_coords(c.vertex);
            let ex: f64 = exp.iter().map(|&(v, w)| w * m.vertex_coords(v)[0]).sum();
            let ey: f64 = exp.iter().map(|&(v, w)| w * m.vertex_coords(v)[1]).sum();
            assert!((ex - x).abs() < 1e-14 && (ey - y).abs() < 1e-14);
        }
    }
}
