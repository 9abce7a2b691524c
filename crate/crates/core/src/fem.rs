//! Q1 plane-stress analysis on the adaptive mesh.
//!
//! Hanging vertices are condensed out: every cell corner is expanded into a
//! weighted combination of free vertices, and the element matrices are
//! transformed accordingly before scattering. Fixed components are removed
//! from the system, so the remaining matrix is symmetric positive definite.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, CsrPattern, LdlFactor, LdlSymbolic, LinalgError, SymmetricMatrix};
use crate::mesh::{AdaptiveMesh, Side};
use crate::scalar::Scalar;

/// Relative residual every solve must reach.
pub const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("invalid boundary value problem: {0}")]
    InvalidBvp(String),
    #[error("singular system: no constraint against {}", .missing.join(", "))]
    MissingConstraints { missing: Vec<&'static str> },
    #[error("mesh extents ({mesh_w}, {mesh_h}) differ from problem extents ({bvp_w}, {bvp_h})")]
    ExtentMismatch {
        mesh_w: f64,
        mesh_h: f64,
        bvp_w: f64,
        bvp_h: f64,
    },
    #[error("expected {expected} cell values, got {got}")]
    FieldLength { expected: usize, got: usize },
    #[error("modulus of cell {cell} is {value}, must be positive")]
    NonPositiveModulus { cell: usize, value: f64 },
    #[error("relative residual {0:e} above tolerance")]
    Residual(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Cantilever,
    MbbHalf,
    Custom,
}

/// Displacement components fixed on a boundary segment. A zero-length
/// segment pins a single boundary point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletRegion<T> {
    pub side: Side,
    pub from: T,
    pub to: T,
    pub fix: [bool; 2],
}

/// Uniform traction (force per length) on a boundary segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractionRegion<T> {
    pub side: Side,
    pub from: T,
    pub to: T,
    pub traction: [T; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpSpec<T> {
    pub preset: Preset,
    pub extents: (T, T),
    /// Coarse grid the quadtree is rooted on.
    pub base_grid: (u32, u32),
    pub dirichlet: Vec<DirichletRegion<T>>,
    pub tractions: Vec<TractionRegion<T>>,
    pub e0: T,
    pub nu: T,
}

impl<T: Scalar> BvpSpec<T> {
    /// 20×10 cantilever clamped on the left, unit downward load centred on
    /// the right edge over a tenth of its length.
    pub fn cantilever() -> Self {
        let (w, h) = (T::lit(20.0), T::lit(10.0));
        let half = T::lit(0.05) * h;
        let mid = T::lit(0.5) * h;
        Self {
            preset: Preset::Cantilever,
            extents: (w, h),
            base_grid: (20, 10),
            dirichlet: vec![DirichletRegion {
                side: Side::West,
                from: T::zero(),
                to: h,
                fix: [true, true],
            }],
            tractions: vec![TractionRegion {
                side: Side::East,
                from: mid - half,
                to: mid + half,
                traction: [T::zero(), -T::one() / (half + half)],
            }],
            e0: T::one(),
            nu: T::lit(0.3),
        }
    }

    /// Right half of the 60×10 MBB beam: symmetry on the left edge, roller
    /// at the bottom-right corner, unit downward load at the top of the
    /// symmetry line.
    pub fn mbb_half() -> Self {
        let (w, h) = (T::lit(30.0), T::lit(10.0));
        let seg = T::lit(0.05) * w;
        Self {
            preset: Preset::MbbHalf,
            extents: (w, h),
            base_grid: (30, 10),
            dirichlet: vec![
                DirichletRegion {
                    side: Side::West,
                    from: T::zero(),
                    to: h,
                    fix: [true, false],
                },
                DirichletRegion {
                    side: Side::South,
                    from: w,
                    to: w,
                    fix: [false, true],
                },
            ],
            tractions: vec![TractionRegion {
                side: Side::North,
                from: T::zero(),
                to: seg,
                traction: [T::zero(), -T::one() / seg],
            }],
            e0: T::one(),
            nu: T::lit(0.3),
        }
    }

    pub fn validate(&self) -> Result<(), FemError> {
        let (w, h) = self.extents;
        let bad = |m: String| Err(FemError::InvalidBvp(m));
        if !(w > T::zero() && h > T::zero()) {
            return bad(format!("extents must be positive, got ({w}, {h})"));
        }
        if !(self.e0 > T::zero()) {
            return bad(format!("E0 must be positive, got {}", self.e0));
        }
        if !(self.nu > -T::one() && self.nu < T::lit(0.5)) {
            return bad(format!("Poisson ratio {} outside (-1, 0.5)", self.nu));
        }
        if self.dirichlet.is_empty() {
            return bad("no Dirichlet regions".into());
        }
        let tol = T::lit(1e-12) * w.max(h);
        let on_edge = |side: Side, from: T, to: T| {
            let len = edge_length(side, w, h);
            from >= -tol && to <= len + tol && from <= to
        };
        for d in &self.dirichlet {
            if !on_edge(d.side, d.from, d.to) {
                return bad(format!("Dirichlet segment [{}, {}] off the {:?} edge", d.from, d.to, d.side));
            }
            if !d.fix[0] && !d.fix[1] {
                return bad("Dirichlet region fixes no component".into());
            }
        }
        for t in &self.tractions {
            if !on_edge(t.side, t.from, t.to) || !(t.to > t.from) {
                return bad(format!("traction segment [{}, {}] off the {:?} edge", t.from, t.to, t.side));
            }
        }
        Ok(())
    }

    /// Sum of applied forces.
    pub fn total_force(&self) -> [T; 2] {
        self.tractions.iter().fold([T::zero(); 2], |acc, t| {
            let len = t.to - t.from;
            [acc[0] + t.traction[0] * len, acc[1] + t.traction[1] * len]
        })
    }
}

fn edge_length<T: Scalar>(side: Side, w: T, h: T) -> T {
    match side {
        Side::West | Side::East => h,
        Side::South | Side::North => w,
    }
}

/// Stiffness of a square Q1 plane-stress element at unit modulus and unit
/// thickness, 2×2 Gauss quadrature. Corner order CCW from lower-left,
/// DOFs interleaved `[u0x, u0y, u1x, …]`. Independent of the cell size.
pub fn element_stiffness<T: Scalar>(nu: T) -> [[T; 8]; 8] {
    let one = T::one();
    let c = one / (one - nu * nu);
    let d = [
        [c, c * nu, T::zero()],
        [c * nu, c, T::zero()],
        [T::zero(), T::zero(), c * (one - nu) * T::lit(0.5)],
    ];
    let xi = [-one, one, one, -one];
    let eta = [-one, -one, one, one];
    let g = one / T::lit(3.0).sqrt();
    let mut k = [[T::zero(); 8]; 8];
    for (gx, gy) in [(-g, -g), (g, -g), (g, g), (-g, g)] {
        // element side h: dN/dx = dN/dξ · 2/h, det J = h²/4; h cancels
        let mut b = [[T::zero(); 8]; 3];
        for a in 0..4 {
            let dx = xi[a] * (one + eta[a] * gy) * T::lit(0.5);
            let dy = eta[a] * (one + xi[a] * gx) * T::lit(0.5);
            b[0][2 * a] = dx;
            b[1][2 * a + 1] = dy;
            b[2][2 * a] = dy;
            b[2][2 * a + 1] = dx;
        }
        let w = T::lit(0.25);
        for i in 0..8 {
            for j in 0..8 {
                let mut s = T::zero();
                for p in 0..3 {
                    for q in 0..3 {
                        s += b[p][i] * d[p][q] * b[q][j];
                    }
                }
                k[i][j] += s * w;
            }
        }
    }
    k
}

/// Cell corners expressed through free (non-hanging) vertices.
#[derive(Debug, Clone)]
pub struct Condensation<T> {
    free_index: Vec<Option<usize>>,
    free_vertices: Vec<usize>,
    ptr: Vec<usize>,
    entries: Vec<(usize, T)>,
}

impl<T: Scalar> Condensation<T> {
    pub fn new(mesh: &AdaptiveMesh<T>) -> Self {
        let mut free_index = vec![None; mesh.n_vertices()];
        let mut free_vertices = Vec::new();
        for (v, slot) in free_index.iter_mut().enumerate() {
            if !mesh.is_hanging(v) {
                *slot = Some(free_vertices.len());
                free_vertices.push(v);
            }
        }
        let mut ptr = Vec::with_capacity(4 * mesh.n_cells() + 1);
        let mut entries = Vec::with_capacity(4 * mesh.n_cells());
        ptr.push(0);
        for cell in 0..mesh.n_cells() {
            for v in mesh.cell_vertices(cell) {
                match free_index[v] {
                    Some(f) => entries.push((f, T::one())),
                    None => entries.extend(
                        mesh.vertex_expansion(v)
                            .into_iter()
                            .map(|(u, w)| (free_index[u].expect("expansion yields free vertices"), w)),
                    ),
                }
                ptr.push(entries.len());
            }
        }
        Self {
            free_index,
            free_vertices,
            ptr,
            entries,
        }
    }

    pub fn n_free(&self) -> usize {
        self.free_vertices.len()
    }

    pub fn free_index(&self, vertex: usize) -> Option<usize> {
        self.free_index[vertex]
    }

    pub fn free_vertex(&self, f: usize) -> usize {
        self.free_vertices[f]
    }

    /// Free-vertex combination of corner `k` of `cell`.
    pub fn corner(&self, cell: usize, k: usize) -> &[(usize, T)] {
        let c = 4 * cell + k;
        &self.entries[self.ptr[c]..self.ptr[c + 1]]
    }

    /// Values at every mesh vertex from `stride` components per free vertex.
    pub fn expand(&self, mesh: &AdaptiveMesh<T>, free: &[T], stride: usize) -> Vec<T> {
        let mut out = vec![T::zero(); stride * mesh.n_vertices()];
        for v in 0..mesh.n_vertices() {
            let terms = match self.free_index[v] {
                Some(f) => vec![(f, T::one())],
                None => mesh
                    .vertex_expansion(v)
                    .into_iter()
                    .map(|(u, w)| (self.free_index[u].unwrap(), w))
                    .collect(),
            };
            for (f, w) in terms {
                for c in 0..stride {
                    out[stride * v + c] += w * free[stride * f + c];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult<T> {
    /// Interleaved `[ux, uy]` at every mesh vertex, hanging ones included.
    pub displacement: Vec<T>,
    pub compliance: T,
    /// `u_eᵀ k₀ u_e` per cell at unit modulus.
    pub kernel: Vec<T>,
    pub residual: T,
}

/// Everything about the elastic system that depends only on the mesh and
/// the boundary value problem. Reused across iterations until the mesh
/// changes.
#[derive(Debug, Clone)]
pub struct ElasticSystem<T> {
    n_cells: usize,
    cond: Condensation<T>,
    n_eq: usize,
    eq_of_dof: Vec<Option<usize>>,
    cell_ptr: Vec<usize>,
    cell_eqs: Vec<usize>,
    kmat_ptr: Vec<usize>,
    kmat: Vec<T>,
    kpos: Vec<usize>,
    pattern: Arc<CsrPattern>,
    symbolic: Arc<LdlSymbolic>,
    force: Vec<T>,
}

impl<T: Scalar> ElasticSystem<T> {
    pub fn new(mesh: &AdaptiveMesh<T>, bvp: &BvpSpec<T>) -> Result<Self, FemError> {
        bvp.validate()?;
        let (w, h) = mesh.extents();
        let (bw, bh) = bvp.extents;
        let tol = T::lit(1e-9) * w.max(h);
        if (w - bw).abs() > tol || (h - bh).abs() > tol {
            return Err(FemError::ExtentMismatch {
                mesh_w: w.as_f64(),
                mesh_h: h.as_f64(),
                bvp_w: bw.as_f64(),
                bvp_h: bh.as_f64(),
            });
        }
        let cond = Condensation::new(mesh);
        let nf = cond.n_free();

        let mut fixed = vec![false; 2 * nf];
        for f in 0..nf {
            let v = cond.free_vertex(f);
            let [x, y] = mesh.vertex_coords(v);
            for d in &bvp.dirichlet {
                if let Some(s) = edge_coordinate(d.side, x, y, w, h, tol) {
                    if s >= d.from - tol && s <= d.to + tol {
                        for c in 0..2 {
                            fixed[2 * f + c] |= d.fix[c];
                        }
                    }
                }
            }
        }
        check_rigid_modes(mesh, &cond, &fixed)?;

        let mut eq_of_dof = vec![None; 2 * nf];
        let mut n_eq = 0;
        for (d, slot) in eq_of_dof.iter_mut().enumerate() {
            if !fixed[d] {
                *slot = Some(n_eq);
                n_eq += 1;
            }
        }

        let k0 = element_stiffness(bvp.nu);
        let mut cell_ptr = vec![0];
        let mut cell_eqs = Vec::new();
        let mut kmat_ptr = vec![0];
        let mut kmat = Vec::new();
        for cell in 0..mesh.n_cells() {
            // transformation from reduced equations to the 8 local DOFs
            let mut eqs: Vec<usize> = Vec::with_capacity(8);
            let mut tmat: Vec<[T; 8]> = Vec::with_capacity(8);
            for k in 0..4 {
                for &(f, wgt) in cond.corner(cell, k) {
                    for c in 0..2 {
                        if let Some(e) = eq_of_dof[2 * f + c] {
                            let col = match eqs.iter().position(|&q| q == e) {
                                Some(col) => col,
                                None => {
                                    eqs.push(e);
                                    tmat.push([T::zero(); 8]);
                                    eqs.len() - 1
                                }
                            };
                            tmat[col][2 * k + c] += wgt;
                        }
                    }
                }
            }
            let m = eqs.len();
            for a in 0..m {
                for b in 0..m {
                    let mut s = T::zero();
                    for i in 0..8 {
                        if tmat[a][i] == T::zero() {
                            continue;
                        }
                        for j in 0..8 {
                            s += tmat[a][i] * k0[i][j] * tmat[b][j];
                        }
                    }
                    kmat.push(s);
                }
            }
            cell_eqs.extend_from_slice(&eqs);
            cell_ptr.push(cell_eqs.len());
            kmat_ptr.push(kmat.len());
        }

        let pattern = Arc::new(CsrPattern::from_entries(
            n_eq,
            (0..mesh.n_cells()).flat_map(|c| {
                let eqs = &cell_eqs[cell_ptr[c]..cell_ptr[c + 1]];
                eqs.iter().flat_map(move |&a| eqs.iter().map(move |&b| (a, b)))
            }),
        ));
        let mut kpos = Vec::with_capacity(kmat.len());
        for c in 0..mesh.n_cells() {
            let eqs = &cell_eqs[cell_ptr[c]..cell_ptr[c + 1]];
            for &a in eqs {
                for &b in eqs {
                    kpos.push(pattern.position(a, b).expect("entry in pattern"));
                }
            }
        }
        let mut coords = vec![[0.0; 2]; n_eq];
        for f in 0..nf {
            let [x, y] = mesh.vertex_coords(cond.free_vertex(f));
            for c in 0..2 {
                if let Some(e) = eq_of_dof[2 * f + c] {
                    coords[e] = [x.as_f64(), y.as_f64()];
                }
            }
        }
        let symbolic = Arc::new(LdlSymbolic::analyze_nd(&pattern, &coords));
        let force = consistent_loads(mesh, bvp, &cond, &eq_of_dof, n_eq);

        Ok(Self {
            n_cells: mesh.n_cells(),
            cond,
            n_eq,
            eq_of_dof,
            cell_ptr,
            cell_eqs,
            kmat_ptr,
            kmat,
            kpos,
            pattern,
            symbolic,
            force,
        })
    }

    pub fn n_equations(&self) -> usize {
        self.n_eq
    }

    pub fn force(&self) -> &[T] {
        &self.force
    }

    pub fn condensation(&self) -> &Condensation<T> {
        &self.cond
    }

    /// Global stiffness for the given per-cell moduli.
    pub fn assemble(&self, moduli: &[T]) -> Result<SymmetricMatrix<T>, FemError> {
        if moduli.len() != self.n_cells {
            return Err(FemError::FieldLength {
                expected: self.n_cells,
                got: moduli.len(),
            });
        }
        if let Some((cell, &value)) = moduli.iter().enumerate().find(|(_, &e)| !(e > T::zero())) {
            return Err(FemError::NonPositiveModulus {
                cell,
                value: value.as_f64(),
            });
        }
        let mut k = SymmetricMatrix::zeros(self.pattern.clone());
        let values = k.values_mut();
        for (c, &e) in moduli.iter().enumerate() {
            for idx in self.kmat_ptr[c]..self.kmat_ptr[c + 1] {
                values[self.kpos[idx]] += e * self.kmat[idx];
            }
        }
        Ok(k)
    }

    pub fn solve(&self, mesh: &AdaptiveMesh<T>, moduli: &[T]) -> Result<SolveResult<T>, FemError> {
        let k = self.assemble(moduli)?;
        let factor = LdlFactor::factor(self.symbolic.clone(), &k)?;
        let tol = T::lit(RESIDUAL_TOL);
        let (x, residual) = linalg::solve_refined(&k, &factor, &self.force, tol * T::lit(0.01));
        if !(residual <= tol) {
            return Err(FemError::Residual(residual.as_f64()));
        }
        let compliance = linalg::dot(&self.force, &x);
        let kernel = self.cell_kernels(&x);
        let mut free = vec![T::zero(); 2 * self.cond.n_free()];
        for (d, eq) in self.eq_of_dof.iter().enumerate() {
            if let Some(e) = eq {
                free[d] = x[*e];
            }
        }
        let displacement = self.cond.expand(mesh, &free, 2);
        Ok(SolveResult {
            displacement,
            compliance,
            kernel,
            residual,
        })
    }

    fn cell_kernels(&self, x: &[T]) -> Vec<T> {
        (0..self.n_cells)
            .map(|c| {
                let eqs = &self.cell_eqs[self.cell_ptr[c]..self.cell_ptr[c + 1]];
                let km = &self.kmat[self.kmat_ptr[c]..self.kmat_ptr[c + 1]];
                let m = eqs.len();
                let mut s = T::zero();
                for a in 0..m {
                    let xa = x[eqs[a]];
                    let mut row = T::zero();
                    for b in 0..m {
                        row += km[a * m + b] * x[eqs[b]];
                    }
                    s += xa * row;
                }
                s
            })
            .collect()
    }
}

/// Coordinate along `side` if `(x, y)` lies on it.
fn edge_coordinate<T: Scalar>(side: Side, x: T, y: T, w: T, h: T, tol: T) -> Option<T> {
    match side {
        Side::West if x.abs() <= tol => Some(y),
        Side::East if (x - w).abs() <= tol => Some(y),
        Side::South if y.abs() <= tol => Some(x),
        Side::North if (y - h).abs() <= tol => Some(x),
        _ => None,
    }
}

fn check_rigid_modes<T: Scalar>(
    mesh: &AdaptiveMesh<T>,
    cond: &Condensation<T>,
    fixed: &[bool],
) -> Result<(), FemError> {
    let (w, h) = mesh.extents();
    let (cx, cy) = (w.as_f64() * 0.5, h.as_f64() * 0.5);
    let scale = w.max(h).as_f64();
    // Gram matrix of the rigid modes restricted to the fixed DOFs
    let mut g = [[0.0f64; 3]; 3];
    for (d, _) in fixed.iter().enumerate().filter(|(_, &f)| f) {
        let [x, y] = mesh.vertex_coords(cond.free_vertex(d / 2));
        let (x, y) = ((x.as_f64() - cx) / scale, (y.as_f64() - cy) / scale);
        let row = if d % 2 == 0 { [1.0, 0.0, -y] } else { [0.0, 1.0, x] };
        for a in 0..3 {
            for b in 0..3 {
                g[a][b] += row[a] * row[b];
            }
        }
    }
    let mut missing = Vec::new();
    if g[0][0] == 0.0 {
        missing.push("x-translation");
    }
    if g[1][1] == 0.0 {
        missing.push("y-translation");
    }
    if missing.is_empty() {
        let det = g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1])
            - g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0])
            + g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0]);
        if det <= 1e-12 * g[0][0] * g[1][1] * g[2][2].max(1e-300) || g[2][2] == 0.0 {
            missing.push("rotation");
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(FemError::MissingConstraints { missing })
    }
}

fn consistent_loads<T: Scalar>(
    mesh: &AdaptiveMesh<T>,
    bvp: &BvpSpec<T>,
    cond: &Condensation<T>,
    eq_of_dof: &[Option<usize>],
    n_eq: usize,
) -> Vec<T> {
    let mut f = vec![T::zero(); n_eq];
    let half = T::lit(0.5);
    for t in &bvp.tractions {
        for cell in 0..mesh.n_cells() {
            if !mesh.is_on_boundary(cell, t.side) {
                continue;
            }
            let [x0, y0] = mesh.vertex_coords(mesh.cell_vertices(cell)[0]);
            let s = mesh.cell_size(cell);
            let (a, b, ka, kb) = match t.side {
                Side::West => (y0, y0 + s, 0, 3),
                Side::East => (y0, y0 + s, 1, 2),
                Side::South => (x0, x0 + s, 0, 1),
                Side::North => (x0, x0 + s, 3, 2),
            };
            let (s0, s1) = (a.max(t.from), b.min(t.to));
            if !(s1 > s0) {
                continue;
            }
            let len = b - a;
            let wa = ((b - s0) * (b - s0) - (b - s1) * (b - s1)) * half / len;
            let wb = ((s1 - a) * (s1 - a) - (s0 - a) * (s0 - a)) * half / len;
            for (k, wk) in [(ka, wa), (kb, wb)] {
                for &(fv, ew) in cond.corner(cell, k) {
                    for c in 0..2 {
                        if let Some(e) = eq_of_dof[2 * fv + c] {
                            f[e] += t.traction[c] * wk * ew;
                        }
                    }
                }
            }
        }
    }
    f
}

/// One-shot assembly and solve.
pub fn assemble_solve<T: Scalar>(
    mesh: &AdaptiveMesh<T>,
    moduli: &[T],
    bvp: &BvpSpec<T>,
) -> Result<SolveResult<T>, FemError> {
    ElasticSystem::new(mesh, bvp)?.solve(mesh, moduli)
}

/// `∂F_c/∂ρ̄_e = -E'(ρ̄_e) · u_eᵀ k₀ u_e`.
pub fn compliance_sensitivity<T: Scalar>(result: &SolveResult<T>, modulus_derivative: &[T]) -> Vec<T> {
    result
        .kernel
        .iter()
        .zip(modulus_derivative)
        .map(|(&k, &d)| -d * k)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{CellKey, LevelBounds};

    fn square_bvp(fix: Vec<DirichletRegion<f64>>) -> BvpSpec<f64> {
        BvpSpec {
            preset: Preset::Custom,
            extents: (1.0, 1.0),
            base_grid: (1, 1),
            dirichlet: fix,
            tractions: vec![TractionRegion {
                side: Side::East,
                from: 0.0,
                to: 1.0,
                traction: [1.0, 0.0],
            }],
            e0: 1.0,
            nu: 0.3,
        }
    }

    fn tension_bvp() -> BvpSpec<f64> {
        square_bvp(vec![
            DirichletRegion { side: Side::West, from: 0.0, to: 1.0, fix: [true, false] },
            DirichletRegion { side: Side::South, from: 0.0, to: 0.0, fix: [false, true] },
        ])
    }

    #[test]
    fn element_stiffness_matches_closed_form() {
        let nu = 0.3_f64;
        let k = element_stiffness(nu);
        let kc = [
            0.5 - nu / 6.0,
            0.125 + nu / 8.0,
            -0.25 - nu / 12.0,
            -0.125 + 3.0 * nu / 8.0,
            -0.25 + nu / 12.0,
            -0.125 - nu / 8.0,
            nu / 6.0,
            0.125 - 3.0 * nu / 8.0,
        ];
        let s = 1.0 / (1.0 - nu * nu);
        assert!((k[0][0] - s * kc[0]).abs() < 1e-14);
        assert!((k[0][1] - s * kc[1]).abs() < 1e-14);
        for i in 0..8 {
            for j in 0..8 {
                assert!((k[i][j] - k[j][i]).abs() < 1e-15);
            }
        }
        // rigid translations are in the kernel
        for c in 0..2 {
            for i in 0..8 {
                let s: f64 = (0..4).map(|a| k[i][2 * a + c]).sum();
                assert!(s.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn patch_test_uniform_tension() {
        for refines in 0..3 {
            let mesh = AdaptiveMesh::<f64>::build_initial(1, 1, (1.0, 1.0), refines).unwrap();
            let res = assemble_solve(&mesh, &vec![1.0; mesh.n_cells()], &tension_bvp()).unwrap();
            for v in 0..mesh.n_vertices() {
                let [x, y] = mesh.vertex_coords(v);
                let (ux, uy) = (res.displacement[2 * v], res.displacement[2 * v + 1]);
                assert!((ux - x).abs() < 1e-12, "ux {ux} at {x}");
                assert!((uy + 0.3 * y).abs() < 1e-12);
            }
            assert!((res.compliance - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_test_with_hanging_nodes() {
        // left half refined twice more than the right half
        let mut cells = vec![CellKey::new(1, 1, 0), CellKey::new(1, 1, 1)];
        for j in 0..4 {
            for i in 0..2 {
                cells.push(CellKey::new(2, i, j));
            }
        }
        let mesh = AdaptiveMesh::<f64>::from_cell_list(1, 1, (1.0, 1.0), LevelBounds::default(), cells).unwrap();
        assert!(!mesh.constraints().is_empty());
        let res = assemble_solve(&mesh, &vec![2.0; mesh.n_cells()], &tension_bvp()).unwrap();
        for v in 0..mesh.n_vertices() {
            let [x, y] = mesh.vertex_coords(v);
            assert!((res.displacement[2 * v] - 0.5 * x).abs() < 1e-12);
            assert!((res.displacement[2 * v + 1] + 0.15 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_moduli_halves_compliance() {
        let mesh = AdaptiveMesh::<f64>::build_initial(20, 10, (20.0, 10.0), 0).unwrap();
        let bvp = BvpSpec::cantilever();
        let e: Vec<f64> = (0..mesh.n_cells()).map(|c| 0.2 + 0.7 * ((c * 37 % 11) as f64 / 10.0)).collect();
        let e2: Vec<f64> = e.iter().map(|x| 2.0 * x).collect();
        let a = assemble_solve(&mesh, &e, &bvp).unwrap();
        let b = assemble_solve(&mesh, &e2, &bvp).unwrap();
        assert!((a.compliance / b.compliance - 2.0).abs() < 1e-12);
    }

    #[test]
    fn energy_identity_and_kernel_sum() {
        let mesh = AdaptiveMesh::<f64>::build_initial(30, 10, (30.0, 10.0), 1).unwrap();
        let bvp = BvpSpec::mbb_half();
        let sys = ElasticSystem::new(&mesh, &bvp).unwrap();
        let e: Vec<f64> = (0..mesh.n_cells()).map(|c| 0.1 + (c % 7) as f64 / 7.0).collect();
        let res = sys.solve(&mesh, &e).unwrap();
        let energy: f64 = res.kernel.iter().zip(&e).map(|(k, e)| k * e).sum();
        assert!((energy - res.compliance).abs() < 1e-10 * res.compliance);
        assert!(res.residual <= RESIDUAL_TOL);
    }

    #[test]
    fn loads_sum_to_unit_force() {
        for (bvp, refines) in [(BvpSpec::<f64>::cantilever(), 2u8), (BvpSpec::mbb_half(), 2)] {
            let (nx, ny) = bvp.base_grid;
            let mesh = AdaptiveMesh::build_initial(nx, ny, bvp.extents, refines).unwrap();
            let sys = ElasticSystem::new(&mesh, &bvp).unwrap();
            let total: f64 = sys.force().iter().sum();
            assert!((total + 1.0).abs() < 1e-12, "{total}");
            assert_eq!(bvp.total_force()[1], -1.0);
        }
    }

    #[test]
    fn missing_constraints_are_named() {
        let mesh = AdaptiveMesh::<f64>::build_initial(2, 2, (1.0, 1.0), 0).unwrap();
        let only_x = square_bvp(vec![DirichletRegion { side: Side::West, from: 0.0, to: 1.0, fix: [true, false] }]);
        match ElasticSystem::new(&mesh, &only_x) {
            Err(FemError::MissingConstraints { missing }) => assert_eq!(missing, vec!["y-translation"]),
            other => panic!("{other:?}"),
        }
        let pin = square_bvp(vec![DirichletRegion { side: Side::West, from: 0.0, to: 0.0, fix: [true, true] }]);
        match ElasticSystem::new(&mesh, &pin) {
            Err(FemError::MissingConstraints { missing }) => assert_eq!(missing, vec!["rotation"]),
            other => panic!("{other:?}"),
        }
        let msg = ElasticSystem::new(&mesh, &pin).unwrap_err().to_string();
        assert!(msg.contains("rotation"));
    }

    #[test]
    fn invalid_inputs() {
        let mesh = AdaptiveMesh::<f64>::build_initial(20, 10, (20.0, 10.0), 0).unwrap();
        let bvp = BvpSpec::cantilever();
        let sys = ElasticSystem::new(&mesh, &bvp).unwrap();
        assert!(matches!(sys.solve(&mesh, &[1.0; 3]), Err(FemError::FieldLength { .. })));
        let mut e = vec![1.0; mesh.n_cells()];
        e[5] = 0.0;
        assert!(matches!(sys.solve(&mesh, &e), Err(FemError::NonPositiveModulus { cell: 5, .. })));
        let mut bad = bvp.clone();
        bad.nu = 0.5;
        assert!(ElasticSystem::new(&mesh, &bad).is_err());
        let wrong = AdaptiveMesh::<f64>::build_initial(30, 10, (30.0, 10.0), 0).unwrap();
        assert!(matches!(ElasticSystem::new(&wrong, &bvp), Err(FemError::ExtentMismatch { .. })));
    }

    #[test]
    fn sensitivity_sign_and_linear_case() {
        let mesh = AdaptiveMesh::<f64>::build_initial(20, 10, (20.0, 10.0), 0).unwrap();
        let res = assemble_solve(&mesh, &vec![0.3; mesh.n_cells()], &BvpSpec::cantilever()).unwrap();
        let zero = compliance_sensitivity(&res, &vec![0.0; mesh.n_cells()]);
        assert!(zero.iter().all(|&g| g == 0.0));
        let g = compliance_sensitivity(&res, &vec![1.0; mesh.n_cells()]);
        for (gi, ki) in g.iter().zip(&res.kernel) {
            assert_eq!(*gi, -ki);
            assert!(*gi <= 0.0);
        }
    }
}
