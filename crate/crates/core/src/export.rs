//! Sheet-stack geometry: per-level contours, SVG/DXF profiles, extruded STL
//! and VTK field output.
//!
//! The physical field is resampled onto the finest active level. Cell
//! centres plus a ring of boundary nodes (copying the adjacent centre value)
//! form a node grid, every grid square is split along its SW–NE diagonal, and
//! every triangle is split at its edge midpoints into four sub-triangles.
//! A sub-triangle at a corner inherits that node's level count; the middle one
//! takes the median of the three. Level regions are unions of sub-triangles,
//! which makes them nested by construction and lets the extruded solid share
//! one conforming triangulation with the 2D profiles.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::material::TargetSet;
use crate::mesh::{AdaptiveMesh, MeshError};
use crate::regularization;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("export needs a finite target set, got `free`")]
    FreeTargets,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("polygon {polygon} of level {level} intersects itself")]
    SelfIntersection { level: u32, polygon: usize },
    #[error("level {inner} is not contained in level {outer}")]
    NotNested { outer: u32, inner: u32 },
    #[error("invalid {what}: {value}")]
    InvalidParameter { what: &'static str, value: f64 },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Closed polygon; the last point connects back to the first. Outer
/// boundaries run counter-clockwise, holes clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub points: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn signed_area(&self) -> f64 {
        let p = &self.points;
        let n = p.len();
        (0..n)
            .map(|k| {
                let (a, b) = (p[k], p[(k + 1) % n]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            * 0.5
    }

    /// Whether any two non-adjacent edges touch or cross.
    pub fn self_intersects(&self) -> bool {
        let p = &self.points;
        let n = p.len();
        if n < 3 {
            return true;
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for q in p {
            for d in 0..2 {
                lo[d] = lo[d].min(q[d]);
                hi[d] = hi[d].max(q[d]);
            }
        }
        // bucket edges on a coarse grid so only nearby pairs are tested
        let side = ((n as f64).sqrt().ceil() as usize).max(1);
        let span = [(hi[0] - lo[0]).max(1e-300), (hi[1] - lo[1]).max(1e-300)];
        let bucket = |x: f64, d: usize| (((x - lo[d]) / span[d] * side as f64) as usize).min(side - 1);
        let mut grid: Vec<Vec<usize>> = vec![Vec::new(); side * side];
        for k in 0..n {
            let (a, b) = (p[k], p[(k + 1) % n]);
            let (i0, i1) = (bucket(a[0].min(b[0]), 0), bucket(a[0].max(b[0]), 0));
            let (j0, j1) = (bucket(a[1].min(b[1]), 1), bucket(a[1].max(b[1]), 1));
            for j in j0..=j1 {
                for i in i0..=i1 {
                    grid[j * side + i].push(k);
                }
            }
        }
        for cell in &grid {
            for (x, &e) in cell.iter().enumerate() {
                for &f in &cell[x + 1..] {
                    let adjacent = (e + 1) % n == f || (f + 1) % n == e;
                    if adjacent {
                        continue;
                    }
                    if segments_touch(p[e], p[(e + 1) % n], p[f], p[(f + 1) % n]) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    c[0] >= a[0].min(b[0]) && c[0] <= a[0].max(b[0]) && c[1] >= a[1].min(b[1]) && c[1] <= a[1].max(b[1])
}

fn segments_touch(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SheetLevel {
    /// 1-based level index.
    pub index: u32,
    pub threshold: f64,
    pub polygons: Vec<Polygon>,
    pub area: f64,
}

/// Conforming triangulation carrying a level count per triangle.
#[derive(Debug, Clone, PartialEq)]
struct LevelMesh {
    points: Vec<[f64; 2]>,
    triangles: Vec<([usize; 3], u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SheetStack {
    pub targets: u32,
    /// Domain size in length units.
    pub extents: (f64, f64),
    pub levels: Vec<SheetLevel>,
    tri: LevelMesh,
}

impl SheetStack {
    /// Per-side sheet thickness `0.5 t / n` for a total thickness `t`.
    pub fn sheet_thickness(&self, total: f64) -> f64 {
        0.5 * total / self.targets as f64
    }

    /// Solid volume of the symmetric stack in length units.
    pub fn volume(&self, total: f64) -> f64 {
        let s = self.sheet_thickness(total);
        self.levels.iter().map(|l| l.area * 2.0 * s).sum()
    }

    /// Rejects self-intersecting polygons and broken nesting.
    pub fn validate(&self) -> Result<(), ExportError> {
        for level in &self.levels {
            for (k, poly) in level.polygons.iter().enumerate() {
                if poly.self_intersects() {
                    return Err(ExportError::SelfIntersection {
                        level: level.index,
                        polygon: k,
                    });
                }
            }
        }
        for w in self.levels.windows(2) {
            if w[1].area > w[0].area * (1.0 + 1e-12) + 1e-12 {
                return Err(ExportError::NotNested {
                    outer: w[0].index,
                    inner: w[1].index,
                });
            }
        }
        Ok(())
    }
}

fn level_count(rho: f64, thresholds: &[f64]) -> u32 {
    thresholds.iter().filter(|&&eta| rho >= eta).count() as u32
}

fn median3(a: u32, b: u32, c: u32) -> u32 {
    a.max(b).min(a.min(b).max(c))
}

/// Builds the sheet stack of a physical field at the projection thresholds.
pub fn extract_contours<T: Scalar>(
    mesh: &AdaptiveMesh<T>,
    physical: &[T],
    targets: TargetSet,
) -> Result<SheetStack, ExportError> {
    let n = targets.count().ok_or(ExportError::FreeTargets)?;
    let (cols, rows, h, values) = mesh.sample_finest(physical)?;
    let values: Vec<f64> = values.into_iter().map(Scalar::as_f64).collect();
    let (w, ht) = mesh.extents();
    let raster = Raster {
        cols,
        rows,
        h: h.as_f64(),
        extents: (w.as_f64(), ht.as_f64()),
        values,
    };
    Ok(stack_from_raster(&raster, n))
}

/// Cell-centred samples on a uniform grid, row-major from the south-west.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub cols: usize,
    pub rows: usize,
    pub h: f64,
    pub extents: (f64, f64),
    pub values: Vec<f64>,
}

pub fn stack_from_raster(raster: &Raster, n: u32) -> SheetStack {
    let thresholds: Vec<f64> = regularization::thresholds(TargetSet::Levels(n));
    let tri = level_mesh(raster, &thresholds);
    let levels = (1..=n)
        .map(|i| {
            let area = tri
                .triangles
                .iter()
                .filter(|(_, l)| *l >= i)
                .map(|(t, _)| orient(tri.points[t[0]], tri.points[t[1]], tri.points[t[2]]) * 0.5)
                .sum();
            SheetLevel {
                index: i,
                threshold: thresholds[i as usize - 1],
                polygons: trace_level(&tri, i),
                area,
            }
        })
        .collect();
    SheetStack {
        targets: n,
        extents: raster.extents,
        levels,
        tri,
    }
}

fn level_mesh(r: &Raster, thresholds: &[f64]) -> LevelMesh {
    let (nx, ny) = (r.cols + 2, r.rows + 2);
    let xs: Vec<f64> = (0..nx)
        .map(|a| match a {
            0 => 0.0,
            a if a == nx - 1 => r.extents.0,
            a => (a as f64 - 0.5) * r.h,
        })
        .collect();
    let ys: Vec<f64> = (0..ny)
        .map(|b| match b {
            0 => 0.0,
            b if b == ny - 1 => r.extents.1,
            b => (b as f64 - 0.5) * r.h,
        })
        .collect();
    let node_level = |a: usize, b: usize| {
        let i = a.clamp(1, r.cols) - 1;
        let j = b.clamp(1, r.rows) - 1;
        level_count(r.values[j * r.cols + i], thresholds)
    };
    let mut points = Vec::with_capacity(nx * ny * 4);
    let mut levels = Vec::with_capacity(nx * ny);
    for b in 0..ny {
        for a in 0..nx {
            points.push([xs[a], ys[b]]);
            levels.push(node_level(a, b));
        }
    }
    let mut mids: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |u: usize, v: usize, points: &mut Vec<[f64; 2]>| -> usize {
        let key = (u.min(v), u.max(v));
        *mids.entry(key).or_insert_with(|| {
            let (p, q) = (points[u], points[v]);
            points.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
            points.len() - 1
        })
    };
    let mut triangles = Vec::new();
    for b in 0..ny - 1 {
        for a in 0..nx - 1 {
            let n00 = b * nx + a;
            let (n10, n01, n11) = (n00 + 1, n00 + nx, n00 + nx + 1);
            for t in [[n00, n10, n11], [n00, n11, n01]] {
                let [v0, v1, v2] = t;
                let m01 = mid(v0, v1, &mut points);
                let m12 = mid(v1, v2, &mut points);
                let m20 = mid(v2, v0, &mut points);
                let (l0, l1, l2) = (levels[v0], levels[v1], levels[v2]);
                triangles.push(([v0, m01, m20], l0));
                triangles.push(([m01, v1, m12], l1));
                triangles.push(([m20, m12, v2], l2));
                triangles.push(([m01, m12, m20], median3(l0, l1, l2)));
            }
        }
    }
    LevelMesh { points, triangles }
}

/// Directed edges mapped to the level of the triangle on their left.
fn edge_levels(tri: &LevelMesh) -> HashMap<(usize, usize), u32> {
    let mut edges = HashMap::with_capacity(tri.triangles.len() * 3);
    for &(t, l) in &tri.triangles {
        for k in 0..3 {
            edges.insert((t[k], t[(k + 1) % 3]), l);
        }
    }
    edges
}

fn trace_level(tri: &LevelMesh, level: u32) -> Vec<Polygon> {
    let edges = edge_levels(tri);
    let mut next: HashMap<usize, usize> = HashMap::new();
    for (&(u, v), &l) in &edges {
        if l >= level && edges.get(&(v, u)).map_or(true, |&o| o < level) {
            next.insert(u, v);
        }
    }
    let mut starts: Vec<usize> = next.keys().copied().collect();
    starts.sort_unstable();
    let mut polygons = Vec::new();
    for s in starts {
        if !next.contains_key(&s) {
            continue;
        }
        let mut ring = vec![s];
        let mut cur = next.remove(&s).expect("start present");
        while cur != s {
            ring.push(cur);
            cur = match next.remove(&cur) {
                Some(v) => v,
                None => break,
            };
        }
        let points = simplify(ring.iter().map(|&i| tri.points[i]).collect());
        if points.len() >= 3 {
            polygons.push(Polygon { points });
        }
    }
    polygons
}

/// Drops vertices lying on the line through their neighbours.
fn simplify(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    loop {
        let n = pts.len();
        if n < 4 {
            return pts;
        }
        let keep: Vec<bool> = (0..n)
            .map(|k| {
                let (a, b, c) = (pts[(k + n - 1) % n], pts[k], pts[(k + 1) % n]);
                let scale = ((c[0] - a[0]).abs() + (c[1] - a[1]).abs()).max(1e-300);
                orient(a, b, c).abs() > 1e-12 * scale * scale
            })
            .collect();
        if keep.iter().all(|&k| k) {
            return pts;
        }
        // remove every other redundant vertex per pass so chains shrink safely
        let mut removed_prev = false;
        let mut out = Vec::with_capacity(n);
        for (k, p) in pts.iter().enumerate() {
            if !keep[k] && !removed_prev {
                removed_prev = true;
                continue;
            }
            removed_prev = false;
            out.push(*p);
        }
        pts = out;
    }
}

/// Output units and physical thickness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerOptions {
    /// Millimetres per length unit.
    pub scale: f64,
    /// Total stack thickness in millimetres.
    pub total_thickness: f64,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            scale: 10.0,
            total_thickness: 20.0,
        }
    }
}

impl LayerOptions {
    fn check(&self) -> Result<(), ExportError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(ExportError::InvalidParameter {
                what: "scale",
                value: self.scale,
            });
        }
        if !(self.total_thickness > 0.0 && self.total_thickness.is_finite()) {
            return Err(ExportError::InvalidParameter {
                what: "total thickness",
                value: self.total_thickness,
            });
        }
        Ok(())
    }
}

/// File stem for a level, e.g. `level2_3.33mm`.
pub fn layer_stem(index: u32, sheet_mm: f64) -> String {
    format!("level{index}_{sheet_mm:.2}mm")
}

fn create(path: &Path) -> Result<BufWriter<File>, ExportError> {
    File::create(path).map(BufWriter::new).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_at(path: &Path) -> impl Fn(io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn svg_string(level: &SheetLevel, extents: (f64, f64), scale: f64) -> String {
    let (w, h) = (extents.0 * scale, extents.1 * scale);
    let mut d = String::new();
    for poly in &level.polygons {
        for (k, p) in poly.points.iter().enumerate() {
            let cmd = if k == 0 { 'M' } else { 'L' };
            d.push_str(&format!("{cmd}{:.6} {:.6} ", p[0] * scale, h - p[1] * scale));
        }
        d.push_str("Z ");
    }
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}mm\" height=\"{h}mm\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    if !d.is_empty() {
        s.push_str(&format!(
            "<path id=\"level{}\" fill=\"black\" fill-rule=\"evenodd\" stroke=\"none\" d=\"{}\"/>\n",
            level.index,
            d.trim_end()
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// DXF R12 text with one closed POLYLINE per polygon.
pub fn dxf_string(level: &SheetLevel, scale: f64) -> String {
    let layer = format!("LEVEL{}", level.index);
    let mut s = String::new();
    let mut pair = |code: i32, value: &str| {
        s.push_str(&format!("{code}\n{value}\n"));
    };
    pair(0, "SECTION");
    pair(2, "HEADER");
    pair(9, "$ACADVER");
    pair(1, "AC1009");
    pair(0, "ENDSEC");
    pair(0, "SECTION");
    pair(2, "ENTITIES");
    for poly in &level.polygons {
        pair(0, "POLYLINE");
        pair(8, &layer);
        pair(66, "1");
        pair(70, "1");
        pair(10, "0.0");
        pair(20, "0.0");
        pair(30, "0.0");
        for p in &poly.points {
            pair(0, "VERTEX");
            pair(8, &layer);
            pair(10, &format!("{:.6}", p[0] * scale));
            pair(20, &format!("{:.6}", p[1] * scale));
            pair(30, "0.0");
        }
        pair(0, "SEQEND");
        pair(8, &layer);
    }
    pair(0, "ENDSEC");
    pair(0, "EOF");
    s
}

/// Writes one SVG and one DXF per level into `dir`; returns the paths.
pub fn write_layers(stack: &SheetStack, dir: &Path, opts: &LayerOptions) -> Result<Vec<PathBuf>, ExportError> {
    opts.check()?;
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let sheet = stack.sheet_thickness(opts.total_thickness);
    let mut out = Vec::new();
    for level in &stack.levels {
        if level.polygons.is_empty() {
            log::warn!("level {} is empty; writing empty geometry", level.index);
        }
        let stem = layer_stem(level.index, sheet);
        for (ext, text) in [
            ("svg", svg_string(level, stack.extents, opts.scale)),
            ("dxf", dxf_string(level, opts.scale)),
        ] {
            let path = dir.join(format!("{stem}.{ext}"));
            let mut f = create(&path)?;
            f.write_all(text.as_bytes()).map_err(io_at(&path))?;
            f.flush().map_err(io_at(&path))?;
            out.push(path);
        }
    }
    Ok(out)
}

/// Triangle soup of the extruded stack in millimetres.
pub fn extrude_stack(stack: &SheetStack, opts: &LayerOptions) -> Result<Vec<[[f32; 3]; 3]>, ExportError> {
    opts.check()?;
    stack.validate()?;
    let s = stack.sheet_thickness(opts.total_thickness);
    let z = |k: i64| k as f64 * s;
    let pts: Vec<[f64; 2]> = stack.tri.points.iter().map(|p| [p[0] * opts.scale, p[1] * opts.scale]).collect();
    let v = |p: usize, k: i64| -> [f32; 3] { [pts[p][0] as f32, pts[p][1] as f32, z(k) as f32] };
    let mut tris = Vec::new();
    for &(t, l) in &stack.tri.triangles {
        if l == 0 {
            continue;
        }
        let l = l as i64;
        tris.push([v(t[0], l), v(t[1], l), v(t[2], l)]);
        tris.push([v(t[0], -l), v(t[2], -l), v(t[1], -l)]);
    }
    let edges = edge_levels(&stack.tri);
    let mut walls: Vec<(&(usize, usize), &u32)> = edges.iter().collect();
    walls.sort_unstable();
    for (&(a, b), &l) in walls {
        let other = edges.get(&(b, a)).copied().unwrap_or(0);
        if l <= other {
            continue;
        }
        for k in other as i64..l as i64 {
            for (lo, hi) in [(k, k + 1), (-k - 1, -k)] {
                tris.push([v(a, lo), v(b, lo), v(b, hi)]);
                tris.push([v(a, lo), v(b, hi), v(a, hi)]);
            }
        }
    }
    Ok(tris)
}

fn normal(t: &[[f32; 3]; 3]) -> [f32; 3] {
    let u = [t[1][0] - t[0][0], t[1][1] - t[0][1], t[1][2] - t[0][2]];
    let w = [t[2][0] - t[0][0], t[2][1] - t[0][1], t[2][2] - t[0][2]];
    let n = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 0.0 {
        [n[0] / len, n[1] / len, n[2] / len]
    } else {
        [0.0; 3]
    }
}

pub fn write_stl(path: &Path, triangles: &[[[f32; 3]; 3]]) -> Result<(), ExportError> {
    let mut f = create(path)?;
    let err = io_at(path);
    let mut header = [0u8; 80];
    let tag = b"binary STL sheet stack";
    header[..tag.len()].copy_from_slice(tag);
    f.write_all(&header).map_err(&err)?;
    f.write_all(&(triangles.len() as u32).to_le_bytes()).map_err(&err)?;
    for t in triangles {
        for c in normal(t).iter().chain(t.iter().flatten()) {
            f.write_all(&c.to_le_bytes()).map_err(&err)?;
        }
        f.write_all(&[0, 0]).map_err(&err)?;
    }
    f.flush().map_err(&err)
}

/// Parses a binary STL back into triangles.
pub fn read_stl(path: &Path) -> Result<Vec<[[f32; 3]; 3]>, ExportError> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    let bad = || ExportError::Io {
        path: path.to_path_buf(),
        source: io::Error::new(io::ErrorKind::InvalidData, "truncated STL"),
    };
    if bytes.len() < 84 {
        return Err(bad());
    }
    let count = u32::from_le_bytes(bytes[80..84].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 84 + count * 50 {
        return Err(bad());
    }
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    Ok((0..count)
        .map(|t| {
            let base = 84 + t * 50 + 12;
            let mut tri = [[0f32; 3]; 3];
            for (k, vtx) in tri.iter_mut().enumerate() {
                for (d, c) in vtx.iter_mut().enumerate() {
                    *c = f(base + (k * 3 + d) * 4);
                }
            }
            tri
        })
        .collect())
}

/// Enclosed volume of a closed, outward-oriented triangle soup.
pub fn mesh_volume(triangles: &[[[f32; 3]; 3]]) -> f64 {
    triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|p| p.map(f64::from));
            (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0]))
                / 6.0
        })
        .sum()
}

/// Whether every undirected edge is used by exactly two triangles with
/// opposite orientation.
pub fn is_watertight(triangles: &[[[f32; 3]; 3]]) -> bool {
    type Key = [u32; 3];
    let key = |p: [f32; 3]| -> Key { p.map(f32::to_bits) };
    let mut count: HashMap<(Key, Key), i32> = HashMap::new();
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (key(t[k]), key(t[(k + 1) % 3]));
            if a == b {
                return false;
            }
            *count.entry((a, b)).or_insert(0) += 1;
        }
    }
    count
        .iter()
        .all(|(&(a, b), &c)| c == 1 && count.get(&(b, a)).copied() == Some(1))
}

/// Legacy ASCII VTK unstructured grid with named cell fields.
pub fn write_vtk<T: Scalar>(path: &Path, mesh: &AdaptiveMesh<T>, fields: &[(&str, &[T])]) -> Result<(), ExportError> {
    for (_, f) in fields {
        if f.len() != mesh.n_cells() {
            return Err(MeshError::FieldLength {
                expected: mesh.n_cells(),
                got: f.len(),
            }
            .into());
        }
    }
    let mut out = create(path)?;
    let err = io_at(path);
    let nv = mesh.n_vertices();
    let nc = mesh.n_cells();
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\nsheet stack density field\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    s.push_str(&format!("POINTS {nv} double\n"));
    for v in 0..nv {
        let [x, y] = mesh.vertex_coords(v);
        s.push_str(&format!("{} {} 0\n", x.as_f64(), y.as_f64()));
    }
    s.push_str(&format!("CELLS {nc} {}\n", nc * 5));
    for c in 0..nc {
        let [a, b, cc, d] = mesh.cell_vertices(c);
        s.push_str(&format!("4 {a} {b} {cc} {d}\n"));
    }
    s.push_str(&format!("CELL_TYPES {nc}\n"));
    for _ in 0..nc {
        s.push_str("9\n");
    }
    s.push_str(&format!("CELL_DATA {nc}\nSCALARS level int 1\nLOOKUP_TABLE default\n"));
    for c in 0..nc {
        s.push_str(&format!("{}\n", mesh.level(c)));
    }
    for (name, f) in fields {
        s.push_str(&format!("SCALARS {name} double 1\nLOOKUP_TABLE default\n"));
        for x in f.iter() {
            s.push_str(&format!("{}\n", x.as_f64()));
        }
    }
    out.write_all(s.as_bytes()).map_err(&err)?;
    out.flush().map_err(&err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(cols: usize, rows: usize, f: impl Fn(usize, usize) -> f64) -> Raster {
        let values = (0..rows).flat_map(|j| (0..cols).map(move |i| (i, j))).map(|(i, j)| f(i, j)).collect();
        Raster {
            cols,
            rows,
            h: 1.0 / rows as f64,
            extents: (cols as f64 / rows as f64, 1.0),
            values,
        }
    }

    #[test]
    fn full_field_gives_rectangles() {
        let r = raster(8, 4, |_, _| 1.0);
        let st = stack_from_raster(&r, 3);
        for l in &st.levels {
            assert_eq!(l.polygons.len(), 1);
            assert_eq!(l.polygons[0].points.len(), 4);
            assert!((l.area - 2.0).abs() < 1e-12);
            assert!((l.polygons[0].signed_area() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_field_gives_empty_stack() {
        let st = stack_from_raster(&raster(6, 3, |_, _| 0.0), 2);
        assert!(st.levels.iter().all(|l| l.polygons.is_empty() && l.area == 0.0));
        let tris = extrude_stack(&st, &LayerOptions::default()).unwrap();
        assert!(tris.is_empty());
    }

    #[test]
    fn half_domain_areas() {
        let r = raster(10, 5, |i, _| if i < 5 { 1.0 / 3.0 } else { 1.0 });
        let st = stack_from_raster(&r, 3);
        let cell = r.h * r.h;
        assert!((st.levels[0].area - 2.0).abs() < cell);
        assert!((st.levels[1].area - 1.0).abs() < cell);
        assert!((st.levels[2].area - 1.0).abs() < cell);
    }

    #[test]
    fn hole_is_clockwise() {
        let r = raster(9, 9, |i, j| if (3..6).contains(&i) && (3..6).contains(&j) { 0.0 } else { 1.0 });
        let st = stack_from_raster(&r, 1);
        let l = &st.levels[0];
        assert_eq!(l.polygons.len(), 2);
        let signs: Vec<bool> = l.polygons.iter().map(|p| p.signed_area() > 0.0).collect();
        assert!(signs.contains(&true) && signs.contains(&false));
        let total: f64 = l.polygons.iter().map(Polygon::signed_area).sum();
        assert!((total - l.area).abs() < 1e-12);
        assert!(l.polygons.iter().all(|p| !p.self_intersects()));
    }

    #[test]
    fn bow_tie_is_self_intersecting() {
        let p = Polygon {
            points: vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]],
        };
        assert!(p.self_intersects());
        let q = Polygon {
            points: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        };
        assert!(!q.self_intersects());
    }

    #[test]
    fn corrupted_polygon_is_rejected_with_id() {
        let mut st = stack_from_raster(&raster(4, 4, |_, _| 1.0), 2);
        st.levels[1].polygons.push(Polygon {
            points: vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]],
        });
        match extrude_stack(&st, &LayerOptions::default()) {
            Err(ExportError::SelfIntersection { level, polygon }) => assert_eq!((level, polygon), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_box_when_full() {
        let st = stack_from_raster(&raster(4, 2, |_, _| 1.0), 3);
        let opts = LayerOptions {
            scale: 10.0,
            total_thickness: 20.0,
        };
        let tris = extrude_stack(&st, &opts).unwrap();
        assert!(is_watertight(&tris));
        assert!((mesh_volume(&tris) - 20.0 * 10.0 * 20.0).abs() < 1e-6 * 4000.0);
        let (mut lo, mut hi) = ([f32::MAX; 3], [f32::MIN; 3]);
        for p in tris.iter().flatten() {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        assert_eq!(lo, [0.0, 0.0, -10.0]);
        assert_eq!(hi, [20.0, 10.0, 10.0]);
    }

    #[test]
    fn sheet_label() {
        let st = stack_from_raster(&raster(2, 2, |_, _| 1.0), 3);
        assert_eq!(layer_stem(1, st.sheet_thickness(20.0)), "level1_3.33mm");
    }

    #[test]
    fn unit_square_formats() {
        let r = Raster {
            cols: 3,
            rows: 3,
            h: 1.0 / 3.0,
            extents: (1.0, 1.0),
            values: vec![1.0; 9],
        };
        let st = stack_from_raster(&r, 1);
        let svg = svg_string(&st.levels[0], st.extents, 1.0);
        assert_eq!(svg.matches('M').count() + svg.matches('L').count(), 4);
        let dxf = dxf_string(&st.levels[0], 1.0);
        assert_eq!(dxf.matches("\nVERTEX\n").count(), 4);
        assert_eq!(dxf.matches("\nPOLYLINE\n").count(), 1);
    }

    #[test]
    fn scale_is_linear() {
        let st = stack_from_raster(&raster(6, 3, |i, _| if i > 2 { 1.0 } else { 0.0 }), 1);
        let a = svg_string(&st.levels[0], st.extents, 1.0);
        let b = svg_string(&st.levels[0], st.extents, 10.0);
        let nums = |s: &str| -> Vec<f64> {
            let d = s.split(" d=\"").nth(1).unwrap().split('"').next().unwrap().to_string();
            d.replace(['M', 'L', 'Z'], " ").split_whitespace().map(|x| x.parse().unwrap()).collect()
        };
        let (na, nb) = (nums(&a), nums(&b));
        assert_eq!(na.len(), nb.len());
        for (x, y) in na.iter().zip(&nb) {
            assert!((x * 10.0 - y).abs() < 1e-9);
        }
    }
}
