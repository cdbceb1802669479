//! Uniform simplicial meshes of the interval, the unit square and the
//! periodic unit cell.
//!
//! Vertices are numbered lexicographically with the first coordinate
//! running fastest. Squares are split along the diagonal from the lower-left
//! to the upper-right corner.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("empty mesh: at least one cell per side is required")]
    EmptyMesh,
    #[error("periodic cell mesh needs at least 2 cells per side, got {0}")]
    TooCoarseForPeriodic(usize),
    #[error("unsupported space dimension {0} (only 1 and 2 are implemented)")]
    UnsupportedDimension(usize),
}

/// The two macroscopic domains the toolkit discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// `(0,1)`, space dimension 1.
    Interval,
    /// `(0,1)^2`, space dimension 2.
    UnitSquare,
}

impl Domain {
    pub fn dim(self) -> usize {
        match self {
            Domain::Interval => 1,
            Domain::UnitSquare => 2,
        }
    }

    /// Dirichlet mesh of this domain with `n` cells per side.
    pub fn mesh(self, n: usize) -> Result<Mesh, MeshError> {
        match self {
            Domain::Interval => build_interval_mesh(n),
            Domain::UnitSquare => build_unit_square_mesh(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Interval,
    Square,
}

/// An immutable structured simplicial mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    cells_per_side: usize,
    layout: Layout,
    points: Vec<[f64; 2]>,
    /// Flattened cells, `dim + 1` vertex indices each.
    cells: Vec<usize>,
    boundary: Vec<bool>,
    periodic: Option<Vec<usize>>,
}

/// `n` uniform segments of `(0,1)`.
pub fn build_interval_mesh(n: usize) -> Result<Mesh, MeshError> {
    if n == 0 {
        return Err(MeshError::EmptyMesh);
    }
    let points = (0..=n).map(|i| [i as f64 / n as f64, 0.0]).collect();
    let cells = (0..n).flat_map(|c| [c, c + 1]).collect();
    let mut boundary = vec![false; n + 1];
    boundary[0] = true;
    boundary[n] = true;
    Ok(Mesh {
        dim: 1,
        cells_per_side: n,
        layout: Layout::Interval,
        points,
        cells,
        boundary,
        periodic: None,
    })
}

/// Structured triangulation of `(0,1)^2` with `2 n^2` triangles.
pub fn build_unit_square_mesh(n: usize) -> Result<Mesh, MeshError> {
    if n == 0 {
        return Err(MeshError::EmptyMesh);
    }
    let side = n + 1;
    let mut points = Vec::with_capacity(side * side);
    let mut boundary = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            points.push([i as f64 / n as f64, j as f64 / n as f64]);
            boundary.push(i == 0 || j == 0 || i == n || j == n);
        }
    }
    let mut cells = Vec::with_capacity(6 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = j * side + i;
            let v10 = v00 + 1;
            let v01 = v00 + side;
            let v11 = v01 + 1;
            cells.extend_from_slice(&[v00, v10, v11]);
            cells.extend_from_slice(&[v00, v11, v01]);
        }
    }
    Ok(Mesh {
        dim: 2,
        cells_per_side: n,
        layout: Layout::Square,
        points,
        cells,
        boundary,
        periodic: None,
    })
}

/// Uniform mesh of the unit cell `(0,1)^dim` with opposite faces identified.
pub fn build_periodic_cell_mesh(n: usize, dim: usize) -> Result<Mesh, MeshError> {
    if n < 2 {
        return Err(MeshError::TooCoarseForPeriodic(n));
    }
    let mut mesh = match dim {
        1 => build_interval_mesh(n)?,
        2 => build_unit_square_mesh(n)?,
        d => return Err(MeshError::UnsupportedDimension(d)),
    };
    let side = n + 1;
    let master = (0..mesh.points.len())
        .map(|v| match dim {
            1 => v % n,
            _ => {
                let (i, j) = (v % side, v / side);
                (j % n) * side + (i % n)
            }
        })
        .collect();
    mesh.boundary.iter_mut().for_each(|b| *b = false);
    mesh.periodic = Some(master);
    Ok(mesh)
}

impl Mesh {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    /// Uniform mesh width along each axis.
    pub fn h(&self) -> f64 {
        1.0 / self.cells_per_side as f64
    }

    pub fn num_vertices(&self) -> usize {
        self.points.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len() / (self.dim + 1)
    }

    pub fn vertex(&self, v: usize) -> [f64; 2] {
        self.points[v]
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        let k = self.dim + 1;
        &self.cells[c * k..(c + 1) * k]
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn boundary_vertices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_vertices()).filter(|&v| self.boundary[v])
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic.is_some()
    }

    /// The representative vertex of `v` under periodic identification
    /// (`v` itself on non-periodic meshes).
    pub fn master(&self, v: usize) -> usize {
        self.periodic.as_ref().map_or(v, |m| m[v])
    }

    /// Number of vertices left after periodic identification.
    pub fn num_independent_vertices(&self) -> usize {
        match &self.periodic {
            Some(m) => (0..m.len()).filter(|&v| m[v] == v).count(),
            None => self.num_vertices(),
        }
    }

    pub fn cell_measure(&self, c: usize) -> f64 {
        let vs = self.cell(c);
        match self.dim {
            1 => (self.points[vs[1]][0] - self.points[vs[0]][0]).abs(),
            _ => {
                let [a, b, d] = [self.points[vs[0]], self.points[vs[1]], self.points[vs[2]]];
                0.5 * ((b[0] - a[0]) * (d[1] - a[1]) - (d[0] - a[0]) * (b[1] - a[1])).abs()
            }
        }
    }

    pub fn centroid(&self, c: usize) -> [f64; 2] {
        let vs = self.cell(c);
        let k = vs.len() as f64;
        let mut x = [0.0; 2];
        for &v in vs {
            x[0] += self.points[v][0] / k;
            x[1] += self.points[v][1] / k;
        }
        x
    }

    /// Gradients of the `dim + 1` barycentric (hat) functions on cell `c`.
    pub fn hat_gradients(&self, c: usize) -> [[f64; 2]; 3] {
        let vs = self.cell(c);
        match self.dim {
            1 => {
                let len = self.points[vs[1]][0] - self.points[vs[0]][0];
                [[-1.0 / len, 0.0], [1.0 / len, 0.0], [0.0; 2]]
            }
            _ => {
                let [p0, p1, p2] = [self.points[vs[0]], self.points[vs[1]], self.points[vs[2]]];
                let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
                [
                    [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
                    [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
                    [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
                ]
            }
        }
    }

    /// Physical coordinates of a barycentric point of cell `c`.
    pub fn map_point(&self, c: usize, bary: &[f64; 3]) -> [f64; 2] {
        let mut x = [0.0; 2];
        for (k, &v) in self.cell(c).iter().enumerate() {
            x[0] += bary[k] * self.points[v][0];
            x[1] += bary[k] * self.points[v][1];
        }
        x
    }

    /// Cell containing `point` and the barycentric coordinates there, or
    /// `None` when the point lies outside the closed domain.
    pub fn locate(&self, point: &[f64]) -> Option<(usize, [f64; 3])> {
        const TOL: f64 = 1e-12;
        if point.len() != self.dim || point.iter().any(|&p| !(-TOL..=1.0 + TOL).contains(&p)) {
            return None;
        }
        let n = self.cells_per_side;
        let index = |p: f64| ((p.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n - 1);
        match self.layout {
            Layout::Interval => {
                let c = index(point[0]);
                let t = (point[0].clamp(0.0, 1.0) - self.points[c][0]) * n as f64;
                Some((c, [1.0 - t, t, 0.0]))
            }
            Layout::Square => {
                let (i, j) = (index(point[0]), index(point[1]));
                let sx = point[0].clamp(0.0, 1.0) * n as f64 - i as f64;
                let sy = point[1].clamp(0.0, 1.0) * n as f64 - j as f64;
                let square = j * n + i;
                // lower triangle [v00, v10, v11] holds sx >= sy
                if sx >= sy {
                    Some((2 * square, [1.0 - sx, sx - sy, sy]))
                } else {
                    Some((2 * square + 1, [1.0 - sy, sx, sy - sx]))
                }
            }
        }
    }
}
