//! Conforming triangulations of convex polygons and their uniform (red)
//! refinement hierarchy.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// An immutable conforming triangulation.
///
/// Triangles are stored counter-clockwise. `parent[t]` is the index of the
/// triangle in the previous refinement level that contains triangle `t`
/// (empty for a base mesh).
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_vertex: Vec<bool>,
    h: f64,
    level: usize,
    parent: Vec<usize>,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl Mesh {
    /// Validates and wraps a triangulation. Boundary flags and `h` are derived.
    pub fn from_parts(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        level: usize,
    ) -> Result<Self> {
        Self::with_parent(vertices, triangles, level, Vec::new())
    }

    fn with_parent(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        level: usize,
        parent: Vec<usize>,
    ) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::invalid("mesh has no triangles"));
        }
        let nv = vertices.len();
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        let mut h: f64 = 0.0;
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= nv) {
                return Err(Error::invalid(format!(
                    "triangle {t} references a missing vertex"
                )));
            }
            let [a, b, c] = tri.map(|i| vertices[i]);
            let area = signed_area(a, b, c);
            if !(area > 0.0) {
                return Err(Error::DegenerateElement { triangle: t, area });
            }
            h = h.max(dist(a, b)).max(dist(b, c)).max(dist(c, a));
            for k in 0..3 {
                *edge_count
                    .entry(edge_key(tri[k], tri[(k + 1) % 3]))
                    .or_default() += 1;
            }
        }
        let mut boundary_vertex = vec![false; nv];
        for (&(a, b), &count) in &edge_count {
            match count {
                1 => {
                    boundary_vertex[a] = true;
                    boundary_vertex[b] = true;
                }
                2 => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "edge ({a},{b}) shared by {count} triangles"
                    )))
                }
            }
        }
        // A conforming triangulation of a simply connected polygon has Euler
        // characteristic one; hanging nodes break it.
        let used = {
            let mut u = vec![false; nv];
            triangles.iter().flatten().for_each(|&v| u[v] = true);
            u.iter().filter(|&&x| x).count()
        };
        let euler = used as i64 - edge_count.len() as i64 + triangles.len() as i64;
        if euler != 1 {
            return Err(Error::invalid(format!(
                "non-conforming triangulation (Euler characteristic {euler})"
            )));
        }
        Ok(Self {
            vertices,
            triangles,
            boundary_vertex,
            h,
            level,
            parent,
        })
    }

    /// Unit square split into `n × n` cells, each cut along the diagonal from
    /// its lower-left to its upper-right corner.
    pub fn structured_square(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("subdivision count must be at least 1"));
        }
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        let mut mesh = Self::from_parts(vertices, triangles, 0)?;
        mesh.h = std::f64::consts::SQRT_2 / n as f64;
        Ok(mesh)
    }

    /// Red refinement: every triangle is split into four similar children
    /// through its edge midpoints. Midpoints of shared edges are created once.
    pub fn refine_uniform(&self) -> Mesh {
        let mut vertices = self.vertices.clone();
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point>| -> usize {
            *midpoint.entry(edge_key(a, b)).or_insert_with(|| {
                let (p, q) = (vertices[a], vertices[b]);
                vertices.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
                vertices.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        let mut parent = Vec::with_capacity(4 * self.triangles.len());
        for (t, &[a, b, c]) in self.triangles.iter().enumerate() {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            triangles.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
            parent.extend_from_slice(&[t; 4]);
        }
        let mut mesh = Self::with_parent(vertices, triangles, self.level + 1, parent)
            .expect("red refinement of a valid mesh is valid");
        mesh.h = 0.5 * self.h;
        mesh
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_vertex(&self) -> &[bool] {
        &self.boundary_vertex
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        let mut edges: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| edge_key(t[k], t[(k + 1) % 3])))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    pub fn n_interior_vertices(&self) -> usize {
        self.boundary_vertex.iter().filter(|&&b| !b).count()
    }

    /// Maximum element diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn parent(&self) -> &[usize] {
        &self.parent
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        signed_area(a, b, c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.area(t)).sum()
    }

    /// max over elements of diameter / inradius.
    pub fn shape_regularity(&self) -> f64 {
        (0..self.n_triangles())
            .map(|t| {
                let [a, b, c] = self.triangle_points(t);
                let (la, lb, lc) = (dist(b, c), dist(c, a), dist(a, b));
                let inradius = 2.0 * self.area(t) / (la + lb + lc);
                la.max(lb).max(lc) / inradius
            })
            .fold(0.0, f64::max)
    }

    /// Plain-text dump: a `n_vertices n_triangles` header, one `x y boundary`
    /// line per vertex (boundary is 0 or 1), then one `i j k` line per triangle.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.n_vertices(), self.n_triangles())?;
        for (p, &b) in self.vertices.iter().zip(&self.boundary_vertex) {
            writeln!(w, "{:e} {:e} {}", p[0], p[1], u8::from(b))?;
        }
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Mesh> {
        let mut lines = r.lines();
        let mut next = || -> Result<Vec<String>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::invalid("truncated mesh file"))??;
            Ok(line.split_whitespace().map(str::to_owned).collect())
        };
        let parse_err = |s: &str| Error::invalid(format!("bad mesh token '{s}'"));
        let head = next()?;
        if head.len() != 2 {
            return Err(Error::invalid(
                "mesh header must be 'n_vertices n_triangles'",
            ));
        }
        let nv: usize = head[0].parse().map_err(|_| parse_err(&head[0]))?;
        let nt: usize = head[1].parse().map_err(|_| parse_err(&head[1]))?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let f = next()?;
            if f.len() != 3 {
                return Err(Error::invalid("vertex line must be 'x y boundary'"));
            }
            let x: f64 = f[0].parse().map_err(|_| parse_err(&f[0]))?;
            let y: f64 = f[1].parse().map_err(|_| parse_err(&f[1]))?;
            vertices.push([x, y]);
        }
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let f = next()?;
            if f.len() != 3 {
                return Err(Error::invalid("triangle line must be 'i j k'"));
            }
            let mut t = [0usize; 3];
            for k in 0..3 {
                t[k] = f[k].parse().map_err(|_| parse_err(&f[k]))?;
            }
            triangles.push(t);
        }
        Mesh::from_parts(vertices, triangles, 0)
    }
}

/// A nested sequence of meshes, level `l` obtained from level 0 by `l` red
/// refinements.
#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    levels: Vec<Mesh>,
}

impl MeshHierarchy {
    pub fn new(base: Mesh, finest: usize) -> Self {
        let mut levels = vec![base];
        for _ in 0..finest {
            let next = levels.last().unwrap().refine_uniform();
            levels.push(next);
        }
        Self { levels }
    }

    /// Level `l` is the unit square with `2^l` cells per side.
    pub fn unit_square(finest: usize) -> Self {
        Self::new(Mesh::structured_square(1).expect("n = 1 is valid"), finest)
    }

    pub fn mesh(&self, level: usize) -> &Mesh {
        &self.levels[level]
    }

    pub fn finest(&self) -> usize {
        self.levels.len() - 1
    }

    /// Index of the triangle of `coarse` level containing triangle `t` of `fine` level.
    pub fn ancestor(&self, fine: usize, coarse: usize, mut t: usize) -> usize {
        assert!(coarse <= fine && fine <= self.finest());
        for l in (coarse + 1..=fine).rev() {
            t = self.levels[l].parent[t];
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_cell_square() {
        let m = Mesh::structured_square(1).unwrap();
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(m.n_triangles(), 2);
        assert!((m.h() - 2f64.sqrt()).abs() < 1e-15);
        assert!(m.boundary_vertex().iter().all(|&b| b));
    }

    #[test]
    fn two_by_two_square() {
        let m = Mesh::structured_square(2).unwrap();
        assert_eq!(m.n_vertices(), 9);
        assert_eq!(m.n_triangles(), 8);
        assert!((m.total_area() - 1.0).abs() < 1e-15);
        assert_eq!(m.n_interior_vertices(), 1);
        assert!(!m.boundary_vertex()[4]);
    }

    #[test]
    fn corners_are_boundary() {
        for n in 1..6 {
            let m = Mesh::structured_square(n).unwrap();
            for c in [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]] {
                let v = m.vertices().iter().position(|p| *p == c).unwrap();
                assert!(m.boundary_vertex()[v]);
            }
        }
    }

    #[test]
    fn zero_subdivisions_rejected() {
        assert!(Mesh::structured_square(0).is_err());
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let r = Mesh::from_parts(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![[0, 1, 2]], 0);
        assert!(matches!(
            r,
            Err(Error::DegenerateElement { triangle: 0, .. })
        ));
        let cw = Mesh::from_parts(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]], vec![[0, 1, 2]], 0);
        assert!(cw.is_err());
    }

    #[test]
    fn hanging_node_rejected() {
        // Left triangle split at the midpoint of the shared edge, right one not.
        let v = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]];
        let t = vec![[0, 1, 4], [1, 2, 4], [0, 2, 3]];
        assert!(Mesh::from_parts(v, t, 0).is_err());
    }

    #[test]
    fn refinement_counts_and_scaling() {
        let m = Mesh::structured_square(3).unwrap();
        let r = m.refine_uniform();
        assert_eq!(r.n_triangles(), 4 * m.n_triangles());
        assert_eq!(r.n_vertices(), m.n_vertices() + m.n_edges());
        assert!((r.h() - m.h() / 2.0).abs() < 1e-15);
        assert!((r.total_area() - m.total_area()).abs() <= 1e-14 * m.total_area());
        assert_eq!(r.level(), 1);
    }

    #[test]
    fn boundary_flags_match_geometry_after_refinement() {
        let h = MeshHierarchy::unit_square(4);
        for l in 0..=4 {
            let m = h.mesh(l);
            for (p, &b) in m.vertices().iter().zip(m.boundary_vertex()) {
                let on = p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0;
                assert_eq!(on, b);
            }
            assert!((m.h() - 2f64.sqrt() / (1 << l) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_regularity_is_level_independent() {
        let h = MeshHierarchy::unit_square(5);
        let q0 = h.mesh(0).shape_regularity();
        for l in 1..=5 {
            assert!((h.mesh(l).shape_regularity() - q0).abs() < 1e-9 * q0);
        }
    }

    #[test]
    fn ancestors_contain_children() {
        let h = MeshHierarchy::unit_square(3);
        let fine = h.mesh(3);
        for t in 0..fine.n_triangles() {
            let a = h.ancestor(3, 1, t);
            let [p, q, r] = h.mesh(1).triangle_points(a);
            let c = fine.triangle_points(t);
            let centroid = [
                (c[0][0] + c[1][0] + c[2][0]) / 3.0,
                (c[0][1] + c[1][1] + c[2][1]) / 3.0,
            ];
            for (x, y) in [(p, q), (q, r), (r, p)] {
                assert!(signed_area(x, y, centroid) > 0.0);
            }
        }
    }

    #[test]
    fn text_dump_roundtrip() {
        let m = Mesh::structured_square(3).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let back = Mesh::read_text(buf.as_slice()).unwrap();
        assert_eq!(back.triangles(), m.triangles());
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.boundary_vertex(), m.boundary_vertex());
    }

    proptest! {
        #[test]
        fn refinement_preserves_invariants(n in 1usize..6, depth in 0usize..3) {
            let mut m = Mesh::structured_square(n).unwrap();
            let h0 = m.h();
            for _ in 0..depth {
                let r = m.refine_uniform();
                prop_assert_eq!(r.n_vertices(), m.n_vertices() + m.n_edges());
                m = r;
            }
            prop_assert!((m.h() - h0 / (1 << depth) as f64).abs() < 1e-14);
            prop_assert!((m.total_area() - 1.0).abs() < 1e-13);
            prop_assert!((0..m.n_triangles()).all(|t| m.area(t) > 0.0));
        }
    }
}
