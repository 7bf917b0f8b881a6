//! Triangle-triangle intersection and the self-intersection ratio metric.
//!
//! The pair test follows Möller's interval-overlap method with signed
//! distances snapped to zero within `eps`; coplanar pairs fall back to a 2D
//! overlap test. Faces sharing a vertex are never tested against each other.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::Vec3;
use crate::mesh::GridMesh;

/// Fraction of faces of `mesh` that interpenetrate at least one face they
/// share no vertex with.
pub fn self_intersection_ratio(mesh: &GridMesh) -> f64 {
    SelfIntersection::for_grid(mesh).ratio(mesh.vertices(), mesh.faces())
}

#[derive(Debug, Clone, Copy)]
pub struct SelfIntersection {
    eps: f64,
    leaf_size: usize,
}

impl SelfIntersection {
    pub fn new(eps: f64) -> Self {
        Self { eps, leaf_size: 4 }
    }

    /// Tolerance `1e-9 * plane_side`.
    pub fn for_grid(mesh: &GridMesh) -> Self {
        Self::new(1e-9 * mesh.scale().plane_side())
    }

    /// Tolerance relative to the largest bounding-box extent of a soup.
    pub fn for_soup(vertices: &[Vec3]) -> Self {
        let (lo, hi) = bounds(vertices);
        let extent = (hi - lo).max_abs();
        Self::new(1e-9 * if extent > 0.0 && extent.is_finite() { extent } else { 1.0 })
    }

    #[inline]
    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn ratio(&self, vertices: &[Vec3], faces: &[[u32; 3]]) -> f64 {
        if faces.is_empty() {
            return 0.0;
        }
        let flags = self.intersecting_faces(vertices, faces);
        flags.iter().filter(|&&f| f).count() as f64 / faces.len() as f64
    }

    /// Whether the two faces share no vertex and interpenetrate.
    pub fn faces_intersect(&self, vertices: &[Vec3], fa: &[u32; 3], fb: &[u32; 3]) -> bool {
        if fa.iter().any(|v| fb.contains(v)) {
            return false;
        }
        let p = |i: u32| vertices[i as usize];
        tri_tri_intersect([p(fa[0]), p(fa[1]), p(fa[2])], [p(fb[0]), p(fb[1]), p(fb[2])], self.eps)
    }

    /// Per-face flags, BVH accelerated.
    pub fn intersecting_faces(&self, vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec<bool> {
        let mut flags = vec![false; faces.len()];
        if faces.len() < 2 {
            return flags;
        }
        let bvh = Bvh::build(vertices, faces, 1e3 * self.eps, self.leaf_size);
        let mut stack = vec![(0usize, 0usize)];
        while let Some((a, b)) = stack.pop() {
            let (na, nb) = (&bvh.nodes[a], &bvh.nodes[b]);
            if a != b && !na.overlaps(nb) {
                continue;
            }
            match (na.children, nb.children) {
                (None, None) => {
                    for (ia, &fa) in bvh.order[na.range.0..na.range.1].iter().enumerate() {
                        let start = if a == b { ia + 1 } else { 0 };
                        for &fb in &bvh.order[nb.range.0 + start..nb.range.1] {
                            if (flags[fa] && flags[fb]) || !bvh.boxes[fa].overlaps(&bvh.boxes[fb]) {
                                continue;
                            }
                            if self.faces_intersect(vertices, &faces[fa], &faces[fb]) {
                                flags[fa] = true;
                                flags[fb] = true;
                            }
                        }
                    }
                }
                _ if a == b => {
                    let (l, r) = na.children.unwrap();
                    stack.extend([(l, l), (r, r), (l, r)]);
                }
                (Some((l, r)), _) if nb.children.is_none() || na.volume() >= nb.volume() => {
                    stack.extend([(l, b), (r, b)]);
                }
                (_, Some((l, r))) => {
                    stack.extend([(a, l), (a, r)]);
                }
                (Some(_), None) => unreachable!(),
            }
        }
        flags
    }
}

fn bounds(vertices: &[Vec3]) -> (Vec3, Vec3) {
    vertices
        .iter()
        .fold((Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self { lo: Vec3::splat(f64::INFINITY), hi: Vec3::splat(f64::NEG_INFINITY) }
    }

    fn union(self, o: Aabb) -> Aabb {
        Aabb { lo: self.lo.min(o.lo), hi: self.hi.max(o.hi) }
    }

    fn overlaps(&self, o: &Aabb) -> bool {
        self.lo.x <= o.hi.x
            && o.lo.x <= self.hi.x
            && self.lo.y <= o.hi.y
            && o.lo.y <= self.hi.y
            && self.lo.z <= o.hi.z
            && o.lo.z <= self.hi.z
    }

    fn center(&self) -> Vec3 {
        (self.lo + self.hi) * 0.5
    }
}

#[derive(Debug)]
struct Node {
    bbox: Aabb,
    range: (usize, usize),
    children: Option<(usize, usize)>,
}

impl Node {
    fn overlaps(&self, o: &Node) -> bool {
        self.bbox.overlaps(&o.bbox)
    }

    fn volume(&self) -> f64 {
        let d = self.bbox.hi - self.bbox.lo;
        d.x * d.y + d.y * d.z + d.z * d.x
    }
}

struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
    boxes: Vec<Aabb>,
}

impl Bvh {
    fn build(vertices: &[Vec3], faces: &[[u32; 3]], pad: f64, leaf_size: usize) -> Self {
        let boxes: Vec<Aabb> = faces
            .iter()
            .map(|f| {
                let (a, b, c) = (vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
                Aabb { lo: a.min(b).min(c) - Vec3::splat(pad), hi: a.max(b).max(c) + Vec3::splat(pad) }
            })
            .collect();
        let mut bvh = Bvh { nodes: Vec::new(), order: (0..faces.len()).collect(), boxes };
        bvh.split(0, faces.len(), leaf_size);
        bvh
    }

    fn split(&mut self, start: usize, end: usize, leaf_size: usize) -> usize {
        let bbox = self.order[start..end].iter().fold(Aabb::empty(), |acc, &f| acc.union(self.boxes[f]));
        let id = self.nodes.len();
        self.nodes.push(Node { bbox, range: (start, end), children: None });
        if end - start <= leaf_size {
            return id;
        }
        let cb = self.order[start..end].iter().fold(Aabb::empty(), |acc, &f| {
            let c = self.boxes[f].center();
            acc.union(Aabb { lo: c, hi: c })
        });
        let ext = cb.hi - cb.lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = start + (end - start) / 2;
        let boxes = &self.boxes;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            boxes[a].center()[axis].total_cmp(&boxes[b].center()[axis]).then(a.cmp(&b))
        });
        let l = self.split(start, mid, leaf_size);
        let r = self.split(mid, end, leaf_size);
        self.nodes[id].children = Some((l, r));
        id
    }
}

/// Möller interval-overlap triangle test. Touching counts as intersecting.
pub fn tri_tri_intersect(v: [Vec3; 3], u: [Vec3; 3], eps: f64) -> bool {
    let Some(n1) = (v[1] - v[0]).cross(v[2] - v[0]).normalized() else {
        return false;
    };
    let d1 = -n1.dot(v[0]);
    let du = u.map(|p| snap(n1.dot(p) + d1, eps));
    if same_side(du) {
        return false;
    }

    let Some(n2) = (u[1] - u[0]).cross(u[2] - u[0]).normalized() else {
        return false;
    };
    let d2 = -n2.dot(u[0]);
    let dv = v.map(|p| snap(n2.dot(p) + d2, eps));
    if same_side(dv) {
        return false;
    }

    let dir = n1.cross(n2);
    let axis = largest_axis(dir);
    let vp = v.map(|p| p[axis]);
    let up = u.map(|p| p[axis]);

    let (Some(iv), Some(iu)) = (interval(vp, dv), interval(up, du)) else {
        return coplanar_tri_tri(n1, v, u, eps);
    };
    !(iv.1 < iu.0 || iu.1 < iv.0)
}

#[inline]
fn snap(d: f64, eps: f64) -> f64 {
    if d.abs() < eps {
        0.0
    } else {
        d
    }
}

#[inline]
fn same_side(d: [f64; 3]) -> bool {
    d[0] * d[1] > 0.0 && d[0] * d[2] > 0.0
}

#[inline]
fn largest_axis(d: Vec3) -> usize {
    let (ax, ay, az) = (d.x.abs(), d.y.abs(), d.z.abs());
    if ax >= ay && ax >= az {
        0
    } else if ay >= az {
        1
    } else {
        2
    }
}

/// Sorted projection interval of a triangle's crossing with the other
/// plane, or `None` when the triangle is coplanar with it.
fn interval(p: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let (a, b, c) = if d[0] * d[1] > 0.0 {
        (2, 0, 1)
    } else if d[0] * d[2] > 0.0 {
        (1, 0, 2)
    } else if d[1] * d[2] > 0.0 || d[0] != 0.0 {
        (0, 1, 2)
    } else if d[1] != 0.0 {
        (1, 0, 2)
    } else if d[2] != 0.0 {
        (2, 0, 1)
    } else {
        return None;
    };
    let t0 = p[a] + (p[b] - p[a]) * d[a] / (d[a] - d[b]);
    let t1 = p[a] + (p[c] - p[a]) * d[a] / (d[a] - d[c]);
    Some(if t0 <= t1 { (t0, t1) } else { (t1, t0) })
}

fn coplanar_tri_tri(n: Vec3, v: [Vec3; 3], u: [Vec3; 3], eps: f64) -> bool {
    // drop the dominant normal axis
    let (i0, i1) = match largest_axis(n) {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let v2 = v.map(|p| (p[i0], p[i1]));
    let u2 = u.map(|p| (p[i0], p[i1]));
    for a in 0..3 {
        for b in 0..3 {
            if segments_intersect(v2[a], v2[(a + 1) % 3], u2[b], u2[(b + 1) % 3], eps) {
                return true;
            }
        }
    }
    point_in_tri(v2[0], u2, eps) || point_in_tri(u2[0], v2, eps)
}

type P2 = (f64, f64);

#[inline]
fn orient(a: P2, b: P2, c: P2) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn segments_intersect(p1: P2, p2: P2, q1: P2, q2: P2, eps: f64) -> bool {
    let tol = |a: P2, b: P2| eps * libm::hypot(b.0 - a.0, b.1 - a.1);
    let s = |o: f64, t: f64| if o.abs() <= t { 0.0 } else { o.signum() };
    let o1 = s(orient(p1, p2, q1), tol(p1, p2));
    let o2 = s(orient(p1, p2, q2), tol(p1, p2));
    let o3 = s(orient(q1, q2, p1), tol(q1, q2));
    let o4 = s(orient(q1, q2, p2), tol(q1, q2));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    let on = |a: P2, b: P2, c: P2| {
        c.0 >= a.0.min(b.0) - eps && c.0 <= a.0.max(b.0) + eps && c.1 >= a.1.min(b.1) - eps && c.1 <= a.1.max(b.1) + eps
    };
    (o1 == 0.0 && on(p1, p2, q1))
        || (o2 == 0.0 && on(p1, p2, q2))
        || (o3 == 0.0 && on(q1, q2, p1))
        || (o4 == 0.0 && on(q1, q2, p2))
}

fn point_in_tri(p: P2, t: [P2; 3], eps: f64) -> bool {
    let a = orient(t[0], t[1], p);
    let b = orient(t[1], t[2], p);
    let c = orient(t[2], t[0], p);
    let tol = eps * eps;
    (a >= -tol && b >= -tol && c >= -tol) || (a <= tol && b <= tol && c <= tol)
}
