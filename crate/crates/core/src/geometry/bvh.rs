//! Bounding volume hierarchy over mesh triangles: closest-point queries and
//! approximate generalized winding numbers (dipole far field).

use std::f64::consts::PI;

use crate::geometry::mesh::{Aabb, Mesh};
use crate::Vec3;

const LEAF_SIZE: usize = 4;
/// Far-field acceptance ratio for the winding-number dipole approximation.
const WINDING_BETA: f64 = 2.0;

#[derive(Debug, Clone)]
struct Node {
    bbox: Aabb,
    /// Leaf: `start..start+count` in `order`. Inner: children `left`, `left+1`
    /// are not contiguous, so both are stored.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
    /// Sum of triangle area vectors (half cross products).
    area_normal: Vec3,
    /// Area-weighted centroid.
    center: Vec3,
    radius: f64,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.count > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestHit {
    pub point: Vec3,
    pub face: usize,
    pub distance_squared: f64,
}

#[derive(Debug, Clone)]
pub struct TriangleBvh {
    triangles: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision
/// Detection, region tests).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Signed solid angle of triangle `abc` seen from `p`, in steradians.
pub fn solid_angle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let (a, b, c) = (a - p, b - p, c - p);
    let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
    let num = a.dot(&b.cross(&c));
    let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
    2.0 * num.atan2(den)
}

impl TriangleBvh {
    pub fn new(mesh: &Mesh) -> Self {
        let triangles: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let mut order: Vec<usize> = (0..triangles.len()).collect();
        let centroids: Vec<Vec3> = triangles.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut nodes = Vec::with_capacity(2 * triangles.len() / LEAF_SIZE + 1);
        if !triangles.is_empty() {
            build(&triangles, &centroids, &mut order, 0, triangles.len(), &mut nodes);
        }
        Self { triangles, order, nodes }
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn closest(&self, p: &Vec3) -> Option<ClosestHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = ClosestHit {
            point: Vec3::zeros(),
            face: usize::MAX,
            distance_squared: f64::INFINITY,
        };
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if node.bbox.distance_squared(p) >= best.distance_squared {
                continue;
            }
            if node.is_leaf() {
                for &f in &self.order[node.start..node.start + node.count] {
                    let [a, b, c] = &self.triangles[f];
                    let q = closest_point_on_triangle(p, a, b, c);
                    let d2 = (q - p).norm_squared();
                    if d2 < best.distance_squared {
                        best = ClosestHit {
                            point: q,
                            face: f,
                            distance_squared: d2,
                        };
                    }
                }
            } else {
                let (l, r) = (node.left, node.right);
                let dl = self.nodes[l].bbox.distance_squared(p);
                let dr = self.nodes[r].bbox.distance_squared(p);
                // Push the farther child first so the nearer one is popped next.
                if dl < dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        Some(best)
    }

    /// Exact generalized winding number (sum of solid angles).
    pub fn winding_number_exact(&self, p: &Vec3) -> f64 {
        self.triangles.iter().map(|[a, b, c]| solid_angle(p, a, b, c)).sum::<f64>() / (4.0 * PI)
    }

    /// Winding number with the dipole far-field approximation for clusters
    /// seen from farther than `WINDING_BETA` times their radius.
    pub fn winding_number(&self, p: &Vec3) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            let d = node.center - p;
            let dist = d.norm();
            if dist > WINDING_BETA * node.radius {
                total += d.dot(&node.area_normal) / (dist * dist * dist);
                continue;
            }
            if node.is_leaf() {
                for &f in &self.order[node.start..node.start + node.count] {
                    let [a, b, c] = &self.triangles[f];
                    total += solid_angle(p, a, b, c);
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        total / (4.0 * PI)
    }
}

fn build(tris: &[[Vec3; 3]], centroids: &[Vec3], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let idx = nodes.len();
    let slice = &order[start..end];
    let mut bbox = Aabb::empty();
    let mut area_normal = Vec3::zeros();
    let mut weighted = Vec3::zeros();
    let mut area_sum = 0.0;
    for &f in slice {
        let t = &tris[f];
        for v in t {
            bbox.grow(v);
        }
        let an = (t[1] - t[0]).cross(&(t[2] - t[0])) * 0.5;
        let area = an.norm();
        area_normal += an;
        weighted += centroids[f] * area;
        area_sum += area;
    }
    let center = if area_sum > 0.0 { weighted / area_sum } else { bbox.center() };
    let radius = slice
        .iter()
        .flat_map(|&f| tris[f].iter())
        .map(|v| (v - center).norm())
        .fold(0.0, f64::max);
    nodes.push(Node {
        bbox,
        start,
        count: 0,
        left: 0,
        right: 0,
        area_normal,
        center,
        radius,
    });
    if end - start <= LEAF_SIZE {
        nodes[idx].count = end - start;
        return idx;
    }
    let mut cb = Aabb::empty();
    for &f in &order[start..end] {
        cb.grow(&centroids[f]);
    }
    let ext = cb.max - cb.min;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
    });
    let left = build(tris, centroids, order, start, mid, nodes);
    let right = build(tris, centroids, order, mid, end, nodes);
    nodes[idx].left = left;
    nodes[idx].right = right;
    idx
}
