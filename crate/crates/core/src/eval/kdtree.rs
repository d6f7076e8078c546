use super::Point3;

#[inline]
pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Static 3-D k-d tree for exact nearest-neighbour distance queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut tree = Self { points: points.to_vec(), nodes: Vec::with_capacity(points.len()), root: None };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build_rec(&mut idx, 0);
        tree
    }

    fn build_rec(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let point = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(hi, depth + 1);
        self.nodes.push(Node { point, axis, left, right });
        Some(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to the nearest stored point.
    pub fn nearest_dist2(&self, q: &Point3) -> Option<f64> {
        let mut best = f64::INFINITY;
        self.search(self.root?, q, &mut best);
        Some(best)
    }

    pub fn nearest_distance(&self, q: &Point3) -> Option<f64> {
        self.nearest_dist2(q).map(f64::sqrt)
    }

    fn search(&self, node: usize, q: &Point3, best: &mut f64) {
        let n = &self.nodes[node];
        let p = &self.points[n.point];
        let d = dist2(q, p);
        if d < *best {
            *best = d;
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, best);
        }
        if let Some(c) = far {
            if diff * diff <= *best {
                self.search(c, q, best);
            }
        }
    }
}
