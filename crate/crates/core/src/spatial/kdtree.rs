use crate::domain::Point;
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

const LEAF_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable k-d tree over one frame's points.
///
/// Built by median split on the widest bounding-box axis. Queries are exact:
/// results are ordered by `(distance, index)`.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Point>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Bounded sorted candidate list keyed by `(d2, index)`.
struct Candidates {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Candidates {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].0
        }
    }

    fn offer(&mut self, d2: f64, index: usize) {
        if self.items.len() == self.k {
            let (wd, wi) = self.items[self.k - 1];
            if d2 > wd || (d2 == wd && index > wi) {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&(d, i)| d < d2 || (d == d2 && i < index));
        self.items.insert(pos, (d2, index));
        self.items.truncate(self.k);
    }
}

impl SpatialIndex {
    pub fn build(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut index = SpatialIndex {
            points: points.to_vec(),
            perm: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.perm[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap_or(0);
        if hi[axis] - lo[axis] == 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.perm[mid]][axis];
        self.nodes.push(Node::Split {
            axis,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id]
        {
            *l = left;
            *r = right;
        }
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// The `k` nearest indexed points to `query`, nearest first, ties broken
    /// by smaller original index.
    pub fn knn(&self, query: &Point, k: usize) -> Result<Vec<Neighbor>> {
        let n = self.points.len();
        if k > n {
            return Err(Error::KTooLarge { k, n });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut cand = Candidates::new(k);
        self.search(0, query, &mut cand);
        Ok(cand
            .items
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect())
    }

    fn search(&self, node: usize, q: &Point, cand: &mut Candidates) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    cand.offer(dist2(q, &self.points[i]), i);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, cand);
                // `<=` keeps equal-distance candidates with smaller indices reachable
                if diff * diff <= cand.worst() {
                    self.search(far, q, cand);
                }
            }
        }
    }

    /// k-NN of every indexed point against the index itself.
    pub fn neighbor_table(&self, k: usize, mode: ExecMode) -> Result<NeighborTable> {
        let n = self.points.len();
        if k > n {
            return Err(Error::KTooLarge { k, n });
        }
        let rows = par::map_indexed(n, mode, |i| {
            self.knn(&self.points[i], k).expect("k checked above")
        });
        let mut indices = Vec::with_capacity(n * k);
        let mut distances = Vec::with_capacity(n * k);
        for row in rows {
            for nb in row {
                indices.push(nb.index);
                distances.push(nb.distance);
            }
        }
        Ok(NeighborTable {
            k,
            indices,
            distances,
        })
    }
}

/// Flattened N×k neighbor lists.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    k: usize,
    indices: Vec<usize>,
    distances: Vec<f64>,
}

impl NeighborTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// The first `k` neighbors of every row, as a new table.
    pub fn truncated(&self, k: usize) -> Result<NeighborTable> {
        if k > self.k {
            return Err(Error::KTooLarge { k, n: self.k });
        }
        let n = self.len();
        let mut indices = Vec::with_capacity(n * k);
        let mut distances = Vec::with_capacity(n * k);
        for i in 0..n {
            indices.extend_from_slice(&self.indices(i)[..k]);
            distances.extend_from_slice(&self.distances(i)[..k]);
        }
        Ok(NeighborTable {
            k,
            indices,
            distances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Point], q: &Point, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d =
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                (d, i)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(d, i)| (i, d)).collect()
    }

    #[test]
    fn single_point() {
        let idx = SpatialIndex::build(&[[1.0, 2.0, 3.0]]).unwrap();
        let nn = idx.knn(&[1.0, 2.0, 3.0], 1).unwrap();
        assert_eq!(
            nn,
            vec![Neighbor {
                index: 0,
                distance: 0.0
            }]
        );
        assert!(matches!(
            idx.knn(&[0.0; 3], 2),
            Err(Error::KTooLarge { k: 2, n: 1 })
        ));
    }

    #[test]
    fn empty_input() {
        assert!(matches!(SpatialIndex::build(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn axis_example() {
        let pts: Vec<Point> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        let idx = SpatialIndex::build(&pts).unwrap();
        let nn = idx.knn(&[1.1, 0.0, 0.0], 2).unwrap();
        assert_eq!(nn[0].index, 1);
        assert_eq!(nn[1].index, 2);
        assert!((nn[0].distance - 0.1).abs() < 1e-12);
        assert!((nn[1].distance - 0.9).abs() < 1e-12);
    }

    #[test]
    fn equidistant_tie_prefers_smaller_index() {
        let pts = vec![[2.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let idx = SpatialIndex::build(&pts).unwrap();
        let nn = idx.knn(&[0.0; 3], 2).unwrap();
        assert_eq!(nn[0].index, 1);
        assert_eq!(nn[1].index, 2);
    }

    #[test]
    fn duplicates_are_both_found() {
        let mut pts: Vec<Point> = (0..20).map(|i| [i as f64, 1.0, 0.0]).collect();
        pts.push([5.0, 1.0, 0.0]);
        let idx = SpatialIndex::build(&pts).unwrap();
        let nn = idx.knn(&[5.0, 1.0, 0.0], 2).unwrap();
        assert_eq!((nn[0].index, nn[1].index), (5, 20));
        assert_eq!(nn[1].distance, 0.0);
    }

    #[test]
    fn all_coincident_points() {
        let pts = vec![[1.0, 1.0, 1.0]; 50];
        let idx = SpatialIndex::build(&pts).unwrap();
        let nn = idx.knn(&[0.0; 3], 5).unwrap();
        let ids: Vec<_> = nn.iter().map(|n| n.index).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn matches_brute_force_on_random_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..1000)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let idx = SpatialIndex::build(&pts).unwrap();
        for _ in 0..50 {
            let q = [rng.gen(), rng.gen(), rng.gen()];
            let k = rng.gen_range(1..30);
            let got: Vec<_> = idx
                .knn(&q, k)
                .unwrap()
                .into_iter()
                .map(|n| (n.index, n.distance))
                .collect();
            let want = brute(&pts, &q, k);
            assert_eq!(
                got.iter().map(|g| g.0).collect::<Vec<_>>(),
                want.iter().map(|w| w.0).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn neighbor_table_rows_start_with_self() {
        let pts: Vec<Point> = (0..30).map(|i| [i as f64 * 0.5, 0.0, 0.0]).collect();
        let idx = SpatialIndex::build(&pts).unwrap();
        let t = idx.neighbor_table(4, ExecMode::Sequential).unwrap();
        for i in 0..30 {
            assert_eq!(t.indices(i)[0], i);
            assert!(t.distances(i).windows(2).all(|w| w[0] <= w[1]));
        }
        let t2 = t.truncated(2).unwrap();
        assert_eq!(t2.indices(3), &t.indices(3)[..2]);
    }
}
