//! Nearest-neighbour index over 3-D points.

use nalgebra::Point3;
use rstar::primitives::GeomWithData;
use rstar::RTree;

type Entry = GeomWithData<[f64; 3], u32>;

pub struct NeighborIndex {
    tree: RTree<Entry>,
}

impl NeighborIndex {
    pub fn new(points: &[Point3<f64>]) -> Self {
        let entries: Vec<Entry> = points
            .iter()
            .enumerate()
            .map(|(i, p)| GeomWithData::new([p.x, p.y, p.z], i as u32))
            .collect();
        Self {
            tree: RTree::bulk_load(entries),
        }
    }

    pub fn len(&self) -> usize {
        self.tree.size()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.size() == 0
    }

    /// Index and squared distance of the closest point.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        let q = [q.x, q.y, q.z];
        self.tree
            .nearest_neighbor_iter_with_distance_2(&q)
            .next()
            .map(|(e, d2)| (e.data as usize, d2))
    }

    /// The `k` closest points as (index, squared distance), nearest first.
    pub fn k_nearest(&self, q: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        let q = [q.x, q.y, q.z];
        self.tree
            .nearest_neighbor_iter_with_distance_2(&q)
            .take(k)
            .map(|(e, d2)| (e.data as usize, d2))
            .collect()
    }
}
