//! Uniform-grid radius search over 3D points.
//!
//! Cell size equals the query radius, so a radius query only visits the
//! 27 surrounding cells. Results are sorted by index, which keeps every
//! consumer deterministic.

use std::collections::HashMap;

pub struct UniformGrid<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

fn cell_of(p: &[f64; 3], cell: f64) -> [i64; 3] {
    [
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    ]
}

pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl<'a> UniformGrid<'a> {
    /// Builds a grid with cell size `radius` (must be > 0).
    pub fn build(points: &'a [[f64; 3]], radius: f64) -> Self {
        assert!(radius > 0.0);
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(cell_of(p, radius)).or_default().push(i);
        }
        UniformGrid {
            points,
            cell: radius,
            buckets,
        }
    }

    /// Indices of all points with ||p - q|| <= radius, ascending.
    pub fn within(&self, q: &[f64; 3], radius: f64) -> Vec<usize> {
        debug_assert!(radius <= self.cell + 1e-12);
        let r2 = radius * radius;
        let c = cell_of(q, self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if let Some(bucket) = self.buckets.get(&key) {
                        for &i in bucket {
                            if dist2(&self.points[i], q) <= r2 {
                                out.push(i);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn brute(points: &[[f64; 3]], q: &[f64; 3], r: f64) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| dist2(&points[i], q) <= r * r)
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = seeded_rng(11);
        for case in 0..50 {
            let n = 1 + case * 7 % 90;
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.draw_uniform() * 10.0 - 5.0,
                        rng.draw_uniform() * 10.0 - 5.0,
                        rng.draw_uniform() * 4.0 - 2.0,
                    ]
                })
                .collect();
            let r = 0.3 + rng.draw_uniform();
            let grid = UniformGrid::build(&pts, r);
            for qi in 0..n.min(10) {
                assert_eq!(grid.within(&pts[qi], r), brute(&pts, &pts[qi], r));
            }
        }
    }

    #[test]
    fn boundary_is_inclusive() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let grid = UniformGrid::build(&pts, 1.0);
        assert_eq!(grid.within(&pts[0], 1.0), vec![0, 1]);
    }
}
