//! Turns center votes into spatio-temporal object proposals: K sampled
//! vote positions, each grouped with every point whose vote lands within
//! radius r. A point may belong to several proposals; overlap is resolved
//! later by aggregation.

use rayon::prelude::*;

use crate::grid::{dist2, UniformGrid};
use crate::rng::SeededRng;

/// One vote: the voting point's index into the volume and where its vote
/// landed.
#[derive(Debug, Clone, Copy)]
pub struct Vote {
    pub point: usize,
    pub position: [f64; 3],
}

/// A sampled center plus the volume indices of every point voting within
/// the grouping radius.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub center: [f64; 3],
    /// Ascending volume point indices; always contains the seeding vote.
    pub members: Vec<usize>,
}

/// y_i = x_i + dx_i for foreground points only.
pub fn apply_votes(
    positions: &[[f64; 3]],
    offsets: &[[f64; 3]],
    foreground: &[bool],
) -> Vec<Vote> {
    assert_eq!(positions.len(), offsets.len());
    assert_eq!(positions.len(), foreground.len());
    positions
        .iter()
        .zip(offsets)
        .enumerate()
        .filter(|(i, _)| foreground[*i])
        .map(|(i, (p, d))| Vote {
            point: i,
            position: [p[0] + d[0], p[1] + d[1], p[2] + d[2]],
        })
        .collect()
}

/// Farthest point sampling: greedy max-min selection starting at index 0,
/// ties broken by lowest index. Returns all indices (in greedy order) when
/// k >= n.
pub fn fps(votes: &[Vote], k: usize) -> Vec<usize> {
    let n = votes.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.min(n);
    let mut picked = Vec::with_capacity(k);
    let mut selected = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut cur = 0usize;
    picked.push(cur);
    selected[cur] = true;
    for _ in 1..k {
        let cur_pos = votes[cur].position;
        for i in 0..n {
            let d2 = dist2(&votes[i].position, &cur_pos);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
        // Strict > keeps the lowest index on ties.
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..n {
            if !selected[i] && min_d2[i] > best.0 {
                best = (min_d2[i], i);
            }
        }
        cur = best.1;
        picked.push(cur);
        selected[cur] = true;
    }
    picked
}

/// Uniform sampling without replacement; deterministic per seed. Returns
/// ascending indices (a permutation-free subset).
pub fn random_sample(votes: &[Vote], k: usize, rng: &mut SeededRng) -> Vec<usize> {
    let n = votes.len();
    if k >= n {
        return (0..n).collect();
    }
    // Partial Fisher-Yates over an index array.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.draw_index(n - i);
        idx.swap(i, j);
    }
    let mut picked = idx[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Groups votes around the sampled centers: point i joins proposal j when
/// ||vote_i - y_j|| <= r. Grid-accelerated; the brute-force equivalent is
/// kept in tests as the oracle.
pub fn group(votes: &[Vote], center_indices: &[usize], radius: f64) -> Vec<Proposal> {
    assert!(radius > 0.0);
    let positions: Vec<[f64; 3]> = votes.iter().map(|v| v.position).collect();
    let grid = UniformGrid::build(&positions, radius);
    center_indices
        .par_iter()
        .map(|&ci| {
            let center = votes[ci].position;
            let members: Vec<usize> = grid
                .within(&center, radius)
                .into_iter()
                .map(|vi| votes[vi].point)
                .collect();
            Proposal { center, members }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn votes_at(points: &[[f64; 3]]) -> Vec<Vote> {
        points
            .iter()
            .enumerate()
            .map(|(i, &position)| Vote { point: i, position })
            .collect()
    }

    #[test]
    fn apply_votes_examples() {
        let got = apply_votes(
            &[[1.0, 2.0, 3.0]],
            &[[0.1, -0.2, 0.0]],
            &[true],
        );
        assert_eq!(got.len(), 1);
        let p = got[0].position;
        assert!((p[0] - 1.1).abs() < 1e-12 && (p[1] - 1.8).abs() < 1e-12 && p[2] == 3.0);

        // Zero offsets: votes equal positions.
        let got = apply_votes(&[[2.0, 0.0, 1.0]], &[[0.0; 3]], &[true]);
        assert_eq!(got[0].position, [2.0, 0.0, 1.0]);

        // Background points produce no votes.
        let got = apply_votes(
            &[[0.0; 3], [1.0, 0.0, 0.0]],
            &[[0.0; 3], [0.0; 3]],
            &[false, true],
        );
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].point, 1);
    }

    #[test]
    fn fps_picks_the_far_corner() {
        let votes = votes_at(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [10.0, 10.0, 0.0],
        ]);
        assert_eq!(fps(&votes, 2), vec![0, 3]);
    }

    #[test]
    fn fps_with_k_at_least_n_returns_greedy_order() {
        let votes = votes_at(&[[0.0; 3], [4.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let order = fps(&votes, 10);
        assert_eq!(order, vec![0, 1, 2]);
    }

    /// Brute-force greedy oracle: each pick maximizes min distance to the
    /// already-picked set, lowest index on ties.
    fn fps_oracle(votes: &[Vote], k: usize) -> Vec<usize> {
        let n = votes.len();
        let k = k.min(n);
        let mut picked = vec![0usize];
        while picked.len() < k {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for i in 0..n {
                if picked.contains(&i) {
                    continue;
                }
                let d = picked
                    .iter()
                    .map(|&p| dist2(&votes[i].position, &votes[p].position))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            picked.push(best.1);
        }
        picked
    }

    #[test]
    fn fps_satisfies_the_greedy_property() {
        let mut rng = seeded_rng(33);
        for case in 0..40 {
            let n = 2 + case % 30;
            let votes = votes_at(
                &(0..n)
                    .map(|_| {
                        [
                            rng.draw_uniform() * 10.0,
                            rng.draw_uniform() * 10.0,
                            rng.draw_uniform(),
                        ]
                    })
                    .collect::<Vec<_>>(),
            );
            let k = 1 + rng.draw_index(n);
            assert_eq!(fps(&votes, k), fps_oracle(&votes, k), "n={n} k={k}");
        }
    }

    #[test]
    fn fps_positions_survive_duplication() {
        let base = [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 7.0, 0.0]];
        let votes = votes_at(&base);
        let mut dup = base.to_vec();
        dup.insert(1, base[0]); // duplicate the seed point
        let votes_dup = votes_at(&dup);
        let sel: Vec<[f64; 3]> = fps(&votes, 3)
            .iter()
            .map(|&i| votes[i].position)
            .collect();
        let sel_dup: Vec<[f64; 3]> = fps(&votes_dup, 3)
            .iter()
            .map(|&i| votes_dup[i].position)
            .collect();
        assert_eq!(sel, sel_dup);
    }

    #[test]
    fn random_sample_contracts() {
        let votes = votes_at(&[[0.0; 3], [1.0; 3], [2.0; 3], [3.0; 3]]);
        assert_eq!(random_sample(&votes, 4, &mut seeded_rng(1)), vec![0, 1, 2, 3]);
        let a = random_sample(&votes, 2, &mut seeded_rng(5));
        let b = random_sample(&votes, 2, &mut seeded_rng(5));
        assert_eq!(a, b);
    }

    #[test]
    fn random_sample_is_empirically_uniform() {
        let votes = votes_at(
            &(0..10)
                .map(|i| [i as f64, 0.0, 0.0])
                .collect::<Vec<_>>(),
        );
        let mut counts = [0usize; 10];
        let trials = 5000;
        for t in 0..trials {
            let mut rng = crate::rng::SeededRng::substream(71, t as u64);
            for i in random_sample(&votes, 3, &mut rng) {
                counts[i] += 1;
            }
        }
        let expected = (trials * 3) as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 30.0, "chi2 = {chi2}"); // df=9, 0.001 quantile ~27.9
    }

    #[test]
    fn group_radius_predicate() {
        let votes = votes_at(&[[0.0; 3], [0.5, 0.0, 0.0], [0.7, 0.0, 0.0]]);
        let props = group(&votes, &[0], 0.6);
        assert_eq!(props[0].members, vec![0, 1]); // 0.7 is outside

        // A vote between two nearby centers joins both proposals.
        let votes = votes_at(&[[0.0; 3], [0.4, 0.0, 0.0], [0.2, 0.0, 0.0]]);
        let props = group(&votes, &[0, 1], 0.6);
        assert!(props[0].members.contains(&2));
        assert!(props[1].members.contains(&2));
    }

    #[test]
    fn group_matches_brute_force() {
        let mut rng = seeded_rng(44);
        for _ in 0..20 {
            let n = 5 + rng.draw_index(80);
            let votes = votes_at(
                &(0..n)
                    .map(|_| {
                        [
                            rng.draw_uniform() * 6.0,
                            rng.draw_uniform() * 6.0,
                            rng.draw_uniform() * 2.0,
                        ]
                    })
                    .collect::<Vec<_>>(),
            );
            let r = 0.4 + rng.draw_uniform();
            let k = 1 + rng.draw_index(n.min(8));
            let centers: Vec<usize> = (0..k).collect();
            let fast = group(&votes, &centers, r);
            for (p, &ci) in fast.iter().zip(&centers) {
                let brute: Vec<usize> = votes
                    .iter()
                    .filter(|v| dist2(&v.position, &votes[ci].position) <= r * r)
                    .map(|v| v.point)
                    .collect();
                assert_eq!(p.members, brute);
                // Every member satisfies the radius predicate.
                for &m in &p.members {
                    assert!(dist2(&votes[m].position, &p.center).sqrt() <= r + 1e-12);
                }
                // The seeding vote is always a member.
                assert!(p.members.contains(&votes[ci].point));
            }
        }
    }
}
