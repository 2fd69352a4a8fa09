use std::fmt::Write as _;

/// One agglomeration step. Leaves are `0..n`; the cluster formed at step
/// `k` gets id `n + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

/// Average-linkage agglomerative clustering on `1 - correlation`.
///
/// The closest pair of live clusters is merged first; ties go to the pair
/// with the smallest slot indices. Non-finite correlations count as 0.
pub fn hierarchical_cluster(correlation: &[Vec<f64>]) -> Dendrogram {
    let n = correlation.len();
    let mut dist: Vec<Vec<f64>> = correlation
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| if c.is_finite() { 1.0 - c } else { 1.0 })
                .collect()
        })
        .collect();
    let mut live: Vec<bool> = vec![true; n];
    let mut size: Vec<usize> = vec![1; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !live[i] {
                continue;
            }
            for j in i + 1..n {
                if live[j] && best.is_none_or(|(_, _, d)| dist[i][j] < d) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let (i, j, h) = best.expect("two live clusters");
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if live[k] && k != i && k != j {
                let d = (ni * dist[i][k] + nj * dist[j][k]) / (ni + nj);
                dist[i][k] = d;
                dist[k][i] = d;
            }
        }
        live[j] = false;
        size[i] += size[j];
        merges.push(Merge {
            a: id[i].min(id[j]),
            b: id[i].max(id[j]),
            height: h,
            size: size[i],
        });
        id[i] = n + step;
    }
    Dendrogram { n, merges }
}

/// Groups joined by merges at height `<= cut`, each sorted, ordered by
/// smallest member.
pub fn flat_clusters(tree: &Dendrogram, cut: f64) -> Vec<Vec<usize>> {
    let n = tree.n;
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    for m in &tree.merges {
        if m.height <= cut {
            let mut a = members[m.a].take().expect("merged once");
            a.extend(members[m.b].take().expect("merged once"));
            members.push(Some(a));
        } else {
            // Keep ids aligned; an uncut merge leaves both children standing.
            members.push(None);
        }
    }
    let mut out: Vec<Vec<usize>> = members.into_iter().flatten().collect();
    for c in &mut out {
        c.sort_unstable();
    }
    out.sort_by_key(|c| c[0]);
    out
}

impl Dendrogram {
    pub fn to_csv(&self, names: &[String]) -> String {
        let label = |i: usize| {
            if i < self.n {
                crate::attribution::csv_field(&names[i])
            } else {
                format!("cluster{}", i - self.n)
            }
        };
        let mut s = String::from("step,a,b,height,size\n");
        for (k, m) in self.merges.iter().enumerate() {
            writeln!(s, "{k},{},{},{:.6},{}", label(m.a), label(m.b), m.height, m.size).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn identity_stays_apart_until_height_one() {
        let t = hierarchical_cluster(&identity(5));
        assert!(t.merges.iter().all(|m| m.height == 1.0));
        assert_eq!(flat_clusters(&t, 0.5), (0..5).map(|i| vec![i]).collect::<Vec<_>>());
        assert_eq!(flat_clusters(&t, 0.999), (0..5).map(|i| vec![i]).collect::<Vec<_>>());
        assert_eq!(flat_clusters(&t, 1.0), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn blocks_are_recovered() {
        let block = [0, 1, 0, 2, 1, 2, 0];
        let c: Vec<Vec<f64>> = block
            .iter()
            .map(|a| block.iter().map(|b| if a == b { 1.0 } else { 0.0 }).collect())
            .collect();
        let t = hierarchical_cluster(&c);
        assert_eq!(flat_clusters(&t, 0.5), vec![vec![0, 2, 6], vec![1, 4], vec![3, 5]]);
    }

    #[test]
    fn ties_break_by_index() {
        let t = hierarchical_cluster(&identity(3));
        assert_eq!((t.merges[0].a, t.merges[0].b), (0, 1));
        assert_eq!((t.merges[1].a, t.merges[1].b), (2, 3));
    }

    /// Average linkage straight from the definition: mean pairwise distance
    /// between member sets, recomputed from scratch every step.
    fn naive(c: &[Vec<f64>]) -> Vec<(Vec<usize>, Vec<usize>, f64)> {
        let mut clusters: Vec<Vec<usize>> = (0..c.len()).map(|i| vec![i]).collect();
        let mut out = Vec::new();
        while clusters.len() > 1 {
            let mut best = (0, 1, f64::INFINITY);
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let mut sum = 0.0;
                    for &a in &clusters[i] {
                        for &b in &clusters[j] {
                            sum += 1.0 - c[a][b];
                        }
                    }
                    let d = sum / (clusters[i].len() * clusters[j].len()) as f64;
                    if d < best.2 - 1e-12 {
                        best = (i, j, d);
                    }
                }
            }
            let b = clusters.remove(best.1);
            let a = clusters[best.0].clone();
            out.push((a.clone(), b.clone(), best.2));
            clusters[best.0].extend(b);
        }
        out
    }

    fn random_correlation(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let mut c = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let d: f64 = pts[i].iter().zip(&pts[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                c[i][j] = 1.0 - d;
            }
        }
        c
    }

    fn leaves(t: &Dendrogram, id: usize) -> Vec<usize> {
        if id < t.n {
            return vec![id];
        }
        let m = &t.merges[id - t.n];
        let mut v = leaves(t, m.a);
        v.extend(leaves(t, m.b));
        v.sort_unstable();
        v
    }

    #[test]
    fn matches_naive_agglomeration() {
        for seed in 0..20 {
            let c = random_correlation(6, seed);
            let t = hierarchical_cluster(&c);
            let reference = naive(&c);
            for (m, (a, b, h)) in t.merges.iter().zip(&reference) {
                let mut want = [a.clone(), b.clone()];
                for w in &mut want {
                    w.sort_unstable();
                }
                want.sort();
                let mut got = [leaves(&t, m.a), leaves(&t, m.b)];
                got.sort();
                assert_eq!(got, want, "seed {seed}");
                assert!((m.height - h).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn heights_never_decrease(seed in 0u64..500, n in 2usize..12) {
            let t = hierarchical_cluster(&random_correlation(n, seed));
            prop_assert_eq!(t.merges.len(), n - 1);
            prop_assert_eq!(t.merges.last().unwrap().size, n);
            for w in t.merges.windows(2) {
                prop_assert!(w[1].height >= w[0].height - 1e-12);
            }
            let all: usize = flat_clusters(&t, 0.3).iter().map(Vec::len).sum();
            prop_assert_eq!(all, n);
        }
    }
}
