use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dissimilarity::DissimilarityMatrix;
use crate::error::{reject, Result};
use crate::seed;

pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 100;
/// Largest pool the exhaustive search accepts.
pub const ORACLE_MAX_N: usize = 12;

/// Group index per pool position, labelled in order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub c: usize,
    pub group_of: Vec<usize>,
}

impl GroupAssignment {
    /// Relabel groups so that they appear as 0, 1, 2, … along the pool.
    pub fn canonical(c: usize, raw: &[usize]) -> Self {
        let mut map = BTreeMap::new();
        let group_of = raw
            .iter()
            .map(|g| {
                let next = map.len();
                *map.entry(*g).or_insert(next)
            })
            .collect();
        GroupAssignment { c, group_of }
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.group_of.len()).filter(|&i| self.group_of[i] == group).collect()
    }

    /// Non-empty groups, in label order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        (0..self.c).map(|g| self.members(g)).filter(|m| !m.is_empty()).collect()
    }

    /// Sum of `W` over unordered same-group pairs.
    pub fn intra_objective(&self, w: &DissimilarityMatrix) -> f64 {
        let n = self.group_of.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                if self.group_of[i] == self.group_of[j] {
                    s += w.get(i, j);
                }
            }
        }
        s
    }

    pub fn to_map(&self, ids: &[String]) -> BTreeMap<String, usize> {
        ids.iter().cloned().zip(self.group_of.iter().copied()).collect()
    }
}

/// Degree diagonal, unnormalized Laplacian `D − W`, and the eigenvectors of
/// its `c` smallest eigenvalues as columns.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub degree: Vec<f64>,
    pub laplacian: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub embedding: DMatrix<f64>,
}

pub fn spectral_embedding(w: &DissimilarityMatrix, c: usize) -> Result<SpectralDecomposition> {
    let n = w.n;
    if c == 0 || c > n {
        return reject(format!("group count {c} must lie in [1, {n}]"));
    }
    let wm = DMatrix::from_row_slice(n, n, &w.w);
    let degree: Vec<f64> = (0..n).map(|i| wm.row(i).sum()).collect();
    let laplacian = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(degree.clone())) - &wm;
    let eig = SymmetricEigen::new(laplacian.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut embedding = DMatrix::zeros(n, c);
    for (col, &k) in order.iter().take(c).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        // sign convention: first non-negligible component positive
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-10) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        embedding.set_column(col, &v);
    }
    Ok(SpectralDecomposition {
        degree,
        laplacian,
        eigenvalues: order.iter().take(c).map(|&k| eig.eigenvalues[k]).collect(),
        embedding,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding; returns labels and inertia.
pub fn kmeans(rows: &[Vec<f64>], k: usize, rng: &mut seed::Rng) -> (Vec<usize>, f64) {
    let n = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    let mut centers: Vec<Vec<f64>> = vec![rows[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = rows
            .iter()
            .map(|r| centers.iter().map(|c| sq_dist(r, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows[pick].clone());
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(r, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        // refill empty clusters with the point farthest from its center
        for j in 0..k {
            if labels.iter().all(|&l| l != j) {
                let far = (0..n)
                    .filter(|&i| labels.iter().filter(|&&l| l == labels[i]).count() > 1)
                    .max_by(|&a, &b| {
                        sq_dist(&rows[a], &centers[labels[a]])
                            .total_cmp(&sq_dist(&rows[b], &centers[labels[b]]))
                            .then(b.cmp(&a))
                    });
                if let Some(i) = far {
                    labels[i] = j;
                    changed = true;
                }
            }
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = rows.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(r, _)| r).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                c[d] = members.iter().map(|r| r[d]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = rows.iter().zip(&labels).map(|(r, &l)| sq_dist(r, &centers[l])).sum();
    (labels, inertia)
}

/// Spectral clustering of `W` read as an affinity, so high-dissimilarity
/// pairs land in the same group.
pub fn spectral_group(w: &DissimilarityMatrix, c: usize, seed: u64) -> Result<GroupAssignment> {
    let dec = spectral_embedding(w, c)?;
    if c == 1 {
        return Ok(GroupAssignment::canonical(1, &vec![0; w.n]));
    }
    let rows: Vec<Vec<f64>> = (0..w.n).map(|i| dec.embedding.row(i).iter().copied().collect()).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..KMEANS_RESTARTS {
        let mut rng = seed::stream(seed, "grouping/kmeans", r as u64);
        let (labels, inertia) = kmeans(&rows, c, &mut rng);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((labels, inertia));
        }
    }
    let (labels, _) = best.expect("at least one restart");
    Ok(GroupAssignment::canonical(c, &labels))
}

/// Exhaustive search for the partition into exactly `c` non-empty groups
/// maximizing the intra-group sum of `W`.
///
/// Ties (within 1e-12) go to the most balanced partition, i.e. the
/// smallest sum of squared group sizes, then to enumeration order over
/// restricted growth strings.
pub fn oracle_group(w: &DissimilarityMatrix, c: usize) -> Result<GroupAssignment> {
    let n = w.n;
    if n > ORACLE_MAX_N {
        return reject(format!("exhaustive grouping supports at most {ORACLE_MAX_N} models, got {n}"));
    }
    if c == 0 || c > n {
        return reject(format!("group count {c} must lie in [1, {n}]"));
    }
    struct Search<'a> {
        w: &'a DissimilarityMatrix,
        c: usize,
        current: Vec<usize>,
        best: Option<(f64, usize, Vec<usize>)>,
    }
    impl Search<'_> {
        fn visit(&mut self, i: usize, used: usize, score: f64) {
            let n = self.w.n;
            if n - i < self.c - used {
                return;
            }
            if i == n {
                let mut sizes = vec![0usize; self.c];
                for &g in &self.current {
                    sizes[g] += 1;
                }
                let balance: usize = sizes.iter().map(|s| s * s).sum();
                let better = match &self.best {
                    None => true,
                    Some((bs, bb, _)) => score > bs + 1e-12 || ((score - bs).abs() <= 1e-12 && balance < *bb),
                };
                if better {
                    self.best = Some((score, balance, self.current.clone()));
                }
                return;
            }
            for g in 0..(used + 1).min(self.c) {
                let gain: f64 = (0..i).filter(|&j| self.current[j] == g).map(|j| self.w.get(i, j)).sum();
                self.current.push(g);
                self.visit(i + 1, used.max(g + 1), score + gain);
                self.current.pop();
            }
        }
    }
    let mut s = Search {
        w,
        c,
        current: Vec::with_capacity(n),
        best: None,
    };
    s.visit(0, 0, 0.0);
    let (_, _, labels) = s.best.expect("at least one partition exists for 1 <= c <= n");
    Ok(GroupAssignment::canonical(c, &labels))
}
