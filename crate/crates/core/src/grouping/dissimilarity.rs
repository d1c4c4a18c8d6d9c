use serde::{Deserialize, Serialize};

use super::fim::TaskEmbedding;
use crate::error::{reject, Result};

/// Dense symmetric `n × n` matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityMatrix {
    pub n: usize,
    pub w: Vec<f64>,
}

impl DissimilarityMatrix {
    pub fn new(n: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != n * n {
            return reject(format!("{} entries for a {n}×{n} matrix", w.len()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return reject("matrix has non-finite entries");
        }
        for i in 0..n {
            for j in 0..i {
                if (w[i * n + j] - w[j * n + i]).abs() > 1e-12 {
                    return reject(format!("matrix is not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(DissimilarityMatrix { n, w })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    /// `J − W` off the diagonal, zero on it: groups similar tasks instead.
    pub fn complement(&self) -> DissimilarityMatrix {
        let n = self.n;
        let w = (0..n * n)
            .map(|k| if k / n == k % n { 0.0 } else { 1.0 - self.w[k] })
            .collect();
        DissimilarityMatrix { n, w }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{:.12}", self.get(i, j))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut w = Vec::new();
        let mut rows = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            for cell in line.split(',') {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| crate::error::Error::RejectedInput(format!("bad matrix entry {cell:?}")))?;
                w.push(v);
            }
            rows += 1;
        }
        Self::new(rows, w)
    }
}

/// Cosine dissimilarity of pairwise-normalized embeddings.
///
/// Coordinates where both entries vanish carry no information and are
/// skipped, so the result is exactly invariant to a common rescaling.
pub fn pair_dissimilarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let s = x + y;
        if s == 0.0 {
            continue;
        }
        let (u, v) = (x / s, y / s);
        dot += u * v;
        na += u * u;
        nb += v * v;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 1.0)
}

pub fn dissimilarity_matrix(embeddings: &[TaskEmbedding]) -> Result<DissimilarityMatrix> {
    let n = embeddings.len();
    let Some(first) = embeddings.first() else {
        return reject("no embeddings");
    };
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != first.len() {
            return reject(format!("embedding {i} has length {}, expected {}", e.len(), first.len()));
        }
        if e.as_slice().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return reject(format!("embedding {i} has negative or non-finite entries"));
        }
        if e.as_slice().iter().all(|&v| v == 0.0) {
            return reject(format!("embedding {i} is identically zero"));
        }
    }
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = pair_dissimilarity(embeddings[i].as_slice(), embeddings[j].as_slice());
            w[i * n + j] = d;
            w[j * n + i] = d;
        }
    }
    Ok(DissimilarityMatrix { n, w })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> TaskEmbedding {
        TaskEmbedding(v.to_vec())
    }

    #[test]
    fn identical_and_disjoint_pairs() {
        let w = dissimilarity_matrix(&[e(&[1.0, 2.0]), e(&[1.0, 2.0]), e(&[1.0, 0.0]), e(&[0.0, 1.0])]).unwrap();
        assert_eq!(w.get(0, 0), 0.0);
        assert!(w.get(0, 1).abs() < 1e-15);
        assert!((w.get(2, 3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_embedding_is_named() {
        let err = dissimilarity_matrix(&[e(&[1.0]), e(&[0.0])]).unwrap_err();
        assert!(err.to_string().contains("embedding 1"));
    }

    #[test]
    fn csv_roundtrip_and_complement() {
        let w = dissimilarity_matrix(&[e(&[1.0, 0.5]), e(&[0.2, 3.0]), e(&[1.0, 1.0])]).unwrap();
        let back = DissimilarityMatrix::from_csv(&w.to_csv()).unwrap();
        for (a, b) in w.w.iter().zip(&back.w) {
            assert!((a - b).abs() < 1e-11);
        }
        let s = w.complement();
        assert_eq!(s.get(1, 1), 0.0);
        assert!((s.get(0, 1) + w.get(0, 1) - 1.0).abs() < 1e-15);
    }
}
