//! Normalized graph Laplacian and spectral cluster diagnostics over a mutual
//! k-nearest-neighbour graph of embeddings. Diagnostics never feed the gate.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::matrix::{euclidean, Matrix};

/// Eigenvalues below this count as near-zero (one per well-separated cluster).
pub const CLUSTER_EIGEN_THRESHOLD: f64 = 0.1;

/// `L̂ = I − D^{-1/2} A D^{-1/2}` with isolated vertices left as zero rows.
pub fn normalized_laplacian(adjacency: &[Vec<bool>]) -> Result<Matrix> {
    let n = adjacency.len();
    for (i, row) in adjacency.iter().enumerate() {
        if row.len() != n {
            return Err(Error::invalid(format!("adjacency row {i} has {} entries, expected {n}", row.len())));
        }
        if row[i] {
            return Err(Error::invalid(format!("adjacency has a self-loop at vertex {i}")));
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if adjacency[i][j] != adjacency[j][i] {
                return Err(Error::invalid(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    let degree: Vec<f64> = adjacency.iter().map(|r| r.iter().filter(|&&e| e).count() as f64).collect();
    let mut l = Matrix::zeros(n, n);
    for u in 0..n {
        if degree[u] > 0.0 {
            l.set(u, u, 1.0);
        }
        for v in 0..n {
            if adjacency[u][v] {
                l.set(u, v, -1.0 / (degree[u] * degree[v]).sqrt());
            }
        }
    }
    Ok(l)
}

/// Ascending eigenvalues of a symmetric matrix.
pub(crate) fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut ev: Vec<f64> = SymmetricEigen::new(dm).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub k_neighbors: usize,
    pub n_edges: usize,
    /// Ascending eigenvalues of the normalized Laplacian.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues below [`CLUSTER_EIGEN_THRESHOLD`].
    pub near_zero: usize,
    /// `cut(S, S̄) / min(vol S, vol S̄)` for each family's vertex set; `None`
    /// when either side has no volume.
    pub conductance: Vec<Option<f64>>,
}

/// Mutual kNN adjacency: i ~ j iff each is among the other's k nearest.
/// Distance ties go to the lower index.
pub fn mutual_knn(points: &Matrix, k: usize) -> Result<Vec<Vec<bool>>> {
    let n = points.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} neighbours needs between 1 and {} for {n} points", n.saturating_sub(1))));
    }
    let mut near = vec![vec![false; n]; n];
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (euclidean(points.row(i), points.row(j)), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &others[..k] {
            near[i][j] = true;
        }
    }
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            adj[i][j] = near[i][j] && near[j][i];
        }
    }
    Ok(adj)
}

pub fn spectral_diagnostics(
    embeddings: &Matrix,
    labels: &[usize],
    n_classes: usize,
    k_neighbors: usize,
) -> Result<SpectralReport> {
    if labels.len() != embeddings.rows() {
        return Err(Error::DimensionMismatch {
            stage: "spectral labels",
            expected: embeddings.rows(),
            found: labels.len(),
        });
    }
    let adj = mutual_knn(embeddings, k_neighbors)?;
    let n = adj.len();
    let degree: Vec<usize> = adj.iter().map(|r| r.iter().filter(|&&e| e).count()).collect();
    let n_edges = degree.iter().sum::<usize>() / 2;
    if n_edges == 0 {
        return Err(Error::invalid("mutual kNN graph has no edges"));
    }
    let eigenvalues = symmetric_eigenvalues(&normalized_laplacian(&adj)?);
    let near_zero = eigenvalues.iter().filter(|&&e| e < CLUSTER_EIGEN_THRESHOLD).count();
    let total: usize = degree.iter().sum();
    let conductance = (0..n_classes)
        .map(|k| {
            let vol: usize = (0..n).filter(|&i| labels[i] == k).map(|i| degree[i]).sum();
            let cut = (0..n)
                .filter(|&i| labels[i] == k)
                .map(|i| (0..n).filter(|&j| adj[i][j] && labels[j] != k).count())
                .sum::<usize>();
            let denom = vol.min(total - vol);
            (denom > 0).then(|| cut as f64 / denom as f64)
        })
        .collect();
    Ok(SpectralReport {
        k_neighbors,
        n_edges,
        eigenvalues,
        near_zero,
        conductance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi rotations; independent of the library eigensolver.
    fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
        let n = m.rows();
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    fn graph(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
        let mut a = vec![vec![false; n]; n];
        for &(u, v) in edges {
            a[u][v] = true;
            a[v][u] = true;
        }
        a
    }

    #[test]
    fn single_edge() {
        let l = normalized_laplacian(&graph(2, &[(0, 1)])).unwrap();
        assert_eq!(l.as_slice(), &[1.0, -1.0, -1.0, 1.0]);
        let ev = symmetric_eigenvalues(&l);
        assert!(ev[0].abs() < 1e-12 && (ev[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_vertex_has_zero_row() {
        let l = normalized_laplacian(&graph(3, &[(0, 1)])).unwrap();
        assert_eq!(l.row(2), &[0.0, 0.0, 0.0]);
        let ev = symmetric_eigenvalues(&l);
        assert_eq!(ev.iter().filter(|e| e.abs() < 1e-12).count(), 2);
    }

    #[test]
    fn complete_graph_spectrum() {
        let n = 5;
        let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
        let ev = symmetric_eigenvalues(&normalized_laplacian(&graph(n, &edges)).unwrap());
        assert!(ev[0].abs() < 1e-12);
        for e in &ev[1..] {
            assert!((e - n as f64 / (n as f64 - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn malformed_adjacency_is_rejected() {
        let mut a = graph(3, &[(0, 1)]);
        a[1][2] = true;
        assert!(normalized_laplacian(&a).is_err());
        let mut a = graph(2, &[]);
        a[0][0] = true;
        assert!(normalized_laplacian(&a).is_err());
        assert!(normalized_laplacian(&[vec![false, false]]).is_err());
    }

    #[test]
    fn library_spectrum_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = rng.random_range(2..12);
            let mut a = vec![vec![false; n]; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let e = rng.random_bool(0.4);
                    a[i][j] = e;
                    a[j][i] = e;
                }
            }
            let l = normalized_laplacian(&a).unwrap();
            let lib = symmetric_eigenvalues(&l);
            let oracle = jacobi_eigenvalues(&l);
            for (x, y) in lib.iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-9, "{lib:?} vs {oracle:?}");
                assert!(*x > -1e-9 && *x < 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn separated_blobs_give_one_near_zero_per_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for k in 0..3 {
            for _ in 0..20 {
                rows.push(vec![k as f64 * 100.0 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                labels.push(k);
            }
        }
        let m = Matrix::from_rows(&rows, 2).unwrap();
        let r = spectral_diagnostics(&m, &labels, 3, 5).unwrap();
        assert!(r.near_zero >= 3);
        assert_eq!(r.eigenvalues.len(), 60);
        for c in &r.conductance {
            assert_eq!(*c, Some(0.0));
        }
    }

    #[test]
    fn mutual_knn_is_symmetric_and_k_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let adj = mutual_knn(&Matrix::from_rows(&rows, 2).unwrap(), 4).unwrap();
        for i in 0..30 {
            assert!(adj[i].iter().filter(|&&e| e).count() <= 4);
            for j in 0..30 {
                assert_eq!(adj[i][j], adj[j][i]);
            }
        }
        assert!(mutual_knn(&Matrix::from_rows(&rows, 2).unwrap(), 30).is_err());
    }
}
