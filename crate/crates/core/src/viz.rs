//! Two-dimensional principal-component projection of sentence embeddings.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::QuerySet;
use crate::embedding::SentenceEmbedding;
use crate::error::{Error, Result};
use crate::eval::csv_error;

/// Eigenvalues below this (relative to the largest) count as zero variance.
const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizRow {
    pub query_id: String,
    pub x: f64,
    pub y: f64,
    /// `ln(1 + entity_freq)`, absent when the query has no frequency.
    pub log_freq: Option<f64>,
    pub relation: Option<String>,
}

/// Top-2 principal axes of the rows of `x` (already centered), each flipped
/// so its first nonzero loading is positive. Axes with no variance are zero.
pub fn principal_axes(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let (n, d) = x.shape();
    let mut pairs: Vec<(f64, Vec<f64>)> = if d <= n {
        let cov = x.transpose() * x / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        (0..d)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .collect()
    } else {
        // With fewer points than dimensions, diagonalize the n x n Gram
        // matrix and map its eigenvectors back into feature space.
        let gram = x * x.transpose() / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(gram);
        (0..n)
            .map(|i| {
                let v = x.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                let v = if norm > 0.0 { v / norm } else { v };
                (eig.eigenvalues[i], v.iter().copied().collect())
            })
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = pairs.first().map_or(0.0, |p| p.0.max(0.0));
    (0..2)
        .map(|k| match pairs.get(k) {
            Some((value, v)) if *value > ZERO_VARIANCE * top.max(1.0) => {
                let mut v = v.clone();
                let first = v.iter().copied().find(|c| c.abs() > 1e-12).unwrap_or(1.0);
                if first < 0.0 {
                    v.iter_mut().for_each(|c| *c = -*c);
                }
                v
            }
            _ => vec![0.0; d],
        })
        .collect()
}

/// Centers the embeddings and projects them onto the top two principal
/// components. Embeddings join queries on id.
pub fn emit_viz(embeddings: &[SentenceEmbedding], queries: &QuerySet) -> Result<Vec<VizRow>> {
    if embeddings.len() < 2 {
        return Err(Error::Validation(format!(
            "projection needs at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    let d = embeddings[0].dim();
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != d) {
        return Err(Error::Validation(format!(
            "embedding {} has dimension {}, expected {d}",
            bad.query_id,
            bad.dim()
        )));
    }
    let records = embeddings
        .iter()
        .map(|e| {
            queries
                .get(&e.query_id)
                .ok_or_else(|| Error::Validation(format!("no query with id {}", e.query_id)))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = embeddings.len();
    let mut x = DMatrix::from_fn(n, d, |i, j| f64::from(embeddings[i].values[j]));
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let axes = principal_axes(&x);
    if axes.iter().all(|a| a.iter().all(|&c| c == 0.0)) {
        tracing::warn!("embeddings have zero variance; projecting every point to the origin");
    }
    let project = |i: usize, axis: &[f64]| -> f64 { x.row(i).iter().zip(axis).map(|(a, b)| a * b).sum() };

    Ok(records
        .iter()
        .enumerate()
        .map(|(i, q)| VizRow {
            query_id: q.id.clone(),
            x: project(i, &axes[0]),
            y: project(i, &axes[1]),
            log_freq: q.entity_freq.map(f64::ln_1p),
            relation: q.relation.clone(),
        })
        .collect())
}

/// Header `query_id,x,y,log_freq,relation`; missing values are empty fields.
pub fn write_viz_csv(rows: &[VizRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["query_id", "x", "y", "log_freq", "relation"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.query_id.clone(),
            r.x.to_string(),
            r.y.to_string(),
            r.log_freq.map(|v| v.to_string()).unwrap_or_default(),
            r.relation.clone().unwrap_or_default(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::QueryRecord;
    use proptest::prelude::*;

    fn setup(points: &[Vec<f32>]) -> (Vec<SentenceEmbedding>, QuerySet) {
        let embs = points
            .iter()
            .enumerate()
            .map(|(i, p)| SentenceEmbedding {
                query_id: format!("q{i}"),
                layer: 1,
                values: p.clone(),
            })
            .collect();
        let recs = (0..points.len())
            .map(|i| {
                let mut r = QueryRecord::new(format!("q{i}"), "Q?", vec!["a".into()]);
                if i % 2 == 0 {
                    r.entity_freq = Some(i as f64);
                    r.relation = Some("capital".into());
                }
                r
            })
            .collect();
        (embs, QuerySet::new("v", recs).unwrap())
    }

    fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }

    proptest! {
        #[test]
        fn planar_data_is_rotated(points in prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 3..12)) {
            let pts: Vec<Vec<f32>> = points.iter().map(|&(a, b)| vec![a, b]).collect();
            let (embs, qs) = setup(&pts);
            let rows = emit_viz(&embs, &qs).unwrap();
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    let orig = dist((pts[i][0] as f64, pts[i][1] as f64), (pts[j][0] as f64, pts[j][1] as f64));
                    let proj = dist((rows[i].x, rows[i].y), (rows[j].x, rows[j].y));
                    prop_assert!((orig - proj).abs() < 1e-6, "{orig} vs {proj}");
                }
            }
        }
    }

    #[test]
    fn too_few_rows() {
        let (embs, qs) = setup(&[vec![1.0, 2.0]]);
        assert!(emit_viz(&embs, &qs).is_err());
    }

    #[test]
    fn identical_points_collapse_to_origin() {
        let (embs, qs) = setup(&vec![vec![1.0, 2.0, 3.0]; 4]);
        for r in emit_viz(&embs, &qs).unwrap() {
            assert_eq!((r.x, r.y), (0.0, 0.0));
        }
    }

    #[test]
    fn gram_and_covariance_paths_agree() {
        // 3 points in 5 dimensions takes the Gram path; padding to 6 points
        // with mirrored copies keeps the axes but takes the covariance path.
        let pts = vec![
            vec![1.0, 0.5, -2.0, 0.0, 3.0],
            vec![-1.0, 2.0, 0.5, 1.0, 0.0],
            vec![0.5, -1.0, 1.0, -2.0, 1.0],
        ];
        let (embs, qs) = setup(&pts);
        let small = emit_viz(&embs, &qs).unwrap();
        let mut doubled = pts.clone();
        doubled.extend(pts.iter().cloned());
        let (embs, qs) = setup(&doubled);
        let big = emit_viz(&embs, &qs).unwrap();
        for i in 0..3 {
            assert!((small[i].x - big[i].x).abs() < 1e-9);
            assert!((small[i].y - big[i].y).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_layout() {
        let (embs, qs) = setup(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        let rows = emit_viz(&embs, &qs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("viz.csv");
        write_viz_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "query_id,x,y,log_freq,relation\nq0,-1,0,0,capital\nq1,1,0,,\n");
    }
}
