//! Independent oracles shared by the integration and acceptance suites.
//!
//! Every function here recomputes a quantity along a deliberately different
//! route from the implementation it checks (exhaustive scans, naive loops,
//! full sorts), and none of them call the code paths under test.

use picnet_core::linalg::Matrix;
use picnet_core::retrieval::DescriptorDatabase;
use picnet_core::scene::{GeoCoordinate, Timestamp};
use picnet_core::vlad::{AssignmentMatrix, AttentionMap, VladParams};

/// Exhaustive nearest-timestamp pairing over all (image, cloud) pairs.
pub fn pairing_oracle(images: &[Timestamp], clouds: &[Timestamp]) -> Vec<(usize, usize)> {
    clouds
        .iter()
        .enumerate()
        .map(|(k, tc)| {
            let mut best = 0usize;
            let mut best_diff = f64::INFINITY;
            for (i, ti) in images.iter().enumerate() {
                let diff = (ti.seconds() - tc.seconds()).abs();
                if diff < best_diff {
                    best = i;
                    best_diff = diff;
                }
            }
            (best, k)
        })
        .collect()
}

/// Naive soft assignment: per-row exp over sum without the max shift.
pub fn soft_assign_oracle(fmap_rows: &[Vec<f64>], params: &VladParams) -> Vec<Vec<f64>> {
    fmap_rows
        .iter()
        .map(|f| {
            let logits: Vec<f64> = (0..params.clusters())
                .map(|k| {
                    params
                        .assign_weights
                        .row(k)
                        .iter()
                        .zip(f)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
                        + params.assign_bias[k]
                })
                .collect();
            let exps: Vec<f64> = logits.iter().map(|z| z.exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        })
        .collect()
}

/// Triple-loop attention-weighted VLAD with explicit normalization steps.
pub fn att_vlad_oracle(
    fmap_rows: &[Vec<f64>],
    att: &[f64],
    assign: &[Vec<f64>],
    centers: &[Vec<f64>],
    intra_norm: bool,
) -> Vec<f64> {
    let k = centers.len();
    let d = centers[0].len();
    let mut blocks = vec![vec![0.0; d]; k];
    for (l, f) in fmap_rows.iter().enumerate() {
        for (kk, block) in blocks.iter_mut().enumerate() {
            for j in 0..d {
                block[j] += att[l] * assign[l][kk] * (f[j] - centers[kk][j]);
            }
        }
    }
    if intra_norm {
        for block in blocks.iter_mut() {
            let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in block.iter_mut() {
                *v /= norm;
            }
        }
    }
    let mut out: Vec<f64> = blocks.into_iter().flatten().collect();
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in out.iter_mut() {
        *v /= norm;
    }
    out
}

/// Exhaustive-loop lazy quadruplet loss.
pub fn quadruplet_loss_oracle(
    anchor: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    decoy: &[f64],
    alpha: f64,
    beta: f64,
) -> f64 {
    let d2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut delta = f64::INFINITY;
    for p in positives {
        delta = delta.min(d2(anchor, p));
    }
    let mut term1 = 0.0f64;
    for n in negatives {
        term1 = term1.max(alpha + delta - d2(anchor, n));
    }
    let mut term2 = 0.0f64;
    for n in negatives {
        term2 = term2.max(beta + delta - d2(decoy, n));
    }
    term1.max(0.0) + term2.max(0.0)
}

/// Full-sort retrieval: rank all rows by (euclidean distance, id), take k.
pub fn topk_oracle(query: &[f64], db: &DescriptorDatabase, k: usize) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = (0..db.len())
        .map(|row| {
            let dist = query
                .iter()
                .zip(db.descriptor(row))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (db.id(row), dist)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Independent per-query recall recount (full sort per query, inclusive
/// success radius).
pub fn recall_recount_oracle(
    queries: &[(Vec<f64>, GeoCoordinate)],
    db: &DescriptorDatabase,
    radius_m: f64,
    rank: usize,
) -> f64 {
    let mut hits = 0usize;
    for (desc, coord) in queries {
        let ranking = topk_oracle(desc, db, db.len());
        let success = ranking.iter().take(rank).any(|(id, _)| {
            let rc = (0..db.len())
                .find(|&r| db.id(r) == *id)
                .map(|r| db.coord(r))
                .expect("id in db");
            coord.distance(&rc) <= radius_m
        });
        if success {
            hits += 1;
        }
    }
    hits as f64 / queries.len() as f64
}

/// Gram-Schmidt orthonormal basis from a seeded random matrix.
pub fn random_rotation(dim: usize, rng: &mut rand_chacha::ChaCha20Rng) -> Vec<Vec<f64>> {
    use rand::Rng;
    loop {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        let mut ok = true;
        for _ in 0..dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
        }
        if ok {
            return basis;
        }
    }
}

pub fn apply_rotation(rotation: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    rotation
        .iter()
        .map(|row| row.iter().zip(v).map(|(r, x)| r * x).sum())
        .collect()
}

/// Convenience: rows of a Matrix as owned vectors.
pub fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Convenience: assignment matrix rows.
pub fn assignment_rows(a: &AssignmentMatrix) -> Vec<Vec<f64>> {
    matrix_rows(a.matrix())
}

/// Convenience: attention values.
pub fn attention_values(a: &AttentionMap) -> Vec<f64> {
    a.weights().to_vec()
}
