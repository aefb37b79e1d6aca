//! Server side: shard-weighted aggregation, clustering of client models,
//! and clustered similarity distillation of the global model.
//!
//! Each cluster of (reconstructed) client models is represented by its
//! unweighted parameter centroid. Representatives and the global model are
//! run over a public batch; their pairwise feature similarity matrices are
//! blended into a consensus that the global model is distilled towards.

use crate::nn::{loss_and_grad, sgd_step, EncoderModel, ParamVector};
use crate::{Error, Result};
use rand::Rng;

pub const KMEANS_MAX_ITERS: usize = 100;
const FROB_EPS: f64 = 1e-12;

/// Convex combination weights, typically proportional to shard sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn from_shard_sizes(sizes: &[usize]) -> Result<AggregationWeights> {
        if sizes.is_empty() {
            return Err(Error::param("sizes", "must be non-empty"));
        }
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(Error::param("sizes", "must sum to a positive count"));
        }
        Ok(AggregationWeights(
            sizes.iter().map(|n| *n as f64 / total as f64).collect(),
        ))
    }

    pub fn uniform(m: usize) -> Result<AggregationWeights> {
        if m == 0 {
            return Err(Error::param("m", "must be >= 1"));
        }
        Ok(AggregationWeights(vec![1.0 / m as f64; m]))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `sum_m w_m v_m`; lengths and dimensions must agree.
pub fn weighted_sum(vectors: &[ParamVector], weights: &AggregationWeights) -> Result<ParamVector> {
    if vectors.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "weighted_sum",
            expected: weights.len(),
            got: vectors.len(),
        });
    }
    let mut acc = ParamVector::zeros(vectors[0].dim());
    for (v, w) in vectors.iter().zip(weights.values()) {
        acc = acc.add(&v.scale(*w))?;
    }
    Ok(acc)
}

/// Output of k-means over model parameter vectors.
#[derive(Debug, Clone)]
pub struct Clustering {
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    /// Unweighted centroid per cluster; every cluster is non-empty.
    pub centroids: Vec<ParamVector>,
}

/// Lloyd's algorithm with d^2-weighted seeding, at most
/// [`KMEANS_MAX_ITERS`] passes. An emptied cluster is re-seeded with the
/// point currently farthest from its own centroid. Ties in the assignment
/// pass keep the point's previous cluster so degenerate inputs terminate.
pub fn cluster_models<R: Rng>(
    points: &[ParamVector],
    k: usize,
    rng: &mut R,
) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::param("server.clusters", "must be >= 1"));
    }
    if points.len() < k {
        return Err(Error::Degenerate(format!(
            "cannot form {} clusters from {} models",
            k,
            points.len()
        )));
    }
    let dim = points[0].dim();
    for p in points {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "cluster_models",
                expected: dim,
                got: p.dim(),
            });
        }
    }

    // Seeding: first centroid uniform, the rest proportional to squared
    // distance from the nearest chosen centroid.
    let mut centroids: Vec<ParamVector> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| squared_distance(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[idx].clone());
    }

    let mut assignments = vec![0usize; points.len()];
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(p, &centroids, None);
    }
    for _ in 0..KMEANS_MAX_ITERS {
        recompute_centroids(points, &assignments, &mut centroids)?;

        // Re-seed clusters that lost every member.
        loop {
            let mut counts = vec![0usize; k];
            for a in &assignments {
                counts[*a] += 1;
            }
            let Some(empty) = counts.iter().position(|c| *c == 0) else {
                break;
            };
            let far = points
                .iter()
                .enumerate()
                .max_by(|(i, p), (j, q)| {
                    let dp = squared_distance(p, &centroids[assignments[*i]]);
                    let dq = squared_distance(q, &centroids[assignments[*j]]);
                    dp.partial_cmp(&dq).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            centroids[empty] = points[far].clone();
            assignments[far] = empty;
            recompute_centroids(points, &assignments, &mut centroids)?;
        }

        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let next = nearest(p, &centroids, Some(assignments[i]));
            if next != assignments[i] {
                assignments[i] = next;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    recompute_centroids(points, &assignments, &mut centroids)?;
    Ok(Clustering {
        assignments,
        centroids,
    })
}

fn squared_distance(a: &ParamVector, b: &ParamVector) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn nearest(p: &ParamVector, centroids: &[ParamVector], current: Option<usize>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    if let Some(cur) = current {
        if squared_distance(p, &centroids[cur]) == best_d {
            return cur;
        }
    }
    best
}

fn recompute_centroids(
    points: &[ParamVector],
    assignments: &[usize],
    centroids: &mut [ParamVector],
) -> Result<()> {
    let dim = points[0].dim();
    let mut sums = vec![ParamVector::zeros(dim); centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, a) in points.iter().zip(assignments) {
        sums[*a] = sums[*a].add(p)?;
        counts[*a] += 1;
    }
    for (j, (sum, count)) in sums.into_iter().zip(&counts).enumerate() {
        if *count > 0 {
            centroids[j] = sum.scale(1.0 / *count as f64);
        }
    }
    Ok(())
}

/// Shard-size weights per cluster: the mass of each cluster's members.
pub fn cluster_weights(
    assignments: &[usize],
    k: usize,
    sizes: &[usize],
) -> Result<AggregationWeights> {
    if assignments.len() != sizes.len() {
        return Err(Error::DimensionMismatch {
            context: "cluster_weights",
            expected: sizes.len(),
            got: assignments.len(),
        });
    }
    let mut mass = vec![0usize; k];
    for (a, n) in assignments.iter().zip(sizes) {
        if *a >= k {
            return Err(Error::param("assignments", "cluster index out of range"));
        }
        mass[*a] += n;
    }
    AggregationWeights::from_shard_sizes(&mass)
}

/// Normalized Gram matrix of the feature rows: `Z Z^T / (||Z||_F + eps)`.
pub fn similarity_matrix(features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if features.is_empty() {
        return Err(Error::param("features", "must be non-empty"));
    }
    let d = features[0].len();
    for f in features {
        if f.len() != d {
            return Err(Error::DimensionMismatch {
                context: "similarity_matrix",
                expected: d,
                got: f.len(),
            });
        }
    }
    let frob = features
        .iter()
        .flat_map(|r| r.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let scale = 1.0 / (frob + FROB_EPS);
    let n = features.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| a * b).sum();
            s[i][j] = dot * scale;
            s[j][i] = dot * scale;
        }
    }
    Ok(s)
}

/// Runs the model over a pixel batch and returns the similarity matrix of
/// its outputs.
pub fn model_similarity(model: &EncoderModel, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let features = batch
        .iter()
        .map(|x| model.forward(x))
        .collect::<Result<Vec<_>>>()?;
    similarity_matrix(&features)
}

/// Weighted blend of per-cluster similarity matrices.
pub fn consensus_similarity(
    matrices: &[Vec<Vec<f64>>],
    weights: &AggregationWeights,
) -> Result<Vec<Vec<f64>>> {
    if matrices.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "consensus_similarity",
            expected: weights.len(),
            got: matrices.len(),
        });
    }
    let n = matrices[0].len();
    let mut out = vec![vec![0.0; n]; n];
    for (m, w) in matrices.iter().zip(weights.values()) {
        if m.len() != n || m.iter().any(|row| row.len() != n) {
            return Err(Error::DimensionMismatch {
                context: "consensus_similarity rows",
                expected: n,
                got: m.len(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                out[i][j] += w * m[i][j];
            }
        }
    }
    Ok(out)
}

/// Mean squared deviation of the model's similarity matrix from the
/// consensus, `(1/n^2) ||S - C||_F^2`, and its parameter gradient.
pub fn distill_loss_grad(
    model: &EncoderModel,
    batch: &[Vec<f64>],
    consensus: &[Vec<f64>],
) -> Result<crate::nn::GradResult> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::param("batch", "must be non-empty"));
    }
    if consensus.len() != n || consensus.iter().any(|row| row.len() != n) {
        return Err(Error::DimensionMismatch {
            context: "distill consensus",
            expected: n,
            got: consensus.len(),
        });
    }
    loss_and_grad(model, batch, |feats| {
        let frob = feats
            .iter()
            .flat_map(|r| r.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let ng = frob + FROB_EPS;
        let mut gram = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let dot: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| a * b).sum();
                gram[i][j] = dot;
                gram[j][i] = dot;
            }
        }
        let mut loss = 0.0;
        let mut dev_dot_gram = 0.0;
        let mut dev = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let d = gram[i][j] / ng - consensus[i][j];
                dev[i][j] = d;
                loss += d * d;
                dev_dot_gram += d * gram[i][j];
            }
        }
        let p2 = (n * n) as f64;
        loss /= p2;

        // d loss / d Z = (4 / (p^2 ng)) dev Z - (2 <dev, gram> / (p^2 ng^2 frob)) Z
        let c1 = 4.0 / (p2 * ng);
        let c2 = if frob > 0.0 {
            2.0 * dev_dot_gram / (p2 * ng * ng * frob)
        } else {
            0.0
        };
        let d = feats[0].len();
        let mut grads = vec![vec![0.0; d]; n];
        for i in 0..n {
            for j in 0..n {
                let w = c1 * dev[i][j];
                for (g, z) in grads[i].iter_mut().zip(&feats[j]) {
                    *g += w * z;
                }
            }
            for (g, z) in grads[i].iter_mut().zip(&feats[i]) {
                *g -= c2 * z;
            }
        }
        Ok((loss, grads))
    })
}

/// One gradient step of the distillation loss; returns the pre-step loss.
pub fn distill_step(
    model: &mut EncoderModel,
    batch: &[Vec<f64>],
    consensus: &[Vec<f64>],
    lr: f64,
) -> Result<f64> {
    let res = distill_loss_grad(model, batch, consensus)?;
    let next = sgd_step(model.params(), &res.grad, lr)?;
    *model = model.with_params(next)?;
    Ok(res.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_are_proportional_to_sizes() {
        let w = AggregationWeights::from_shard_sizes(&[2, 1, 1]).unwrap();
        assert_eq!(w.values(), &[0.5, 0.25, 0.25]);
        assert!((w.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(AggregationWeights::from_shard_sizes(&[]).is_err());
        assert!(AggregationWeights::from_shard_sizes(&[0, 0]).is_err());
    }

    #[test]
    fn weighted_sum_oracle() {
        let w = AggregationWeights::from_shard_sizes(&[3, 1]).unwrap();
        let out = weighted_sum(
            &[
                ParamVector::new(vec![4.0, 0.0]),
                ParamVector::new(vec![0.0, 8.0]),
            ],
            &w,
        )
        .unwrap();
        assert_eq!(out.values(), &[3.0, 2.0]);
        assert!(weighted_sum(&[ParamVector::zeros(2)], &w).is_err());
    }

    fn blobs() -> (Vec<ParamVector>, Vec<usize>) {
        let centers = [(0.0, 0.0), (10.0, 10.0), (-8.0, 12.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for (label, (cx, cy)) in centers.iter().enumerate() {
            for _ in 0..6 {
                let dx = rng.gen::<f64>() * 0.5 - 0.25;
                let dy = rng.gen::<f64>() * 0.5 - 0.25;
                points.push(ParamVector::new(vec![cx + dx, cy + dy]));
                truth.push(label);
            }
        }
        (points, truth)
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let (points, truth) = blobs();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clustering = cluster_models(&points, 3, &mut rng).unwrap();
            for i in 0..points.len() {
                for j in 0..points.len() {
                    assert_eq!(
                        clustering.assignments[i] == clustering.assignments[j],
                        truth[i] == truth[j],
                        "seed {seed}: pair ({i},{j}) split wrongly"
                    );
                }
            }
            // Each centroid is the unweighted mean of its members.
            for (k, centroid) in clustering.centroids.iter().enumerate() {
                let members: Vec<&ParamVector> = points
                    .iter()
                    .zip(&clustering.assignments)
                    .filter(|(_, a)| **a == k)
                    .map(|(p, _)| p)
                    .collect();
                assert!(!members.is_empty());
                for d in 0..2 {
                    let mean: f64 = members.iter().map(|p| p.values()[d]).sum::<f64>()
                        / members.len() as f64;
                    assert!((centroid.values()[d] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let (points, _) = blobs();
        let a = cluster_models(&points, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = cluster_models(&points, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn kmeans_edge_cases() {
        let (points, _) = blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = cluster_models(&points, 1, &mut rng).unwrap();
        assert!(one.assignments.iter().all(|a| *a == 0));

        assert!(cluster_models(&points, points.len() + 1, &mut rng).is_err());
        assert!(cluster_models(&points, 0, &mut rng).is_err());

        // All points identical: must terminate with every cluster usable.
        let same = vec![ParamVector::new(vec![1.0, 2.0]); 4];
        let c = cluster_models(&same, 2, &mut rng).unwrap();
        assert_eq!(c.centroids.len(), 2);
        let mut counts = [0usize; 2];
        for a in &c.assignments {
            counts[*a] += 1;
        }
        assert!(counts.iter().all(|n| *n > 0), "empty cluster survived: {counts:?}");
    }

    #[test]
    fn cluster_mass_follows_shard_sizes() {
        let w = cluster_weights(&[0, 1, 0], 2, &[3, 1, 2]).unwrap();
        assert_eq!(w.values(), &[5.0 / 6.0, 1.0 / 6.0]);
        assert!(cluster_weights(&[0, 2], 2, &[1, 1]).is_err());
    }

    #[test]
    fn similarity_matches_hand_computation() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]];
        let s = similarity_matrix(&z).unwrap();
        let frob = (1.0f64 + 4.0 + 2.0).sqrt();
        let scale = 1.0 / (frob + 1e-12);
        let expect = [
            [1.0, 0.0, 1.0],
            [0.0, 4.0, 2.0],
            [1.0, 2.0, 2.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((s[i][j] - expect[i][j] * scale).abs() < 1e-12);
                assert_eq!(s[i][j], s[j][i]);
            }
        }
    }

    #[test]
    fn consensus_blends_with_weights() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = vec![vec![0.0, 2.0], vec![2.0, 0.0]];
        let w = AggregationWeights::from_shard_sizes(&[1, 3]).unwrap();
        let c = consensus_similarity(&[a, b], &w).unwrap();
        assert_eq!(c[0][0], 0.25);
        assert_eq!(c[0][1], 1.5);
    }

    #[test]
    fn duplicating_the_batch_halves_the_distill_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let global = EncoderModel::random_init(vec![6, 5, 4], &mut rng).unwrap();
        let peer = EncoderModel::random_init(vec![6, 5, 4], &mut rng).unwrap();
        let batch: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let consensus = model_similarity(&peer, &batch).unwrap();
        let loss = distill_loss_grad(&global, &batch, &consensus).unwrap().loss;

        let doubled: Vec<Vec<f64>> = batch.iter().chain(batch.iter()).cloned().collect();
        let consensus2 = model_similarity(&peer, &doubled).unwrap();
        let loss2 = distill_loss_grad(&global, &doubled, &consensus2)
            .unwrap()
            .loss;
        assert!(
            (loss2 - loss / 2.0).abs() <= 1e-9 * loss.max(1.0),
            "expected {} got {}",
            loss / 2.0,
            loss2
        );
    }

    #[test]
    fn distill_grad_matches_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let model = EncoderModel::random_init(vec![4, 3, 2], &mut rng).unwrap();
            let peer = EncoderModel::random_init(vec![4, 3, 2], &mut rng).unwrap();
            let batch: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..4).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let consensus = model_similarity(&peer, &batch).unwrap();
            let res = distill_loss_grad(&model, &batch, &consensus).unwrap();
            let h = 1e-5;
            for i in 0..model.params().dim() {
                let mut up = model.params().values().to_vec();
                let mut dn = up.clone();
                up[i] += h;
                dn[i] -= h;
                let lu = distill_loss_grad(
                    &model.with_params(ParamVector::new(up)).unwrap(),
                    &batch,
                    &consensus,
                )
                .unwrap()
                .loss;
                let ld = distill_loss_grad(
                    &model.with_params(ParamVector::new(dn)).unwrap(),
                    &batch,
                    &consensus,
                )
                .unwrap()
                .loss;
                let numeric = (lu - ld) / (2.0 * h);
                let analytic = res.grad.values()[i];
                assert!(
                    (analytic - numeric).abs()
                        <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-7,
                    "seed {seed} coord {i}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn distillation_reduces_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut model = EncoderModel::random_init(vec![5, 4, 3], &mut rng).unwrap();
        let peer = EncoderModel::random_init(vec![5, 4, 3], &mut rng).unwrap();
        let batch: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let consensus = model_similarity(&peer, &batch).unwrap();
        let first = distill_step(&mut model, &batch, &consensus, 0.1).unwrap();
        let mut last = first;
        for _ in 0..20 {
            last = distill_step(&mut model, &batch, &consensus, 0.1).unwrap();
        }
        assert!(last < first, "distillation failed to descend: {first} -> {last}");
    }
}
