//! Ranking metrics: Normalized Entropy and AUC.

use crate::error::{Error, Result};

fn validate(preds: &[f64], labels: &[f64], need_open_interval: bool) -> Result<(usize, usize)> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "preds/labels length mismatch: {} vs {}",
            preds.len(),
            labels.len()
        )));
    }
    let mut pos = 0;
    let mut neg = 0;
    for (&p, &y) in preds.iter().zip(labels.iter()) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::UndefinedMetric(format!("label {y} is not binary")));
        }
        if need_open_interval && !(p > 0.0 && p < 1.0) {
            return Err(Error::UndefinedMetric(format!(
                "prediction {p} outside the open interval (0,1)"
            )));
        }
        if y == 1.0 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "need at least one positive and one negative label".into(),
        ));
    }
    Ok((pos, neg))
}

/// Average binary logloss normalized by the entropy of the base rate:
/// NE = avg_logloss / H(mean(labels)). The constant base-rate predictor
/// scores exactly 1; lower is better.
pub fn normalized_entropy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    validate(preds, labels, true)?;
    let n = preds.len() as f64;
    let avg_logloss = -preds
        .iter()
        .zip(labels.iter())
        .map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        .sum::<f64>()
        / n;
    let r = labels.iter().sum::<f64>() / n;
    let base_entropy = -(r * r.ln() + (1.0 - r) * (1.0 - r).ln());
    Ok(avg_logloss / base_entropy)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed by rank-sum with tie-averaged ranks.
pub fn auc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = validate(preds, labels, false)?;
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[a].partial_cmp(&preds[b]).expect("finite predictions"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && preds[idx[j]] == preds[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged across the tie group.
        let avg_rank = ((i + 1 + j) as f64) / 2.0;
        for &id in &idx[i..j] {
            if labels[id] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// O(n²) pairwise oracle with half-credit ties.
    fn auc_pairwise(preds: &[f64], labels: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..preds.len() {
            for j in 0..preds.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    pairs += 1.0;
                    if preds[i] > preds[j] {
                        wins += 1.0;
                    } else if preds[i] == preds[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn base_rate_predictor_has_ne_one() {
        let labels = [1.0, 0.0, 0.0, 1.0, 1.0];
        let r = 3.0 / 5.0;
        let preds = [r; 5];
        let ne = normalized_entropy(&preds, &labels).unwrap();
        assert!((ne - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confident_predictor_drives_ne_to_zero() {
        let labels = [1.0, 0.0, 1.0];
        let preds = [1.0 - 1e-12, 1e-12, 1.0 - 1e-12];
        let ne = normalized_entropy(&preds, &labels).unwrap();
        assert!(ne < 1e-9, "ne = {ne}");
    }

    #[test]
    fn ne_matches_direct_formula_on_random_data() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<f64> = (0..64).map(|_| rng.gen_range(0.01..0.99)).collect();
        let labels: Vec<f64> = (0..64).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        if labels.iter().all(|&l| l == 0.0) || labels.iter().all(|&l| l == 1.0) {
            return;
        }
        let n = preds.len() as f64;
        let ll = -preds
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / n;
        let r = labels.iter().sum::<f64>() / n;
        let denom = -(r * r.ln() + (1.0 - r) * (1.0 - r).ln());
        let direct = ll / denom;
        assert!((normalized_entropy(&preds, &labels).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        assert!(normalized_entropy(&[0.5, 0.5], &[1.0, 1.0]).is_err());
        assert!(auc(&[0.5, 0.5], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn perfectly_separated_auc_is_one() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn random_predictions_hover_near_half() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let preds: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let a = auc(&preds, &labels).unwrap();
        assert!((a - 0.5).abs() < 0.02, "auc = {a}");
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for trial in 0..30 {
            let n = rng.gen_range(5..=200);
            // Coarse grid of predictions forces plenty of ties.
            let preds: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=7) as f64 / 7.0).collect();
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            if labels.iter().all(|&l| l == 0.0) || labels.iter().all(|&l| l == 1.0) {
                continue;
            }
            let fast = auc(&preds, &labels).unwrap();
            let slow = auc_pairwise(&preds, &labels);
            assert!((fast - slow).abs() < 1e-12, "trial {trial}: {fast} vs {slow}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform_and_reorder() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let n = 300;
        let preds: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let base = auc(&preds, &labels).unwrap();

        let squashed: Vec<f64> = preds.iter().map(|&p| 1.0 / (1.0 + (-3.0 * p).exp())).collect();
        assert!((auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);

        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.swap(3, 117);
        let rp: Vec<f64> = order.iter().map(|&i| preds[i]).collect();
        let rl: Vec<f64> = order.iter().map(|&i| labels[i]).collect();
        assert!((auc(&rp, &rl).unwrap() - base).abs() < 1e-12);
        let ne_a = normalized_entropy(&squashed, &labels).unwrap();
        let rs: Vec<f64> = order.iter().map(|&i| squashed[i]).collect();
        let ne_b = normalized_entropy(&rs, &rl).unwrap();
        assert!((ne_a - ne_b).abs() < 1e-12);
    }
}
