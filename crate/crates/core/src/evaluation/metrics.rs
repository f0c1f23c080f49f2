//! Ranking metrics with abnormal as the positive class and higher scores
//! meaning more abnormal.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidData(format!("score {s} is not finite")));
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random abnormal outscores a random normal, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    // Walking from the top, each positive beats every negative not yet seen
    // and ties with the negatives in its own group.
    let mut negatives_above = 0usize;
    let mut wins = 0.0;
    for group in tie_groups(scores).iter().rev() {
        let pos = group.iter().filter(|&&i| labels[i]).count();
        let neg = group.len() - pos;
        wins += pos as f64 * (negatives_above as f64 + 0.5 * neg as f64);
        negatives_above += neg;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Average precision: the sum over distinct thresholds of recall gained
/// times precision at that threshold.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Empty("positive class"));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for group in tie_groups(scores) {
        let pos = group.iter().filter(|&&i| labels[i]).count();
        tp += pos;
        seen += group.len();
        if pos > 0 {
            ap += (pos as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}
