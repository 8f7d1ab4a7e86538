use std::collections::HashSet;

use crate::error::{Error, Result};

/// `sum_i [e_i in T] / |T|`.
pub fn recall_at_k(returned: &[u32], targets: &HashSet<u32>) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Invalid("recall needs a nonempty target set".into()));
    }
    let hits = returned.iter().filter(|e| targets.contains(e)).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Pairwise AUC with ties counted one half; `None` unless both labels occur.
pub fn auc(group: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = group.iter().filter(|g| g.1).map(|g| g.0).collect();
    let neg: Vec<f64> = group.iter().filter(|g| !g.1).map(|g| g.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Impression-weighted mean AUC over groups holding both labels.
pub fn gauc(groups: &[Vec<(f64, bool)>]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for g in groups {
        if let Some(a) = auc(g) {
            num += a * g.len() as f64;
            den += g.len() as f64;
        }
    }
    if den == 0.0 {
        return Err(Error::Invalid("no query group has both clicked and unclicked items".into()));
    }
    Ok(num / den)
}
