use crate::error::{KalaError, Result};

pub const NO_RELATION: &str = "no_relation";
pub const DEFAULT_RELATION_THRESHOLD: f64 = 0.1;

/// Pick a relation from classifier output. Top-1 wins unless it is
/// `no_relation`, in which case the runner-up is taken when its probability
/// is strictly above `threshold`. Returns `None` for no relation.
pub fn select_relation(distribution: &[(String, f64)], threshold: f64) -> Result<Option<String>> {
    if distribution.is_empty() {
        return Err(KalaError::Contract("empty relation distribution".into()));
    }
    if let Some((r, p)) = distribution.iter().find(|(_, p)| !(*p >= 0.0)) {
        return Err(KalaError::Contract(format!("probability {p} for {r} is negative or NaN")));
    }
    let mut sorted: Vec<&(String, f64)> = distribution.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top = sorted[0];
    if top.0 != NO_RELATION {
        return Ok(Some(top.0.clone()));
    }
    match sorted.get(1) {
        Some((r, p)) if *p > threshold && r != NO_RELATION => Ok(Some(r.clone())),
        _ => Ok(None),
    }
}
