//! Group-normalized sequence advantages and their tree-structured
//! redistribution into token-level advantages.
//!
//! `redistribute` computes per-segment leaf averages in one bottom-up pass;
//! `oracle_redistribute` recomputes the same values from the raw definition
//! (enumerate all trajectories per position) and exists purely as an
//! independent check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{ForestError, RolloutForest, SegmentId};

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("group too small for normalization: K = {k} (need K >= 2)")]
    DegenerateGroup { k: usize },
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Group statistics from Eq.-1-style normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    /// Per-rollout sequence advantages `A_i`; sums to zero.
    pub seq_adv: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub delta: f64,
}

/// Per-trajectory per-position token advantages plus the group statistics
/// they were derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub seq_adv: Vec<f64>,
    /// `token_adv[i][t]`: advantage of trajectory `i` at position `t`;
    /// piecewise-constant on segment boundaries.
    pub token_adv: Vec<Vec<f64>>,
    pub mu: f64,
    pub sigma: f64,
    pub delta: f64,
}

/// `A_i = (R_i - mu) / sigma` with `sigma = sqrt(mean sq deviation + delta)`.
///
/// A zero-variance group with `delta = 0` yields all-zero advantages rather
/// than dividing by zero.
pub fn group_normalize(rewards: &[f64], delta: f64) -> Result<GroupStats, AdvantageError> {
    let k = rewards.len();
    if k < 2 {
        return Err(AdvantageError::DegenerateGroup { k });
    }
    debug_assert!(delta >= 0.0);
    let mu = rewards.iter().sum::<f64>() / k as f64;
    let var = rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / k as f64;
    let sigma = (var + delta).sqrt();
    let seq_adv = if sigma == 0.0 {
        vec![0.0; k]
    } else {
        rewards.iter().map(|r| (r - mu) / sigma).collect()
    };
    Ok(GroupStats {
        seq_adv,
        mu,
        sigma,
        delta,
    })
}

/// Tree-walk redistribution: every segment's advantage is the mean sequence
/// advantage of the leaves below it, and every token inherits the advantage
/// of its covering segment. One bottom-up pass per tree.
pub fn redistribute(
    forest: &RolloutForest,
    group: &GroupStats,
) -> Result<AdvantageTable, AdvantageError> {
    let views = forest.enumerate_leaves()?;
    assert_eq!(views.len(), group.seq_adv.len(), "advantage/leaf count mismatch");

    let mut token_adv: Vec<Vec<f64>> = views.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut leaf_base = 0usize;
    for tree in &forest.trees {
        let leaves = tree.leaf_segments();
        let mut leaf_index_of = vec![usize::MAX; tree.segment_count()];
        for (pos, &l) in leaves.iter().enumerate() {
            leaf_index_of[l] = leaf_base + pos;
        }

        // Post-order accumulation of (leaf count, advantage sum) per segment.
        let mut count = vec![0usize; tree.segment_count()];
        let mut sum = vec![0.0f64; tree.segment_count()];
        let mut stack: Vec<(SegmentId, bool)> = vec![(tree.root(), false)];
        while let Some((id, expanded)) = stack.pop() {
            let seg = tree.segment(id);
            if seg.is_leaf() {
                count[id] = 1;
                sum[id] = group.seq_adv[leaf_index_of[id]];
            } else if !expanded {
                stack.push((id, true));
                for &c in &seg.children {
                    stack.push((c, false));
                }
            } else {
                for &c in &seg.children {
                    count[id] += count[c];
                    sum[id] += sum[c];
                }
            }
        }

        for (pos, &leaf) in leaves.iter().enumerate() {
            let i = leaf_base + pos;
            let mut t = 0usize;
            for seg_id in tree.path_to(leaf) {
                let seg_adv = sum[seg_id] / count[seg_id] as f64;
                for _ in 0..tree.segment(seg_id).len() {
                    token_adv[i][t] = seg_adv;
                    t += 1;
                }
            }
            debug_assert_eq!(t, views[i].len());
        }
        leaf_base += leaves.len();
    }

    Ok(AdvantageTable {
        seq_adv: group.seq_adv.clone(),
        token_adv,
        mu: group.mu,
        sigma: group.sigma,
        delta: group.delta,
    })
}

/// Brute-force redistribution by direct definition: for every position,
/// enumerate all `K` trajectories and average the advantages of those that
/// pass through the identical covering segment occurrence. No tree-walk
/// shortcuts; used only for verification.
pub fn oracle_redistribute(
    forest: &RolloutForest,
    group: &GroupStats,
) -> Result<AdvantageTable, AdvantageError> {
    let views = forest.enumerate_leaves()?;
    assert_eq!(views.len(), group.seq_adv.len(), "advantage/leaf count mismatch");
    let mut token_adv: Vec<Vec<f64>> = Vec::with_capacity(views.len());
    for view in &views {
        let mut row = Vec::with_capacity(view.len());
        for step in &view.steps {
            let covering = step.segment;
            let mut total = 0.0;
            let mut members = 0usize;
            for (l, other) in views.iter().enumerate() {
                if other.steps.iter().any(|s| s.segment == covering) {
                    total += group.seq_adv[l];
                    members += 1;
                }
            }
            row.push(total / members as f64);
        }
        token_adv.push(row);
    }
    Ok(AdvantageTable {
        seq_adv: group.seq_adv.clone(),
        token_adv,
        mu: group.mu,
        sigma: group.sigma,
        delta: group.delta,
    })
}
