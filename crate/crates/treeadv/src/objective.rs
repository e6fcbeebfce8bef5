//! Clipped surrogate objectives (GRPO / TreeAdv-GRPO / GSPO / TreeAdv-GSPO)
//! with exact analytic gradients with respect to the current policy's
//! per-position log-probabilities.
//!
//! Losses are negated objectives (minimize). Gradient conventions:
//! - token-ratio modes: d(r)/d(logp_new) = r, so the unclipped branch
//!   contributes -r * adv / K and the clipped branch contributes 0;
//! - sequence-ratio modes honor the stop-gradient contract of the
//!   token-level ratio: the forward value is w_i everywhere, the derivative
//!   at position t is the detached w_i, and cross-position derivatives are 0.
//! - at an exact clip tie the unclipped branch's gradient is used.

use serde::Serialize;
use thiserror::Error;

use crate::advantage::AdvantageTable;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("non-finite ratio at trajectory {trajectory}, position {position} (log-diff {log_diff})")]
    NonFiniteRatio {
        trajectory: usize,
        position: usize,
        log_diff: f64,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kl_coeff > 0 requires reference log-probs")]
    MissingReference,
    #[error(
        "ratio {ratio} at trajectory {trajectory} is within 10h of a clip boundary (epsilon {epsilon}, h {h})"
    )]
    BoundaryTooClose {
        trajectory: usize,
        ratio: f64,
        epsilon: f64,
        h: f64,
    },
}

/// Per-trajectory, per-position log-probabilities under the live policy and
/// the behavior snapshot (plus an optional reference policy for the KL hook).
#[derive(Clone, Debug)]
pub struct RatioInputs {
    pub logp_new: Vec<Vec<f64>>,
    pub logp_old: Vec<Vec<f64>>,
    pub logp_ref: Option<Vec<Vec<f64>>>,
}

impl RatioInputs {
    pub fn on_policy(logp_old: Vec<Vec<f64>>) -> Self {
        RatioInputs {
            logp_new: logp_old.clone(),
            logp_old,
            logp_ref: None,
        }
    }

    fn check_shapes(&self) -> Result<(), ObjectiveError> {
        if self.logp_new.len() != self.logp_old.len() {
            return Err(ObjectiveError::ShapeMismatch(format!(
                "logp_new has {} trajectories, logp_old has {}",
                self.logp_new.len(),
                self.logp_old.len()
            )));
        }
        for (i, (n, o)) in self.logp_new.iter().zip(&self.logp_old).enumerate() {
            if n.len() != o.len() {
                return Err(ObjectiveError::ShapeMismatch(format!(
                    "trajectory {i}: logp_new len {} vs logp_old len {}",
                    n.len(),
                    o.len()
                )));
            }
        }
        if let Some(r) = &self.logp_ref {
            if r.len() != self.logp_new.len()
                || r.iter().zip(&self.logp_new).any(|(a, b)| a.len() != b.len())
            {
                return Err(ObjectiveError::ShapeMismatch(
                    "logp_ref shape differs from logp_new".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClipConfig {
    pub epsilon: f64,
    /// KL penalty coefficient beta; 0 disables the hook.
    pub kl_coeff: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            epsilon: 0.2,
            kl_coeff: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateMode {
    Grpo,
    TreeadvGrpo,
    Gspo,
    TreeadvGspo,
}

impl SurrogateMode {
    pub fn uses_token_advantages(self) -> bool {
        matches!(self, SurrogateMode::TreeadvGrpo | SurrogateMode::TreeadvGspo)
    }

    pub fn uses_sequence_ratio(self) -> bool {
        matches!(self, SurrogateMode::Gspo | SurrogateMode::TreeadvGspo)
    }
}

impl std::fmt::Display for SurrogateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SurrogateMode::Grpo => "grpo",
            SurrogateMode::TreeadvGrpo => "treeadv-grpo",
            SurrogateMode::Gspo => "gspo",
            SurrogateMode::TreeadvGspo => "treeadv-gspo",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct LossReport {
    /// Negated objective (plus KL penalty when enabled).
    pub loss: f64,
    /// d(loss)/d(logp_new), same shape as the inputs.
    pub grad_logp: Vec<Vec<f64>>,
    /// Fraction of positions where the clipped branch attained the min.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub mean_abs_adv: f64,
}

/// Per-position likelihood ratios `r = exp(logp_new - logp_old)`.
pub fn token_ratio(
    logp_new: &[Vec<f64>],
    logp_old: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, ObjectiveError> {
    let mut out = Vec::with_capacity(logp_new.len());
    for (i, (n, o)) in logp_new.iter().zip(logp_old).enumerate() {
        let mut row = Vec::with_capacity(n.len());
        for (t, (&a, &b)) in n.iter().zip(o).enumerate() {
            let r = (a - b).exp();
            if !r.is_finite() {
                return Err(ObjectiveError::NonFiniteRatio {
                    trajectory: i,
                    position: t,
                    log_diff: a - b,
                });
            }
            row.push(r);
        }
        out.push(row);
    }
    Ok(out)
}

/// PPO clipped term `min(r*adv, clip(r, 1-eps, 1+eps)*adv)`; the boolean is
/// true iff the clipped branch strictly attained the min (ties resolve to
/// the unclipped branch).
pub fn clipped_term(r: f64, adv: f64, epsilon: f64) -> (f64, bool) {
    debug_assert!(epsilon > 0.0 && epsilon < 1.0);
    let unclipped = r * adv;
    let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

fn advantage_at(table: &AdvantageTable, mode: SurrogateMode, i: usize, t: usize) -> f64 {
    if mode.uses_token_advantages() {
        table.token_adv[i][t]
    } else {
        table.seq_adv[i]
    }
}

fn check_table(inputs: &RatioInputs, table: &AdvantageTable) -> Result<(), ObjectiveError> {
    inputs.check_shapes()?;
    if table.seq_adv.len() != inputs.logp_new.len() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "{} advantages for {} trajectories",
            table.seq_adv.len(),
            inputs.logp_new.len()
        )));
    }
    for (i, (adv, lp)) in table.token_adv.iter().zip(&inputs.logp_new).enumerate() {
        if adv.len() != lp.len() {
            return Err(ObjectiveError::ShapeMismatch(format!(
                "trajectory {i}: token_adv len {} vs logp len {}",
                adv.len(),
                lp.len()
            )));
        }
    }
    Ok(())
}

/// KL penalty via the k3 estimator `exp(delta) - delta - 1`,
/// `delta = logp_ref - logp_new`, averaged over all positions. Adds the
/// penalty to `loss` and its exact derivative `beta * (1 - exp(delta)) / N`
/// into `grad`.
fn apply_kl(
    inputs: &RatioInputs,
    cfg: &ClipConfig,
    loss: &mut f64,
    grad: &mut [Vec<f64>],
) -> Result<(), ObjectiveError> {
    if cfg.kl_coeff == 0.0 {
        return Ok(());
    }
    let logp_ref = inputs.logp_ref.as_ref().ok_or(ObjectiveError::MissingReference)?;
    let n: usize = inputs.logp_new.iter().map(Vec::len).sum();
    if n == 0 {
        return Ok(());
    }
    let scale = cfg.kl_coeff / n as f64;
    for (i, (new_row, ref_row)) in inputs.logp_new.iter().zip(logp_ref).enumerate() {
        for (t, (&lp_new, &lp_ref)) in new_row.iter().zip(ref_row).enumerate() {
            let delta = lp_ref - lp_new;
            *loss += scale * (delta.exp() - delta - 1.0);
            grad[i][t] += scale * (1.0 - delta.exp());
        }
    }
    Ok(())
}

/// GRPO / TreeAdv-GRPO loss with exact per-position gradients.
pub fn grpo_loss(
    inputs: &RatioInputs,
    table: &AdvantageTable,
    cfg: &ClipConfig,
    mode: SurrogateMode,
) -> Result<LossReport, ObjectiveError> {
    assert!(!mode.uses_sequence_ratio(), "grpo_loss called with a GSPO mode");
    check_table(inputs, table)?;
    let ratios = token_ratio(&inputs.logp_new, &inputs.logp_old)?;
    let k = inputs.logp_new.len() as f64;
    let mut objective = 0.0;
    let mut grad: Vec<Vec<f64>> = inputs.logp_new.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut clipped_count = 0usize;
    let mut positions = 0usize;
    let mut ratio_sum = 0.0;
    let mut abs_adv_sum = 0.0;
    for (i, row) in ratios.iter().enumerate() {
        for (t, &r) in row.iter().enumerate() {
            let adv = advantage_at(table, mode, i, t);
            let (value, clipped) = clipped_term(r, adv, cfg.epsilon);
            objective += value;
            if clipped {
                clipped_count += 1;
            } else {
                grad[i][t] = -r * adv / k;
            }
            positions += 1;
            ratio_sum += r;
            abs_adv_sum += adv.abs();
        }
    }
    let mut loss = -objective / k;
    apply_kl(inputs, cfg, &mut loss, &mut grad)?;
    Ok(LossReport {
        loss,
        grad_logp: grad,
        clip_fraction: clipped_count as f64 / positions.max(1) as f64,
        mean_ratio: ratio_sum / positions.max(1) as f64,
        mean_abs_adv: abs_adv_sum / positions.max(1) as f64,
    })
}

/// Length-normalized sequence ratio `w_i = exp(mean_t(logp_new - logp_old))`.
pub fn gspo_sequence_ratio(logp_new: &[f64], logp_old: &[f64]) -> f64 {
    assert!(!logp_new.is_empty() && logp_new.len() == logp_old.len());
    let mean: f64 = logp_new
        .iter()
        .zip(logp_old)
        .map(|(a, b)| a - b)
        .sum::<f64>()
        / logp_new.len() as f64;
    mean.exp()
}

/// Stop-gradient token-level ratio: forward value is `w_i` exactly; the
/// returned gradient is d(w_{i,t})/d(logp_new at t) = detached `w_i`
/// (the derivative with respect to every other position is zero).
pub fn gspo_token_ratio(w_i: f64) -> (f64, f64) {
    (w_i, w_i)
}

/// GSPO / TreeAdv-GSPO loss with gradients under the stop-gradient contract.
pub fn gspo_loss(
    inputs: &RatioInputs,
    table: &AdvantageTable,
    cfg: &ClipConfig,
    mode: SurrogateMode,
) -> Result<LossReport, ObjectiveError> {
    assert!(mode.uses_sequence_ratio(), "gspo_loss called with a GRPO mode");
    check_table(inputs, table)?;
    let k = inputs.logp_new.len() as f64;
    let mut objective = 0.0;
    let mut grad: Vec<Vec<f64>> = inputs.logp_new.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut clipped_count = 0usize;
    let mut positions = 0usize;
    let mut ratio_sum = 0.0;
    let mut abs_adv_sum = 0.0;
    for (i, (new_row, old_row)) in inputs.logp_new.iter().zip(&inputs.logp_old).enumerate() {
        if new_row.is_empty() {
            continue;
        }
        let w = gspo_sequence_ratio(new_row, old_row);
        if !w.is_finite() {
            return Err(ObjectiveError::NonFiniteRatio {
                trajectory: i,
                position: 0,
                log_diff: f64::INFINITY,
            });
        }
        for t in 0..new_row.len() {
            let adv = advantage_at(table, mode, i, t);
            let (value, w_grad) = gspo_token_ratio(w);
            let (term, clipped) = clipped_term(value, adv, cfg.epsilon);
            objective += term;
            if clipped {
                clipped_count += 1;
            } else {
                grad[i][t] = -w_grad * adv / k;
            }
            positions += 1;
            ratio_sum += value;
            abs_adv_sum += adv.abs();
        }
    }
    let mut loss = -objective / k;
    apply_kl(inputs, cfg, &mut loss, &mut grad)?;
    Ok(LossReport {
        loss,
        grad_logp: grad,
        clip_fraction: clipped_count as f64 / positions.max(1) as f64,
        mean_ratio: ratio_sum / positions.max(1) as f64,
        mean_abs_adv: abs_adv_sum / positions.max(1) as f64,
    })
}

/// Dispatch to the mode's loss function.
pub fn surrogate_loss(
    inputs: &RatioInputs,
    table: &AdvantageTable,
    cfg: &ClipConfig,
    mode: SurrogateMode,
) -> Result<LossReport, ObjectiveError> {
    if mode.uses_sequence_ratio() {
        gspo_loss(inputs, table, cfg, mode)
    } else {
        grpo_loss(inputs, table, cfg, mode)
    }
}

/// Central-difference verification of the analytic gradient. Rejects
/// instances whose effective clip-space ratios sit within `10h` of a clip
/// boundary (where the loss is non-differentiable).
pub fn finite_difference_check(
    inputs: &RatioInputs,
    table: &AdvantageTable,
    cfg: &ClipConfig,
    mode: SurrogateMode,
    h: f64,
) -> Result<f64, ObjectiveError> {
    check_table(inputs, table)?;
    let margin = 10.0 * h;
    for (i, (new_row, old_row)) in inputs.logp_new.iter().zip(&inputs.logp_old).enumerate() {
        let check = |ratio: f64| -> Result<(), ObjectiveError> {
            for bound in [1.0 - cfg.epsilon, 1.0 + cfg.epsilon] {
                if (ratio - bound).abs() <= margin {
                    return Err(ObjectiveError::BoundaryTooClose {
                        trajectory: i,
                        ratio,
                        epsilon: cfg.epsilon,
                        h,
                    });
                }
            }
            Ok(())
        };
        if mode.uses_sequence_ratio() {
            if !new_row.is_empty() {
                check(gspo_sequence_ratio(new_row, old_row))?;
            }
        } else {
            for (&a, &b) in new_row.iter().zip(old_row) {
                check((a - b).exp())?;
            }
        }
    }

    let analytic = surrogate_loss(inputs, table, cfg, mode)?;

    // The perturbable forward function. For sequence-ratio modes the base
    // ratios w_i and the stop-gradient anchors are frozen at the evaluation
    // point, so the numeric derivative matches the Eq.-6 contract rather than
    // the raw (pre-stop-gradient) loss.
    let base_w: Vec<f64> = inputs
        .logp_new
        .iter()
        .zip(&inputs.logp_old)
        .map(|(n, o)| if n.is_empty() { 1.0 } else { gspo_sequence_ratio(n, o) })
        .collect();
    let eval = |pert: &RatioInputs| -> Result<f64, ObjectiveError> {
        if !mode.uses_sequence_ratio() {
            return Ok(grpo_loss(pert, table, cfg, mode)?.loss);
        }
        let k = pert.logp_new.len() as f64;
        let mut objective = 0.0;
        for (i, row) in pert.logp_new.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                let w_it = base_w[i] * (lp - inputs.logp_new[i][t]).exp();
                let adv = advantage_at(table, mode, i, t);
                objective += clipped_term(w_it, adv, cfg.epsilon).0;
            }
        }
        let mut loss = -objective / k;
        let mut scratch: Vec<Vec<f64>> =
            pert.logp_new.iter().map(|r| vec![0.0; r.len()]).collect();
        apply_kl(pert, cfg, &mut loss, &mut scratch)?;
        Ok(loss)
    };

    let mut max_rel = 0.0f64;
    for i in 0..inputs.logp_new.len() {
        for t in 0..inputs.logp_new[i].len() {
            let mut plus = inputs.clone();
            plus.logp_new[i][t] += h;
            let mut minus = inputs.clone();
            minus.logp_new[i][t] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.grad_logp[i][t];
            let rel = (a - numeric).abs() / f64::max(a.abs().max(numeric.abs()), 1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const MODES: [SurrogateMode; 4] = [
        SurrogateMode::Grpo,
        SurrogateMode::TreeadvGrpo,
        SurrogateMode::Gspo,
        SurrogateMode::TreeadvGspo,
    ];

    /// Random instance with per-token ratios (and sequence ratios) kept away
    /// from the clip band edges.
    fn random_instance(seed: u64, k: usize) -> (RatioInputs, AdvantageTable) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logp_new = Vec::new();
        let mut logp_old = Vec::new();
        let mut logp_ref = Vec::new();
        let mut seq_adv = Vec::new();
        let mut token_adv = Vec::new();
        for _ in 0..k {
            let len = rng.gen_range(2..=5);
            let mut n = Vec::new();
            let mut o = Vec::new();
            let mut rf = Vec::new();
            for _ in 0..len {
                let old = -rng.gen_range(0.5..3.0f64);
                // Ratio in (0.5, 1.6) excluding (0.75, 0.85) and (1.15, 1.25)
                // so both token and sequence ratios stay off the eps=0.2 kinks.
                let ratio = loop {
                    let r: f64 = rng.gen_range(0.5..1.6);
                    if !(0.75..0.85).contains(&r) && !(1.15..1.25).contains(&r) {
                        break r;
                    }
                };
                o.push(old);
                n.push(old + ratio.ln());
                rf.push(old + rng.gen_range(-0.1..0.1f64));
            }
            // Re-draw trajectories whose geometric-mean ratio lands near a kink.
            let w = gspo_sequence_ratio(&n, &o);
            if (w - 0.8).abs() < 0.02 || (w - 1.2).abs() < 0.02 {
                for (a, b) in n.iter_mut().zip(&o) {
                    *a = *b; // collapse to ratio 1, safely inside the band
                }
            }
            logp_new.push(n);
            logp_old.push(o);
            logp_ref.push(rf);
            seq_adv.push(rng.gen_range(-1.5..1.5f64));
            token_adv.push((0..len).map(|_| rng.gen_range(-1.5..1.5f64)).collect());
        }
        let table = AdvantageTable {
            seq_adv,
            token_adv,
            mu: 0.0,
            sigma: 1.0,
            delta: 0.0,
        };
        (
            RatioInputs {
                logp_new,
                logp_old,
                logp_ref: Some(logp_ref),
            },
            table,
        )
    }

    fn single(r: f64, adv: f64) -> (RatioInputs, AdvantageTable) {
        let inputs = RatioInputs {
            logp_new: vec![vec![r.ln()]],
            logp_old: vec![vec![0.0]],
            logp_ref: None,
        };
        let table = AdvantageTable {
            seq_adv: vec![adv],
            token_adv: vec![vec![adv]],
            mu: 0.0,
            sigma: 1.0,
            delta: 0.0,
        };
        (inputs, table)
    }

    #[test]
    fn token_ratio_cases() {
        let r = token_ratio(&[vec![-1.0, -2.0]], &[vec![-1.0, -2.0]]).unwrap();
        assert_eq!(r, vec![vec![1.0, 1.0]]);
        let r = token_ratio(&[vec![1.5f64.ln()]], &[vec![0.0]]).unwrap();
        assert!((r[0][0] - 1.5).abs() < 1e-15);
        let err = token_ratio(&[vec![800.0]], &[vec![0.0]]).unwrap_err();
        assert!(matches!(err, ObjectiveError::NonFiniteRatio { .. }));
    }

    #[test]
    fn clipped_term_cases() {
        let (v, clipped) = clipped_term(1.5, 1.0, 0.2);
        assert!((v - 1.2).abs() < 1e-15);
        assert!(clipped);
        let (v, clipped) = clipped_term(0.5, -1.0, 0.2);
        assert!((v + 0.8).abs() < 1e-15);
        assert!(clipped);
        let (v, clipped) = clipped_term(1.0, 0.7, 0.2);
        assert_eq!(v, 0.7);
        assert!(!clipped);
        // Exact tie (ratio at the band edge) resolves to unclipped.
        let (_, clipped) = clipped_term(1.2, 1.0, 0.2);
        assert!(!clipped);
    }

    #[test]
    fn clipped_single_position_has_zero_gradient() {
        let (inputs, table) = single(1.5, 1.0);
        let report = grpo_loss(&inputs, &table, &ClipConfig::default(), SurrogateMode::Grpo).unwrap();
        assert!((report.loss + 1.2).abs() < 1e-12);
        assert_eq!(report.grad_logp[0][0], 0.0);
        assert_eq!(report.clip_fraction, 1.0);
    }

    #[test]
    fn on_policy_losses_equal_negative_mean_advantage_sum() {
        let (inputs, table) = random_instance(7, 4);
        let inputs = RatioInputs {
            logp_new: inputs.logp_old.clone(),
            logp_old: inputs.logp_old,
            logp_ref: None,
        };
        let k = table.seq_adv.len() as f64;
        for mode in MODES {
            let expected = -(0..table.seq_adv.len())
                .map(|i| {
                    (0..table.token_adv[i].len())
                        .map(|t| advantage_at(&table, mode, i, t))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / k;
            let report = surrogate_loss(&inputs, &table, &ClipConfig::default(), mode).unwrap();
            assert!((report.loss - expected).abs() < 1e-12, "{mode}");
            assert_eq!(report.clip_fraction, 0.0, "{mode}");
        }
    }

    #[test]
    fn treeadv_modes_degenerate_when_advantages_coincide() {
        let (inputs, mut table) = random_instance(11, 4);
        for i in 0..table.seq_adv.len() {
            let a = table.seq_adv[i];
            for v in table.token_adv[i].iter_mut() {
                *v = a;
            }
        }
        let cfg = ClipConfig::default();
        let a = grpo_loss(&inputs, &table, &cfg, SurrogateMode::Grpo).unwrap();
        let b = grpo_loss(&inputs, &table, &cfg, SurrogateMode::TreeadvGrpo).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert_eq!(a.grad_logp, b.grad_logp);
        let a = gspo_loss(&inputs, &table, &cfg, SurrogateMode::Gspo).unwrap();
        let b = gspo_loss(&inputs, &table, &cfg, SurrogateMode::TreeadvGspo).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert_eq!(a.grad_logp, b.grad_logp);
    }

    #[test]
    fn gspo_sequence_ratio_cases() {
        assert_eq!(gspo_sequence_ratio(&[-1.0, -2.0], &[-1.0, -2.0]), 1.0);
        assert!((gspo_sequence_ratio(&[0.2, -0.2], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        let w = gspo_sequence_ratio(&[0.1, 0.2, 0.3], &[0.0, 0.0, 0.0]);
        assert!((w - 0.2f64.exp()).abs() < 1e-15);
        assert!((w - 1.2214).abs() < 1e-4);
    }

    #[test]
    fn gspo_token_ratio_contract() {
        let (value, grad_own) = gspo_token_ratio(1.2214);
        assert_eq!(value, 1.2214);
        assert_eq!(grad_own, 1.2214);
    }

    #[test]
    fn gspo_fully_clipped_trajectory_has_zero_gradient() {
        let eps = 0.2f64;
        // w = 1 + 2*eps with positive advantages: every position clipped.
        let log_w = (1.0 + 2.0 * eps).ln();
        let inputs = RatioInputs {
            logp_new: vec![vec![log_w, log_w, log_w]],
            logp_old: vec![vec![0.0, 0.0, 0.0]],
            logp_ref: None,
        };
        let table = AdvantageTable {
            seq_adv: vec![1.0],
            token_adv: vec![vec![1.0, 1.0, 1.0]],
            mu: 0.0,
            sigma: 1.0,
            delta: 0.0,
        };
        let report =
            gspo_loss(&inputs, &table, &ClipConfig { epsilon: eps, kl_coeff: 0.0 }, SurrogateMode::Gspo)
                .unwrap();
        assert_eq!(report.grad_logp, vec![vec![0.0, 0.0, 0.0]]);
        assert_eq!(report.clip_fraction, 1.0);
    }

    #[test]
    fn pessimism_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let r = rng.gen_range(0.01..3.0f64);
            let adv = rng.gen_range(-2.0..2.0f64);
            let eps = rng.gen_range(0.05..0.5f64);
            let (v, _) = clipped_term(r, adv, eps);
            assert!(v <= r * adv + 1e-15);
            assert!(v <= r.clamp(1.0 - eps, 1.0 + eps) * adv + 1e-15);
        }
    }

    #[test]
    fn advantage_scaling_invariance() {
        let (inputs, table) = random_instance(21, 3);
        let cfg = ClipConfig::default();
        for mode in MODES {
            let base = surrogate_loss(&inputs, &table, &cfg, mode).unwrap();
            let mut scaled = table.clone();
            for v in scaled.seq_adv.iter_mut() {
                *v *= 3.5;
            }
            for row in scaled.token_adv.iter_mut() {
                for v in row.iter_mut() {
                    *v *= 3.5;
                }
            }
            let rescaled = surrogate_loss(&inputs, &scaled, &cfg, mode).unwrap();
            assert!((rescaled.loss - 3.5 * base.loss).abs() < 1e-10, "{mode}");
            assert_eq!(rescaled.clip_fraction, base.clip_fraction, "{mode}");
        }
    }

    #[test]
    fn finite_difference_all_modes() {
        for seed in 0..20u64 {
            let (inputs, table) = random_instance(seed, 3);
            let cfg = ClipConfig::default();
            for mode in MODES {
                let err = finite_difference_check(&inputs, &table, &cfg, mode, 1e-5).unwrap();
                assert!(err < 1e-5, "{mode} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn finite_difference_with_kl() {
        let (inputs, table) = random_instance(42, 3);
        let cfg = ClipConfig {
            epsilon: 0.2,
            kl_coeff: 0.3,
        };
        for mode in MODES {
            let err = finite_difference_check(&inputs, &table, &cfg, mode, 1e-5).unwrap();
            assert!(err < 1e-5, "{mode}: rel err {err}");
        }
    }

    #[test]
    fn boundary_too_close_rejected() {
        let (inputs, table) = single(1.2 + 5e-5, 1.0);
        let err =
            finite_difference_check(&inputs, &table, &ClipConfig::default(), SurrogateMode::Grpo, 1e-5)
                .unwrap_err();
        assert!(matches!(err, ObjectiveError::BoundaryTooClose { .. }));
    }

    #[test]
    fn kl_requires_reference() {
        let (mut inputs, table) = random_instance(5, 2);
        inputs.logp_ref = None;
        let cfg = ClipConfig {
            epsilon: 0.2,
            kl_coeff: 0.1,
        };
        assert_eq!(
            grpo_loss(&inputs, &table, &cfg, SurrogateMode::Grpo).unwrap_err(),
            ObjectiveError::MissingReference
        );
    }

    #[test]
    fn shape_mismatch_detected() {
        let (inputs, mut table) = random_instance(9, 2);
        table.token_adv[0].pop();
        let err = grpo_loss(&inputs, &table, &ClipConfig::default(), SurrogateMode::TreeadvGrpo)
            .unwrap_err();
        assert!(matches!(err, ObjectiveError::ShapeMismatch(_)));
    }
}
