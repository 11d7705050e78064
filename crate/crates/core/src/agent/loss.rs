//! Unrolled training objective.
//!
//! Per sampled position: represent once, unroll dynamics along the stored
//! actions, and at each of the `UNROLL_STEPS + 1` prediction sites add
//! cross-entropy against the search policy, a value quantile loss and the
//! auxiliary quantile losses. Sites past the end of the episode contribute
//! nothing, but the per-site weight stays 1/(UNROLL_STEPS + 1).

use serde::{Deserialize, Serialize};

use super::actor::{AuxLabels, Transition, UNROLL_STEPS};
use super::net::{observation_features, AgentParams};
use super::nn::{Grads, Tape, Var};
use super::replay::Sample;
use crate::codec_sim::features::{LOG_BITS_SCALE, PSNR_SCALE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub value: f64,
    pub aux: f64,
    pub l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            value: 0.5,
            aux: 0.1,
            l2: 1e-3,
        }
    }
}

/// Batch-mean loss components; `total` includes the L2 term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub aux: f64,
    pub l2: f64,
}

/// Auxiliary labels scaled to roughly unit range, in head order.
pub fn normalized_aux(labels: &AuxLabels, target_kbps: f64) -> [f64; 4] {
    [
        labels[0] / PSNR_SCALE,
        labels[1] / LOG_BITS_SCALE,
        labels[2] / PSNR_SCALE,
        labels[3] / target_kbps,
    ]
}

/// Builds the loss of one position on `tape`, returning the weighted root
/// and its unweighted (policy, value, aux) sums.
fn position_loss(
    tape: &mut Tape,
    params: &AgentParams,
    episode: &[Transition],
    t: usize,
    weights: &LossWeights,
) -> Result<(Var, [f64; 3])> {
    let net = &params.net;
    let first = &episode[t];
    let mut s = net.represent(tape, observation_features(&first.observation, params.config()));
    let site_weight = 1.0 / (UNROLL_STEPS + 1) as f64;
    let mut terms = Vec::new();
    let mut parts = [0.0; 3];
    for k in 0..=UNROLL_STEPS {
        let Some(tr) = episode.get(t + k) else { break };
        if tr.policy_target.len() != params.config().action_bins {
            return Err(Error::InputDomain(format!(
                "policy target over {} bins, network has {}",
                tr.policy_target.len(),
                params.config().action_bins
            )));
        }
        let pred = net.predict(tape, s);
        let ce = tape.softmax_xent(pred.policy, tr.policy_target.clone());
        let v = tape.pinball(pred.value, tr.value_target);
        parts[0] += tape.scalar(ce) * site_weight;
        parts[1] += tape.scalar(v) * site_weight;
        terms.push((ce, site_weight));
        terms.push((v, weights.value * site_weight));
        let aux = normalized_aux(&tr.aux_targets, tr.observation.target_kbps);
        for (head, y) in pred.aux.into_iter().zip(aux) {
            let a = tape.pinball(head, y);
            parts[2] += tape.scalar(a) * site_weight;
            terms.push((a, weights.aux * site_weight));
        }
        if k == UNROLL_STEPS {
            break;
        }
        match first.actions[k] {
            Some(a) => s = net.dynamics(tape, s, a as usize),
            None => break,
        }
    }
    Ok((tape.weighted_sum(terms), parts))
}

/// Mean loss over `batch` plus `weights.l2 · ‖θ‖²`, with its gradient.
pub fn compute_loss(batch: &[Sample], params: &AgentParams, weights: &LossWeights) -> Result<(LossBreakdown, Grads)> {
    let positions: Vec<(&[Transition], usize)> = batch
        .iter()
        .map(|s| (s.episode.episode.transitions.as_slice(), s.index))
        .collect();
    compute_loss_at(&positions, params, weights)
}

/// [`compute_loss`] over explicit (episode transitions, position) pairs.
pub fn compute_loss_at(
    positions: &[(&[Transition], usize)],
    params: &AgentParams,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Grads)> {
    if positions.is_empty() {
        return Err(Error::InputDomain("empty training batch".into()));
    }
    let b = positions.len() as f64;
    let mut grads = params.params.zeros_like();
    let mut out = LossBreakdown::default();
    for &(episode, t) in positions {
        if t >= episode.len() {
            return Err(Error::InputDomain(format!("position {t} outside episode of {}", episode.len())));
        }
        let mut tape = Tape::new(&params.params);
        let (root, parts) = position_loss(&mut tape, params, episode, t, weights)?;
        let mut g = params.params.zeros_like();
        tape.backward(root, &mut g);
        grads.add_scaled(&g, 1.0 / b);
        out.total += tape.scalar(root) / b;
        out.policy += parts[0] / b;
        out.value += parts[1] / b;
        out.aux += parts[2] / b;
    }
    out.l2 = weights.l2 * params.params.squared_norm();
    out.total += out.l2;
    for (g, t) in grads.0.iter_mut().zip(&params.params.tensors) {
        for (gi, w) in g.iter_mut().zip(&t.data) {
            *gi += 2.0 * weights.l2 * w;
        }
    }
    Ok((out, grads))
}

/// Forward pass only, reporting which side of each kink every ReLU and
/// pinball residual is on. Used to keep finite-difference probes inside
/// one smooth piece.
pub fn kink_signature(
    positions: &[(&[Transition], usize)],
    params: &AgentParams,
    weights: &LossWeights,
) -> Result<Vec<bool>> {
    let mut sig = Vec::new();
    for &(episode, t) in positions {
        let mut tape = Tape::new(&params.params);
        position_loss(&mut tape, params, episode, t, weights)?;
        sig.extend(tape.kink_pattern());
    }
    Ok(sig)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where every probe step crossed a kink.
    pub skipped: usize,
}

/// Compares analytic gradients with central differences on every
/// parameter. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    positions: &[(&[Transition], usize)],
    params: &AgentParams,
    weights: &LossWeights,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let (_, grads) = compute_loss_at(positions, params, weights)?;
    let analytic: Vec<f64> = grads.flat().collect();
    let base_sig = kink_signature(positions, params, weights)?;
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let eval = |p: &AgentParams| compute_loss_at(positions, p, weights).map(|(l, _)| l.total);
    for (i, a) in analytic.iter().enumerate() {
        let original = *probe.params.flat_mut().nth(i).expect("index in range");
        let mut numeric = None;
        for step in [h, h * 1e-2, h * 1e-4] {
            *probe.params.flat_mut().nth(i).unwrap() = original + step;
            let sig_plus = kink_signature(positions, &probe, weights)?;
            let plus = eval(&probe)?;
            *probe.params.flat_mut().nth(i).unwrap() = original - step;
            let sig_minus = kink_signature(positions, &probe, weights)?;
            let minus = eval(&probe)?;
            *probe.params.flat_mut().nth(i).unwrap() = original;
            if sig_plus == base_sig && sig_minus == base_sig {
                numeric = Some((plus - minus) / (2.0 * step));
                break;
            }
        }
        match numeric {
            Some(n) => {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
                report.max_rel_error = report.max_rel_error.max(rel);
                report.checked += 1;
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}
