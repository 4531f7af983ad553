//! Exhaustive reference for AP and ATTC on small instances.
//!
//! Every per-frame score of every clip is tried as a threshold and each clip
//! is rescored from scratch. Nothing here is shared with the sweep in the
//! parent module.

use crate::data::ClipAnnotation;
use crate::model::RiskTrajectory;

use super::{EvalError, Result};

struct Op {
    precision: f64,
    recall: f64,
    ttcs: Vec<f64>,
}

/// `(AP, ATTC)` on channel 0; ATTC is `None` when no level has a true
/// positive.
pub fn brute_force_oracle(
    trajectories: &[RiskTrajectory],
    annotations: &[ClipAnnotation],
) -> Result<(f64, Option<f64>)> {
    if trajectories.len() != annotations.len() {
        return Err(EvalError::Alignment("length mismatch".into()));
    }
    let n_pos = annotations
        .iter()
        .filter(|a| a.accident_start_t.is_some())
        .count();
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }

    let mut qs = Vec::new();
    for tr in trajectories {
        for t in 0..tr.risk.rows() {
            qs.push(tr.risk.get(t, 0));
        }
    }

    let mut ops = Vec::with_capacity(qs.len());
    for &q in &qs {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut ttcs = Vec::new();
        for (tr, a) in trajectories.iter().zip(annotations) {
            let last = match a.accident_start_t {
                Some(acc) => acc,
                None => a.num_frames,
            };
            let mut first = None;
            for t in 1..=last {
                if tr.risk.get(t - 1, 0) >= q {
                    first = Some(t);
                    break;
                }
            }
            match (first, a.accident_start_t) {
                (Some(t), Some(acc)) => {
                    tp += 1;
                    ttcs.push((acc - t) as f64 / a.frame_rate_f);
                }
                (Some(_), None) => fp += 1,
                _ => {}
            }
        }
        ops.push(Op {
            precision: if tp + fp > 0 {
                tp as f64 / (tp + fp) as f64
            } else {
                1.0
            },
            recall: tp as f64 / n_pos as f64,
            ttcs,
        });
    }

    let mut levels: Vec<f64> = Vec::new();
    for op in &ops {
        if op.recall > 0.0 && !levels.contains(&op.recall) {
            levels.push(op.recall);
        }
    }
    if levels.is_empty() {
        return Ok((0.0, None));
    }

    let mut ap = 0.0;
    let mut ttc_total = 0.0;
    let mut ttc_count = 0usize;
    for &level in &levels {
        let mut best = 0.0f64;
        for op in &ops {
            if op.recall >= level && op.precision > best {
                best = op.precision;
            }
        }
        ap += best;

        let mut longest: Option<f64> = None;
        for op in &ops {
            if op.recall == level && !op.ttcs.is_empty() {
                let mean = op.ttcs.iter().sum::<f64>() / op.ttcs.len() as f64;
                if longest.map_or(true, |m| mean > m) {
                    longest = Some(mean);
                }
            }
        }
        if let Some(m) = longest {
            ttc_total += m;
            ttc_count += 1;
        }
    }
    let attc = (ttc_count > 0).then(|| ttc_total / ttc_count as f64);
    Ok((ap / levels.len() as f64, attc))
}
