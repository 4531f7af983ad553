//! Penalty-weighted anticipation losses.
//!
//! A positive clip with accident frame `T` contributes
//! `Σ_{t=1..T} −α(d) · ln r_t` with `d = T − t` frames, and a negative clip
//! `Σ_t −ln(1 − r_t)`. The weight `α(d)` depends on the variant:
//!
//! | variant | `α(d)` |
//! |---------|--------|
//! | EL      | `exp(−d)` |
//! | LEA     | `exp(−max(0, d − λ(e−1)))` |
//! | AdaLEA  | `exp(−max(0, d − F·Φ(e−1) − γ))` |
//!
//! where `e` is the 1-based epoch, `F` the frame rate and `Φ(e−1)` the
//! validation ATTC (seconds) measured after the previous epoch.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClipAnnotation;
use crate::diff::{DiffError, Tape, Var};
use crate::tensor::Tensor;

/// Lower/upper clamp applied to risk rates before taking logarithms.
pub const RISK_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss argument `{name}`: {value}")]
    Precondition { name: &'static str, value: f64 },
    #[error("accident frame {accident} outside trajectory of {frames} frames")]
    AccidentOutOfRange { accident: usize, frames: usize },
    #[error("alignment mismatch: {0}")]
    Alignment(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "EL")]
    El,
    #[serde(rename = "LEA")]
    Lea,
    #[serde(rename = "AdaLEA")]
    AdaLea,
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::El => "EL",
            LossVariant::Lea => "LEA",
            LossVariant::AdaLea => "AdaLEA",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Frames per epoch by which the LEA frontier advances.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Extra AdaLEA frontier margin, in frames.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_f: f64,
}

fn default_lambda() -> f64 {
    3.0
}

fn default_gamma() -> f64 {
    5.0
}

fn default_frame_rate() -> f64 {
    20.0
}

impl LossConfig {
    pub fn new(variant: LossVariant) -> Self {
        Self {
            variant,
            lambda: default_lambda(),
            gamma: default_gamma(),
            frame_rate_f: default_frame_rate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check("lambda", self.lambda, self.lambda >= 0.0)?;
        check("gamma", self.gamma, self.gamma >= 0.0)?;
        check("frame_rate_f", self.frame_rate_f, self.frame_rate_f > 0.0)
    }

    /// Penalty weight for a frame `d` frames before the accident.
    pub fn weight(&self, d: f64, ctx: &EpochContext) -> Result<f64> {
        match self.variant {
            LossVariant::El => el_weight(d),
            LossVariant::Lea => lea_weight(d, ctx.epoch, self.lambda),
            LossVariant::AdaLea => {
                adalea_weight(d, ctx.epoch, self.frame_rate_f, ctx.phi_prev, self.gamma)
            }
        }
    }

    /// Weights for frames `t = 1..=accident`, i.e. `d = accident − t`.
    pub fn positive_weights(&self, accident: usize, ctx: &EpochContext) -> Result<Vec<f64>> {
        ctx.validate()?;
        (1..=accident)
            .map(|t| self.weight((accident - t) as f64, ctx))
            .collect()
    }
}

/// Training progress seen by the loss: the 1-based epoch and the previous
/// epoch's validation ATTC in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochContext {
    pub epoch: u32,
    pub phi_prev: f64,
}

impl EpochContext {
    pub fn new(epoch: u32, phi_prev: f64) -> Self {
        Self { epoch, phi_prev }
    }

    pub fn validate(&self) -> Result<()> {
        check("epoch", f64::from(self.epoch), self.epoch >= 1)?;
        check("phi_prev", self.phi_prev, self.phi_prev >= 0.0)
    }
}

fn check(name: &'static str, value: f64, ok: bool) -> Result<()> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(LossError::Precondition { name, value })
    }
}

fn check_d(d: f64) -> Result<()> {
    // d may be +inf (limit case) but never negative or NaN.
    if d >= 0.0 {
        Ok(())
    } else {
        Err(LossError::Precondition {
            name: "d",
            value: d,
        })
    }
}

#[inline]
fn saturating_weight(excess: f64) -> f64 {
    (-excess.max(0.0)).exp()
}

/// Static exponential weight `exp(−d)`.
pub fn el_weight(d: f64) -> Result<f64> {
    check_d(d)?;
    Ok(saturating_weight(d))
}

/// Weight whose saturation frontier advances `lambda` frames per epoch.
pub fn lea_weight(d: f64, epoch: u32, lambda: f64) -> Result<f64> {
    check_d(d)?;
    check("epoch", f64::from(epoch), epoch >= 1)?;
    check("lambda", lambda, lambda >= 0.0)?;
    Ok(saturating_weight(d - lambda * f64::from(epoch - 1)))
}

/// Weight saturating to 1 for `d ≤ frame_rate·phi_prev + gamma`.
pub fn adalea_weight(
    d: f64,
    epoch: u32,
    frame_rate: f64,
    phi_prev: f64,
    gamma: f64,
) -> Result<f64> {
    check_d(d)?;
    check("epoch", f64::from(epoch), epoch >= 1)?;
    check("frame_rate_f", frame_rate, frame_rate > 0.0)?;
    check("phi_prev", phi_prev, phi_prev >= 0.0)?;
    check("gamma", gamma, gamma >= 0.0)?;
    Ok(saturating_weight(d - frame_rate * phi_prev - gamma))
}

fn clamp_risk(r: f64) -> f64 {
    r.clamp(RISK_EPS, 1.0 - RISK_EPS)
}

/// `Σ_{t=1..T} −α(T−t) ln r_t` over the first `accident` frames of `risk`.
pub fn positive_clip_loss(
    risk: &[f64],
    accident: usize,
    config: &LossConfig,
    ctx: &EpochContext,
) -> Result<f64> {
    if accident == 0 || accident > risk.len() {
        return Err(LossError::AccidentOutOfRange {
            accident,
            frames: risk.len(),
        });
    }
    let weights = config.positive_weights(accident, ctx)?;
    Ok(weights
        .iter()
        .zip(risk)
        .map(|(a, &r)| -a * clamp_risk(r).ln())
        .sum())
}

/// `Σ_t −ln(1 − r_t)` over every frame.
pub fn negative_clip_loss(risk: &[f64]) -> f64 {
    risk.iter().map(|&r| -(1.0 - clamp_risk(r)).ln()).sum()
}

/// Channel index on which a clip counts as positive, if any.
///
/// Single-channel models treat every positive as positive. Multi-channel
/// models use the clip's risk class.
pub fn positive_channel(annotation: &ClipAnnotation, channels: usize) -> Result<Option<usize>> {
    if !annotation.is_positive() {
        return Ok(None);
    }
    if channels == 1 {
        return Ok(Some(0));
    }
    let class = annotation.risk_class.ok_or_else(|| {
        LossError::Alignment(format!(
            "positive clip {} has no risk_class but the model has {channels} channels",
            annotation.clip_id
        ))
    })?;
    if class.index() >= channels {
        return Err(LossError::Alignment(format!(
            "clip {} has class {class} beyond {channels} channels",
            annotation.clip_id
        )));
    }
    Ok(Some(class.index()))
}

fn accident_frame(annotation: &ClipAnnotation) -> usize {
    annotation.accident_start_t.unwrap_or(annotation.num_frames)
}

/// Sum over channels of one clip's losses for a `frames × channels` risk
/// matrix.
pub fn clip_loss(
    risk: &Tensor,
    annotation: &ClipAnnotation,
    config: &LossConfig,
    ctx: &EpochContext,
) -> Result<f64> {
    if risk.rows() != annotation.num_frames {
        return Err(LossError::Alignment(format!(
            "clip {}: {} risk rows for {} frames",
            annotation.clip_id,
            risk.rows(),
            annotation.num_frames
        )));
    }
    let pos = positive_channel(annotation, risk.cols())?;
    let mut total = 0.0;
    for c in 0..risk.cols() {
        let channel: Vec<f64> = (0..risk.rows()).map(|t| risk.get(t, c)).collect();
        total += if pos == Some(c) {
            positive_clip_loss(&channel, accident_frame(annotation), config, ctx)?
        } else {
            negative_clip_loss(&channel)
        };
    }
    Ok(total)
}

/// Mean over clips of [`clip_loss`].
pub fn batch_loss(
    risks: &[Tensor],
    annotations: &[ClipAnnotation],
    config: &LossConfig,
    ctx: &EpochContext,
) -> Result<f64> {
    if risks.len() != annotations.len() || risks.is_empty() {
        return Err(LossError::Alignment(format!(
            "{} trajectories for {} annotations",
            risks.len(),
            annotations.len()
        )));
    }
    let mut total = 0.0;
    for (r, a) in risks.iter().zip(annotations) {
        total += clip_loss(r, a, config, ctx)?;
    }
    Ok(total / risks.len() as f64)
}

/// Records [`clip_loss`] on a tape for a `frames × channels` risk variable.
pub fn clip_loss_on_tape(
    tape: &mut Tape,
    risk: Var,
    annotation: &ClipAnnotation,
    config: &LossConfig,
    ctx: &EpochContext,
) -> Result<Var> {
    let (frames, channels) = tape.value(risk).shape();
    if frames != annotation.num_frames {
        return Err(LossError::Alignment(format!(
            "clip {}: {frames} risk rows for {} frames",
            annotation.clip_id, annotation.num_frames
        )));
    }
    let pos = positive_channel(annotation, channels)?;
    let clamped = tape.clamp(risk, RISK_EPS, 1.0 - RISK_EPS)?;

    // Per-entry coefficients for ln r and ln(1 − r).
    let mut pos_coef = Tensor::zeros(frames, channels);
    let mut neg_coef = Tensor::zeros(frames, channels);
    for c in 0..channels {
        if pos == Some(c) {
            let accident = accident_frame(annotation);
            if accident == 0 || accident > frames {
                return Err(LossError::AccidentOutOfRange { accident, frames });
            }
            for (t, a) in config
                .positive_weights(accident, ctx)?
                .into_iter()
                .enumerate()
            {
                pos_coef.set(t, c, -a);
            }
        } else {
            for t in 0..frames {
                neg_coef.set(t, c, -1.0);
            }
        }
    }

    let mut terms = Vec::new();
    if pos.is_some() {
        let ln_r = tape.ln(clamped)?;
        let coef = tape.leaf(pos_coef)?;
        let weighted = tape.mul(coef, ln_r)?;
        terms.push(tape.sum(weighted)?);
    }
    if pos.is_none() || channels > 1 {
        let neg = tape.scale(clamped, -1.0)?;
        let one_minus = tape.offset(neg, 1.0)?;
        let ln_q = tape.ln(one_minus)?;
        let coef = tape.leaf(neg_coef)?;
        let weighted = tape.mul(coef, ln_q)?;
        terms.push(tape.sum(weighted)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Records [`batch_loss`] on a tape.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    risks: &[Var],
    annotations: &[ClipAnnotation],
    config: &LossConfig,
    ctx: &EpochContext,
) -> Result<Var> {
    if risks.len() != annotations.len() || risks.is_empty() {
        return Err(LossError::Alignment(format!(
            "{} trajectories for {} annotations",
            risks.len(),
            annotations.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&r, a) in risks.iter().zip(annotations) {
        let l = clip_loss_on_tape(tape, r, a, config, ctx)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / risks.len() as f64)?)
}

/// One row of a penalty-weight schedule dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub epoch: u32,
    pub t: usize,
    pub d: usize,
    pub alpha: f64,
}

/// Weights for every epoch `1..=epochs` and frame `1..=accident`.
///
/// `phi_sequence[e−1]` is the Φ used during epoch `e`; missing trailing
/// entries repeat the last one (or 0 when empty). Only AdaLEA reads it.
pub fn dump_schedule(
    config: &LossConfig,
    epochs: u32,
    accident: usize,
    phi_sequence: &[f64],
) -> Result<Vec<ScheduleRow>> {
    config.validate()?;
    let mut rows = Vec::with_capacity(epochs as usize * accident);
    for e in 1..=epochs {
        let phi = phi_sequence
            .get(e as usize - 1)
            .or(phi_sequence.last())
            .copied()
            .unwrap_or(0.0);
        let ctx = EpochContext::new(e, phi);
        for (i, alpha) in config
            .positive_weights(accident, &ctx)?
            .into_iter()
            .enumerate()
        {
            let t = i + 1;
            rows.push(ScheduleRow {
                epoch: e,
                t,
                d: accident - t,
                alpha,
            });
        }
    }
    Ok(rows)
}

/// Writes schedule rows as `epoch,t,d,alpha` CSV.
pub fn write_schedule_csv<W: Write>(mut out: W, rows: &[ScheduleRow]) -> std::io::Result<()> {
    writeln!(out, "epoch,t,d,alpha")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epoch, r.t, r.d, r.alpha)?;
    }
    Ok(())
}
