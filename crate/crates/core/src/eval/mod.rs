//! Threshold-sweep evaluation: precision, recall and time-to-collision per
//! threshold, average precision, and ATTC.
//!
//! A clip is predicted positive at threshold `q` when its risk reaches `q`
//! (`r_t ≥ q`) at some searched frame. Positives are searched on frames
//! `1..=T` (accident start), negatives on every frame.

pub mod oracle;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClipAnnotation, RiskClass};
use crate::model::RiskTrajectory;

pub use oracle::brute_force_oracle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no positive clips; average precision is undefined")]
    NoPositives,
    #[error("ATTC undefined: no recall level has a true positive")]
    AttcUndefined,
    #[error("alignment mismatch: {0}")]
    Alignment(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("empty curve")]
    EmptyCurve,
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Every distinct score at which some clip's running maximum rises.
    /// Covers every achievable (precision, recall, TTC) triplet, and so
    /// every per-clip peak.
    AllObservedScores,
    /// `n` evenly spaced thresholds `i/(n−1)` on `[0, 1]`.
    FixedGrid(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_policy")]
    pub threshold_policy: ThresholdPolicy,
    /// Evaluate each class channel separately instead of one binary channel.
    #[serde(default)]
    pub per_class: bool,
}

fn default_policy() -> ThresholdPolicy {
    ThresholdPolicy::AllObservedScores
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold_policy: default_policy(),
            per_class: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if let ThresholdPolicy::FixedGrid(n) = self.threshold_policy {
            if n < 2 {
                return Err(EvalError::Config(format!(
                    "fixed grid needs n ≥ 2, got {n}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub q: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean TTC in seconds over true positives; `None` without any.
    pub mean_ttc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    TruePositive { ttc: f64 },
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

/// First 1-based frame with `r_t ≥ q`.
pub fn crossing_time(risk: &[f64], q: f64) -> Option<usize> {
    risk.iter().position(|&r| r >= q).map(|i| i + 1)
}

/// Whether a clip counts as positive for one evaluated channel, and where its
/// crossing search stops.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Target {
    positive: bool,
    accident: usize,
    frame_rate: f64,
}

impl Target {
    fn new(annotation: &ClipAnnotation, positive: bool) -> Self {
        Self {
            positive,
            accident: annotation.accident_start_t.unwrap_or(annotation.num_frames),
            frame_rate: annotation.frame_rate_f,
        }
    }

    fn searched<'a>(&self, risk: &'a [f64]) -> &'a [f64] {
        if self.positive {
            &risk[..self.accident.min(risk.len())]
        } else {
            risk
        }
    }

    fn outcome(&self, risk: &[f64], q: f64) -> Outcome {
        match (crossing_time(self.searched(risk), q), self.positive) {
            (Some(t), true) => Outcome::TruePositive {
                ttc: (self.accident - t) as f64 / self.frame_rate,
            },
            (None, true) => Outcome::FalseNegative,
            (Some(_), false) => Outcome::FalsePositive,
            (None, false) => Outcome::TrueNegative,
        }
    }
}

fn check_alignment(risk: &[f64], annotation: &ClipAnnotation) -> Result<()> {
    if risk.len() != annotation.num_frames {
        return Err(EvalError::Alignment(format!(
            "clip {}: {} risk values for {} frames",
            annotation.clip_id,
            risk.len(),
            annotation.num_frames
        )));
    }
    Ok(())
}

/// Outcome of one clip at threshold `q`, with the annotation's own label.
pub fn clip_outcome(risk: &[f64], annotation: &ClipAnnotation, q: f64) -> Result<Outcome> {
    check_alignment(risk, annotation)?;
    Ok(Target::new(annotation, annotation.is_positive()).outcome(risk, q))
}

/// Strictly increasing running maxima of the searched frames, with the
/// 1-based frame at which each is first reached. A threshold `q` is first
/// crossed at the frame of the smallest record value `≥ q`.
fn records(risk: &[f64]) -> Vec<(f64, usize)> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for (i, &r) in risk.iter().enumerate() {
        if out.last().map_or(true, |&(v, _)| r > v) {
            out.push((r, i + 1));
        }
    }
    out
}

fn thresholds(records: &[Vec<(f64, usize)>], policy: ThresholdPolicy) -> Vec<f64> {
    match policy {
        ThresholdPolicy::AllObservedScores => {
            let mut qs: Vec<f64> = records.iter().flatten().map(|&(v, _)| v).collect();
            qs.sort_by(f64::total_cmp);
            qs.dedup();
            qs
        }
        ThresholdPolicy::FixedGrid(n) => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn curve_for(
    channels: &[Vec<f64>],
    targets: &[Target],
    policy: ThresholdPolicy,
) -> Result<Vec<CurvePoint>> {
    let positives = targets.iter().filter(|t| t.positive).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let recs: Vec<Vec<(f64, usize)>> = channels
        .iter()
        .zip(targets)
        .map(|(r, t)| records(t.searched(r)))
        .collect();
    let qs = thresholds(&recs, policy);

    let negatives = targets.len() - positives;
    let points = qs
        .into_iter()
        .map(|q| {
            let (mut tp, mut fp, mut ttc_sum) = (0usize, 0usize, 0.0);
            for (rec, t) in recs.iter().zip(targets) {
                let j = rec.partition_point(|&(v, _)| v < q);
                let Some(&(_, frame)) = rec.get(j) else {
                    continue;
                };
                if t.positive {
                    tp += 1;
                    ttc_sum += (t.accident - frame) as f64 / t.frame_rate;
                } else {
                    fp += 1;
                }
            }
            CurvePoint {
                q,
                precision: if tp + fp == 0 {
                    1.0
                } else {
                    tp as f64 / (tp + fp) as f64
                },
                recall: tp as f64 / positives as f64,
                mean_ttc: (tp > 0).then(|| ttc_sum / tp as f64),
                tp,
                fp,
                fn_: positives - tp,
                tn: negatives - fp,
            }
        })
        .collect();
    Ok(points)
}

fn channel_of(trajectory: &RiskTrajectory, channel: usize) -> Result<Vec<f64>> {
    if channel >= trajectory.risk.cols() {
        return Err(EvalError::Alignment(format!(
            "clip {}: channel {channel} missing ({} channels)",
            trajectory.clip_id,
            trajectory.risk.cols()
        )));
    }
    Ok(trajectory.channel(channel))
}

fn aligned(trajectories: &[RiskTrajectory], annotations: &[ClipAnnotation]) -> Result<()> {
    if trajectories.len() != annotations.len() {
        return Err(EvalError::Alignment(format!(
            "{} trajectories for {} annotations",
            trajectories.len(),
            annotations.len()
        )));
    }
    for (tr, a) in trajectories.iter().zip(annotations) {
        if tr.clip_id != a.clip_id {
            return Err(EvalError::Alignment(format!(
                "trajectory {} paired with annotation {}",
                tr.clip_id, a.clip_id
            )));
        }
        if tr.num_frames() != a.num_frames {
            return Err(EvalError::Alignment(format!(
                "clip {}: {} risk rows for {} frames",
                a.clip_id,
                tr.num_frames(),
                a.num_frames
            )));
        }
    }
    Ok(())
}

/// Binary curve on channel 0 with the annotations' labels.
pub fn pr_ttc_curve(
    trajectories: &[RiskTrajectory],
    annotations: &[ClipAnnotation],
    config: &EvalConfig,
) -> Result<Vec<CurvePoint>> {
    config.validate()?;
    aligned(trajectories, annotations)?;
    let channels = trajectories
        .iter()
        .map(|t| channel_of(t, 0))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Target> = annotations
        .iter()
        .map(|a| Target::new(a, a.is_positive()))
        .collect();
    curve_for(&channels, &targets, config.threshold_policy)
}

/// Curve for class channel `class`: clips positive for that class against all
/// other clips.
pub fn class_curve(
    trajectories: &[RiskTrajectory],
    annotations: &[ClipAnnotation],
    class: usize,
    config: &EvalConfig,
) -> Result<Vec<CurvePoint>> {
    config.validate()?;
    aligned(trajectories, annotations)?;
    let channels = trajectories
        .iter()
        .map(|t| channel_of(t, class))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Target> = annotations
        .iter()
        .map(|a| Target::new(a, positive_for(a, class)))
        .collect();
    curve_for(&channels, &targets, config.threshold_policy)
}

fn positive_for(annotation: &ClipAnnotation, class: usize) -> bool {
    annotation.is_positive() && annotation.risk_class.map(RiskClass::index) == Some(class)
}

/// Distinct recall levels above zero, ascending.
fn recall_levels(curve: &[CurvePoint]) -> Vec<f64> {
    let mut levels: Vec<f64> = curve
        .iter()
        .map(|p| p.recall)
        .filter(|&r| r > 0.0)
        .collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels
}

/// Interpolated AP: the mean over distinct achievable recall levels of the
/// best precision at that recall or higher.
pub fn average_precision(curve: &[CurvePoint]) -> Result<f64> {
    if curve.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    let levels = recall_levels(curve);
    if levels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = levels
        .iter()
        .map(|&level| {
            curve
                .iter()
                .filter(|p| p.recall >= level)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / levels.len() as f64)
}

/// Mean over the AP recall levels of the mean TTC at each level.
///
/// A level's TTC is the largest mean TTC among the operating points with
/// exactly that recall, i.e. its lowest threshold.
pub fn attc(curve: &[CurvePoint]) -> Result<f64> {
    if curve.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    let values: Vec<f64> = recall_levels(curve)
        .into_iter()
        .filter_map(|level| {
            curve
                .iter()
                .filter(|p| p.recall == level)
                .filter_map(|p| p.mean_ttc)
                .reduce(f64::max)
        })
        .collect();
    if values.is_empty() {
        return Err(EvalError::AttcUndefined);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub num_positive: usize,
    pub ap: f64,
    pub attc: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Classes left out because they have no positive clip.
    pub omitted: Vec<String>,
    pub macro_ap: f64,
    /// Mean of the defined per-class ATTC values.
    pub macro_attc: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Name of class channel `c` for a model with `channels` outputs.
pub fn class_name(channels: usize, c: usize) -> String {
    if channels == 1 {
        "risk".to_string()
    } else {
        RiskClass::from_index(c).map_or_else(|| format!("class{c}"), |k| k.name().to_string())
    }
}

/// Per-class AP and ATTC with macro averages.
///
/// With one channel, or with `per_class` off, this is a single binary report
/// on the per-frame maximum over channels. Otherwise channel `c` is scored
/// with class-`c` positives against every other clip.
pub fn per_class_report(
    trajectories: &[RiskTrajectory],
    annotations: &[ClipAnnotation],
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    aligned(trajectories, annotations)?;
    let channels = trajectories.first().map_or(1, |t| t.risk.cols());
    if channels == 1 || !config.per_class {
        let scores: Vec<Vec<f64>> = trajectories
            .iter()
            .map(|t| {
                (0..t.risk.rows())
                    .map(|r| {
                        t.risk
                            .row(r)
                            .iter()
                            .copied()
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            })
            .collect();
        let targets: Vec<Target> = annotations
            .iter()
            .map(|a| Target::new(a, a.is_positive()))
            .collect();
        let curve = curve_for(&scores, &targets, config.threshold_policy)?;
        let class = class_report(
            "risk".to_string(),
            targets.iter().filter(|t| t.positive).count(),
            curve,
        )?;
        return Ok(EvalReport {
            macro_ap: class.ap,
            macro_attc: class.attc,
            classes: vec![class],
            omitted: Vec::new(),
        });
    }
    let mut classes = Vec::new();
    let mut omitted = Vec::new();
    for c in 0..channels {
        match class_curve(trajectories, annotations, c, config) {
            Ok(curve) => {
                let positives = annotations.iter().filter(|a| positive_for(a, c)).count();
                classes.push(class_report(class_name(channels, c), positives, curve)?);
            }
            Err(EvalError::NoPositives) => omitted.push(class_name(channels, c)),
            Err(e) => return Err(e),
        }
    }
    if classes.is_empty() {
        return Err(EvalError::NoPositives);
    }
    let macro_ap = classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64;
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.attc).collect();
    let macro_attc =
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EvalReport {
        classes,
        omitted,
        macro_ap,
        macro_attc,
    })
}

fn class_report(class: String, num_positive: usize, curve: Vec<CurvePoint>) -> Result<ClassReport> {
    Ok(ClassReport {
        class,
        num_positive,
        ap: average_precision(&curve)?,
        attc: match attc(&curve) {
            Ok(v) => Some(v),
            Err(EvalError::AttcUndefined) => None,
            Err(e) => return Err(e),
        },
        curve,
    })
}

/// Writes `q,precision,recall,mean_ttc`; `mean_ttc` is empty without true
/// positives.
pub fn write_curve_csv<W: Write>(mut out: W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "q,precision,recall,mean_ttc")?;
    for p in curve {
        let ttc = p.mean_ttc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", p.q, p.precision, p.recall, ttc)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn ann(id: &str, frames: usize, accident: Option<usize>) -> ClipAnnotation {
        ClipAnnotation {
            clip_id: id.to_string(),
            label: if accident.is_some() {
                Label::Positive
            } else {
                Label::Negative
            },
            accident_start_t: accident,
            num_frames: frames,
            risk_class: None,
            frame_rate_f: 20.0,
        }
    }

    fn traj(id: &str, risk: &[f64]) -> RiskTrajectory {
        RiskTrajectory {
            clip_id: id.to_string(),
            risk: Tensor::column_vector(risk.to_vec()),
        }
    }

    fn three_clips() -> (Vec<RiskTrajectory>, Vec<ClipAnnotation>) {
        (
            vec![
                traj("p1", &[0.2, 0.9, 0.5]),
                traj("p2", &[0.1, 0.3, 0.4]),
                traj("n1", &[0.6, 0.2, 0.1]),
            ],
            vec![
                ann("p1", 3, Some(3)),
                ann("p2", 3, Some(3)),
                ann("n1", 3, None),
            ],
        )
    }

    #[test]
    fn crossing_time_examples() {
        assert_eq!(crossing_time(&[0.1, 0.9, 0.2], 0.8), Some(2));
        assert_eq!(crossing_time(&[0.1, 0.9, 0.2], 0.0), Some(1));
        assert_eq!(crossing_time(&[1.0 - 1e-7, 0.5], 1.0 + 1e-9), None);
    }

    #[test]
    fn clip_outcome_examples() {
        let mut r = vec![0.0; 100];
        r[59] = 0.8;
        let a = ann("p", 100, Some(100));
        assert_eq!(
            clip_outcome(&r, &a, 0.5).unwrap(),
            Outcome::TruePositive { ttc: 2.0 }
        );
        assert_eq!(
            clip_outcome(&[0.1, 0.2], &ann("n", 2, None), 0.5).unwrap(),
            Outcome::TrueNegative
        );
        assert_eq!(
            clip_outcome(&[0.1, 0.2, 0.7], &ann("p", 3, Some(3)), 0.7).unwrap(),
            Outcome::TruePositive { ttc: 0.0 }
        );
        assert!(matches!(
            clip_outcome(&[0.1], &ann("p", 3, Some(3)), 0.7),
            Err(EvalError::Alignment(_))
        ));
    }

    #[test]
    fn frames_after_the_accident_are_not_searched_for_positives() {
        let a = ann("p", 4, Some(2));
        assert_eq!(
            clip_outcome(&[0.1, 0.2, 0.9, 0.9], &a, 0.5).unwrap(),
            Outcome::FalseNegative
        );
    }

    #[test]
    fn three_clip_operating_points() {
        let (t, a) = three_clips();
        let curve = pr_ttc_curve(&t, &a, &EvalConfig::default()).unwrap();
        let at = |q: f64| *curve.iter().find(|p| p.q == q).unwrap();
        let qs: Vec<f64> = curve.iter().map(|p| p.q).collect();
        assert_eq!(qs, [0.1, 0.2, 0.3, 0.4, 0.6, 0.9]);
        assert_eq!((at(0.9).precision, at(0.9).recall), (1.0, 0.5));
        assert_eq!((at(0.6).precision, at(0.6).recall), (0.5, 0.5));
        assert!((at(0.4).precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(at(0.4).recall, 1.0);
        let ap = average_precision(&curve).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn three_clip_attc_by_hand() {
        // Recall 0.5 (q = .6, .9): p1 crosses at frame 2, ttc (3−2)/20.
        // Recall 1, lowest q = .1: both positives cross at frame 1, ttc 0.1.
        let (t, a) = three_clips();
        let curve = pr_ttc_curve(&t, &a, &EvalConfig::default()).unwrap();
        let at = |q: f64| curve.iter().find(|p| p.q == q).unwrap().mean_ttc;
        assert_eq!(at(0.4), Some(0.025));
        let expected = (0.05 + 0.1) / 2.0;
        assert!((attc(&curve).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn single_positive_step_function() {
        let t = vec![traj("p", &[0.3, 0.7, 0.5])];
        let a = vec![ann("p", 3, Some(3))];
        let curve = pr_ttc_curve(
            &t,
            &a,
            &EvalConfig {
                threshold_policy: ThresholdPolicy::FixedGrid(11),
                per_class: false,
            },
        )
        .unwrap();
        for p in &curve {
            assert_eq!(p.recall, if p.q <= 0.7 { 1.0 } else { 0.0 }, "q={}", p.q);
        }
    }

    #[test]
    fn zero_scored_negatives_keep_precision_one() {
        let t = vec![traj("p", &[0.2, 0.8]), traj("n", &[0.0, 0.0])];
        let a = vec![ann("p", 2, Some(2)), ann("n", 2, None)];
        let curve = pr_ttc_curve(&t, &a, &EvalConfig::default()).unwrap();
        // q = 0 makes every clip cross; every recall level still has a
        // precision-one point at or above it.
        for level in recall_levels(&curve) {
            assert!(curve
                .iter()
                .any(|p| p.recall >= level && p.precision == 1.0));
        }
        assert_eq!(average_precision(&curve).unwrap(), 1.0);
    }

    #[test]
    fn perfect_separation_and_constant_ttc() {
        let t = vec![
            traj("p1", &[0.1, 0.9, 0.9]),
            traj("p2", &[0.2, 0.8, 0.1]),
            traj("n", &[0.1, 0.1, 0.1]),
        ];
        let a = vec![
            ann("p1", 3, Some(3)),
            ann("p2", 3, Some(3)),
            ann("n", 3, None),
        ];
        let curve = pr_ttc_curve(&t, &a, &EvalConfig::default()).unwrap();
        assert_eq!(average_precision(&curve).unwrap(), 1.0);
        // Recall 1/2 at q = .9 (p1 at frame 2); recall 1 down to q = .1 where
        // every clip crosses at frame 1.
        assert!((attc(&curve).unwrap() - (0.05 + 0.1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn no_positives_and_no_true_positives_are_errors() {
        let t = vec![traj("n", &[0.3])];
        let a = vec![ann("n", 1, None)];
        assert_eq!(
            pr_ttc_curve(&t, &a, &EvalConfig::default()),
            Err(EvalError::NoPositives)
        );
        let flat = [CurvePoint {
            q: 0.5,
            precision: 1.0,
            recall: 0.0,
            mean_ttc: None,
            tp: 0,
            fp: 0,
            fn_: 1,
            tn: 0,
        }];
        assert_eq!(attc(&flat), Err(EvalError::AttcUndefined));
        assert_eq!(average_precision(&[]), Err(EvalError::EmptyCurve));
    }

    #[test]
    fn grid_needs_two_points() {
        let (t, a) = three_clips();
        let cfg = EvalConfig {
            threshold_policy: ThresholdPolicy::FixedGrid(1),
            per_class: false,
        };
        assert!(matches!(
            pr_ttc_curve(&t, &a, &cfg),
            Err(EvalError::Config(_))
        ));
    }

    #[test]
    fn binary_report_equals_binary_curve() {
        let (t, a) = three_clips();
        let report = per_class_report(&t, &a, &EvalConfig::default()).unwrap();
        assert_eq!(report.classes.len(), 1);
        assert_eq!(report.classes[0].class, "risk");
        assert!((report.macro_ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(report.macro_attc, report.classes[0].attc);
        assert_eq!(report.to_json(), report.to_json());
    }

    #[test]
    fn multi_class_report_omits_empty_classes() {
        let mut a = vec![
            ann("a", 2, Some(2)),
            ann("b", 2, Some(2)),
            ann("n", 2, None),
        ];
        a[0].risk_class = Some(RiskClass::Cyclist);
        a[1].risk_class = Some(RiskClass::Vehicle);
        let t: Vec<RiskTrajectory> = [
            ("a", [[0.9, 0.1, 0.1], [0.9, 0.1, 0.2]]),
            ("b", [[0.1, 0.1, 0.3], [0.2, 0.5, 0.8]]),
            ("n", [[0.2, 0.4, 0.1], [0.1, 0.1, 0.4]]),
        ]
        .iter()
        .map(|(id, rows)| RiskTrajectory {
            clip_id: id.to_string(),
            risk: Tensor::from_rows(rows),
        })
        .collect();
        let cfg = EvalConfig {
            threshold_policy: ThresholdPolicy::AllObservedScores,
            per_class: true,
        };
        let report = per_class_report(&t, &a, &cfg).unwrap();
        let names: Vec<_> = report.classes.iter().map(|c| c.class.as_str()).collect();
        assert_eq!(names, ["cyclist", "vehicle"]);
        assert_eq!(report.omitted, ["pedestrian"]);
        assert_eq!(report.classes[0].ap, 1.0);
        let mean = (report.classes[0].ap + report.classes[1].ap) / 2.0;
        assert_eq!(report.macro_ap, mean);
    }

    #[test]
    fn multi_channel_binary_report_uses_channel_max() {
        let a = vec![ann("p", 2, Some(2)), ann("n", 2, None)];
        let t = vec![
            RiskTrajectory {
                clip_id: "p".into(),
                risk: Tensor::from_rows(&[[0.1, 0.7], [0.2, 0.1]]),
            },
            RiskTrajectory {
                clip_id: "n".into(),
                risk: Tensor::from_rows(&[[0.5, 0.3], [0.1, 0.6]]),
            },
        ];
        let report = per_class_report(&t, &a, &EvalConfig::default()).unwrap();
        assert_eq!(report.classes.len(), 1);
        assert_eq!(report.macro_ap, 1.0);
        // p crosses 0.7 at frame 1 on the max channel; recall 1 is the only level.
        assert_eq!(report.macro_attc, Some(0.05));
    }

    #[test]
    fn curve_csv_format() {
        let (t, a) = three_clips();
        let curve = pr_ttc_curve(&t, &a, &EvalConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &curve).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "q,precision,recall,mean_ttc");
        assert_eq!(lines[6], "0.9,1,0.5,0.05");
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Option<usize>>)> {
        (1usize..=12, 1usize..=10).prop_flat_map(|(n, frames)| {
            (
                proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, frames), n),
                proptest::collection::vec(proptest::option::of(1..=frames), n),
            )
        })
    }

    fn build(
        scores: &[Vec<f64>],
        accidents: &[Option<usize>],
    ) -> (Vec<RiskTrajectory>, Vec<ClipAnnotation>) {
        let frames = scores[0].len();
        scores
            .iter()
            .zip(accidents)
            .enumerate()
            .map(|(i, (s, &acc))| {
                (
                    traj(&format!("c{i}"), s),
                    ann(&format!("c{i}"), frames, acc),
                )
            })
            .unzip()
    }

    proptest! {
        #[test]
        fn raising_q_never_increases_recall_or_ttc((scores, acc) in instance()) {
            prop_assume!(acc.iter().any(Option::is_some));
            let (t, a) = build(&scores, &acc);
            let cfg = EvalConfig { threshold_policy: ThresholdPolicy::FixedGrid(21), per_class: false };
            let curve = pr_ttc_curve(&t, &a, &cfg).unwrap();
            for w in curve.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
            }
            for (r, an) in scores.iter().zip(&a) {
                let mut last = f64::INFINITY;
                for p in &curve {
                    match clip_outcome(r, an, p.q).unwrap() {
                        Outcome::TruePositive { ttc } => {
                            prop_assert!(ttc <= last && ttc >= 0.0);
                            last = ttc;
                        }
                        _ => last = -1.0,
                    }
                }
            }
        }

        #[test]
        fn counts_are_consistent((scores, acc) in instance()) {
            prop_assume!(acc.iter().any(Option::is_some));
            let (t, a) = build(&scores, &acc);
            let positives = acc.iter().filter(|x| x.is_some()).count();
            for p in pr_ttc_curve(&t, &a, &EvalConfig::default()).unwrap() {
                prop_assert_eq!(p.tp + p.fn_, positives);
                prop_assert_eq!(p.tp + p.fp + p.fn_ + p.tn, scores.len());
                prop_assert!((0.0..=1.0).contains(&p.precision));
            }
        }

        #[test]
        fn agrees_with_oracle((scores, acc) in instance()) {
            prop_assume!(acc.iter().any(Option::is_some));
            let (t, a) = build(&scores, &acc);
            let curve = pr_ttc_curve(&t, &a, &EvalConfig::default()).unwrap();
            let (ap, oracle_attc) = brute_force_oracle(&t, &a).unwrap();
            prop_assert!((average_precision(&curve).unwrap() - ap).abs() < 1e-9);
            match (attc(&curve), oracle_attc) {
                (Ok(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                (Err(EvalError::AttcUndefined), None) => {}
                (x, y) => prop_assert!(false, "attc {:?} vs oracle {:?}", x, y),
            }
        }

        #[test]
        fn cubing_scores_changes_nothing((scores, acc) in instance()) {
            prop_assume!(acc.iter().any(Option::is_some));
            let (t, a) = build(&scores, &acc);
            let cubed: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|x| x * x * x).collect()).collect();
            let (tc, _) = build(&cubed, &acc);
            let c1 = pr_ttc_curve(&t, &a, &EvalConfig::default()).unwrap();
            let c2 = pr_ttc_curve(&tc, &a, &EvalConfig::default()).unwrap();
            prop_assert_eq!(average_precision(&c1).unwrap(), average_precision(&c2).unwrap());
            prop_assert_eq!(attc(&c1).ok(), attc(&c2).ok());
        }
    }
}
