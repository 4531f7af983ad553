//! The anticipation network.
//!
//! Per frame `t`: attend over the local features using `h_{t−1}`, concatenate
//! the context with the global feature, advance the recurrent layer (QRNN or
//! LSTM), and map `h_t` through an affine layer and a sigmoid to one risk
//! rate per class.
//!
//! The attention is a single-layer additive stand-in for dynamic soft
//! attention; see [`attention`].

pub mod attention;
pub mod lstm;
pub mod qrnn;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FeatureDims, FeatureSequence};
use crate::diff::{DiffError, Gradients, Tape, Var};
use crate::tensor::Tensor;

pub use attention::{attend_locals, AttentionParams, AttentionVars};
pub use lstm::{lstm_forward, lstm_forward_values, lstm_step, LstmParams, LstmVars};
pub use qrnn::{qrnn_forward, qrnn_forward_values, qrnn_step, QrnnParams, QrnnVars};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("clip {clip_id}: feature dims {got:?} do not match model dims {expected:?}")]
    Dims {
        clip_id: String,
        expected: FeatureDims,
        got: FeatureDims,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentKind {
    Qrnn,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_kind")]
    pub recurrent_kind: RecurrentKind,
    /// QRNN convolution width `k`.
    #[serde(default = "default_kernel_width")]
    pub kernel_width: usize,
    /// Hidden size `m`; also the attention projection width.
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    /// 1 for binary risk anticipation, otherwise one channel per class.
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Feature dimensions; 0 means "take from the dataset".
    #[serde(default)]
    pub d_g: usize,
    #[serde(default)]
    pub d_l: usize,
    #[serde(default)]
    pub num_locals: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_kind() -> RecurrentKind {
    RecurrentKind::Qrnn
}

fn default_kernel_width() -> usize {
    2
}

fn default_hidden() -> usize {
    16
}

fn default_classes() -> usize {
    1
}

impl ModelConfig {
    pub fn new(dims: FeatureDims) -> Self {
        Self {
            recurrent_kind: default_kind(),
            kernel_width: default_kernel_width(),
            hidden_size: default_hidden(),
            num_classes: default_classes(),
            d_g: dims.global_dim,
            d_l: dims.local_dim,
            num_locals: dims.num_locals,
            seed: 0,
        }
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            global_dim: self.d_g,
            num_locals: self.num_locals,
            local_dim: self.d_l,
        }
    }

    /// Fills unset (zero) feature dimensions from `dims` and rejects set ones
    /// that disagree.
    pub fn resolved(&self, dims: FeatureDims) -> Result<Self> {
        let mut out = self.clone();
        for (field, slot, value) in [
            ("d_g", &mut out.d_g, dims.global_dim),
            ("d_l", &mut out.d_l, dims.local_dim),
            ("num_locals", &mut out.num_locals, dims.num_locals),
        ] {
            if *slot == 0 {
                *slot = value;
            } else if *slot != value {
                return Err(ModelError::Config {
                    field,
                    reason: format!("configured {} but the data has {value}", *slot),
                });
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// Width of the fused per-frame input.
    pub fn input_dim(&self) -> usize {
        self.d_g + self.d_l
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(ModelError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.num_classes < 1 {
            return bad("num_classes", "must be at least 1");
        }
        if self.kernel_width < 1 {
            return bad("kernel_width", "must be at least 1");
        }
        if self.hidden_size < 1 {
            return bad("hidden_size", "must be at least 1");
        }
        if self.input_dim() == 0 {
            return bad("d_g", "d_g + d_l must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecurrentParams {
    Qrnn(QrnnParams),
    Lstm(LstmParams),
}

#[derive(Debug, Clone, Copy)]
pub enum RecurrentVars {
    Qrnn(QrnnVars),
    Lstm(LstmVars),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `m × C`.
    pub weight: Tensor,
    /// `1 × C`.
    pub bias: Tensor,
}

/// Complete set of trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub attention: AttentionParams,
    pub recurrent: RecurrentParams,
    pub head: HeadParams,
}

/// A model's parameters registered as leaves on one tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub attention: AttentionVars,
    pub recurrent: RecurrentVars,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ModelVars {
    /// Parameter variables in [`Model::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.attention.all().to_vec();
        match &self.recurrent {
            RecurrentVars::Qrnn(q) => out.extend(q.all()),
            RecurrentVars::Lstm(l) => out.extend(l.all()),
        }
        out.push(self.head_weight);
        out.push(self.head_bias);
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::new(rows, cols, data).expect("sized")
}

/// Initializes every weight from `U(−1/√fan_in, 1/√fan_in)` with zero biases,
/// except forget-gate biases which start at +1.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, c, dl) = (
        config.input_dim(),
        config.hidden_size,
        config.num_classes,
        config.d_l,
    );
    let attention = AttentionParams {
        w_local: uniform(&mut rng, dl, m, dl),
        w_hidden: uniform(&mut rng, m, m, m),
        bias: Tensor::zeros(1, m),
        score: uniform(&mut rng, m, 1, m),
    };
    let recurrent = match config.recurrent_kind {
        RecurrentKind::Qrnn => {
            let k = config.kernel_width;
            let fan = k * n;
            RecurrentParams::Qrnn(QrnnParams {
                kernel_width: k,
                w_z: uniform(&mut rng, fan, m, fan),
                w_f: uniform(&mut rng, fan, m, fan),
                w_i: uniform(&mut rng, fan, m, fan),
                w_o: uniform(&mut rng, fan, m, fan),
                b_z: Tensor::zeros(1, m),
                b_f: Tensor::filled(1, m, 1.0),
                b_i: Tensor::zeros(1, m),
                b_o: Tensor::zeros(1, m),
            })
        }
        RecurrentKind::Lstm => {
            let mut b = Tensor::zeros(1, 4 * m);
            for j in m..2 * m {
                b.set(0, j, 1.0);
            }
            RecurrentParams::Lstm(LstmParams {
                w_x: uniform(&mut rng, n, 4 * m, n),
                w_h: uniform(&mut rng, m, 4 * m, m),
                b,
            })
        }
    };
    let head = HeadParams {
        weight: uniform(&mut rng, m, c, m),
        bias: Tensor::zeros(1, c),
    };
    Ok(Model {
        config: config.clone(),
        attention,
        recurrent,
        head,
    })
}

impl Model {
    /// Initializes from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        init_params(config, config.seed)
    }

    /// Parameter tensors with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("attention.w_local", &self.attention.w_local),
            ("attention.w_hidden", &self.attention.w_hidden),
            ("attention.bias", &self.attention.bias),
            ("attention.score", &self.attention.score),
        ];
        match &self.recurrent {
            RecurrentParams::Qrnn(q) => out.extend(q.named()),
            RecurrentParams::Lstm(l) => out.extend(l.named()),
        }
        out.push(("head.weight", &self.head.weight));
        out.push(("head.bias", &self.head.bias));
        out
    }

    /// Mutable parameter tensors in [`Model::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.attention.w_local,
            &mut self.attention.w_hidden,
            &mut self.attention.bias,
            &mut self.attention.score,
        ];
        match &mut self.recurrent {
            RecurrentParams::Qrnn(q) => out.extend(q.tensors_mut()),
            RecurrentParams::Lstm(l) => out.extend(l.tensors_mut()),
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<ModelVars> {
        let attention = self.attention.bind(tape)?;
        let recurrent = match &self.recurrent {
            RecurrentParams::Qrnn(q) => RecurrentVars::Qrnn(q.bind(tape)?),
            RecurrentParams::Lstm(l) => RecurrentVars::Lstm(l.bind(tape)?),
        };
        Ok(ModelVars {
            attention,
            recurrent,
            head_weight: tape.leaf(self.head.weight.clone())?,
            head_bias: tape.leaf(self.head.bias.clone())?,
        })
    }

    /// Wraps parameter variables already on a tape (in [`Model::named_params`]
    /// order) into the structured form used by [`forward_on_tape`].
    pub fn vars_from(&self, vars: &[Var]) -> Option<ModelVars> {
        let recurrent_len = match &self.recurrent {
            RecurrentParams::Qrnn(_) => 8,
            RecurrentParams::Lstm(_) => 3,
        };
        if vars.len() != 4 + recurrent_len + 2 {
            return None;
        }
        let attention = AttentionVars {
            w_local: vars[0],
            w_hidden: vars[1],
            bias: vars[2],
            score: vars[3],
        };
        let r = &vars[4..4 + recurrent_len];
        let recurrent = match &self.recurrent {
            RecurrentParams::Qrnn(q) => RecurrentVars::Qrnn(QrnnVars {
                kernel_width: q.kernel_width,
                w_z: r[0],
                w_f: r[1],
                w_i: r[2],
                w_o: r[3],
                b_z: r[4],
                b_f: r[5],
                b_i: r[6],
                b_o: r[7],
            }),
            RecurrentParams::Lstm(l) => {
                RecurrentVars::Lstm(LstmVars::new(r[0], r[1], r[2], l.hidden_size()))
            }
        };
        Some(ModelVars {
            attention,
            recurrent,
            head_weight: vars[4 + recurrent_len],
            head_bias: vars[5 + recurrent_len],
        })
    }

    /// Replaces all parameters, given in [`Model::named_params`] order.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(ModelError::Config {
                field: "parameters",
                reason: format!("expected {} tensors, got {}", slots.len(), values.len()),
            });
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(ModelError::Diff(DiffError::Shape {
                    op: "set_params",
                    left: slot.shape(),
                    right: v.shape(),
                }));
            }
            **slot = v;
        }
        Ok(())
    }

    /// Gradients for every parameter, in [`Model::named_params`] order.
    pub fn collect_grads(vars: &ModelVars, grads: &Gradients) -> Vec<Tensor> {
        vars.all().into_iter().map(|v| grads.wrt(v)).collect()
    }
}

/// Per-frame risk rates of one clip (`num_frames × C`).
#[derive(Debug, Clone, PartialEq)]
pub struct RiskTrajectory {
    pub clip_id: String,
    pub risk: Tensor,
}

impl RiskTrajectory {
    pub fn num_frames(&self) -> usize {
        self.risk.rows()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.risk.rows()).map(|t| self.risk.get(t, c)).collect()
    }
}

/// Records the forward pass of one clip, returning the `frames × C` risk
/// variable.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &ModelVars,
    features: &FeatureSequence,
) -> Result<Var> {
    let expected = config.dims();
    let got = FeatureDims {
        global_dim: features.global.cols(),
        num_locals: features.mask.first().map_or(expected.num_locals, Vec::len),
        local_dim: features
            .locals
            .first()
            .map_or(expected.local_dim, Tensor::cols),
    };
    if got != expected
        || features
            .locals
            .iter()
            .any(|l| l.shape() != (expected.num_locals, expected.local_dim))
    {
        return Err(ModelError::Dims {
            clip_id: features.clip_id.clone(),
            expected,
            got,
        });
    }
    let frames = features.num_frames();
    let m = config.hidden_size;
    let n = config.input_dim();
    let zero_hidden = tape.leaf(Tensor::zeros(1, m))?;
    let zero_input = tape.leaf(Tensor::zeros(1, n))?;

    let mut inputs: Vec<Var> = Vec::with_capacity(frames);
    let mut hs: Vec<Var> = Vec::with_capacity(frames);
    let mut h_prev = zero_hidden;
    let mut c_prev: Option<Var> = None;
    for t in 0..frames {
        let g = tape.leaf(Tensor::row_vector(features.global.row(t).to_vec()))?;
        let locals = tape.leaf(features.locals[t].clone())?;
        let ctx = attend_locals(tape, &vars.attention, locals, &features.mask[t], h_prev)?;
        let x_t = if config.d_g == 0 {
            ctx
        } else if config.d_l == 0 {
            g
        } else {
            tape.concat_cols(&[g, ctx])?
        };
        inputs.push(x_t);

        let (h, c) = match &vars.recurrent {
            RecurrentVars::Qrnn(q) => {
                let window: Vec<Var> = (0..q.kernel_width)
                    .map(|j| if j <= t { inputs[t - j] } else { zero_input })
                    .collect();
                let window = if window.len() == 1 {
                    window[0]
                } else {
                    tape.concat_cols(&window)?
                };
                qrnn_step(tape, q, window, c_prev)?
            }
            RecurrentVars::Lstm(l) => {
                let state = c_prev.map(|c| (h_prev, c));
                lstm_step(tape, l, x_t, state)?
            }
        };
        hs.push(h);
        h_prev = h;
        c_prev = Some(c);
    }
    let hidden = tape.stack_rows(&hs)?;
    let logits = tape.affine(hidden, vars.head_weight, vars.head_bias)?;
    Ok(tape.sigmoid(logits)?)
}

/// Forward pass without gradients.
pub fn model_forward(features: &FeatureSequence, model: &Model) -> Result<RiskTrajectory> {
    model_forward_with(features, model, true)
}

/// [`model_forward`] with explicit control over NaN/Inf checking.
pub fn model_forward_with(
    features: &FeatureSequence,
    model: &Model,
    checked: bool,
) -> Result<RiskTrajectory> {
    let mut tape = Tape::with_checks(checked);
    let vars = model.bind(&mut tape)?;
    let r = forward_on_tape(&mut tape, &model.config, &vars, features)?;
    Ok(RiskTrajectory {
        clip_id: features.clip_id.clone(),
        risk: tape.value(r).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn clip(frames: usize, seed: u64) -> FeatureSequence {
        generate_synthetic(&SyntheticConfig {
            num_clips: 1,
            positive_fraction: 1.0,
            num_frames: frames,
            precursor_onset_frames: frames - 1,
            d_g: 3,
            d_l: 2,
            num_locals: 3,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .clips
        .remove(0)
        .features
    }

    fn config(kind: RecurrentKind) -> ModelConfig {
        ModelConfig {
            recurrent_kind: kind,
            kernel_width: 2,
            hidden_size: 4,
            num_classes: 3,
            d_g: 3,
            d_l: 2,
            num_locals: 3,
            seed: 5,
        }
    }

    #[test]
    fn zero_head_gives_half_everywhere() {
        let mut model = Model::init(&config(RecurrentKind::Qrnn)).unwrap();
        model.head.weight = Tensor::zeros(4, 3);
        let r = model_forward(&clip(6, 1), &model).unwrap();
        assert_eq!(r.risk, Tensor::filled(6, 3, 0.5));
    }

    #[test]
    fn output_shape_and_range_for_both_kinds() {
        for kind in [RecurrentKind::Qrnn, RecurrentKind::Lstm] {
            let model = Model::init(&config(kind)).unwrap();
            let r = model_forward(&clip(9, 2), &model).unwrap();
            assert_eq!(r.risk.shape(), (9, 3));
            assert!(r.risk.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let cfg = config(RecurrentKind::Qrnn);
        assert_eq!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 3).unwrap());
        assert_ne!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 4).unwrap());
        let model = init_params(&cfg, 3).unwrap();
        let shapes: Vec<_> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.shape())
            .collect();
        assert_eq!(
            shapes,
            vec![
                (2, 4),
                (4, 4),
                (1, 4),
                (4, 1),
                (10, 4),
                (10, 4),
                (10, 4),
                (10, 4),
                (1, 4),
                (1, 4),
                (1, 4),
                (1, 4),
                (4, 3),
                (1, 3)
            ]
        );
        let RecurrentParams::Qrnn(q) = &model.recurrent else {
            unreachable!()
        };
        assert_eq!(q.b_f, Tensor::filled(1, 4, 1.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut cfg = config(RecurrentKind::Qrnn);
        cfg.d_l = 5;
        let model = Model::init(&cfg).unwrap();
        assert!(matches!(
            model_forward(&clip(4, 0), &model),
            Err(ModelError::Dims { .. })
        ));
    }

    #[test]
    fn dims_are_resolved_from_data() {
        let mut cfg = config(RecurrentKind::Qrnn);
        let dims = cfg.dims();
        cfg.d_g = 0;
        cfg.num_locals = 0;
        assert_eq!(cfg.resolved(dims).unwrap().dims(), dims);
        cfg.d_l = 7;
        assert!(matches!(
            cfg.resolved(dims),
            Err(ModelError::Config { field: "d_l", .. })
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = config(RecurrentKind::Lstm);
        cfg.num_classes = 0;
        assert!(matches!(Model::init(&cfg), Err(ModelError::Config { .. })));
    }

    #[test]
    fn future_frames_do_not_affect_past_risk() {
        for kind in [RecurrentKind::Qrnn, RecurrentKind::Lstm] {
            let model = Model::init(&config(kind)).unwrap();
            let a = clip(8, 3);
            let mut b = a.clone();
            for t in 5..8 {
                b.global.row_mut(t).iter_mut().for_each(|v| *v += 1.7);
                b.locals[t].data_mut().iter_mut().for_each(|v| *v -= 0.9);
            }
            let ra = model_forward(&a, &model).unwrap().risk;
            let rb = model_forward(&b, &model).unwrap().risk;
            assert_eq!(ra.data()[..5 * 3], rb.data()[..5 * 3]);
            assert_ne!(ra.data()[5 * 3..], rb.data()[5 * 3..]);
        }
    }

    #[test]
    fn step_path_matches_convolution_path() {
        // Recording the QRNN one step at a time must equal the whole-sequence
        // convolution form on the same fused inputs.
        let model = Model::init(&config(RecurrentKind::Qrnn)).unwrap();
        let RecurrentParams::Qrnn(q) = &model.recurrent else {
            unreachable!()
        };
        let x = Tensor::from_rows(&[
            [0.1, -0.2, 0.3, 0.4, -0.5],
            [1.0, 0.0, -1.0, 0.5, 0.2],
            [-0.3, 0.8, 0.1, -0.6, 0.9],
        ]);
        let whole = qrnn_forward_values(&x, q).unwrap();
        let mut tape = Tape::checked();
        let vars = q.bind(&mut tape).unwrap();
        let rows: Vec<Var> = (0..3)
            .map(|t| tape.leaf(Tensor::row_vector(x.row(t).to_vec())).unwrap())
            .collect();
        let zero = tape.leaf(Tensor::zeros(1, 5)).unwrap();
        let mut c = None;
        for t in 0..3 {
            let prev = if t > 0 { rows[t - 1] } else { zero };
            let w = tape.concat_cols(&[rows[t], prev]).unwrap();
            let (h, c_t) = qrnn_step(&mut tape, &vars, w, c).unwrap();
            c = Some(c_t);
            for j in 0..4 {
                assert!((tape.value(h).get(0, j) - whole.get(t, j)).abs() < 1e-14);
            }
        }
    }

    fn loss_on(model: &Model, tape: &mut Tape, vars: &ModelVars, f: &FeatureSequence) -> Var {
        let risk = forward_on_tape(tape, &model.config, vars, f).unwrap();
        let s = tape.sum(risk).unwrap();
        let sq = tape.mul(s, s).unwrap();
        tape.scale(sq, 0.01).unwrap()
    }

    #[test]
    fn gradient_reaches_every_parameter_group() {
        for kind in [RecurrentKind::Qrnn, RecurrentKind::Lstm] {
            let model = Model::init(&config(kind)).unwrap();
            let f = clip(6, 4);
            let mut tape = Tape::checked();
            let vars = model.bind(&mut tape).unwrap();
            let loss = loss_on(&model, &mut tape, &vars, &f);
            let grads = tape.backward(loss).unwrap();
            for ((name, _), g) in model
                .named_params()
                .iter()
                .zip(Model::collect_grads(&vars, &grads))
            {
                assert!(g.max_abs() > 0.0, "{kind:?} {name} has zero gradient");
            }
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        for kind in [RecurrentKind::Qrnn, RecurrentKind::Lstm] {
            let model = Model::init(&config(kind)).unwrap();
            let f = clip(5, 6);
            let inputs: Vec<Tensor> = model
                .named_params()
                .iter()
                .map(|(_, t)| (*t).clone())
                .collect();
            let err = crate::diff::grad_check(
                |tape, vs| {
                    let vars = model.vars_from(vs).unwrap();
                    Ok(loss_on(&model, tape, &vars, &f))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn set_params_round_trips() {
        let a = init_params(&config(RecurrentKind::Lstm), 1).unwrap();
        let mut b = init_params(&config(RecurrentKind::Lstm), 2).unwrap();
        let values = a.named_params().iter().map(|(_, t)| (*t).clone()).collect();
        b.set_params(values).unwrap();
        assert_eq!(a, b);
        assert!(b.set_params(vec![]).is_err());
    }
}
