//! Leaky integrate-and-fire dynamics and the spiking network models built
//! from them: convolutional LIF layers, spike-element-wise residual blocks,
//! and the small backbones, projection head, and linear classifier used in
//! contrastive pretraining and downstream evaluation.
//!
//! Neuron update (reset-then-decay, the default): with binary spikes s and
//! membrane u,
//!   u[t] = beta * (u[t-1] * (1 - s[t-1]) + v_reset * s[t-1]) + I[t]
//!   s[t] = step(u[t] - v_th), with step(0) = 1.
//! A literal-subtraction variant u[t] = (beta - s[t-1]) * u[t-1]
//! + v_reset * s[t-1] + I[t] sits behind `reset = "subtract"`.
//!
//! On the tape the state is carried as u_pre = u - v_th so the spike
//! nonlinearity reads its input directly. In spiking mode the reset gate is
//! detached (spike values enter the recurrence as constants) and gradients
//! flow through the membrane via the surrogate; in smooth mode the gate
//! stays differentiable so finite-difference checks pass end to end.


use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, SurrogateMode, Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetForm {
    ZeroThenDecay,
    Subtract,
}

/// Shared neuron parameters for every LIF site in a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    pub beta: f64,
    pub v_th: f64,
    pub v_reset: f64,
    /// Surrogate sharpness.
    pub alpha: f64,
    pub mode: SurrogateMode,
    pub reset: ResetForm,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            beta: 0.9,
            v_th: 1.0,
            v_reset: 0.0,
            alpha: 2.0,
            mode: SurrogateMode::Spiking,
            reset: ResetForm::ZeroThenDecay,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::config(format!("v_th must be positive, got {}", self.v_th)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Reference state for the plain (non-tape) LIF update.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub u: Tensor,
    pub s: Tensor,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> LifState {
        LifState { u: Tensor::zeros(shape), s: Tensor::zeros(shape) }
    }
}

/// One membrane update and threshold crossing. Returns the spike tensor and
/// the next state; spikes are exactly 0.0 or 1.0.
pub fn lif_step(input: &Tensor, state: &LifState, cfg: &LifConfig) -> Result<(Tensor, LifState)> {
    cfg.validate()?;
    if input.shape() != state.u.shape() || input.shape() != state.s.shape() {
        return Err(Error::shape(
            "lif_step",
            format!(
                "input {:?}, u {:?}, s {:?}",
                input.shape(),
                state.u.shape(),
                state.s.shape()
            ),
        ));
    }
    let mut u = Tensor::zeros(input.shape());
    let mut s = Tensor::zeros(input.shape());
    for i in 0..input.numel() {
        let (up, sp, inp) = (state.u.data()[i], state.s.data()[i], input.data()[i]);
        let un = match cfg.reset {
            ResetForm::ZeroThenDecay => cfg.beta * (up * (1.0 - sp) + cfg.v_reset * sp) + inp,
            ResetForm::Subtract => (cfg.beta - sp) * up + cfg.v_reset * sp + inp,
        };
        u.data_mut()[i] = un;
        s.data_mut()[i] = if un >= cfg.v_th { 1.0 } else { 0.0 };
    }
    Ok((s.clone(), LifState { u, s }))
}

/// Tape-side LIF state: the pre-threshold membrane u - v_th and the spike
/// output of the previous step.
#[derive(Debug, Clone, Copy)]
pub struct TapeLifState {
    pub u_pre: ValueId,
    pub s: ValueId,
}

/// LIF update on the tape. `prev = None` starts from a resting neuron
/// (u = 0, no prior spike), in which case u[1] = I[1] under both reset
/// forms.
pub fn lif_tape(
    tape: &mut Tape,
    input: ValueId,
    prev: Option<&TapeLifState>,
    cfg: &LifConfig,
) -> Result<(ValueId, TapeLifState)> {
    cfg.validate()?;
    let u_pre = match prev {
        None => tape.add_scalar(input, -cfg.v_th),
        Some(st) => match cfg.mode {
            SurrogateMode::Spiking => {
                let s_prev = tape.value(st.s);
                let mut coeff = Tensor::zeros(s_prev.shape());
                let mut offset = Tensor::zeros(s_prev.shape());
                for i in 0..s_prev.numel() {
                    let sp = s_prev.data()[i];
                    let (c, o) = match cfg.reset {
                        ResetForm::ZeroThenDecay => (
                            cfg.beta * (1.0 - sp),
                            cfg.beta * cfg.v_th * (1.0 - sp) + cfg.beta * cfg.v_reset * sp
                                - cfg.v_th,
                        ),
                        ResetForm::Subtract => (
                            cfg.beta - sp,
                            (cfg.beta - sp) * cfg.v_th + cfg.v_reset * sp - cfg.v_th,
                        ),
                    };
                    coeff.data_mut()[i] = c;
                    offset.data_mut()[i] = o;
                }
                tape.mul_add_const(st.u_pre, input, coeff, offset)?
            }
            SurrogateMode::Smooth => {
                let u_prev = tape.add_scalar(st.u_pre, cfg.v_th);
                let u_new = match cfg.reset {
                    ResetForm::ZeroThenDecay => {
                        let neg_s = tape.scale(st.s, -1.0);
                        let gate = tape.add_scalar(neg_s, 1.0);
                        let gated = tape.mul(u_prev, gate)?;
                        let reset_term = tape.scale(st.s, cfg.v_reset);
                        let inner = tape.add(gated, reset_term)?;
                        let decayed = tape.scale(inner, cfg.beta);
                        tape.add(decayed, input)?
                    }
                    ResetForm::Subtract => {
                        let neg_s = tape.scale(st.s, -1.0);
                        let coeff = tape.add_scalar(neg_s, cfg.beta);
                        let t1 = tape.mul(coeff, u_prev)?;
                        let t2 = tape.scale(st.s, cfg.v_reset);
                        let t12 = tape.add(t1, t2)?;
                        tape.add(t12, input)?
                    }
                };
                tape.add_scalar(u_new, -cfg.v_th)
            }
        },
    };
    let s = tape.spike_surrogate(u_pre, cfg.alpha, cfg.mode)?;
    Ok((s, TapeLifState { u_pre, s }))
}

/// One stage of a spiking model. Parameter fields are indices into the
/// owning model's parameter vector.
#[derive(Debug, Clone)]
pub enum Layer {
    ConvLif { w: usize, b: usize, stride: usize, pad: usize },
    /// Two ConvLif stages plus an input shortcut: out = s2 + x.
    SewBlock { w1: usize, b1: usize, w2: usize, b2: usize, pad: usize },
    SumPool { k: usize },
    GlobalAvgPool,
    LinearLif { w: usize, b: usize },
    Linear { w: usize, b: usize },
}

impl Layer {
    fn lif_sites(&self) -> usize {
        match self {
            Layer::ConvLif { .. } | Layer::LinearLif { .. } => 1,
            Layer::SewBlock { .. } => 2,
            _ => 0,
        }
    }
}

/// A stack of layers with its parameters, stepped once per time bin.
#[derive(Debug, Clone)]
pub struct SnnModel {
    pub name: String,
    pub layers: Vec<Layer>,
    pub params: Vec<Param>,
    pub lif: LifConfig,
    /// Width of the per-step output.
    pub out_dim: usize,
}

impl SnnModel {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn lif_site_count(&self) -> usize {
        self.layers.iter().map(Layer::lif_sites).sum()
    }

    /// Insert every parameter into the tape, as trainable leaves or frozen
    /// constants, returning ids aligned with `self.params`.
    pub fn insert_params(&self, tape: &mut Tape, trainable: bool) -> Vec<ValueId> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }
}

/// Per-site LIF states carried across time steps of one model.
#[derive(Debug, Clone, Default)]
pub struct ModelState {
    sites: Vec<Option<TapeLifState>>,
}

impl ModelState {
    pub fn new(model: &SnnModel) -> ModelState {
        ModelState { sites: vec![None; model.lif_site_count()] }
    }
}

/// Advance the model by one time step. `param_ids` must come from
/// `insert_params` on the same tape.
pub fn forward_step(
    tape: &mut Tape,
    model: &SnnModel,
    param_ids: &[ValueId],
    input: ValueId,
    state: &mut ModelState,
) -> Result<ValueId> {
    if param_ids.len() != model.params.len() {
        return Err(Error::contract(format!(
            "model {} has {} params but {} ids were supplied",
            model.name,
            model.params.len(),
            param_ids.len()
        )));
    }
    if state.sites.len() != model.lif_site_count() {
        return Err(Error::contract("model state does not match model topology"));
    }
    let mut x = input;
    let mut site = 0;
    for layer in &model.layers {
        x = match *layer {
            Layer::ConvLif { w, b, stride, pad } => {
                let z = tape.conv2d(x, param_ids[w], stride, pad)?;
                let z = tape.add_bias_channel(z, param_ids[b])?;
                let (s, st) = lif_tape(tape, z, state.sites[site].as_ref(), &model.lif)?;
                state.sites[site] = Some(st);
                site += 1;
                s
            }
            Layer::SewBlock { w1, b1, w2, b2, pad } => {
                let z1 = tape.conv2d(x, param_ids[w1], 1, pad)?;
                let z1 = tape.add_bias_channel(z1, param_ids[b1])?;
                let (s1, st1) = lif_tape(tape, z1, state.sites[site].as_ref(), &model.lif)?;
                state.sites[site] = Some(st1);
                let z2 = tape.conv2d(s1, param_ids[w2], 1, pad)?;
                let z2 = tape.add_bias_channel(z2, param_ids[b2])?;
                let (s2, st2) = lif_tape(tape, z2, state.sites[site + 1].as_ref(), &model.lif)?;
                state.sites[site + 1] = Some(st2);
                site += 2;
                tape.add(s2, x)?
            }
            Layer::SumPool { k } => tape.sum_pool2(x, k)?,
            Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
            Layer::LinearLif { w, b } => {
                let z = tape.matmul(x, param_ids[w])?;
                let z = tape.add_bias_row(z, param_ids[b])?;
                let (s, st) = lif_tape(tape, z, state.sites[site].as_ref(), &model.lif)?;
                state.sites[site] = Some(st);
                site += 1;
                s
            }
            Layer::Linear { w, b } => {
                let z = tape.matmul(x, param_ids[w])?;
                tape.add_bias_row(z, param_ids[b])?
            }
        };
    }
    Ok(x)
}

/// Run all time steps, threading LIF state, and return one output per step.
pub fn forward_sequence(
    tape: &mut Tape,
    model: &SnnModel,
    param_ids: &[ValueId],
    steps: &[ValueId],
) -> Result<Vec<ValueId>> {
    let mut state = ModelState::new(model);
    steps
        .iter()
        .map(|&x| forward_step(tape, model, param_ids, x, &mut state))
        .collect()
}

/// Evaluate the frozen model on a sequence of step inputs (each
/// [N, C, H, W] or [N, D]) and return the per-step output tensors.
pub fn forward_features(model: &SnnModel, steps: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let ids = model.insert_params(&mut tape, false);
    let step_ids: Vec<ValueId> = steps.iter().map(|t| tape.constant(t.clone())).collect();
    let outs = forward_sequence(&mut tape, model, &ids, &step_ids)?;
    Ok(outs.into_iter().map(|id| tape.value(id).clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    MiniSew,
    TinyConv,
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("kaiming shape")
}

struct ModelBuilder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    layers: Vec<Layer>,
}

impl ModelBuilder {
    fn new(seed: u64, label: &str) -> ModelBuilder {
        ModelBuilder { rng: stream_rng(seed, label, &[]), params: Vec::new(), layers: Vec::new() }
    }

    fn push_param(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn conv_pair(&mut self, prefix: &str, in_ch: usize, out_ch: usize, k: usize) -> (usize, usize) {
        let w = kaiming(&mut self.rng, &[out_ch, in_ch, k, k], in_ch * k * k);
        let wi = self.push_param(format!("{prefix}.w"), w);
        let bi = self.push_param(format!("{prefix}.b"), Tensor::zeros(&[out_ch]));
        (wi, bi)
    }

    fn linear_pair(&mut self, prefix: &str, in_dim: usize, out_dim: usize, zero: bool) -> (usize, usize) {
        let w = if zero {
            Tensor::zeros(&[in_dim, out_dim])
        } else {
            kaiming(&mut self.rng, &[in_dim, out_dim], in_dim)
        };
        let wi = self.push_param(format!("{prefix}.w"), w);
        let bi = self.push_param(format!("{prefix}.b"), Tensor::zeros(&[out_dim]));
        (wi, bi)
    }

    fn conv_lif(&mut self, in_ch: usize, out_ch: usize) {
        let idx = self.layers.len();
        let (w, b) = self.conv_pair(&format!("l{idx}"), in_ch, out_ch, 3);
        self.layers.push(Layer::ConvLif { w, b, stride: 1, pad: 1 });
    }

    fn sew_block(&mut self, ch: usize) {
        let idx = self.layers.len();
        let (w1, b1) = self.conv_pair(&format!("l{idx}.c1"), ch, ch, 3);
        let (w2, b2) = self.conv_pair(&format!("l{idx}.c2"), ch, ch, 3);
        self.layers.push(Layer::SewBlock { w1, b1, w2, b2, pad: 1 });
    }

    fn finish(self, name: &str, lif: LifConfig, out_dim: usize) -> SnnModel {
        SnnModel { name: name.to_string(), layers: self.layers, params: self.params, lif, out_dim }
    }
}

fn check_sensor(h: usize, w: usize, pool_factor: usize) -> Result<()> {
    if h < 8 || w < 8 {
        return Err(Error::config(format!("backbone needs at least 8x8 input, got {h}x{w}")));
    }
    if h % pool_factor != 0 || w % pool_factor != 0 {
        return Err(Error::config(format!(
            "backbone pools by {pool_factor}; {h}x{w} input is not divisible"
        )));
    }
    Ok(())
}

/// Residual spiking backbone: ConvLif(2->16), SEW(16), pool, ConvLif(16->32),
/// SEW(32), pool, global average. Per-step output is a 32-wide firing rate.
pub fn build_mini_sew(h: usize, w: usize, lif: LifConfig, seed: u64) -> Result<SnnModel> {
    lif.validate()?;
    check_sensor(h, w, 4)?;
    let mut b = ModelBuilder::new(seed, "init.mini_sew");
    b.conv_lif(2, 16);
    b.sew_block(16);
    b.layers.push(Layer::SumPool { k: 2 });
    b.conv_lif(16, 32);
    b.sew_block(32);
    b.layers.push(Layer::SumPool { k: 2 });
    b.layers.push(Layer::GlobalAvgPool);
    Ok(b.finish("mini_sew", lif, 32))
}

/// Plain spiking stack without shortcuts: three ConvLif/pool stages.
pub fn build_tiny_conv(h: usize, w: usize, lif: LifConfig, seed: u64) -> Result<SnnModel> {
    lif.validate()?;
    check_sensor(h, w, 8)?;
    let mut b = ModelBuilder::new(seed, "init.tiny_conv");
    b.conv_lif(2, 8);
    b.layers.push(Layer::SumPool { k: 2 });
    b.conv_lif(8, 16);
    b.layers.push(Layer::SumPool { k: 2 });
    b.conv_lif(16, 32);
    b.layers.push(Layer::SumPool { k: 2 });
    b.layers.push(Layer::GlobalAvgPool);
    Ok(b.finish("tiny_conv", lif, 32))
}

pub fn build_backbone(kind: BackboneKind, h: usize, w: usize, lif: LifConfig, seed: u64) -> Result<SnnModel> {
    match kind {
        BackboneKind::MiniSew => build_mini_sew(h, w, lif, seed),
        BackboneKind::TinyConv => build_tiny_conv(h, w, lif, seed),
    }
}

/// Projection head for contrastive training: LinearLif(D->D) then a plain
/// linear map to the embedding width, applied per time step.
pub fn build_projection_head(feature_dim: usize, out_dim: usize, lif: LifConfig, seed: u64) -> Result<SnnModel> {
    lif.validate()?;
    if feature_dim == 0 || out_dim == 0 {
        return Err(Error::config("projection head dims must be positive"));
    }
    let mut b = ModelBuilder::new(seed, "init.head");
    let (w0, b0) = b.linear_pair("l0", feature_dim, feature_dim, false);
    b.layers.push(Layer::LinearLif { w: w0, b: b0 });
    let (w1, b1) = b.linear_pair("l1", feature_dim, out_dim, false);
    b.layers.push(Layer::Linear { w: w1, b: b1 });
    Ok(b.finish("projection_head", lif, out_dim))
}

/// Zero-initialized linear classifier over time-averaged features.
pub fn build_classifier(feature_dim: usize, num_classes: usize) -> Result<SnnModel> {
    if feature_dim == 0 || num_classes == 0 {
        return Err(Error::config("classifier dims must be positive"));
    }
    let mut b = ModelBuilder::new(0, "init.classifier");
    let (w, bi) = b.linear_pair("l0", feature_dim, num_classes, true);
    b.layers.push(Layer::Linear { w, b: bi });
    Ok(b.finish("classifier", LifConfig::default(), num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn scalar_state() -> LifState {
        LifState::zeros(&[1])
    }

    /// beta = 0.5, v_th = 1, constant drive 0.6: membrane follows the
    /// recurrence 0.6, 0.9, 1.05 (spike), then resets to 0.6.
    #[test]
    fn hand_trace_matches_recurrence() {
        let cfg = LifConfig { beta: 0.5, ..LifConfig::default() };
        let input = Tensor::new(vec![1], vec![0.6]).unwrap();
        let mut st = scalar_state();
        let mut us = Vec::new();
        let mut ss = Vec::new();
        for _ in 0..4 {
            let (s, next) = lif_step(&input, &st, &cfg).unwrap();
            us.push(next.u.data()[0]);
            ss.push(s.data()[0]);
            st = next;
        }
        let e1 = 0.5 * (0.0_f64 * 1.0 + 0.0) + 0.6;
        let e2 = 0.5 * (e1 * 1.0 + 0.0) + 0.6;
        let e3 = 0.5 * (e2 * 1.0 + 0.0) + 0.6;
        let e4 = 0.5 * (e3 * 0.0 + 0.0) + 0.6;
        assert_eq!(us, vec![e1, e2, e3, e4]);
        assert_eq!(ss, vec![0.0, 0.0, 1.0, 0.0]);
        for (got, want) in us.iter().zip([0.6, 0.9, 1.05, 0.6]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn threshold_hit_counts_as_spike() {
        let cfg = LifConfig { beta: 0.0, ..LifConfig::default() };
        let input = Tensor::new(vec![1], vec![1.0]).unwrap();
        let (s, _) = lif_step(&input, &scalar_state(), &cfg).unwrap();
        assert_eq!(s.data()[0], 1.0);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let s = tape.spike_surrogate(x, 2.0, SurrogateMode::Spiking).unwrap();
        assert_eq!(tape.value(s).data()[0], 1.0);
    }

    /// After any spike the next membrane minus its drive equals
    /// beta * v_reset under reset-then-decay.
    #[test]
    fn hard_reset_invariant_over_random_traces() {
        for trace in 0..1000 {
            let mut rng = stream_rng(trace, "reset", &[]);
            let v_reset = if trace % 2 == 0 { 0.0 } else { 0.3 };
            let cfg = LifConfig { beta: 0.9, v_reset, ..LifConfig::default() };
            let mut st = scalar_state();
            for _ in 0..30 {
                let drive = rng.random_range(-0.5..1.5);
                let input = Tensor::new(vec![1], vec![drive]).unwrap();
                let spiked = st.s.data()[0] == 1.0;
                let (s, next) = lif_step(&input, &st, &cfg).unwrap();
                if spiked {
                    let residual = next.u.data()[0] - drive;
                    if v_reset == 0.0 {
                        assert_eq!(residual, 0.0);
                    } else {
                        assert!((residual - cfg.beta * v_reset).abs() < 1e-12);
                    }
                }
                assert!(s.data()[0] == 0.0 || s.data()[0] == 1.0);
                st = next;
            }
        }
    }

    /// The tape recurrences (both reset forms, spiking mode) reproduce the
    /// reference update: recovered membranes and spikes agree.
    #[test]
    fn tape_lif_matches_reference_dynamics() {
        for (form, trace) in [(ResetForm::ZeroThenDecay, 0u64), (ResetForm::Subtract, 1)] {
            for seed in 0..50 {
                let cfg = LifConfig { beta: 0.8, v_reset: 0.1, reset: form, ..LifConfig::default() };
                let mut rng = stream_rng(seed, "tape-vs-pure", &[trace]);
                let mut tape = Tape::new();
                let mut pure = LifState::zeros(&[3]);
                let mut tape_state: Option<TapeLifState> = None;
                for _ in 0..12 {
                    let drive: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..1.6)).collect();
                    let input = Tensor::new(vec![3], drive).unwrap();
                    let (s_ref, next) = lif_step(&input, &pure, &cfg).unwrap();
                    pure = next;
                    let x = tape.constant(input);
                    let (s_id, st) = lif_tape(&mut tape, x, tape_state.as_ref(), &cfg).unwrap();
                    tape_state = Some(st);
                    for i in 0..3 {
                        let u_tape = tape.value(st.u_pre).data()[i] + cfg.v_th;
                        assert!((u_tape - pure.u.data()[i]).abs() < 1e-12);
                        assert_eq!(tape.value(s_id).data()[i], s_ref.data()[i]);
                    }
                }
            }
        }
    }

    /// The smooth surrogate's analytic backward matches finite differences
    /// of its forward on a grid over [-3, 3].
    #[test]
    fn surrogate_gradient_matches_finite_difference()  {
        let alpha = 2.0;
        let fwd = |x: f64| (std::f64::consts::PI * alpha * x).atan() / std::f64::consts::PI + 0.5;
        for i in 0..=60 {
            let x0 = -3.0 + 0.1 * i as f64;
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![1], vec![x0]).unwrap());
            let s = tape.spike_surrogate(x, alpha, SurrogateMode::Smooth).unwrap();
            let loss = tape.mean_all(s);
            let grads = tape.backward(loss).unwrap();
            let got = grads.get(x).unwrap().data()[0];
            let h = 1e-5;
            let fd = (fwd(x0 + h) - fwd(x0 - h)) / (2.0 * h);
            assert!((got - fd).abs() < 1e-6, "x={x0}: analytic {got} vs fd {fd}");

            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![1], vec![x0]).unwrap());
            let s = tape.spike_surrogate(x, alpha, SurrogateMode::Spiking).unwrap();
            let loss = tape.mean_all(s);
            let spiking_grad = tape.backward(loss).unwrap().get(x).unwrap().data()[0];
            assert!((spiking_grad - got).abs() < 1e-15);
        }
    }

    #[test]
    fn smooth_forward_value_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let s = tape.spike_surrogate(x, 2.0, SurrogateMode::Smooth).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
    }

    fn sew_only_model(ch: usize, zero_weights: bool, seed: u64) -> SnnModel {
        let mut b = ModelBuilder::new(seed, "test.sew");
        let (w1, b1) = b.conv_pair("l0.c1", ch, ch, 3);
        let (w2, b2) = b.conv_pair("l0.c2", ch, ch, 3);
        if zero_weights {
            for p in &mut b.params {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        b.layers.push(Layer::SewBlock { w1, b1, w2, b2, pad: 1 });
        b.finish("sew_only", LifConfig::default(), ch)
    }

    #[test]
    fn sew_block_with_zero_weights_is_identity() {
        let model = sew_only_model(4, true, 9);
        let mut rng = stream_rng(3, "sew-id", &[]);
        let data: Vec<f64> = (0..2 * 4 * 6 * 6).map(|_| f64::from(rng.random::<bool>())).collect();
        let x = Tensor::new(vec![2, 4, 6, 6], data).unwrap();
        let outs = forward_features(&model, &[x.clone(), x.clone()]).unwrap();
        for o in outs {
            assert_eq!(o, x);
        }
    }

    #[test]
    fn sew_block_outputs_stay_in_zero_one_two() {
        let model = sew_only_model(4, false, 10);
        let mut rng = stream_rng(4, "sew-range", &[]);
        let steps: Vec<Tensor> = (0..3)
            .map(|_| {
                let data = (0..2 * 4 * 6 * 6).map(|_| f64::from(rng.random::<bool>())).collect();
                Tensor::new(vec![2, 4, 6, 6], data).unwrap()
            })
            .collect();
        let outs = forward_features(&model, &steps).unwrap();
        for o in outs {
            for &v in o.data() {
                assert!(v == 0.0 || v == 1.0 || v == 2.0, "SEW output {v} outside {{0, 1, 2}}");
            }
        }
    }

    #[test]
    fn backbone_shapes_and_param_counts() {
        let lif = LifConfig::default();
        let mini = build_mini_sew(16, 16, lif, 7).unwrap();
        assert_eq!(mini.param_count(), 28_080);
        assert_eq!(mini.lif_site_count(), 6);
        let tiny = build_tiny_conv(16, 16, lif, 7).unwrap();
        assert_eq!(
            tiny.param_count(),
            (2 * 8 * 9 + 8) + (8 * 16 * 9 + 16) + (16 * 32 * 9 + 32)
        );
        for model in [&mini, &tiny] {
            let x = Tensor::zeros(&[3, 2, 16, 16]);
            let outs = forward_features(model, &[x]).unwrap();
            assert_eq!(outs[0].shape(), &[3, 32]);
        }
        assert!(build_mini_sew(6, 16, lif, 7).is_err());
        assert!(build_mini_sew(18, 16, lif, 7).is_err());
        assert!(build_tiny_conv(20, 16, lif, 7).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let lif = LifConfig::default();
        let a = build_mini_sew(16, 16, lif, 42).unwrap();
        let b = build_mini_sew(16, 16, lif, 42).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
        let c = build_mini_sew(16, 16, lif, 43).unwrap();
        assert!(a.params[0].value != c.params[0].value);
    }

    #[test]
    fn zero_input_produces_zero_features() {
        let model = build_mini_sew(16, 16, LifConfig::default(), 5).unwrap();
        let steps: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[2, 2, 16, 16])).collect();
        for o in forward_features(&model, &steps).unwrap() {
            assert_eq!(o.max_abs(), 0.0);
        }
    }

    /// Samples in a batch do not interact: running two inputs jointly or
    /// separately gives identical per-sample outputs.
    #[test]
    fn batch_samples_are_independent() {
        let model = build_mini_sew(16, 16, LifConfig::default(), 11).unwrap();
        let mut rng = stream_rng(6, "batch", &[]);
        let mk = |rng: &mut ChaCha8Rng, n: usize| {
            let data = (0..n * 2 * 16 * 16).map(|_| rng.random::<f64>()).collect();
            Tensor::new(vec![n, 2, 16, 16], data).unwrap()
        };
        let joint: Vec<Tensor> = (0..3).map(|_| mk(&mut rng, 2)).collect();
        let split_a: Vec<Tensor> = joint
            .iter()
            .map(|t| Tensor::new(vec![1, 2, 16, 16], t.data()[..2 * 16 * 16].to_vec()).unwrap())
            .collect();
        let split_b: Vec<Tensor> = joint
            .iter()
            .map(|t| Tensor::new(vec![1, 2, 16, 16], t.data()[2 * 16 * 16..].to_vec()).unwrap())
            .collect();
        let out_joint = forward_features(&model, &joint).unwrap();
        let out_a = forward_features(&model, &split_a).unwrap();
        let out_b = forward_features(&model, &split_b).unwrap();
        for t in 0..3 {
            for d in 0..32 {
                assert!((out_joint[t].data()[d] - out_a[t].data()[d]).abs() < 1e-12);
                assert!((out_joint[t].data()[32 + d] - out_b[t].data()[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classifier_starts_uniform_and_head_shapes_work() {
        let clf = build_classifier(32, 5).unwrap();
        let x = Tensor::new(vec![2, 32], (0..64).map(|i| i as f64).collect()).unwrap();
        let outs = forward_features(&clf, &[x]).unwrap();
        assert_eq!(outs[0].shape(), &[2, 5]);
        assert_eq!(outs[0].max_abs(), 0.0);

        let head = build_projection_head(32, 16, LifConfig::default(), 3).unwrap();
        let mut rng = stream_rng(8, "head", &[]);
        let steps: Vec<Tensor> = (0..2)
            .map(|_| Tensor::new(vec![3, 32], (0..96).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let outs = forward_features(&head, &steps).unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(outs[0].shape(), &[3, 16]);
    }

    /// Gradients reach every trainable parameter through the full spiking
    /// stack, and are finite.
    #[test]
    fn gradients_flow_to_all_params() {
        let model = build_mini_sew(8, 8, LifConfig::default(), 13).unwrap();
        let mut tape = Tape::new();
        let ids = model.insert_params(&mut tape, true);
        let mut rng = stream_rng(9, "gradflow", &[]);
        let steps: Vec<ValueId> = (0..3)
            .map(|_| {
                let data = (0..2 * 2 * 8 * 8).map(|_| rng.random::<f64>() * 2.0).collect();
                tape.constant(Tensor::new(vec![2, 2, 8, 8], data).unwrap())
            })
            .collect();
        let outs = forward_sequence(&mut tape, &model, &ids, &steps).unwrap();
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = tape.add(acc, o).unwrap();
        }
        let loss = tape.mean_all(acc);
        let grads = tape.backward(loss).unwrap();
        for (&id, p) in ids.iter().zip(&model.params) {
            let g = grads.get(id).unwrap_or_else(|| panic!("no grad for {}", p.name));
            assert_eq!(g.shape(), p.value.shape());
            assert!(g.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = LifConfig::default();
        cfg.beta = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = LifConfig::default();
        cfg.v_th = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = LifConfig::default();
        cfg.alpha = -1.0;
        assert!(cfg.validate().is_err());
    }
}
