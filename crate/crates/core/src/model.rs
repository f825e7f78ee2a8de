//! Miniature convolutional encoder–decoder with temporal recurrences.
//!
//! Layout for `stages = s` and `base_channels = b` (channel width of stage
//! `k` is `b·2^k`):
//!
//! ```text
//! frame ─▶ [conv3×3 → relu ─▶ EncoderStage(k) ─▶ maxpool2] × s
//!       ─▶ Bottleneck
//!       ─▶ [conv3×3 → relu ─▶ DecoderStage(k) ─▶ upsample2] × s
//!       ─▶ conv1×1 → sigmoid ─▶ Output
//! ```
//!
//! A recurrence wraps the activation at each configured insertion point.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{apply_mask, dropout_mask, ConvLayer, ParamGroup, ParamId, ParameterRegistry};
use crate::recurrence::{
    alpha_to_logit, convlstm_step_on_tape, ema_step_on_tape, Alpha, ConvLstmState, ConvLstmWeights,
    EmaState, LstmOutput, LstmVars, Peephole,
};
use crate::saliency::SaliencyMap;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InsertionPoint {
    EncoderStage(usize),
    Bottleneck,
    DecoderStage(usize),
    Output,
}

impl fmt::Display for InsertionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EncoderStage(k) => write!(f, "encoder:{k}"),
            Self::Bottleneck => f.write_str("bottleneck"),
            Self::DecoderStage(k) => write!(f, "decoder:{k}"),
            Self::Output => f.write_str("output"),
        }
    }
}

impl FromStr for InsertionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let stage = |k: &str| {
            k.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad stage index in insertion point {s:?}")))
        };
        match s.split_once(':') {
            None if s == "bottleneck" => Ok(Self::Bottleneck),
            None if s == "output" => Ok(Self::Output),
            Some(("encoder", k)) => Ok(Self::EncoderStage(stage(k)?)),
            Some(("decoder", k)) => Ok(Self::DecoderStage(stage(k)?)),
            _ => Err(Error::Config(format!(
                "unknown insertion point {s:?} (expected encoder:K, bottleneck, decoder:K or output)"
            ))),
        }
    }
}

impl Serialize for InsertionPoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InsertionPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where an EMA at [`InsertionPoint::Output`] sits relative to the final sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutputPlacement {
    #[default]
    PostSigmoid,
    PreSigmoid,
}

/// How dropout masks are drawn across the frames of one video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutMask {
    #[default]
    PerFrame,
    /// One mask per insertion point, kept until the state is reset.
    PerVideo,
}

fn default_alpha() -> f64 {
    0.1
}

fn default_points() -> Vec<InsertionPoint> {
    vec![InsertionPoint::Bottleneck]
}

fn bottleneck() -> InsertionPoint {
    InsertionPoint::Bottleneck
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RecurrenceConfig {
    #[default]
    None,
    Ema {
        /// Fixed α, or the initial σ(p) when trainable.
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        trainable: bool,
        #[serde(default)]
        residual: bool,
        #[serde(default = "default_points")]
        points: Vec<InsertionPoint>,
        #[serde(default)]
        output_placement: OutputPlacement,
    },
    ConvLstm {
        #[serde(default = "bottleneck")]
        at: InsertionPoint,
        #[serde(default)]
        output: LstmOutput,
        #[serde(default)]
        peephole: Peephole,
    },
}

impl RecurrenceConfig {
    pub fn ema(alpha: f64, points: Vec<InsertionPoint>) -> Self {
        Self::Ema {
            alpha,
            trainable: false,
            residual: false,
            points,
            output_placement: OutputPlacement::PostSigmoid,
        }
    }

    pub fn convlstm() -> Self {
        Self::ConvLstm {
            at: InsertionPoint::Bottleneck,
            output: LstmOutput::Cell,
            peephole: Peephole::PerElement,
        }
    }

    pub fn ema_points(&self) -> &[InsertionPoint] {
        match self {
            Self::Ema { points, .. } => points,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stages: usize,
    pub base_channels: usize,
    pub dropout_before_recurrence: bool,
    pub dropout_p: f64,
    pub dropout_mask: DropoutMask,
    pub seed: u64,
    pub recurrence: RecurrenceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 32,
            input_width: 32,
            input_channels: 1,
            stages: 3,
            base_channels: 8,
            dropout_before_recurrence: false,
            dropout_p: 0.5,
            dropout_mask: DropoutMask::PerFrame,
            seed: 0,
            recurrence: RecurrenceConfig::None,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Output channels of decoder block `k`.
    pub fn decoder_channels(&self, k: usize) -> usize {
        self.channels((self.stages - 1 - k).saturating_sub(1))
    }

    /// `[C, H, W]` of the activation at an insertion point.
    pub fn point_shape(&self, point: InsertionPoint) -> [usize; 3] {
        let (h, w, s) = (self.input_height, self.input_width, self.stages);
        match point {
            InsertionPoint::EncoderStage(k) => [self.channels(k), h >> k, w >> k],
            InsertionPoint::Bottleneck => [self.channels(s - 1), h >> s, w >> s],
            InsertionPoint::DecoderStage(k) => {
                [self.decoder_channels(k), h >> (s - k), w >> (s - k)]
            }
            InsertionPoint::Output => [1, h, w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.stages == 0 || self.base_channels == 0 || self.input_channels == 0 {
            return err("stages, base_channels and input_channels must be >= 1".into());
        }
        if self.stages > 16 {
            return err(format!("stages = {} is too deep", self.stages));
        }
        let div = 1usize << self.stages;
        if self.input_height == 0
            || self.input_width == 0
            || !self.input_height.is_multiple_of(div)
            || !self.input_width.is_multiple_of(div)
        {
            return err(format!(
                "input size {}x{} must be divisible by 2^stages = {div}",
                self.input_height, self.input_width
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            ));
        }
        match &self.recurrence {
            RecurrenceConfig::None => {}
            RecurrenceConfig::Ema {
                alpha,
                trainable,
                residual,
                points,
                output_placement,
            } => {
                let ok = if *trainable {
                    *alpha > 0.0 && *alpha < 1.0
                } else {
                    *alpha > 0.0 && *alpha <= 1.0
                };
                if !ok {
                    return err(format!("alpha {alpha} out of range"));
                }
                if points.is_empty() || points.len() > 2 {
                    return err(format!(
                        "EMA needs 1 or 2 insertion points, got {}",
                        points.len()
                    ));
                }
                if points.len() == 2 && points[0] == points[1] {
                    return err(format!("duplicate insertion point {}", points[0]));
                }
                for p in points {
                    match *p {
                        InsertionPoint::EncoderStage(k) | InsertionPoint::DecoderStage(k)
                            if k >= self.stages =>
                        {
                            return err(format!(
                                "insertion point {p} out of range for {} stages",
                                self.stages
                            ));
                        }
                        InsertionPoint::Output
                            if *residual && *output_placement == OutputPlacement::PostSigmoid =>
                        {
                            return err(
                                "residual EMA at the output must use pre-sigmoid placement".into(),
                            );
                        }
                        _ => {}
                    }
                }
            }
            RecurrenceConfig::ConvLstm { at, .. } => {
                if *at != InsertionPoint::Bottleneck {
                    return err(format!(
                        "ConvLSTM is only supported at the bottleneck, not {at}"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-video recurrence state: one EMA accumulator per insertion point, or
/// the ConvLSTM pair. Tagged with the video it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceStates {
    pub video_id: Option<String>,
    pub ema: Vec<EmaState>,
    pub lstm: Option<ConvLstmState>,
    masks: Vec<Option<Tensor>>,
}

impl RecurrenceStates {
    pub fn reset(&mut self) {
        self.ema.iter_mut().for_each(EmaState::reset);
        if let Some(l) = &mut self.lstm {
            l.reset();
        }
        self.masks.iter_mut().for_each(|m| *m = None);
        self.video_id = None;
    }

    pub fn for_video(mut self, id: impl Into<String>) -> Self {
        self.video_id = Some(id.into());
        self
    }
}

/// Recurrence state while it lives on a tape.
#[derive(Debug, Clone)]
pub struct LiveStates {
    ema: Vec<Option<Var>>,
    lstm: Option<LstmVars>,
}

/// Training-mode context for one forward pass.
pub struct Dropout<'a, R: Rng> {
    pub rng: &'a mut R,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParameterRegistry,
    encoder: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
    head: ConvLayer,
    lstm: Option<ConvLstmWeights>,
    alpha_param: Option<ParamId>,
    alpha_override: Option<f64>,
}

impl Model {
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParameterRegistry::new();
        let s = cfg.stages;

        let mut encoder = Vec::with_capacity(s);
        let mut cin = cfg.input_channels;
        for k in 0..s {
            let cout = cfg.channels(k);
            encoder.push(ConvLayer::new(
                &mut params,
                &format!("encoder.{k}"),
                cin,
                cout,
                3,
                1,
                1,
                &mut rng,
            )?);
            cin = cout;
        }

        let lstm = match &cfg.recurrence {
            RecurrenceConfig::ConvLstm { peephole, .. } => {
                let [c, h, w] = cfg.point_shape(InsertionPoint::Bottleneck);
                Some(ConvLstmWeights::new(
                    &mut params,
                    "bottleneck.lstm",
                    c,
                    c,
                    (h, w),
                    *peephole,
                    &mut rng,
                )?)
            }
            _ => None,
        };

        let mut decoder = Vec::with_capacity(s);
        for k in 0..s {
            let cout = cfg.decoder_channels(k);
            decoder.push(ConvLayer::new(
                &mut params,
                &format!("decoder.{k}"),
                cin,
                cout,
                3,
                1,
                1,
                &mut rng,
            )?);
            cin = cout;
        }
        let head = ConvLayer::new(&mut params, "head", cin, 1, 1, 1, 0, &mut rng)?;

        let alpha_param = match &cfg.recurrence {
            RecurrenceConfig::Ema {
                alpha,
                trainable: true,
                ..
            } => Some(params.register(
                "ema.p",
                Tensor::scalar(alpha_to_logit(*alpha)),
                ParamGroup::Alpha,
            )?),
            _ => None,
        };

        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            head,
            lstm,
            alpha_param,
            alpha_override: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterRegistry {
        &mut self.params
    }

    pub fn lstm_weights(&self) -> Option<&ConvLstmWeights> {
        self.lstm.as_ref()
    }

    /// Replace every EMA α by a fixed value at inference time (`None` restores
    /// the configured behaviour).
    pub fn set_alpha_override(&mut self, alpha: Option<f64>) -> Result<()> {
        if let Some(a) = alpha {
            if !matches!(self.cfg.recurrence, RecurrenceConfig::Ema { .. }) {
                return Err(Error::Config("alpha override needs an EMA model".into()));
            }
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("alpha {a} out of range (0, 1]")));
            }
        }
        self.alpha_override = alpha;
        Ok(())
    }

    /// α currently in effect for the EMA points, if any.
    pub fn effective_alpha(&self) -> Option<f64> {
        match &self.cfg.recurrence {
            RecurrenceConfig::Ema { alpha, .. } => Some(self.alpha_override.unwrap_or_else(|| {
                self.alpha_param
                    .map(|p| crate::tensor::sigmoid(self.params.get(p).item()))
                    .unwrap_or(*alpha)
            })),
            _ => None,
        }
    }

    pub fn alpha_param(&self) -> Option<ParamId> {
        self.alpha_param
    }

    pub fn fresh_states(&self) -> RecurrenceStates {
        let n = self.cfg.recurrence.ema_points().len();
        let lstm = self.lstm.as_ref().map(|w| {
            let (h, wd) = w.spatial();
            ConvLstmState::zeros(w.hidden_channels(), h, wd).expect("validated shape")
        });
        RecurrenceStates {
            video_id: None,
            ema: vec![EmaState::new(); n],
            lstm,
            masks: vec![None; n.max(usize::from(self.lstm.is_some()))],
        }
    }

    fn check_states(&self, states: &RecurrenceStates) -> Result<()> {
        let points = self.cfg.recurrence.ema_points();
        if states.ema.len() != points.len() || states.lstm.is_some() != self.lstm.is_some() {
            return Err(Error::State(
                "state does not belong to this model configuration".into(),
            ));
        }
        for (st, &p) in states.ema.iter().zip(points) {
            if let Some(acc) = st.accumulator() {
                let [c, h, w] = self.cfg.point_shape(p);
                if acc.shape() != [1, c, h, w] {
                    return Err(Error::State(format!(
                        "EMA state at {p} has shape {:?}, model expects {:?}",
                        acc.shape(),
                        [1, c, h, w]
                    )));
                }
            }
        }
        if let (Some(st), Some(w)) = (&states.lstm, &self.lstm) {
            let (h, wd) = w.spatial();
            let want = [1, w.hidden_channels(), h, wd];
            if st.cell.shape() != want || st.hidden.shape() != want {
                return Err(Error::State(format!(
                    "ConvLSTM state has shape {:?}, model expects {want:?}",
                    st.cell.shape()
                )));
            }
        }
        Ok(())
    }

    /// Put detached state values on the tape.
    pub fn attach_states(&self, tape: &mut Tape, states: &RecurrenceStates) -> Result<LiveStates> {
        self.check_states(states)?;
        Ok(LiveStates {
            ema: states
                .ema
                .iter()
                .map(|s| s.accumulator().map(|a| tape.constant(a.clone())))
                .collect(),
            lstm: states.lstm.as_ref().map(|l| LstmVars {
                cell: tape.constant(l.cell.clone()),
                hidden: tape.constant(l.hidden.clone()),
            }),
        })
    }

    /// Copy live state values off the tape into `states`, severing the graph.
    pub fn detach_states(&self, tape: &Tape, live: &LiveStates, states: &mut RecurrenceStates) {
        for (dst, src) in states.ema.iter_mut().zip(&live.ema) {
            *dst = match src {
                Some(v) => EmaState::with_accumulator(tape.tensor(*v)),
                None => EmaState::new(),
            };
        }
        if let (Some(dst), Some(src)) = (&mut states.lstm, &live.lstm) {
            dst.cell = tape.tensor(src.cell);
            dst.hidden = tape.tensor(src.hidden);
        }
    }

    /// Parameters as gradient-tracking leaves.
    pub fn attach_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.attach(tape)
    }

    /// Parameters as constants (inference).
    pub fn attach_params_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, _, t)| tape.constant(t.clone()))
            .collect()
    }

    pub fn frame_var(&self, tape: &mut Tape, frame: &Tensor) -> Result<Var> {
        let c = &self.cfg;
        let want = [1, c.input_channels, c.input_height, c.input_width];
        let data_ok = match frame.shape() {
            [1, ch, h, w] | [ch, h, w] => [1, *ch, *h, *w] == want,
            _ => false,
        };
        if !data_ok {
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                lhs: frame.shape().to_vec(),
                rhs: want.to_vec(),
            }
            .into());
        }
        let v = tape.constant(frame.clone());
        Ok(tape.reshape(v, want.to_vec())?)
    }

    /// Record one frame on the tape; returns the `[1,1,H,W]` saliency map.
    pub fn forward_on_tape<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        frame: Var,
        live: &mut LiveStates,
        states: &mut RecurrenceStates,
        mut dropout: Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let alpha = self.tape_alpha(tape, params);
        let mut ctx = PointCtx {
            model: self,
            tape,
            params,
            live,
            states,
            alpha,
            dropout: &mut dropout,
        };
        let mut x = frame;
        for (k, layer) in self.encoder.iter().enumerate() {
            x = layer.forward(ctx.tape, params, x)?;
            x = ctx.tape.relu(x);
            x = ctx.apply(InsertionPoint::EncoderStage(k), x)?;
            x = ctx.tape.maxpool2d(x)?;
        }
        x = ctx.apply(InsertionPoint::Bottleneck, x)?;
        for (k, layer) in self.decoder.iter().enumerate() {
            x = layer.forward(ctx.tape, params, x)?;
            x = ctx.tape.relu(x);
            x = ctx.apply(InsertionPoint::DecoderStage(k), x)?;
            x = ctx.tape.upsample_nearest(x)?;
        }
        x = self.head.forward(ctx.tape, params, x)?;
        let pre = matches!(
            self.cfg.recurrence,
            RecurrenceConfig::Ema {
                output_placement: OutputPlacement::PreSigmoid,
                ..
            }
        );
        if pre {
            x = ctx.apply(InsertionPoint::Output, x)?;
            x = ctx.tape.sigmoid(x);
        } else {
            x = ctx.tape.sigmoid(x);
            x = ctx.apply(InsertionPoint::Output, x)?;
        }
        Ok(x)
    }

    fn tape_alpha(&self, tape: &mut Tape, params: &[Var]) -> Alpha {
        match (self.alpha_override, self.alpha_param, &self.cfg.recurrence) {
            (Some(a), _, _) => Alpha::Fixed(a),
            (None, Some(p), _) => Alpha::learned(tape, params[p.index()]),
            (None, None, RecurrenceConfig::Ema { alpha, .. }) => Alpha::Fixed(*alpha),
            _ => Alpha::Fixed(1.0),
        }
    }

    /// Advance `states` by one frame and return the saliency map.
    pub fn forward_frame<R: Rng>(
        &self,
        frame: &Tensor,
        states: &mut RecurrenceStates,
        training: bool,
        rng: &mut R,
    ) -> Result<SaliencyMap> {
        let mut tape = Tape::new();
        let params = self.attach_params_frozen(&mut tape);
        let mut live = self.attach_states(&mut tape, states)?;
        let x = self.frame_var(&mut tape, frame)?;
        let dropout = training.then_some(Dropout { rng });
        let out = self.forward_on_tape(&mut tape, &params, x, &mut live, states, dropout)?;
        self.detach_states(&tape, &live, states);
        SaliencyMap::from_tensor(tape.tensor(out))
    }

    /// Inference-mode [`Model::forward_frame`].
    pub fn predict_frame(
        &self,
        frame: &Tensor,
        states: &mut RecurrenceStates,
    ) -> Result<SaliencyMap> {
        self.forward_frame(frame, states, false, &mut NoRng)
    }

    /// Fold [`Model::forward_frame`] over `frames` starting from a reset state.
    pub fn forward_sequence<R: Rng>(
        &self,
        frames: &[Tensor],
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<SaliencyMap>> {
        if frames.is_empty() {
            return Err(Error::Invalid(
                "forward_sequence needs at least one frame".into(),
            ));
        }
        let mut states = self.fresh_states();
        frames
            .iter()
            .map(|f| self.forward_frame(f, &mut states, training, rng))
            .collect()
    }

    pub fn predict_sequence(&self, frames: &[Tensor]) -> Result<Vec<SaliencyMap>> {
        self.forward_sequence(frames, false, &mut NoRng)
    }
}

/// RNG stand-in for inference paths, where dropout never draws.
#[derive(Debug, Clone, Copy)]
pub struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("no randomness at inference")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("no randomness at inference")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("no randomness at inference")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("no randomness at inference")
    }
}

struct PointCtx<'a, 'r, R: Rng> {
    model: &'a Model,
    tape: &'a mut Tape,
    params: &'a [Var],
    live: &'a mut LiveStates,
    states: &'a mut RecurrenceStates,
    alpha: Alpha,
    dropout: &'a mut Option<Dropout<'r, R>>,
}

impl<R: Rng> PointCtx<'_, '_, R> {
    fn apply(&mut self, point: InsertionPoint, x: Var) -> Result<Var> {
        let cfg = &self.model.cfg;
        let (slot, is_lstm) = match &cfg.recurrence {
            RecurrenceConfig::None => return Ok(x),
            RecurrenceConfig::Ema { points, .. } => match points.iter().position(|&p| p == point) {
                Some(i) => (i, false),
                None => return Ok(x),
            },
            RecurrenceConfig::ConvLstm { at, .. } if *at == point => (0, true),
            RecurrenceConfig::ConvLstm { .. } => return Ok(x),
        };
        let x = self.maybe_dropout(slot, x)?;
        if is_lstm {
            let (w, output) = match (&self.model.lstm, &cfg.recurrence) {
                (Some(w), RecurrenceConfig::ConvLstm { output, .. }) => (w, *output),
                _ => unreachable!("ConvLSTM config without weights"),
            };
            let prev = self.live.lstm.expect("ConvLSTM state attached");
            let step = convlstm_step_on_tape(self.tape, self.params, w, x, prev)?;
            self.live.lstm = Some(step.state());
            return Ok(step.routed(output));
        }
        let residual = matches!(cfg.recurrence, RecurrenceConfig::Ema { residual: true, .. });
        let step = ema_step_on_tape(self.tape, x, self.live.ema[slot], self.alpha, residual)?;
        self.live.ema[slot] = Some(step.accumulator);
        Ok(step.output)
    }

    fn maybe_dropout(&mut self, slot: usize, x: Var) -> Result<Var> {
        let cfg = &self.model.cfg;
        let Some(d) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if !cfg.dropout_before_recurrence || cfg.dropout_p == 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x).to_vec();
        let mask = match cfg.dropout_mask {
            DropoutMask::PerFrame => dropout_mask(&shape, cfg.dropout_p, d.rng)?,
            DropoutMask::PerVideo => match &self.states.masks[slot] {
                Some(m) => m.clone(),
                None => {
                    let m = dropout_mask(&shape, cfg.dropout_p, d.rng)?;
                    self.states.masks[slot] = Some(m.clone());
                    m
                }
            },
        };
        apply_mask(self.tape, x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn(vec![1, 1, 16, 16], |_| rng.gen::<f64>()).unwrap())
            .collect()
    }

    fn small(recurrence: RecurrenceConfig) -> ModelConfig {
        ModelConfig {
            input_height: 16,
            input_width: 16,
            stages: 2,
            base_channels: 4,
            seed: 11,
            recurrence,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn insertion_point_round_trip() {
        for p in [
            InsertionPoint::EncoderStage(1),
            InsertionPoint::Bottleneck,
            InsertionPoint::DecoderStage(2),
            InsertionPoint::Output,
        ] {
            assert_eq!(p.to_string().parse::<InsertionPoint>().unwrap(), p);
        }
        assert!("middle".parse::<InsertionPoint>().is_err());
        assert!("encoder:x".parse::<InsertionPoint>().is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        let model = Model::build(cfg.clone()).unwrap();
        // encoder 1→8→16→32, decoder 32→16→8→8, head 8→1 (1×1)
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let expected = conv(1, 8, 3)
            + conv(8, 16, 3)
            + conv(16, 32, 3)
            + conv(32, 16, 3)
            + conv(16, 8, 3)
            + conv(8, 8, 3)
            + conv(8, 1, 1);
        assert_eq!(model.params().num_scalars(), expected);
        assert_eq!(cfg.point_shape(InsertionPoint::Bottleneck), [32, 4, 4]);

        let lstm = Model::build(ModelConfig {
            recurrence: RecurrenceConfig::convlstm(),
            ..cfg
        })
        .unwrap();
        let ch = 32;
        let extra = 4 * (ch * ch * 9 + ch * ch * 9 + ch) + 3 * ch * 4 * 4;
        assert_eq!(lstm.params().num_scalars(), expected + extra);
    }

    #[test]
    fn build_rejects_indivisible_size() {
        let cfg = ModelConfig {
            input_height: 33,
            ..ModelConfig::default()
        };
        assert!(matches!(Model::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn build_rejects_bad_recurrence() {
        let bad = [
            RecurrenceConfig::ema(0.0, vec![InsertionPoint::Bottleneck]),
            RecurrenceConfig::ema(0.1, vec![]),
            RecurrenceConfig::ema(0.1, vec![InsertionPoint::EncoderStage(5)]),
            RecurrenceConfig::ema(
                0.1,
                vec![
                    InsertionPoint::Output,
                    InsertionPoint::Bottleneck,
                    InsertionPoint::EncoderStage(0),
                ],
            ),
            RecurrenceConfig::ConvLstm {
                at: InsertionPoint::Output,
                output: LstmOutput::Cell,
                peephole: Peephole::PerElement,
            },
            RecurrenceConfig::Ema {
                alpha: 0.1,
                trainable: false,
                residual: true,
                points: vec![InsertionPoint::Output],
                output_placement: OutputPlacement::PostSigmoid,
            },
        ];
        for r in bad {
            assert!(Model::build(small(r.clone())).is_err(), "{r:?}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(small(RecurrenceConfig::None)).unwrap();
        let b = Model::build(small(RecurrenceConfig::None)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn stateless_model_ignores_order() {
        let m = Model::build(small(RecurrenceConfig::None)).unwrap();
        let fs = frames(3, 1);
        let fwd = m.predict_sequence(&fs).unwrap();
        let rev: Vec<_> = fs.iter().rev().cloned().collect();
        let bwd = m.predict_sequence(&rev).unwrap();
        for (a, b) in fwd.iter().zip(bwd.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn alpha_one_matches_stateless_bitwise() {
        let plain = Model::build(small(RecurrenceConfig::None)).unwrap();
        let fs = frames(4, 2);
        let base = plain.predict_sequence(&fs).unwrap();
        for point in [
            InsertionPoint::EncoderStage(0),
            InsertionPoint::Bottleneck,
            InsertionPoint::DecoderStage(1),
            InsertionPoint::Output,
        ] {
            let m = Model::build(small(RecurrenceConfig::ema(1.0, vec![point]))).unwrap();
            assert_eq!(m.params(), plain.params());
            let out = m.predict_sequence(&fs).unwrap();
            for (a, b) in base.iter().zip(&out) {
                let same = a
                    .values()
                    .iter()
                    .zip(b.values())
                    .all(|(x, y)| x.to_bits() == y.to_bits());
                assert!(same, "α=1 at {point} differs");
            }
        }
    }

    #[test]
    fn constant_video_constant_output() {
        let f = frames(1, 3).remove(0);
        let fs = vec![f; 5];
        for alpha in [0.05, 0.3, 0.7] {
            let m = Model::build(small(RecurrenceConfig::ema(
                alpha,
                vec![InsertionPoint::Bottleneck],
            )))
            .unwrap();
            let out = m.predict_sequence(&fs).unwrap();
            for o in &out[1..] {
                for (x, y) in o.values().iter().zip(out[0].values()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_range_and_state_mismatch() {
        let m = Model::build(small(RecurrenceConfig::convlstm())).unwrap();
        let out = m.predict_sequence(&frames(3, 4)).unwrap();
        for o in &out {
            assert!(o.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let other = Model::build(small(RecurrenceConfig::ema(
            0.2,
            vec![InsertionPoint::Bottleneck],
        )))
        .unwrap();
        let mut foreign = other.fresh_states();
        assert!(m.predict_frame(&frames(1, 5)[0], &mut foreign).is_err());

        let wide = Model::build(ModelConfig {
            base_channels: 8,
            ..small(RecurrenceConfig::ema(0.2, vec![InsertionPoint::Bottleneck]))
        })
        .unwrap();
        let mut st = wide.fresh_states();
        wide.predict_frame(&frames(1, 6)[0], &mut st).unwrap();
        assert!(other.predict_frame(&frames(1, 6)[0], &mut st).is_err());
    }

    #[test]
    fn empty_sequence_rejected() {
        let m = Model::build(small(RecurrenceConfig::None)).unwrap();
        assert!(m.predict_sequence(&[]).is_err());
    }

    #[test]
    fn wrong_frame_shape_rejected() {
        let m = Model::build(small(RecurrenceConfig::None)).unwrap();
        let mut st = m.fresh_states();
        let f = Tensor::zeros(vec![1, 1, 8, 8]).unwrap();
        assert!(m.predict_frame(&f, &mut st).is_err());
    }

    #[test]
    fn dual_points_keep_independent_states() {
        let m = Model::build(small(RecurrenceConfig::ema(
            0.3,
            vec![
                InsertionPoint::EncoderStage(1),
                InsertionPoint::DecoderStage(1),
            ],
        )))
        .unwrap();
        let mut st = m.fresh_states();
        for f in frames(3, 7) {
            m.predict_frame(&f, &mut st).unwrap();
        }
        assert_eq!(st.ema.len(), 2);
        assert_eq!(st.ema[0].accumulator().unwrap().shape(), &[1, 8, 8, 8]);
        assert_eq!(st.ema[1].accumulator().unwrap().shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn per_video_dropout_mask_is_reused() {
        let mut cfg = small(RecurrenceConfig::ema(0.5, vec![InsertionPoint::Bottleneck]));
        cfg.dropout_before_recurrence = true;
        cfg.dropout_mask = DropoutMask::PerVideo;
        let m = Model::build(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = m.fresh_states();
        let f = frames(1, 8).remove(0);
        m.forward_frame(&f, &mut st, true, &mut rng).unwrap();
        let mask = st.masks[0].clone().unwrap();
        m.forward_frame(&f, &mut st, true, &mut rng).unwrap();
        assert_eq!(st.masks[0].as_ref(), Some(&mask));
        st.reset();
        assert!(st.masks[0].is_none());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ModelConfig {
            recurrence: RecurrenceConfig::ema(
                0.3,
                vec![
                    InsertionPoint::EncoderStage(1),
                    InsertionPoint::DecoderStage(2),
                ],
            ),
            ..ModelConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<ModelConfig>("stages = 2\nbogus = 1\n").is_err());
        assert!(
            toml::from_str::<ModelConfig>("[recurrence]\nkind = \"ema\"\nalhpa = 0.2\n").is_err()
        );
    }
}
