//! Temporal recurrences: the exponential moving average and the ConvLSTM cell.
//!
//! Each recurrence exists at two levels. The `*_on_tape` functions record the
//! step on a [`Tape`] so gradients flow through the unrolled sequence; the
//! plain functions operate on detached [`Tensor`] values and are what the
//! inference path and the invariant tests use.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{xavier_uniform, ParamGroup, ParamId, ParameterRegistry};
use crate::tensor::{sigmoid, Tape, Tensor, TensorError, Var};

/// Accumulator `E_{t-1}`; empty before the first frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmaState {
    accumulator: Option<Tensor>,
}

impl EmaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulator(&self) -> Option<&Tensor> {
        self.accumulator.as_ref()
    }

    pub fn with_accumulator(accumulator: Tensor) -> Self {
        Self {
            accumulator: Some(accumulator),
        }
    }

    pub fn reset(&mut self) {
        self.accumulator = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaConfig {
    pub alpha: f64,
    pub trainable: bool,
    /// Pre-sigmoid mixing parameter, used when `trainable`.
    pub p: Option<Tensor>,
    pub residual: bool,
}

impl EmaConfig {
    pub fn fixed(alpha: f64) -> Self {
        Self {
            alpha,
            trainable: false,
            p: None,
            residual: false,
        }
    }

    pub fn trainable(p: f64) -> Self {
        Self {
            alpha: sigmoid(p),
            trainable: true,
            p: Some(Tensor::scalar(p)),
            residual: false,
        }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }
}

/// `α` for fixed configs, `σ(p)` for trainable ones.
pub fn effective_alpha(cfg: &EmaConfig) -> f64 {
    match (&cfg.p, cfg.trainable) {
        (Some(p), true) => sigmoid(p.item()),
        _ => cfg.alpha,
    }
}

/// Inverse of the logistic function, for initialising `p` from a target α.
pub fn alpha_to_logit(alpha: f64) -> f64 {
    (alpha / (1.0 - alpha)).ln()
}

/// Mixing weight as seen by the tape.
#[derive(Debug, Clone, Copy)]
pub enum Alpha {
    Fixed(f64),
    /// `alpha = σ(p)` and `complement = 1 - σ(p)`, both on the tape.
    Learned {
        alpha: Var,
        complement: Var,
    },
}

impl Alpha {
    /// Record `σ(p)` and `1 - σ(p)` for a trainable parameter `p`.
    pub fn learned(tape: &mut Tape, p: Var) -> Self {
        let alpha = tape.sigmoid(p);
        let complement = tape.affine(alpha, -1.0, 1.0);
        Alpha::Learned { alpha, complement }
    }
}

/// Output of one EMA step on the tape.
#[derive(Debug, Clone, Copy)]
pub struct EmaStep {
    /// Value passed downstream (`s + e` when residual).
    pub output: Var,
    /// New accumulator `E_t`.
    pub accumulator: Var,
}

/// `E_t = α S_t + (1-α) E_{t-1}`, with `E_0 = S_0`.
pub fn ema_step_on_tape(
    tape: &mut Tape,
    s: Var,
    prev: Option<Var>,
    alpha: Alpha,
    residual: bool,
) -> Result<EmaStep> {
    let e = match prev {
        None => s,
        Some(prev) => {
            if tape.shape(prev) != tape.shape(s) {
                return Err(TensorError::ShapeMismatch {
                    op: "ema_step",
                    lhs: tape.shape(s).to_vec(),
                    rhs: tape.shape(prev).to_vec(),
                }
                .into());
            }
            let (cur, past) = match alpha {
                Alpha::Fixed(a) => (tape.scale(s, a), tape.scale(prev, 1.0 - a)),
                Alpha::Learned { alpha, complement } => {
                    (tape.scale_by(alpha, s)?, tape.scale_by(complement, prev)?)
                }
            };
            tape.add(cur, past)?
        }
    };
    let output = if residual { tape.add(s, e)? } else { e };
    Ok(EmaStep {
        output,
        accumulator: e,
    })
}

/// Value-level EMA step.
pub fn ema_step(s_t: &Tensor, state: &EmaState, cfg: &EmaConfig) -> Result<(Tensor, EmaState)> {
    let mut tape = Tape::new();
    let s = tape.constant(s_t.clone());
    let prev = state.accumulator.as_ref().map(|a| tape.constant(a.clone()));
    let step = ema_step_on_tape(
        &mut tape,
        s,
        prev,
        Alpha::Fixed(effective_alpha(cfg)),
        cfg.residual,
    )?;
    Ok((
        tape.tensor(step.output),
        EmaState::with_accumulator(tape.tensor(step.accumulator)),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Peephole {
    /// One weight per channel and position, `[Ch,H,W]`.
    #[default]
    PerElement,
    /// One weight per channel, `[Ch,1,1]`.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LstmOutput {
    /// Route the cell state `C_t` downstream.
    #[default]
    Cell,
    /// Route the hidden state `H_t` downstream.
    Hidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState {
    pub cell: Tensor,
    pub hidden: Tensor,
}

impl ConvLstmState {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        let shape = vec![1, channels, height, width];
        Ok(Self {
            cell: Tensor::zeros(shape.clone())?,
            hidden: Tensor::zeros(shape)?,
        })
    }

    pub fn reset(&mut self) {
        self.cell.data_mut().fill(0.0);
        self.hidden.data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone)]
struct GateWeights {
    input_kernel: ParamId,
    hidden_kernel: ParamId,
    bias: ParamId,
}

const GATES: [&str; 4] = ["update", "forget", "output", "candidate"];

/// Parameters of one ConvLSTM cell, stored in a [`ParameterRegistry`].
#[derive(Debug, Clone)]
pub struct ConvLstmWeights {
    gates: Vec<GateWeights>,
    /// Peepholes for the update, forget and output gates.
    peepholes: Vec<ParamId>,
    input_channels: usize,
    hidden_channels: usize,
    height: usize,
    width: usize,
}

pub const LSTM_KERNEL: usize = 3;

impl ConvLstmWeights {
    /// Register Xavier-initialised 3×3 kernels, zero biases and zero peepholes.
    pub fn new(
        registry: &mut ParameterRegistry,
        prefix: &str,
        input_channels: usize,
        hidden_channels: usize,
        (height, width): (usize, usize),
        peephole: Peephole,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let area = LSTM_KERNEL * LSTM_KERNEL;
        let mut gates = Vec::with_capacity(4);
        for gate in GATES {
            let ws = xavier_uniform(
                vec![hidden_channels, input_channels, LSTM_KERNEL, LSTM_KERNEL],
                input_channels * area,
                hidden_channels * area,
                rng,
            )?;
            let wh = xavier_uniform(
                vec![hidden_channels, hidden_channels, LSTM_KERNEL, LSTM_KERNEL],
                hidden_channels * area,
                hidden_channels * area,
                rng,
            )?;
            gates.push(GateWeights {
                input_kernel: registry.register(
                    format!("{prefix}.{gate}.input_kernel"),
                    ws,
                    ParamGroup::Weights,
                )?,
                hidden_kernel: registry.register(
                    format!("{prefix}.{gate}.hidden_kernel"),
                    wh,
                    ParamGroup::Weights,
                )?,
                bias: registry.register(
                    format!("{prefix}.{gate}.bias"),
                    Tensor::zeros(vec![hidden_channels])?,
                    ParamGroup::Weights,
                )?,
            });
        }
        let peep_shape = match peephole {
            Peephole::PerElement => vec![hidden_channels, height, width],
            Peephole::PerChannel => vec![hidden_channels, 1, 1],
        };
        let mut peepholes = Vec::with_capacity(3);
        for gate in &GATES[..3] {
            peepholes.push(registry.register(
                format!("{prefix}.{gate}.peephole"),
                Tensor::zeros(peep_shape.clone())?,
                ParamGroup::Weights,
            )?);
        }
        Ok(Self {
            gates,
            peepholes,
            input_channels,
            hidden_channels,
            height,
            width,
        })
    }

    pub fn hidden_channels(&self) -> usize {
        self.hidden_channels
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// All parameter ids owned by the cell.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.gates
            .iter()
            .flat_map(|g| [g.input_kernel, g.hidden_kernel, g.bias])
            .chain(self.peepholes.iter().copied())
            .collect()
    }
}

/// Live `(C, H)` pair on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub cell: Var,
    pub hidden: Var,
}

/// Everything one ConvLSTM step records, gates included for inspection.
#[derive(Debug, Clone, Copy)]
pub struct LstmStep {
    pub cell: Var,
    pub hidden: Var,
    pub update: Var,
    pub forget: Var,
    pub output: Var,
}

impl LstmStep {
    pub fn routed(&self, output: LstmOutput) -> Var {
        match output {
            LstmOutput::Cell => self.cell,
            LstmOutput::Hidden => self.hidden,
        }
    }

    pub fn state(&self) -> LstmVars {
        LstmVars {
            cell: self.cell,
            hidden: self.hidden,
        }
    }
}

/// One ConvLSTM step with peepholes:
///
/// ```text
/// g_t = σ(W_g^S * S_t + W_g^H * H_{t-1} + W_g^C ∘ C_{t-1} + b_g)   g ∈ {u, f, o}
/// C_t = f_t ∘ C_{t-1} + u_t ∘ tanh(W_C^S * S_t + W_C^H * H_{t-1} + b_C)
/// H_t = o_t ∘ tanh(C_t)
/// ```
///
/// `params` are the registry's tape leaves, indexed by [`ParamId`].
pub fn convlstm_step_on_tape(
    tape: &mut Tape,
    params: &[Var],
    w: &ConvLstmWeights,
    s: Var,
    prev: LstmVars,
) -> Result<LstmStep> {
    let ss = tape.shape(s).to_vec();
    let cs = tape.shape(prev.cell).to_vec();
    if ss.len() != 4 || cs.len() != 4 || ss[2..] != cs[2..] || ss[1] != w.input_channels {
        return Err(TensorError::ShapeMismatch {
            op: "convlstm_step",
            lhs: ss,
            rhs: cs,
        }
        .into());
    }
    let pad = LSTM_KERNEL / 2;
    let mut pre = Vec::with_capacity(4);
    for (i, g) in w.gates.iter().enumerate() {
        let a = tape.conv2d(
            s,
            params[g.input_kernel.index()],
            Some(params[g.bias.index()]),
            1,
            pad,
        )?;
        let b = tape.conv2d(prev.hidden, params[g.hidden_kernel.index()], None, 1, pad)?;
        let mut z = tape.add(a, b)?;
        if i < 3 {
            let c = tape.scale_channels(prev.cell, params[w.peepholes[i].index()])?;
            z = tape.add(z, c)?;
        }
        pre.push(z);
    }
    let update = tape.sigmoid(pre[0]);
    let forget = tape.sigmoid(pre[1]);
    let output = tape.sigmoid(pre[2]);
    let candidate = tape.tanh(pre[3]);
    let keep = tape.mul(forget, prev.cell)?;
    let write = tape.mul(update, candidate)?;
    let cell = tape.add(keep, write)?;
    let squashed = tape.tanh(cell);
    let hidden = tape.mul(output, squashed)?;
    Ok(LstmStep {
        cell,
        hidden,
        update,
        forget,
        output,
    })
}

/// Value-level ConvLSTM step. Returns the routed output and the new state.
pub fn convlstm_step(
    registry: &ParameterRegistry,
    w: &ConvLstmWeights,
    s_t: &Tensor,
    state: &ConvLstmState,
    routing: LstmOutput,
) -> Result<(Tensor, ConvLstmState)> {
    if state.cell.shape() != state.hidden.shape() {
        return Err(Error::State(format!(
            "cell {:?} and hidden {:?} shapes differ",
            state.cell.shape(),
            state.hidden.shape()
        )));
    }
    let mut tape = Tape::new();
    let params: Vec<Var> = registry
        .iter()
        .map(|(_, _, t)| tape.constant(t.clone()))
        .collect();
    let s = tape.constant(s_t.clone());
    let prev = LstmVars {
        cell: tape.constant(state.cell.clone()),
        hidden: tape.constant(state.hidden.clone()),
    };
    let step = convlstm_step_on_tape(&mut tape, &params, w, s, prev)?;
    Ok((
        tape.tensor(step.routed(routing)),
        ConvLstmState {
            cell: tape.tensor(step.cell),
            hidden: tape.tensor(step.hidden),
        },
    ))
}
