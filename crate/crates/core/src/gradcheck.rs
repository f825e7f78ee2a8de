//! Central finite-difference verification of tape gradients.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::ParameterRegistry;
use crate::model::{InsertionPoint, Model, ModelConfig, NoRng, RecurrenceConfig};
use crate::recurrence::{
    convlstm_step_on_tape, ema_step_on_tape, Alpha, ConvLstmWeights, LstmOutput, LstmVars, Peephole,
};
use crate::tensor::{Tape, Tensor, Var};

use crate::training::BCE_EPS;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed `|a - fd| / max(|a|, |fd|, 1e-8)`.
    pub tolerance: f64,
    /// Multiply analytic gradients by this factor before comparing. Only
    /// useful as a negative control.
    pub corrupt: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements whose perturbation crossed a relu, maxpool or clamp boundary.
    pub skipped: usize,
    pub passed: bool,
}

impl fmt::Display for OpReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<32} max_rel_err={:.3e} ({} elements",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.checked
        )?;
        if self.skipped > 0 {
            write!(f, ", {} skipped at kinks", self.skipped)?;
        }
        write!(f, ")")
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the tape gradient of `sum(f(inputs))` against central differences
/// for every element of every input. The quotient is summed from per-element
/// differences of `f`'s output, so a loss returned unreduced keeps the
/// rounding of its O(1) total out of the comparison. Elements whose `±step`
/// perturbation changes a relu sign, maxpool winner or BCE clamp region are
/// skipped, since the difference quotient then straddles a kink.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<OpReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let base_pattern = tape.branch_pattern();
    let loss = tape.sum(out);
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<(Vec<f64>, bool)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let smooth = tape.branch_pattern() == base_pattern;
        Ok((tape.value(out).to_vec(), smooth))
    };

    let mut work = inputs.to_vec();
    let mut max_err = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let (up, up_smooth) = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let (down, down_smooth) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if !(up_smooth && down_smooth) {
                skipped += 1;
                continue;
            }
            let fd = up.iter().zip(&down).map(|(u, d)| u - d).sum::<f64>() / (2.0 * opts.step);
            let a = a * opts.corrupt.unwrap_or(1.0);
            max_err = max_err.max(relative_error(a, fd));
            checked += 1;
        }
    }
    Ok(OpReport {
        name: name.to_string(),
        max_rel_err: max_err,
        checked,
        skipped,
        passed: max_err < opts.tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Tensor,
    Recurrence,
    Model,
    Loss,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(Self::Tensor),
            "recurrence" => Ok(Self::Recurrence),
            "model" => Ok(Self::Model),
            "loss" => Ok(Self::Loss),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!(
                "unknown gradcheck module {s:?} (tensor, recurrence, model, loss, all)"
            ))),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi)).expect("positive shape")
}

/// Uniform in [-2, 2] but at least `margin` away from 0 (relu kink).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(margin..2.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .expect("positive shape")
}

/// `Σ w ⊙ y` with fixed random weights, turning any output into a scalar.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Case = (
    String,
    Vec<Tensor>,
    Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
);

fn tensor_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let s = rng.gen::<u64>();
    let x = |rng: &mut ChaCha8Rng, shape: &[usize]| uniform(rng, shape, -2.0, 2.0);
    vec![
        (
            "conv2d (stride 1, pad 1)".into(),
            vec![x(rng, &[2, 2, 5, 5]), x(rng, &[3, 2, 3, 3]), x(rng, &[3])],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "conv2d (stride 2, pad 0)".into(),
            vec![x(rng, &[1, 2, 7, 6]), x(rng, &[2, 2, 3, 2]), x(rng, &[2])],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 0)?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "maxpool2d".into(),
            vec![x(rng, &[1, 2, 4, 6])],
            Box::new(move |t, v| {
                let y = t.maxpool2d(v[0])?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "upsample_nearest".into(),
            vec![x(rng, &[1, 2, 3, 2])],
            Box::new(move |t, v| {
                let y = t.upsample_nearest(v[0])?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "sigmoid".into(),
            vec![x(rng, &[12])],
            Box::new(move |t, v| {
                let y = t.sigmoid(v[0]);
                weighted_sum(t, y, s)
            }),
        ),
        (
            "tanh".into(),
            vec![x(rng, &[12])],
            Box::new(move |t, v| {
                let y = t.tanh(v[0]);
                weighted_sum(t, y, s)
            }),
        ),
        (
            "relu".into(),
            vec![away_from_zero(rng, &[12], 1e-3)],
            Box::new(move |t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y, s)
            }),
        ),
        (
            "add/sub/mul/scale".into(),
            vec![x(rng, &[2, 3]), x(rng, &[2, 3]), x(rng, &[2, 3])],
            Box::new(move |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.mul(a, v[2])?;
                let c = t.sub(b, v[0])?;
                let d = t.scale(c, -0.7);
                let e = t.affine(d, 1.3, 0.2);
                weighted_sum(t, e, s)
            }),
        ),
        (
            "scale_by".into(),
            vec![x(rng, &[1]), x(rng, &[2, 3])],
            Box::new(move |t, v| {
                let y = t.scale_by(v[0], v[1])?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "scale_channels (per element)".into(),
            vec![x(rng, &[2, 2, 2, 3]), x(rng, &[2, 2, 3])],
            Box::new(move |t, v| {
                let y = t.scale_channels(v[0], v[1])?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "scale_channels (per channel)".into(),
            vec![x(rng, &[2, 2, 2, 3]), x(rng, &[2, 1, 1])],
            Box::new(move |t, v| {
                let y = t.scale_channels(v[0], v[1])?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "reshape/mean".into(),
            vec![x(rng, &[2, 6])],
            Box::new(move |t, v| {
                let r = t.reshape(v[0], vec![3, 4])?;
                let q = t.mul(r, r)?;
                Ok(t.mean(q))
            }),
        ),
    ]
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    vec![(
        "bce".into(),
        vec![
            uniform(rng, &[1, 1, 4, 4], 0.05, 0.95),
            uniform(rng, &[1, 1, 4, 4], 0.0, 1.0),
        ],
        Box::new(|t, v| Ok(t.bce(v[0], v[1], BCE_EPS)?)),
    ), (
        "bce (per element)".into(),
        vec![
            uniform(rng, &[1, 1, 4, 4], 0.05, 0.95),
            uniform(rng, &[1, 1, 4, 4], 0.0, 1.0),
        ],
        Box::new(|t, v| Ok(t.bce_map(v[0], v[1], BCE_EPS)?)),
    )]
}

const UNROLL: usize = 5;

fn ema_case(rng: &mut ChaCha8Rng, name: &str, trainable: bool, residual: bool) -> Case {
    let mut inputs: Vec<Tensor> = (0..UNROLL)
        .map(|_| uniform(rng, &[1, 2, 3, 3], -2.0, 2.0))
        .collect();
    if trainable {
        inputs.push(uniform(rng, &[1], -2.0, 2.0));
    }
    let s = rng.gen::<u64>();
    (
        name.into(),
        inputs,
        Box::new(move |t, v| {
            let alpha = if trainable {
                Alpha::learned(t, v[UNROLL])
            } else {
                Alpha::Fixed(0.3)
            };
            let mut acc = None;
            let mut total = None;
            for (k, &x) in v[..UNROLL].iter().enumerate() {
                // Nonlinearity between steps so every frame matters differently.
                let x = t.tanh(x);
                let step = ema_step_on_tape(t, x, acc, alpha, residual)?;
                acc = Some(step.accumulator);
                let l = weighted_sum(t, step.output, s + k as u64)?;
                total = Some(match total {
                    None => l,
                    Some(p) => t.add(p, l)?,
                });
            }
            Ok(total.expect("non-empty unroll"))
        }),
    )
}

fn lstm_case(rng: &mut ChaCha8Rng, peephole: Peephole) -> Result<Case> {
    let (cin, ch, h, w) = (2, 2, 3, 3);
    let mut reg = ParameterRegistry::new();
    let weights = ConvLstmWeights::new(&mut reg, "lstm", cin, ch, (h, w), peephole, rng)?;
    let mut inputs: Vec<Tensor> = reg
        .iter()
        .map(|(_, _, t)| {
            // Random peepholes and biases instead of the zero init.
            uniform(rng, t.shape(), -0.5, 0.5)
        })
        .collect();
    let n_params = inputs.len();
    for _ in 0..UNROLL {
        inputs.push(uniform(rng, &[1, cin, h, w], -2.0, 2.0));
    }
    let s = rng.gen::<u64>();
    let name = match peephole {
        Peephole::PerElement => "convlstm 5-step (per-element peephole)",
        Peephole::PerChannel => "convlstm 5-step (per-channel peephole)",
    };
    Ok((
        name.into(),
        inputs,
        Box::new(move |t, v| {
            let params = &v[..n_params];
            let zeros = Tensor::zeros(vec![1, ch, h, w])?;
            let mut state = LstmVars {
                cell: t.constant(zeros.clone()),
                hidden: t.constant(zeros),
            };
            let mut total = None;
            for (k, &x) in v[n_params..].iter().enumerate() {
                let step = convlstm_step_on_tape(t, params, &weights, x, state)?;
                state = step.state();
                let lc = weighted_sum(t, step.cell, s + 2 * k as u64)?;
                let lh = weighted_sum(t, step.hidden, s + 2 * k as u64 + 1)?;
                let l = t.add(lc, lh)?;
                total = Some(match total {
                    None => l,
                    Some(p) => t.add(p, l)?,
                });
            }
            Ok(total.expect("non-empty unroll"))
        }),
    ))
}

fn recurrence_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    Ok(vec![
        ema_case(rng, "ema 5-step (fixed alpha)", false, false),
        ema_case(rng, "ema 5-step (residual)", false, true),
        ema_case(rng, "ema 5-step (trainable alpha)", true, false),
        lstm_case(rng, Peephole::PerElement)?,
        lstm_case(rng, Peephole::PerChannel)?,
    ])
}

/// Tiny model unrolled over a 3-frame clip with mean BCE loss.
// Model clips: one stage and 5 frames on an 8x8 input. Deeper or thinner nets
// leave some parameters with gradients near 1e-10, below what central
// differences at h=1e-5 resolve in f64.
const CLIP_STAGES: usize = 1;
const CLIP_BASE: usize = 3;
const CLIP_GAIN: f64 = 1.5;
const CLIP_FRAMES: usize = 5;

fn model_case(rng: &mut ChaCha8Rng, name: &str, recurrence: RecurrenceConfig) -> Result<Case> {
    let cfg = ModelConfig {
        input_height: 8,
        input_width: 8,
        stages: CLIP_STAGES,
        base_channels: CLIP_BASE,
        seed: rng.gen(),
        recurrence,
        ..ModelConfig::default()
    };
    let model = Model::build(cfg)?;
    let mut inputs: Vec<Tensor> = model.params().iter().map(|(_, _, t)| t.clone()).collect();
    // Kernels keep the Xavier draw scaled by `CLIP_GAIN`; biases get small random
    // offsets so relu inputs avoid exact ties.
    for t in inputs.iter_mut() {
        if t.shape().len() == 1 && t.numel() > 1 {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        } else if t.shape().len() == 4 {
            for v in t.data_mut() {
                *v *= CLIP_GAIN;
            }
        } else if t.shape().len() == 3 {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let n_params = inputs.len();
    let frames: Vec<Tensor> = (0..CLIP_FRAMES)
        .map(|_| uniform(rng, &[1, 1, 8, 8], 0.0, 1.0))
        .collect();
    let gts: Vec<Tensor> = (0..CLIP_FRAMES)
        .map(|_| uniform(rng, &[1, 1, 8, 8], 0.0, 1.0))
        .collect();
    Ok((
        name.into(),
        inputs,
        Box::new(move |t, v| {
            let params = &v[..n_params];
            let mut states = model.fresh_states();
            let mut live = model.attach_states(t, &states)?;
            // Per-pixel terms whose sum is the clip's mean BCE.
            let mut total = None;
            for (f, g) in frames.iter().zip(&gts) {
                let x = model.frame_var(t, f)?;
                let out =
                    model.forward_on_tape::<NoRng>(t, params, x, &mut live, &mut states, None)?;
                let gt = t.constant(g.clone());
                let l = t.bce_map(out, gt, BCE_EPS)?;
                total = Some(match total {
                    None => l,
                    Some(p) => t.add(p, l)?,
                });
            }
            let total = total.expect("frames");
            let n = t.value(total).len() * CLIP_FRAMES;
            Ok(t.scale(total, 1.0 / n as f64))
        }),
    ))
}

fn model_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let hidden = RecurrenceConfig::ConvLstm {
        at: InsertionPoint::Bottleneck,
        output: LstmOutput::Hidden,
        peephole: Peephole::PerElement,
    };
    let trainable = RecurrenceConfig::Ema {
        alpha: 0.3,
        trainable: true,
        residual: false,
        points: vec![InsertionPoint::Bottleneck],
        output_placement: Default::default(),
    };
    Ok(vec![
        model_case(
            rng,
            "model clip (ema bottleneck)",
            RecurrenceConfig::ema(0.1, vec![InsertionPoint::Bottleneck]),
        )?,
        model_case(rng, "model clip (ema trainable)", trainable)?,
        model_case(rng, "model clip (convlstm)", RecurrenceConfig::convlstm())?,
        model_case(rng, "model clip (convlstm hidden)", hidden)?,
    ])
}

/// Run the finite-difference suite for one module (or all of them).
pub fn run_suite(suite: Suite, seed: u64, opts: &GradCheckOptions) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    if matches!(suite, Suite::Tensor | Suite::All) {
        cases.extend(tensor_cases(&mut rng));
    }
    if matches!(suite, Suite::Recurrence | Suite::All) {
        cases.extend(recurrence_cases(&mut rng)?);
    }
    if matches!(suite, Suite::Model | Suite::All) {
        cases.extend(model_cases(&mut rng)?);
    }
    if matches!(suite, Suite::Loss | Suite::All) {
        cases.extend(loss_cases(&mut rng));
    }
    cases
        .iter()
        .map(|(name, inputs, f)| check(name, inputs, f, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_polynomial_passes() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check(
            "x^2",
            &[x],
            |t, v| {
                let q = t.mul(v[0], v[0])?;
                Ok(t.sum(q))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed, "{r}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let opts = GradCheckOptions {
            corrupt: Some(1.01),
            ..Default::default()
        };
        let r = check(
            "x^2",
            &[x],
            |t, v| {
                let s = t.sigmoid(v[0]);
                Ok(t.sum(s))
            },
            &opts,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.to_string().starts_with("FAIL"));
    }

    #[test]
    fn suite_names_parse() {
        for s in ["tensor", "recurrence", "model", "loss", "all"] {
            assert!(s.parse::<Suite>().is_ok());
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn full_suite_passes() {
        let opts = GradCheckOptions::default();
        let reports = run_suite(Suite::All, 0, &opts).unwrap();
        assert!(reports.len() >= 20);
        for r in reports {
            println!("{r}");
            assert!(r.passed, "{r}");
        }
    }
}
