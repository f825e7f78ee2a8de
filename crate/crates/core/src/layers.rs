//! Parameterised layers and the registry that owns every trainable tensor.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorResult, Var};

/// Glorot-uniform initialisation: `U[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> TensorResult<Tensor> {
    assert!(
        fan_in >= 1 && fan_out >= 1,
        "fan_in and fan_out must be >= 1"
    );
    let bound = xavier_bound(fan_in, fan_out);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Seeded convenience wrapper around [`xavier_uniform`].
pub fn xavier_init(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> TensorResult<Tensor> {
    xavier_uniform(shape, fan_in, fan_out, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    check_dropout_p(p)?;
    let keep = 1.0 / (1.0 - p);
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        if p > 0.0 && rng.gen::<f64>() < p {
            0.0
        } else {
            keep
        }
    })?)
}

/// Inverted dropout on a plain tensor. Identity when `training` is false.
pub fn dropout_forward(
    input: &Tensor,
    p: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    check_dropout_p(p)?;
    if !training || p == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.shape(), p, rng)?;
    let data = input
        .data()
        .iter()
        .zip(mask.data())
        .map(|(x, m)| x * m)
        .collect();
    Ok(Tensor::new(input.shape().to_vec(), data)?)
}

/// Tape version of [`dropout_forward`]; gradients are 0 at dropped positions
/// and `1/(1-p)` at kept ones.
pub fn dropout_on_tape(
    tape: &mut Tape,
    input: Var,
    p: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    check_dropout_p(p)?;
    if !training || p == 0.0 {
        return Ok(input);
    }
    let mask = dropout_mask(tape.shape(input), p, rng)?;
    apply_mask(tape, input, mask)
}

pub fn apply_mask(tape: &mut Tape, input: Var, mask: Tensor) -> Result<Var> {
    let m = tape.constant(mask);
    Ok(tape.mul(input, m)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer learning rate applies to a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Weights,
    /// The trainable EMA mixing parameter.
    Alpha,
}

/// Ordered, uniquely named set of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterRegistry {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    groups: Vec<ParamGroup>,
    index: HashMap<String, usize>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        self.groups.push(group);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copy every parameter onto the tape as a gradient-tracking leaf.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Add tape gradients of the attached leaves into the parameters' buffers.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replace the values of every parameter, checking names and shapes.
    pub fn load_values(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                entries.len()
            )));
        }
        for ((name, t), (own_name, own)) in entries.iter().zip(self.names.iter().zip(&self.tensors))
        {
            if name != own_name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: expected {own_name:?}, found {name:?}"
                )));
            }
            if t.shape() != own.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name:?}: model has {:?}, checkpoint has {:?}",
                    own.shape(),
                    t.shape()
                )));
            }
        }
        for (own, (_, t)) in self.tensors.iter_mut().zip(entries) {
            own.data_mut().copy_from_slice(t.data());
            own.zero_grad();
        }
        Ok(())
    }
}

/// 2-D convolution with a registered kernel and bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// Register a `cout×cin×k×k` kernel (Xavier) and a zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        registry: &mut ParameterRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let area = kernel_size * kernel_size;
        let kernel = xavier_uniform(
            vec![cout, cin, kernel_size, kernel_size],
            cin * area,
            cout * area,
            rng,
        )?;
        let kernel = registry.register(format!("{name}.kernel"), kernel, ParamGroup::Weights)?;
        let bias = registry.register(
            format!("{name}.bias"),
            Tensor::zeros(vec![cout])?,
            ParamGroup::Weights,
        )?;
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        Ok(tape.conv2d(
            input,
            vars[self.kernel.index()],
            Some(vars[self.bias.index()]),
            self.stride,
            self.padding,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bound_is_one_for_fan_three() {
        let t = xavier_init(vec![100, 100], 3, 3, 1).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn xavier_same_seed_same_tensor() {
        let a = xavier_init(vec![4, 3, 3, 3], 27, 36, 9).unwrap();
        let b = xavier_init(vec![4, 3, 3, 3], 27, 36, 9).unwrap();
        assert_eq!(a, b);
        let c = xavier_init(vec![4, 3, 3, 3], 27, 36, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn xavier_statistics() {
        let t = xavier_init(vec![10_000], 3, 3, 42).unwrap();
        let mean = t.data().iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.02, "mean {mean}");
        let (lo, hi) = t
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(lo >= -1.0 && hi <= 1.0);
        assert!(lo < -0.99 && hi > 0.99);
    }

    #[test]
    fn dropout_eval_and_p_zero_are_identity() {
        let x = Tensor::from_fn(vec![50], |i| i as f64 * 0.3 - 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dropout_forward(&x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(dropout_forward(&x, 0.0, true, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_rejects_p_one() {
        let x = Tensor::zeros(vec![3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_forward(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout_forward(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let x = Tensor::full(vec![100_000], 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = dropout_forward(&x, 0.5, true, &mut rng).unwrap();
        let mean = y.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 2.0).abs() < 0.04, "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn dropout_gradient_matches_mask() {
        let x = Tensor::full(vec![1000], 1.0)
            .unwrap()
            .with_requires_grad(true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let y = dropout_on_tape(&mut tape, v, 0.25, true, &mut rng).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        for (&g, &out) in tape.grad(v).unwrap().iter().zip(tape.value(y)) {
            if out == 0.0 {
                assert_eq!(g, 0.0);
            } else {
                assert_eq!(g, 1.0 / 0.75);
            }
        }
    }

    #[test]
    fn registry_rejects_duplicates_and_keeps_order() {
        let mut reg = ParameterRegistry::new();
        let a = reg
            .register("a", Tensor::zeros(vec![2]).unwrap(), ParamGroup::Weights)
            .unwrap();
        let b = reg
            .register("b", Tensor::zeros(vec![3]).unwrap(), ParamGroup::Alpha)
            .unwrap();
        assert!(reg
            .register("a", Tensor::zeros(vec![1]).unwrap(), ParamGroup::Weights)
            .is_err());
        let names: Vec<_> = reg.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(reg.by_name("b"), Some(b));
        assert_eq!(reg.group(a), ParamGroup::Weights);
        assert_eq!(reg.num_scalars(), 5);
    }

    #[test]
    fn registry_load_values_checks_shapes() {
        let mut reg = ParameterRegistry::new();
        reg.register("w", Tensor::zeros(vec![2, 2]).unwrap(), ParamGroup::Weights)
            .unwrap();
        let bad = vec![("w".to_string(), Tensor::zeros(vec![4]).unwrap())];
        let err = reg.load_values(&bad).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[4]"), "{err}");
        let good = vec![(
            "w".to_string(),
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )];
        reg.load_values(&good).unwrap();
        assert_eq!(reg.get(ParamId(0)).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
