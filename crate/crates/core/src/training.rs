//! Cross-entropy loss, Adam, truncated backpropagation through time over
//! video clips, and binary checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::layers::{ParamGroup, ParameterRegistry};
use crate::model::{Dropout, Model, ModelConfig, RecurrenceStates};
use crate::saliency::SaliencyMap;
use crate::tensor::{Tape, Tensor, Var};

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logs.
pub const BCE_EPS: f64 = 1e-7;

fn target_var(tape: &mut Tape, gt: &SaliencyMap) -> Result<Var> {
    let t = gt.tensor().reshape(vec![1, 1, gt.height(), gt.width()])?;
    Ok(tape.constant(t))
}

/// Mean binary cross entropy of `pred` against `gt`.
pub fn bce_loss(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Invalid(format!(
            "bce: prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut tape = Tape::new();
    let p = target_var(&mut tape, pred)?;
    let q = target_var(&mut tape, gt)?;
    let l = tape.bce(p, q, BCE_EPS)?;
    Ok(tape.value(l)[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Learning rate of the trainable EMA parameter.
    pub alpha_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, alpha_lr: f64) -> Self {
        Self {
            lr,
            alpha_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of a registry, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParameterRegistry) -> Self {
        let zeros = || -> Vec<Tensor> {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()).expect("parameter shape"))
                .collect()
        };
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    fn check(&self, params: &ParameterRegistry) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer tracks {} parameters, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        for ((_, name, p), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments for {name:?} have shape {:?}, parameter has {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update from the gradients accumulated in
    /// `params`. Parameters without a gradient are treated as having zero
    /// gradient.
    pub fn step(&mut self, params: &mut ParameterRegistry) -> Result<()> {
        self.check(params)?;
        self.t += 1;
        let AdamConfig {
            lr,
            alpha_lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let rate = match params.group(id) {
                ParamGroup::Weights => lr,
                ParamGroup::Alpha => alpha_lr,
            };
            let p = params.get_mut(id);
            let g = p.grad().map(<[f64]>::to_vec);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let theta = p.data_mut();
            for k in 0..theta.len() {
                let gk = g.as_ref().map_or(0.0, |g| g[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                theta[k] -= rate * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Frames per clip, the truncation length of backpropagation through time.
    pub clip_length: usize,
    pub epochs: usize,
    pub lr: f64,
    pub alpha_lr: f64,
    /// Per-video random mirror and right-angle rotation.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_length: 10,
            epochs: 7,
            lr: 1e-3,
            alpha_lr: 0.1,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_length == 0 {
            return Err(Error::Config("clip_length must be >= 1".into()));
        }
        for (name, v) in [("lr", self.lr), ("alpha_lr", self.alpha_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.alpha_lr)
    }
}

/// Loss and parameter gradients of one clip.
#[derive(Debug, Clone)]
pub struct ClipGradients {
    /// Mean of the per-frame losses.
    pub loss: f64,
    pub frame_losses: Vec<f64>,
    /// One gradient per parameter in registry order.
    pub grads: Vec<Tensor>,
}

fn check_clip(frames: &[Tensor], gts: &[SaliencyMap]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Invalid("empty clip".into()));
    }
    if frames.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "clip has {} frames but {} ground-truth maps",
            frames.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Record a clip on `tape` from the carried `states`, returning the mean loss
/// variable and the per-frame losses. `states` is advanced to the end of the
/// clip, detached from the tape.
fn record_clip<R: Rng>(
    model: &Model,
    tape: &mut Tape,
    params: &[Var],
    frames: &[Tensor],
    gts: &[SaliencyMap],
    states: &mut RecurrenceStates,
    mut rng: Option<&mut R>,
) -> Result<(Var, Vec<f64>)> {
    check_clip(frames, gts)?;
    let mut live = model.attach_states(tape, states)?;
    let mut total: Option<Var> = None;
    let mut frame_losses = Vec::with_capacity(frames.len());
    for (frame, gt) in frames.iter().zip(gts) {
        let x = model.frame_var(tape, frame)?;
        let dropout = rng.as_mut().map(|r| Dropout { rng: &mut **r });
        let out = model.forward_on_tape(tape, params, x, &mut live, states, dropout)?;
        let q = target_var(tape, gt)?;
        let l = tape.bce(out, q, BCE_EPS)?;
        frame_losses.push(tape.value(l)[0]);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    model.detach_states(tape, &live, states);
    let loss = tape.scale(total.expect("non-empty clip"), 1.0 / frames.len() as f64);
    Ok((loss, frame_losses))
}

/// Gradients of the mean clip loss without dropout or an optimizer step.
/// `states` carries in and out as in training.
pub fn clip_gradients(
    model: &Model,
    frames: &[Tensor],
    gts: &[SaliencyMap],
    states: &mut RecurrenceStates,
) -> Result<ClipGradients> {
    let mut tape = Tape::new();
    let params = model.attach_params(&mut tape);
    let (loss, frame_losses) =
        record_clip::<ChaCha8Rng>(model, &mut tape, &params, frames, gts, states, None)?;
    tape.backward(loss)?;
    let grads = model
        .params()
        .iter()
        .zip(&params)
        .map(|((_, _, p), &v)| {
            let g = tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec);
            Tensor::new(p.shape().to_vec(), g).expect("gradient shape")
        })
        .collect();
    Ok(ClipGradients {
        loss: tape.value(loss)[0],
        frame_losses,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: u64,
    /// Frame-weighted mean of the training loss over the epoch.
    pub mean_loss: f64,
    /// Frame-weighted mean loss per video, in training order.
    pub per_video: Vec<(String, f64)>,
    pub clips: usize,
    pub frames: usize,
}

pub struct Trainer {
    model: Model,
    adam: AdamState,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    epoch: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(cfg.adam(), model.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            adam,
            cfg,
            rng,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// One optimizer step on a clip. `states` must be fresh or carried from
    /// the previous clip of `video_id`; it leaves tagged with `video_id` and
    /// detached from the graph.
    pub fn train_clip(
        &mut self,
        frames: &[Tensor],
        gts: &[SaliencyMap],
        states: &mut RecurrenceStates,
        video_id: &str,
    ) -> Result<f64> {
        match &states.video_id {
            Some(id) if id != video_id => {
                return Err(Error::State(format!(
                    "state carried from video {id:?} used for a clip of {video_id:?}; reset it first"
                )))
            }
            _ => {}
        }
        if frames.len() > self.cfg.clip_length {
            return Err(Error::Invalid(format!(
                "clip of {} frames exceeds clip_length {}",
                frames.len(),
                self.cfg.clip_length
            )));
        }
        let mut tape = Tape::new();
        let params = self.model.attach_params(&mut tape);
        let (loss, _) = record_clip(
            &self.model,
            &mut tape,
            &params,
            frames,
            gts,
            states,
            Some(&mut self.rng),
        )?;
        tape.backward(loss)?;
        let registry = self.model.params_mut();
        registry.zero_grads();
        registry.collect_grads(&tape, &params);
        self.adam.step(registry)?;
        registry.zero_grads();
        states.video_id = Some(video_id.to_string());
        Ok(tape.value(loss)[0])
    }

    /// One pass over `data`: videos in seeded shuffled order, consecutive
    /// clips with carried state, state reset between videos.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochReport> {
        if data.videos.is_empty() {
            return Err(Error::Invalid("cannot train on an empty dataset".into()));
        }
        let c = self.model.config();
        if (data.height, data.width) != (c.input_height, c.input_width) {
            return Err(Error::Config(format!(
                "dataset frames are {}x{} but the model expects {}x{}",
                data.height, data.width, c.input_height, c.input_width
            )));
        }
        let mut order: Vec<usize> = (0..data.videos.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut sum, mut frames, mut clips) = (0.0, 0usize, 0usize);
        let mut per_video = Vec::with_capacity(order.len());
        for i in order {
            let video = &data.videos[i];
            let aug = if self.cfg.augment {
                Augment::draw(&mut self.rng, data.height, data.width)
            } else {
                Augment::default()
            };
            let (xs, ys) = if aug.is_identity() {
                (video.frames.clone(), video.gt_maps.clone())
            } else {
                (
                    video.frames.iter().map(|f| aug.apply_tensor(f)).collect::<Result<Vec<_>>>()?,
                    video.gt_maps.iter().map(|m| aug.apply_map(m)).collect::<Result<Vec<_>>>()?,
                )
            };
            let mut states = self.model.fresh_states();
            let mut video_sum = 0.0;
            for (x, y) in xs.chunks(self.cfg.clip_length).zip(ys.chunks(self.cfg.clip_length)) {
                let l = self.train_clip(x, y, &mut states, &video.video_id)?;
                video_sum += l * x.len() as f64;
                clips += 1;
            }
            if !video.frames.is_empty() {
                per_video.push((video.video_id.clone(), video_sum / video.frames.len() as f64));
            }
            sum += video_sum;
            frames += video.frames.len();
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch,
            mean_loss: sum / frames.max(1) as f64,
            per_video,
            clips,
            frames,
        })
    }

    /// Train until `cfg.epochs` epochs are complete, calling `on_epoch` after
    /// each.
    pub fn fit(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochReport) -> Result<()>,
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while self.epoch < self.cfg.epochs as u64 {
            let r = self.train_epoch(data)?;
            on_epoch(self, &r)?;
            reports.push(r);
        }
        Ok(reports)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let named = |ts: &[Tensor]| -> Vec<(String, Tensor)> {
            self.model
                .params()
                .iter()
                .zip(ts)
                .map(|((_, n, _), t)| (n.to_string(), t.clone()))
                .collect()
        };
        Checkpoint {
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            params: self
                .model
                .params()
                .iter()
                .map(|(_, n, t)| (n.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape")))
                .collect(),
            adam: self.adam.cfg,
            adam_steps: self.adam.t,
            adam_m: named(&self.adam.m),
            adam_v: named(&self.adam.v),
            rng: RngSnapshot {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            epoch: self.epoch,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        ckpt.train.validate()?;
        let unnamed = |v: &[(String, Tensor)]| v.iter().map(|(_, t)| t.clone()).collect();
        let adam = AdamState {
            cfg: ckpt.adam,
            t: ckpt.adam_steps,
            m: unnamed(&ckpt.adam_m),
            v: unnamed(&ckpt.adam_v),
        };
        adam.check(model.params())?;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        Ok(Self {
            model,
            adam,
            cfg: ckpt.train.clone(),
            rng,
            epoch: ckpt.epoch,
        })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SALR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    model: ModelConfig,
    train: TrainConfig,
}

/// Everything needed to rebuild a model and resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamConfig,
    pub adam_steps: u64,
    pub adam_m: Vec<(String, Tensor)>,
    pub adam_v: Vec<(String, Tensor)>,
    pub rng: RngSnapshot,
    pub epoch: u64,
}

fn put_tensors(out: &mut Vec<u8>, entries: &[(String, Tensor)]) {
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend(x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn tensors(&mut self, what: &str) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32(what)? as usize;
        let mut out = Vec::new();
        for _ in 0..n {
            let len = self.u32("name length")? as usize;
            let name = String::from_utf8(self.take(len, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{what}: parameter name is not UTF-8")))?;
            let rank = self.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (self.bytes.len() - self.pos) / 8)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("truncated file: {name:?} of shape {shape:?} does not fit"))
                })?;
            let data = (0..numel).map(|_| self.f64(&name)).collect::<Result<Vec<_>>>()?;
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let block = toml::to_string(&ConfigBlock {
            model: self.model.clone(),
            train: self.train.clone(),
        })
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((block.len() as u32).to_le_bytes());
        out.extend(block.as_bytes());
        put_tensors(&mut out, &self.params);
        out.extend(self.adam_steps.to_le_bytes());
        let a = self.adam;
        for x in [a.lr, a.alpha_lr, a.beta1, a.beta2, a.eps] {
            out.extend(x.to_le_bytes());
        }
        put_tensors(&mut out, &self.adam_m);
        put_tensors(&mut out, &self.adam_v);
        out.extend(self.rng.seed);
        out.extend(self.rng.stream.to_le_bytes());
        out.extend(self.rng.word_pos.to_le_bytes());
        out.extend(self.epoch.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config block")?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let block: ConfigBlock =
            toml::from_str(text).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let params = r.tensors("parameters")?;
        let adam_steps = r.u64("optimizer step")?;
        let adam = AdamConfig {
            lr: r.f64("lr")?,
            alpha_lr: r.f64("alpha_lr")?,
            beta1: r.f64("beta1")?,
            beta2: r.f64("beta2")?,
            eps: r.f64("eps")?,
        };
        let adam_m = r.tensors("first moments")?;
        let adam_v = r.tensors("second moments")?;
        let rng = RngSnapshot {
            seed: r.array("rng seed")?,
            stream: r.u64("rng stream")?,
            word_pos: u128::from_le_bytes(r.array("rng position")?),
        };
        let epoch = r.u64("epoch")?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the epoch counter",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model: block.model,
            train: block.train,
            params,
            adam,
            adam_steps,
            adam_m,
            adam_v,
            rng,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::data(path, m),
            other => other,
        })
    }

    /// Copy the stored parameters into `model`, which may have been built
    /// from a different configuration.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        model.params_mut().load_values(&self.params)
    }

    /// Rebuild the model this checkpoint was taken from.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::build(self.model.clone())?;
        self.load_into(&mut m)?;
        Ok(m)
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
