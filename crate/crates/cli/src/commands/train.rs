use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use vidsal::model::{DropoutMask, OutputPlacement};
use vidsal::recurrence::{LstmOutput, Peephole};
use vidsal::training::sha256_hex;
use vidsal::{Checkpoint, InsertionPoint, Model, ModelConfig, RecurrenceConfig, Trainer};

use crate::args::{LstmOutputArg, MaskArg, PeepholeArg, Placement, RecurrenceKind, TrainArgs};
use crate::commands::load_dataset;
use crate::config::RunConfig;
use crate::failure::Failure;

pub const LOSS_LOG: &str = "loss.log";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const TRAINABLE_ALPHA: f64 = 0.5;

fn kind_of(r: &RecurrenceConfig) -> RecurrenceKind {
    match r {
        RecurrenceConfig::None => RecurrenceKind::None,
        RecurrenceConfig::Ema { trainable: true, .. } => RecurrenceKind::EmaTrainable,
        RecurrenceConfig::Ema { residual: true, .. } => RecurrenceKind::EmaResidual,
        RecurrenceConfig::Ema { .. } => RecurrenceKind::Ema,
        RecurrenceConfig::ConvLstm { .. } => RecurrenceKind::Convlstm,
    }
}

fn fresh(kind: RecurrenceKind) -> RecurrenceConfig {
    let bottleneck = vec![InsertionPoint::Bottleneck];
    match kind {
        RecurrenceKind::None => RecurrenceConfig::None,
        RecurrenceKind::Ema => RecurrenceConfig::ema(0.1, bottleneck),
        RecurrenceKind::EmaTrainable => RecurrenceConfig::Ema {
            alpha: TRAINABLE_ALPHA,
            trainable: true,
            residual: false,
            points: bottleneck,
            output_placement: OutputPlacement::PostSigmoid,
        },
        RecurrenceKind::EmaResidual => RecurrenceConfig::Ema {
            alpha: 0.1,
            trainable: false,
            residual: true,
            points: bottleneck,
            output_placement: OutputPlacement::PostSigmoid,
        },
        RecurrenceKind::Convlstm => RecurrenceConfig::convlstm(),
    }
}

/// Combine the configured recurrence with the flags. Flags that do not apply
/// to the resulting kind are usage errors.
pub fn resolve_recurrence(base: &RecurrenceConfig, a: &TrainArgs) -> Result<RecurrenceConfig, Failure> {
    let kind = a.recurrence.unwrap_or_else(|| kind_of(base));
    let mut r = if kind == kind_of(base) {
        base.clone()
    } else {
        fresh(kind)
    };
    let name = match kind {
        RecurrenceKind::None => "none",
        RecurrenceKind::Ema => "ema",
        RecurrenceKind::EmaTrainable => "ema-trainable",
        RecurrenceKind::EmaResidual => "ema-residual",
        RecurrenceKind::Convlstm => "convlstm",
    };
    let reject = |flag: &str| Failure::usage(format!("{flag} does not apply to --recurrence {name}"));
    match &mut r {
        RecurrenceConfig::Ema {
            alpha,
            points,
            output_placement,
            ..
        } => {
            if let Some(v) = a.alpha {
                *alpha = v;
            }
            if let Some(p) = &a.ema_at {
                *points = p.clone();
            }
            if let Some(p) = a.output_placement {
                *output_placement = match p {
                    Placement::PostSigmoid => OutputPlacement::PostSigmoid,
                    Placement::PreSigmoid => OutputPlacement::PreSigmoid,
                };
            }
            if a.lstm_output.is_some() {
                return Err(reject("--lstm-output"));
            }
            if a.peephole.is_some() {
                return Err(reject("--peephole"));
            }
        }
        RecurrenceConfig::ConvLstm { output, peephole, .. } => {
            for (set, flag) in [
                (a.alpha.is_some(), "--alpha"),
                (a.ema_at.is_some(), "--ema-at"),
                (a.output_placement.is_some(), "--output-placement"),
            ] {
                if set {
                    return Err(reject(flag));
                }
            }
            if let Some(o) = a.lstm_output {
                *output = match o {
                    LstmOutputArg::Cell => LstmOutput::Cell,
                    LstmOutputArg::Hidden => LstmOutput::Hidden,
                };
            }
            if let Some(p) = a.peephole {
                *peephole = match p {
                    PeepholeArg::PerElement => Peephole::PerElement,
                    PeepholeArg::PerChannel => Peephole::PerChannel,
                };
            }
        }
        RecurrenceConfig::None => {
            for (set, flag) in [
                (a.alpha.is_some(), "--alpha"),
                (a.ema_at.is_some(), "--ema-at"),
                (a.output_placement.is_some(), "--output-placement"),
                (a.lstm_output.is_some(), "--lstm-output"),
                (a.peephole.is_some(), "--peephole"),
            ] {
                if set {
                    return Err(reject(flag));
                }
            }
        }
    }
    Ok(r)
}

fn apply_flags(cfg: &mut RunConfig, a: &TrainArgs) -> Result<(), Failure> {
    let m = &mut cfg.model;
    m.recurrence = resolve_recurrence(&m.recurrence, a)?;
    if a.dropout_mask.is_some() && a.dropout.is_none() && !m.dropout_before_recurrence {
        return Err(Failure::usage("--dropout-mask needs --dropout"));
    }
    if let Some(p) = a.dropout {
        m.dropout_before_recurrence = true;
        m.dropout_p = p;
    }
    if let Some(k) = a.dropout_mask {
        m.dropout_mask = match k {
            MaskArg::PerFrame => DropoutMask::PerFrame,
            MaskArg::PerVideo => DropoutMask::PerVideo,
        };
    }
    if let Some(v) = a.stages {
        m.stages = v;
    }
    if let Some(v) = a.base_channels {
        m.base_channels = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.alpha_lr {
        t.alpha_lr = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.clip_length {
        t.clip_length = v;
    }
    t.augment |= a.augment;
    if let Some(s) = a.seed {
        m.seed = s;
        t.seed = s;
    }
    t.validate()?;
    Ok(())
}

fn check_divisible(cfg: &ModelConfig, h: usize, w: usize) -> Result<(), Failure> {
    let div = 1usize << cfg.stages;
    if !h.is_multiple_of(div) || !w.is_multiple_of(div) {
        return Err(Failure::data(format!(
            "dataset frames are {h}x{w}; a {}-stage model needs both sides divisible by {div}",
            cfg.stages
        )));
    }
    Ok(())
}

pub fn run(config: Option<&Path>, a: TrainArgs) -> Result<(), Failure> {
    let (mut cfg, resume) = match &a.resume {
        Some(path) => {
            if config.is_some() {
                return Err(Failure::usage("--config cannot be combined with --resume"));
            }
            let mut ckpt = Checkpoint::load(path)?;
            if let Some(e) = a.epochs {
                ckpt.train.epochs = e;
            }
            let cfg = RunConfig {
                model: ckpt.model.clone(),
                train: ckpt.train.clone(),
                ..RunConfig::default()
            };
            (cfg, Some(ckpt))
        }
        None => {
            let mut cfg = RunConfig::load(config)?;
            apply_flags(&mut cfg, &a)?;
            // Check everything but the frame size before touching the data.
            let mut probe = cfg.model.clone();
            let side = 1usize.checked_shl(probe.stages.min(16) as u32).unwrap_or(1);
            probe.input_height = side;
            probe.input_width = side;
            probe.validate()?;
            (cfg, None)
        }
    };

    let data = load_dataset(&a.data)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            if (ckpt.model.input_height, ckpt.model.input_width) != (data.height, data.width) {
                return Err(Failure::data(format!(
                    "checkpoint expects {}x{} frames, dataset has {}x{}",
                    ckpt.model.input_height, ckpt.model.input_width, data.height, data.width
                )));
            }
            Trainer::from_checkpoint(&ckpt)?
        }
        None => {
            cfg.model.input_height = data.height;
            cfg.model.input_width = data.width;
            cfg.model.input_channels = 1;
            check_divisible(&cfg.model, data.height, data.width)?;
            let model = Model::build(cfg.model.clone())?;
            Trainer::new(model, cfg.train.clone())?
        }
    };

    cfg.write(&a.out, "train", &["model", "train"])?;
    let ckpt_dir = a.out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Failure::io(&ckpt_dir, e))?;
    let log_path = a.out.join(LOSS_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| Failure::io(&log_path, e))?;

    let mut io_error = None;
    trainer.fit(&data, |t, r| {
        let line = format!("epoch {} mean_loss {:?}", r.epoch, r.mean_loss);
        println!("{line}");
        let path = ckpt_dir.join(format!("epoch-{:03}.ckpt", r.epoch));
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_error = Some(Failure::io(&log_path, e));
            return Err(vidsal::Error::Invalid("loss log write failed".into()));
        }
        t.checkpoint().save(&path)
    })
    .map_err(|e| io_error.take().unwrap_or_else(|| e.into()))?;

    let final_path = a.out.join(FINAL_CHECKPOINT);
    let bytes = trainer.checkpoint().encode()?;
    fs::write(&final_path, &bytes).map_err(|e| Failure::io(&final_path, e))?;
    if let Some(alpha) = trainer.model().effective_alpha() {
        println!("alpha {alpha:?}");
    }
    println!("{} sha256 {}", final_path.display(), sha256_hex(&bytes));
    Ok(())
}
