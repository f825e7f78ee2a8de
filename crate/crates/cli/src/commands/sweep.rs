use std::path::Path;

use vidsal::eval::{evaluate, predict_dataset, EvalOptions};
use vidsal::{Dataset, Metric, MetricReport, Model, RecurrenceConfig, Trainer};

use crate::args::SweepArgs;
use crate::commands::eval::load_model;
use crate::commands::{field, load_dataset, write_text};
use crate::config::RunConfig;
use crate::failure::Failure;

pub const SWEEP_TXT: &str = "sweep.txt";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Fine-tune `base` for `epochs` with every EMA α fixed at `alpha`.
fn retrain(base: &Model, cfg: &RunConfig, alpha: f64, epochs: usize, data: &Dataset) -> Result<Model, Failure> {
    let mut mc = base.config().clone();
    if let RecurrenceConfig::Ema { alpha: a, trainable, .. } = &mut mc.recurrence {
        *a = alpha;
        *trainable = false;
    }
    let mut model = Model::build(mc)?;
    // A learned α has its own parameter, which the fixed-α model lacks.
    let values = model
        .params()
        .iter()
        .map(|(_, name, _)| {
            base.params()
                .iter()
                .find(|(_, n, _)| *n == name)
                .map(|(_, _, t)| (name.to_string(), t.clone()))
                .ok_or_else(|| Failure::data(format!("checkpoint lacks {name}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    model.params_mut().load_values(&values)?;
    let mut tc = cfg.train.clone();
    tc.epochs = epochs;
    let mut trainer = Trainer::new(model, tc)?;
    trainer.fit(data, |_, r| {
        println!("alpha {alpha:?} epoch {} mean_loss {:?}", r.epoch, r.mean_loss);
        Ok(())
    })?;
    Ok(trainer.into_model())
}

fn render(rows: &[(f64, MetricReport)]) -> String {
    let mut out = format!("{:>8}", "alpha");
    for m in Metric::ALL {
        out.push_str(&format!(" {:>8}", m.name()));
    }
    out.push('\n');
    for (alpha, r) in rows {
        out.push_str(&format!("{alpha:>8}"));
        for m in Metric::ALL {
            let v = r.dataset_value(m).map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
            out.push_str(&format!(" {v:>8}"));
        }
        out.push('\n');
    }
    out
}

pub fn run(config: Option<&Path>, a: SweepArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(v) = a.splits {
        cfg.eval.splits = v;
    }
    if let Some(v) = a.seed {
        cfg.eval.seed = v;
    }
    if cfg.eval.splits == 0 {
        return Err(Failure::usage("--splits must be >= 1"));
    }
    if let Some(bad) = a.alphas.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Failure::usage(format!("alpha {bad} out of range (0, 1]")));
    }

    let data = load_dataset(&a.data)?;
    let (ckpt, mut model) = load_model(&a.checkpoint, &data)?;
    if !matches!(ckpt.model.recurrence, RecurrenceConfig::Ema { .. }) {
        return Err(Failure::usage(format!(
            "{} is not an EMA checkpoint",
            a.checkpoint.display()
        )));
    }
    cfg.model = ckpt.model;
    cfg.train = ckpt.train;
    let opts = EvalOptions {
        splits: cfg.eval.splits,
        seed: cfg.eval.seed,
    };

    let mut rows = Vec::with_capacity(a.alphas.len());
    for &alpha in &a.alphas {
        let preds = if a.retrain {
            let tuned = retrain(&model, &cfg, alpha, a.retrain_epochs, &data)?;
            predict_dataset(&tuned, &data)?
        } else {
            model.set_alpha_override(Some(alpha))?;
            predict_dataset(&model, &data)?
        };
        rows.push((alpha, evaluate(&data, &preds, opts)?));
    }

    cfg.eval.alpha = None;
    cfg.write(&a.out, "sweep-alpha", &["model", "train", "eval"])?;
    let table = render(&rows);
    write_text(&a.out.join(SWEEP_TXT), &table)?;
    let path = a.out.join(SWEEP_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["alpha".to_string()];
    header.extend(Metric::ALL.iter().map(|m| m.name().to_string()));
    w.write_record(&header)?;
    for (alpha, r) in &rows {
        let mut rec = vec![format!("{alpha:?}")];
        rec.extend(Metric::ALL.iter().map(|&m| field(r.dataset_value(m))));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Failure::io(&path, e))?;
    print!("{table}");
    Ok(())
}
