use std::path::Path;

use vidsal::data::{load_predictions, write_predictions, PREDICTIONS_DIR};
use vidsal::eval::{evaluate, predict_dataset, EvalOptions};
use vidsal::metrics::{csv_records, render_table, CSV_HEADER};
use vidsal::{Checkpoint, Dataset, MetricReport, Model};

use crate::args::EvalArgs;
use crate::commands::{load_dataset, write_text};
use crate::config::RunConfig;
use crate::failure::Failure;

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

/// Load a checkpoint's model and check it against the dataset's frame size.
pub fn load_model(path: &Path, data: &Dataset) -> Result<(Checkpoint, Model), Failure> {
    let ckpt = Checkpoint::load(path)?;
    let (h, w) = (ckpt.model.input_height, ckpt.model.input_width);
    if (h, w) != (data.height, data.width) {
        return Err(Failure::data(format!(
            "checkpoint expects {h}x{w} frames, dataset has {}x{}",
            data.height, data.width
        )));
    }
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

pub fn write_report(out: &Path, report: &MetricReport) -> Result<(), Failure> {
    write_text(&out.join(REPORT_TXT), &render_table(report))?;
    let path = out.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(CSV_HEADER)?;
    for r in csv_records(report) {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Failure::io(&path, e))
}

pub fn run(config: Option<&Path>, a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(v) = a.splits {
        cfg.eval.splits = v;
    }
    if let Some(v) = a.seed {
        cfg.eval.seed = v;
    }
    if a.alpha.is_some() {
        cfg.eval.alpha = a.alpha;
    }
    if cfg.eval.splits == 0 {
        return Err(Failure::usage("--splits must be >= 1"));
    }
    if a.pred_dir.is_some() && cfg.eval.alpha.is_some() {
        return Err(Failure::usage("an α override needs --checkpoint"));
    }

    let data = load_dataset(&a.data)?;
    let mut sections = vec!["eval"];
    let preds = match (&a.checkpoint, &a.pred_dir) {
        (Some(path), _) => {
            let (ckpt, mut model) = load_model(path, &data)?;
            model.set_alpha_override(cfg.eval.alpha)?;
            cfg.model = ckpt.model;
            cfg.train = ckpt.train;
            sections.extend(["model", "train"]);
            predict_dataset(&model, &data)?
        }
        (None, Some(dir)) => load_predictions(dir, &data, &a.pred_subdir)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let opts = EvalOptions {
        splits: cfg.eval.splits,
        seed: cfg.eval.seed,
    };
    let report = evaluate(&data, &preds, opts)?;

    cfg.write(&a.out, "eval", &sections)?;
    write_report(&a.out, &report)?;
    if a.dump_maps {
        write_predictions(&a.out, &data, &preds, PREDICTIONS_DIR)?;
    }
    print!("{}", render_table(&report));
    Ok(())
}
