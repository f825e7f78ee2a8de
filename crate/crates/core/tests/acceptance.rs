//! Acceptance criteria, one `[PASS]`/`[FAIL]` line each. Runs as a plain
//! binary so the lines show up in `cargo test` output.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidsal::data::{generate, read_dataset, write_dataset};
use vidsal::eval::{center_prior, constant_predictions, evaluate, predict_dataset, temporal_variation, EvalOptions};
use vidsal::gradcheck::{run_suite, GradCheckOptions, Suite};
use vidsal::layers::ParameterRegistry;
use vidsal::metrics::{aggregate, auc_judd, auc_shuffled, cc, csv_records, nss, sim, FrameScores};
use vidsal::model::{InsertionPoint, RecurrenceConfig};
use vidsal::recurrence::{
    convlstm_step, convlstm_step_on_tape, ema_step, ConvLstmState, ConvLstmWeights, EmaConfig, EmaState,
    LstmOutput, LstmVars, Peephole,
};
use vidsal::training::{bce_loss, sha256_hex};
use vidsal::{Checkpoint, Dataset, FixationMap, Metric, Model, ModelConfig, SaliencyMap, SynthConfig, Tape, Tensor, TrainConfig, Trainer};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(Suite::All, 0, &GradCheckOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    ensure(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} ops, max rel err {worst:.2e}, failed {failed:?}, {:.1} s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn ema_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for alpha in [0.05, 0.1, 0.2, 0.3, 1.0] {
        let xs: Vec<Tensor> = (0..=50)
            .map(|_| Tensor::from_fn(vec![1, 2, 3, 3], |_| rng.gen_range(-1.0..1.0)).unwrap())
            .collect();
        let cfg = EmaConfig::fixed(alpha);
        let mut state = EmaState::new();
        for t in 0..xs.len() {
            let (out, next) = ema_step(&xs[t], &state, &cfg).map_err(|e| e.to_string())?;
            state = next;
            if alpha == 1.0 && out.data() != xs[t].data() {
                return Err(format!("alpha=1 output differs from input at t={t}"));
            }
            for (i, &e) in out.data().iter().enumerate() {
                let mut closed = (1.0 - alpha).powi(t as i32) * xs[0].data()[i];
                for (k, x) in xs.iter().enumerate().take(t + 1).skip(1) {
                    closed += alpha * (1.0 - alpha).powi((t - k) as i32) * x.data()[i];
                }
                worst = worst.max((e - closed).abs());
            }
        }
    }
    let mut violations = 0;
    for _ in 0..1000 {
        let alpha = 1.0 - rng.gen::<f64>();
        let cfg = EmaConfig::fixed(alpha);
        let len = rng.gen_range(1..=50);
        let mut state = EmaState::new();
        let (mut lo, mut hi) = (vec![f64::INFINITY; 4], vec![f64::NEG_INFINITY; 4]);
        for _ in 0..len {
            let x = Tensor::from_fn(vec![4], |_| rng.gen_range(-5.0..5.0)).unwrap();
            for i in 0..4 {
                lo[i] = lo[i].min(x.data()[i]);
                hi[i] = hi[i].max(x.data()[i]);
            }
            let (out, next) = ema_step(&x, &state, &cfg).map_err(|e| e.to_string())?;
            state = next;
            violations += out
                .data()
                .iter()
                .enumerate()
                .filter(|&(i, &e)| e < lo[i] || e > hi[i])
                .count();
        }
    }
    ensure(
        worst < 1e-10 && violations == 0,
        format!("closed-form max err {worst:.2e} over t<=50, convexity violations {violations}/1000 sequences"),
    )
}

fn convlstm_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ch, h, w) = (2, 4, 4);

    let mut reg = ParameterRegistry::new();
    let cell = ConvLstmWeights::new(&mut reg, "lstm", ch, ch, (h, w), Peephole::PerElement, &mut rng)
        .map_err(|e| e.to_string())?;
    let ids: Vec<_> = reg.ids().collect();
    for &id in &ids {
        reg.get_mut(id).data_mut().fill(0.0);
    }
    let s = Tensor::from_fn(vec![1, ch, h, w], |_| rng.gen_range(-3.0..3.0)).unwrap();
    let mut state = ConvLstmState::zeros(ch, h, w).unwrap();
    for _ in 0..5 {
        let (out, next) = convlstm_step(&reg, &cell, &s, &state, LstmOutput::Cell).map_err(|e| e.to_string())?;
        if out.data().iter().chain(next.hidden.data()).any(|&v| v != 0.0) {
            return Err("zero weights from zero state left the fixed point".into());
        }
        state = next;
    }
    let c = 0.8;
    let start = ConvLstmState {
        cell: Tensor::full(vec![1, ch, h, w], c).unwrap(),
        hidden: Tensor::zeros(vec![1, ch, h, w]).unwrap(),
    };
    let (_, next) = convlstm_step(&reg, &cell, &s, &start, LstmOutput::Cell).map_err(|e| e.to_string())?;
    if next.cell.data().iter().any(|&v| v != 0.5 * c)
        || next.hidden.data().iter().any(|&v| v != 0.5 * (0.5 * c).tanh())
    {
        return Err("zero-weight decay of C0 is not exact".into());
    }

    // Random weights with nonzero peepholes and biases.
    for &id in &ids {
        let fan = reg.get(id).numel() as f64;
        let b = (3.0 / fan.max(9.0)).sqrt();
        reg.get_mut(id).data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-b..b));
    }
    let params: Vec<Tensor> = reg.iter().map(|(_, _, t)| t.clone()).collect();
    let mut state = ConvLstmState::zeros(ch, h, w).unwrap();
    let (mut bad_gate, mut bad_h, mut bad_c) = (0, 0, 0);
    for step in 0..1000 {
        if step % 50 == 0 {
            state = ConvLstmState::zeros(ch, h, w).unwrap();
        }
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(Tensor::from_fn(vec![1, ch, h, w], |_| rng.gen_range(-2.0..2.0)).unwrap());
        let prev = LstmVars {
            cell: tape.constant(state.cell.clone()),
            hidden: tape.constant(state.hidden.clone()),
        };
        let out = convlstm_step_on_tape(&mut tape, &vars, &cell, x, prev).map_err(|e| e.to_string())?;
        for g in [out.update, out.forget, out.output] {
            bad_gate += tape.value(g).iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
        }
        bad_h += tape.value(out.hidden).iter().filter(|&&v| !(v > -1.0 && v < 1.0)).count();
        bad_c += tape
            .value(out.cell)
            .iter()
            .zip(state.cell.data())
            .filter(|&(&now, &before)| now.abs() > before.abs() + 1.0)
            .count();
        state = ConvLstmState {
            cell: tape.tensor(out.cell),
            hidden: tape.tensor(out.hidden),
        };
    }
    ensure(
        bad_gate + bad_h + bad_c == 0,
        format!("zero-weight examples exact; 1000 random steps: gate {bad_gate}, H {bad_h}, |C| bound {bad_c} violations"),
    )
}

fn pairwise(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut auc_err, mut loop_err, mut inv_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut instances = 0;
    while instances < 200 {
        let (h, w) = (rng.gen_range(2..=16), rng.gen_range(2..=16));
        let n = h * w;
        let levels = rng.gen_range(2..40);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let k = rng.gen_range(1..=n.min(12));
        let pts: Vec<(usize, usize)> = (0..k).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect();
        let fix = FixationMap::new(h, w, pts.clone()).unwrap();
        let mask = fix.mask();
        if mask.iter().all(|&m| m) || a.iter().all(|&x| x == a[0]) {
            continue;
        }
        instances += 1;
        let (pa, pb) = (SaliencyMap::new(h, w, a.clone()).unwrap(), SaliencyMap::new(h, w, b.clone()).unwrap());

        let pos: Vec<f64> = (0..n).filter(|&i| mask[i]).map(|i| a[i]).collect();
        let neg: Vec<f64> = (0..n).filter(|&i| !mask[i]).map(|i| a[i]).collect();
        let j = auc_judd(&pa, &fix).unwrap().unwrap();
        auc_err = auc_err.max((j - pairwise(&pos, &neg)).abs());

        // Scalar-loop oracles.
        let nf = n as f64;
        let (mut ma, mut mb) = (0.0, 0.0);
        for i in 0..n {
            ma += a[i];
            mb += b[i];
        }
        ma /= nf;
        mb /= nf;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            sab += (a[i] - ma) * (b[i] - mb);
            saa += (a[i] - ma) * (a[i] - ma);
            sbb += (b[i] - mb) * (b[i] - mb);
        }
        let cc_oracle = sab / (saa.sqrt() * sbb.sqrt());
        let sd = (saa / nf).sqrt();
        let mut nss_oracle = 0.0;
        for &(r, c) in &pts {
            nss_oracle += (a[r * w + c] - ma) / sd;
        }
        nss_oracle /= pts.len() as f64;
        let (mut suma, mut sumb) = (0.0, 0.0);
        for i in 0..n {
            suma += a[i];
            sumb += b[i];
        }
        let mut sim_oracle = 0.0;
        for i in 0..n {
            sim_oracle += (a[i] / suma).min(b[i] / sumb);
        }
        let got_cc = cc(&pa, &pb).unwrap().unwrap();
        let got_nss = nss(&pa, &fix).unwrap().unwrap();
        let got_sim = sim(&pa, &pb).unwrap().unwrap();
        loop_err = loop_err
            .max((got_cc - cc_oracle).abs())
            .max((got_nss - nss_oracle).abs())
            .max((got_sim - sim_oracle).abs());

        // Invariances.
        let affine = SaliencyMap::new(h, w, a.iter().map(|x| 0.6 * x + 0.2).collect()).unwrap();
        let monotone = SaliencyMap::new(h, w, a.iter().map(|x| x.powi(3)).collect()).unwrap();
        let scaled = SaliencyMap::new(h, w, a.iter().map(|x| 0.5 * x).collect()).unwrap();
        let pool: Vec<usize> = (0..n).collect();
        let s0 = auc_shuffled(&pa, &fix, &pool, 5, 7).unwrap();
        let s1 = auc_shuffled(&monotone, &fix, &pool, 5, 7).unwrap();
        inv_err = inv_err
            .max((nss(&affine, &fix).unwrap().unwrap() - got_nss).abs())
            .max((auc_judd(&monotone, &fix).unwrap().unwrap() - j).abs())
            .max(match (s0, s1) {
                (Some(x), Some(y)) => (x.value - y.value).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            })
            .max((sim(&scaled, &pb).unwrap().unwrap() - got_sim).abs())
            .max((cc(&affine, &pb).unwrap().unwrap() - got_cc).abs());
    }

    let videos: Vec<(String, Vec<FrameScores>)> = (0..5)
        .map(|v| {
            let frames = (0..rng.gen_range(1..12))
                .map(|_| std::array::from_fn(|_| rng.gen_bool(0.85).then(|| rng.gen::<f64>())))
                .collect();
            (format!("v{v}"), frames)
        })
        .collect();
    let report = aggregate(videos.clone());
    let mut agg_exact = true;
    for m in Metric::ALL {
        let mut means = Vec::new();
        for (_, frames) in &videos {
            let (mut s, mut c) = (0.0, 0usize);
            for f in frames {
                if let Some(x) = f[m.index()] {
                    s += x;
                    c += 1;
                }
            }
            if c > 0 {
                means.push(s / c as f64);
            }
        }
        let mut total = 0.0;
        for x in &means {
            total += x;
        }
        let want = (!means.is_empty()).then(|| total / means.len() as f64);
        agg_exact &= report.dataset_value(m) == want;
    }
    ensure(
        auc_err < 1e-9 && loop_err < 1e-12 && agg_exact && inv_err < 1e-10,
        format!(
            "200 instances: AUC-J vs pairwise {auc_err:.1e}, CC/SIM/NSS vs loops {loop_err:.1e}, invariances {inv_err:.1e}, aggregation exact {agg_exact}"
        ),
    )
}

fn bce() -> Outcome {
    let half = SaliencyMap::constant(8, 8, 0.5).unwrap();
    let l = bce_loss(&half, &half).map_err(|e| e.to_string())?;
    let bin = SaliencyMap::new(2, 3, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let p = bce_loss(&bin, &bin).map_err(|e| e.to_string())?;
    let err = (l - std::f64::consts::LN_2).abs();
    ensure(err < 1e-12 && p < 1e-6, format!("|L(0.5,0.5) - ln 2| = {err:.1e}, perfect prediction {p:.2e}"))
}

fn smoke_model_config() -> ModelConfig {
    ModelConfig {
        recurrence: RecurrenceConfig::ema(0.1, vec![InsertionPoint::Bottleneck]),
        ..ModelConfig::default()
    }
}

fn test_set(noise: f64) -> Dataset {
    generate(&SynthConfig {
        noise,
        seed: 101,
        ..SynthConfig::default()
    })
    .unwrap()
}

struct Run {
    trainer: Trainer,
    losses: Vec<f64>,
    train_time: Duration,
    checkpoint: Vec<u8>,
    records: Vec<[String; 4]>,
}

/// synth → disk → train → checkpoint → eval.
fn pipeline(dir: &Path) -> Result<Run, String> {
    let err = |e: vidsal::Error| e.to_string();
    let root = dir.join("data");
    write_dataset(&generate(&SynthConfig::default()).map_err(err)?, &root).map_err(err)?;
    let data = read_dataset(&root).map_err(err)?;
    let model = Model::build(smoke_model_config()).map_err(err)?;
    let mut trainer = Trainer::new(model, TrainConfig::default()).map_err(err)?;
    let start = Instant::now();
    let reports = trainer.fit(&data, |_, _| Ok(())).map_err(err)?;
    let train_time = start.elapsed();
    let path = dir.join("model.ckpt");
    trainer.checkpoint().save(&path).map_err(err)?;
    let checkpoint = std::fs::read(&path).map_err(|e| e.to_string())?;
    let preds = predict_dataset(trainer.model(), &data).map_err(err)?;
    let report = evaluate(&data, &preds, EvalOptions::default()).map_err(err)?;
    Ok(Run {
        trainer,
        losses: reports.iter().map(|r| r.mean_loss).collect(),
        train_time,
        checkpoint,
        records: csv_records(&report),
    })
}

fn dataset_nss(model: &Model, data: &Dataset) -> Result<f64, String> {
    let preds = predict_dataset(model, data).map_err(|e| e.to_string())?;
    let r = evaluate(data, &preds, EvalOptions::default()).map_err(|e| e.to_string())?;
    r.dataset_value(Metric::Nss).ok_or_else(|| "NSS invalid on every video".to_string())
}

fn training_smoke(run: &Run) -> Outcome {
    let (first, last) = (run.losses[0], *run.losses.last().unwrap());
    let data = test_set(SynthConfig::default().noise);
    let nss_model = dataset_nss(run.trainer.model(), &data)?;
    let prior = center_prior(data.height, data.width, 0.25).map_err(|e| e.to_string())?;
    let r = evaluate(&data, &constant_predictions(&data, &prior), EvalOptions::default()).map_err(|e| e.to_string())?;
    let nss_prior = r.dataset_value(Metric::Nss).unwrap();
    ensure(
        last <= 0.7 * first && nss_model > nss_prior && run.train_time < Duration::from_secs(600),
        format!(
            "BCE {first:.4} -> {last:.4} (ratio {:.3}), NSS {nss_model:.3} vs center prior {nss_prior:.3}, training {:.1} s",
            last / first,
            run.train_time.as_secs_f64()
        ),
    )
}

fn smoothing_trend(run: &Run) -> Outcome {
    let data = test_set(0.2);
    let mut model = run.trainer.model().clone();
    let mut at = |a: f64| -> Result<(f64, f64), String> {
        model.set_alpha_override(Some(a)).map_err(|e| e.to_string())?;
        let preds = predict_dataset(&model, &data).map_err(|e| e.to_string())?;
        let r = evaluate(&data, &preds, EvalOptions::default()).map_err(|e| e.to_string())?;
        Ok((temporal_variation(&preds), r.dataset_value(Metric::Nss).unwrap()))
    };
    let (tv_ema, nss_ema) = at(0.1)?;
    let (tv_static, nss_static) = at(1.0)?;
    ensure(
        tv_ema < tv_static && nss_ema >= nss_static - 0.05,
        format!("noise 0.2: variation {tv_ema:.5} (alpha 0.1) vs {tv_static:.5} (alpha 1), NSS {nss_ema:.3} vs {nss_static:.3}"),
    )
}

fn alpha_sweep(run: &Run) -> Outcome {
    let data = test_set(SynthConfig::default().noise);
    let mut model = run.trainer.model().clone();
    let mut values = Vec::new();
    for a in [0.05, 0.1, 0.2, 0.3] {
        model.set_alpha_override(Some(a)).map_err(|e| e.to_string())?;
        values.push(dataset_nss(&model, &data)?);
    }
    let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
    ensure(
        spread < 0.2,
        format!("NSS at alpha 0.05/0.1/0.2/0.3 = {values:.3?}, spread {spread:.3}"),
    )
}

fn determinism(first: &Run) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = pipeline(dir.path())?;
    let (a, b) = (sha256_hex(&first.checkpoint), sha256_hex(&second.checkpoint));
    ensure(
        a == b && first.records == second.records,
        format!("checkpoint sha256 {}.. vs {}.., reports identical {}", &a[..12], &b[..12], first.records == second.records),
    )
}

fn checkpoints(run: &Run) -> Outcome {
    let err = |e: vidsal::Error| e.to_string();
    let loaded = Checkpoint::decode(&run.checkpoint).map_err(err)?;
    let again = Trainer::from_checkpoint(&loaded).map_err(err)?.checkpoint().encode().map_err(err)?;
    let identical = again == run.checkpoint;

    let mut other = Model::build(ModelConfig {
        base_channels: 4,
        ..smoke_model_config()
    })
    .map_err(err)?;
    let msg = match loaded.load_into(&mut other) {
        Ok(()) => return Err("checkpoint loaded into a narrower model".into()),
        Err(e) => e.to_string(),
    };
    let names_shape = msg.contains("[8, 1, 3, 3]") && msg.contains("[4, 1, 3, 3]");

    let data = generate(&SynthConfig {
        n_videos: 6,
        frames_per_video: 20,
        ..SynthConfig::default()
    })
    .map_err(err)?;
    let cfg = TrainConfig {
        epochs: 2,
        augment: true,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut full = Trainer::new(Model::build(smoke_model_config()).map_err(err)?, cfg.clone()).map_err(err)?;
    full.fit(&data, |_, _| Ok(())).map_err(err)?;
    let mut half = Trainer::new(
        Model::build(smoke_model_config()).map_err(err)?,
        TrainConfig { epochs: 1, ..cfg },
    )
    .map_err(err)?;
    half.fit(&data, |_, _| Ok(())).map_err(err)?;
    let mut ck = Checkpoint::decode(&half.checkpoint().encode().map_err(err)?).map_err(err)?;
    ck.train.epochs = 2;
    let mut resumed = Trainer::from_checkpoint(&ck).map_err(err)?;
    resumed.fit(&data, |_, _| Ok(())).map_err(err)?;
    let equal = full.model().params() == resumed.model().params();
    ensure(
        identical && names_shape && equal,
        format!("save/load/save identical {identical}, mismatch error names shapes {names_shape}, resume equal {equal}"),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut emit = |name: &str, outcome: Outcome| {
        match outcome {
            Ok(d) => println!("[PASS] {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {name}: {d}");
            }
        }
    };
    emit("gradient suite", gradient_suite());
    emit("EMA exactness", ema_exactness());
    emit("ConvLSTM invariants", convlstm_invariants());
    emit("metric oracles", metric_oracles());
    emit("BCE", bce());

    let dir = tempfile::tempdir().expect("temp dir");
    match pipeline(dir.path()) {
        Ok(run) => {
            emit("training smoke", training_smoke(&run));
            emit("smoothing trend", smoothing_trend(&run));
            emit("alpha-sweep flatness", alpha_sweep(&run));
            emit("determinism", determinism(&run));
            emit("checkpoint round trip and resume", checkpoints(&run));
        }
        Err(e) => {
            for name in [
                "training smoke",
                "smoothing trend",
                "alpha-sweep flatness",
                "determinism",
                "checkpoint round trip and resume",
            ] {
                emit(name, Err(format!("pipeline failed: {e}")));
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
