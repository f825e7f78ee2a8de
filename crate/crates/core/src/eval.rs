//! Whole-dataset prediction and evaluation.

use std::collections::BTreeSet;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, FrameScores, Metric, MetricReport, DEFAULT_SPLITS};
use crate::model::Model;
use crate::saliency::{FixationMap, SaliencyMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub splits: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            splits: DEFAULT_SPLITS,
            seed: 0,
        }
    }
}

/// Inference over every video from a fresh recurrence state.
pub fn predict_dataset(model: &Model, data: &Dataset) -> Result<Vec<Vec<SaliencyMap>>> {
    data.videos
        .iter()
        .map(|v| model.predict_sequence(&v.frames))
        .collect()
}

/// The same map for every frame of every video.
pub fn constant_predictions(data: &Dataset, map: &SaliencyMap) -> Vec<Vec<SaliencyMap>> {
    data.videos
        .iter()
        .map(|v| vec![map.clone(); v.len()])
        .collect()
}

/// Isotropic Gaussian at the frame center with standard deviation
/// `sigma_frac · min(H, W)`, peak 1.
pub fn center_prior(height: usize, width: usize, sigma_frac: f64) -> Result<SaliencyMap> {
    if sigma_frac.is_nan() || sigma_frac <= 0.0 {
        return Err(Error::Config(format!("sigma_frac must be > 0, got {sigma_frac}")));
    }
    let s = sigma_frac * height.min(width) as f64;
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let v = (0..height * width)
        .map(|i| {
            let (dy, dx) = ((i / width) as f64 - cy, (i % width) as f64 - cx);
            (-(dy * dy + dx * dx) / (2.0 * s * s)).exp()
        })
        .collect();
    SaliencyMap::new(height, width, v)
}

/// Mean over consecutive frame pairs of `mean |map_t − map_{t−1}|`, pooled
/// over all videos.
pub fn temporal_variation(maps: &[Vec<SaliencyMap>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for video in maps {
        for pair in video.windows(2) {
            let (a, b) = (pair[0].values(), pair[1].values());
            sum += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn check_alignment(data: &Dataset, preds: &[Vec<SaliencyMap>]) -> Result<()> {
    if preds.len() != data.videos.len() {
        return Err(Error::Invalid(format!(
            "{} prediction sequences for {} videos",
            preds.len(),
            data.videos.len()
        )));
    }
    for (v, p) in data.videos.iter().zip(preds) {
        if p.len() != v.len() {
            return Err(Error::Invalid(format!(
                "video {} has {} predictions for {} frames",
                v.video_id,
                p.len(),
                v.len()
            )));
        }
        if let Some(m) = p.iter().find(|m| (m.height(), m.width()) != (data.height, data.width)) {
            return Err(Error::Invalid(format!(
                "video {}: prediction is {}x{}, dataset is {}x{}",
                v.video_id,
                m.height(),
                m.width(),
                data.height,
                data.width
            )));
        }
    }
    Ok(())
}

/// Negative pool for s-AUC per video: distinct fixated locations of every
/// other video.
pub fn shuffled_pools(data: &Dataset) -> Vec<Vec<usize>> {
    let own: Vec<BTreeSet<usize>> = data
        .videos
        .iter()
        .map(|v| metrics::fixation_pool(&v.fixations).into_iter().collect())
        .collect();
    (0..own.len())
        .map(|i| {
            let mut set = BTreeSet::new();
            for (j, s) in own.iter().enumerate() {
                if j != i {
                    set.extend(s);
                }
            }
            set.into_iter().collect()
        })
        .collect()
}

/// Score a single frame on all five metrics. Returns the scores and whether
/// s-AUC had to draw negatives with replacement.
pub fn score_frame(
    pred: &SaliencyMap,
    gt: &SaliencyMap,
    fix: &FixationMap,
    pool: &[usize],
    splits: usize,
    seed: u64,
) -> Result<(FrameScores, bool)> {
    let mut s: FrameScores = [None; 5];
    s[Metric::AucJudd.index()] = metrics::auc_judd(pred, fix)?;
    let shuffled = metrics::auc_shuffled(pred, fix, pool, splits, seed)?;
    s[Metric::AucShuffled.index()] = shuffled.map(|r| r.value);
    s[Metric::Nss.index()] = metrics::nss(pred, fix)?;
    s[Metric::Cc.index()] = metrics::cc(pred, gt)?;
    s[Metric::Sim.index()] = metrics::sim(pred, gt)?;
    Ok((s, shuffled.is_some_and(|r| r.with_replacement)))
}

/// Evaluate predictions against the dataset's maps and fixations.
pub fn evaluate(data: &Dataset, preds: &[Vec<SaliencyMap>], opts: EvalOptions) -> Result<MetricReport> {
    check_alignment(data, preds)?;
    let pools = shuffled_pools(data);
    let mut videos = Vec::with_capacity(data.videos.len());
    let mut replaced = Vec::new();
    for (vi, (v, p)) in data.videos.iter().zip(preds).enumerate() {
        let mut frames = Vec::with_capacity(v.len());
        let mut n_replaced = 0;
        for (fi, pred) in p.iter().enumerate() {
            let seed = opts.seed ^ ((vi as u64) << 32 | fi as u64);
            let (s, r) = score_frame(pred, &v.gt_maps[fi], &v.fixations[fi], &pools[vi], opts.splits, seed)?;
            n_replaced += usize::from(r);
            frames.push(s);
        }
        if n_replaced > 0 {
            replaced.push(format!(
                "{}: s-AUC negatives drawn with replacement on {n_replaced} frame(s), pool too small",
                v.video_id
            ));
        }
        videos.push((v.video_id.clone(), frames));
    }
    let mut report = metrics::aggregate(videos);
    report.warnings.extend(replaced);
    Ok(report)
}
