//! Saliency metrics and the per-frame → per-video → dataset aggregation.
//!
//! A metric returns `Ok(None)` when a frame is invalid for it (constant map,
//! no fixations, ...). Invalid frames are excluded from means and counted.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::saliency::{FixationMap, SaliencyMap};

pub const DEFAULT_SPLITS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    AucJudd,
    AucShuffled,
    Nss,
    Cc,
    Sim,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::AucJudd,
        Metric::AucShuffled,
        Metric::Nss,
        Metric::Cc,
        Metric::Sim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::AucJudd => "AUC-J",
            Metric::AucShuffled => "s-AUC",
            Metric::Nss => "NSS",
            Metric::Cc => "CC",
            Metric::Sim => "SIM",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the metric needs fixation points (as opposed to a dense map).
    pub fn uses_fixations(self) -> bool {
        matches!(self, Metric::AucJudd | Metric::AucShuffled | Metric::Nss)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "aucj" | "aucjudd" => Ok(Metric::AucJudd),
            "sauc" | "aucs" | "aucshuffled" | "shuffledauc" => Ok(Metric::AucShuffled),
            "nss" => Ok(Metric::Nss),
            "cc" => Ok(Metric::Cc),
            "sim" => Ok(Metric::Sim),
            _ => Err(Error::Config(format!(
                "unknown metric {s:?} (AUC-J, s-AUC, NSS, CC, SIM)"
            ))),
        }
    }
}

fn check_extent(pred: &SaliencyMap, fix: &FixationMap) -> Result<()> {
    if fix.extent() != (pred.height(), pred.width()) {
        return Err(Error::Invalid(format!(
            "fixation extent {:?} differs from map {}x{}",
            fix.extent(),
            pred.height(),
            pred.width()
        )));
    }
    Ok(())
}

fn check_shapes(a: &SaliencyMap, b: &SaliencyMap) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Invalid(format!(
            "map shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and population standard deviation.
fn moments(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Normalized scanpath saliency: mean z-score of the map at the fixations,
/// with the population standard deviation. Duplicated points count each time.
pub fn nss(pred: &SaliencyMap, fix: &FixationMap) -> Result<Option<f64>> {
    check_extent(pred, fix)?;
    let v = pred.values();
    let (m, sd) = moments(v);
    if fix.is_empty() || is_constant(v) {
        return Ok(None);
    }
    let z: f64 = fix.indices().map(|i| (v[i] - m) / sd).sum();
    Ok(Some(z / fix.len() as f64))
}

/// Pearson correlation over all pixels.
pub fn cc(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let (a, b) = (pred.values(), gt.values());
    if is_constant(a) || is_constant(b) {
        return Ok(None);
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

/// Histogram intersection of the two maps normalized to unit sum.
pub fn sim(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let (a, b) = (pred.values(), gt.values());
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if sa <= 0.0 || sb <= 0.0 {
        return Ok(None);
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x / sa).min(y / sb)).sum();
    Ok(Some(s.min(1.0)))
}

/// Area under the ROC curve separating `pos` from `neg` scores, sweeping the
/// threshold over every distinct score with ties counted as detections, and
/// integrating by the trapezoidal rule. This equals the fraction of
/// (positive, negative) pairs ordered correctly, ties counting one half.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let (tp0, fp0) = (tp, fp);
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 / nn * (tp + tp0) as f64 / (2.0 * np);
    }
    Some(area)
}

/// AUC with the fixated pixels as positives and all other pixels as negatives.
pub fn auc_judd(pred: &SaliencyMap, fix: &FixationMap) -> Result<Option<f64>> {
    check_extent(pred, fix)?;
    let mask = fix.mask();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (&v, &m) in pred.values().iter().zip(&mask) {
        if m {
            pos.push(v);
        } else {
            neg.push(v);
        }
    }
    Ok(roc_auc(&pos, &neg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShuffledAuc {
    pub value: f64,
    /// The negative pool was smaller than the fixation count, so negatives
    /// were drawn with replacement.
    pub with_replacement: bool,
}

/// Distinct row-major locations of `maps`, the candidate negatives for
/// shuffled AUC.
pub fn fixation_pool<'a>(maps: impl IntoIterator<Item = &'a FixationMap>) -> Vec<usize> {
    let set: BTreeSet<usize> = maps.into_iter().flat_map(|m| m.indices()).collect();
    set.into_iter().collect()
}

/// Shuffled AUC: positives are the fixated pixels, negatives `|fix|` pixels
/// drawn from `pool` (row-major locations, typically fixations of other
/// videos) minus the locations in `fix`; averaged over `n_splits` draws.
pub fn auc_shuffled(
    pred: &SaliencyMap,
    fix: &FixationMap,
    pool: &[usize],
    n_splits: usize,
    seed: u64,
) -> Result<Option<ShuffledAuc>> {
    check_extent(pred, fix)?;
    if n_splits == 0 {
        return Err(Error::Config("s-AUC needs at least one split".into()));
    }
    let n = pred.values().len();
    if let Some(&bad) = pool.iter().find(|&&i| i >= n) {
        return Err(Error::Invalid(format!(
            "negative pool location {bad} outside a {n}-pixel map"
        )));
    }
    let mask = fix.mask();
    let v = pred.values();
    let candidates: Vec<usize> = pool.iter().copied().filter(|&i| !mask[i]).collect();
    if fix.is_empty() || candidates.is_empty() {
        return Ok(None);
    }
    let pos: Vec<f64> = mask
        .iter()
        .zip(v)
        .filter_map(|(&m, &x)| m.then_some(x))
        .collect();
    let k = fix.len();
    let with_replacement = candidates.len() < k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut neg = Vec::with_capacity(k);
    for _ in 0..n_splits {
        neg.clear();
        if with_replacement {
            neg.extend((0..k).map(|_| v[candidates[rng.gen_range(0..candidates.len())]]));
        } else {
            neg.extend(index::sample(&mut rng, candidates.len(), k).iter().map(|j| v[candidates[j]]));
        }
        total += roc_auc(&pos, &neg).expect("non-empty sets");
    }
    Ok(Some(ShuffledAuc {
        value: total / n_splits as f64,
        with_replacement,
    }))
}

/// One value per metric, `None` where the frame is invalid for it.
pub type FrameScores = [Option<f64>; 5];

#[derive(Debug, Clone, PartialEq)]
pub struct VideoReport {
    pub video_id: String,
    pub frames: Vec<FrameScores>,
    /// Mean over valid frames, per metric.
    pub mean: FrameScores,
    pub valid_frames: [usize; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub videos: Vec<VideoReport>,
    /// Mean over the per-video means of videos with a valid value.
    pub dataset: FrameScores,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn video(&self, id: &str) -> Option<&VideoReport> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    pub fn dataset_value(&self, m: Metric) -> Option<f64> {
        self.dataset[m.index()]
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut s, mut n) = (0.0, 0);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    ((n > 0).then(|| s / n as f64), n)
}

/// Two-stage mean: frames → video, then videos → dataset.
pub fn aggregate(videos: Vec<(String, Vec<FrameScores>)>) -> MetricReport {
    let mut warnings = Vec::new();
    let reports: Vec<VideoReport> = videos
        .into_iter()
        .map(|(video_id, frames)| {
            let mut mean = [None; 5];
            let mut valid_frames = [0; 5];
            for m in Metric::ALL {
                let (v, n) = mean_of(frames.iter().map(|f| f[m.index()]));
                mean[m.index()] = v;
                valid_frames[m.index()] = n;
                let invalid = frames.len() - n;
                if n == 0 {
                    warnings.push(format!(
                        "{video_id}: no valid frames for {m}; video excluded from its dataset mean"
                    ));
                } else if invalid > 0 {
                    warnings.push(format!("{video_id}: {invalid} invalid frame(s) for {m}"));
                }
            }
            VideoReport {
                video_id,
                frames,
                mean,
                valid_frames,
            }
        })
        .collect();
    let mut dataset = [None; 5];
    for m in Metric::ALL {
        dataset[m.index()] = mean_of(reports.iter().map(|r| r.mean[m.index()])).0;
    }
    MetricReport {
        videos: reports,
        dataset,
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: Metric,
    /// `A − B` per video; `None` if either side has no valid value.
    pub rows: Vec<(String, Option<f64>)>,
    pub mean: Option<f64>,
    /// Population variance of the valid differences.
    pub variance: Option<f64>,
}

/// Per-video signed differences `A − B` for one metric.
pub fn compare_per_video(a: &[(String, Option<f64>)], b: &[(String, Option<f64>)], metric: Metric) -> Result<Comparison> {
    let ids_a: BTreeSet<&str> = a.iter().map(|(id, _)| id.as_str()).collect();
    let ids_b: BTreeSet<&str> = b.iter().map(|(id, _)| id.as_str()).collect();
    if ids_a != ids_b || ids_a.len() != a.len() || ids_b.len() != b.len() {
        let only_a: Vec<_> = ids_a.difference(&ids_b).collect();
        let only_b: Vec<_> = ids_b.difference(&ids_a).collect();
        return Err(Error::Invalid(format!(
            "video sets differ (only in A: {only_a:?}, only in B: {only_b:?})"
        )));
    }
    let rows: Vec<(String, Option<f64>)> = a
        .iter()
        .map(|(id, va)| {
            let vb = b.iter().find(|(j, _)| j == id).and_then(|(_, v)| *v);
            (id.clone(), va.zip(vb).map(|(x, y)| x - y))
        })
        .collect();
    let diffs: Vec<f64> = rows.iter().filter_map(|(_, d)| *d).collect();
    let (mean, variance) = if diffs.is_empty() {
        (None, None)
    } else {
        let (m, sd) = moments(&diffs);
        (Some(m), Some(sd * sd))
    };
    Ok(Comparison {
        metric,
        rows,
        mean,
        variance,
    })
}

/// Per-video means of one metric, in report order.
pub fn per_video(report: &MetricReport, metric: Metric) -> Vec<(String, Option<f64>)> {
    report
        .videos
        .iter()
        .map(|v| (v.video_id.clone(), v.mean[metric.index()]))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Aligned text table: one row per video plus the dataset mean.
pub fn render_table(report: &MetricReport) -> String {
    let width = report
        .videos
        .iter()
        .map(|v| v.video_id.len())
        .max()
        .unwrap_or(0)
        .max("dataset".len());
    let mut out = format!("{:<width$}", "video");
    for m in Metric::ALL {
        out.push_str(&format!(" {:>8}", m.name()));
    }
    out.push('\n');
    for v in &report.videos {
        out.push_str(&format!("{:<width$}", v.video_id));
        for m in Metric::ALL {
            out.push_str(&format!(" {:>8}", fmt_opt(v.mean[m.index()])));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<width$}", "dataset"));
    for m in Metric::ALL {
        out.push_str(&format!(" {:>8}", fmt_opt(report.dataset[m.index()])));
    }
    out.push('\n');
    for w in &report.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

pub const CSV_HEADER: [&str; 4] = ["video_id", "metric", "mean", "valid_frames"];

/// Machine-readable records `(video_id, metric, mean, valid_frames)`; an
/// invalid mean is an empty field.
pub fn csv_records(report: &MetricReport) -> Vec<[String; 4]> {
    let mut rows = Vec::with_capacity(report.videos.len() * 5);
    for v in &report.videos {
        for m in Metric::ALL {
            rows.push([
                v.video_id.clone(),
                m.name().to_string(),
                v.mean[m.index()].map_or_else(String::new, |x| format!("{x:?}")),
                v.valid_frames[m.index()].to_string(),
            ]);
        }
    }
    rows
}

/// Parse records written by [`csv_records`] back to per-video means of one
/// metric.
pub fn per_video_from_records(
    records: &[[String; 4]],
    metric: Metric,
) -> Result<Vec<(String, Option<f64>)>> {
    let mut out = Vec::new();
    for [id, name, mean, _] in records {
        if name.parse::<Metric>()? != metric {
            continue;
        }
        let v = if mean.is_empty() {
            None
        } else {
            Some(
                mean.parse::<f64>()
                    .map_err(|_| Error::Invalid(format!("bad mean {mean:?} for {id}")))?,
            )
        };
        out.push((id.clone(), v));
    }
    Ok(out)
}
