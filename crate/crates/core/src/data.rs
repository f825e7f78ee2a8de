//! Synthetic moving-blob videos and the on-disk dataset layout.
//!
//! ```text
//! root/manifest.toml
//! root/<video_id>/frames/NNNN.pgm
//! root/<video_id>/gt/NNNN.pgm
//! root/<video_id>/fix/NNNN.txt      one "row col" pair per line
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm;
use crate::saliency::{FixationMap, SaliencyMap};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;
/// Subdirectory holding predicted maps, mirroring `gt/`.
pub const PREDICTIONS_DIR: &str = "maps";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    /// Each video draws between 1 and `max_blobs` blobs.
    pub max_blobs: usize,
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    /// Pixels per frame. The default keeps the drift over ten frames below
    /// one `sigma`.
    pub max_speed: f64,
    /// Amplitude of the uniform pixel noise added to frames.
    pub noise: f64,
    pub fixations_per_frame: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 20,
            frames_per_video: 40,
            height: 32,
            width: 32,
            max_blobs: 3,
            sigma: 3.0,
            max_speed: 0.25,
            noise: 0.05,
            fixations_per_frame: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_videos == 0 || self.frames_per_video == 0 {
            return err("n_videos and frames_per_video must be >= 1".into());
        }
        if self.height == 0 || self.width == 0 {
            return err("height and width must be >= 1".into());
        }
        if !(1..=3).contains(&self.max_blobs) {
            return err(format!("max_blobs must be 1..=3, got {}", self.max_blobs));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return err(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.max_speed >= 0.0 && self.max_speed.is_finite()) {
            return err(format!("max_speed must be >= 0, got {}", self.max_speed));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err(format!("noise must be >= 0, got {}", self.noise));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    /// `[1, H, W]` luminance in `[0, 1]`.
    pub frames: Vec<Tensor>,
    pub gt_maps: Vec<SaliencyMap>,
    pub fixations: Vec<FixationMap>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub videos: Vec<VideoSample>,
}

impl Dataset {
    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(VideoSample::len).sum()
    }

    pub fn video_ids(&self) -> Vec<&str> {
        self.videos.iter().map(|v| v.video_id.as_str()).collect()
    }
}

pub fn video_id(index: usize) -> String {
    format!("v{index:03}")
}

struct Blob {
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    amplitude: f64,
}

impl Blob {
    /// Constant velocity with elastic reflection at the borders.
    fn advance(&mut self, height: usize, width: usize) {
        fn reflect(p: &mut f64, v: &mut f64, hi: f64) {
            *p += *v;
            if hi <= 0.0 {
                *p = 0.0;
                return;
            }
            // Fold back until inside; fast blobs may bounce more than once.
            while *p < 0.0 || *p > hi {
                if *p < 0.0 {
                    *p = -*p;
                } else {
                    *p = 2.0 * hi - *p;
                }
                *v = -*v;
            }
        }
        reflect(&mut self.y, &mut self.vy, (height - 1) as f64);
        reflect(&mut self.x, &mut self.vx, (width - 1) as f64);
    }
}

fn gaussian_sum(blobs: &[Blob], h: usize, w: usize, sigma: f64, weighted: bool) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; h * w];
    for b in blobs {
        let a = if weighted { b.amplitude } else { 1.0 };
        for r in 0..h {
            let dy = r as f64 - b.y;
            for c in 0..w {
                let dx = c as f64 - b.x;
                out[r * w + c] += a * (-(dy * dy + dx * dx) * inv).exp();
            }
        }
    }
    out
}

fn generate_video(cfg: &SynthConfig, index: usize) -> Result<VideoSample> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n_blobs = rng.gen_range(1..=cfg.max_blobs);
    let mut blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let speed = if cfg.max_speed > 0.0 {
                rng.gen_range(0.0..=cfg.max_speed)
            } else {
                0.0
            };
            Blob {
                y: rng.gen_range(0.0..=(h - 1) as f64),
                x: rng.gen_range(0.0..=(w - 1) as f64),
                vy: speed * angle.sin(),
                vx: speed * angle.cos(),
                amplitude: rng.gen_range(0.6..=1.0),
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    let mut gt_maps = Vec::with_capacity(cfg.frames_per_video);
    let mut fixations = Vec::with_capacity(cfg.frames_per_video);
    for _ in 0..cfg.frames_per_video {
        let mut frame = gaussian_sum(&blobs, h, w, cfg.sigma, true);
        for v in &mut frame {
            let n = if cfg.noise > 0.0 {
                rng.gen_range(-cfg.noise..=cfg.noise)
            } else {
                0.0
            };
            *v = (*v + n).clamp(0.0, 1.0);
        }
        frames.push(Tensor::new(vec![1, h, w], frame)?);

        let mut gt = gaussian_sum(&blobs, h, w, cfg.sigma, false);
        let peak = gt.iter().cloned().fold(f64::MIN, f64::max);
        gt.iter_mut().for_each(|v| *v /= peak);
        let dist = WeightedIndex::new(&gt)
            .map_err(|e| Error::Invalid(format!("ground-truth map not a distribution: {e}")))?;
        let points = (0..cfg.fixations_per_frame)
            .map(|_| {
                let i = dist.sample(&mut rng);
                (i / w, i % w)
            })
            .collect();
        fixations.push(FixationMap::new(h, w, points)?);
        gt_maps.push(SaliencyMap::new(h, w, gt)?);

        for b in &mut blobs {
            b.advance(h, w);
        }
    }
    Ok(VideoSample {
        video_id: video_id(index),
        frames,
        gt_maps,
        fixations,
    })
}

/// Deterministic moving-blob dataset.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        videos: (0..cfg.n_videos)
            .map(|i| generate_video(cfg, i))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    height: usize,
    width: usize,
    videos: Vec<ManifestVideo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestVideo {
    id: String,
    frames: usize,
    frames_dir: String,
    gt_dir: String,
    fix_dir: String,
}

fn frame_file(i: usize, ext: &str) -> String {
    format!("{i:04}.{ext}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_fixations(path: &Path, fix: &FixationMap) -> Result<()> {
    let text: String = fix
        .points()
        .iter()
        .map(|(r, c)| format!("{r} {c}\n"))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_fixations(path: &Path, height: usize, width: usize) -> Result<FixationMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(r)), Some(Ok(c)), None) => points.push((r, c)),
            _ => {
                return Err(Error::data(
                    path,
                    format!("line {}: expected \"row col\", got {line:?}", n + 1),
                ))
            }
        }
    }
    FixationMap::new(height, width, points).map_err(|e| Error::data(path, e.to_string()))
}

fn write_map(path: &Path, map: &SaliencyMap) -> Result<()> {
    pgm::write(path, map.height(), map.width(), map.values())
}

fn read_image(path: &Path, height: usize, width: usize) -> Result<Vec<f64>> {
    let img = pgm::read(path)?;
    if (img.height, img.width) != (height, width) {
        return Err(Error::data(
            path,
            format!(
                "image is {}x{}, manifest says {height}x{width}",
                img.height, img.width
            ),
        ));
    }
    Ok(img.values)
}

/// Write every video, then the manifest, so a reader never sees a partial
/// dataset.
pub fn write_dataset(data: &Dataset, root: &Path) -> Result<()> {
    create_dir(root)?;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        height: data.height,
        width: data.width,
        videos: Vec::with_capacity(data.videos.len()),
    };
    for v in &data.videos {
        let entry = ManifestVideo {
            id: v.video_id.clone(),
            frames: v.len(),
            frames_dir: format!("{}/frames", v.video_id),
            gt_dir: format!("{}/gt", v.video_id),
            fix_dir: format!("{}/fix", v.video_id),
        };
        let (fd, gd, xd) = (
            root.join(&entry.frames_dir),
            root.join(&entry.gt_dir),
            root.join(&entry.fix_dir),
        );
        for d in [&fd, &gd, &xd] {
            create_dir(d)?;
        }
        for (i, ((frame, gt), fix)) in v.frames.iter().zip(&v.gt_maps).zip(&v.fixations).enumerate() {
            pgm::write(&fd.join(frame_file(i, "pgm")), data.height, data.width, frame.data())?;
            write_map(&gd.join(frame_file(i, "pgm")), gt)?;
            write_fixations(&xd.join(frame_file(i, "txt")), fix)?;
        }
        manifest.videos.push(entry);
    }
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Invalid(format!("manifest serialization: {e}")))?;
    let path = root.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn count_files(dir: &Path, ext: &str) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().extension().is_some_and(|x| x == ext) {
            n += 1;
        }
    }
    Ok(n)
}

fn check_count(dir: &Path, ext: &str, expected: usize) -> Result<()> {
    let found = count_files(dir, ext)?;
    if found != expected {
        return Err(Error::data(
            dir,
            format!("{found} .{ext} files, manifest lists {expected} frames"),
        ));
    }
    Ok(())
}

fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::data(
            &path,
            format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                m.version
            ),
        ));
    }
    Ok(m)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let m = read_manifest(root)?;
    let (h, w) = (m.height, m.width);
    let mut videos = Vec::with_capacity(m.videos.len());
    for entry in &m.videos {
        let (fd, gd, xd) = (
            root.join(&entry.frames_dir),
            root.join(&entry.gt_dir),
            root.join(&entry.fix_dir),
        );
        check_count(&fd, "pgm", entry.frames)?;
        check_count(&gd, "pgm", entry.frames)?;
        check_count(&xd, "txt", entry.frames)?;
        let mut v = VideoSample {
            video_id: entry.id.clone(),
            frames: Vec::with_capacity(entry.frames),
            gt_maps: Vec::with_capacity(entry.frames),
            fixations: Vec::with_capacity(entry.frames),
        };
        for i in 0..entry.frames {
            let frame = read_image(&fd.join(frame_file(i, "pgm")), h, w)?;
            v.frames.push(Tensor::new(vec![1, h, w], frame)?);
            let gp = gd.join(frame_file(i, "pgm"));
            let gt = read_image(&gp, h, w)?;
            v.gt_maps
                .push(SaliencyMap::new(h, w, gt).map_err(|e| Error::data(&gp, e.to_string()))?);
            v.fixations
                .push(read_fixations(&xd.join(frame_file(i, "txt")), h, w)?);
        }
        videos.push(v);
    }
    Ok(Dataset {
        height: h,
        width: w,
        videos,
    })
}

/// `root/<video_id>/<subdir>` for each video.
pub fn prediction_dir(root: &Path, video_id: &str, subdir: &str) -> PathBuf {
    root.join(video_id).join(subdir)
}

pub fn write_predictions(
    root: &Path,
    data: &Dataset,
    maps: &[Vec<SaliencyMap>],
    subdir: &str,
) -> Result<()> {
    for (v, seq) in data.videos.iter().zip(maps) {
        let dir = prediction_dir(root, &v.video_id, subdir);
        create_dir(&dir)?;
        for (i, m) in seq.iter().enumerate() {
            write_map(&dir.join(frame_file(i, "pgm")), m)?;
        }
    }
    Ok(())
}

/// Read maps laid out like the dataset's `gt/` directories; `subdir` is
/// usually [`PREDICTIONS_DIR`] (or `"gt"` to evaluate the ground truth itself).
pub fn load_predictions(root: &Path, data: &Dataset, subdir: &str) -> Result<Vec<Vec<SaliencyMap>>> {
    data.videos
        .iter()
        .map(|v| {
            let dir = prediction_dir(root, &v.video_id, subdir);
            let found = count_files(&dir, "pgm")?;
            if found != v.len() {
                return Err(Error::data(
                    &dir,
                    format!(
                        "video {} has {found} prediction maps, dataset has {} frames",
                        v.video_id,
                        v.len()
                    ),
                ));
            }
            (0..v.len())
                .map(|i| {
                    let p = dir.join(frame_file(i, "pgm"));
                    let values = read_image(&p, data.height, data.width)?;
                    SaliencyMap::new(data.height, data.width, values)
                })
                .collect()
        })
        .collect()
}

/// Mirror and right-angle rotation applied identically to frames and maps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Augment {
    pub mirror: bool,
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
}

impl Augment {
    /// Draw a transform; non-square frames only rotate by 0° or 180° so the
    /// shape is preserved.
    pub fn draw(rng: &mut impl Rng, height: usize, width: usize) -> Self {
        let mirror = rng.gen_bool(0.5);
        let quarter_turns = if height == width {
            rng.gen_range(0..4)
        } else {
            2 * rng.gen_range(0..2)
        };
        Self {
            mirror,
            quarter_turns,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.mirror && self.quarter_turns.is_multiple_of(4)
    }

    /// Source index in an `h × w` plane for each output position.
    fn source(&self, h: usize, w: usize) -> (usize, usize, Vec<usize>) {
        let turns = self.quarter_turns % 4;
        let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
        let mut idx = Vec::with_capacity(h * w);
        for r in 0..oh {
            for c in 0..ow {
                // Undo the mirror, then the rotation.
                let c = if self.mirror { ow - 1 - c } else { c };
                let (sr, sc) = match turns {
                    0 => (r, c),
                    1 => (c, w - 1 - r),
                    2 => (h - 1 - r, w - 1 - c),
                    _ => (h - 1 - c, r),
                };
                idx.push(sr * w + sc);
            }
        }
        (oh, ow, idx)
    }

    /// Transform the trailing two dims of a tensor.
    pub fn apply_tensor(&self, t: &Tensor) -> Result<Tensor> {
        let shape = t.shape();
        if shape.len() < 2 {
            return Err(Error::Invalid(format!("cannot augment shape {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (oh, ow, idx) = self.source(h, w);
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        let data = t
            .data()
            .chunks(h * w)
            .flat_map(|plane| idx.iter().map(move |&i| plane[i]))
            .collect();
        Ok(Tensor::new(out_shape, data)?)
    }

    pub fn apply_map(&self, m: &SaliencyMap) -> Result<SaliencyMap> {
        SaliencyMap::from_tensor(self.apply_tensor(m.tensor())?)
    }
}
