use std::path::Path;

use vidsal::data::{generate, write_dataset};

use crate::args::SynthArgs;
use crate::config::RunConfig;
use crate::failure::Failure;

pub fn run(config: Option<&Path>, a: SynthArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    let s = &mut cfg.synth;
    if let Some(n) = a.size {
        s.height = n;
        s.width = n;
    }
    let overrides = [
        (a.videos, &mut s.n_videos),
        (a.frames, &mut s.frames_per_video),
        (a.height, &mut s.height),
        (a.width, &mut s.width),
        (a.blobs, &mut s.max_blobs),
        (a.fixations, &mut s.fixations_per_frame),
    ];
    for (flag, slot) in overrides {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    for (flag, slot) in [(a.sigma, &mut s.sigma), (a.speed, &mut s.max_speed), (a.noise, &mut s.noise)] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    s.validate()?;

    let data = generate(&cfg.synth)?;
    write_dataset(&data, &a.out)?;
    cfg.write(&a.out, "synth", &["synth"])?;
    println!(
        "wrote {} videos x {} frames ({}x{}) to {}",
        data.videos.len(),
        cfg.synth.frames_per_video,
        data.height,
        data.width,
        a.out.display()
    );
    Ok(())
}
