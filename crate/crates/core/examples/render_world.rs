//! Render an orbiting camera around a random dynamic scene and save the
//! frames as a binary PPM strip.

use std::io::Write;

use camrope::world::{make_trajectory, render, SceneParams, SceneSpec, TrajectoryKind, TrajectoryParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = SceneSpec::random(seed, &SceneParams::default(), &mut rng)?;
    let traj = make_trajectory(
        TrajectoryKind::Orbit,
        &TrajectoryParams { frames: 6, sweep: 1.5, ..Default::default() },
    )?;
    let frames: Vec<_> = traj.frames().iter().map(|c| render(&scene, c)).collect();

    let (w, h) = (frames[0].width, frames[0].height);
    let mut bytes = format!("P6\n{} {}\n255\n", w * frames.len(), h).into_bytes();
    for v in 0..h {
        for f in &frames {
            for u in 0..w {
                bytes.extend(f.pixel(v, u).map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
    }
    let path = std::env::temp_dir().join("camrope_orbit.ppm");
    std::fs::File::create(&path)?.write_all(&bytes)?;
    println!("scene {} with {} primitives -> {}", scene.content_hash(), scene.primitives.len(), path.display());
    Ok(())
}
