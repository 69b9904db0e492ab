//! Train a very small model for a few hundred steps and compare it with
//! the copy-nearest-frame baseline on held-out novel-view episodes.

use camrope::config::RunConfig;
use camrope::episode::Staging;
use camrope::evaluate::evaluate_task;
use camrope::tasking::TaskKind;
use camrope::train::Trainer;
use camrope::Result;

fn main() -> Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut cfg = RunConfig { seed: Some(3), ..Default::default() };
    cfg.model.depth = 2;
    cfg.model.d = 32;
    cfg.model.d_c = 32;
    cfg.train.steps = steps;
    cfg.train.batch = 2;

    let mut trainer = Trainer::new(cfg.clone())?;
    while trainer.step < steps {
        let r = trainer.train_step()?;
        if r.step % 100 == 0 {
            println!("{}", r.log_line());
        }
    }

    let spec = cfg.tasks.spec(TaskKind::MonoVideoNVS, (1, 3), (1, 3));
    let e = evaluate_task(&trainer.model, &spec, Staging::default(), &cfg.data, 8, 1, 100)?;
    println!("novel view psnr {:.2} dB, copy baseline {:.2} dB, ssim {:.3}", e.psnr, e.psnr_copy, e.ssim);
    Ok(())
}
