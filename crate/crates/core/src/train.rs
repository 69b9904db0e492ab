//! Training loop: task sampling, episode staging, flow-matching updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::episode::{generate_episode, read_episode, Episode, Staging};
use crate::error::{Error, Result};
use crate::model::{loss_and_gradients, FlowSample, Model, Request};
use crate::optim::Adam;
use crate::tasking::{sample_task_phase, TaskKind};

/// Training episodes use odd seeds, held-out evaluation even ones.
pub fn training_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random::<u64>() | 1
}

pub fn held_out_seed(base: u64, index: u64) -> u64 {
    (base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index.wrapping_mul(2_654_435_761))) & !1
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tags: Vec<&'static str>,
}

impl StepRecord {
    /// `step loss lr task_tag`, with the tags of a batch joined by `+`.
    pub fn log_line(&self) -> String {
        format!("{} {:.17e} {:.17e} {}", self.step, self.loss, self.lr, self.tags.join("+"))
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed updates.
    pub step: u64,
    data: Option<Vec<Episode>>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
        let model = Model::init(cfg.model.clone(), &mut rng)?;
        let adam = Adam::new(model.params.values());
        let data = load_data(&cfg)?;
        Ok(Self {
            cfg,
            model,
            adam,
            rng,
            step: 0,
            data,
        })
    }

    pub fn from_checkpoint(cfg: RunConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ck.config != cfg.model {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different model configuration".into(),
            ));
        }
        let data = load_data(&cfg)?;
        Ok(Self {
            model: Model {
                config: ck.config,
                params: ck.params,
            },
            adam: ck.adam,
            rng: ck.rng,
            step: ck.step,
            cfg,
            data,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    fn in_task_warmup(&self) -> bool {
        (self.step as f64) < self.cfg.tasks.warmup_fraction * self.cfg.train.steps as f64
    }

    fn next_episode(&mut self) -> Result<Episode> {
        let warm = self.in_task_warmup();
        match &self.data {
            Some(eps) => {
                let pool: Vec<usize> = (0..eps.len())
                    .filter(|&i| !warm || eps[i].task.task == TaskKind::MultiViewImageNVS)
                    .collect();
                let pool = if pool.is_empty() { (0..eps.len()).collect() } else { pool };
                let i = pool[self.rng.random_range(0..pool.len())];
                Ok(eps[i].clone())
            }
            None => {
                let spec = sample_task_phase(&mut self.rng, &self.cfg.tasks, warm)?;
                let seed = training_seed(&mut self.rng);
                generate_episode(&spec, seed, &self.cfg.data, Staging::default())
            }
        }
    }

    /// One optimizer update on a fresh batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let lr = self.cfg.optim.lr_at(self.step, self.cfg.train.steps);
        let mut prepared = Vec::with_capacity(self.cfg.train.batch);
        let mut tags = Vec::with_capacity(self.cfg.train.batch);
        for _ in 0..self.cfg.train.batch {
            let ep = self.next_episode()?;
            tags.push(ep.task.task.tag());
            prepared.push(self.model.prepare(&Request::from_episode(&ep, true))?);
        }
        let td = self.model.config.token_dim();
        let samples: Vec<FlowSample<'_>> = prepared
            .iter()
            .map(|p| FlowSample::draw_with(p, td, self.cfg.train.tau, &mut self.rng))
            .collect();
        let (loss, mut grads) = loss_and_gradients(&self.model, &samples)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at step {}", self.step + 1)));
        }
        self.adam
            .step(&self.cfg.optim, self.model.params.values_mut(), &mut grads, lr);
        if self.model.params.values().iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("non-finite parameters at step {}", self.step + 1)));
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            lr,
            tags,
        })
    }
}

fn load_data(cfg: &RunConfig) -> Result<Option<Vec<Episode>>> {
    let Some(dir) = &cfg.train.data_dir else {
        return Ok(None);
    };
    let mut dirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("no episode archives under {}", dir.display())));
    }
    let eps = dirs
        .iter()
        .map(|d| read_episode(d).map(|(e, _)| e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(eps))
}
