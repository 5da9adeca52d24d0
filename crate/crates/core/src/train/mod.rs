//! Alternating adversarial training with Adam, checkpointing and loss logs.

mod adam;
mod checkpoint;
mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{Adam, AdamConfig, Moments};
pub use checkpoint::{Checkpoint, ParamRecord, RngState, CKP_MAGIC, CKP_VERSION};
pub use config::TrainConfig;

use crate::dataset::{collate, load_dataset, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{Discriminator, Generator};
use crate::objectives::{lsgan_discriminator_loss, lsgan_generator_loss, total_generator_loss};
use crate::params::ParamStore;

pub const LOSS_LOG_HEADER: &str = "step,l_adv,l_vox,l_proj,l_d";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckp";

/// Loss components of one training step. `step` counts from zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub adv: f64,
    pub vox: f64,
    pub proj: f64,
    pub disc: f64,
}

impl StepLosses {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.adv, self.vox, self.proj, self.disc)
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let bad = || Error::Malformed {
            path: PathBuf::from(LOSS_LOG_FILE),
            detail: format!("bad loss row `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(StepLosses {
            step: f[0].parse().map_err(|_| bad())?,
            adv: num(f[1])?,
            vox: num(f[2])?,
            proj: num(f[3])?,
            disc: num(f[4])?,
        })
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<StepLosses>> {
    let file = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        rows.push(StepLosses::parse_row(&line)?);
    }
    Ok(rows)
}

pub struct Trainer {
    config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    rng: ChaCha8Rng,
    step: u64,
    epoch: u64,
}

impl Trainer {
    /// Fresh networks initialized from `config.seed`; the same stream then
    /// drives the epoch shuffles.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gen_params = ParamStore::new();
        let generator = Generator::new(config.generator(), &mut gen_params, &mut rng)?;
        let mut disc_params = ParamStore::new();
        let discriminator = Discriminator::new(config.discriminator(), &mut disc_params, &mut rng)?;
        let adam = |lr| AdamConfig {
            lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps_adam,
        };
        let gen_opt = Adam::new(adam(config.lr), &gen_params);
        let disc_opt = Adam::new(adam(config.lr_disc), &disc_params);
        Ok(Trainer {
            config,
            generator,
            discriminator,
            gen_params,
            disc_params,
            gen_opt,
            disc_opt,
            rng,
            step: 0,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Overrides the epoch budget, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    fn non_finite(&self, losses: &StepLosses) -> Error {
        Error::NonFinite {
            step: self.step,
            detail: format!(
                "l_adv={} l_vox={} l_proj={} l_d={} grad_norm_gen={} grad_norm_disc={}",
                losses.adv,
                losses.vox,
                losses.proj,
                losses.disc,
                self.gen_params.grad_norm(),
                self.disc_params.grad_norm()
            ),
        }
    }

    /// One discriminator update (or `d_steps_per_g_step` of them) on the
    /// detached generator output, then one generator update through the
    /// freshly updated discriminator.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let (f, l, vol) = (&batch.frontal, &batch.lateral, &batch.volume);
        self.gen_params.zero_grad();
        self.disc_params.zero_grad();
        let mut losses = StepLosses {
            step: self.step,
            adv: f64::NAN,
            vox: f64::NAN,
            proj: f64::NAN,
            disc: f64::NAN,
        };
        let fake = self.generator.forward(&self.gen_params, f, l)?;
        let fake_detached = fake.detach();
        let mut fake_patch = None;
        for _ in 0..self.config.d_steps_per_g_step {
            let real_patch = self.discriminator.forward(&self.disc_params, f, l, vol)?;
            let fp = self.discriminator.forward(&self.disc_params, f, l, &fake_detached)?;
            let ld = lsgan_discriminator_loss(&real_patch, &fp)?;
            losses.disc = ld.item() as f64;
            if !losses.disc.is_finite() {
                return Err(self.non_finite(&losses));
            }
            ld.backward()?;
            if !self.disc_params.grad_norm().is_finite() {
                return Err(self.non_finite(&losses));
            }
            self.disc_opt.step(&self.disc_params)?;
            self.disc_params.zero_grad();
            fake_patch = Some(fp);
        }
        let weights = self.config.weights();
        let patch = if weights.adv > 0.0 {
            Some(self.discriminator.forward(&self.disc_params, f, l, &fake)?)
        } else {
            None
        };
        let g = total_generator_loss(patch.as_ref(), &fake, vol, &weights)?;
        losses.vox = g.vox;
        losses.proj = g.proj;
        losses.adv = match patch {
            Some(_) => g.adv,
            None => lsgan_generator_loss(fake_patch.as_ref().expect("at least one critic step")).item() as f64,
        };
        let total = g.total.item() as f64;
        if !(total.is_finite() && losses.adv.is_finite()) {
            return Err(self.non_finite(&losses));
        }
        g.total.backward()?;
        if !self.gen_params.grad_norm().is_finite() {
            return Err(self.non_finite(&losses));
        }
        self.gen_opt.step(&self.gen_params)?;
        self.gen_params.zero_grad();
        self.disc_params.zero_grad();
        self.step += 1;
        Ok(losses)
    }

    /// Shuffles with the trainer's stream and runs one pass over `data`.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<Vec<StepLosses>> {
        if data.is_empty() {
            return Err(Error::Dataset("no paired samples to train on".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut rows = Vec::with_capacity(order.len().div_ceil(self.config.batch_size));
        for chunk in order.chunks(self.config.batch_size) {
            let samples: Vec<_> = chunk.iter().map(|&i| &data.samples[i]).collect();
            rows.push(self.train_step(&collate(&samples)?)?);
        }
        self.epoch += 1;
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = Vec::with_capacity(self.gen_params.len() + self.disc_params.len());
        for (store, opt) in [(&self.gen_params, &self.gen_opt), (&self.disc_params, &self.disc_opt)] {
            for (name, t) in store.iter() {
                params.push(ParamRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.to_vec(),
                    moments: opt.moments(name).expect("optimizer tracks every parameter").clone(),
                });
            }
        }
        Checkpoint {
            step: self.step,
            epoch: self.epoch,
            t_gen: self.gen_opt.t(),
            t_disc: self.disc_opt.t(),
            params,
            rng: RngState::capture(&self.rng),
            config_text: self.config.to_text(),
        }
    }

    /// Rebuilds the networks described by `config` and loads the parameter
    /// values, moments, counters and RNG position from `ckpt`.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        let expected = t.gen_params.len() + t.disc_params.len();
        if ckpt.params.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} parameters, the configured networks have {expected}",
                ckpt.params.len()
            )));
        }
        let gen_state = load_store(ckpt, &t.gen_params)?;
        let disc_state = load_store(ckpt, &t.disc_params)?;
        t.gen_opt.restore(ckpt.t_gen, gen_state)?;
        t.disc_opt.restore(ckpt.t_disc, disc_state)?;
        t.rng = ckpt.rng.restore();
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        Ok(t)
    }
}

/// Copies the checkpoint values of every parameter in `store` and returns
/// their moment buffers.
pub(crate) fn load_store(ckpt: &Checkpoint, store: &ParamStore) -> Result<IndexMap<String, Moments>> {
    let mut moments = IndexMap::new();
    for (name, t) in store.iter() {
        let rec = ckpt.param(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if rec.shape != t.shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("{name}: stored {:?}, network expects {:?}", rec.shape, t.shape()),
            ));
        }
        t.set_data(rec.data.clone())?;
        moments.insert(name.to_string(), rec.moments.clone());
    }
    Ok(moments)
}

/// Where a finished [`fit`] left its artifacts.
pub struct FitOutcome {
    pub trainer: Trainer,
    pub losses: Vec<StepLosses>,
    pub loss_log: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn write_log(path: &Path, rows: &[StepLosses]) -> Result<File> {
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let mut f = File::create(path).map_err(io)?;
    writeln!(f, "{LOSS_LOG_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(f, "{}", r.csv_row()).map_err(io)?;
    }
    Ok(f)
}

fn save_epoch(trainer: &Trainer, out: &Path) -> Result<PathBuf> {
    let ckpt = trainer.checkpoint();
    ckpt.save(&out.join(format!("ckpt_epoch_{}.ckp", trainer.epoch)))?;
    let last = out.join(LAST_CHECKPOINT);
    ckpt.save(&last)?;
    Ok(last)
}

/// Trains on `config.data_dir`, writing `loss_log.csv`, `ckpt_epoch_<e>.ckp`
/// after every epoch and `last.ckp` into `config.out_dir`. With `resume`,
/// training continues from that checkpoint and the log keeps the rows that
/// precede it.
pub fn fit(config: &TrainConfig, resume: Option<&Path>) -> Result<FitOutcome> {
    let data = load_dataset(&config.data_dir, &config.preprocess())?;
    if data.is_empty() {
        return Err(Error::Dataset(format!("no paired samples in {}", config.data_dir.display())));
    }
    fit_on(config, &data, resume)
}

pub fn fit_on(config: &TrainConfig, data: &Dataset, resume: Option<&Path>) -> Result<FitOutcome> {
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let log_path = out.join(LOSS_LOG_FILE);
    let (mut trainer, mut losses) = match resume {
        Some(path) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(path)?, config.clone())?;
            let prior = if log_path.exists() { read_loss_log(&log_path)? } else { Vec::new() };
            let kept = prior.into_iter().filter(|r| r.step < t.step()).collect();
            (t, kept)
        }
        None => (Trainer::new(config.clone())?, Vec::new()),
    };
    let mut log = write_log(&log_path, &losses)?;
    let mut last = out.join(LAST_CHECKPOINT);
    if resume.is_none() || !last.exists() {
        last = save_epoch(&trainer, out)?;
    }
    while (trainer.epoch() as usize) < config.epochs {
        let rows = trainer.run_epoch(data)?;
        for r in &rows {
            log::info!(
                "epoch {} step {}: l_adv={:.5} l_vox={:.5} l_proj={:.5} l_d={:.5}",
                trainer.epoch(),
                r.step,
                r.adv,
                r.vox,
                r.proj,
                r.disc
            );
            writeln!(log, "{}", r.csv_row()).map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
        }
        log.flush().map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
        losses.extend(rows);
        last = save_epoch(&trainer, out)?;
    }
    Ok(FitOutcome {
        trainer,
        losses,
        loss_log: log_path,
        last_checkpoint: last,
    })
}
