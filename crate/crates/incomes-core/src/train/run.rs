//! The edit-training loop.
//!
//! Each step draws a batch size, builds a self-consistent step batch
//! (cases plus a distractor-padded pool), runs the frozen teacher, takes
//! one combined-loss step with gradients flowing through compression, and
//! logs a metrics record. A non-finite loss skips the step and keeps the
//! last good parameters.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::Serialize;

use crate::data::cases::{gen_step, CaseMix};
use crate::data::world::{Split, World};
use crate::model::checkpoint;
use crate::model::{ModelConfig, ModelState};
use crate::rng;
use crate::tensor::optim::{Adam, AdamConfig, LrSchedule};
use crate::train::loss::{batch_step, LossOptions, TrainExample};
use crate::train::sampler::BatchSizeSampler;
use crate::train::teacher::Teacher;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub steps: usize,
    pub examples_per_step: usize,
    pub mix: CaseMix,
    pub sampler: BatchSizeSampler,
    pub schedule: LrSchedule,
    pub loss_on_query: bool,
    pub golden_weight: f32,
    pub seed: u64,
    /// Metrics sink, one JSON record per step.
    pub metrics_path: Option<PathBuf>,
    /// Periodic checkpoints: (directory, every-n-steps).
    pub checkpoint: Option<(PathBuf, usize)>,
}

/// One training step's observables.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub pool_size: usize,
    pub lr: f64,
    pub total: f64,
    pub weighted_ce: f64,
    pub kl: f64,
    pub golden_aux: f64,
    pub student_ce: f64,
    pub zero_mass: f64,
    pub golden_mass: f64,
    pub attn_entropy: f64,
    pub skipped: bool,
}

/// Trains `student` in place against the frozen `teacher`.
pub fn run(
    student: &mut ModelState<f32>,
    cfg: &ModelConfig,
    teacher: &mut Teacher<f32>,
    world: &World,
    rc: &RunConfig,
) -> Result<Vec<StepRecord>> {
    if !student.is_extended() {
        return Err(Error::contract("edit training requires the extended student"));
    }
    if teacher.cfg().vocab_size != cfg.vocab_size {
        return Err(Error::contract("teacher and student vocabularies differ"));
    }
    if rc.steps == 0 || rc.examples_per_step == 0 {
        return Err(Error::param("run", "steps and examples_per_step must be positive"));
    }
    let opts = LossOptions {
        loss_on_query: rc.loss_on_query,
        golden_weight: rc.golden_weight,
        temperature: cfg.train_temperature as f32,
    };
    let lens: Vec<usize> = student
        .params()
        .iter()
        .filter(|(_, p)| p.requires_grad())
        .map(|(_, p)| p.len())
        .collect();
    let mut adam: Adam<f32> = Adam::new(AdamConfig::new(rc.schedule.clone()), &lens);
    let mut metrics = match &rc.metrics_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut draw_rng = rng::stream(rc.seed, "train.batch_size");
    let mut records = Vec::with_capacity(rc.steps);

    for step in 0..rc.steps {
        let pool_target = rc.sampler.draw(&mut draw_rng);
        let step_seed = rng::sub_seed(rc.seed, &format!("train.step.{step}"));
        let sb = gen_step(world, Split::Train, rc.mix, rc.examples_per_step, pool_target, step_seed)?;

        let mut examples = Vec::with_capacity(sb.cases.len());
        for c in &sb.cases {
            let refs: Vec<&[u32]> = c
                .related
                .iter()
                .map(|id| {
                    sb.pool
                        .iter()
                        .find(|e| e.id == *id)
                        .expect("related edit in pool")
                        .tokens
                        .as_slice()
                })
                .collect();
            let tout = teacher.output(&refs, &c.query, &c.answer, rc.loss_on_query)?;
            examples.push((TrainExample::from(c), tout));
        }

        let mut rec = StepRecord {
            step,
            pool_size: sb.pool.len(),
            lr: rc.schedule.lr(step),
            total: f64::NAN,
            weighted_ce: f64::NAN,
            kl: f64::NAN,
            golden_aux: f64::NAN,
            student_ce: f64::NAN,
            zero_mass: f64::NAN,
            golden_mass: f64::NAN,
            attn_entropy: f64::NAN,
            skipped: false,
        };
        match batch_step(student, cfg, &sb.pool, &examples, &opts, true) {
            Ok(stats) => {
                let mut params = student.params_mut();
                let mut pairs: Vec<(&mut [f32], &[f32])> = params
                    .iter_mut()
                    .filter(|(_, p)| p.requires_grad())
                    .map(|(_, p)| p.data_and_grad_mut().expect("gradient present"))
                    .collect();
                adam.step(&mut pairs, step)?;
                drop(params);
                student.zero_grads();
                rec.total = stats.total;
                rec.weighted_ce = stats.weighted_ce;
                rec.kl = stats.kl;
                rec.golden_aux = stats.golden_aux;
                rec.student_ce = stats.student_ce;
                rec.zero_mass = stats.zero_mass;
                rec.golden_mass = stats.golden_mass;
                rec.attn_entropy = stats.attn_entropy;
            }
            Err(Error::NonFinite(_)) => {
                // Skip the step: drop any partial gradients, keep params.
                student.zero_grads();
                rec.skipped = true;
            }
            Err(e) => return Err(e),
        }
        if let Some(w) = metrics.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}")?;
        }
        if let Some((dir, every)) = &rc.checkpoint {
            if *every > 0 && (step + 1) % every == 0 {
                checkpoint::save(&dir.join(format!("step_{step:05}.ckpt")), cfg, student)?;
            }
        }
        records.push(rec);
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    Ok(records)
}
