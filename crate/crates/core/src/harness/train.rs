use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_margin::{GroupMarginParams, GROUP_COUNT};
use crate::metrics::{aar, MetricsReport};
use crate::numerics::{ParamStore, Session, TensorRecord};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};

use super::config::RunConfig;
use super::dataset::{prepare, Dataset, Prepared};
use super::margin_phase::{run_margin_phase, PhaseLog};
use super::model::AgeModel;
use super::report::{EpochLog, PolicyGrid, RunReport, REPORT_SCHEMA};

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Independent random streams per concern, so turning the margin phase on
/// or off leaves data, init and batching draws unchanged.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Data = 0,
    Init = 1,
    Batches = 2,
    Agent = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub config: RunConfig,
    pub margins: [f64; GROUP_COUNT],
    pub params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, epoch: usize, margins: [f64; GROUP_COUNT], store: &ParamStore) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA,
            epoch,
            config: config.clone(),
            margins,
            params: store.to_records(),
        }
    }

    pub fn store(&self) -> Result<ParamStore> {
        ParamStore::from_records(self.params.clone())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: RunReport,
}

pub fn evaluate(model: &AgeModel, store: &ParamStore, samples: &[Prepared]) -> Result<MetricsReport> {
    let preds = model.predict(store, samples)?;
    let labels: Vec<f64> = samples.iter().map(|s| f64::from(s.age)).collect();
    let groups: Vec<usize> = samples.iter().map(|s| s.group).collect();
    aar(&preds, &labels, &groups, None)
}

/// Training state. After a failed [`Trainer::run`], [`Trainer::last_good`]
/// holds the checkpoint of the last completed epoch.
pub struct Trainer<'a> {
    config: RunConfig,
    dataset: &'a Dataset,
    last_good: Option<Checkpoint>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.config != config.data {
            return Err(Error::Config("dataset was generated with a different data config".into()));
        }
        dataset.check_groups()?;
        Ok(Self {
            config,
            dataset,
            last_good: None,
        })
    }

    pub fn last_good(&self) -> Option<&Checkpoint> {
        self.last_good.as_ref()
    }

    pub fn run(&mut self) -> Result<TrainOutcome> {
        let config = self.config.clone();
        let model = AgeModel::new(&config)?;
        let train = prepare(&self.dataset.train, &config.data)?;
        let test = prepare(&self.dataset.test, &config.data)?;
        let mut margins = GroupMarginParams {
            scale: config.model.margins.scale,
            margins: config.model.margins.margins,
        };
        let mut store = model.init_params(&margins, &mut stream_rng(config.seed, Stream::Init));
        let mut batch_rng = stream_rng(config.seed, Stream::Batches);
        let mut agent_rng = stream_rng(config.seed, Stream::Agent);
        let t = &config.train;
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: t.optimizer,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            ..OptimizerConfig::default()
        })?;
        let batches_per_epoch = train.len().div_ceil(t.batch_size);
        let total_steps = batches_per_epoch * t.epochs;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut step = 0;
        let mut epochs = Vec::with_capacity(t.epochs);
        let mut phases: Vec<PhaseLog> = Vec::new();
        let mut policy = None;
        self.last_good = Some(Checkpoint::new(&config, 0, margins.margins, &store));

        for epoch in 1..=t.epochs {
            order.shuffle(&mut batch_rng);
            let mut loss_sum = 0.0;
            let mut lr = t.learning_rate;
            for chunk in order.chunks(t.batch_size) {
                let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
                let ages: Vec<u32> = batch.iter().map(|s| s.age).collect();
                let groups: Vec<usize> = batch.iter().map(|s| s.group).collect();
                let (loss, grads) = {
                    let mut s = Session::new(&store);
                    let e = model.embed(&mut s, &batch, &mut batch_rng, true)?;
                    let f = model.neck(&mut s, e)?;
                    let loss = model.loss(&mut s, f, &ages, &groups).map_err(|e| diverged(epoch, e))?;
                    let value = s.scalar(loss);
                    if !value.is_finite() {
                        return Err(Error::TrainingDiverged {
                            epoch,
                            reason: format!("loss {value} at step {step}"),
                        });
                    }
                    (value, s.backward(loss)?)
                };
                store.accumulate(grads)?;
                lr = cosine_lr(t.learning_rate, step, total_steps);
                opt.step(&mut store, lr).map_err(|e| diverged(epoch, e))?;
                if let Some((k, _)) = store.iter().find(|(_, p)| !p.value.is_finite()) {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        reason: format!("parameter {k} became non-finite at step {step}"),
                    });
                }
                loss_sum += loss * batch.len() as f64;
                step += 1;
            }

            let rl = &config.rl;
            if rl.enabled && epoch % rl.every == 0 && epoch < t.epochs {
                let embeddings = model.embed_all(&store, &train, 64)?;
                let ages: Vec<u32> = train.iter().map(|s| s.age).collect();
                let groups: Vec<usize> = train.iter().map(|s| s.group).collect();
                let phase = run_margin_phase(
                    &model,
                    &store,
                    &margins.margins,
                    &embeddings,
                    &ages,
                    &groups,
                    rl,
                    epoch,
                    &mut agent_rng,
                )?;
                margins.margins = phase.log.margins_after;
                margins.write_margins(&model.margin_keys, &mut store);
                policy = Some(PolicyGrid::new(&phase.space, &phase.policy)?);
                phases.push(phase.log);
            }

            let m = evaluate(&model, &store, &test).map_err(|e| diverged(epoch, e))?;
            epochs.push(EpochLog {
                epoch,
                loss: loss_sum / train.len() as f64,
                learning_rate: lr,
                mae: m.mae,
                group_mae: m.group_mae,
                margins: margins.margins,
            });
            self.last_good = Some(Checkpoint::new(&config, epoch, margins.margins, &store));
        }

        let metrics = evaluate(&model, &store, &test)?;
        let report = RunReport {
            schema: REPORT_SCHEMA,
            config: config.clone(),
            dataset_digest: self.dataset.digest(),
            epochs,
            phases,
            final_margins: margins.margins,
            metrics,
            policy,
        };
        Ok(TrainOutcome {
            checkpoint: Checkpoint::new(&config, t.epochs, margins.margins, &store),
            report,
        })
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { context } => Error::TrainingDiverged { epoch, reason: context },
        other => other,
    }
}

/// Generates the dataset for `config` and trains on it.
pub fn run_training(config: &RunConfig) -> Result<(Dataset, TrainOutcome)> {
    config.validate()?;
    let dataset = super::dataset::generate_synthetic_dataset(&config.data, config.seed, &mut stream_rng(config.seed, Stream::Data))?;
    let outcome = Trainer::new(config.clone(), &dataset)?.run()?;
    Ok((dataset, outcome))
}
