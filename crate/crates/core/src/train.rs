//! Epoch loop: schedule, shuffling, mini-batch Adam updates, evaluation and
//! checkpoint round trips.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Checkpoint, Dataset, Sample};
use crate::error::{Error, Result};
use crate::finetune::{self, ScheduleState};
use crate::model::LaTransformer;
use crate::optim::AdamState;
use crate::reid::{evaluate, EvalReport, GalleryIndex, LabeledEmbedding};
use crate::tensor::Tensor;

/// Stream of the shuffling generator; stream 0 of the same seed initializes weights.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    pub lr: f64,
    /// Block unfrozen at the start of this epoch.
    pub unfrozen_block: Option<usize>,
    pub trainable_blocks: usize,
    /// Ensemble vote accuracy on the training split.
    pub train_rank1: Option<f64>,
    pub query_rank1: Option<f64>,
    pub query_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub query_rank1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerMetadata {
    pub best: Option<BestRecord>,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: LaTransformer<f32>,
    pub adam: AdamState<f32>,
    pub schedule: ScheduleState,
    pub rng: ChaCha8Rng,
    pub next_epoch: usize,
    pub metadata: TrainerMetadata,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut model = LaTransformer::<f32>::new(&config.model(), config.training.seed)?;
        let sched_cfg = config.schedule_config();
        let schedule = if config.schedule.blockwise {
            finetune::init(&mut model.store, &sched_cfg)?
        } else {
            finetune::unfreeze_all(&mut model.store, &sched_cfg)?
        };
        let adam = AdamState::new(config.optimizer, schedule.current_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            config,
            model,
            adam,
            schedule,
            rng,
            next_epoch: 0,
            metadata: TrainerMetadata::default(),
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::capture(
            to_json(&self.config)?,
            &self.model.store,
            &self.adam,
            &self.schedule,
            &self.rng,
            self.next_epoch as u64,
            to_json(&self.metadata)?,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::Malformed(format!("checkpoint config: {e}")))?;
        Self::from_checkpoint_with(ck, config)
    }

    /// Restores state into a model built from `config`, which must describe the same architecture.
    pub fn from_checkpoint_with(ck: &Checkpoint, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut model = LaTransformer::<f32>::new(&config.model(), config.training.seed)?;
        ck.restore_params(&mut model.store)?;
        let adam = ck.restore_adam(&model.store)?;
        let metadata: TrainerMetadata = serde_json::from_str(&ck.metadata_json)
            .map_err(|e| Error::Malformed(format!("checkpoint metadata: {e}")))?;
        Ok(Self {
            config,
            model,
            adam,
            schedule: ck.schedule.clone(),
            rng: ck.rng.restore(),
            next_epoch: ck.next_epoch as usize,
            metadata,
        })
    }

    /// Mini-batches of a shuffled permutation. A trailing single sample is folded
    /// into the previous batch since train-mode batch norm needs two rows.
    fn batches(&mut self, n: usize) -> Result<Vec<Vec<usize>>> {
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut batches: Vec<Vec<usize>> = order
            .chunks(self.config.training.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(last);
        }
        Ok(batches)
    }

    /// Trains one epoch; evaluates when the eval cadence or the final epoch asks for it.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        let epoch = self.next_epoch;
        let event = if self.config.schedule.blockwise {
            finetune::on_epoch_start(
                &mut self.schedule,
                &self.config.schedule_config(),
                &mut self.model.store,
                epoch,
            )?
        } else {
            self.schedule.epoch = epoch;
            None
        };
        self.adam.learning_rate = self.schedule.current_lr;
        let labels = data.train_labels();
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.head.num_classes) {
            return Err(Error::Label {
                label: bad,
                classes: self.config.head.num_classes,
            });
        }
        let mut total = 0.0;
        let batches = self.batches(data.train.len())?;
        for batch in &batches {
            let images: Vec<Tensor<f32>> = batch.iter().map(|&i| data.train[i].image.clone()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            total += f64::from(self.model.train_batch(&images, &y)?);
            self.adam.step(&mut self.model.store)?;
        }
        self.next_epoch += 1;
        self.schedule.epoch = self.next_epoch;
        let mut metrics = EpochMetrics {
            epoch,
            loss: total / batches.len() as f64,
            lr: self.schedule.current_lr,
            unfrozen_block: event.map(|e| e.block),
            trainable_blocks: finetune::trainable_blocks(&self.model.store, self.config.backbone.num_blocks),
            train_rank1: None,
            query_rank1: None,
            query_map: None,
        };
        let every = self.config.eval.every;
        let last = self.next_epoch >= self.config.training.epochs;
        if (every > 0 && self.next_epoch % every == 0) || last {
            metrics.train_rank1 = Some(train_accuracy(&self.model, data)?);
            if !data.query.is_empty() && !data.gallery.is_empty() {
                let report = self.retrieval(data)?;
                metrics.query_rank1 = Some(report.rank1());
                metrics.query_map = Some(report.mean_ap);
                let better = self
                    .metadata
                    .best
                    .as_ref()
                    .is_none_or(|b| report.rank1() > b.query_rank1);
                if better {
                    self.metadata.best = Some(BestRecord {
                        epoch,
                        query_rank1: report.rank1(),
                    });
                }
            }
        }
        info!(
            "epoch={epoch} loss={:.6} lr={:e} unfrozen_block={} trainable_blocks={} train_rank1={} query_rank1={} mAP={}",
            metrics.loss,
            metrics.lr,
            fmt_opt(metrics.unfrozen_block.map(|b| b as f64)),
            metrics.trainable_blocks,
            fmt_opt(metrics.train_rank1),
            fmt_opt(metrics.query_rank1),
            fmt_opt(metrics.query_map),
        );
        self.metadata.history.push(metrics.clone());
        Ok(metrics)
    }

    pub fn retrieval(&self, data: &Dataset) -> Result<EvalReport> {
        let queries = embed_samples(&self.model, &data.query)?;
        let gallery = GalleryIndex::new(&embed_samples(&self.model, &data.gallery)?)?;
        evaluate(&queries, &gallery, &self.config.eval.options())
    }

    /// Whether the last epoch just evaluated set a new best validation rank-1.
    pub fn is_best(&self, metrics: &EpochMetrics) -> bool {
        self.metadata.best.as_ref().is_some_and(|b| b.epoch == metrics.epoch)
            && metrics.query_rank1.is_some()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x}"))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Malformed(e.to_string()))
}

/// Retrieval embeddings of `samples`, computed in parallel, in input order.
pub fn embed_samples(model: &LaTransformer<f32>, samples: &[Sample]) -> Result<Vec<LabeledEmbedding>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(LabeledEmbedding {
                vector: model.embed(&s.image)?,
                person_id: s.person_id,
                camera_id: s.camera_id,
            })
        })
        .collect()
}

/// Fraction of training images whose ensemble vote equals their identity.
pub fn train_accuracy(model: &LaTransformer<f32>, data: &Dataset) -> Result<f64> {
    if data.train.is_empty() {
        return Ok(0.0);
    }
    let labels = data.train_labels();
    let hits = data
        .train
        .par_iter()
        .zip(labels.par_iter())
        .map(|(s, &l)| model.predict(&s.image).map(|(_, p)| usize::from(p == l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / hits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn tiny() -> (RunConfig, Dataset) {
        let mut cfg = RunConfig::toy();
        cfg.training.epochs = 2;
        cfg.eval.every = 0;
        let spec = SyntheticSpec {
            num_identities: 8,
            images_per_identity: 6,
            ..SyntheticSpec::toy()
        };
        cfg.data.synthetic = Some(spec.clone());
        let data = Dataset::from_synthetic(&spec, &cfg.data.normalization).unwrap();
        (cfg, data)
    }

    #[test]
    fn batches_fold_trailing_singleton() {
        let (mut cfg, _) = tiny();
        cfg.training.batch_size = 4;
        let mut t = Trainer::new(cfg).unwrap();
        let b = t.batches(9).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert!(matches!(t.batches(1), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn checkpoint_resume_matches_straight_run() {
        let (cfg, data) = tiny();
        let mut straight = Trainer::new(cfg.clone()).unwrap();
        straight.run_epoch(&data).unwrap();
        let m2 = straight.run_epoch(&data).unwrap();

        let mut first = Trainer::new(cfg).unwrap();
        first.run_epoch(&data).unwrap();
        let bytes = first.checkpoint().unwrap().encode().unwrap();
        drop(first);
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        let r2 = resumed.run_epoch(&data).unwrap();

        assert_eq!(m2.loss.to_bits(), r2.loss.to_bits());
        for (a, b) in straight.model.store.params().iter().zip(resumed.model.store.params()) {
            assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
        }
        for (a, b) in straight.model.store.buffers().iter().zip(resumed.model.store.buffers()) {
            assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
        }
        assert_eq!(straight.adam.moments, resumed.adam.moments);
    }
}
