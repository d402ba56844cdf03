//! Training and evaluation driven by a [`RunConfig`].

use std::collections::BTreeMap;
use std::io::Write;

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{stack_images, Dataset, PkSampler, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalReport, Tag};
use crate::model::{train_step, Adam, LossBreakdown, Model};
use crate::rng::{substream, Stream};

/// Images embedded per forward pass during evaluation.
pub const EMBED_CHUNK: usize = 16;

/// One loss-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub const TSV_HEADER: &'static str = "step\ttotal\tlow\tmid\tfused";

    pub fn tsv_line(&self) -> String {
        let [l, m, f] = self.loss.per_feature;
        format!("{}\t{}\t{}\t{}\t{}", self.step, self.loss.total, l, m, f)
    }
}

pub fn write_loss_log(records: &[StepRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", StepRecord::TSV_HEADER)?;
    for r in records {
        writeln!(out, "{}", r.tsv_line())?;
    }
    Ok(())
}

/// Training images with identities remapped to dense class indices.
pub struct TrainSet<'a> {
    samples: Vec<&'a Sample>,
    classes: Vec<usize>,
    num_classes: usize,
}

impl<'a> TrainSet<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        let samples = dataset.split(Split::Train);
        let mut ids = BTreeMap::new();
        for s in &samples {
            let next = ids.len();
            ids.entry(s.identity).or_insert(next);
        }
        let classes = samples.iter().map(|s| ids[&s.identity]).collect();
        Ok(Self {
            samples,
            classes,
            num_classes: ids.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Model, optimizer and sampler state of one training run.
pub struct Trainer<'a> {
    pub config: RunConfig,
    pub model: Model,
    pub opt: Adam,
    data: TrainSet<'a>,
    sampler: PkSampler,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &RunConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let data = TrainSet::new(dataset)?;
        if data.num_classes() != config.train_ids {
            return Err(Error::Contract(format!(
                "dataset has {} training identities, config says {}",
                data.num_classes(),
                config.train_ids
            )));
        }
        let model_cfg = config.model_config();
        if let Some(d) = dataset.image_dims() {
            let want = [crate::data::CHANNELS, model_cfg.image_hw.0, model_cfg.image_hw.1];
            if d != want {
                return Err(Error::Contract(format!(
                    "dataset images are {d:?}, config expects {want:?}"
                )));
            }
        }
        let model = Model::new(model_cfg, &mut substream(config.seed, Stream::Init))?;
        let opt = Adam::new(config.adam_config(), &model.params);
        let sampler = PkSampler::new(&data.classes.iter().map(|&c| c as u32).collect::<Vec<_>>(), config.p, config.k)?;
        Ok(Self {
            config: config.clone(),
            model,
            opt,
            data,
            sampler,
            rng: substream(config.seed, Stream::Sampler),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.sampler.sample(&mut self.rng);
        let images = stack_images(batch.indices.iter().map(|&i| self.data.samples[i]))?;
        let labels: Vec<usize> = batch.indices.iter().map(|&i| self.data.classes[i]).collect();
        let loss = train_step(
            &mut self.model,
            &mut self.opt,
            &images,
            &labels,
            &self.config.loss_config(),
        )?;
        let rec = StepRecord {
            step: self.step,
            loss,
        };
        self.step += 1;
        log::debug!("{}", rec.tsv_line());
        Ok(rec)
    }

    /// Runs `steps` optimizer steps, returning their records.
    pub fn run(&mut self, steps: usize) -> Result<Vec<StepRecord>> {
        (0..steps).map(|_| self.step()).collect()
    }
}

/// Trains for `config.total_steps()` steps.
pub fn train(config: &RunConfig, dataset: &Dataset) -> Result<(Model, Vec<StepRecord>)> {
    let mut t = Trainer::new(config, dataset)?;
    let log = t.run(config.total_steps())?;
    Ok((t.model, log))
}

fn embed_split(model: &Model, samples: &[&Sample]) -> Result<(crate::Tensor, Vec<Tag>)> {
    let images = stack_images(samples.iter().copied())?;
    let emb = model.embed(&images, EMBED_CHUNK)?;
    let tags = samples
        .iter()
        .map(|s| Tag {
            identity: s.identity,
            camera: s.camera,
        })
        .collect();
    Ok((emb, tags))
}

/// Retrieval metrics of `model` on the query/gallery split of `dataset`.
pub fn evaluate_model(model: &Model, dataset: &Dataset, ranks: &[usize]) -> Result<RetrievalReport> {
    let (q, qt) = embed_split(model, &dataset.split(Split::Query))?;
    let (g, gt) = embed_split(model, &dataset.split(Split::Gallery))?;
    evaluate(&q, &qt, &g, &gt, ranks)
}

/// The dataset named by the config, or a freshly generated synthetic one.
pub fn load_or_generate(config: &RunConfig) -> Result<Dataset> {
    match &config.dataset {
        Some(p) => Dataset::load(p),
        None => Dataset::synthetic(&config.synthetic_spec(), config.seed),
    }
}
