//! Training with validation-based early stopping, prediction, and the
//! per-condition evaluation protocol.
//!
//! Mini-batch gradients are the mean of per-sample gradients. Samples in a
//! batch are differentiated in parallel but always summed in batch order,
//! so results do not depend on the thread count.

mod metrics;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{Gradients, Mode, Optimizer, OptimizerKind, Tape, Tensor};
use crate::dataio::{
    build_reference_pool, draw_reference, split_wa1, Dataset, DefectClass, RefPool, SplitRatios, Splits,
};
use crate::dsp::{preprocess, spectrogram_image, ChannelScales, DspConfig, ProcessedSignal, ResampleMode, Stft, Spectrogram};
use crate::error::{Error, Result};
use crate::models::{embed, extract_classic_features, head, train_logreg, FeatureVector, LogRegConfig, LogRegModel, Model, Variant};
use crate::rng;

pub use metrics::{auc, auc_from_scores, macro_auc, roc_points, RocPoints};
pub use report::{
    emit_report, evaluate_combinations, summarize, ClassRoc, CombinationRow, CombinationTable, EvalReport, Evaluation,
    GroupStat, Summary,
};

pub const N_CLASSES: usize = DefectClass::ALL.len();

/// How a raw dataset becomes splits, a reference pool and processed signals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    pub ratios: SplitRatios,
    pub reference_fraction: f64,
    pub seed: u64,
    pub dsp: DspConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            ratios: SplitRatios::default(),
            reference_fraction: 0.2,
            seed: 0,
            dsp: DspConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("data_seed".into(), self.seed.to_string());
        m.insert("reference_fraction".into(), self.reference_fraction.to_string());
        m.insert(
            "split_ratios".into(),
            format!("{},{},{}", self.ratios.train, self.ratios.val, self.ratios.test),
        );
        m.insert("wheel_diameter_m".into(), self.dsp.wheel_diameter_m.to_string());
        m.insert("resample".into(), self.dsp.resample_mode.name().into());
        m
    }

    /// Reads back the keys written by [`DataConfig::to_meta`]; absent keys
    /// keep their defaults.
    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = DataConfig::default();
        let bad = |k: &str, v: &str| Error::Config(format!("checkpoint metadata {k} = {v:?}"));
        for (k, v) in meta {
            match k.as_str() {
                "data_seed" => c.seed = v.parse().map_err(|_| bad(k, v))?,
                "reference_fraction" => c.reference_fraction = v.parse().map_err(|_| bad(k, v))?,
                "split_ratios" => {
                    let r: Vec<f64> = v.split(',').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(k, v))?;
                    if r.len() != 3 {
                        return Err(bad(k, v));
                    }
                    c.ratios = SplitRatios {
                        train: r[0],
                        val: r[1],
                        test: r[2],
                    };
                }
                "wheel_diameter_m" => c.dsp.wheel_diameter_m = v.parse().map_err(|_| bad(k, v))?,
                "resample" => c.dsp.resample_mode = v.parse::<ResampleMode>()?,
                _ => {}
            }
        }
        Ok(c)
    }
}

/// Processed signals plus the splits and reference pool they belong to.
pub struct PreparedData {
    pub config: DataConfig,
    pub splits: Splits,
    pub pool: RefPool,
    signals: HashMap<u64, ProcessedSignal>,
    stft: Stft,
}

/// Pools references, splits WA1 and preprocesses every record.
pub fn prepare(dataset: &Dataset, config: &DataConfig) -> Result<PreparedData> {
    let (pool, rest) = build_reference_pool(dataset, config.reference_fraction, config.seed)?;
    let splits = split_wa1(&rest, config.ratios, config.seed)?;
    let processed: Vec<ProcessedSignal> = dataset
        .records
        .par_iter()
        .map(|r| preprocess(r, &config.dsp))
        .collect::<Result<_>>()?;
    Ok(PreparedData {
        config: *config,
        splits,
        pool,
        signals: processed.into_iter().map(|p| (p.id, p)).collect(),
        stft: Stft::new(config.dsp.stft)?,
    })
}

impl PreparedData {
    pub fn signal(&self, id: u64) -> Result<&ProcessedSignal> {
        self.signals
            .get(&id)
            .ok_or_else(|| Error::arg(format!("record {id} is not in the prepared data")))
    }

    pub fn label(&self, id: u64) -> Result<usize> {
        Ok(self.signal(id)?.defect.index())
    }

    /// Spectrogram divided by the given channel scales.
    pub fn image(&self, id: u64, scales: &ChannelScales) -> Result<Spectrogram> {
        spectrogram_image(&self.stft.run(&self.signal(id)?.samples)?, scales)
    }

    pub fn features(&self, id: u64) -> Result<FeatureVector> {
        extract_classic_features(&self.signal(id)?.samples, 1)
    }

    /// Training-image channel scales.
    pub fn channel_scales(&self, ids: &[u64]) -> Result<ChannelScales> {
        let images = ids
            .iter()
            .map(|&id| self.image(id, &ChannelScales::default()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ChannelScales::from_images(&images))
    }

    /// Network input for one record: the scaled spectrogram for the 2-D
    /// variants, the processed signal for the 1-D one.
    pub fn branch_input(&self, model: &Model, id: u64) -> Result<Tensor<f32>> {
        if model.config.variant.uses_images() {
            Tensor::new(Spectrogram::SHAPE.to_vec(), self.image(id, &model.scales)?.data)
        } else {
            let s = &self.signal(id)?.samples;
            Tensor::new(vec![s.len()], s.clone())
        }
    }

    fn static_bits(&self, id: u64) -> Result<[f32; 5]> {
        Ok(self.signal(id)?.conditions.static_features())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub reference_fraction: f64,
    pub optimizer: OptimizerKind,
    /// Iterations of the feature baseline's gradient descent.
    pub logreg_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            dropout_p: 0.7,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            reference_fraction: 0.2,
            optimizer: OptimizerKind::Adam,
            logreg_iterations: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.patience <= self.max_epochs
            && (0.0..1.0).contains(&self.dropout_p)
            && self.reference_fraction > 0.0
            && self.reference_fraction < 1.0
            && self.logreg_iterations > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

/// Patience counter over a metric where larger is better.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> Observation {
        self.epochs += 1;
        let improved = metric > self.best;
        if improved {
            self.best = metric;
            self.best_epoch = self.epochs;
        }
        Observation {
            improved,
            stop: self.epochs - self.best_epoch >= self.patience,
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Trains `model` on the WA1 training split and returns the parameters of
/// the epoch with the best validation macro AUC.
pub fn train(mut model: Model, data: &PreparedData, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.splits.train.is_empty() {
        return Err(Error::Training("the training split is empty".into()));
    }
    if model.config.n_classes != N_CLASSES {
        return Err(Error::Config(format!("models must have {N_CLASSES} classes")));
    }
    model.config.dropout_p = config.dropout_p;
    model.config.validate()?;
    model.meta = data.config.to_meta();
    model.meta.insert("train_seed".into(), config.seed.to_string());

    if model.config.variant == Variant::FeaturesLr {
        return train_features(model, data, config);
    }
    if model.config.variant.uses_images() {
        model.scales = data.channel_scales(&data.splits.train)?;
    }

    let mut optimizer = Optimizer::new(config.optimizer, &model.params, config.lr);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = model.params.clone();
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut order = data.splits.train.clone();
        order.shuffle(&mut rng::keyed(&[rng::TAG_EPOCH, config.seed, epoch as u64]));

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let per_sample: Vec<Result<(f64, Gradients<f32>)>> = batch
                .par_iter()
                .map(|&id| sample_gradient(&model, data, id, config.seed, epoch))
                .collect();
            let mut total = Gradients::zeros_like(&model.params);
            for (&id, res) in batch.iter().zip(per_sample) {
                let (loss, g) = res?;
                if !loss.is_finite() || !g.all_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss or gradient at epoch {epoch}, batch {b}, record {id} (loss {loss})"
                    )));
                }
                loss_sum += loss;
                total.accumulate(&g);
            }
            total.scale(1.0 / batch.len() as f32);
            optimizer.step(&mut model.params, &total)?;
        }

        let val_auc = validation_auc(&model, data, config.seed)?;
        let train_loss = loss_sum / order.len() as f64;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_auc,
        });
        log::info!("epoch {epoch}: train loss {train_loss:.4}, validation AUC {val_auc:.4}");
        let obs = stopper.observe(val_auc);
        if obs.improved {
            best_params = model.params.clone();
        }
        if obs.stop {
            break;
        }
    }
    model.params = best_params;
    let (best_epoch, best_val_auc) = stopper.best();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_auc,
    })
}

fn sample_gradient(model: &Model, data: &PreparedData, id: u64, seed: u64, epoch: usize) -> Result<(f64, Gradients<f32>)> {
    let mut r = rng::keyed(&[rng::TAG_SAMPLE, seed, epoch as u64, id]);
    let sig = data.signal(id)?;
    let cfg = &model.config;
    let mut tape = Tape::new(&model.params);
    let a = embed(&mut tape, cfg, data.branch_input(model, id)?)?;
    let reference = if cfg.variant.uses_reference() {
        let ref_id = draw_reference(&data.pool, sig.wheelset, sig.conditions, &mut r)?;
        Some(embed(&mut tape, cfg, data.branch_input(model, ref_id)?)?)
    } else {
        None
    };
    let lp = head(&mut tape, cfg, a, reference, &sig.conditions.static_features(), Mode::Train, &mut r)?;
    let loss = tape.nll(lp, sig.defect.index())?;
    let value = tape.value(loss).data()[0] as f64;
    Ok((value, tape.backward(loss)?))
}

fn validation_auc(model: &Model, data: &PreparedData, seed: u64) -> Result<f64> {
    let ids = &data.splits.val;
    let probs = predict(model, data, ids, seed)?;
    let labels = ids.iter().map(|&id| data.label(id)).collect::<Result<Vec<_>>>()?;
    let (m, _) = macro_auc(&probs, &labels, N_CLASSES)?;
    m.ok_or_else(|| Error::Training("the validation split does not contain two classes".into()))
}

fn train_features(mut model: Model, data: &PreparedData, config: &TrainConfig) -> Result<TrainOutcome> {
    let ids = &data.splits.train;
    let feats = ids.par_iter().map(|&id| data.features(id)).collect::<Result<Vec<_>>>()?;
    let labels = ids.iter().map(|&id| data.label(id)).collect::<Result<Vec<_>>>()?;
    let lr = train_logreg(
        &feats,
        &labels,
        N_CLASSES,
        LogRegConfig {
            iterations: config.logreg_iterations,
            seed: config.seed,
            ..Default::default()
        },
    )?;
    let train_loss = feats
        .iter()
        .zip(&labels)
        .map(|(f, &y)| -lr.predict_logprobs(f)[y])
        .sum::<f64>()
        / feats.len() as f64;
    model.params = lr.to_params()?;
    let val_auc = validation_auc(&model, data, config.seed)?;
    Ok(TrainOutcome {
        model,
        history: vec![EpochStats {
            epoch: 1,
            train_loss,
            val_auc,
        }],
        best_epoch: 1,
        best_val_auc: val_auc,
    })
}

/// Reference record used when scoring `id` at evaluation time.
pub fn eval_reference(data: &PreparedData, id: u64, seed: u64) -> Result<u64> {
    let sig = data.signal(id)?;
    let mut r = rng::keyed(&[rng::TAG_EVAL_REF, seed, id]);
    draw_reference(&data.pool, sig.wheelset, sig.conditions, &mut r)
}

/// Class probabilities for each id, in eval mode. Every distinct record
/// (sample or reference) is embedded once.
pub fn predict(model: &Model, data: &PreparedData, ids: &[u64], seed: u64) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    if cfg.variant == Variant::FeaturesLr {
        let lr = LogRegModel::from_params(&model.params)?;
        return ids
            .par_iter()
            .map(|&id| Ok(lr.predict_logprobs(&data.features(id)?).iter().map(|v| v.exp()).collect()))
            .collect();
    }

    let refs: Vec<Option<u64>> = ids
        .iter()
        .map(|&id| cfg.variant.uses_reference().then(|| eval_reference(data, id, seed)).transpose())
        .collect::<Result<_>>()?;
    let unique: Vec<u64> = ids
        .iter()
        .copied()
        .chain(refs.iter().flatten().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let embeddings: Vec<Vec<f32>> = unique
        .par_iter()
        .map(|&id| {
            let mut tape = Tape::new(&model.params);
            let e = embed(&mut tape, cfg, data.branch_input(model, id)?)?;
            Ok(tape.value(e).data().to_vec())
        })
        .collect::<Result<_>>()?;
    let slot: HashMap<u64, usize> = unique.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    ids.par_iter()
        .zip(&refs)
        .map(|(&id, reference)| {
            let mut tape = Tape::new(&model.params);
            let a = tape.input(Tensor::vector(embeddings[slot[&id]].clone()));
            let b = reference.map(|r| tape.input(Tensor::vector(embeddings[slot[&r]].clone())));
            // dropout is the identity in eval mode, so this stream is never read
            let mut unused = rng::keyed(&[0]);
            let lp = head(&mut tape, cfg, a, b, &data.static_bits(id)?, Mode::Eval, &mut unused)?;
            Ok(tape.value(lp).data().iter().map(|&v| (v as f64).exp()).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_patience_without_improvement() {
        let mut s = EarlyStopping::new(2);
        let metrics = [0.9, 0.8, 0.7, 0.6, 0.5];
        let mut ran = 0;
        for m in metrics {
            ran += 1;
            if s.observe(m).stop {
                break;
            }
        }
        assert_eq!(ran, 3);
        assert_eq!(s.best(), (1, 0.9));
    }

    #[test]
    fn improvement_resets_patience() {
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(0.5).improved);
        assert!(!s.observe(0.4).stop);
        assert!(s.observe(0.6).improved);
        assert!(!s.observe(0.6).stop);
        assert!(s.observe(0.1).stop);
        assert_eq!(s.best(), (3, 0.6));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 200,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn data_config_meta_round_trip() {
        let mut c = DataConfig::default();
        c.seed = 99;
        c.reference_fraction = 0.25;
        c.dsp.resample_mode = ResampleMode::Decimate;
        assert_eq!(DataConfig::from_meta(&c.to_meta()).unwrap(), c);
    }
}
