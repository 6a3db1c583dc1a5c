//! Balanced sampling, cross-entropy training with early stopping, and
//! snapshot ensembling.

use std::collections::VecDeque;
use std::fmt;

use crate::attention::Mode;
use crate::data::{assemble_batch, Clip, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{init_params, AvTransformer, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Clips per forward pass when only predictions are needed.
const INFERENCE_CHUNK: usize = 64;

/// Mean binary cross-entropy between clip probabilities and 0/1 labels.
pub fn bce_loss(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let loss = g.bce(p, labels.clone())?;
    Ok(g.value(loss).data()[0])
}

/// Two-stage sampler: draw a class, then a clip carrying it.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    pub class_indices: Vec<Vec<usize>>,
    pub class_probs: Vec<f64>,
    pub max_ratio: f64,
}

/// Builds per-class index lists and class probabilities proportional to
/// `min(count, max_ratio · smallest count)`.
pub fn build_balanced_sampler(labels: &[Vec<u8>], max_ratio: f64) -> Result<SamplerState> {
    if !(max_ratio >= 1.0) {
        return Err(Error::param(format!("max_ratio must be at least 1, got {max_ratio}")));
    }
    let n_classes = labels.first().map_or(0, Vec::len);
    if n_classes == 0 {
        return Err(Error::data("no labeled training clips"));
    }
    let mut class_indices = vec![Vec::new(); n_classes];
    for (i, row) in labels.iter().enumerate() {
        if row.len() != n_classes {
            return Err(Error::data(format!(
                "clip {i} has {} labels, expected {n_classes}",
                row.len()
            )));
        }
        for (c, l) in row.iter().enumerate() {
            if *l == 1 {
                class_indices[c].push(i);
            }
        }
    }
    if let Some(c) = class_indices.iter().position(Vec::is_empty) {
        return Err(Error::data(format!("class {c} has no positive examples")));
    }
    let smallest = class_indices.iter().map(Vec::len).min().expect("non-empty") as f64;
    let targets: Vec<f64> = class_indices
        .iter()
        .map(|ix| (ix.len() as f64).min(max_ratio * smallest))
        .collect();
    let total: f64 = targets.iter().sum();
    Ok(SamplerState {
        class_indices,
        class_probs: targets.iter().map(|t| t / total).collect(),
        max_ratio,
    })
}

/// Draws `batch_size` clip indices; duplicates are allowed.
pub fn sample_batch(sampler: &SamplerState, rng: &mut RandomSource, batch_size: usize) -> Vec<usize> {
    (0..batch_size)
        .map(|_| {
            let ix = &sampler.class_indices[rng.categorical(&sampler.class_probs)];
            ix[rng.index(ix.len())]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the latest validation loss is strictly higher than each of the
/// `patience` losses before it.
pub fn early_stop_check(history: &[f64], patience: usize) -> StopDecision {
    match history.split_last() {
        Some((last, prev)) if prev.len() >= patience && patience > 0 => {
            if prev[prev.len() - patience..].iter().all(|p| last > p) {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
        _ => StopDecision::Continue,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub ensemble_size: usize,
    pub max_ratio: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            batches_per_epoch: 300,
            batch_size: 40,
            patience: 7,
            ensemble_size: 7,
            max_ratio: 5.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::contract("training requires at least one epoch"));
        }
        if self.batches_per_epoch == 0 || self.batch_size == 0 || self.patience == 0 || self.ensemble_size == 0 {
            return Err(Error::param("batch, patience and ensemble counts must be positive"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::param("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.max_epochs.to_string()),
            ("batches-per-epoch", self.batches_per_epoch.to_string()),
            ("batch-size", self.batch_size.to_string()),
            ("patience", self.patience.to_string()),
            ("ensemble", self.ensemble_size.to_string()),
            ("max-ratio", self.max_ratio.to_string()),
            ("lr", self.adam.learning_rate.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Parameters saved at the end of an epoch.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub epoch: usize,
    pub params: ParamSet,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: AdamState,
    pub epoch: usize,
    pub val_history: Vec<f64>,
    pub snapshots: VecDeque<Snapshot>,
    pub rng: RandomSource,
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bce: f64,
    pub val_bce: f64,
    pub stopped: bool,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_bce={} val_bce={} stopped={}",
            self.epoch, self.train_bce, self.val_bce, self.stopped
        )
    }
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub model: AvTransformer,
    /// Oldest first.
    pub snapshots: Vec<Snapshot>,
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
}

impl FitOutput {
    pub fn snapshot_params(&self) -> Vec<&ParamSet> {
        self.snapshots.iter().map(|s| &s.params).collect()
    }
}

/// Inference-mode clip probabilities (`clips × n_classes`).
pub fn predict_clips(model: &AvTransformer, params: &ParamSet, clips: &[Clip]) -> Result<Tensor> {
    if clips.is_empty() {
        return Err(Error::contract("no clips to predict"));
    }
    let c = model.config().n_classes;
    let mut out = Vec::with_capacity(clips.len() * c);
    for chunk in clips.chunks(INFERENCE_CHUNK) {
        let refs: Vec<&Clip> = chunk.iter().collect();
        let batch = assemble_batch(&refs, model.config())?;
        out.extend_from_slice(model.predict(params, &batch.first, &batch.second)?.data());
    }
    Tensor::new(&[clips.len(), c], out)
}

fn label_tensor(clips: &[Clip]) -> Result<Tensor> {
    let c = clips[0].labels.len();
    let data = clips
        .iter()
        .flat_map(|cl| cl.labels.iter().map(|l| f64::from(*l)))
        .collect();
    Tensor::new(&[clips.len(), c], data)
}

/// Mean cross-entropy over a whole split, dropout off.
pub fn split_loss(model: &AvTransformer, params: &ParamSet, clips: &[Clip]) -> Result<f64> {
    let probs = predict_clips(model, params, clips)?;
    bce_loss(&probs, &label_tensor(clips)?)
}

/// Class-wise mean of the clip probabilities of every snapshot.
pub fn ensemble_predict(snapshots: &[&ParamSet], config: &ModelConfig, clips: &[Clip]) -> Result<Tensor> {
    if snapshots.is_empty() {
        return Err(Error::contract("ensemble needs at least one snapshot"));
    }
    let model = AvTransformer::for_params(config, snapshots[0])?;
    let mut sum = predict_clips(&model, snapshots[0], clips)?;
    for params in &snapshots[1..] {
        let p = predict_clips(&model, params, clips)?;
        for (s, v) in sum.data_mut().iter_mut().zip(p.data()) {
            *s += v;
        }
    }
    let k = snapshots.len() as f64;
    Ok(sum.map(|v| v / k))
}

/// [`fit_with`] without a per-epoch callback.
pub fn fit(dataset: &Dataset, config: &ModelConfig, train: &TrainConfig) -> Result<FitOutput> {
    fit_with(dataset, config, train, |_, _| Ok(()))
}

/// Trains a freshly initialized model. `on_epoch` sees each log record and
/// the parameters at the end of that epoch.
pub fn fit_with<F>(dataset: &Dataset, config: &ModelConfig, train: &TrainConfig, mut on_epoch: F) -> Result<FitOutput>
where
    F: FnMut(&EpochRecord, &ParamSet) -> Result<()>,
{
    train.validate()?;
    config.validate()?;
    if dataset.val.is_empty() {
        return Err(Error::data("training needs a non-empty validation split"));
    }
    if config.n_classes != dataset.n_classes()
        || config.audio_dim != dataset.audio_dim
        || config.video_dim != dataset.video_dim
    {
        return Err(Error::dim(format!(
            "model expects {} classes and dims {}/{}, dataset has {} classes and dims {}/{}",
            config.n_classes,
            config.audio_dim,
            config.video_dim,
            dataset.n_classes(),
            dataset.audio_dim,
            dataset.video_dim
        )));
    }
    let sampler = build_balanced_sampler(&dataset.label_matrix(crate::data::Split::Train), train.max_ratio)?;
    let mut rng = RandomSource::new(train.seed);
    let (model, mut params) = init_params(config, &mut rng)?;
    let mut state = TrainState {
        adam: AdamState::new(train.adam, &params),
        epoch: 0,
        val_history: Vec::new(),
        snapshots: VecDeque::with_capacity(train.ensemble_size),
        rng,
    };
    let mut log = Vec::new();
    for epoch in 1..=train.max_epochs {
        let mut total = 0.0;
        for _ in 0..train.batches_per_epoch {
            let idx = sample_batch(&sampler, &mut state.rng, train.batch_size);
            let clips: Vec<&Clip> = idx.iter().map(|i| &dataset.train[*i]).collect();
            let batch = assemble_batch(&clips, config)?;
            let mut g = Graph::new();
            let nodes = model.forward_graph(
                &mut g,
                &params,
                &batch.first,
                &batch.second,
                &mut Mode::training(&mut state.rng),
            )?;
            let loss = g.bce(nodes.clip_probs, batch.labels)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("training loss became {value}"),
                });
            }
            total += value;
            params.zero_grad();
            g.backward(loss, &mut params)?;
            state.adam.step(&mut params);
        }
        let val_bce = split_loss(&model, &params, &dataset.val)?;
        if !val_bce.is_finite() {
            return Err(Error::Divergence {
                epoch,
                message: format!("validation loss became {val_bce}"),
            });
        }
        state.epoch = epoch;
        state.val_history.push(val_bce);
        if state.snapshots.len() == train.ensemble_size {
            state.snapshots.pop_front();
        }
        let mut snap = params.clone();
        snap.zero_grad();
        state.snapshots.push_back(Snapshot { epoch, params: snap });
        let stopped = early_stop_check(&state.val_history, train.patience) == StopDecision::Stop;
        let record = EpochRecord {
            epoch,
            train_bce: total / train.batches_per_epoch as f64,
            val_bce,
            stopped,
        };
        on_epoch(&record, &params)?;
        log.push(record);
        if stopped {
            break;
        }
    }
    Ok(FitOutput {
        model,
        snapshots: state.snapshots.iter().cloned().collect(),
        state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        let one = Tensor::from_rows(&[&[1.0]]);
        let zero = Tensor::from_rows(&[&[0.0]]);
        assert!(bce_loss(&one, &one).unwrap() < 1e-6);
        assert!(bce_loss(&zero, &zero).unwrap() < 1e-6);
        let half = Tensor::from_rows(&[&[0.5]]);
        assert!((bce_loss(&half, &one).unwrap() - 2f64.ln()).abs() < 1e-6);
        let bad = Tensor::from_rows(&[&[0.5]]);
        assert!(matches!(bce_loss(&half, &bad), Err(Error::Data(_))));
    }

    #[test]
    fn sampler_clamps_to_ratio() {
        let mut labels = vec![vec![1, 0]; 130];
        labels.push(vec![0, 1]);
        let s = build_balanced_sampler(&labels, 5.0).unwrap();
        assert!((s.class_probs[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((s.class_probs[1] - 1.0 / 6.0).abs() < 1e-12);

        let s = build_balanced_sampler(&labels, 1e9).unwrap();
        assert!((s.class_probs[0] - 130.0 / 131.0).abs() < 1e-12);

        let even = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        let s = build_balanced_sampler(&even, 5.0).unwrap();
        assert!(s.class_probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn sampler_names_empty_class() {
        let labels = vec![vec![1, 0, 0], vec![1, 1, 0]];
        match build_balanced_sampler(&labels, 5.0) {
            Err(Error::Data(m)) => assert!(m.contains("class 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sample_batch_is_deterministic_and_class_bound() {
        let labels = vec![vec![1], vec![1], vec![1]];
        let s = build_balanced_sampler(&labels, 5.0).unwrap();
        let a = sample_batch(&s, &mut RandomSource::new(3), 40);
        let b = sample_batch(&s, &mut RandomSource::new(3), 40);
        assert_eq!(a, b);
        assert!(a.iter().all(|i| labels[*i][0] == 1));
    }

    #[test]
    fn early_stopping_rule() {
        assert_eq!(early_stop_check(&[1.0, 0.9, 0.8], 7), StopDecision::Continue);
        let mut h = vec![0.5; 7];
        h.push(0.6);
        assert_eq!(early_stop_check(&h, 7), StopDecision::Stop);
        let flat = vec![0.5; 8];
        assert_eq!(early_stop_check(&flat, 7), StopDecision::Continue);
        // only the last `patience` losses matter
        let mut h = vec![0.1];
        h.extend([0.5; 7]);
        h.push(0.6);
        assert_eq!(early_stop_check(&h, 7), StopDecision::Stop);
    }

    #[test]
    fn log_line_format() {
        let r = EpochRecord {
            epoch: 3,
            train_bce: 0.25,
            val_bce: 0.5,
            stopped: false,
        };
        assert_eq!(r.to_string(), "epoch=3 train_bce=0.25 val_bce=0.5 stopped=false");
    }

    #[test]
    fn zero_epochs_is_a_contract_error() {
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Contract(_))));
    }
}
