use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::loss::{cross_entropy, loss_eq1, one_hot, LabelBatch, LossWeights};
use crate::autograd::{Graph, Var};
use crate::data::{batch_tensor, CropMode, DatasetManifest, Image, Provenance};
use crate::error::{Error, Result};
use crate::metrics::{subset_accuracy, MultiLabelEval};
use crate::model::{argmax, Checkpoint, DaffNet, MapNet, ModelSpec, Normalization};
use crate::nn::{apply_stat_updates, Mode, ParamStore, Session};
use crate::tensor::Scalar;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Parameter-name prefixes held fixed during training.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            patience: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience > self.epochs {
            return Err(Error::invalid(
                "train_config",
                format!("need 1 <= epochs and patience <= epochs, got {} / {}", self.epochs, self.patience),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("train_config", "batch size must be at least 2"));
        }
        self.adam.validate()
    }
}

/// Which validation quantity selects the returned parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValAccuracy,
}

impl Monitor {
    pub fn better(self, candidate: f64, best: f64) -> bool {
        match self {
            Monitor::ValLoss => candidate < best,
            Monitor::ValAccuracy => candidate > best,
        }
    }
}

/// Stops once `patience` consecutive epochs fail to improve on the best value.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    monitor: Monitor,
    patience: usize,
    best: Option<(usize, f64)>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(monitor: Monitor, patience: usize) -> Self {
        EarlyStopping {
            monitor,
            patience,
            best: None,
            wait: 0,
        }
    }

    /// Records an epoch; returns whether it is the new best.
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some((_, best)) => self.monitor.better(value, best),
        };
        if improved {
            self.best = Some((epoch, value));
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.wait > self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub monitor: Monitor,
    /// What `val_metric` measures.
    pub metric: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_value: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }
}

/// Decoded images with their labels, in record order.
#[derive(Debug, Clone, Default)]
pub struct Samples {
    pub images: Vec<Image>,
    pub classes: Vec<usize>,
    pub attributes: Vec<Option<Vec<usize>>>,
    pub provenance: Vec<Provenance>,
}

impl Samples {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        Ok(Samples {
            images: manifest.load_images()?,
            classes: manifest.records.iter().map(|r| r.class).collect(),
            attributes: manifest.records.iter().map(|r| r.attributes.clone()).collect(),
            provenance: manifest.records.iter().map(|r| r.provenance).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn concat(parts: &[&Samples]) -> Self {
        let mut out = Samples::default();
        for p in parts {
            out.images.extend(p.images.iter().cloned());
            out.classes.extend(&p.classes);
            out.attributes.extend(p.attributes.iter().cloned());
            out.provenance.extend(&p.provenance);
        }
        out
    }

    pub fn image_refs(&self) -> Vec<&Image> {
        self.images.iter().collect()
    }
}

/// Crop size and standardization applied to every network input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub size: usize,
    pub norm: Normalization,
}

impl InputSpec {
    fn center_batch(&self, images: &[&Image]) -> Result<crate::tensor::Tensor<f32>> {
        batch_tensor(images, CropMode::Center, self.size, &self.norm, &mut ChaCha8Rng::seed_from_u64(0))
    }
}

/// Shared epoch loop: seeded shuffling and random crops, one Adam step per
/// batch, validation after each epoch, early stopping, and restoration of
/// the best parameters.
#[allow(clippy::too_many_arguments)]
pub fn fit<L, E>(
    store: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    monitor: Monitor,
    metric: &str,
    train: &Samples,
    input: &InputSpec,
    batch_loss: L,
    evaluate: E,
) -> Result<History>
where
    L: Fn(&mut Session<'_, f32>, Var, &[usize]) -> Result<Var>,
    E: Fn(&ParamStore<f32>) -> Result<(f64, f64)>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    for prefix in &cfg.freeze {
        if store.freeze_prefix(prefix) == 0 {
            return Err(Error::invalid("train", format!("freeze prefix `{prefix}` matches no parameter")));
        }
    }
    let mut adam = Adam::new(cfg.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(monitor, cfg.patience);
    let mut best_store = store.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&Image> = batch.iter().map(|&i| &train.images[i]).collect();
            let x = batch_tensor(&images, CropMode::Random, input.size, &input.norm, &mut rng)?;
            let dropout_seed: u64 = rng.gen();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let (grads, stats, loss) = {
                let mut s = Session::new(&mut g, store, Mode::Train).with_seed(dropout_seed);
                let loss = batch_loss(&mut s, xv, batch)?;
                let grads = s.graph.backward(loss)?;
                let value = s.graph.value(loss).item().as_f64();
                (s.param_grads(&grads), s.take_stat_updates(), value)
            };
            adam.step(store, &grads)?;
            apply_stat_updates(store, stats);
            loss_sum += loss * batch.len() as f64;
        }
        let (val_loss, val_metric) = evaluate(store)?;
        let value = match monitor {
            Monitor::ValLoss => val_loss,
            Monitor::ValAccuracy => val_metric,
        };
        if stopper.update(epoch, value) {
            best_store = store.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_metric,
            seconds: start.elapsed().as_secs_f64(),
        });
        let r = epochs.last().expect("just pushed");
        log::info!(
            "epoch {epoch}: train_loss {:.4} val_loss {:.4} {metric} {:.4} ({:.1}s)",
            r.train_loss,
            r.val_loss,
            r.val_metric,
            r.seconds
        );
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    *store = best_store;
    let (best_epoch, best_value) = stopper.best().expect("at least one epoch ran");
    Ok(History {
        monitor,
        metric: metric.into(),
        epochs,
        best_epoch,
        best_value,
        stopped_early,
    })
}

/// Attribute-predictor outputs on a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPrediction {
    /// `[attribute][sample][category]` probabilities.
    pub attribute_probs: Vec<Vec<Vec<f64>>>,
    /// `[sample][class]` auxiliary-head probabilities.
    pub class_probs: Vec<Vec<f64>>,
    /// Argmax category per sample and attribute.
    pub attributes: Vec<Vec<usize>>,
}

fn rows(t: &crate::tensor::Tensor<f32>) -> Vec<Vec<f64>> {
    let k = t.shape()[1];
    t.data().chunks(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn labeled_rows(samples: &Samples, idx: &[usize], a: usize) -> Result<Vec<Vec<usize>>> {
    idx.iter()
        .map(|&i| match &samples.attributes[i] {
            Some(r) if r.len() == a => Ok(r.clone()),
            Some(r) => Err(Error::Schema(format!("sample {i} has {} attribute labels, expected {a}", r.len()))),
            None => Err(Error::Data(format!("sample {i} has no attribute labels"))),
        })
        .collect()
}

fn map_labels(map: &MapNet, samples: &Samples, idx: &[usize]) -> Result<LabelBatch<f32>> {
    let attrs = labeled_rows(samples, idx, map.schema.len())?;
    let classes: Vec<usize> = idx.iter().map(|&i| samples.classes[i]).collect();
    let prov = idx.iter().map(|&i| samples.provenance[i]).collect();
    LabelBatch::new(&map.schema.sizes(), map.config.num_classes, &attrs, &classes, prov)
}

/// Eval-mode predictions, plus the mean loss when `w` is given (all samples must be labeled).
pub fn predict_map(
    map: &MapNet,
    store: &ParamStore<f32>,
    samples: &Samples,
    input: &InputSpec,
    w: Option<LossWeights>,
) -> Result<(MapPrediction, Option<f64>)> {
    let a = map.schema.len();
    let mut pred = MapPrediction {
        attribute_probs: vec![Vec::new(); a],
        class_probs: Vec::new(),
        attributes: Vec::new(),
    };
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for batch in idx.chunks(EVAL_BATCH) {
        let images: Vec<&Image> = batch.iter().map(|&i| &samples.images[i]).collect();
        let mut g = Graph::new();
        let x = g.constant(input.center_batch(&images)?);
        let mut s = Session::new(&mut g, store, Mode::Eval);
        let (probs, q, loss) = s.frozen(|s| -> Result<_> {
            let out = map.forward(s, x)?;
            let probs = map.probabilities(s, &out)?;
            let q = s.graph.softmax(out.class_logits, 1)?;
            let loss = match w {
                Some(w) => {
                    let labels = map_labels(map, samples, batch)?;
                    Some(loss_eq1(s.graph, &probs, q, &labels, w)?)
                }
                None => None,
            };
            Ok((probs, q, loss))
        })?;
        if let Some(l) = loss {
            loss_sum += s.graph.value(l).item() as f64 * batch.len() as f64;
        }
        for (m, &p) in probs.iter().enumerate() {
            pred.attribute_probs[m].extend(rows(s.graph.value(p)));
        }
        pred.class_probs.extend(rows(s.graph.value(q)));
    }
    pred.attributes = (0..samples.len())
        .map(|i| (0..a).map(|m| argmax(&pred.attribute_probs[m][i])).collect())
        .collect();
    let loss = w.map(|_| loss_sum / samples.len().max(1) as f64);
    Ok((pred, loss))
}

fn check_map_data(map: &MapNet, split: &str, samples: &Samples) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    labeled_rows(samples, &(0..samples.len()).collect::<Vec<_>>(), map.schema.len())?;
    if let Some(&k) = samples.classes.iter().find(|&&k| k >= map.config.num_classes) {
        return Err(Error::Data(format!("{split} split has class {k}, model has {}", map.config.num_classes)));
    }
    Ok(())
}

/// Attribute-predictor training on labeled data with the deep-supervision loss.
/// Selects the epoch with the lowest validation loss.
pub fn train_map_dsl(
    map: &MapNet,
    store: &mut ParamStore<f32>,
    train: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
    w: LossWeights,
    input: &InputSpec,
) -> Result<History> {
    w.validate()?;
    check_map_data(map, "training", train)?;
    check_map_data(map, "validation", val)?;
    fit(
        store,
        cfg,
        Monitor::ValLoss,
        "attribute_subset_accuracy",
        train,
        input,
        |s, x, batch| {
            let labels = map_labels(map, train, batch)?;
            let out = map.forward(s, x)?;
            let probs = map.probabilities(s, &out)?;
            let q = s.graph.softmax(out.class_logits, 1)?;
            loss_eq1(s.graph, &probs, q, &labels, w)
        },
        |store| {
            let (pred, loss) = predict_map(map, store, val, input, Some(w))?;
            let truth = labeled_rows(val, &(0..val.len()).collect::<Vec<_>>(), map.schema.len())?;
            let sacc = subset_accuracy(&MultiLabelEval::new(truth, pred.attributes)?);
            Ok((loss.expect("loss requested"), sacc))
        },
    )
}

/// Retrains the attribute predictor on true-labeled data joined with
/// pseudo-labeled sets, with the same loop as [`train_map_dsl`].
#[allow(clippy::too_many_arguments)]
pub fn train_map_ssl(
    map: &MapNet,
    store: &mut ParamStore<f32>,
    labeled: &Samples,
    pseudo: &[&Samples],
    val: &Samples,
    cfg: &TrainConfig,
    w: LossWeights,
    input: &InputSpec,
) -> Result<History> {
    let mut parts = vec![labeled];
    parts.extend(pseudo);
    let union = Samples::concat(&parts);
    train_map_dsl(map, store, &union, val, cfg, w, input)
}

/// Fills missing attribute labels with the predictor's argmax, flagged pseudo.
/// Records that already carry true labels are kept as they are.
pub fn pseudo_label(
    map: &MapNet,
    store: &ParamStore<f32>,
    manifest: &DatasetManifest,
    samples: &Samples,
    input: &InputSpec,
) -> Result<DatasetManifest> {
    if samples.len() != manifest.len() {
        return Err(Error::invalid(
            "pseudo_label",
            format!("{} images for {} records", samples.len(), manifest.len()),
        ));
    }
    map.schema.validate()?;
    if manifest.schema != map.schema {
        return Err(Error::Schema("dataset schema differs from the predictor's".into()));
    }
    let (pred, _) = predict_map(map, store, samples, input, None)?;
    let records = manifest
        .records
        .iter()
        .zip(pred.attributes)
        .map(|(r, labels)| {
            let mut r = r.clone();
            if !(r.attributes.is_some() && r.provenance == Provenance::True) {
                r.attributes = Some(labels);
                r.provenance = Provenance::Pseudo;
            }
            r
        })
        .collect();
    Ok(manifest.with_records(records))
}

/// Class probabilities of the classifier in eval mode, with the mean
/// cross-entropy against `samples.classes`.
pub fn predict_daffnet(
    net: &DaffNet,
    store: &ParamStore<f32>,
    samples: &Samples,
    input: &InputSpec,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut probs = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for batch in idx.chunks(EVAL_BATCH) {
        let images: Vec<&Image> = batch.iter().map(|&i| &samples.images[i]).collect();
        let classes: Vec<usize> = batch.iter().map(|&i| samples.classes[i]).collect();
        let targets = one_hot(&classes, net.config.num_classes)?;
        let mut g = Graph::new();
        let x = g.constant(input.center_batch(&images)?);
        let mut s = Session::new(&mut g, store, Mode::Eval);
        let (p, loss) = s.frozen(|s| -> Result<_> {
            let out = net.forward(s, x)?;
            let loss = cross_entropy(s.graph, out.probs, &targets)?;
            Ok((out.probs, loss))
        })?;
        loss_sum += s.graph.value(loss).item() as f64 * batch.len() as f64;
        probs.extend(rows(s.graph.value(p)));
    }
    Ok((probs, loss_sum / samples.len().max(1) as f64))
}

/// Loads the frozen attribute predictor into `store` from its checkpoint.
pub fn load_map_into(net: &DaffNet, store: &mut ParamStore<f32>, ckpt: &Checkpoint) -> Result<()> {
    match &ckpt.model {
        ModelSpec::Map(cfg) if cfg == &net.config.map => {}
        _ => {
            return Err(Error::Checkpoint(
                "attribute-predictor checkpoint does not match the classifier's predictor config".into(),
            ))
        }
    }
    ckpt.expect_schema(&net.schema)?;
    store.copy_from(&ckpt.store, "")?;
    Ok(())
}

/// Trains backbone, encoder and decoder with class cross-entropy, keeping the
/// attribute predictor fixed. Selects the epoch with the best validation accuracy.
#[allow(clippy::too_many_arguments)]
pub fn train_daffnet(
    net: &DaffNet,
    store: &mut ParamStore<f32>,
    map_checkpoint: Option<&Checkpoint>,
    train: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
    input: &InputSpec,
) -> Result<History> {
    if net.map().is_some() {
        let ckpt = map_checkpoint
            .ok_or_else(|| Error::Checkpoint("the attribute branch needs a trained predictor checkpoint".into()))?;
        load_map_into(net, store, ckpt)?;
    }
    for (split, s) in [("training", train), ("validation", val)] {
        if s.is_empty() {
            return Err(Error::Data(format!("{split} split is empty")));
        }
        if let Some(&k) = s.classes.iter().find(|&&k| k >= net.config.num_classes) {
            return Err(Error::Data(format!("{split} split has class {k}, model has {}", net.config.num_classes)));
        }
    }
    fit(
        store,
        cfg,
        Monitor::ValAccuracy,
        "accuracy",
        train,
        input,
        |s, x, batch| {
            let classes: Vec<usize> = batch.iter().map(|&i| train.classes[i]).collect();
            let targets = one_hot(&classes, net.config.num_classes)?;
            let out = net.forward(s, x)?;
            cross_entropy(s.graph, out.probs, &targets)
        },
        |store| {
            let (probs, loss) = predict_daffnet(net, store, val, input)?;
            let correct = probs
                .iter()
                .zip(&val.classes)
                .filter(|(p, &k)| argmax(p) == k)
                .count();
            Ok((loss, correct as f64 / val.len() as f64))
        },
    )
}
