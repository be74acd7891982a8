use log::{info, warn};

use super::report::{analyze, inventory, EpochRecord, RunReport};
use super::{evaluate, Model, TrainConfig};
use crate::archive::Archive;
use crate::classifier::{ClassifierParams, InitStrategy};
use crate::data::{augment_train, preprocess_eval, DatasetBundle, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{argmax, estimate_prior, ClassPrior, LogitAdjusted, Loss};
use crate::metrics::{accuracy_by_split, ShotSplits};
use crate::optim::Sgd;
use crate::parallel;
use crate::peft::{PeftState, PeftVariant};
use crate::rng::RngStream;
use crate::session::{Grads, Owner, Session};
use crate::tensor::{Float, Tensor};
use crate::tte::{validate_expand, TteConfig};
use crate::vit::{extract_feature, BackboneMode, BackboneParams};

/// Samples whose gradients are computed concurrently before being summed in order.
const CHUNK: usize = 16;

const STREAM_PEFT: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_ORDER: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_PROBE: u64 = 5;

pub struct TrainOutcome<T> {
    pub report: RunReport,
    pub model: Model<T>,
    /// The config with PEFT defaults resolved, as stored in checkpoints.
    pub config: TrainConfig,
}

enum Input<T> {
    Image(Tensor<T>),
    Feature(Tensor<T>),
}

struct SampleResult<T> {
    grads: Grads<T>,
    loss: f64,
    pred: usize,
}

fn sample_step<T: Float>(model: &Model<T>, input: Input<T>, y: usize, loss: &dyn Loss<T>) -> Result<SampleResult<T>> {
    let mut s = Session::training();
    let f = match input {
        Input::Feature(t) => s.tape.constant(t),
        Input::Image(img) => model.feature(&mut s, &img)?,
    };
    let z = model.head.logits(&mut s, f)?;
    let pred = argmax(s.value(z).data());
    let l = loss.loss(&mut s.tape, z, y)?;
    let lv = s.value(l).data()[0].to_f64();
    let grads = s.backward(l)?;
    Ok(SampleResult { grads, loss: lv, pred })
}

/// Mean gradient over `batch`, plus the summed loss and per-sample predictions.
fn batch_grads<T: Float>(
    model: &Model<T>,
    batch: &[usize],
    labels: &[usize],
    input: &(dyn Fn(usize) -> Result<Input<T>> + Sync),
    loss: &dyn Loss<T>,
) -> Result<(Grads<T>, f64, Vec<usize>)> {
    let mut total = Grads::default();
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(CHUNK) {
        let results = parallel::try_map_indexed(chunk.len(), |j| {
            let i = chunk[j];
            sample_step(model, input(i)?, labels[i], loss)
        })?;
        for r in results {
            if !r.loss.is_finite() {
                return Err(Error::NumericGuard(format!("non-finite loss {}", r.loss)));
            }
            loss_sum += r.loss;
            preds.push(r.pred);
            total.accumulate(r.grads);
        }
    }
    total.scale(T::from_f64(1.0 / batch.len() as f64));
    Ok((total, loss_sum, preds))
}

/// Features of every sample under eval preprocessing, in dataset order.
pub(crate) fn dataset_features<T: Float>(
    backbone: &BackboneParams<T>,
    peft: &PeftState<T>,
    ds: &LabeledDataset,
) -> Result<Vec<Tensor<T>>> {
    let size = backbone.config.image_size;
    parallel::try_map_indexed(ds.len(), |i| {
        let v = preprocess_eval::<T>(ds, i, size, &TteConfig::off())?.remove(0);
        extract_feature(&v, backbone, peft)
    })
}

fn step_stores<T: Float>(opt: &mut Sgd<T>, model: &mut Model<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
    opt.step(
        &mut [
            (Owner::Backbone, &mut model.backbone.store),
            (Owner::Peft, &mut model.peft.store),
            (Owner::Head, &mut model.head.store),
        ],
        grads,
        lr,
    )
}

/// Trains `head` alone on fixed features with the LA loss.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe<T: Float>(
    features: &[Tensor<T>],
    labels: &[usize],
    prior: &ClassPrior,
    head: ClassifierParams<T>,
    epochs: usize,
    config: &TrainConfig,
    rng: &RngStream,
) -> Result<ClassifierParams<T>> {
    let loss = LogitAdjusted(prior.clone());
    let mut head = head;
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    for epoch in 0..epochs {
        let lr = config.lr_schedule.at(config.lr, epoch, epochs);
        let order = rng.split(epoch as u64).permutation(features.len());
        for batch in order.chunks(config.batch_size) {
            let mut total = Grads::default();
            for chunk in batch.chunks(CHUNK) {
                let rs = parallel::try_map_indexed(chunk.len(), |j| {
                    let i = chunk[j];
                    let mut s = Session::training();
                    let f = s.tape.constant(features[i].clone());
                    let z = head.logits(&mut s, f)?;
                    let l = Loss::<T>::loss(&loss, &mut s.tape, z, labels[i])?;
                    s.backward(l)
                })?;
                for g in rs {
                    total.accumulate(g);
                }
            }
            total.scale(T::from_f64(1.0 / batch.len() as f64));
            opt.step(&mut [(Owner::Head, &mut head.store)], &total, lr)?;
        }
    }
    Ok(head)
}

/// Runs the full recipe: attach PEFT, initialize the head, train, evaluate and analyze.
///
/// `text` is the text-feature archive for semantic init.
pub fn train<T: Float>(
    config: &TrainConfig,
    data: &DatasetBundle,
    backbone: BackboneParams<T>,
    text: Option<&Archive>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let ds = &data.train;
    if ds.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let k = ds.classes();
    let mut warnings = Vec::new();
    if config.tte.enabled {
        if let Some(w) = validate_expand(config.tte.expand, backbone.config.patch_size) {
            warn!("{w}");
            warnings.push(w);
        }
    }
    let root = RngStream::new(config.seed);
    let mut backbone = backbone;
    backbone.set_trainable(config.backbone_mode)?;
    let peft_cfg = config.peft.resolve(k, backbone.config.layers)?;
    let peft = PeftState::attach(&peft_cfg, &mut backbone, &mut root.split(STREAM_PEFT))?;
    let mut resolved = config.clone();
    resolved.peft = peft_cfg;

    let counts = ds.counts();
    let prior = estimate_prior(ds.labels(), k, config.prior_smoothing)?;
    let loss = config.loss.build::<T>(&prior);
    let fd = backbone.config.feature_dim();
    let cc = &config.classifier;
    let random_head = || ClassifierParams::init_random(cc.kind, cc.scale, k, fd, &mut root.split(STREAM_HEAD));
    let head = match cc.init {
        InitStrategy::Random => random_head(),
        InitStrategy::Semantic => {
            let text = text.ok_or_else(|| Error::Config("semantic init needs a text-feature archive".into()))?;
            ClassifierParams::init_semantic(cc.kind, cc.scale, text, k, fd)?
        }
        InitStrategy::ClassMean => {
            let feats = dataset_features(&backbone, &peft, ds)?;
            ClassifierParams::init_class_mean(cc.kind, cc.scale, &feats, ds.labels(), k)?
        }
        InitStrategy::LinearProbe => {
            let feats = dataset_features(&backbone, &peft, ds)?;
            linear_probe(&feats, ds.labels(), &prior, random_head(), cc.probe_epochs, config, &root.split(STREAM_PROBE))?
        }
    };
    let mut model = Model { backbone, peft, head };

    let cacheable = config.cache_features
        && config.peft.variant == PeftVariant::None
        && config.backbone_mode == BackboneMode::Frozen
        && !config.augmentation.is_random();
    let cache = if cacheable && config.epochs > 0 {
        info!("caching {} training features", ds.len());
        Some(dataset_features(&model.backbone, &model.peft, ds)?)
    } else {
        None
    };

    let n = ds.len();
    let size = model.backbone.config.image_size;
    let splits = ShotSplits::from_counts(&counts);
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_schedule.at(config.lr, epoch, config.epochs);
        let order = root.split(STREAM_ORDER).split(epoch as u64).permutation(n);
        let aug_root = root.split(STREAM_AUGMENT).split(epoch as u64);
        let aug = config.augmentation;
        let cache_ref = cache.as_ref();
        let input = move |i: usize| -> Result<Input<T>> {
            if let Some(c) = cache_ref {
                return Ok(Input::Feature(c[i].clone()));
            }
            if aug.is_random() {
                let mut img = augment_train(&ds.image::<T>(i), size, &aug, &mut aug_root.split(i as u64))?;
                ds.normalize(&mut img);
                Ok(Input::Image(img))
            } else {
                Ok(Input::Image(preprocess_eval::<T>(ds, i, size, &TteConfig::off())?.remove(0)))
            }
        };
        let mut loss_sum = 0.0;
        let mut preds = Vec::with_capacity(n);
        let mut seen = Vec::with_capacity(n);
        for batch in order.chunks(config.batch_size) {
            let (grads, l, p) = batch_grads(&model, batch, ds.labels(), &input, loss.as_ref())?;
            step_stores(&mut opt, &mut model, &grads, lr)?;
            loss_sum += l;
            preds.extend(p);
            seen.extend(batch.iter().map(|&i| ds.labels()[i]));
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n as f64,
            train_accuracy: accuracy_by_split(&preds, &seen, &splits)?,
        };
        info!("epoch {epoch}: lr {lr:.5} loss {:.5} acc {:?}", rec.train_loss, rec.train_accuracy.overall);
        epochs.push(rec);
    }

    let test_ds = data.eval_split();
    let test = evaluate(&model, test_ds, &counts, &TteConfig::off())?;
    let test_tte = if config.tte.active() {
        Some(evaluate(&model, test_ds, &counts, &config.tte)?.accuracy)
    } else {
        None
    };
    let analysis = analyze(&model, ds, &counts, &test.accuracy)?;
    let report = RunReport {
        config: resolved.clone(),
        classes: k,
        train_counts: counts,
        splits,
        epochs,
        test: test.accuracy,
        test_tte,
        inventory: inventory(&model),
        analysis,
        warnings,
    };
    Ok(TrainOutcome { report, model, config: resolved })
}
