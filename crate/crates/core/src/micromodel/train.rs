use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::augment;
use super::model::{backward_into, forward, softmax, ModelParams, Target};
use super::optim::{adamw_step, AdamWConfig, OptimState, PlateauConfig, PlateauState};
use super::{Backbone, Tensor};
use crate::error::{Error, Result};
use crate::primitives::BBox;
use crate::seeding::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferRegime {
    NoPretrain,
    FreezeBackbone,
    FineTuneAll,
}

impl TransferRegime {
    pub const ALL: [TransferRegime; 3] = [
        TransferRegime::FreezeBackbone,
        TransferRegime::NoPretrain,
        TransferRegime::FineTuneAll,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            TransferRegime::NoPretrain => "no pretrained weights",
            TransferRegime::FreezeBackbone => "freeze pretrained weights",
            TransferRegime::FineTuneAll => "fine-tune pretrained weights",
        }
    }
}

impl std::str::FromStr for TransferRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_pretrain" | "none" => Ok(TransferRegime::NoPretrain),
            "freeze_backbone" | "freeze" => Ok(TransferRegime::FreezeBackbone),
            "fine_tune_all" | "fine_tune" | "finetune" => Ok(TransferRegime::FineTuneAll),
            other => Err(Error::InvalidConfig(format!("unknown regime {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation: bool,
    pub regime: TransferRegime,
    pub optimizer: AdamWConfig,
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            seed: 0,
            augmentation: true,
            regime: TransferRegime::FineTuneAll,
            optimizer: AdamWConfig::default(),
            plateau: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) || self.plateau.patience == 0 {
            return Err(Error::InvalidConfig("plateau factor in (0,1) and patience >= 1 required".into()));
        }
        Ok(())
    }
}

/// One training image with its class index (0-based) and pixel box.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub class_index: usize,
    pub bbox: BBox,
}

impl LabeledImage {
    fn target(&self, image: &Tensor, bbox: &BBox) -> Target {
        let s = image.shape();
        Target::from_pixels(self.class_index, bbox, s[2], s[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn mean_loss(params: &ModelParams, data: &[LabeledImage]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let c = forward(params, &s.image)?;
        total += super::model::loss(&c.logits, &c.bbox, &s.target(&s.image, &s.bbox));
    }
    Ok(total / data.len().max(1) as f64)
}

/// Fraction of images whose argmax class is right.
pub fn accuracy(params: &ModelParams, data: &[LabeledImage]) -> Result<f64> {
    let mut correct = 0;
    for s in data {
        let c = forward(params, &s.image)?;
        let p = softmax(&c.logits);
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        correct += usize::from(best == s.class_index);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Initial parameters for a run: heads always random; backbone random for
/// [`TransferRegime::NoPretrain`], copied from `pretrained` otherwise.
pub fn initial_params(config: &TrainConfig, pretrained: Option<&Backbone>) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x1417));
    let random = ModelParams::init(&mut rng);
    match (config.regime, pretrained) {
        (TransferRegime::NoPretrain, _) => Ok(random),
        (_, Some(b)) => Ok(ModelParams {
            backbone: b.clone(),
            ..random
        }),
        (regime, None) => Err(Error::InvalidConfig(format!(
            "{} needs pretrained backbone weights",
            regime.label()
        ))),
    }
}

/// Mini-batch AdamW training with validation-driven plateau scheduling.
/// Under [`TransferRegime::FreezeBackbone`] the backbone is never updated.
pub fn train(
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    config: &TrainConfig,
    pretrained: Option<&Backbone>,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    let mut params = initial_params(config, pretrained)?;
    let frozen: Vec<bool> = (0..10)
        .map(|i| config.regime == TransferRegime::FreezeBackbone && i < 6)
        .collect();
    let mut optim = OptimState::new(&params, config.optimizer);
    let mut plateau = PlateauState::new(config.optimizer.lr, config.plateau);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7261));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = ModelParams::zeros();
            for &i in batch {
                let sample = &train_set[i];
                let (image, bbox) = if config.augmentation {
                    augment(&sample.image, &sample.bbox, &mut rng)
                } else {
                    (sample.image.clone(), sample.bbox)
                };
                let target = sample.target(&image, &bbox);
                let cache = forward(&params, &image)?;
                let l = backward_into(&params, &cache, &target, &mut grads);
                if !l.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                total += l;
            }
            grads.scale(1.0 / batch.len() as f64);
            adamw_step(&mut params, &grads, &mut optim, &frozen);
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = mean_loss(&params, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: optim.lr,
        });
        plateau.step(val_loss);
        optim.lr = plateau.current_lr;
    }
    Ok((params, history))
}

/// Trains the whole model on the source domain and exports its backbone.
pub fn pretrain(
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    config: &TrainConfig,
) -> Result<(Backbone, ModelParams, Vec<EpochRecord>)> {
    let cfg = TrainConfig {
        regime: TransferRegime::NoPretrain,
        ..config.clone()
    };
    let (params, history) = train(train_set, val_set, &cfg, None)?;
    Ok((params.backbone.clone(), params, history))
}

pub(crate) fn shuffled<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
