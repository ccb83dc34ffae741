//! The HAR experiment: software pre-training, chip evaluation and
//! in-the-loop retraining.

use super::{evaluate, train_model, Backend, Evaluation, HarDataset, Layer, MetricRow, Model, TrainConfig, HAR_CLASSES};
use crate::chip::ChipConfig;
use crate::error::Result;
use crate::lowering::ConvSpec;
use crate::rng::keyed;

const TAG_INIT: u64 = 0x696e_6974;

/// Conv1d 9->16 (k 32, stride 6, first 16 positions), dense 256->125,
/// dense 125->6, ReLU in between, no biases.
pub fn har_model(seed: u64) -> Result<Model> {
    let mut rng = keyed(&[seed, TAG_INIT]);
    let conv = ConvSpec::conv1d(9, 16, 32, 6, 128)?;
    Model::new(
        vec![
            Layer::conv1d(&conv, Some(16), false, &mut rng)?,
            Layer::dense(256, 125, &mut rng)?,
            Layer::dense(125, HAR_CLASSES, &mut rng)?,
        ],
        HAR_CLASSES,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarConfig {
    pub software_epochs: usize,
    pub hil_epochs: usize,
    pub lr: f32,
    pub hil_lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub chip: ChipConfig,
    pub n_chips: usize,
    pub workers: Option<usize>,
}

impl Default for HarConfig {
    fn default() -> Self {
        HarConfig {
            software_epochs: 50,
            hil_epochs: 1,
            lr: 0.05,
            hil_lr: 0.05,
            batch_size: 64,
            seed: 0,
            chip: ChipConfig::default(),
            n_chips: 1,
            workers: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HarReport {
    pub rows: Vec<MetricRow>,
    pub software: Evaluation,
    pub chip_raw: Evaluation,
    pub chip_retrained: Evaluation,
    pub pretrained: Model,
    pub retrained: Model,
}

/// Runs the three stages on raw (unnormalized) data. `log` receives every
/// metrics row as it is produced.
pub fn run_har_experiment(data: &HarDataset, cfg: &HarConfig, mut log: impl FnMut(&MetricRow)) -> Result<HarReport> {
    let (data, norm) = data.normalized()?;
    let mut model = har_model(cfg.seed)?;
    model.normalizer = Some(norm);
    let mut rows = Vec::new();
    let mut emit = |r: MetricRow| {
        log(&r);
        rows.push(r);
    };

    let mut software = Backend::software(&cfg.chip);
    let train_cfg = TrainConfig { epochs: cfg.software_epochs, lr: cfg.lr, batch_size: cfg.batch_size, seed: cfg.seed, ..TrainConfig::default() };
    let mut pending = Vec::new();
    train_model(&mut model, &data.train, Some(&data.test), &mut software, &train_cfg, |m| pending.extend(m.rows()))?;
    pending.into_iter().for_each(&mut emit);
    let sw = evaluate(&model, &data.test, &mut software, cfg.seed)?;
    let pretrained = model.clone();

    let stage = run_chip_stage(&mut model, &data, cfg, cfg.software_epochs, &mut emit)?;
    Ok(HarReport { rows, software: sw, chip_raw: stage.raw, chip_retrained: stage.retrained, pretrained, retrained: model })
}

#[derive(Clone, Debug)]
pub struct ChipStage {
    pub raw: Evaluation,
    pub retrained: Evaluation,
}

/// Evaluates `model` on the chip, retrains it in the loop for
/// `cfg.hil_epochs` epochs and evaluates again. `data` must already be
/// normalized; rows are numbered after `last_epoch`.
pub fn run_chip_stage(
    model: &mut Model,
    data: &HarDataset,
    cfg: &HarConfig,
    last_epoch: usize,
    log: &mut dyn FnMut(MetricRow),
) -> Result<ChipStage> {
    let mut chip = Backend::chip(cfg.chip.clone(), cfg.n_chips, cfg.workers)?;
    let raw = evaluate(model, &data.test, &mut chip, cfg.seed)?;
    log(MetricRow { epoch: last_epoch, split: "chip_test".into(), accuracy: raw.accuracy });

    let hil_cfg = TrainConfig {
        epochs: cfg.hil_epochs,
        lr: cfg.hil_lr,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        first_epoch: last_epoch + 1,
        ..TrainConfig::default()
    };
    let mut pending = Vec::new();
    train_model(model, &data.train, None, &mut chip, &hil_cfg, |m| {
        pending.push(MetricRow { epoch: m.epoch, split: "chip_train".into(), accuracy: m.train_accuracy })
    })?;
    pending.into_iter().for_each(&mut *log);
    let retrained = evaluate(model, &data.test, &mut chip, cfg.seed)?;
    log(MetricRow { epoch: last_epoch + cfg.hil_epochs, split: "chip_test".into(), accuracy: retrained.accuracy });
    Ok(ChipStage { raw, retrained })
}
