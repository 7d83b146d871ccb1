//! Training loop, run-directory layout and checkpoint reload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Mode, SegmentationModel, TrainSample};
use super::nn::{clip_grad_norm, Adam};
use super::weights::{read_tensors, write_tensors, TensorMap};
use super::{EngineError, ModelConfig, Normalization, TrainLayers};
use crate::data::{DataError, Dataset, Label};

pub const PARTIAL_RUN_MARKER: &str = "PARTIAL_RUN";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.json";
const GRAD_CLIP: f32 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch_index: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Per-epoch losses, indices contiguous from 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn from_records(records: Vec<EpochRecord>) -> Result<Self, EngineError> {
        for (i, r) in records.iter().enumerate() {
            if r.epoch_index != i + 1 {
                return Err(EngineError::Config(format!(
                    "history epochs must run 1, 2, ...; found {} at position {}",
                    r.epoch_index,
                    i + 1
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// `epoch,train_loss,val_loss`; an absent validation loss is an empty field.
    pub fn write_csv(&self, path: &Path) -> Result<(), EngineError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "train_loss", "val_loss"])
            .map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.epoch_index.to_string(),
                r.train_loss.to_string(),
                r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, EngineError> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != ["epoch", "train_loss", "val_loss"] {
            return Err(EngineError::Config(format!(
                "{}: unexpected header {:?}",
                path.display(),
                header
            )));
        }
        let mut records = Vec::new();
        for row in r.records() {
            let row = row.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64, EngineError> {
                row[i].parse().map_err(|_| {
                    EngineError::Config(format!("{}: bad number {:?}", path.display(), &row[i]))
                })
            };
            records.push(EpochRecord {
                epoch_index: num(0)? as usize,
                train_loss: num(1)?,
                val_loss: if row[2].is_empty() {
                    None
                } else {
                    Some(num(2)?)
                },
            });
        }
        Self::from_records(records)
    }
}

fn csv_err(e: csv::Error) -> EngineError {
    EngineError::Io(std::io::Error::other(e.to_string()))
}

/// One saved epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch_index: usize,
    pub weights_ref: PathBuf,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub created_at: DateTime<Utc>,
    pub config_digest: String,
    pub backbone_id: String,
    pub normalization: Normalization,
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("checkpoint_{epoch:03}.weights"))
}

/// Checkpoint files in `run_dir`, ordered by epoch.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>, EngineError> {
    let entries = match std::fs::read_dir(run_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(epoch) = name
            .strip_prefix("checkpoint_")
            .and_then(|s| s.strip_suffix(".weights"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            found.push((epoch, entry.path()));
        }
    }
    found.sort();
    Ok(found)
}

pub fn save_checkpoint(model: &SegmentationModel, ckpt: &Checkpoint) -> Result<(), EngineError> {
    let meta = BTreeMap::from([
        ("epoch_index".to_string(), ckpt.epoch_index.to_string()),
        ("train_loss".to_string(), ckpt.train_loss.to_string()),
        (
            "val_loss".to_string(),
            ckpt.val_loss.map(|v| v.to_string()).unwrap_or_default(),
        ),
        ("created_at".to_string(), ckpt.created_at.to_rfc3339()),
        ("config_digest".to_string(), ckpt.config_digest.clone()),
        ("backbone_id".to_string(), ckpt.backbone_id.clone()),
        (
            "normalization".to_string(),
            serde_json::to_string(&ckpt.normalization).expect("serializes"),
        ),
        (
            "config".to_string(),
            serde_json::to_string(model.config()).expect("serializes"),
        ),
    ]);
    write_tensors(&ckpt.weights_ref, &model.tensors(), meta)
}

pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, TensorMap), EngineError> {
    let (tensors, meta) = read_tensors(path)?;
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| EngineError::Weights(format!("{}: metadata lacks {k}", path.display())))
    };
    let bad = |k: &str| EngineError::Weights(format!("{}: bad {k} metadata", path.display()));
    let val = field("val_loss")?;
    let ckpt = Checkpoint {
        epoch_index: field("epoch_index")?
            .parse()
            .map_err(|_| bad("epoch_index"))?,
        weights_ref: path.to_path_buf(),
        train_loss: field("train_loss")?
            .parse()
            .map_err(|_| bad("train_loss"))?,
        val_loss: if val.is_empty() {
            None
        } else {
            Some(val.parse().map_err(|_| bad("val_loss"))?)
        },
        created_at: DateTime::parse_from_rfc3339(&field("created_at")?)
            .map_err(|_| bad("created_at"))?
            .with_timezone(&Utc),
        config_digest: field("config_digest")?,
        backbone_id: field("backbone_id")?,
        normalization: serde_json::from_str(&field("normalization")?)
            .map_err(|_| bad("normalization"))?,
    };
    Ok((ckpt, tensors))
}

#[derive(Serialize, Deserialize)]
struct RunConfigFile {
    config: ModelConfig,
    digest: String,
}

/// The configuration a run directory was trained with.
pub fn read_run_config(run_dir: &Path) -> Result<ModelConfig, EngineError> {
    let path = run_dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => EngineError::NotFound(path.clone()),
        _ => EngineError::Io(e),
    })?;
    let file: RunConfigFile = serde_json::from_str(&text)
        .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
    Ok(file.config)
}

fn check_trainable(set: &Dataset, which: &str) -> Result<(), EngineError> {
    for scan in set {
        let gt = scan.ground_truth().ok_or_else(|| {
            EngineError::Data(DataError::Validation {
                scan_id: scan.scan_id.clone(),
                message: format!("{which} scan has no ground truth label"),
            })
        })?;
        if gt.label() == Label::Tumor && gt.masks().is_empty() {
            return Err(EngineError::Data(DataError::Validation {
                scan_id: scan.scan_id.clone(),
                message: "labeled tumor but carries no instance mask".into(),
            }));
        }
    }
    Ok(())
}

/// Trains `model` in place, writing one checkpoint per epoch plus
/// `history.csv` and `config.json` into `run_dir`.
///
/// The run directory must not already hold checkpoints. If a checkpoint
/// cannot be written, a `PARTIAL_RUN` marker is left behind and the error is
/// returned. The model stays in training mode.
pub fn train(
    model: &mut SegmentationModel,
    train_set: &Dataset,
    validation_set: &Dataset,
    config: &ModelConfig,
    run_dir: &Path,
) -> Result<TrainingHistory, EngineError> {
    config.validate_for_training()?;
    if train_set.is_empty() {
        return Err(EngineError::Config("training set is empty".into()));
    }
    let current = model.config();
    if current.backbone_id != config.backbone_id || current.input_size != config.input_size {
        return Err(EngineError::Config(format!(
            "model was built for {} at {}px but the training config asks for {} at {}px",
            current.backbone_id, current.input_size, config.backbone_id, config.input_size
        )));
    }
    check_trainable(train_set, "training")?;
    check_trainable(validation_set, "validation")?;

    std::fs::create_dir_all(run_dir)?;
    if !list_checkpoints(run_dir)?.is_empty() {
        return Err(EngineError::RunDirInUse(run_dir.to_path_buf()));
    }
    let marker = run_dir.join(PARTIAL_RUN_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker)?;
    }
    let digest = config.digest();
    let run_cfg = RunConfigFile {
        config: config.clone(),
        digest: digest.clone(),
    };
    std::fs::write(
        run_dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&run_cfg).expect("serializes"),
    )?;

    model.set_config(config.clone());
    model.set_mode(Mode::Training);
    let train_samples: Vec<TrainSample> = train_set
        .iter()
        .map(|s| model.prepare_sample(s))
        .collect::<Result<_, _>>()?;
    let val_samples: Vec<TrainSample> = validation_set
        .iter()
        .map(|s| model.prepare_sample(s))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.random_seed.wrapping_add(1));
    let mut adam = Adam::new(config.learning_rate as f32);
    let update_backbone = config.train_layers == TrainLayers::All;
    let steps = config.steps_per_epoch.unwrap_or(train_samples.len());
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = Vec::with_capacity(steps);
        while order.len() < steps {
            let mut pass: Vec<usize> = (0..train_samples.len()).collect();
            pass.shuffle(&mut rng);
            order.extend(pass);
        }
        order.truncate(steps);

        let mut total = 0.0f64;
        for &idx in &order {
            let mut params = model.trainable_params(true);
            for p in params.iter_mut() {
                p.zero_grad();
            }
            drop(params);
            let loss = model.train_step(&train_samples[idx], &mut rng, true, update_backbone);
            total += loss.total() as f64;
            let mut params = model.trainable_params(update_backbone);
            clip_grad_norm(&mut params, GRAD_CLIP);
            adam.step(&mut params);
        }
        let train_loss = total / steps as f64;

        let val_loss = if val_samples.is_empty() {
            None
        } else {
            // fixed sampling stream so epochs are comparable
            let mut vrng = ChaCha8Rng::seed_from_u64(config.random_seed ^ 0x76_616c_6964);
            let sum: f64 = val_samples
                .iter()
                .map(|s| model.train_step(s, &mut vrng, false, false).total() as f64)
                .sum();
            Some(sum / val_samples.len() as f64)
        };

        let ckpt = Checkpoint {
            epoch_index: epoch,
            weights_ref: checkpoint_path(run_dir, epoch),
            train_loss,
            val_loss,
            created_at: Utc::now(),
            config_digest: digest.clone(),
            backbone_id: config.backbone_id.clone(),
            normalization: model.normalization(),
        };
        if let Err(e) = save_checkpoint(model, &ckpt) {
            let note = format!("training stopped after epoch {}: {e}\n", epoch - 1);
            // best effort: the disk may be the thing that failed
            let _ = std::fs::write(&marker, note);
            return Err(e);
        }
        records.push(EpochRecord {
            epoch_index: epoch,
            train_loss,
            val_loss,
        });
        TrainingHistory {
            records: records.clone(),
        }
        .write_csv(&run_dir.join(HISTORY_FILE))?;
        tracing::info!(epoch, train_loss, ?val_loss, "epoch finished");
    }
    Ok(TrainingHistory { records })
}

/// Loads the highest-epoch checkpoint of `run_dir` in inference mode.
pub fn load_inference_model(
    run_dir: &Path,
    config: &ModelConfig,
) -> Result<SegmentationModel, EngineError> {
    let (_, path) = list_checkpoints(run_dir)?
        .pop()
        .ok_or_else(|| EngineError::NotFound(run_dir.to_path_buf()))?;
    let (ckpt, tensors) = read_checkpoint(&path)?;
    let expected = config.digest();
    if ckpt.config_digest != expected {
        return Err(EngineError::Incompatible {
            expected,
            found: ckpt.config_digest,
        });
    }
    let mut model = SegmentationModel::new_random(config)?;
    model.load_all_tensors(&tensors)?;
    model.set_normalization(ckpt.normalization);
    model.set_mode(Mode::Inference);
    Ok(model)
}

/// Reads the run's own config and loads its latest checkpoint.
pub fn load_run(run_dir: &Path) -> Result<SegmentationModel, EngineError> {
    let config = read_run_config(run_dir)?;
    load_inference_model(run_dir, &config)
}
