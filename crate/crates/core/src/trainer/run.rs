//! Training loop over a record set with a run directory on disk.
//!
//! Layout (version [`RUN_LAYOUT_VERSION`]):
//! `run.json` layout marker, `config.toml` config echo, `metrics.csv` one row
//! per generator step, `checkpoints/step-XXXXXXXX.ckpt` and
//! `checkpoints/latest.ckpt`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use attnage_tensor::Scalar;

use super::{sample_target_labels, save_checkpoint, train_step, Batch, TrainConfig, TrainState};
use crate::conditioning::{AgeGroupLabel, AgeGroupScheme};
use crate::data::{BatchSampler, DatasetRecord};
use crate::error::{Error, Result};
use crate::image::{stack_images, ImageTensor};
use crate::losses::LossBreakdown;

pub const RUN_LAYOUT_VERSION: u32 = 1;

/// Images and their source groups, ready for batching.
#[derive(Debug, Clone)]
pub struct TrainingData {
    images: Vec<ImageTensor>,
    labels: Vec<AgeGroupLabel>,
}

impl TrainingData {
    pub fn new(records: &[DatasetRecord], scheme: &AgeGroupScheme, resolution: (usize, usize)) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("no training records".into()));
        }
        let mut images = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            if (r.image.height(), r.image.width()) != resolution {
                return Err(Error::Shape(format!(
                    "record of subject {} is {}x{}, training runs at {}x{}",
                    r.subject_id,
                    r.image.height(),
                    r.image.width(),
                    resolution.0,
                    resolution.1
                )));
            }
            images.push(r.image.clone());
            labels.push(r.label(scheme)?);
        }
        Ok(TrainingData { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacked images and source labels for the given record indices.
    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> Result<(attnage_tensor::Tensor<T>, Vec<AgeGroupLabel>)> {
        let refs: Vec<&ImageTensor> = indices.iter().map(|&i| &self.images[i]).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((stack_images(&refs)?, labels))
    }
}

/// Files of one training run.
#[derive(Debug, Clone)]
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    /// Creates (or reopens) `root`, writing the layout marker and, when given,
    /// the config echo.
    pub fn create(root: &Path, config_echo: Option<&str>) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        let marker = root.join("run.json");
        let body = format!("{{\"layout_version\":{RUN_LAYOUT_VERSION}}}\n");
        fs::write(&marker, body).map_err(|e| Error::io(&marker, e))?;
        if let Some(echo) = config_echo {
            let p = root.join("config.toml");
            fs::write(&p, echo).map_err(|e| Error::io(&p, e))?;
        }
        Ok(RunDirectory {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:08}.ckpt"))
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("latest.ckpt")
    }

    /// Opens the metrics file for appending, keeping the header and any rows
    /// up to and including `step` (rows past a resume point are dropped).
    fn open_metrics(&self, step: u64) -> Result<File> {
        let path = self.metrics_path();
        let mut kept = vec![LossBreakdown::CSV_HEADER.to_string()];
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if row_step.is_some_and(|s| s <= step) {
                    kept.push(line);
                }
            }
        }
        let mut body = kept.join("\n");
        body.push('\n');
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))
    }

    fn checkpoint<T: Scalar>(&self, state: &TrainState<T>) -> Result<()> {
        let path = self.checkpoint_path(state.step);
        save_checkpoint(state, &path)?;
        let latest = self.latest_checkpoint();
        fs::copy(&path, &latest).map_err(|e| Error::io(&latest, e))?;
        log::info!("step {}: checkpoint {}", state.step, path.display());
        Ok(())
    }
}

/// Trains until `config.total_steps` generator steps have completed, or until
/// `observer` returns `false`. The batch for step `k` depends only on
/// `(config.seed, k)`; targets and interpolation weights come from the state's
/// rng, so resuming from a checkpoint reproduces an uninterrupted run.
pub fn run_training<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainingData,
    config: &TrainConfig,
    run: &RunDirectory,
    mut observer: impl FnMut(&TrainState<T>, &LossBreakdown) -> Result<bool>,
) -> Result<()> {
    config.validate()?;
    if state.resolution() != config.resolution() {
        return Err(Error::Config(format!(
            "state resolution {:?} differs from configured {:?}",
            state.resolution(),
            config.resolution()
        )));
    }
    let total = config.total_steps(data.len());
    let mut sampler = BatchSampler::new(data.len(), config.batch_size, config.seed)?;
    let mut metrics = run.open_metrics(state.step)?;
    let metrics_path = run.metrics_path();
    while state.step < total {
        let (images, source) = data.gather::<T>(&sampler.batch(state.step))?;
        let target = sample_target_labels(&source, &mut state.rng, config.exclude_source_target);
        let batch = Batch { images, source, target };
        let breakdown = match train_step(state, &batch, config) {
            Ok(b) => b,
            Err(e) => {
                log::error!("step {} failed: {e}", state.step + 1);
                return Err(e);
            }
        };
        writeln!(metrics, "{}", breakdown.csv_row(state.step)).map_err(|e| Error::io(&metrics_path, e))?;
        if state.step.is_multiple_of(config.checkpoint_interval) {
            run.checkpoint(state)?;
        }
        if state.step.is_multiple_of(100) {
            log::info!(
                "step {}/{}: adv {:.4} cls_real {:.4} cls_fake {:.4} l2 {:.3} total {:.3}",
                state.step,
                total,
                breakdown.adv,
                breakdown.cls_real,
                breakdown.cls_fake,
                breakdown.l2,
                breakdown.total
            );
        }
        if !observer(state, &breakdown)? {
            break;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    if !state.step.is_multiple_of(config.checkpoint_interval) {
        run.checkpoint(state)?;
    }
    Ok(())
}
