use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::architectures::{AutoEncoder, ModelConfig, NetworkKind, UNet};
use crate::error::{Error, Result};
use crate::params::NetworkParams;

/// Trained parameters with the provenance needed to rebuild the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: NetworkKind,
    pub model: ModelConfig,
    pub params: NetworkParams,
    /// Epoch (1-based) the parameters were taken from.
    pub epoch: usize,
    /// Selection metric at that epoch: DSC for segmenters, MSE for
    /// auto-encoders.
    pub val_metric: f64,
    /// Hash of the experiment config that produced the checkpoint.
    pub config_hash: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.model.to_kv();
        meta.set("kind", self.kind);
        meta.set("epoch", self.epoch);
        meta.set("val_metric", self.val_metric);
        meta.set("config_hash", &self.config_hash);
        self.params.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, mut meta) = NetworkParams::load(path)?;
        let field = |meta: &crate::config::KvConfig, key: &str| {
            meta.raw(key)
                .map(str::to_string)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}`", path.display())))
        };
        let kind: NetworkKind = field(&meta, "kind")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let epoch = field(&meta, "epoch")?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("{}: bad epoch", path.display())))?;
        let val_metric = field(&meta, "val_metric")?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("{}: bad val_metric", path.display())))?;
        let config_hash = field(&meta, "config_hash")?;
        for k in ["kind", "epoch", "val_metric", "config_hash"] {
            meta.remove(k);
        }
        let model = ModelConfig::from_kv(&meta)?;
        Ok(Self {
            kind,
            model,
            params,
            epoch,
            val_metric,
            config_hash,
        })
    }

    pub fn unet(&self) -> Result<UNet> {
        if self.kind != NetworkKind::Unet {
            return Err(Error::Checkpoint(format!("expected a unet checkpoint, found {}", self.kind)));
        }
        UNet::new(self.model.clone())
    }

    pub fn autoencoder(&self) -> Result<AutoEncoder> {
        AutoEncoder::new(self.kind, self.model.clone())
    }
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    /// Data term: weighted cross-entropy, or reconstruction MSE for
    /// auto-encoders.
    pub seg_loss: f64,
    pub shape_loss: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_metric: Option<f64>,
}

/// Training curve of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainingLog {
    /// `step,epoch,seg_loss,shape_loss,total` lines.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,seg_loss,shape_loss,total\n");
        for r in &self.records {
            let shape = r.shape_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{shape},{}", r.step, r.epoch, r.seg_loss, r.total);
        }
        out
    }

    /// `epoch,mean_loss,val_metric` lines.
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,val_metric\n");
        for e in &self.epochs {
            let val = e.val_metric.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{val}", e.epoch, e.mean_loss);
        }
        out
    }

    /// Loss values of every step, for curve comparisons.
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }
}

/// `<base>/<run_id>/` holding the config copy, logs, checkpoints and metrics.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(base: &Path, run_id: &str) -> Result<Self> {
        let root = base.join(run_id);
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    /// A run id derived from the command and config hash, so identical runs
    /// land in the same directory.
    pub fn default_id(command: &str, config_hash: &str) -> String {
        format!("{command}-{}", &config_hash[..12.min(config_hash.len())])
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn write_log(&self, prefix: &str, log: &TrainingLog) -> Result<()> {
        self.write(&format!("{prefix}_steps.csv"), &log.steps_csv())?;
        self.write(&format!("{prefix}_epochs.csv"), &log.epochs_csv())?;
        Ok(())
    }
}
