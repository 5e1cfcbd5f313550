//! Flat `key = value` run configuration. Every key has a default; a config file and then
//! command-line overrides are applied on top. The resolved set is written next to each run's
//! outputs and can be passed back with `--config` to repeat the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use mospred::model::{Head, LayerId, ModelConfig};
use mospred::postprocess::PostConfig;
use mospred::training::{CyclicalLr, LrSchedule, PhaseSpec, TrainRunConfig};

pub const SNAPSHOT_NAME: &str = "config.resolved";

/// `(key, default, description)`. `none` marks an unset optional value.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("out", "out", "output directory"),
    ("seed", "0", "seed for initialization, batch order and dropout"),
    ("threads", "0", "worker threads for loading and evaluation (0 = all cores)"),
    // data
    ("manifest", "none", "manifest for stats, plan-batches, predict and evaluate"),
    ("split", "train", "split label of `manifest`"),
    ("train_manifest", "none", "training manifest"),
    ("val_manifest", "none", "validation manifest"),
    ("default_resolution", "0.125", "MOS grid step when vote counts are unknown or mixed"),
    ("bin_width", "0.125", "histogram bin width for stats"),
    // batching
    ("plan", "sorted", "batch compilation for plan-batches: sorted | random"),
    ("micro_batch", "8", "micro-batch size"),
    ("accumulation_steps", "10", "micro-batches per optimizer update"),
    // model
    ("head", "regression", "regression | classification"),
    ("projection_dim", "auto", "front projection width (auto = feature dim)"),
    ("lstm_hidden", "128", "LSTM hidden size"),
    ("lstm_layers", "2", "stacked LSTM layers"),
    ("dense_hidden", "128", "dense layer width"),
    ("dropout", "true", "dropout during regression training"),
    ("dropout_in", "0.375", "dropout after the projection"),
    ("dropout_mid", "0.75", "dropout after the LSTM stack"),
    ("dropout_out", "0.75", "dropout after the dense layer"),
    // optimization
    ("momentum", "0.9", "SGD momentum"),
    ("base_lr", "0.0005", "cyclical schedule minimum"),
    ("max_lr", "0.005", "cyclical schedule maximum"),
    ("cycle_len", "200", "updates per full triangle"),
    ("loss", "l1", "regression loss: l1 | mse"),
    ("clip_norm", "none", "global gradient-norm clip"),
    ("patience", "5", "epochs without validation improvement before stopping"),
    ("max_epochs", "200", "epoch budget per phase"),
    ("max_updates", "none", "update budget per phase"),
    ("max_restarts", "3", "coverage restarts after early stopping"),
    ("coverage_low", "1.5", "restart if the lowest validation prediction is above this"),
    ("coverage_high", "4.5", "restart if the highest validation prediction is below this"),
    ("target_val_loss", "none", "stop once validation loss reaches this"),
    ("eval_batch", "32", "batch size for validation and prediction"),
    // classification transfer
    ("init_checkpoint", "none", "regression checkpoint the classifier starts from"),
    ("phase1_lr", "0.0005", "classification phase 1 learning rate"),
    ("phase1_batch", "100", "classification phase 1 batch size"),
    ("phase2_lr_factor", "0.2", "phase 2 learning rate as a fraction of phase 1"),
    ("phase2_batch_factor", "1.5", "phase 2 batch size as a multiple of phase 1"),
    ("phase2_freeze_projection", "true", "keep the projection frozen in phase 2"),
    ("phase3_batch", "8", "classification phase 3 batch size"),
    // fine-tuning
    ("checkpoint", "none", "checkpoint to fine-tune"),
    ("finetune_lr", "0.0001", "fine-tuning learning rate"),
    ("finetune_batch", "10", "fine-tuning batch size"),
    // prediction
    ("reg_checkpoint", "none", "regression checkpoint for predict"),
    ("cls_checkpoint", "none", "classification checkpoint for predict"),
    ("resolution", "auto", "quantization step (auto = the split's grid)"),
    ("low_threshold", "1.3", "below this, add low_delta"),
    ("high_threshold", "4.2", "above this, add high_delta"),
    ("low_delta", "-0.05", "correction below low_threshold"),
    ("high_delta", "0.25", "correction above high_threshold"),
    ("ensemble", "true", "average regression and classification outputs"),
    ("decode", "argmax", "class decoding: argmax | expectation"),
    ("quantize_before_correct", "false", "snap to the grid before the range correction"),
    // evaluation
    ("predictions", "none", "predictions CSV for evaluate"),
    ("prediction_column", "final", "column of `predictions` to score"),
    ("tau", "b", "Kendall variant: b | a"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

fn canonical_key(key: &str) -> Result<&'static str> {
    let norm = key.trim().replace('-', "_");
    KEYS.iter()
        .map(|(k, _, _)| *k)
        .find(|k| *k == norm)
        .ok_or_else(|| anyhow!("unknown config key {key:?}"))
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key)?;
        let value = value.trim();
        if value.contains('\n') {
            bail!("value of {key} spans several lines");
        }
        self.values.insert(key, value.to_string());
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value", i + 1))?;
            self.set(k, v).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `--key value` and `--key=value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| anyhow!("unexpected argument {arg:?}; overrides are --key value"))?;
            match flag.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = it.next().ok_or_else(|| anyhow!("--{flag} needs a value"))?;
                    self.set(flag, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| anyhow!("config key {key}: cannot parse {v:?}: {e}"))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            "" | "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.opt::<PathBuf>(key)?
            .ok_or_else(|| anyhow!("config key {key} is required for this command"))
    }

    pub fn snapshot(&self) -> String {
        let mut s = String::from("# resolved configuration; pass back with --config to repeat the run\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        let head: Head = self.get("head")?;
        let projection_dim = match self.raw("projection_dim") {
            "auto" => input_dim,
            _ => self.get("projection_dim")?,
        };
        let cfg = ModelConfig {
            input_dim,
            projection_dim,
            lstm_hidden: self.get("lstm_hidden")?,
            lstm_layers: self.get("lstm_layers")?,
            dense_hidden: self.get("dense_hidden")?,
            dropout_in: self.get("dropout_in")?,
            dropout_mid: self.get("dropout_mid")?,
            dropout_out: self.get("dropout_out")?,
            ..ModelConfig::regression(input_dim)
        }
        .with_head(head);
        let cfg = ModelConfig {
            dropout_enabled: cfg.dropout_enabled && self.get::<bool>("dropout")?,
            ..cfg
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run_config(&self) -> Result<TrainRunConfig> {
        let run = TrainRunConfig {
            seed: self.get("seed")?,
            micro_batch: self.get("micro_batch")?,
            accumulation_steps: self.get("accumulation_steps")?,
            momentum: self.get("momentum")?,
            schedule: CyclicalLr::new(self.get("base_lr")?, self.get("max_lr")?, self.get("cycle_len")?)?,
            loss: self.get("loss")?,
            patience: self.get("patience")?,
            max_epochs: self.get("max_epochs")?,
            max_updates: self.opt("max_updates")?,
            max_restarts: self.get("max_restarts")?,
            coverage_low: self.get("coverage_low")?,
            coverage_high: self.get("coverage_high")?,
            clip_norm: self.opt("clip_norm")?,
            target_val_loss: self.opt("target_val_loss")?,
            eval_batch: self.get("eval_batch")?,
        };
        run.validate()?;
        Ok(run)
    }

    pub fn classification_phases(&self, run: &TrainRunConfig) -> Result<Vec<PhaseSpec>> {
        let lr1: f64 = self.get("phase1_lr")?;
        let batch1: usize = self.get("phase1_batch")?;
        let lr2 = lr1 * self.get::<f64>("phase2_lr_factor")?;
        let batch2 = (batch1 as f64 * self.get::<f64>("phase2_batch_factor")?).round() as usize;
        let projection = BTreeSet::from([LayerId::Projection]);
        let phase2_frozen = if self.get("phase2_freeze_projection")? {
            projection.clone()
        } else {
            BTreeSet::new()
        };
        let spec = |name: &str, frozen: BTreeSet<LayerId>, batch, lr| PhaseSpec {
            name: name.into(),
            frozen,
            micro_batch: batch,
            accumulation: 1,
            lr: LrSchedule::Constant(lr),
            max_epochs: run.max_epochs,
            max_updates: run.max_updates,
            patience: run.patience,
        };
        Ok(vec![
            spec("phase1", projection, batch1, lr1),
            spec("phase2", phase2_frozen, batch2, lr2),
            spec("phase3", BTreeSet::new(), self.get("phase3_batch")?, lr2),
        ])
    }

    pub fn finetune_phase(&self, run: &TrainRunConfig) -> Result<PhaseSpec> {
        Ok(PhaseSpec {
            micro_batch: self.get("finetune_batch")?,
            lr: LrSchedule::Constant(self.get("finetune_lr")?),
            ..PhaseSpec::finetune(run)
        })
    }

    pub fn post_config(&self, split_resolution: f64) -> Result<PostConfig> {
        let resolution = match self.raw("resolution") {
            "auto" => split_resolution,
            _ => self.get("resolution")?,
        };
        let cfg = PostConfig {
            resolution,
            low_threshold: self.get("low_threshold")?,
            high_threshold: self.get("high_threshold")?,
            low_delta: self.get("low_delta")?,
            high_delta: self.get("high_delta")?,
            ensemble: self.get("ensemble")?,
            decode: self.get("decode")?,
            quantize_before_correct: self.get("quantize_before_correct")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_the_reference_setup() {
        let s = Settings::default();
        let run = s.run_config().unwrap();
        assert_eq!(run, TrainRunConfig::default());
        let phases = s.classification_phases(&run).unwrap();
        assert_eq!(phases, mospred::training::classification_phases(&run));
        assert_eq!(s.finetune_phase(&run).unwrap(), PhaseSpec::finetune(&run));
        assert_eq!(s.post_config(0.125).unwrap(), PostConfig::default());
        assert_eq!(s.model_config(1024).unwrap(), ModelConfig::regression(1024));
    }

    #[test]
    fn file_then_overrides() {
        let mut s = Settings::default();
        s.apply_text("# comment\npatience = 2\n\nmax-epochs=7\n", "cfg").unwrap();
        s.apply_overrides(&["--patience".into(), "3".into(), "--loss=mse".into()]).unwrap();
        let run = s.run_config().unwrap();
        assert_eq!((run.patience, run.max_epochs), (3, 7));
        assert_eq!(run.loss.to_string(), "mse");
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut s = Settings::default();
        assert!(s.apply_text("nope = 1", "cfg").unwrap_err().to_string().contains("cfg:1"));
        assert!(s.apply_text("patience 3", "cfg").is_err());
        assert!(s.apply_overrides(&["--patience".into()]).is_err());
        assert!(s.apply_overrides(&["patience".into(), "2".into()]).is_err());
        s.set("patience", "x").unwrap();
        assert!(s.run_config().is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut s = Settings::default();
        s.set("seed", "42").unwrap();
        s.set("max_updates", "10").unwrap();
        let mut back = Settings::default();
        back.apply_text(&s.snapshot(), "snap").unwrap();
        assert_eq!(back, s);
    }
}
