use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;

use mospred::batching::{padding_cost, plan_random, plan_sorted};
use mospred::dataset::{
    class_counts, class_to_mos, class_weights, load_manifest, mean_std_scatter, mos_histogram, Dataset, FeatureStore,
    Split,
};
use mospred::metrics::{evaluate, TauVariant};
use mospred::model::{Head, Model};
use mospred::postprocess::{decode_classification, pipeline};
use mospred::training::{finetune, predict, train_classification, train_regression, LabeledSet, StopReason, TrainOutcome};
use mospred::Error;

use crate::config::{Settings, SNAPSHOT_NAME};

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Creates the output directory and writes the resolved-config snapshot into it.
pub fn prepare_out(settings: &Settings) -> Result<PathBuf> {
    let out: PathBuf = settings.path("out")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(SNAPSHOT_NAME), settings.snapshot())
        .with_context(|| format!("writing {}", out.join(SNAPSHOT_NAME).display()))?;
    Ok(out)
}

fn load(settings: &Settings, key: &str, split: Split) -> Result<Dataset> {
    let path = settings.path(key)?;
    Ok(load_manifest(&path, split, settings.get("default_resolution")?)?)
}

pub fn stats(settings: &Settings, out: &Path) -> Result<()> {
    let split: Split = settings.get("split")?;
    let d = load(settings, "manifest", split)?;

    let mut w = create(&out.join("histogram.csv"))?;
    writeln!(w, "mos,count")?;
    for (center, count) in mos_histogram(&d, settings.get("bin_width")?)? {
        writeln!(w, "{center},{count}")?;
    }
    w.flush()?;

    let counts = class_counts(&d)?;
    let weights = class_weights(&d)?;
    let mut w = create(&out.join("class_weights.csv"))?;
    writeln!(w, "class,mos,count,weight")?;
    for (k, (c, wt)) in counts.iter().zip(&weights).enumerate() {
        writeln!(w, "{},{},{c},{wt}", k + 1, class_to_mos(k + 1)?)?;
    }
    w.flush()?;

    if d.utterances.iter().all(|u| u.ratings.is_some()) {
        let mut w = create(&out.join("scatter.csv"))?;
        writeln!(w, "mean,std,count")?;
        for (m, s, c) in mean_std_scatter(&d)? {
            writeln!(w, "{m},{s},{c}")?;
        }
        w.flush()?;
    }

    let labels = d.labels()?;
    let systems: BTreeSet<&str> = d.utterances.iter().map(|u| u.system_id.as_str()).collect();
    let summary = serde_json::json!({
        "utterances": d.len(),
        "systems": systems.len(),
        "resolution": d.resolution,
        "mean_mos": labels.iter().map(|l| l.mean).sum::<f64>() / labels.len() as f64,
        "fraction_below_1_5": mospred::dataset::range_fraction(&d, ..1.5)?,
        "fraction_above_4_5": mospred::dataset::range_fraction(&d, 4.5..)?,
    });
    fs::write(out.join("summary.json"), format!("{summary:#}\n"))?;
    println!("{summary}");
    Ok(())
}

pub fn plan_batches(settings: &Settings, out: &Path) -> Result<()> {
    let split: Split = settings.get("split")?;
    let size: usize = settings.get("micro_batch")?;
    let seed: u64 = settings.get("seed")?;
    let d = load(settings, "manifest", split)?;
    let lengths = d.utterances.iter().map(|u| (u.id.clone(), u.num_frames)).collect();
    let plan = match settings.raw("plan") {
        "sorted" => plan_sorted(&lengths, size, seed)?,
        "random" => plan_random(&lengths, size, seed)?,
        other => bail!("config key plan: unknown batch compilation {other:?}"),
    };
    let mut w = create(&out.join("batches.ndjson"))?;
    for s in plan.summaries() {
        writeln!(w, "{}", serde_json::to_string(&s)?)?;
    }
    w.flush()?;
    println!(
        "{}",
        serde_json::json!({ "batches": plan.len(), "padding": padding_cost(&plan) })
    );
    Ok(())
}

fn write_outcome(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    outcome.model.save(out.join("model.mosm"))?;
    outcome.history.save(out.join("history.csv"))?;
    let summary = serde_json::json!({
        "stop": outcome.stop.to_string(),
        "best_val_loss": outcome.best_val_loss,
        "updates": outcome.history.len(),
        "restarts": outcome.restarts,
    });
    fs::write(out.join("summary.json"), format!("{summary:#}\n"))?;
    println!("{summary}");
    if outcome.stop == StopReason::Diverged {
        return Err(Error::Numeric {
            layer: "training diverged; best earlier checkpoint saved as model.mosm".into(),
        }
        .into());
    }
    Ok(())
}

struct Splits {
    train: Dataset,
    val: Dataset,
    train_features: FeatureStore,
    val_features: FeatureStore,
}

impl Splits {
    fn load(settings: &Settings) -> Result<Self> {
        let train = load(settings, "train_manifest", Split::Train)?;
        let val = load(settings, "val_manifest", Split::Validation)?;
        let train_features = FeatureStore::load(&train)?;
        let val_features = FeatureStore::load(&val)?;
        if train_features.dim() != val_features.dim() {
            bail!(
                "feature dims differ: train {:?}, validation {:?}",
                train_features.dim(),
                val_features.dim()
            );
        }
        Ok(Splits {
            train,
            val,
            train_features,
            val_features,
        })
    }

    fn dim(&self) -> Result<usize> {
        self.train_features.dim().ok_or_else(|| anyhow!("training split is empty"))
    }

    fn sets(&self) -> (LabeledSet<'_>, LabeledSet<'_>) {
        (
            LabeledSet::new(&self.train, &self.train_features),
            LabeledSet::new(&self.val, &self.val_features),
        )
    }
}

fn check_dim(model: &Model, dim: usize, what: &str) -> Result<()> {
    if model.config.input_dim != dim {
        bail!(
            "{what} expects feature dim {}, data has {dim}",
            model.config.input_dim
        );
    }
    Ok(())
}

pub fn train(settings: &Settings, out: &Path) -> Result<()> {
    let run = settings.run_config()?;
    let head: Head = settings.get("head")?;
    let data = Splits::load(settings)?;
    let (train_set, val_set) = data.sets();
    let outcome = match head {
        Head::Regression => {
            let cfg = settings.model_config(data.dim()?)?;
            let model = Model::init(cfg, run.seed)?;
            info!("regression model with {} parameters", model.params.num_params());
            train_regression(model, train_set, val_set, &run)?
        }
        Head::Classification => {
            let source = Model::load(settings.path("init_checkpoint")?)?;
            if source.config.head != Head::Regression {
                bail!("init_checkpoint must be a regression model");
            }
            check_dim(&source, data.dim()?, "init_checkpoint")?;
            let phases = settings.classification_phases(&run)?;
            train_classification(&source, train_set, val_set, &phases, &run)?
        }
    };
    write_outcome(out, &outcome)
}

pub fn finetune_cmd(settings: &Settings, out: &Path) -> Result<()> {
    let run = settings.run_config()?;
    let model = Model::load(settings.path("checkpoint")?)?;
    let data = Splits::load(settings)?;
    check_dim(&model, data.dim()?, "checkpoint")?;
    let (train_set, val_set) = data.sets();
    let spec = settings.finetune_phase(&run)?;
    let outcome = finetune(model, train_set, val_set, &spec, &run)?;
    write_outcome(out, &outcome)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn predict_cmd(settings: &Settings, out: &Path) -> Result<()> {
    let split: Split = settings.get("split")?;
    let d = load(settings, "manifest", split)?;
    let features = FeatureStore::load(&d)?;
    let set = LabeledSet::new(&d, &features);
    let eval_batch: usize = settings.get("eval_batch")?;
    let post = settings.post_config(d.resolution)?;

    let run_model = |key: &str, head: Head| -> Result<Option<Vec<Vec<f64>>>> {
        let Some(path) = settings.opt::<PathBuf>(key)? else {
            return Ok(None);
        };
        let model = Model::load(&path)?;
        if model.config.head != head {
            bail!("{key} holds a {} model, expected {head}", model.config.head);
        }
        if let Some(dim) = features.dim() {
            check_dim(&model, dim, key)?;
        }
        Ok(Some(predict(&model, &set, eval_batch)?))
    };
    let reg = run_model("reg_checkpoint", Head::Regression)?;
    let cls = run_model("cls_checkpoint", Head::Classification)?;
    if reg.is_none() && cls.is_none() {
        bail!("predict needs reg_checkpoint and/or cls_checkpoint");
    }

    let mut w = create(&out.join("predictions.csv"))?;
    writeln!(w, "utterance_id,system_id,raw_regression,raw_classification,final")?;
    for (i, u) in d.utterances.iter().enumerate() {
        let r = reg.as_ref().map(|p| p[i][0]);
        let probs = cls.as_ref().map(|p| p[i].as_slice());
        let c = probs.map(|p| decode_classification(p, post.decode)).transpose()?;
        let fin = pipeline(r, probs, &post)?;
        writeln!(w, "{},{},{},{},{fin}", u.id, u.system_id, fmt_opt(r), fmt_opt(c))?;
    }
    w.flush()?;
    println!("{}", serde_json::json!({ "predictions": d.len() }));
    Ok(())
}

fn read_predictions(path: &Path, column: &str) -> Result<HashMap<String, f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{} has no column {name:?}", path.display()))
    };
    let (id_col, val_col) = (find("utterance_id")?, find(column)?);
    let mut preds = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: f64 = rec[val_col]
            .trim()
            .parse()
            .map_err(|_| anyhow!("{} row {}: bad value {:?}", path.display(), i + 2, &rec[val_col]))?;
        preds.insert(rec[id_col].to_string(), v);
    }
    Ok(preds)
}

pub fn evaluate_cmd(settings: &Settings, out: &Path) -> Result<()> {
    let split: Split = settings.get("split")?;
    let d = load(settings, "manifest", split)?;
    let preds = read_predictions(&settings.path("predictions")?, settings.raw("prediction_column"))?;
    let tau: TauVariant = settings.get("tau")?;
    let report = evaluate(&preds, &d, tau)?;
    let mut w = create(&out.join("metrics.csv"))?;
    writeln!(w, "level,metric,value")?;
    for (level, metric, v) in report.rows() {
        let v = if v.is_nan() { "undefined".to_string() } else { v.to_string() };
        writeln!(w, "{level},{metric},{v}")?;
    }
    w.flush()?;
    print!("{report}");
    Ok(())
}
