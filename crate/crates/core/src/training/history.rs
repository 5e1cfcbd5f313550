use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::model::LayerId;
use crate::{Error, Result};

/// One optimizer update. `val_loss` is set on the last update of each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub phase: String,
    pub epoch: usize,
    /// Update index within the phase; drives the learning-rate schedule.
    pub iteration: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub frozen: BTreeSet<LayerId>,
    /// Layers whose parameters changed in this update.
    pub updated: BTreeSet<LayerId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

pub(crate) fn join_layers(set: &BTreeSet<LayerId>) -> String {
    set.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

impl History {
    pub const HEADER: &'static str =
        "phase,epoch,iteration,lr,batch_size,accumulation,train_loss,val_loss,frozen,updated";

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn extend(&mut self, other: History) {
        self.rows.extend(other.rows);
    }

    /// Floats use Rust's shortest round-trip formatting, so equal histories give equal bytes.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.phase,
                r.epoch,
                r.iteration,
                r.lr,
                r.batch_size,
                r.accumulation,
                r.train_loss,
                val,
                join_layers(&r.frozen),
                join_layers(&r.updated)
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}
