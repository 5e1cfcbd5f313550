//! Manifest CSV and `MOSF` feature files.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! b"MOSF" | version: u8 = 1 | frames: u32 | dim: u32 | frames*dim f32, row-major
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSequence, MosLabel, RatingSet, Split, Utterance};
use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MOSF";
pub const FEATURE_VERSION: u8 = 1;
const HEADER_LEN: u64 = 4 + 1 + 4 + 4;

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    utterance_id: String,
    system_id: String,
    ratings: String,
    mean_mos: Option<f64>,
    feature_path: String,
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<(usize, usize)> {
    let fmt = |msg: String| Error::format(path, msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| fmt(format!("reading magic: {e}")))?;
    if &magic != FEATURE_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let version = r.read_u8().map_err(|e| fmt(format!("reading version: {e}")))?;
    if version != FEATURE_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let frames = r
        .read_u32::<LittleEndian>()
        .map_err(|e| fmt(format!("reading frame count: {e}")))? as usize;
    let dim = r
        .read_u32::<LittleEndian>()
        .map_err(|e| fmt(format!("reading dim: {e}")))? as usize;
    if frames == 0 || dim == 0 {
        return Err(fmt(format!("empty shape {frames}x{dim}")));
    }
    Ok((frames, dim))
}

/// Reads only the `(frames, dim)` header of a feature file.
pub fn read_feature_header(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(path, &mut BufReader::new(file))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let (frames, dim) = read_header(path, &mut r)?;
    let expected = HEADER_LEN + 4 * (frames as u64) * (dim as u64);
    if len != expected {
        return Err(Error::format(
            path,
            format!("payload size mismatch: header {frames}x{dim} needs {expected} bytes, file has {len}"),
        ));
    }
    let mut values = vec![0f32; frames * dim];
    r.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|e| Error::format(path, format!("reading payload: {e}")))?;
    FeatureSequence::new(values, frames, dim).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_feature_file(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_u8(FEATURE_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(seq.num_frames() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(seq.dim() as u32).map_err(io)?;
    for &v in seq.frames() {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads the features of one utterance and checks them against the manifest frame count.
pub fn load_features(u: &Utterance) -> Result<FeatureSequence> {
    let seq = read_feature_file(&u.feature_path)?;
    if seq.num_frames() != u.num_frames {
        return Err(Error::format(
            &u.feature_path,
            format!(
                "utterance {:?} expects {} frames, file has {}",
                u.id,
                u.num_frames,
                seq.num_frames()
            ),
        ));
    }
    Ok(seq)
}

fn parse_ratings(field: &str) -> Result<Option<RatingSet>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    let values = field
        .split(';')
        .map(|s| {
            s.trim()
                .parse::<u8>()
                .map_err(|_| Error::invalid(format!("bad rating {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    RatingSet::from_values(&values).map(Some)
}

/// Parses a manifest CSV. Relative feature paths resolve against the manifest's directory, and
/// each referenced feature header is read to fill in the frame count.
pub fn load_manifest(path: impl AsRef<Path>, split: Split, default_resolution: f64) -> Result<Dataset> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;

    let rows = reader
        .deserialize::<ManifestRow>()
        .enumerate()
        .map(|(i, row)| {
            let line = i + 2;
            row.map_err(|e| Error::format(path, format!("row {line}: {e}")))
                .map(|r| (line, r))
        })
        .collect::<Result<Vec<_>>>()?;

    let utterances = rows
        .into_par_iter()
        .map(|(line, row)| {
            let row_err = |msg: String| {
                Error::format(path, format!("row {line} (utterance {:?}): {msg}", row.utterance_id))
            };
            let ratings = parse_ratings(&row.ratings).map_err(|e| row_err(e.to_string()))?;
            let label = match row.mean_mos {
                Some(m) if !(1.0..=5.0).contains(&m) => {
                    return Err(row_err(format!("mean_mos {m} outside [1, 5]")))
                }
                Some(m) => Some(MosLabel { mean: m, std: 0.0 }),
                None => None,
            };
            let feature_path: PathBuf = if Path::new(&row.feature_path).is_absolute() {
                PathBuf::from(&row.feature_path)
            } else {
                base.join(&row.feature_path)
            };
            let (num_frames, _) =
                read_feature_header(&feature_path).map_err(|e| row_err(e.to_string()))?;
            Ok(Utterance {
                id: row.utterance_id,
                system_id: row.system_id,
                ratings,
                label,
                feature_path: feature_path.to_string_lossy().into_owned(),
                num_frames,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Dataset::new(split, utterances, default_resolution)
}

/// Writes a manifest. Feature paths are written as stored on each utterance.
pub fn write_manifest(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for u in utterances {
        let ratings = u
            .ratings
            .as_ref()
            .map(|r| {
                r.ratings()
                    .iter()
                    .map(|v| v.value().to_string())
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .unwrap_or_default();
        w.serialize(ManifestRow {
            utterance_id: u.id.clone(),
            system_id: u.system_id.clone(),
            ratings,
            mean_mos: u.label.map(|l| l.mean),
            feature_path: u.feature_path.clone(),
        })
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// In-memory features keyed by utterance id.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    features: HashMap<String, FeatureSequence>,
    dim: Option<usize>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every utterance's features in parallel; all sequences must share one dimension.
    pub fn load(dataset: &Dataset) -> Result<Self> {
        let loaded = dataset
            .utterances
            .par_iter()
            .map(|u| load_features(u).map(|f| (u.id.clone(), f)))
            .collect::<Result<Vec<_>>>()?;
        let mut store = FeatureStore::new();
        for (id, seq) in loaded {
            store.insert(id, seq)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: String, seq: FeatureSequence) -> Result<()> {
        match self.dim {
            Some(d) if d != seq.dim() => {
                return Err(Error::invalid(format!(
                    "utterance {id:?} has feature dim {}, dataset uses {d}",
                    seq.dim()
                )))
            }
            _ => self.dim = Some(seq.dim()),
        }
        self.features.insert(id, seq);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&FeatureSequence> {
        self.features
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no features loaded for {id:?}")))
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn seq(t: usize, d: usize) -> FeatureSequence {
        FeatureSequence::new((0..t * d).map(|i| i as f32 * 0.5).collect(), t, d).unwrap()
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mosf");
        let s = seq(4, 2);
        write_feature_file(&p, &s).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..5], b"MOSF\x01");
        assert_eq!(&bytes[5..13], &[4, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 13 + 8 * 4);
        let back = read_feature_file(&p).unwrap();
        assert_eq!(back.num_frames(), 4);
        assert_eq!(back.dim(), 2);
        assert_eq!(back, s);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mosf");
        write_feature_file(&p, &seq(4, 2)).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        match read_feature_file(&p) {
            Err(Error::Format { path, .. }) => assert_eq!(path, p),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mosf");
        write_feature_file(&p, &seq(1, 2)).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Format { .. })));

        bytes[0] = b'M';
        bytes[13..17].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_loads_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_feature_file(dir.path().join("u1.mosf"), &seq(3, 2)).unwrap();
        write_feature_file(dir.path().join("u2.mosf"), &seq(5, 2)).unwrap();
        let manifest = dir.path().join("train.csv");
        fs::write(
            &manifest,
            "utterance_id,system_id,ratings,mean_mos,feature_path\n\
             u1,sysA,3;3;3;3;4;4;4;4,,u1.mosf\n\
             u2,sysB,,2.5,u2.mosf\n",
        )
        .unwrap();
        let d = load_manifest(&manifest, Split::Train, 0.125).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.utterances[0].num_frames, 3);
        assert_eq!(d.utterances[0].mos().unwrap().mean, 3.5);
        assert_eq!(d.utterances[1].mos().unwrap().mean, 2.5);
        let store = FeatureStore::load(&d).unwrap();
        assert_eq!(store.get("u2").unwrap().num_frames(), 5);
        assert_eq!(store.dim(), Some(2));
    }

    #[test]
    fn missing_feature_file_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.csv");
        fs::write(
            &manifest,
            "utterance_id,system_id,ratings,mean_mos,feature_path\nghost,s,3,,nope.mosf\n",
        )
        .unwrap();
        let err = load_manifest(&manifest, Split::Test, 0.125).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{msg}");
        assert!(msg.contains("ghost"), "{msg}");
    }

    #[test]
    fn mixed_dims_rejected_by_store() {
        let mut store = FeatureStore::new();
        store.insert("a".into(), seq(2, 2)).unwrap();
        assert!(store.insert("b".into(), seq(2, 3)).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_feature_file(dir.path().join("a.mosf"), &seq(2, 2)).unwrap();
        let utts = vec![Utterance {
            id: "a".into(),
            system_id: "s".into(),
            ratings: Some(RatingSet::from_values(&[1, 5]).unwrap()),
            label: None,
            feature_path: "a.mosf".into(),
            num_frames: 2,
        }];
        let m = dir.path().join("m.csv");
        write_manifest(&m, &utts).unwrap();
        let d = load_manifest(&m, Split::Train, 0.125).unwrap();
        assert_eq!(d.utterances[0].ratings, utts[0].ratings);
        assert_eq!(d.resolution, 0.5);
    }
}
