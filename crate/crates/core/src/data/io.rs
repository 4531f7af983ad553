//! JSON-lines annotations and the binary feature container.
//!
//! Container layout (all integers little-endian `u32`, floats `f64` LE):
//!
//! ```text
//! "EANT" version clip_count global_dim num_locals local_dim
//! per clip:
//!   id_len id_bytes num_frames
//!   global  [num_frames * global_dim] f64
//!   locals  [num_frames * num_locals * local_dim] f64
//!   mask    [num_frames * num_locals] u8 (0 or 1)
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{
    Clip, ClipAnnotation, DataError, Dataset, DatasetMeta, FeatureDims, FeatureSequence, Result,
    Splits,
};
use crate::tensor::Tensor;

pub const FEATURES_MAGIC: &[u8; 4] = b"EANT";
pub const FEATURES_VERSION: u32 = 1;
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FEATURES_FILE: &str = "features.bin";
pub const META_FILE: &str = "meta.json";
const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

pub fn write_annotations(path: &Path, annotations: &[ClipAnnotation]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for a in annotations {
        let line = serde_json::to_string(a).expect("annotation serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads one annotation per non-blank line, validating each record.
pub fn read_annotations(path: &Path) -> Result<Vec<ClipAnnotation>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: ClipAnnotation = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            path: path.to_path_buf(),
            location: format!("line {}", i + 1),
            reason: e.to_string(),
        })?;
        a.validate()?;
        out.push(a);
    }
    Ok(out)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("value fits in u32");
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn write_features(path: &Path, dims: FeatureDims, features: &[FeatureSequence]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURES_MAGIC);
    buf.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    put_u32(&mut buf, features.len());
    put_u32(&mut buf, dims.global_dim);
    put_u32(&mut buf, dims.num_locals);
    put_u32(&mut buf, dims.local_dim);
    for f in features {
        put_u32(&mut buf, f.clip_id.len());
        buf.extend_from_slice(f.clip_id.as_bytes());
        put_u32(&mut buf, f.num_frames());
        for v in f.global.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for l in &f.locals {
            for v in l.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for m in &f.mask {
            buf.extend(m.iter().map(|&p| u8::from(p)));
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
    clip: Option<usize>,
}

impl<'a> Cursor<'a> {
    fn malformed(&self, reason: impl Into<String>) -> DataError {
        let location = match self.clip {
            Some(c) => format!("clip #{c}, byte {}", self.pos),
            None => format!("header, byte {}", self.pos),
        };
        DataError::Malformed {
            path: self.path.to_path_buf(),
            location,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.malformed(format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| self.malformed("length overflow"))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Reads a feature container, returning its dimensions and sequences.
pub fn read_features(path: &Path) -> Result<(FeatureDims, Vec<FeatureSequence>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
        clip: None,
    };
    if cur.take(4)? != FEATURES_MAGIC {
        return Err(cur.malformed("bad magic, expected EANT"));
    }
    let version = cur.u32()? as u32;
    if version != FEATURES_VERSION {
        return Err(cur.malformed(format!("unsupported version {version}")));
    }
    let count = cur.u32()?;
    let dims = FeatureDims {
        global_dim: cur.u32()?,
        num_locals: cur.u32()?,
        local_dim: cur.u32()?,
    };
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for c in 0..count {
        cur.clip = Some(c);
        let id_len = cur.u32()?;
        let clip_id = String::from_utf8(cur.take(id_len)?.to_vec())
            .map_err(|_| cur.malformed("clip_id is not UTF-8"))?;
        let frames = cur.u32()?;
        let global = Tensor::new(frames, dims.global_dim, cur.f64s(frames * dims.global_dim)?)
            .map_err(|e| cur.malformed(e.to_string()))?;
        let per_frame = dims.num_locals * dims.local_dim;
        let all = cur.f64s(frames * per_frame)?;
        let locals = all
            .chunks(per_frame.max(1))
            .take(frames)
            .map(|c| {
                Tensor::new(dims.num_locals, dims.local_dim, c[..per_frame].to_vec())
                    .expect("chunk matches dims")
            })
            .collect::<Vec<_>>();
        let locals = if per_frame == 0 {
            vec![Tensor::zeros(dims.num_locals, dims.local_dim); frames]
        } else {
            locals
        };
        let raw = cur.take(frames * dims.num_locals)?;
        let mut mask = Vec::with_capacity(frames);
        for chunk in raw.chunks(dims.num_locals.max(1)).take(frames) {
            let mut row = Vec::with_capacity(dims.num_locals);
            for &b in chunk.iter().take(dims.num_locals) {
                match b {
                    0 => row.push(false),
                    1 => row.push(true),
                    other => return Err(cur.malformed(format!("mask byte {other} is not 0/1"))),
                }
            }
            mask.push(row);
        }
        if dims.num_locals == 0 {
            mask = vec![Vec::new(); frames];
        }
        out.push(FeatureSequence {
            clip_id,
            global,
            locals,
            mask,
        });
    }
    cur.clip = None;
    if cur.pos != bytes.len() {
        return Err(cur.malformed("trailing bytes after last clip"));
    }
    Ok((dims, out))
}

/// Writes `annotations.jsonl` and `features.bin` into `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_annotations(&dir.join(ANNOTATIONS_FILE), &dataset.annotations())?;
    let features: Vec<FeatureSequence> = dataset.clips.iter().map(|c| c.features.clone()).collect();
    write_features(&dir.join(FEATURES_FILE), dataset.dims, &features)
}

/// Loads and validates a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let feat_path = dir.join(FEATURES_FILE);
    let annotations = read_annotations(&ann_path)?;
    let (dims, features) = read_features(&feat_path)?;
    if annotations.len() != features.len() {
        return Err(DataError::Malformed {
            path: feat_path,
            location: "header".into(),
            reason: format!(
                "{} feature records for {} annotations",
                features.len(),
                annotations.len()
            ),
        });
    }
    let dataset = Dataset {
        dims,
        clips: annotations
            .into_iter()
            .zip(features)
            .map(|(annotation, features)| Clip {
                annotation,
                features,
            })
            .collect(),
    };
    dataset.validate()?;
    Ok(dataset)
}

fn split_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

/// Writes `meta.json` plus `train/`, `val/` and `test/` dataset directories.
pub fn save_splits(root: &Path, meta: &DatasetMeta, splits: &Splits) -> Result<()> {
    meta.validate()?;
    fs::create_dir_all(root).map_err(io_err(root))?;
    let meta_path = root.join(META_FILE);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&meta_path, json + "\n").map_err(io_err(&meta_path))?;
    for (name, ds) in SPLIT_NAMES
        .iter()
        .zip([&splits.train, &splits.val, &splits.test])
    {
        save_dataset(&split_dir(root, name), ds)?;
    }
    Ok(())
}

/// Loads a directory written by [`save_splits`].
pub fn load_splits(root: &Path) -> Result<(DatasetMeta, Splits)> {
    let meta_path = root.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| DataError::Malformed {
        path: meta_path.clone(),
        location: format!("line {}", e.line()),
        reason: e.to_string(),
    })?;
    meta.validate()?;
    let train = load_dataset(&split_dir(root, "train"))?;
    let val = load_dataset(&split_dir(root, "val"))?;
    let test = load_dataset(&split_dir(root, "test"))?;
    for (name, ds, expected) in [
        ("train", &train, meta.train_size),
        ("val", &val, meta.val_size),
        ("test", &test, meta.test_size),
    ] {
        if ds.len() != expected {
            return Err(DataError::Malformed {
                path: meta_path.clone(),
                location: format!("{name}_size"),
                reason: format!("meta says {expected} clips, split has {}", ds.len()),
            });
        }
    }
    Ok((meta, Splits { train, val, test }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Label, SyntheticConfig};

    fn tiny() -> Dataset {
        let mut ds = generate_synthetic(&SyntheticConfig {
            num_clips: 6,
            num_frames: 5,
            precursor_onset_frames: 2,
            num_classes: 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        // exercise masking
        ds.clips[0].features.mask[1][2] = false;
        for v in ds.clips[0].features.locals[1].row_mut(2) {
            *v = 0.0;
        }
        ds
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn records_come_back_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        ds.clips.truncate(3);
        ds.clips.reverse();
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let ids: Vec<_> = loaded
            .clips
            .iter()
            .map(|c| c.annotation.clip_id.clone())
            .collect();
        assert_eq!(ids, vec!["clip_00002", "clip_00001", "clip_00000"]);
    }

    #[test]
    fn positive_without_accident_frame_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(ANNOTATIONS_FILE);
        fs::write(
            &path,
            "{\"clip_id\":\"a\",\"label\":\"positive\",\"num_frames\":4,\"frame_rate_f\":20.0}\n",
        )
        .unwrap();
        match read_annotations(&path) {
            Err(DataError::Invariant { clip_id, .. }) => assert_eq!(clip_id, "a"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distinct_errors_for_missing_malformed_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::MissingFile(_))
        ));
        let path = dir.path().join(ANNOTATIONS_FILE);
        fs::write(&path, "{\"clip_id\":\"a\",\"label\":\"negative\",\"num_frames\":4,\"frame_rate_f\":20.0}\nnot json\n").unwrap();
        match read_annotations(&path) {
            Err(DataError::Malformed { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "{\"clip_id\":\"a\",\"label\":\"negative\",\"num_frames\":4,\"frame_rate_f\":20.0,\"extra\":1}\n").unwrap();
        assert!(matches!(
            read_annotations(&path),
            Err(DataError::Malformed { .. })
        ));
    }

    #[test]
    fn container_rejects_bad_magic_truncation_and_bad_mask() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        let path = dir.path().join(FEATURES_FILE);
        let feats: Vec<_> = ds.clips.iter().map(|c| c.features.clone()).collect();
        write_features(&path, ds.dims, &feats).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(DataError::Malformed { .. })
        ));

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(DataError::Malformed { .. })
        ));

        let mut bad = good.clone();
        let last = bad.len() - 1;
        bad[last] = 7;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(DataError::Malformed { .. })
        ));
    }

    #[test]
    fn loader_rejects_cross_record_violations() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        ds.clips[1].annotation.num_frames = 4;
        save_dataset(dir.path(), &ds).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::Invariant { .. })
        ));

        let mut ds = tiny();
        ds.clips[0].features.locals[0].set(0, 0, 1.0);
        ds.clips[0].features.mask[0][0] = false;
        save_dataset(dir.path(), &ds).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::Invariant { .. })
        ));

        let mut ds = tiny();
        let pos: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.clips[i].annotation.label == Label::Positive)
            .collect();
        ds.clips[pos[0]].annotation.risk_class = None;
        save_dataset(dir.path(), &ds).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::Invariant { .. })
        ));
    }
}
