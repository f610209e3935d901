//! CSV files: condition vectors, dataset splits and the prototype store.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! file reloads to the exact same bits.

use std::collections::BTreeMap;
use std::path::Path;

use fscil_core::diffusion::ImageSample;
use fscil_core::embedding::{ConditionSource, ConditionTable, ConditionVec, FeatureVec};
use fscil_core::prototypes::{PrototypeRecord, PrototypeStore};
use fscil_core::protocol::Dataset;
use fscil_core::ClassId;

use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CONDITIONS_FILE: &str = "conditions.csv";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn vector_header(prefix: &str, dim: usize) -> impl Iterator<Item = String> + '_ {
    (0..dim).map(move |i| format!("{prefix}{i}"))
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str, text: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("line {line}: bad {field} value {text:?}")))
}

/// Writes `class_id,v0,...` rows. Used for conditions and dataset splits.
fn write_rows<'a>(path: &Path, dim: usize, rows: impl IntoIterator<Item = (ClassId, &'a [f64])>) -> Result<usize> {
    let mut w = writer(path)?;
    let header: Vec<String> = std::iter::once("class_id".to_string()).chain(vector_header("v", dim)).collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut count = 0;
    for (class, values) in rows {
        let record: Vec<String> = std::iter::once(class.to_string()).chain(values.iter().map(|v| fmt(*v))).collect();
        w.write_record(&record).map_err(|e| csv_err(path, e))?;
        count += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(count)
}

type Row = (ClassId, Vec<f64>);

/// Reads `class_id,v0,...` rows; every row must match the header width.
fn read_rows(path: &Path) -> Result<(usize, Vec<Row>)> {
    let mut r = reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.get(0) != Some("class_id") {
        return Err(Error::format(path, "first column must be class_id"));
    }
    let dim = header.len() - 1;
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("v{i}") {
            return Err(Error::format(path, format!("column {} should be v{i}, found {name:?}", i + 1)));
        }
    }
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = n + 2;
        let class = parse(path, line, "class_id", &rec[0])?;
        let values = rec
            .iter()
            .skip(1)
            .map(|f| parse::<f64>(path, line, "vector", f))
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("line {line}: non-finite value")));
        }
        rows.push((class, values));
    }
    Ok((dim, rows))
}

pub fn save_conditions(path: &Path, table: &ConditionTable) -> Result<usize> {
    write_rows(path, table.dim(), table.iter().map(|c| (c.class_id, c.values.as_slice())))
}

pub fn load_conditions(path: &Path) -> Result<ConditionTable> {
    let (_, rows) = read_rows(path)?;
    ConditionTable::new(rows.into_iter().map(|(class_id, values)| ConditionVec {
        class_id,
        values,
        source: ConditionSource::File,
    }))
    .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `train.csv`, `eval.csv` and `conditions.csv` into `dir`. Returns
/// the row counts in that order.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<[usize; 3]> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train = write_rows(
        &dir.join(TRAIN_FILE),
        dataset.sample_dim,
        dataset
            .train
            .iter()
            .flat_map(|(c, samples)| samples.iter().map(move |s| (*c, s.values.as_slice()))),
    )?;
    let eval = write_rows(
        &dir.join(EVAL_FILE),
        dataset.sample_dim,
        dataset.eval.iter().map(|(s, c)| (*c, s.values.as_slice())),
    )?;
    let conditions = save_conditions(&dir.join(CONDITIONS_FILE), &dataset.conditions)?;
    Ok([train, eval, conditions])
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let train_path = dir.join(TRAIN_FILE);
    let eval_path = dir.join(EVAL_FILE);
    let (dim, train_rows) = read_rows(&train_path)?;
    let (eval_dim, eval_rows) = read_rows(&eval_path)?;
    if eval_dim != dim {
        return Err(Error::format(&eval_path, format!("has {eval_dim} columns of data, {TRAIN_FILE} has {dim}")));
    }
    let mut train: BTreeMap<ClassId, Vec<ImageSample>> = BTreeMap::new();
    for (c, v) in train_rows {
        train.entry(c).or_default().push(ImageSample::clean(v));
    }
    Ok(Dataset {
        sample_dim: dim,
        conditions: load_conditions(&dir.join(CONDITIONS_FILE))?,
        train,
        eval: eval_rows.into_iter().map(|(c, v)| (ImageSample::clean(v), c)).collect(),
    })
}

const STORE_FIXED: [&str; 5] = ["class_id", "session_created", "alpha", "n_gen", "n_real"];

/// Prototype store: the five fixed columns, then `gen_i`, `real_i`, `fused_i`
/// for each feature coordinate. Absent estimates are written as empty fields.
pub fn save_prototypes(path: &Path, store: &PrototypeStore) -> Result<()> {
    let dim = store.records().next().map_or(0, |r| r.fused_proto.dim());
    let mut w = writer(path)?;
    let header: Vec<String> = STORE_FIXED
        .iter()
        .map(|s| s.to_string())
        .chain(vector_header("gen", dim))
        .chain(vector_header("real", dim))
        .chain(vector_header("fused", dim))
        .collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in store.records() {
        let optional = |f: &Option<FeatureVec>| -> Vec<String> {
            match f {
                Some(f) => f.0.iter().map(|v| fmt(*v)).collect(),
                None => vec![String::new(); dim],
            }
        };
        let mut record = vec![
            r.class_id.to_string(),
            r.session_created.to_string(),
            fmt(r.alpha),
            r.n_generated.to_string(),
            r.n_real.to_string(),
        ];
        record.extend(optional(&r.gen_proto));
        record.extend(optional(&r.real_proto));
        record.extend(r.fused_proto.0.iter().map(|v| fmt(*v)));
        w.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reloads a prototype store, re-inserting records in class order so the
/// write-once checksums are taken afresh.
pub fn load_prototypes(path: &Path) -> Result<PrototypeStore> {
    let mut r = reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < STORE_FIXED.len() || !header.iter().zip(STORE_FIXED).all(|(a, b)| a == b) {
        return Err(Error::format(path, format!("header must start with {}", STORE_FIXED.join(","))));
    }
    let rest = header.len() - STORE_FIXED.len();
    if !rest.is_multiple_of(3) {
        return Err(Error::format(path, "vector columns are not three equal groups"));
    }
    let dim = rest / 3;
    let mut store = PrototypeStore::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = n + 2;
        let group = |k: usize, name: &str| -> Result<Option<FeatureVec>> {
            let fields: Vec<&str> = (0..dim).map(|i| &rec[STORE_FIXED.len() + k * dim + i]).collect();
            if fields.iter().all(|f| f.is_empty()) {
                return Ok(None);
            }
            let values = fields
                .iter()
                .map(|f| parse::<f64>(path, line, name, f))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(FeatureVec(values)))
        };
        let record = PrototypeRecord {
            class_id: parse(path, line, "class_id", &rec[0])?,
            session_created: parse(path, line, "session_created", &rec[1])?,
            alpha: parse(path, line, "alpha", &rec[2])?,
            n_generated: parse(path, line, "n_gen", &rec[3])?,
            n_real: parse(path, line, "n_real", &rec[4])?,
            gen_proto: group(0, "gen")?,
            real_proto: group(1, "real")?,
            fused_proto: group(2, "fused")?
                .ok_or_else(|| Error::format(path, format!("line {line}: fused vector is required")))?,
        };
        store.insert(record).map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(class_id: ClassId, gen: Option<Vec<f64>>, real: Option<Vec<f64>>, fused: Vec<f64>) -> PrototypeRecord {
        PrototypeRecord {
            class_id,
            session_created: class_id as usize / 2,
            n_generated: gen.as_ref().map_or(0, |_| 64),
            n_real: real.as_ref().map_or(0, |_| 5),
            gen_proto: gen.map(FeatureVec),
            real_proto: real.map(FeatureVec),
            fused_proto: FeatureVec(fused),
            alpha: 0.5,
        }
    }

    #[test]
    fn prototype_store_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prototypes.csv");
        let mut store = PrototypeStore::new();
        store
            .insert(record(0, Some(vec![0.1, 1.0 / 3.0]), Some(vec![-2.5e-17, 7.0]), vec![0.3, 1e300]))
            .unwrap();
        store.insert(record(3, None, Some(vec![1.0, 2.0]), vec![1.0, 2.0])).unwrap();
        store.insert(record(4, Some(vec![f64::MIN_POSITIVE, -0.0]), None, vec![f64::MIN_POSITIVE, -0.0])).unwrap();
        save_prototypes(&path, &store).unwrap();
        let back = load_prototypes(&path).unwrap();
        assert_eq!(back.insertion_checksums(), store.insertion_checksums());
        assert_eq!(back, store);
    }

    #[test]
    fn conditions_round_trip_and_reject_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let table = ConditionTable::new((0..3).map(|c| ConditionVec {
            class_id: c,
            values: vec![c as f64 * 0.1, 0.7],
            source: ConditionSource::File,
        }))
        .unwrap();
        assert_eq!(save_conditions(&path, &table).unwrap(), 3);
        assert_eq!(load_conditions(&path).unwrap(), table);

        std::fs::write(&path, "class_id,v0\n1,0.5\n1,0.25\n").unwrap();
        assert!(load_conditions(&path).is_err());
        std::fs::write(&path, "class_id,v0\n1,abc\n").unwrap();
        let err = load_conditions(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
