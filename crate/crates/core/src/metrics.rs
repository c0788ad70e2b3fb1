//! Metrics rows and their CSV encoding.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the metrics CSV. Bump [`METRICS_SCHEMA_VERSION`] when it
/// changes.
pub const METRICS_HEADER: [&str; 11] = [
    "iter",
    "stage",
    "loss_total",
    "loss_u",
    "loss_v",
    "mean_beta",
    "mean_alpha",
    "s",
    "w2_1nfe",
    "w2_2nfe",
    "w2_euler32",
];

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One row of the metrics stream. Fields not measured at a given row are
/// `None` and serialize as empty cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub stage: String,
    pub loss_total: Option<f64>,
    pub loss_u: Option<f64>,
    pub loss_v: Option<f64>,
    pub mean_beta: Option<f64>,
    pub mean_alpha: Option<f64>,
    pub s: Option<f64>,
    pub w2_1nfe: Option<f64>,
    pub w2_2nfe: Option<f64>,
    pub w2_euler32: Option<f64>,
}

impl MetricsRecord {
    pub fn has_eval(&self) -> bool {
        self.w2_1nfe.is_some() || self.w2_2nfe.is_some() || self.w2_euler32.is_some()
    }

    /// Copies the W₂ columns of `eval` into `self`.
    pub fn merge_eval(&mut self, eval: &MetricsRecord) {
        self.w2_1nfe = eval.w2_1nfe;
        self.w2_2nfe = eval.w2_2nfe;
        self.w2_euler32 = eval.w2_euler32;
    }
}

/// Appends records to a CSV file, writing the header only when the file is
/// new or empty.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if empty {
            inner
                .write_record(METRICS_HEADER)
                .map_err(|e| csv_error(path, e))?;
        }
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.inner.serialize(rec).map_err(|e| csv_error(&self.path, e))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::decode(path.display().to_string(), format!("{other:?}")),
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::decode(
            path.display().to_string(),
            format!("unexpected metrics header {:?}", headers.iter().collect::<Vec<_>>()),
        ));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Writes records to an in-memory CSV string (header included).
pub fn to_csv_string(records: &[MetricsRecord]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory write");
    for r in records {
        w.serialize(r).expect("in-memory write");
    }
    let mut bytes = w.into_inner().expect("in-memory flush");
    bytes.flush().ok();
    String::from_utf8(bytes).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_struct_order() {
        let rec = MetricsRecord {
            iter: 7,
            stage: "joint".into(),
            loss_total: Some(0.5),
            ..Default::default()
        };
        let s = to_csv_string(&[rec]);
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "7,joint,0.5,,,,,,,,");
    }

    #[test]
    fn file_round_trip_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let a = MetricsRecord {
            iter: 1,
            stage: "v".into(),
            w2_1nfe: Some(1.25),
            ..Default::default()
        };
        MetricsWriter::open(&p).unwrap().write(&a).unwrap();
        let b = MetricsRecord { iter: 2, ..a.clone() };
        MetricsWriter::open(&p).unwrap().write(&b).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), vec![a, b]);
    }
}
