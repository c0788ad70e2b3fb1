//! Sample dumps for external plotting: CSV `x0,x1,...[,label]` and a compact
//! binary form.
//!
//! Binary layout, little-endian: magic `MFSD`, `u32` version, `u64` rows,
//! `u32` columns, `u8` label flag, then `rows·columns` `f64` values in row
//! order, then `rows` `u32` labels when the flag is 1.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor_ad::Tensor;

pub const DUMP_MAGIC: &[u8; 4] = b"MFSD";
pub const DUMP_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleDump {
    pub points: Tensor,
    pub labels: Option<Vec<u32>>,
}

impl SampleDump {
    pub fn new(points: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        if points.rank() != 2 {
            return Err(Error::config(format!("sample dump needs a matrix, got shape {:?}", points.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != points.rows() {
                return Err(Error::config(format!("{} labels for {} samples", l.len(), points.rows())));
            }
        }
        Ok(SampleDump { points, labels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = (self.points.rows(), self.points.cols());
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * d + 4 * n);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.push(self.labels.is_some() as u8);
        for x in self.points.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for l in self.labels.iter().flatten() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let bad = |m: String| Error::decode(context, m);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len())));
        }
        if &bytes[..4] != DUMP_MAGIC {
            return Err(bad("not a sample dump (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != DUMP_VERSION {
            return Err(bad(format!("sample dump version {version} is not supported")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let d = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as u64;
        let flag = bytes[20];
        if flag > 1 {
            return Err(bad(format!("label flag {flag} is not 0 or 1")));
        }
        if d == 0 {
            return Err(bad("zero columns".into()));
        }
        let body = (bytes.len() - HEADER_LEN) as u64;
        let per_row = 8 * d + 4 * flag as u64;
        let expect = n.checked_mul(per_row).ok_or_else(|| bad("row count overflows".into()))?;
        if expect != body {
            return Err(bad(format!("header promises {expect} payload bytes, found {body}")));
        }
        let (n, d) = (n as usize, d as usize);
        let mut rest = &bytes[HEADER_LEN..];
        let values: Vec<f64> = rest[..8 * n * d]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rest = &rest[8 * n * d..];
        let labels = (flag == 1).then(|| {
            rest.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        });
        let points = Tensor::matrix(n, d, values).map_err(|e| bad(e.to_string()))?;
        Ok(SampleDump { points, labels })
    }

    pub fn to_csv(&self) -> String {
        let d = self.points.cols();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).expect("in-memory csv write");
        for i in 0..self.points.rows() {
            let mut rec: Vec<String> = self.points.row(i).iter().map(|x| x.to_string()).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    /// Writes `<stem>.csv` and `<stem>.bin`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let csv = stem.with_extension("csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let bin = stem.with_extension("bin");
        fs::write(&bin, self.to_bytes()).map_err(|e| Error::io(&bin, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let pts = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 3.25, f64::MIN_POSITIVE, -0.0]).unwrap();
        for labels in [None, Some(vec![0, 7, 2])] {
            let dump = SampleDump::new(pts.clone(), labels).unwrap();
            let back = SampleDump::from_bytes(&dump.to_bytes(), "mem").unwrap();
            assert_eq!(back.labels, dump.labels);
            let same = back.points.data().iter().zip(dump.points.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let dump = SampleDump::new(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), Some(vec![1, 0])).unwrap();
        assert_eq!(dump.to_csv(), "x0,x1,label\n1,2,1\n3,4,0\n");
    }

    #[test]
    fn rejects_truncation_and_bad_headers() {
        let dump = SampleDump::new(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap(), None).unwrap();
        let bytes = dump.to_bytes();
        for cut in 0..bytes.len() {
            assert!(matches!(SampleDump::from_bytes(&bytes[..cut], "mem"), Err(Error::Decode { .. })));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SampleDump::from_bytes(&bad, "mem").is_err());
        let mut huge = bytes;
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(SampleDump::from_bytes(&huge, "mem").is_err());
    }
}
