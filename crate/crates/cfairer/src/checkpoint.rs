//! Versioned checkpoint container shared by the recommender, the graph
//! module, and the explanation policy: a header of key=value pairs plus
//! named row-major matrices. Text and binary on-disk variants.
//!
//! Text layout:
//! ```text
//! CFAIR-CKPT v1 text
//! key=value            (zero or more)
//! tensor <name> <rows> <cols>
//! <row-major entries, one row per line, space-separated>
//! ```
//!
//! Binary layout: the magic line `CFAIR-CKPT v1 binary\n`, the same header
//! block terminated by a blank line, then for each tensor a
//! `tensor <name> <rows> <cols>\n` line followed by `rows*cols` f64 values
//! in little-endian byte order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;

const MAGIC_TEXT: &str = "CFAIR-CKPT v1 text";
const MAGIC_BINARY: &str = "CFAIR-CKPT v1 binary";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing header key {key}")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("unparseable header value for {key}")))
    }

    pub fn push_tensor(&mut self, name: &str, m: Mat) {
        self.tensors.push((name.to_string(), m));
    }

    pub fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{MAGIC_TEXT}")?;
        for (k, v) in &self.header {
            writeln!(f, "{k}={v}")?;
        }
        writeln!(f)?;
        for (name, m) in &self.tensors {
            writeln!(f, "tensor {name} {} {}", m.rows(), m.cols())?;
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
                writeln!(f, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{MAGIC_BINARY}")?;
        for (k, v) in &self.header {
            writeln!(f, "{k}={v}")?;
        }
        writeln!(f)?;
        for (name, m) in &self.tensors {
            writeln!(f, "tensor {name} {} {}", m.rows(), m.cols())?;
            for v in m.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Dispatch on the magic line.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut magic = String::new();
        reader.read_line(&mut magic)?;
        match magic.trim_end() {
            MAGIC_TEXT => Self::load_text_body(reader),
            MAGIC_BINARY => Self::load_binary_body(reader),
            other => Err(Error::Checkpoint(format!("bad magic line {other:?}"))),
        }
    }

    fn read_header<R: BufRead>(reader: &mut R) -> Result<BTreeMap<String, String>> {
        let mut header = BTreeMap::new();
        loop {
            let mut line = String::new();
            let n = reader.read_line(&mut line)?;
            if n == 0 || line.trim_end().is_empty() {
                break;
            }
            let line = line.trim_end();
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        Ok(header)
    }

    fn parse_tensor_line(line: &str) -> Result<(String, usize, usize)> {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::Checkpoint(format!("expected tensor line, got {line:?}")));
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Checkpoint("tensor line missing name".into()))?;
        let rows: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("tensor line missing rows".into()))?;
        let cols: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("tensor line missing cols".into()))?;
        Ok((name.to_string(), rows, cols))
    }

    fn load_text_body<R: BufRead>(mut reader: R) -> Result<Checkpoint> {
        let header = Self::read_header(&mut reader)?;
        let mut tensors = Vec::new();
        let mut line = String::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            let trimmed = line.trim_end();
            if trimmed.is_empty() {
                continue;
            }
            let (name, rows, cols) = Self::parse_tensor_line(trimmed)?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let mut row_line = String::new();
                reader.read_line(&mut row_line)?;
                for tok in row_line.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad float {tok:?}")))?;
                    data.push(v);
                }
            }
            tensors.push((name, Mat::from_vec(rows, cols, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    fn load_binary_body<R: BufRead>(mut reader: R) -> Result<Checkpoint> {
        let header = Self::read_header(&mut reader)?;
        let mut tensors = Vec::new();
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            let trimmed = line.trim_end();
            if trimmed.is_empty() {
                continue;
            }
            let (name, rows, cols) = Self::parse_tensor_line(trimmed)?;
            let mut buf = vec![0u8; rows * cols * 8];
            reader.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Mat::from_vec(rows, cols, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }
}
