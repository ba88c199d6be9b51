//! Per-iteration metrics CSV and the optional localization-IoU log.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "iter,l_proto,l_depth,l_temp,l_total,lr,wd,ema_m";
pub const IOU_HEADER: &str = "iter,mean_best_iou";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub l_proto: f64,
    pub l_depth: f64,
    pub l_temp: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
}

impl MetricsRow {
    /// Shortest round-trip decimal form of every field.
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.l_proto, self.l_depth, self.l_temp, self.l_total, self.lr, self.wd, self.ema_m
        )
    }

    pub fn losses(&self) -> [f64; 4] {
        [self.l_proto, self.l_depth, self.l_temp, self.l_total]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouRow {
    pub iter: u64,
    pub mean_best_iou: f64,
}

fn parse_rows<T: serde::de::DeserializeOwned>(text: &str, header: &str) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let found = reader.headers().map_err(|e| Error::Metrics(e.to_string()))?;
    let found: Vec<&str> = found.iter().collect();
    if found.join(",") != header {
        return Err(Error::Metrics(format!("unexpected header `{}`", found.join(","))));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Metrics(e.to_string())))
        .collect()
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    parse_rows(text, METRICS_HEADER)
}

pub fn parse_iou(text: &str) -> Result<Vec<IouRow>> {
    parse_rows(text, IOU_HEADER)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    parse_metrics(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Append-only CSV writer that flushes after every row.
#[derive(Debug)]
pub struct CsvLog {
    file: File,
    path: std::path::PathBuf,
}

impl CsvLog {
    /// Opens `path` keeping only rows whose `iter` is below `keep_below`,
    /// so a resumed run continues the file where the checkpoint left it.
    pub fn open(path: &Path, header: &str, keep_below: u64) -> Result<Self> {
        let mut kept = String::from(header);
        kept.push('\n');
        if keep_below > 0 {
            if let Ok(text) = fs::read_to_string(path) {
                for line in text.lines().skip(1) {
                    let iter = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
                    if iter.is_some_and(|i| i < keep_below) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}
