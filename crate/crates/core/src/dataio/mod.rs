//! Recording ingestion, canonical on-disk format and preprocessing
//! (power-line band-stop, windowing, amplitude normalisation, per-sensor
//! Z-score).

pub mod filter;
mod manifest;

pub use manifest::{DatasetManifest, TrialEntry};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use filter::SosFilter;

pub const CHANNELS: usize = 128;
pub const SAMPLE_RATE_HZ: f64 = 1000.0;
pub const WINDOW: usize = 128;
pub const WINDOW_STEP: usize = 28;
/// Amplitude unit used for normalisation, in millivolts.
pub const UNIT_MV: f64 = 2.5;
pub const ZSCORE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Database {
    Dba,
    Dbb,
    Dbc,
}

impl Database {
    pub fn dir_name(self) -> &'static str {
        match self {
            Database::Dba => "dba",
            Database::Dbb => "dbb",
            Database::Dbc => "dbc",
        }
    }

    pub fn parse(s: &str) -> Option<Database> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "dba" => Some(Database::Dba),
            "dbb" => Some(Database::Dbb),
            "dbc" => Some(Database::Dbc),
            _ => None,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Database::Dba | Database::Dbb => 8,
            Database::Dbc => 12,
        }
    }
}

/// Identity of one recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialKey {
    pub subject: u32,
    pub session: u32,
    pub trial: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub db: Database,
    pub subject: u32,
    pub gesture: u32,
    pub session: u32,
    pub trial: u32,
    pub fs: f64,
}

impl TrialMeta {
    pub fn key(&self) -> TrialKey {
        TrialKey {
            subject: self.subject,
            session: self.session,
            trial: self.trial,
        }
    }
}

/// Sidecar metadata stored next to every canonical `.f32` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub subject: u32,
    pub gesture: u32,
    pub session: u32,
    pub trial: u32,
    pub fs: f64,
    pub channels: usize,
    pub samples: usize,
}

/// One contiguous multi-channel recording in millivolts, row-major
/// `channels x samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecording {
    pub meta: TrialMeta,
    pub channels: usize,
    pub samples: usize,
    pub signal: Vec<f64>,
}

impl TrialRecording {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.signal[c * self.samples..(c + 1) * self.samples]
    }
}

/// A normalised `128 x 128` (sensor x time) window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub data: Vec<f64>,
    /// Zero-based class index (`gesture - 1`).
    pub label: usize,
    pub trial_key: TrialKey,
    pub frame_index: usize,
}

impl WindowSample {
    pub fn new(data: Vec<f64>, label: usize, trial_key: TrialKey, frame_index: usize) -> Self {
        assert_eq!(data.len(), WINDOW * WINDOW, "window must be 128 x 128");
        WindowSample {
            data,
            label,
            trial_key,
            frame_index,
        }
    }

    pub fn row(&self, sensor: usize) -> &[f64] {
        &self.data[sensor * WINDOW..(sensor + 1) * WINDOW]
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        WindowSample {
            data,
            ..self.clone()
        }
    }
}

/// Relative path of a trial inside a dataset root.
pub fn canonical_path(meta: &TrialMeta) -> PathBuf {
    PathBuf::from(meta.db.dir_name())
        .join(format!("s{}", meta.subject))
        .join(format!("g{}", meta.gesture))
        .join(format!("t{}_sess{}.f32", meta.trial, meta.session))
}

fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("json")
}

fn validate(raw: &[f64], channels: usize) -> Result<usize> {
    if channels != CHANNELS {
        return Err(Error::Ingest(format!(
            "expected {CHANNELS} channels, got {channels}"
        )));
    }
    if raw.len() % channels != 0 {
        return Err(Error::Ingest(format!(
            "{} values do not form {channels} equal-length channels",
            raw.len()
        )));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::Ingest(format!("non-finite sample at flat index {i}")));
    }
    Ok(raw.len() / channels)
}

/// Validates a raw `channels x samples` matrix and writes it to `root` in the
/// canonical layout. The returned recording holds exactly the stored
/// (`f32`-rounded) values.
pub fn ingest_trial(root: &Path, raw: &[f64], channels: usize, meta: TrialMeta) -> Result<TrialRecording> {
    let samples = validate(raw, channels)?;
    let rec = TrialRecording {
        meta,
        channels,
        samples,
        signal: raw.iter().map(|&v| v as f32 as f64).collect(),
    };
    write_trial(root, &rec)?;
    Ok(rec)
}

/// Validates a raw matrix without touching the filesystem.
pub fn make_trial(raw: &[f64], channels: usize, meta: TrialMeta) -> Result<TrialRecording> {
    let samples = validate(raw, channels)?;
    Ok(TrialRecording {
        meta,
        channels,
        samples,
        signal: raw.iter().map(|&v| v as f32 as f64).collect(),
    })
}

fn write_trial(root: &Path, rec: &TrialRecording) -> Result<()> {
    let path = root.join(canonical_path(&rec.meta));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(rec.signal.len() * 4);
    for &v in &rec.signal {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let side = Sidecar {
        subject: rec.meta.subject,
        gesture: rec.meta.gesture,
        session: rec.meta.session,
        trial: rec.meta.trial,
        fs: rec.meta.fs,
        channels: rec.channels,
        samples: rec.samples,
    };
    let sp = sidecar_path(&path);
    let json = serde_json::to_string_pretty(&side)?;
    fs::write(&sp, json + "\n").map_err(|e| Error::io(&sp, e))?;
    Ok(())
}

/// Loads a canonical `.f32` file and its sidecar.
pub fn load_trial(data_path: &Path, db: Database) -> Result<TrialRecording> {
    let sp = sidecar_path(data_path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    if bytes.len() != side.channels * side.samples * 4 {
        return Err(Error::Ingest(format!(
            "{}: {} bytes, sidecar says {} x {} float32",
            data_path.display(),
            bytes.len(),
            side.channels,
            side.samples
        )));
    }
    let signal = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(TrialRecording {
        meta: TrialMeta {
            db,
            subject: side.subject,
            gesture: side.gesture,
            session: side.session,
            trial: side.trial,
            fs: side.fs,
        },
        channels: side.channels,
        samples: side.samples,
        signal,
    })
}

/// Second-order Butterworth band-stop (45-55 Hz) applied forward and
/// backward to every channel.
pub fn bandstop_filter(rec: &TrialRecording) -> Result<TrialRecording> {
    if rec.meta.fs != SAMPLE_RATE_HZ {
        return Err(Error::UnsupportedRate(rec.meta.fs));
    }
    let filt = SosFilter::butter_bandstop(2, 45.0, 55.0, SAMPLE_RATE_HZ);
    let mut signal = Vec::with_capacity(rec.signal.len());
    for c in 0..rec.channels {
        signal.extend(filt.filtfilt(rec.channel(c)));
    }
    Ok(TrialRecording {
        signal,
        ..rec.clone()
    })
}

/// Number of full windows of length `win` at stride `step` in `samples`.
pub fn window_count(samples: usize, win: usize, step: usize) -> usize {
    if samples < win {
        0
    } else {
        (samples - win) / step + 1
    }
}

/// Slices `[all channels, t, t + 128)` windows at a 28-sample stride; the
/// trailing partial window is dropped.
pub fn segment_windows(rec: &TrialRecording) -> Result<Vec<WindowSample>> {
    segment_windows_with(rec, WINDOW, WINDOW_STEP)
}

pub fn segment_windows_with(rec: &TrialRecording, win: usize, step: usize) -> Result<Vec<WindowSample>> {
    if rec.channels != CHANNELS || win != WINDOW {
        return Err(Error::Shape(format!(
            "windows must be {CHANNELS} x {WINDOW}, got {} x {win}",
            rec.channels
        )));
    }
    if rec.samples < win {
        return Err(Error::TooShort {
            samples: rec.samples,
            needed: win,
        });
    }
    let n = window_count(rec.samples, win, step);
    let label = rec.meta.gesture.saturating_sub(1) as usize;
    Ok((0..n)
        .map(|f| {
            let t0 = f * step;
            let mut data = Vec::with_capacity(rec.channels * win);
            for c in 0..rec.channels {
                data.extend_from_slice(&rec.channel(c)[t0..t0 + win]);
            }
            WindowSample::new(data, label, rec.meta.key(), f)
        })
        .collect())
}

/// Divides by the 2.5 mV unit and clips to `[-1, 1]`.
pub fn amplitude_normalize(w: &WindowSample) -> WindowSample {
    w.with_data(w.data.iter().map(|v| (v / UNIT_MV).clamp(-1.0, 1.0)).collect())
}

/// Standardises each sensor row: `(x - mean) / (std + eps)`.
pub fn zscore_per_sensor(w: &WindowSample) -> WindowSample {
    let mut data = w.data.clone();
    zscore_rows(&mut data, WINDOW, None);
    w.with_data(data)
}

/// Row-wise Z-score of a row-major matrix with `cols` columns. With a
/// validity mask, statistics use valid cells only and invalid cells are set
/// to zero.
pub fn zscore_rows(data: &mut [f64], cols: usize, mask: Option<&[f64]>) {
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let m = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let valid = |j: usize| m.is_none_or(|m| m[j] > 0.5);
        let count = (0..cols).filter(|&j| valid(j)).count();
        if count == 0 {
            row.fill(0.0);
            continue;
        }
        let first = (0..cols).find(|&j| valid(j)).map(|j| row[j]).unwrap_or(0.0);
        if (0..cols).filter(|&j| valid(j)).all(|j| row[j] == first) {
            row.fill(0.0);
            continue;
        }
        let mean = (0..cols).filter(|&j| valid(j)).map(|j| row[j]).sum::<f64>() / count as f64;
        let var = (0..cols)
            .filter(|&j| valid(j))
            .map(|j| (row[j] - mean) * (row[j] - mean))
            .sum::<f64>()
            / count as f64;
        let denom = var.sqrt() + ZSCORE_EPS;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if valid(j) { (*v - mean) / denom } else { 0.0 };
        }
    }
}

/// Block-average downsampling of a square `from x from` grid to `to x to`.
/// `to` must divide `from`.
pub fn downsample(data: &[f64], from: usize, to: usize) -> Result<Vec<f64>> {
    if to == 0 || from % to != 0 || data.len() != from * from {
        return Err(Error::Shape(format!(
            "cannot downsample {} values as {from}x{from} to {to}x{to}",
            data.len()
        )));
    }
    let f = from / to;
    let mut out = vec![0.0; to * to];
    for r in 0..from {
        for c in 0..from {
            out[(r / f) * to + c / f] += data[r * from + c];
        }
    }
    let area = (f * f) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

/// Full preprocessing of one recording: filter, window, normalise.
pub fn preprocess_trial(rec: &TrialRecording) -> Result<Vec<WindowSample>> {
    let filtered = bandstop_filter(rec)?;
    Ok(segment_windows(&filtered)?
        .iter()
        .map(amplitude_normalize)
        .collect())
}

/// Reads `samples x 128` comma-separated text (one time sample per line).
pub fn read_csv_matrix(path: &Path) -> Result<(Vec<f64>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split([',', ';', '\t', ' '])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Ingest(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        rows.push(row);
    }
    let samples = rows.len();
    let channels = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != channels) {
        return Err(Error::Ingest(format!("{}: ragged rows", path.display())));
    }
    // transpose to channels x samples
    let mut out = vec![0.0; channels * samples];
    for (t, r) in rows.iter().enumerate() {
        for (c, &v) in r.iter().enumerate() {
            out[c * samples + t] = v;
        }
    }
    Ok((out, channels))
}

/// Canonicalises a source tree of CSV exports.
///
/// Accepted layout: `<src>/<db>/[sess<k>/]<subject>-<gesture>-<trial>.csv`
/// with one time sample per line and one column per channel, sampled at
/// 1000 Hz. Returns the number of trials written.
pub fn ingest_dir(src: &Path, dst: &Path) -> Result<usize> {
    let mut count = 0;
    let mut dbs: Vec<PathBuf> = read_dir_sorted(src)?;
    dbs.retain(|p| p.is_dir());
    for db_dir in dbs {
        let Some(db) = db_dir.file_name().and_then(|n| n.to_str()).and_then(Database::parse) else {
            continue;
        };
        let mut stack = vec![(db_dir.clone(), 1u32)];
        while let Some((dir, session)) = stack.pop() {
            for entry in read_dir_sorted(&dir)? {
                let name = entry.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
                if entry.is_dir() {
                    if let Some(k) = name.strip_prefix("sess").and_then(|k| k.parse().ok()) {
                        stack.push((entry.clone(), k));
                    }
                    continue;
                }
                let Some(stem) = name.strip_suffix(".csv") else {
                    continue;
                };
                let ids: Vec<u32> = stem.split('-').filter_map(|s| s.parse().ok()).collect();
                if ids.len() != 3 {
                    return Err(Error::Ingest(format!(
                        "{}: expected <subject>-<gesture>-<trial>.csv",
                        entry.display()
                    )));
                }
                let (raw, channels) = read_csv_matrix(&entry)?;
                let meta = TrialMeta {
                    db,
                    subject: ids[0],
                    gesture: ids[1],
                    session,
                    trial: ids[2],
                    fs: SAMPLE_RATE_HZ,
                };
                ingest_trial(dst, &raw, channels, meta)?;
                count += 1;
            }
        }
    }
    Ok(count)
}

pub(crate) fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}
