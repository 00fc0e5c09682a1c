//! Dataset manifests, the canonical CSV loader, splits, synthetic corpora and
//! window export.

mod split;
pub mod synthetic;

pub use split::{make_splits, stratum_size, CrossRole, Split, SplitMode, SplitSpec};
pub use synthetic::{
    generate_synthetic, mirror_pairs, seven_class_templates, six_class_templates, ClassTemplate, SyntheticSet,
    SyntheticSpec,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::signal::{
    finish_window, preprocess_with, resample_linear, ImuWindow, PreprocessConfig, RawSample, CHANNELS,
};

pub const MANIFEST_SCHEMA: &str = "unimotion-data-v1";
pub const WINDOWS_KIND: &str = "windows";
const STANDARD_GRAVITY: f64 = 9.80665;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Activity,
    Gesture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccelUnit {
    #[serde(rename = "m/s2")]
    MetersPerSecondSquared,
    #[serde(rename = "g")]
    StandardGravity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GyroUnit {
    #[serde(rename = "rad/s")]
    RadiansPerSecond,
    #[serde(rename = "deg/s")]
    DegreesPerSecond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelUnits {
    pub accel: AccelUnit,
    pub gyro: GyroUnit,
}

impl Default for ChannelUnits {
    fn default() -> Self {
        Self {
            accel: AccelUnit::MetersPerSecondSquared,
            gyro: GyroUnit::RadiansPerSecond,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Zscore,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Windowing {
    /// One window per file (center-cropped when longer).
    #[default]
    Single,
    /// Consecutive non-overlapping windows; a trailing remainder is dropped
    /// unless the recording is shorter than one window.
    Sliding,
}

/// A class given either by index or by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: PathBuf,
    pub user: String,
    /// Absent for unlabeled recordings.
    #[serde(default)]
    pub class: Option<ClassRef>,
    #[serde(default = "csv_format")]
    pub format: String,
}

fn csv_format() -> String {
    "csv".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub name: String,
    pub kind: DatasetKind,
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub channel_units: ChannelUnits,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub user_ids: Vec<String>,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub windowing: Windowing,
    pub files: Vec<FileEntry>,
}

impl DatasetManifest {
    /// Reads a manifest; relative file paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for f in &mut m.files {
            if f.path.is_relative() {
                f.path = base.join(&f.path);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "manifest schema {:?}, expected {MANIFEST_SCHEMA:?}",
                self.schema
            )));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("sample_rate_hz {}", self.sample_rate_hz)));
        }
        for f in &self.files {
            if !f.path.is_file() {
                return Err(Error::InvalidInput(format!("missing file {}", f.path.display())));
            }
            if f.format != "csv" {
                return Err(Error::InvalidConfig(format!(
                    "{}: unsupported format {:?}",
                    f.path.display(),
                    f.format
                )));
            }
            if let Some(c) = &f.class {
                self.class_index(c)?;
            }
            if !self.user_ids.is_empty() && !self.user_ids.contains(&f.user) {
                return Err(Error::InvalidConfig(format!(
                    "{}: user {:?} not in user_ids",
                    f.path.display(),
                    f.user
                )));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, c: &ClassRef) -> Result<usize> {
        match c {
            ClassRef::Index(i) if *i < self.class_names.len() => Ok(*i),
            ClassRef::Name(n) => self
                .class_names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown class {n:?}"))),
            ClassRef::Index(i) => Err(Error::InvalidConfig(format!(
                "class index {i} outside {} class names",
                self.class_names.len()
            ))),
        }
    }

    fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            normalize: self.normalization == Normalization::Zscore,
            ..PreprocessConfig::default()
        }
    }
}

/// Samples of one CSV recording in canonical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub samples: Vec<RawSample>,
    /// No gyroscope columns; gyro channels were zero-filled.
    pub accel_only: bool,
}

const KNOWN_IGNORED: [&str; 3] = ["mx", "my", "mz"];
const COLUMNS: [&str; 7] = ["t", "ax", "ay", "az", "gx", "gy", "gz"];

/// Parses a CSV recording with header `t,ax,ay,az,gx,gy,gz`. Columns are
/// matched by name; magnetometer columns are ignored and a file without any
/// gyroscope column is read as accelerometer-only.
pub fn read_csv(path: &Path, units: &ChannelUnits) -> Result<Recording> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(parse_err(1, "empty file".into()));
    }
    let mut index = [None; 7];
    for (col, name) in headers.iter().enumerate() {
        let name = name.to_ascii_lowercase();
        if let Some(k) = COLUMNS.iter().position(|c| *c == name) {
            if index[k].replace(col).is_some() {
                return Err(parse_err(1, format!("duplicate column {name:?}")));
            }
        } else if !KNOWN_IGNORED.contains(&name.as_str()) {
            return Err(parse_err(1, format!("unexpected column {name:?}")));
        }
    }
    if let Some(k) = (0..4).find(|&k| index[k].is_none()) {
        return Err(parse_err(1, format!("missing column {:?}", COLUMNS[k])));
    }
    let gyro_present = index[4..].iter().filter(|i| i.is_some()).count();
    if gyro_present != 0 && gyro_present != 3 {
        return Err(parse_err(1, "gyroscope needs all of gx, gy, gz".into()));
    }
    let accel_only = gyro_present == 0;
    let accel_scale = match units.accel {
        AccelUnit::MetersPerSecondSquared => 1.0,
        AccelUnit::StandardGravity => STANDARD_GRAVITY,
    };
    let gyro_scale = match units.gyro {
        GyroUnit::RadiansPerSecond => 1.0,
        GyroUnit::DegreesPerSecond => std::f64::consts::PI / 180.0,
    };

    let mut samples = Vec::new();
    let mut raw_accel_norms = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |k: usize| -> Result<f64> {
            let Some(col) = index[k] else { return Ok(0.0) };
            let text = record
                .get(col)
                .ok_or_else(|| parse_err(line, format!("missing field {:?}", COLUMNS[k])))?;
            let v: f64 = text
                .parse()
                .map_err(|_| parse_err(line, format!("{:?} is not a number in column {:?}", text, COLUMNS[k])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value in column {:?}", COLUMNS[k])));
            }
            Ok(v)
        };
        let t = field(0)?;
        let mut values = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            values[c] = field(c + 1)?;
        }
        raw_accel_norms.push(values[..3].iter().map(|v| v * v).sum::<f64>().sqrt());
        for v in &mut values[..3] {
            *v *= accel_scale;
        }
        for v in &mut values[3..] {
            *v *= gyro_scale;
        }
        if let Some(prev) = samples.last().map(|s: &RawSample| s.t) {
            if !(t > prev) {
                return Err(parse_err(line, format!("timestamp {t} does not increase")));
            }
        }
        samples.push(RawSample { t, values });
    }
    if samples.is_empty() {
        return Err(parse_err(2, "no samples".into()));
    }
    if units.accel == AccelUnit::StandardGravity {
        raw_accel_norms.sort_by(f64::total_cmp);
        let median = raw_accel_norms[raw_accel_norms.len() / 2];
        if median > 4.0 {
            return Err(Error::Unit {
                path: path.to_path_buf(),
                message: format!(
                    "accelerometer declared in g but median magnitude is {median:.2}, which looks like m/s2"
                ),
            });
        }
    }
    Ok(Recording { samples, accel_only })
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub kind: DatasetKind,
    pub class_names: Vec<String>,
    pub windows: Vec<ImuWindow>,
    /// `None` for unlabeled recordings.
    pub labels: Vec<Option<usize>>,
    pub users: Vec<String>,
    /// Index into the manifest's file list for each window.
    pub sources: Vec<usize>,
    /// Any recording had its gyroscope channels zero-filled.
    pub accel_only: bool,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Labels of a fully labeled dataset.
    pub fn dense_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::InvalidInput(format!("window {i} is unlabeled"))))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            windows: indices.iter().map(|&i| self.windows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            users: indices.iter().map(|&i| self.users[i].clone()).collect(),
            sources: indices.iter().map(|&i| self.sources[i]).collect(),
            ..self.clone()
        }
    }

    pub fn metadata(&self) -> serde_json::Value {
        json!({
            "name": self.name,
            "windows": self.windows.len(),
            "classes": self.class_names,
            "accel_only": self.accel_only,
        })
    }
}

fn windows_of(recording: &Recording, manifest: &DatasetManifest) -> Result<Vec<ImuWindow>> {
    let cfg = manifest.preprocess_config();
    match manifest.windowing {
        Windowing::Single => Ok(vec![preprocess_with(&recording.samples, &cfg)?]),
        Windowing::Sliding => {
            let resampled = resample_linear(&recording.samples, cfg.target_rate_hz)?;
            if resampled.len() < cfg.target_len {
                return Ok(vec![finish_window(&resampled, &cfg)]);
            }
            Ok(resampled
                .chunks_exact(cfg.target_len)
                .map(|c| finish_window(c, &cfg))
                .collect())
        }
    }
}

/// Loads every file of the manifest in manifest order.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let mut ds = Dataset {
        name: manifest.name.clone(),
        kind: manifest.kind,
        class_names: manifest.class_names.clone(),
        windows: Vec::new(),
        labels: Vec::new(),
        users: Vec::new(),
        sources: Vec::new(),
        accel_only: false,
    };
    for (i, f) in manifest.files.iter().enumerate() {
        let rec = read_csv(&f.path, &manifest.channel_units)?;
        ds.accel_only |= rec.accel_only;
        let label = f.class.as_ref().map(|c| manifest.class_index(c)).transpose()?;
        for w in windows_of(&rec, manifest)? {
            ds.windows.push(w);
            ds.labels.push(label);
            ds.users.push(f.user.clone());
            ds.sources.push(i);
        }
    }
    Ok(ds)
}

/// Windows only; labels never leave this function.
pub fn load_unlabeled(manifest: &DatasetManifest) -> Result<Vec<ImuWindow>> {
    Ok(load_dataset(manifest)?.windows)
}

/// Container with `windows` `[N × T × 6]`, `pad_mask` `[N × T]` (0/1) and
/// labels, users and class names in the metadata.
pub fn export_windows(ds: &Dataset) -> Container {
    let t = ds.windows.first().map_or(0, ImuWindow::len);
    let mut c = Container::new(
        WINDOWS_KIND,
        json!({ "name": ds.name, "kind": ds.kind, "seq_len": t }),
        json!({
            "labels": ds.labels,
            "users": ds.users,
            "sources": ds.sources,
            "class_names": ds.class_names,
            "accel_only": ds.accel_only,
        }),
    );
    let values = ds.windows.iter().flat_map(|w| w.samples().iter().flatten().copied()).collect();
    let pads = ds
        .windows
        .iter()
        .flat_map(|w| w.pad_mask().iter().map(|&p| f32::from(u8::from(p))))
        .collect();
    c.push("windows", &[ds.windows.len(), t, CHANNELS], values);
    c.push("pad_mask", &[ds.windows.len(), t], pads);
    c
}

pub fn import_windows(c: &Container) -> Result<Dataset> {
    c.expect_kind(WINDOWS_KIND)?;
    let bad = |m: &str| Error::IncompatibleCheckpoint(m.to_string());
    let values = c.require("windows")?;
    let pads = c.require("pad_mask")?;
    let [n, t, ch] = values.shape[..] else {
        return Err(bad("windows tensor must be 3-D"));
    };
    if ch != CHANNELS || pads.shape != [n, t] {
        return Err(bad("window tensor shapes disagree"));
    }
    let windows = (0..n)
        .map(|i| {
            let samples = values.data[i * t * CHANNELS..(i + 1) * t * CHANNELS]
                .chunks(CHANNELS)
                .map(|s| std::array::from_fn(|c| s[c]))
                .collect();
            let pad = pads.data[i * t..(i + 1) * t].iter().map(|&p| p != 0.0).collect();
            ImuWindow::new(samples, pad)
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = &c.metadata;
    fn de<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, k: &str) -> Result<T> {
        serde_json::from_value(meta[k].clone()).map_err(|_| Error::IncompatibleCheckpoint(k.to_string()))
    }
    Ok(Dataset {
        name: c.config["name"].as_str().unwrap_or_default().to_string(),
        kind: serde_json::from_value(c.config["kind"].clone()).map_err(|_| bad("kind"))?,
        class_names: de(meta, "class_names")?,
        labels: de(meta, "labels")?,
        users: de(meta, "users")?,
        sources: de(meta, "sources")?,
        accel_only: meta["accel_only"].as_bool().unwrap_or(false),
        windows,
    })
}
