//! Samples, datasets, CSV/JSON persistence and min-max normalization.

mod synth;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synth::{inject_fault, normal_day, synth_generate, AnomalyMix, DayDraw, FaultKind, FaultSpan};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hours per sample.
pub const HOURS: usize = 24;
/// PM2.5 and PM10.
pub const CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }

    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            other => Err(Error::InvalidData(format!("unknown label {other:?}"))),
        }
    }
}

/// One day of hourly readings: row `h` holds `[pm25, pm10]` for hour `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub values: [[f64; CHANNELS]; HOURS],
    pub label: Label,
}

impl Sample {
    pub fn new(id: impl Into<String>, values: [[f64; CHANNELS]; HOURS], label: Label) -> Result<Self> {
        let s = Self {
            id: id.into(),
            values,
            label,
        };
        s.validate()?;
        Ok(s)
    }

    /// Raw readings must be finite and non-negative.
    pub fn validate(&self) -> Result<()> {
        for (h, row) in self.values.iter().enumerate() {
            for &v in row {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidData(format!(
                        "sample {} hour {h}: value {v} must be finite and non-negative",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Channel-major `[2, 24]` tensor, the layout the networks consume.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(CHANNELS * HOURS);
        for c in 0..CHANNELS {
            data.extend(self.values.iter().map(|row| row[c]));
        }
        Tensor::new(vec![CHANNELS, HOURS], data).expect("fixed shape")
    }

    pub fn is_abnormal(&self) -> bool {
        self.label.is_abnormal()
    }
}

/// Per-channel min/max fitted on training normals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: [f64; CHANNELS],
    pub max: [f64; CHANNELS],
}

impl NormStats {
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let mut min = [f64::INFINITY; CHANNELS];
        let mut max = [f64::NEG_INFINITY; CHANNELS];
        let mut seen = false;
        for s in samples {
            seen = true;
            for row in &s.values {
                for c in 0..CHANNELS {
                    min[c] = min[c].min(row[c]);
                    max[c] = max[c].max(row[c]);
                }
            }
        }
        if !seen {
            return Err(Error::Empty("normalization sample set"));
        }
        let stats = Self { min, max };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..CHANNELS {
            // NaN bounds fail too.
            if self.max[c].partial_cmp(&self.min[c]) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::InvalidData(format!(
                    "channel {c} is degenerate (min {} max {})",
                    self.min[c], self.max[c]
                )));
            }
        }
        Ok(())
    }

    /// Maps into `[0, 1]`, clamping values outside the fitted range.
    pub fn normalize(&self, sample: &Sample) -> Sample {
        let mut out = sample.clone();
        for row in out.values.iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = ((*v - self.min[c]) / (self.max[c] - self.min[c])).clamp(0.0, 1.0);
            }
        }
        out
    }

    pub fn denormalize(&self, sample: &Sample) -> Sample {
        let mut out = sample.clone();
        for row in out.values.iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.min[c] + *v * (self.max[c] - self.min[c]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormStats>,
}

/// Hours seen so far for one sample while parsing CSV.
type PartialDay = [Option<[f64; CHANNELS]>; HOURS];

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    sample_id: String,
    hour: usize,
    pm25: f64,
    pm10: f64,
    label: String,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            samples,
            normalization: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidData(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn normals(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| !s.is_abnormal())
    }

    pub fn abnormals(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.is_abnormal())
    }

    /// Normalized copy carrying the stats it was normalized with.
    pub fn normalize(&self, stats: &NormStats) -> Self {
        Self {
            samples: self.samples.iter().map(|s| stats.normalize(s)).collect(),
            normalization: Some(*stats),
        }
    }

    /// Parses the long format `sample_id,hour,pm25,pm10,label`, one row per
    /// hour. Samples keep the order of their first row.
    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut order: Vec<String> = Vec::new();
        let mut partial: HashMap<String, (PartialDay, Label)> = HashMap::new();
        for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row?;
            let label: Label = row.label.parse().map_err(|e| Error::at(line, e))?;
            if row.hour >= HOURS {
                return Err(Error::InvalidData(format!(
                    "sample {}: hour {} outside 0-23",
                    row.sample_id, row.hour
                )));
            }
            if row.pm25 < 0.0 || row.pm10 < 0.0 || !row.pm25.is_finite() || !row.pm10.is_finite() {
                return Err(Error::InvalidData(format!(
                    "sample {} hour {}: readings must be finite and non-negative",
                    row.sample_id, row.hour
                )));
            }
            let entry = partial.entry(row.sample_id.clone()).or_insert_with(|| {
                order.push(row.sample_id.clone());
                ([None; HOURS], label)
            });
            if entry.1 != label {
                return Err(Error::InvalidData(format!(
                    "sample {} has conflicting labels",
                    row.sample_id
                )));
            }
            if entry.0[row.hour].replace([row.pm25, row.pm10]).is_some() {
                return Err(Error::InvalidData(format!(
                    "sample {} repeats hour {}",
                    row.sample_id, row.hour
                )));
            }
        }
        let mut samples = Vec::with_capacity(order.len());
        for id in order {
            let (hours, label) = partial.remove(&id).expect("inserted above");
            let missing: Vec<usize> = (0..HOURS).filter(|&h| hours[h].is_none()).collect();
            if !missing.is_empty() {
                return Err(Error::InvalidData(format!(
                    "sample {id} is missing hours {missing:?}"
                )));
            }
            let values = hours.map(|h| h.expect("checked"));
            samples.push(Sample::new(id, values, label)?);
        }
        Self::new(samples)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv_writer(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sample_id", "hour", "pm25", "pm10", "label"])?;
        for s in &self.samples {
            for (h, row) in s.values.iter().enumerate() {
                w.write_record([
                    s.id.clone(),
                    h.to_string(),
                    format!("{:.6}", row[0]),
                    format!("{:.6}", row[1]),
                    s.label.as_str().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let ds: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        for s in &ds.samples {
            s.validate()?;
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer_pretty(std::io::BufWriter::new(std::fs::File::create(path)?), self)?;
        Ok(())
    }

    /// Dispatches on extension: `.json` or anything else as CSV.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            Self::load_json(path)
        } else {
            Self::load_csv(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(id: &str, v: f64, label: Label) -> Sample {
        Sample::new(id, [[v, v * 2.0]; HOURS], label).unwrap()
    }

    fn csv_of(ds: &Dataset) -> String {
        let mut buf = Vec::new();
        ds.to_csv_writer(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let mut a = flat("a", 12.5, Label::Normal);
        a.values[3] = [1.234567, 99.0];
        let ds = Dataset::new(vec![a, flat("b", 40.0, Label::Abnormal)]).unwrap();
        let back = Dataset::from_csv_reader(csv_of(&ds).as_bytes()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_hour_names_the_sample() {
        let ds = Dataset::new(vec![flat("day-7", 3.0, Label::Normal)]).unwrap();
        let text = csv_of(&ds);
        let cut: String = text.lines().take(24).map(|l| format!("{l}\n")).collect();
        let err = Dataset::from_csv_reader(cut.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("day-7"), "{err}");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(Dataset::from_csv_reader("".as_bytes()).unwrap().is_empty());
        let header = "sample_id,hour,pm25,pm10,label\n";
        assert!(Dataset::from_csv_reader(header.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_rows() {
        let header = "sample_id,hour,pm25,pm10,label\n";
        let dup = format!("{header}a,0,1,2,normal\na,0,1,2,normal\n");
        assert!(Dataset::from_csv_reader(dup.as_bytes()).is_err());
        let neg = format!("{header}a,0,-1,2,normal\n");
        assert!(Dataset::from_csv_reader(neg.as_bytes()).is_err());
        let label = format!("{header}a,0,1,2,weird\n");
        let err = Dataset::from_csv_reader(label.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("weird"));
    }

    #[test]
    fn normalization_rules() {
        let stats = NormStats {
            min: [0.0, 0.0],
            max: [100.0, 200.0],
        };
        let s = flat("x", 50.0, Label::Normal);
        let n = stats.normalize(&s);
        assert_eq!(n.values[0], [0.5, 0.5]);
        let hot = flat("y", 150.0, Label::Normal);
        assert_eq!(stats.normalize(&hot).values[0], [1.0, 1.0]);
        let back = stats.denormalize(&n);
        for (a, b) in back.values.iter().flatten().zip(s.values.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_channel_is_an_error() {
        let s = flat("x", 5.0, Label::Normal);
        assert!(NormStats::fit([&s]).is_err());
        assert!(NormStats::fit(std::iter::empty()).is_err());
    }

    #[test]
    fn tensor_layout_is_channel_major() {
        let mut s = flat("x", 1.0, Label::Normal);
        s.values[5] = [7.0, 8.0];
        let t = s.to_tensor();
        assert_eq!(t.shape(), &[2, 24]);
        assert_eq!(t.data()[5], 7.0);
        assert_eq!(t.data()[24 + 5], 8.0);
    }
}
