//! Uniformly sampled signals and their `t,value` CSV form.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalRole {
    /// Newtons.
    Force,
    /// Millimetres.
    Displacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub sample_time: f64,
    #[serde(default)]
    pub start_time: f64,
    pub role: SignalRole,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(sample_time: f64, role: SignalRole, values: Vec<f64>) -> Result<Self> {
        let ts = TimeSeries {
            sample_time,
            start_time: 0.0,
            role,
            values,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return Err(Error::invalid("sample_time must be positive and finite"));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start_time + k as f64 * self.sample_time
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(|k| self.time(k))
    }

    /// Range of the samples (max - min); zero for an empty series.
    pub fn range(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        hi - lo
    }

    /// Every `stride`-th sample, keeping the time base consistent.
    pub fn decimate(&self, stride: usize) -> TimeSeries {
        let stride = stride.max(1);
        TimeSeries {
            sample_time: self.sample_time * stride as f64,
            start_time: self.start_time,
            role: self.role,
            values: self.values.iter().step_by(stride).copied().collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "value"]).map_err(csv_err)?;
        for (t, v) in self.times().zip(&self.values) {
            // Display on f64 is the shortest representation that round-trips.
            w.write_record([t.to_string(), v.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, role: SignalRole) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "value" {
            return Err(Error::Parse(format!(
                "expected header `t,value`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let t: f64 = parse_field(&rec[0])?;
            let v: f64 = parse_field(&rec[1])?;
            times.push(t);
            values.push(v);
        }
        if times.len() < 2 {
            return Err(Error::Parse("need at least two samples".into()));
        }
        let sample_time = times[1] - times[0];
        let ts = TimeSeries {
            sample_time,
            start_time: times[0],
            role,
            values,
        };
        ts.validate()?;
        let tol = 1e-9 * sample_time.max(times.last().unwrap().abs());
        for (k, &t) in times.iter().enumerate() {
            if (t - ts.time(k)).abs() > tol {
                return Err(Error::Parse(format!("non-uniform sampling at row {k}")));
            }
        }
        Ok(ts)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::store::write_atomic(path.as_ref(), &buf)
    }

    pub fn load_csv(path: impl AsRef<Path>, role: SignalRole) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f, role)
    }
}

fn parse_field(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("not a number: `{s}`")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}
