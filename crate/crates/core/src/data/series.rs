use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use crate::error::{Error, Result};

/// Label value marking an anomalous step. Normal steps carry their device-type id (≥ 1).
pub const ANOMALY: u32 = 0;

/// An `M × K` matrix of sensor readings, one row per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
    len: usize,
    channels: usize,
    labels: Option<Vec<u32>>,
    channel_names: Vec<String>,
}

impl TimeSeries {
    pub fn new(
        values: Vec<f64>,
        channels: usize,
        labels: Option<Vec<u32>>,
        channel_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::shape("a time series needs at least one channel"));
        }
        if values.is_empty() || values.len() % channels != 0 {
            return Err(Error::shape(format!(
                "{} values cannot form rows of {channels} channels",
                values.len()
            )));
        }
        let len = values.len() / channels;
        if let Some(labels) = &labels {
            if labels.len() != len {
                return Err(Error::shape(format!(
                    "{} labels for {len} steps",
                    labels.len()
                )));
            }
        }
        let channel_names = match channel_names {
            Some(names) if names.len() != channels => {
                return Err(Error::shape(format!(
                    "{} channel names for {channels} channels",
                    names.len()
                )))
            }
            Some(names) => names,
            None => default_names(channels),
        };
        Ok(Self {
            values,
            len,
            channels,
            labels,
            channel_names,
        })
    }

    /// Number of steps (`M`).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of channels (`K`).
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn with_labels(mut self, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.len {
                return Err(Error::shape(format!(
                    "{} labels for {} steps",
                    l.len(),
                    self.len
                )));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    /// Steps `[start, end)` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len {
            return Err(Error::shape(format!(
                "slice {start}..{end} out of range for {} steps",
                self.len
            )));
        }
        Self::new(
            self.values[start * self.channels..end * self.channels].to_vec(),
            self.channels,
            self.labels.as_ref().map(|l| l[start..end].to_vec()),
            Some(self.channel_names.clone()),
        )
    }

    /// Distinct positive labels in ascending order.
    pub fn device_types(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .labels
            .iter()
            .flatten()
            .copied()
            .filter(|&l| l != ANOMALY)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("ch{i}")).collect()
}

/// Column layout expected of a CSV file.
///
/// A leading `timestamp` header and a trailing `label` header are detected
/// from the header row; everything in between is a feature column.
#[derive(Clone, Debug, Default)]
pub struct CsvSchema {
    /// Required number of feature columns, if known.
    pub features: Option<usize>,
    /// Accepted label values; `None` accepts any non-negative integer.
    pub allowed_labels: Option<Vec<u32>>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TimeSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));

    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let has_timestamp = names.first() == Some(&"timestamp");
    let has_label = names.len() > usize::from(has_timestamp) && names.last() == Some(&"label");
    let first = usize::from(has_timestamp);
    let last = names.len() - usize::from(has_label);
    let k = last.saturating_sub(first);
    if k == 0 {
        return Err(Error::Parse {
            path: path.into(),
            row: 1,
            column: 1,
            message: "no feature columns in header".into(),
        });
    }
    if let Some(expected) = schema.features {
        if expected != k {
            return Err(Error::Parse {
                path: path.into(),
                row: 1,
                column: 1,
                message: format!("expected {expected} feature columns, header has {k}"),
            });
        }
    }
    let channel_names: Vec<String> = names[first..last].iter().map(|s| s.to_string()).collect();

    let mut values = Vec::new();
    let mut labels = has_label.then(Vec::new);
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // Header is line 1.
        let row = i + 2;
        if record.len() != names.len() {
            return Err(Error::Ragged {
                path: path.into(),
                row,
                expected: names.len(),
                found: record.len(),
            });
        }
        for col in first..last {
            let cell = &record[col];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.into(),
                row,
                column: col + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.into(),
                    row,
                    column: col + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        if let Some(labels) = labels.as_mut() {
            let cell = &record[last];
            let unknown = || Error::UnknownLabel {
                path: path.into(),
                row,
                value: cell.to_string(),
            };
            let label: u32 = cell.parse().map_err(|_| unknown())?;
            if let Some(allowed) = &schema.allowed_labels {
                if !allowed.contains(&label) {
                    return Err(unknown());
                }
            }
            labels.push(label);
        }
    }
    if values.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            row: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }
    TimeSeries::new(values, k, labels, Some(channel_names))
}

/// Writes `ts` as CSV; `timestamp` adds a leading step-index column.
pub fn write_csv(ts: &TimeSeries, path: impl AsRef<Path>, timestamp: bool) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header: Vec<String> = Vec::with_capacity(ts.channels + 2);
    if timestamp {
        header.push("timestamp".into());
    }
    header.extend(ts.channel_names.iter().cloned());
    if ts.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for t in 0..ts.len {
        record.clear();
        if timestamp {
            record.push(t.to_string());
        }
        record.extend(ts.step(t).iter().map(|v| v.to_string()));
        if let Some(labels) = &ts.labels {
            record.push(labels[t].to_string());
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

const CACHE_MAGIC: [u8; 4] = *b"SATD";
const CACHE_VERSION: u16 = 1;

/// Binary cache: magic `SATD`, version `u16`, `M` and `K` as `u64`, row-major
/// `f64` values, then a one-byte label flag followed by `M` `u32` labels when
/// set. All little-endian.
pub fn write_cache(ts: &TimeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(23 + ts.values.len() * 8 + ts.len * 4);
    buf.extend_from_slice(&CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ts.len as u64).to_le_bytes());
    buf.extend_from_slice(&(ts.channels as u64).to_le_bytes());
    for v in &ts.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match &ts.labels {
        Some(labels) => {
            buf.push(1);
            for l in labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
        }
        None => buf.push(0),
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CACHE_MAGIC {
        return Err(Error::BadMagic {
            expected: CACHE_MAGIC,
            found: magic,
        });
    }
    let version = r.u16("version")?;
    if version != CACHE_VERSION {
        return Err(Error::Version {
            expected: CACHE_VERSION,
            found: version,
        });
    }
    let m = r.u64("length")? as usize;
    let k = r.u64("channel count")? as usize;
    let n = m
        .checked_mul(k)
        .ok_or_else(|| Error::Truncated("dimensions overflow".into()))?;
    if r.remaining() < n.saturating_mul(8) {
        return Err(Error::Truncated(format!("expected {n} values")));
    }
    let values = (0..n)
        .map(|_| r.f64("values"))
        .collect::<Result<Vec<_>>>()?;
    let labels = match r.take(1, "label flag")?[0] {
        0 => None,
        1 => Some(
            (0..m)
                .map(|_| r.u32("labels"))
                .collect::<Result<Vec<_>>>()?,
        ),
        other => return Err(Error::Truncated(format!("invalid label flag {other}"))),
    };
    TimeSeries::new(values, k, labels, None)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!("reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_plain_features() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "a,b\n1,2\n3,4\n5,6\n");
        let ts = load_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!((ts.len(), ts.channels()), (3, 2));
        assert!(ts.labels().is_none());
        assert_eq!(ts.step(2), &[5.0, 6.0]);
        assert_eq!(ts.channel_names(), &["a", "b"]);
    }

    #[test]
    fn loads_timestamp_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "timestamp,x,y,label\n0,1.5,2,1\n1,3,4,0\n");
        let ts = load_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!(ts.channels(), 2);
        assert_eq!(ts.labels(), Some(&[1, 0][..]));
        assert_eq!(ts.step(0), &[1.5, 2.0]);
    }

    #[test]
    fn nan_cell_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y\n1,2\n3,NaN\n");
        match load_csv(&p, &CsvSchema::default()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.csv");
        assert!(matches!(
            load_csv(&missing, &CsvSchema::default()),
            Err(Error::Io { .. })
        ));

        let ragged = write(&dir, "r.csv", "x,y\n1,2\n3\n");
        assert!(matches!(
            load_csv(&ragged, &CsvSchema::default()),
            Err(Error::Ragged { row: 3, .. })
        ));

        let text = write(&dir, "t.csv", "x,y\n1,abc\n");
        assert!(matches!(
            load_csv(&text, &CsvSchema::default()),
            Err(Error::Parse {
                row: 2,
                column: 2,
                ..
            })
        ));

        let bad_label = write(&dir, "l.csv", "x,label\n1,-1\n");
        assert!(matches!(
            load_csv(&bad_label, &CsvSchema::default()),
            Err(Error::UnknownLabel { row: 2, .. })
        ));

        let schema = CsvSchema {
            features: None,
            allowed_labels: Some(vec![0, 1]),
        };
        let unlisted = write(&dir, "u.csv", "x,label\n1,7\n");
        assert!(matches!(
            load_csv(&unlisted, &schema),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ts = TimeSeries::new(
            vec![0.1, -2.5, 1e-17, 3.0],
            2,
            Some(vec![1, 0]),
            Some(vec!["p".into(), "q".into()]),
        )
        .unwrap();
        let p = dir.path().join("o.csv");
        write_csv(&ts, &p, true).unwrap();
        assert_eq!(load_csv(&p, &CsvSchema::default()).unwrap(), ts);
    }

    #[test]
    fn cache_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ts = TimeSeries::new(
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            3,
            Some(vec![2, 0]),
            None,
        )
        .unwrap();
        let p = dir.path().join("c.satd");
        write_cache(&ts, &p).unwrap();
        assert_eq!(read_cache(&p).unwrap(), ts);

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_cache(&p), Err(Error::Truncated(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_cache(&p), Err(Error::BadMagic { .. })));

        let mut bad = bytes;
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(
            read_cache(&p),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn device_types_ignore_anomalies() {
        let ts = TimeSeries::new(vec![0.0; 5], 1, Some(vec![2, 0, 1, 2, 0]), None).unwrap();
        assert_eq!(ts.device_types(), vec![1, 2]);
    }
}
