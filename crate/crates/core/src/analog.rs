//! Nearest-neighbor retrieval of archived images (or gapless image runs) by
//! Euclidean distance in descriptor space.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::PathBuf;

use chrono::{DateTime, Duration, Utc};

use crate::archive::FrameRef;
use crate::descriptor::{element_names, WeatherDescriptor, DESCRIPTOR_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AnalogEntry {
    pub frame: FrameRef,
    pub descriptor: WeatherDescriptor,
}

/// Time-sorted archive of normalized descriptors with their frames.
#[derive(Debug, Clone)]
pub struct AnalogArchive {
    entries: Vec<AnalogEntry>,
    normalizer_id: String,
    by_time: HashMap<DateTime<Utc>, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalogMatch {
    pub index: usize,
    pub frame: FrameRef,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMatch {
    pub start_index: usize,
    pub frames: Vec<FrameRef>,
    pub distance: f64,
}

fn squared_distance(a: &[f64; DESCRIPTOR_DIM], b: &[f64; DESCRIPTOR_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl AnalogArchive {
    pub fn new(mut entries: Vec<AnalogEntry>, normalizer_id: impl Into<String>) -> Result<Self> {
        let normalizer_id = normalizer_id.into();
        for e in &entries {
            e.descriptor.require_normalizer(&normalizer_id)?;
        }
        entries.sort_by_key(|e| e.frame.timestamp);
        let mut by_time = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if by_time.insert(e.frame.timestamp, i).is_some() {
                return Err(Error::DuplicateTimestamp {
                    site: e.frame.site_id.clone(),
                    timestamp: e.frame.timestamp,
                });
            }
        }
        Ok(Self {
            entries,
            normalizer_id,
            by_time,
        })
    }

    pub fn entries(&self) -> &[AnalogEntry] {
        &self.entries
    }

    pub fn normalizer_id(&self) -> &str {
        &self.normalizer_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The entry nearest to `wt`; ties go to the earliest timestamp.
    pub fn retrieve_individual(&self, wt: &WeatherDescriptor) -> Result<AnalogMatch> {
        wt.require_normalizer(&self.normalizer_id)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let d = squared_distance(&e.descriptor.vector, &wt.vector);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        let (index, d) = best.ok_or_else(|| Error::InvalidArgument("analog archive is empty".into()))?;
        Ok(AnalogMatch {
            index,
            frame: self.entries[index].frame.clone(),
            distance: d.sqrt(),
        })
    }

    /// Length of the gapless chain starting at each entry.
    fn chain_lengths(&self, cadence: Duration) -> Vec<usize> {
        let mut len = vec![1usize; self.entries.len()];
        for i in (0..self.entries.len()).rev() {
            let next = self.entries[i].frame.timestamp + cadence;
            if let Some(&j) = self.by_time.get(&next) {
                len[i] = 1 + len[j];
            }
        }
        len
    }

    /// Longest gapless run at `cadence_minutes`.
    pub fn longest_run(&self, cadence_minutes: i64) -> usize {
        self.chain_lengths(Duration::minutes(cadence_minutes))
            .into_iter()
            .max()
            .unwrap_or(0)
    }

    /// The gapless window whose concatenated descriptors are nearest to
    /// `forecast`; ties go to the earliest start.
    pub fn retrieve_sequence(&self, forecast: &[WeatherDescriptor], cadence_minutes: i64) -> Result<SequenceMatch> {
        if forecast.is_empty() {
            return Err(Error::InvalidArgument("forecast is empty".into()));
        }
        if cadence_minutes <= 0 {
            return Err(Error::InvalidArgument("cadence must be positive".into()));
        }
        for w in forecast {
            w.require_normalizer(&self.normalizer_id)?;
        }
        let cadence = Duration::minutes(cadence_minutes);
        let chains = self.chain_lengths(cadence);
        let l = forecast.len();
        let mut best: Option<(usize, f64)> = None;
        for (i, &chain) in chains.iter().enumerate() {
            if chain < l {
                continue;
            }
            let mut d = 0.0;
            let mut idx = i;
            for (k, w) in forecast.iter().enumerate() {
                if k > 0 {
                    idx = self.by_time[&(self.entries[idx].frame.timestamp + cadence)];
                }
                d += squared_distance(&self.entries[idx].descriptor.vector, &w.vector);
            }
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        let (start, d) = best.ok_or(Error::NoGaplessRun {
            required: l,
            cadence_minutes,
            longest: chains.iter().copied().max().unwrap_or(0),
        })?;
        let mut frames = Vec::with_capacity(l);
        let mut t = self.entries[start].frame.timestamp;
        for _ in 0..l {
            frames.push(self.entries[self.by_time[&t]].frame.clone());
            t += cadence;
        }
        Ok(SequenceMatch {
            start_index: start,
            frames,
            distance: d.sqrt(),
        })
    }

    /// Persists the archive as CSV: frame columns then one column per
    /// descriptor element.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["site_id".to_string(), "timestamp".into(), "path".into(), "normalizer".into()];
        header.extend(element_names());
        w.write_record(&header)?;
        for e in &self.entries {
            let mut row = vec![
                e.frame.site_id.clone(),
                e.frame.timestamp.to_rfc3339(),
                e.frame.path.to_string_lossy().into_owned(),
                self.normalizer_id.clone(),
            ];
            row.extend(e.descriptor.vector.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let expected: Vec<String> = ["site_id", "timestamp", "path", "normalizer"]
            .into_iter()
            .map(String::from)
            .chain(element_names())
            .collect();
        if header.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument("analog archive CSV header does not match".into()));
        }
        let mut entries = Vec::new();
        let mut normalizer: Option<String> = None;
        for rec in r.records() {
            let rec = rec?;
            let ts = DateTime::parse_from_rfc3339(&rec[1])
                .map_err(|e| Error::InvalidArgument(format!("bad timestamp `{}`: {e}", &rec[1])))?
                .with_timezone(&Utc);
            let id = rec[3].to_string();
            match &normalizer {
                Some(n) if *n != id => {
                    return Err(Error::NormalizerMismatch {
                        expected: n.clone(),
                        found: id,
                    })
                }
                _ => normalizer = Some(id.clone()),
            }
            let mut vector = [0.0; DESCRIPTOR_DIM];
            for (k, v) in vector.iter_mut().enumerate() {
                *v = rec[4 + k]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad value `{}`", &rec[4 + k])))?;
            }
            entries.push(AnalogEntry {
                frame: FrameRef {
                    site_id: rec[0].to_string(),
                    timestamp: ts,
                    path: PathBuf::from(&rec[2]),
                },
                descriptor: WeatherDescriptor {
                    vector,
                    valid_time: ts,
                    normalizer: Some(id),
                },
            });
        }
        Self::new(entries, normalizer.unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn entry(minutes: i64, x: f64, y: f64) -> AnalogEntry {
        let t = Utc.with_ymd_and_hms(2020, 5, 1, 0, 0, 0).unwrap() + Duration::minutes(minutes);
        let mut vector = [0.0; DESCRIPTOR_DIM];
        vector[0] = x;
        vector[1] = y;
        AnalogEntry {
            frame: FrameRef {
                site_id: "s".into(),
                timestamp: t,
                path: PathBuf::from(format!("{minutes}.png")),
            },
            descriptor: WeatherDescriptor {
                vector,
                valid_time: t,
                normalizer: Some("n".into()),
            },
        }
    }

    fn query(x: f64, y: f64) -> WeatherDescriptor {
        entry(0, x, y).descriptor
    }

    #[test]
    fn nearest_point_example() {
        let a = AnalogArchive::new(vec![entry(0, 0.0, 0.0), entry(10, 1.0, 1.0), entry(20, 3.0, 3.0)], "n").unwrap();
        assert_eq!(a.retrieve_individual(&query(0.9, 0.9)).unwrap().index, 1);
        let exact = a.retrieve_individual(&query(3.0, 3.0)).unwrap();
        assert_eq!((exact.index, exact.distance), (2, 0.0));
    }

    #[test]
    fn sequence_example_prefers_closer_run() {
        // Run A at 0,10; run B at 60,70; a gap separates them.
        let a = AnalogArchive::new(
            vec![entry(0, 0.0, 0.0), entry(10, 0.0, 0.0), entry(60, 1.0, 1.0), entry(70, 2.0, 2.0)],
            "n",
        )
        .unwrap();
        let m = a.retrieve_sequence(&[query(1.0, 1.0), query(1.0, 1.0)], 10).unwrap();
        assert_eq!(m.start_index, 2);
        assert!((m.distance - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn missing_run_reports_longest() {
        let a = AnalogArchive::new(vec![entry(0, 0.0, 0.0), entry(10, 0.0, 0.0), entry(30, 0.0, 0.0)], "n").unwrap();
        match a.retrieve_sequence(&vec![query(0.0, 0.0); 3], 10) {
            Err(Error::NoGaplessRun { required, longest, .. }) => assert_eq!((required, longest), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ties_go_to_earliest_and_mismatch_is_refused() {
        let a = AnalogArchive::new(vec![entry(20, 1.0, 0.0), entry(0, -1.0, 0.0)], "n").unwrap();
        assert_eq!(a.retrieve_individual(&query(0.0, 0.0)).unwrap().frame.path, PathBuf::from("0.png"));
        let mut q = query(0.0, 0.0);
        q.normalizer = Some("other".into());
        assert!(matches!(a.retrieve_individual(&q), Err(Error::NormalizerMismatch { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let a = AnalogArchive::new(vec![entry(0, 0.1, -2.0), entry(10, 1.0, 1.0)], "n").unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let b = AnalogArchive::read_csv(buf.as_slice()).unwrap();
        assert_eq!(a.entries(), b.entries());
    }
}
