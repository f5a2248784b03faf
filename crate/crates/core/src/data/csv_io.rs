use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{activity_index, SampleWindow, SubjectDataset, ACTIVITIES};
use crate::error::{Error, Result};
use crate::model::{CHANNELS, WINDOW_LEN};
use crate::tensor::Tensor;

pub const SAMPLE_RATE_HZ: f64 = 20.0;
/// Allowed relative deviation of a sampling interval from `1 / 20 s`.
const RATE_TOLERANCE: f64 = 0.01;
const HEADER: [&str; 6] = ["subject", "activity", "t", "ax", "ay", "az"];

/// Last timestamp seen and samples per axis.
type Stream = (f64, [Vec<f64>; 3]);

/// Reads `subject,activity,t,ax,ay,az` rows and cuts each
/// (subject, activity) stream into non-overlapping 300-sample windows,
/// dropping any trailing partial window. Row numbers in errors count the
/// header as row 1.
pub fn ingest_reader<R: Read>(reader: R) -> Result<Vec<SubjectDataset>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Ingest { row: 1, msg: e.to_string() })?
        .clone();
    let mut col = [0usize; 6];
    for (slot, name) in col.iter_mut().zip(HEADER) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Ingest {
                row: 1,
                msg: format!("missing column `{name}`"),
            })?;
    }

    let mut streams: BTreeMap<(u32, usize), Stream> = BTreeMap::new();
    let period = 1.0 / SAMPLE_RATE_HZ;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Ingest { row, msg: e.to_string() })?;
        let field = |k: usize| rec.get(col[k]).map(str::trim).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            field(k)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Ingest {
                    row,
                    msg: format!("column `{}` is not a finite number: `{}`", HEADER[k], field(k)),
                })
        };
        let subject: u32 = field(0).parse().map_err(|_| Error::Ingest {
            row,
            msg: format!("subject `{}` is not a non-negative integer", field(0)),
        })?;
        let activity = field(1);
        let label = activity_index(activity).ok_or_else(|| Error::Ingest {
            row,
            msg: format!("unknown activity `{activity}`"),
        })?;
        let t = num(2)?;
        let values = [num(3)?, num(4)?, num(5)?];
        let entry = streams.entry((subject, label)).or_insert((f64::NAN, Default::default()));
        if !entry.0.is_nan() {
            let dt = t - entry.0;
            if dt <= 0.0 {
                return Err(Error::Ingest {
                    row,
                    msg: format!("time {t} does not increase (previous {})", entry.0),
                });
            }
            if ((dt - period) / period).abs() > RATE_TOLERANCE {
                return Err(Error::Ingest {
                    row,
                    msg: format!("sampling interval {dt} s is not 20 Hz within 1%"),
                });
            }
        }
        entry.0 = t;
        for (axis, v) in entry.1.iter_mut().zip(values) {
            axis.push(v);
        }
    }

    let mut out: BTreeMap<u32, SubjectDataset> = BTreeMap::new();
    for ((subject, label), (_, axes)) in streams {
        let ds = out.entry(subject).or_insert_with(|| SubjectDataset::new(subject));
        let n = axes[0].len() / WINDOW_LEN;
        for w in 0..n {
            let mut d = Vec::with_capacity(CHANNELS * WINDOW_LEN);
            for axis in &axes {
                d.extend_from_slice(&axis[w * WINDOW_LEN..(w + 1) * WINDOW_LEN]);
            }
            ds.streams[label].push(SampleWindow {
                readings: Tensor::new(vec![CHANNELS, WINDOW_LEN], d)?,
                label,
                subject,
            });
        }
    }
    Ok(out.into_values().collect())
}

pub fn ingest_csv(path: &Path) -> Result<Vec<SubjectDataset>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(f)).map_err(|e| e.context(format!("ingesting {}", path.display())))
}

/// Writes datasets in the ingestion schema. Each (subject, activity) stream
/// is the concatenation of its windows with `t` starting at zero.
pub fn write_csv_to<W: Write>(datasets: &[SubjectDataset], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Argument(format!("CSV write failed: {e}"));
    w.write_record(HEADER).map_err(csv_err)?;
    for d in datasets {
        for (label, stream) in d.streams.iter().enumerate() {
            for (k, win) in stream.iter().enumerate() {
                let x = win.readings.data();
                for n in 0..WINDOW_LEN {
                    let idx = k * WINDOW_LEN + n;
                    w.write_record([
                        d.subject.to_string(),
                        ACTIVITIES[label].to_string(),
                        format!("{:.2}", idx as f64 / SAMPLE_RATE_HZ),
                        x[n].to_string(),
                        x[WINDOW_LEN + n].to_string(),
                        x[2 * WINDOW_LEN + n].to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::Argument(format!("CSV flush failed: {e}")))
}

pub fn write_csv(datasets: &[SubjectDataset], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(datasets, std::io::BufWriter::new(f)).map_err(|e| e.context(format!("writing {}", path.display())))
}
