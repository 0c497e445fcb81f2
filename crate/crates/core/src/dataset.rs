//! Channel dataset files.
//!
//! CSV: a header row then one record per channel with 62 columns:
//! `id, distance_m, gain_db_0, delay_ns_0, aoa_deg_0, eoa_deg_0, ...,
//! eoa_deg_14`. JSON: an array of `{"id", "distance_m", "mpcs"}` objects
//! where `mpcs` holds 15 `[gain_db, delay_ns, aoa_deg, eoa_deg]` arrays.
//! Floats are written in shortest round-trip form, so both encodings
//! reproduce the stored values bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelRealization, Mpc, FEATURES_PER_PATH, NUM_PATHS};
use crate::error::DatasetError;

pub const CSV_COLUMNS: usize = 2 + NUM_PATHS * FEATURES_PER_PATH;

pub fn csv_header() -> Vec<String> {
    let mut h = vec!["id".to_string(), "distance_m".to_string()];
    for l in 0..NUM_PATHS {
        for name in ["gain_db", "delay_ns", "aoa_deg", "eoa_deg"] {
            h.push(format!("{name}_{l}"));
        }
    }
    h
}

pub fn write_csv<W: Write>(channels: &[ChannelRealization], writer: W) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(csv_header())?;
    for ch in channels {
        let mut rec = Vec::with_capacity(CSV_COLUMNS);
        rec.push(ch.id.clone());
        rec.push(ch.distance_m.to_string());
        for m in &ch.mpcs {
            rec.push(m.gain_db.to_string());
            rec.push(m.delay_ns.to_string());
            rec.push(m.aoa_deg.to_string());
            rec.push(m.eoa_deg.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<ChannelRealization>, DatasetError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let expected_header = csv_header();
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != CSV_COLUMNS {
            return Err(DatasetError::ColumnCount {
                record: i,
                expected: CSV_COLUMNS,
                got: rec.len(),
            });
        }
        if i == 0 {
            for (want, got) in expected_header.iter().zip(rec.iter()) {
                if want != got.trim() {
                    return Err(DatasetError::Header {
                        record: 0,
                        expected: want.clone(),
                        got: got.to_string(),
                    });
                }
            }
            continue;
        }
        let num = |s: &str| -> Result<f64, DatasetError> {
            s.trim().parse::<f64>().map_err(|_| DatasetError::Parse {
                record: i,
                value: s.to_string(),
            })
        };
        let distance_m = num(&rec[1])?;
        let mut mpcs = Vec::with_capacity(NUM_PATHS);
        for l in 0..NUM_PATHS {
            let base = 2 + l * FEATURES_PER_PATH;
            mpcs.push(Mpc::new(
                num(&rec[base])?,
                num(&rec[base + 1])?,
                num(&rec[base + 2])?,
                num(&rec[base + 3])?,
            ));
        }
        let ch = ChannelRealization {
            id: rec[0].to_string(),
            distance_m,
            mpcs,
        };
        ch.validate()
            .map_err(|source| DatasetError::Invalid { record: i, source })?;
        out.push(ch);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    distance_m: f64,
    mpcs: Vec<Vec<f64>>,
}

pub fn write_json<W: Write>(channels: &[ChannelRealization], writer: W) -> Result<(), DatasetError> {
    let records: Vec<JsonRecord> = channels
        .iter()
        .map(|ch| JsonRecord {
            id: ch.id.clone(),
            distance_m: ch.distance_m,
            mpcs: ch
                .mpcs
                .iter()
                .map(|m| vec![m.gain_db, m.delay_ns, m.aoa_deg, m.eoa_deg])
                .collect(),
        })
        .collect();
    serde_json::to_writer_pretty(writer, &records)?;
    Ok(())
}

pub fn read_json<R: Read>(reader: R) -> Result<Vec<ChannelRealization>, DatasetError> {
    let records: Vec<JsonRecord> = serde_json::from_reader(reader)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let flat_cols = r.mpcs.iter().map(Vec::len).sum::<usize>();
            if r.mpcs.len() != NUM_PATHS || r.mpcs.iter().any(|q| q.len() != FEATURES_PER_PATH) {
                return Err(DatasetError::ColumnCount {
                    record: i,
                    expected: CSV_COLUMNS,
                    got: 2 + flat_cols,
                });
            }
            let ch = ChannelRealization {
                id: r.id,
                distance_m: r.distance_m,
                mpcs: r.mpcs.iter().map(|q| Mpc::new(q[0], q[1], q[2], q[3])).collect(),
            };
            ch.validate()
                .map_err(|source| DatasetError::Invalid { record: i, source })?;
            Ok(ch)
        })
        .collect()
}

/// File format chosen by extension: `.json` is JSON, anything else CSV.
pub fn save(channels: &[ChannelRealization], path: &Path) -> Result<(), DatasetError> {
    let f = BufWriter::new(File::create(path)?);
    if is_json(path) {
        write_json(channels, f)
    } else {
        write_csv(channels, f)
    }
}

pub fn load(path: &Path) -> Result<Vec<ChannelRealization>, DatasetError> {
    let f = BufReader::new(File::open(path)?);
    if is_json(path) {
        read_json(f)
    } else {
        read_csv(f)
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}
