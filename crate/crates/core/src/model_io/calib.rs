//! Calibration and input sequence files.
//!
//! CSV: a header row with a `seq` column plus one column per feature. Rows
//! of one sequence are contiguous and in time order.
//!
//! Raw: `rank u32` (2 or 3), then `rank` dims as `u64`, then the values as
//! little-endian `f32` in row-major order. Rank 2 is a single `[T, n]`
//! sequence, rank 3 is `[count, T, n]`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

type Sequences = Vec<Vec<Vec<f64>>>;

fn csv_err(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
        _ => Error::Malformed(e.to_string()),
    }
}

pub fn read_csv(reader: impl Read) -> Result<Sequences> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let seq_col = headers
        .iter()
        .position(|h| h.trim() == "seq")
        .ok_or_else(|| Error::Malformed("CSV has no `seq` column".into()))?;
    let width = headers.len() - 1;
    if width == 0 {
        return Err(Error::Malformed("CSV has no feature columns".into()));
    }
    let mut out: Sequences = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let id = rec[seq_col].trim().to_string();
        let mut row = Vec::with_capacity(width);
        for (i, field) in rec.iter().enumerate() {
            if i == seq_col {
                continue;
            }
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Malformed(format!("row {}: `{field}` is not a number", line + 2)))?;
            row.push(v);
        }
        if ids.last() != Some(&id) {
            if ids.contains(&id) {
                return Err(Error::Malformed(format!("sequence `{id}` is not contiguous")));
            }
            ids.push(id);
            out.push(Vec::new());
        }
        out.last_mut().expect("pushed above").push(row);
    }
    if out.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    Ok(out)
}

/// Writes sequences with a `seq` column numbered from 0. Floats are written
/// in shortest round-trip form, so `read_csv` recovers them exactly.
pub fn write_csv(writer: impl Write, seqs: &[Vec<Vec<f64>>]) -> Result<()> {
    let width = seqs.iter().flatten().map(Vec::len).next().unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["seq".to_string()];
    header.extend((0..width).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (s, seq) in seqs.iter().enumerate() {
        for row in seq {
            if row.len() != width {
                return Err(Error::ShapeMismatch {
                    expected: vec![width],
                    actual: vec![row.len()],
                });
            }
            let mut rec = vec![s.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_f32(bytes: &[u8]) -> Result<Sequences> {
    let short = || Error::Malformed("raw input shorter than its shape header".into());
    let rank = u32::from_le_bytes(bytes.get(..4).ok_or_else(short)?.try_into().unwrap()) as usize;
    if rank != 2 && rank != 3 {
        return Err(Error::Malformed(format!("raw input rank {rank}, expected 2 or 3")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 4 + 8 * i;
        let d = u64::from_le_bytes(bytes.get(at..at + 8).ok_or_else(short)?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| Error::Malformed(format!("dim {d} too large")))?);
    }
    if rank == 2 {
        dims.insert(0, 1);
    }
    let (count, len, width) = (dims[0], dims[1], dims[2]);
    let body = &bytes[4 + 8 * rank..];
    let n = count
        .checked_mul(len)
        .and_then(|x| x.checked_mul(width))
        .ok_or_else(|| Error::Malformed("raw shape overflows".into()))?;
    if body.len() != n * 4 {
        return Err(Error::Malformed(format!(
            "raw body has {} bytes, shape {count}x{len}x{width} needs {}",
            body.len(),
            n * 4
        )));
    }
    if n == 0 {
        return Err(Error::Empty("calibration set"));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(vals
        .chunks(len * width)
        .map(|s| s.chunks(width).map(<[f64]>::to_vec).collect())
        .collect())
}

/// Writes a rank-3 raw file. Sequences must share one length and width.
pub fn write_raw_f32(seqs: &[Vec<Vec<f64>>]) -> Result<Vec<u8>> {
    let len = seqs.first().map_or(0, Vec::len);
    let width = seqs.first().and_then(|s| s.first()).map_or(0, Vec::len);
    let mut out = Vec::new();
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in [seqs.len(), len, width] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for seq in seqs {
        if seq.len() != len {
            return Err(Error::ShapeMismatch {
                expected: vec![len, width],
                actual: vec![seq.len(), width],
            });
        }
        for row in seq {
            if row.len() != width {
                return Err(Error::ShapeMismatch {
                    expected: vec![width],
                    actual: vec![row.len()],
                });
            }
            for v in row {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Reads `.csv` files as CSV and anything else as raw `f32`.
pub fn read_calibration(path: impl AsRef<Path>) -> Result<Sequences> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_csv(bytes.as_slice())
    } else {
        read_raw_f32(&bytes)
    }
}
