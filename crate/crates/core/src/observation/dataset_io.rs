//! Dataset files: a JSON header followed by raw little-endian numeric blocks.
//!
//! Layout:
//! ```text
//! magic   8 bytes  b"DYNDSET1"
//! len     u64 LE   header byte count
//! header  JSON     metadata (system, delta, r, operator, seed, shapes, ...)
//! blocks  per sequence, in order:
//!           states  seq_len * d_z  f64 LE
//!           values  seq_len * d_x  f64 LE
//!           mask    ceil(seq_len * d_x / 8) bytes, LSB-first row-major bits
//! ```
//! Floats are stored bit-exactly, so save/load round-trips are lossless and
//! file bytes are a pure function of the dataset contents.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, ObservationSeries, OperatorTag};
use crate::error::{Error, Result};
use crate::systems::{StateSequence, SystemTag};

const MAGIC: &[u8; 8] = b"DYNDSET1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    system: SystemTag,
    delta: f64,
    r: f64,
    missing_rate: f64,
    operator: OperatorTag,
    seed: u64,
    d_z: usize,
    d_x: usize,
    noise_std: Vec<f64>,
    seq_lens: Vec<usize>,
}

fn pack_bits(bits: impl Iterator<Item = bool>, n: usize) -> Vec<u8> {
    let mut out = vec![0u8; n.div_ceil(8)];
    for (i, b) in bits.enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

fn write_f64_block(w: &mut impl Write, rows: &[Vec<f64>]) -> Result<()> {
    for row in rows {
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_named(r: &mut impl Read, buf: &mut [u8], section: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        Error::format(format!("dataset: {section} section truncated or unreadable ({e})"))
    })
}

/// Write `dataset` to `path`. The file is bitwise reproducible from the
/// dataset contents.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    if dataset.truths.is_empty() {
        return Err(Error::validation("save_dataset: empty dataset"));
    }
    let d_z = dataset.truths[0].dim();
    let d_x = dataset.observations[0].dim();
    for (i, (t, o)) in dataset.truths.iter().zip(&dataset.observations).enumerate() {
        if t.dim() != d_z || o.dim() != d_x {
            return Err(Error::validation(format!(
                "save_dataset: sequence {i} has inconsistent dimensions"
            )));
        }
    }
    if dataset.noise_std.len() != d_x {
        return Err(Error::validation(format!(
            "save_dataset: {} noise entries for observation dimension {d_x}",
            dataset.noise_std.len()
        )));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        system: dataset.system,
        delta: dataset.delta,
        r: dataset.r,
        missing_rate: dataset.missing_rate,
        operator: dataset.operator,
        seed: dataset.seed,
        d_z,
        d_x,
        noise_std: dataset.noise_std.clone(),
        seq_lens: dataset.truths.iter().map(|t| t.len()).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (truth, obs) in dataset.truths.iter().zip(&dataset.observations) {
        write_f64_block(&mut w, &truth.states)?;
        write_f64_block(&mut w, &obs.values)?;
        let n_bits = obs.len() * d_x;
        let packed = pack_bits(obs.mask.iter().flatten().copied(), n_bits);
        w.write_all(&packed)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact_named(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format("dataset: bad magic (not a dataset file)"));
    }
    let mut len_bytes = [0u8; 8];
    read_exact_named(&mut r, &mut len_bytes, "header length")?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_named(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(format!("dataset: malformed header ({e})")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "dataset: unsupported format version {}",
            header.format_version
        )));
    }
    if header.noise_std.len() != header.d_x {
        return Err(Error::format(format!(
            "dataset: header declares d_x = {} but {} noise entries",
            header.d_x,
            header.noise_std.len()
        )));
    }

    let mut truths = Vec::with_capacity(header.seq_lens.len());
    let mut observations = Vec::with_capacity(header.seq_lens.len());
    for (i, &seq_len) in header.seq_lens.iter().enumerate() {
        let mut read_rows = |d: usize, section: String| -> Result<Vec<Vec<f64>>> {
            let mut buf = vec![0u8; seq_len * d * 8];
            read_exact_named(&mut r, &mut buf, &section)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
                .collect::<Vec<f64>>()
                .chunks_exact(d)
                .map(|c| c.to_vec())
                .collect())
        };
        let states = read_rows(header.d_z, format!("states (sequence {i})"))?;
        let values = read_rows(header.d_x, format!("values (sequence {i})"))?;
        let n_bits = seq_len * header.d_x;
        let mut packed = vec![0u8; n_bits.div_ceil(8)];
        read_exact_named(&mut r, &mut packed, &format!("mask (sequence {i})"))?;
        let flat = unpack_bits(&packed, n_bits);
        let mask: Vec<Vec<bool>> = flat.chunks_exact(header.d_x).map(|c| c.to_vec()).collect();

        truths.push(StateSequence { states, delta: header.delta, tag: header.system });
        observations.push(ObservationSeries {
            values,
            mask,
            delta: header.delta,
            r: header.r,
            operator: header.operator,
        });
    }

    // Trailing garbage indicates a corrupt or mismatched file.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("dataset: trailing bytes after final mask section"));
    }

    Ok(Dataset {
        system: header.system,
        delta: header.delta,
        r: header.r,
        missing_rate: header.missing_rate,
        operator: header.operator,
        seed: header.seed,
        noise_std: header.noise_std,
        truths,
        observations,
    })
}
