//! Serialization of one-bit batches.
//!
//! Binary layout (little-endian), extension `.scob`:
//!
//! ```text
//! offset  size  field
//! 0       4     magic  "SCOB"
//! 4       2     format version (1)
//! 6       1     flags (bit 0: complex batch)
//! 7       1     reserved (0)
//! 8       4     channels  (u32)
//! 12      8     samples   (u64)
//! 20      8     seed      (u64)
//! 28      4     schedule JSON length L (u32)
//! 32      L     schedule as JSON (ThresholdSchedule)
//! 32+L    ...   packed sign bits, channel-major (bit index i*N + t),
//!               bit 1 means +1; final byte zero-padded
//! ```
//!
//! The CSV dump (one row per sample: `t,x_1,...,x_M`) is for debugging and
//! is not read back.

use crate::error::{Error, Result};
use crate::quantizer::{OneBitBatch, ThresholdSchedule};
use nalgebra::DMatrix;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"SCOB";
const VERSION: u16 = 1;

/// Serialize a batch into the documented binary layout.
pub fn write_batch<W: Write>(batch: &OneBitBatch, mut w: W) -> Result<()> {
    let m = batch.channels();
    let n = batch.len();
    let schedule_json = serde_json::to_vec(batch.schedule())?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[u8::from(batch.is_complex()), 0u8])?;
    w.write_all(&(m as u32).to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&batch.seed().to_le_bytes())?;
    w.write_all(&(schedule_json.len() as u32).to_le_bytes())?;
    w.write_all(&schedule_json)?;

    let total_bits = m * n;
    let mut packed = vec![0u8; total_bits.div_ceil(8)];
    for i in 0..m {
        for t in 0..n {
            if batch.sign(i, t) == 1 {
                let bit = i * n + t;
                packed[bit / 8] |= 1 << (bit % 8);
            }
        }
    }
    w.write_all(&packed)?;
    Ok(())
}

/// Read a batch back from the binary layout.
pub fn read_batch<R: Read>(mut r: R) -> Result<OneBitBatch> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic; not a one-bit batch file".into()));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    r.read_exact(&mut buf2)?;
    let complex = match buf2[0] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("unknown flags byte {f:#x}"))),
    };
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let m = u32::from_le_bytes(buf4) as usize;
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let n = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8)?;
    let seed = u64::from_le_bytes(buf8);
    r.read_exact(&mut buf4)?;
    let sched_len = u32::from_le_bytes(buf4) as usize;
    let mut sched_json = vec![0u8; sched_len];
    r.read_exact(&mut sched_json)?;
    let schedule: ThresholdSchedule = serde_json::from_slice(&sched_json)?;

    let total_bits = m
        .checked_mul(n)
        .ok_or_else(|| Error::Format("batch dimensions overflow".into()))?;
    let mut packed = vec![0u8; total_bits.div_ceil(8)];
    r.read_exact(&mut packed)?;
    let mut signs = DMatrix::from_element(m, n, -1i8);
    for i in 0..m {
        for t in 0..n {
            let bit = i * n + t;
            if packed[bit / 8] & (1 << (bit % 8)) != 0 {
                signs[(i, t)] = 1;
            }
        }
    }
    OneBitBatch::from_parts(signs, schedule, seed, complex)
}

/// Dump the signs as CSV, one row per sample.
pub fn write_batch_csv<W: Write>(batch: &OneBitBatch, mut w: W) -> Result<()> {
    write!(w, "t")?;
    for i in 0..batch.channels() {
        write!(w, ",x{}", i + 1)?;
    }
    writeln!(w)?;
    for t in 0..batch.len() {
        write!(w, "{t}")?;
        for i in 0..batch.channels() {
            write!(w, ",{}", batch.sign(i, t))?;
        }
        writeln!(w)?;
    }
    Ok(())
}
