//! Binary run files: one file per training run.
//!
//! Layout: magic `DHZ1`, format version, a length-prefixed JSON header (run
//! identity, seed, architecture, deletion plan), then length-prefixed binary
//! records — step, epoch, flags, class masks, f32 parameters, f32
//! clamped/raw losses and accuracies. Records are self-delimiting, so files
//! can be appended to while a run is live and scanned without loading
//! parameters for records being skipped.

use crate::error::{Error, Result};
use crate::zoo::collect::{ForgettingPlan, RunKind, RunRecord};
use crate::zoo::net::MainNetSpec;
use crate::zoo::Checkpoint;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const RUN_MAGIC: &[u8; 4] = b"DHZ1";
pub const RUN_VERSION: u32 = 1;

const FLAG_FORGETTING_PHASE: u32 = 1;

/// Everything about a run except its checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub seed: u64,
    pub kind: RunKind,
    pub spec: MainNetSpec,
    pub undersampled_classes: Vec<(usize, f32)>,
    pub plan: Option<ForgettingPlan>,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
}

impl RunHeader {
    pub fn from_record(record: &RunRecord) -> RunHeader {
        RunHeader {
            run_id: record.run_id.clone(),
            seed: record.seed,
            kind: record.kind,
            spec: record.spec.clone(),
            undersampled_classes: record.undersampled_classes.clone(),
            plan: record.plan.clone(),
            steps_per_epoch: record.steps_per_epoch,
            total_steps: record.total_steps,
        }
    }
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn class_mask(classes: impl Iterator<Item = usize>) -> Result<u64> {
    let mut mask = 0u64;
    for c in classes {
        if c >= 64 {
            return Err(Error::format("class index above 63 cannot be mask-encoded"));
        }
        mask |= 1 << c;
    }
    Ok(mask)
}

fn mask_classes(mask: u64) -> Vec<usize> {
    (0..64).filter(|&c| mask & (1 << c) != 0).collect()
}

fn encode_record(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&ck.step.to_le_bytes());
    buf.extend_from_slice(&ck.epoch.to_le_bytes());
    let flags = if ck.is_forgetting_phase { FLAG_FORGETTING_PHASE } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&class_mask(ck.deleted_classes.iter().copied())?.to_le_bytes());
    let mut under = ck.undersampled_classes.clone();
    under.sort_by_key(|&(c, _)| c);
    buf.extend_from_slice(&class_mask(under.iter().map(|&(c, _)| c))?.to_le_bytes());
    for &(_, rate) in &under {
        buf.extend_from_slice(&rate.to_le_bytes());
    }
    push_f32s(&mut buf, &ck.params);
    push_f32s(&mut buf, &ck.class_losses);
    push_f32s(&mut buf, &ck.raw_class_losses);
    push_f32s(&mut buf, &ck.class_accuracies);
    Ok(buf)
}

/// Writes a completed run to `path`.
pub fn write_run_file(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RUN_MAGIC)?;
    w.write_all(&RUN_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&RunHeader::from_record(record))?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for ck in &record.checkpoints {
        let body = encode_record(ck)?;
        w.write_all(&(body.len() as u32).to_le_bytes())?;
        w.write_all(&body)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::format("truncated run record"));
        }
        let out = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_record(body: &[u8], header: &RunHeader) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: body, off: 0 };
    let step = cur.u64()?;
    let epoch = cur.u32()?;
    let flags = cur.u32()?;
    let deleted_classes = mask_classes(cur.u64()?);
    let under_classes = mask_classes(cur.u64()?);
    let rates = cur.f32s(under_classes.len())?;
    let params = cur.f32s(header.spec.param_count())?;
    let m = header.spec.num_classes;
    let class_losses = cur.f32s(m)?;
    let raw_class_losses = cur.f32s(m)?;
    let class_accuracies = cur.f32s(m)?;
    if cur.off != body.len() {
        return Err(Error::format("run record has trailing bytes"));
    }
    Ok(Checkpoint {
        params,
        class_losses,
        raw_class_losses,
        class_accuracies,
        run_id: header.run_id.clone(),
        step,
        epoch,
        is_forgetting_phase: flags & FLAG_FORGETTING_PHASE != 0,
        deleted_classes,
        undersampled_classes: under_classes.into_iter().zip(rates).collect(),
    })
}

fn read_header_from(reader: &mut impl Read, path: &Path) -> Result<RunHeader> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|_| bad(path, "missing magic"))?;
    if &magic != RUN_MAGIC {
        return Err(bad(path, "wrong magic bytes"));
    }
    let mut word = [0u8; 4];
    reader.read_exact(&mut word).map_err(|_| bad(path, "missing version"))?;
    let version = u32::from_le_bytes(word);
    if version != RUN_VERSION {
        return Err(bad(path, &format!("unsupported version {version}")));
    }
    reader.read_exact(&mut word).map_err(|_| bad(path, "missing header length"))?;
    let len = u32::from_le_bytes(word) as usize;
    let mut header = vec![0u8; len];
    reader.read_exact(&mut header).map_err(|_| bad(path, "truncated header"))?;
    Ok(serde_json::from_slice(&header)?)
}

fn bad(path: &Path, what: &str) -> Error {
    Error::format(format!("{}: {what}", path.display()))
}

/// Reads only the header of a run file.
pub fn read_run_header(path: &Path) -> Result<RunHeader> {
    let mut reader = BufReader::new(File::open(path)?);
    read_header_from(&mut reader, path)
}

/// Reads a whole run file back into its header and checkpoints.
pub fn read_run_file(path: &Path) -> Result<(RunHeader, Vec<Checkpoint>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut reader, path)?;
    let mut checkpoints = Vec::new();
    loop {
        let mut word = [0u8; 4];
        match reader.read_exact(&mut word) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(word) as usize;
        let mut body = vec![0u8; len];
        reader
            .read_exact(&mut body)
            .map_err(|_| bad(path, "truncated record"))?;
        checkpoints.push(decode_record(&body, &header)?);
    }
    Ok((header, checkpoints))
}
