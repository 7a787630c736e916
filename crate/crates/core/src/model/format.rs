//! `.otsm` instance files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "OTSM"                 4-byte magic
//! major, minor           u16, u16
//! m                      u32
//! d_1 .. d_m             u32 each
//! r                      u32
//! sigma                  f64, NaN when absent
//! seed                   u64
//! flags                  u8: bit 0 ground truth present, bit 1 noise present
//! ext_len, ext           u32 + UTF-8 JSON object          (since 1.1)
//! S                      every block (i, j), i then j, row-major f64
//! V                      every block i, row-major f64     (if flagged)
//! W                      as S                             (if flagged)
//! crc32                  u32 (IEEE) over all preceding bytes
//! ```
//!
//! Minor versions may only add keys to the extension object; readers ignore
//! keys they do not know. A different major version is rejected.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, ProblemInstance, StiefelStack};
use crate::blockmat::{BlockPartition, BlockSymMatrix};
use crate::error::{OtsmError, Result};

pub const MAGIC: &[u8; 4] = b"OTSM";
pub const FORMAT_MAJOR: u16 = 1;
pub const FORMAT_MINOR: u16 = 1;

const FLAG_TRUTH: u8 = 1;
const FLAG_NOISE: u8 = 2;

#[derive(Debug, Default, Serialize, Deserialize)]
struct Extension {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rng: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaussian: Option<String>,
}

impl Extension {
    fn current() -> Self {
        Extension {
            rng: Some("chacha20, key = seed, stream = splitmix(tag, i, j)".into()),
            gaussian: Some("ziggurat (rand_distr StandardNormal)".into()),
        }
    }
}

pub fn save_instance(path: impl AsRef<Path>, instance: &ProblemInstance) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(instance, FORMAT_MINOR);
    let mut file = fs::File::create(path).map_err(|e| OtsmError::io(path, e))?;
    file.write_all(&bytes)
        .and_then(|_| file.sync_all())
        .map_err(|e| OtsmError::io(path, e))
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<ProblemInstance> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| OtsmError::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn encode(instance: &ProblemInstance, minor: u16) -> Vec<u8> {
    let p = instance.partition();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_MAJOR.to_le_bytes());
    out.extend_from_slice(&minor.to_le_bytes());
    out.extend_from_slice(&(p.num_blocks() as u32).to_le_bytes());
    for &d in p.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
    out.extend_from_slice(&instance.sigma().unwrap_or(f64::NAN).to_le_bytes());
    out.extend_from_slice(&instance.seed().to_le_bytes());
    let mut flags = 0u8;
    if instance.truth().is_some() {
        flags |= FLAG_TRUTH;
    }
    if instance.noise().is_some() {
        flags |= FLAG_NOISE;
    }
    out.push(flags);
    if minor >= 1 {
        let ext = serde_json::to_vec(&Extension::current()).expect("extension serializes");
        out.extend_from_slice(&(ext.len() as u32).to_le_bytes());
        out.extend_from_slice(&ext);
    }
    write_blocks(&mut out, instance.coupling());
    if let Some(v) = instance.truth() {
        for b in v.stack().blocks() {
            write_row_major(&mut out, b);
        }
    }
    if let Some(w) = instance.noise() {
        write_blocks(&mut out, w);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn write_blocks(out: &mut Vec<u8>, a: &BlockSymMatrix) {
    let m = a.partition().num_blocks();
    for i in 0..m {
        for j in 0..m {
            write_row_major(out, &a.block(i, j).into_owned());
        }
    }
}

fn write_row_major(out: &mut Vec<u8>, a: &DMatrix<f64>) {
    for row in a.row_iter() {
        for &x in row.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(OtsmError::Format(format!(
                "unexpected end of file while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
        let raw = self.take(rows * cols * 8, what)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        Ok(DMatrix::from_row_iterator(rows, cols, values))
    }

    fn block_matrix(&mut self, p: &BlockPartition, what: &str) -> Result<DMatrix<f64>> {
        let n = p.total_dim();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..p.num_blocks() {
            for j in 0..p.num_blocks() {
                let b = self.matrix(p.dim(i), p.dim(j), what)?;
                a.view_mut((p.offset(i), p.offset(j)), (p.dim(i), p.dim(j)))
                    .copy_from(&b);
            }
        }
        Ok(a)
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ProblemInstance> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4, "magic")? != MAGIC {
        return Err(OtsmError::Format("bad magic, not an .otsm file".into()));
    }
    let major = rd.u16("version")?;
    let minor = rd.u16("version")?;
    if major != FORMAT_MAJOR {
        return Err(OtsmError::UnsupportedVersion { major, minor });
    }
    let m = rd.u32("block count")? as usize;
    if m > bytes.len() / 4 {
        return Err(OtsmError::Format(format!("implausible block count {m}")));
    }
    let dims = (0..m)
        .map(|_| rd.u32("block sizes").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let r = rd.u32("rank")? as usize;
    let partition =
        BlockPartition::new(dims, r).map_err(|e| OtsmError::Format(format!("header: {e}")))?;
    let sigma = rd.f64("sigma")?;
    let seed = rd.u64("seed")?;
    let flags = rd.take(1, "flags")?[0];
    if minor >= 1 {
        let len = rd.u32("extension length")? as usize;
        let raw = rd.take(len, "extension")?;
        let _ext: Extension = serde_json::from_slice(raw)
            .map_err(|e| OtsmError::Format(format!("extension header: {e}")))?;
    }

    let n = partition.total_dim();
    if n.saturating_mul(n).saturating_mul(8) > bytes.len() {
        return Err(OtsmError::Format(format!(
            "file of {} bytes cannot hold a {n}x{n} coupling matrix",
            bytes.len()
        )));
    }
    let s = rd.block_matrix(&partition, "coupling matrix")?;
    let truth = if flags & FLAG_TRUTH != 0 {
        let blocks = (0..m)
            .map(|i| rd.matrix(partition.dim(i), r, "ground truth"))
            .collect::<Result<Vec<_>>>()?;
        let stack = StiefelStack::new(&partition, blocks)
            .map_err(|e| OtsmError::Format(format!("ground truth: {e}")))?;
        Some(GroundTruth::new(stack))
    } else {
        None
    };
    let noise = if flags & FLAG_NOISE != 0 {
        Some(rd.block_matrix(&partition, "noise matrix")?)
    } else {
        None
    };

    let body_end = rd.pos;
    let stored = rd.u32("checksum")?;
    if rd.pos != bytes.len() {
        return Err(OtsmError::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - rd.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(OtsmError::ChecksumMismatch { stored, computed });
    }

    let s = exact_symmetric(&partition, s, "coupling matrix")?;
    for i in 0..m {
        if s.block(i, i).iter().any(|&x| x != 0.0) {
            return Err(OtsmError::Format(format!(
                "coupling matrix has a nonzero diagonal block {i}"
            )));
        }
    }
    let noise = noise
        .map(|w| exact_symmetric(&partition, w, "noise matrix"))
        .transpose()?;
    let sigma = (!sigma.is_nan()).then_some(sigma);
    Ok(ProblemInstance::from_parts(s, truth, noise, sigma, seed))
}

fn exact_symmetric(p: &BlockPartition, a: DMatrix<f64>, what: &str) -> Result<BlockSymMatrix> {
    if a != a.transpose() {
        return Err(OtsmError::Format(format!("{what} is not symmetric")));
    }
    BlockSymMatrix::symmetrize(p, a)
}

/// Plain-text dump: one JSON header line, then `S` (D rows), `V` (D rows of r
/// values, if present) and `W` (D rows, if present), whitespace separated.
pub fn export_text(instance: &ProblemInstance) -> String {
    let p = instance.partition();
    let mut sections = vec!["S"];
    if instance.truth().is_some() {
        sections.push("V");
    }
    if instance.noise().is_some() {
        sections.push("W");
    }
    let header = serde_json::json!({
        "format": "otsm-text",
        "version": format!("{FORMAT_MAJOR}.{FORMAT_MINOR}"),
        "m": p.num_blocks(),
        "dims": p.dims(),
        "r": p.rank(),
        "sigma": instance.sigma(),
        "seed": instance.seed(),
        "sections": sections,
    });
    let mut out = header.to_string();
    out.push('\n');
    let mut dump = |a: &DMatrix<f64>| {
        for row in a.row_iter() {
            let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    };
    dump(instance.coupling().entries());
    if let Some(v) = instance.truth() {
        dump(&v.stacked());
    }
    if let Some(w) = instance.noise() {
        dump(w.entries());
    }
    out
}
