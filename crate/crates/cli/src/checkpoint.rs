//! Binary checkpoint container for a trained flow.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 8     | magic `JKOFLOW\0`                        |
//! | 4     | format version (u32)                     |
//! | 8     | payload length (u64)                     |
//! | n     | payload                                  |
//! | 32    | SHA-256 of the payload                   |
//!
//! The payload holds the architecture, integrator settings, standardizer,
//! potential, metadata and every block's interval and parameters, with
//! floats stored as raw IEEE-754 bits so a load reproduces the saved flow
//! exactly.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use jkoflow_core::datasets::Standardizer;
use jkoflow_core::flow::FlowMetadata;
use jkoflow_core::{
    ArchSpec, BlockInterval, DivergenceMode, FlowNetwork, IntegratorConfig, ParamVector, Potential, ResidualVectorField,
};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"JKOFLOW\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).expect("vec write");
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.write_f64::<LE>(v).expect("vec write");
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a>(Cursor<&'a [u8]>);

type Parse<T> = Result<T, String>;

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }
    fn u8(&mut self) -> Parse<u8> {
        self.0.read_u8().map_err(|_| "payload truncated".to_string())
    }
    fn u64(&mut self) -> Parse<u64> {
        self.0.read_u64::<LE>().map_err(|_| "payload truncated".to_string())
    }
    fn bool(&mut self) -> Parse<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(format!("invalid flag byte {b}")),
        }
    }
    /// A count of items of `item` bytes each that must fit in the rest.
    fn count(&mut self, item: usize) -> Parse<usize> {
        let n = self.u64()?;
        match usize::try_from(n) {
            Ok(n) if n.saturating_mul(item) <= self.remaining() => Ok(n),
            _ => Err(format!("length {n} exceeds the payload")),
        }
    }
    fn f64(&mut self) -> Parse<f64> {
        self.0.read_f64::<LE>().map_err(|_| "payload truncated".to_string())
    }
    fn f64s(&mut self) -> Parse<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
}

fn write_block(w: &mut Writer, b: &ResidualVectorField) {
    w.f64(b.interval.t_start);
    w.f64(b.interval.t_end);
    w.f64s(b.params.as_slice());
}

fn read_block(r: &mut Reader, arch: &ArchSpec) -> Parse<ResidualVectorField> {
    let (t0, t1) = (r.f64()?, r.f64()?);
    let params = ParamVector(r.f64s()?);
    let iv = BlockInterval::new(t0, t1).map_err(|e| e.to_string())?;
    ResidualVectorField::new(arch.clone(), params, iv).map_err(|e| e.to_string())
}

fn payload(flow: &FlowNetwork) -> Vec<u8> {
    let mut w = Writer::default();
    let a = &flow.arch;
    w.usize(a.input_dim);
    w.usize(a.hidden_widths.len());
    a.hidden_widths.iter().for_each(|&h| w.usize(h));
    w.f64(a.beta);
    w.u8(u8::from(a.time_input));

    let ic = &flow.integrator;
    w.usize(ic.substeps);
    w.u8(match ic.divergence_mode {
        DivergenceMode::Exact => 0,
        DivergenceMode::HutchinsonFd => 1,
    });
    w.usize(ic.n_probes);
    w.f64(ic.sigma0);

    let s = &flow.standardizer;
    w.f64s(&s.mean);
    w.f64s(&s.scale);
    w.usize(s.fitted_on);

    match &flow.potential {
        Potential::StandardGaussian => w.u8(0),
        Potential::GaussianMixture { means, variance } => {
            w.u8(1);
            w.usize(means.len());
            means.iter().for_each(|m| w.f64s(m));
            w.f64(*variance);
        }
    }

    let m = &flow.metadata;
    w.u64(m.seed);
    w.u64(m.config_hash);
    w.u8(u8::from(m.unterminated));

    w.usize(flow.blocks.len());
    flow.blocks.iter().for_each(|b| write_block(&mut w, b));
    match &flow.free_block {
        Some(b) => {
            w.u8(1);
            write_block(&mut w, b);
        }
        None => w.u8(0),
    }
    w.0
}

fn parse_payload(bytes: &[u8]) -> Parse<FlowNetwork> {
    let mut r = Reader(Cursor::new(bytes));
    let input_dim = r.u64()? as usize;
    let depth = r.count(8)?;
    let hidden_widths = (0..depth).map(|_| r.u64().map(|v| v as usize)).collect::<Parse<_>>()?;
    let arch = ArchSpec {
        input_dim,
        hidden_widths,
        beta: r.f64()?,
        time_input: r.bool()?,
    };
    arch.validate().map_err(|e| e.to_string())?;

    let integrator = IntegratorConfig {
        substeps: r.u64()? as usize,
        divergence_mode: match r.u8()? {
            0 => DivergenceMode::Exact,
            1 => DivergenceMode::HutchinsonFd,
            b => return Err(format!("unknown divergence mode {b}")),
        },
        n_probes: r.u64()? as usize,
        sigma0: r.f64()?,
    };
    integrator.validate().map_err(|e| e.to_string())?;

    let standardizer = Standardizer {
        mean: r.f64s()?,
        scale: r.f64s()?,
        fitted_on: r.u64()? as usize,
    };
    standardizer.validate().map_err(|e| e.to_string())?;

    let potential = match r.u8()? {
        0 => Potential::StandardGaussian,
        1 => {
            let k = r.count(8)?;
            let means = (0..k).map(|_| r.f64s()).collect::<Parse<Vec<_>>>()?;
            Potential::mixture(means, r.f64()?).map_err(|e| e.to_string())?
        }
        b => return Err(format!("unknown potential tag {b}")),
    };

    let metadata = FlowMetadata {
        seed: r.u64()?,
        config_hash: r.u64()?,
        unterminated: r.bool()?,
    };

    let n = r.count(24)?;
    let blocks = (0..n).map(|_| read_block(&mut r, &arch)).collect::<Parse<Vec<_>>>()?;
    let free_block = if r.bool()? { Some(read_block(&mut r, &arch)?) } else { None };
    if r.remaining() != 0 {
        return Err(format!("{} trailing bytes", r.remaining()));
    }
    let flow = FlowNetwork {
        arch,
        blocks,
        free_block,
        standardizer,
        potential,
        integrator,
        metadata,
    };
    flow.validate().map_err(|e| e.to_string())?;
    Ok(flow)
}

pub fn encode(flow: &FlowNetwork) -> Vec<u8> {
    let body = payload(flow);
    let mut out = Vec::with_capacity(HEADER + body.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(FORMAT_VERSION).expect("vec write");
    out.write_u64::<LE>(body.len() as u64).expect("vec write");
    out.extend_from_slice(&body);
    out.extend_from_slice(&Sha256::digest(&body));
    out
}

/// Why a byte string is not a loadable checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    NotACheckpoint,
    Version(u32),
    Integrity(String),
}

impl std::fmt::Display for DecodeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeError::NotACheckpoint => write!(f, "not a checkpoint (bad magic)"),
            DecodeError::Version(v) => {
                write!(f, "format version {v} is not supported (this build reads version {FORMAT_VERSION})")
            }
            DecodeError::Integrity(m) => write!(f, "integrity check failed: {m}"),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<FlowNetwork, DecodeError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(DecodeError::NotACheckpoint);
    }
    let mut head = Cursor::new(&bytes[8..]);
    let version = head
        .read_u32::<LE>()
        .map_err(|_| DecodeError::Integrity("header truncated".into()))?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::Version(version));
    }
    let len = head
        .read_u64::<LE>()
        .map_err(|_| DecodeError::Integrity("header truncated".into()))?;
    let expected = (bytes.len() as u64).checked_sub((HEADER + DIGEST) as u64);
    if expected != Some(len) {
        return Err(DecodeError::Integrity(format!(
            "length field says {len} payload bytes, file holds {}",
            expected.map_or_else(|| "fewer".to_string(), |e| e.to_string())
        )));
    }
    let body = &bytes[HEADER..HEADER + len as usize];
    if Sha256::digest(body).as_slice() != &bytes[HEADER + len as usize..] {
        return Err(DecodeError::Integrity("checksum mismatch".into()));
    }
    parse_payload(body).map_err(DecodeError::Integrity)
}

pub fn save_checkpoint(path: &Path, flow: &FlowNetwork) -> CliResult<()> {
    write_atomic(path, &encode(flow))
}

pub fn load_checkpoint(path: &Path) -> CliResult<FlowNetwork> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
