//! Binary checkpoint format.
//!
//! ```text
//! "HDDM" | version u32 | objective u8 | schedule u8 | L u16 | d u16 | data_dim u16
//!        | cond_count u16 | step_count u64 | tensors... | crc32 u32
//! tensor = name_len u16 | name | rank u8 | dims u32 × rank | f64 × Π dims
//! ```
//!
//! All integers and floats are little-endian. Live tensors come first, then
//! the EMA tensors under an `ema.` prefix, then `schedule.table` (`[n, 3]`
//! rows of `t, α, σ`) for tabulated schedules. The CRC32 covers every byte
//! after the version field up to the checksum itself.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::schedules::{Schedule, ScheduleTable};

use super::network::{ArchConfig, Network};
use super::{ExpertModel, Objective, RouterModel};

pub const MAGIC: &[u8; 4] = b"HDDM";
pub const VERSION: u32 = 1;
const EMA_PREFIX: &str = "ema.";
const TABLE_NAME: &str = "schedule.table";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Expert(Objective),
    Router,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Expert(Objective::Epsilon) => 0,
            ModelKind::Expert(Objective::Velocity) => 1,
            ModelKind::Router => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Expert(Objective::Epsilon)),
            1 => Ok(ModelKind::Expert(Objective::Velocity)),
            2 => Ok(ModelKind::Router),
            other => Err(Error::Corrupt(format!("unknown objective tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub schedule: Schedule,
    pub network: Network,
}

fn narrow_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Shape(format!("{what} = {v} does not fit the checkpoint header")))
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) -> Result<()> {
    out.extend_from_slice(&narrow_u16(name.len(), "tensor name length")?.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for d in dims {
        let d = u32::try_from(*d).map_err(|_| Error::Shape(format!("tensor `{name}` dimension too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?.to_string();
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let count = count
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` has implausible shape {dims:?}")))?;
        let raw = self.take(count * 8)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, dims, values))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = &self.network;
        let arch = net.arch();
        let mut out = Vec::with_capacity(64 + 2 * 8 * net.layout().len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.push(self.schedule.tag());
        out.extend_from_slice(&narrow_u16(arch.blocks, "blocks")?.to_le_bytes());
        out.extend_from_slice(&narrow_u16(arch.hidden, "hidden width")?.to_le_bytes());
        out.extend_from_slice(&narrow_u16(arch.input_dim, "data dimension")?.to_le_bytes());
        out.extend_from_slice(&narrow_u16(arch.cond_count, "condition count")?.to_le_bytes());
        out.extend_from_slice(&net.step_count().to_le_bytes());
        for spec in net.layout().tensors() {
            put_tensor(&mut out, &spec.name, &spec.dims, &net.params()[spec.range()])?;
        }
        for spec in net.layout().tensors() {
            put_tensor(&mut out, &format!("{EMA_PREFIX}{}", spec.name), &spec.dims, &net.ema()[spec.range()])?;
        }
        if let Schedule::Tabulated(table) = &self.schedule {
            let rows: Vec<f64> = table.knots().flat_map(|(t, a, s)| [t, a, s]).collect();
            put_tensor(&mut out, TABLE_NAME, &[rows.len() / 3, 3], &rows)?;
        }
        let crc = crc32fast::hash(&out[8..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic(source.to_string()));
        }
        if bytes.len() < 12 {
            return Err(Error::Corrupt("file shorter than header".into()));
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if found != VERSION {
            return Err(Error::Version { found, expected: VERSION });
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[8..body_end]);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }

        let mut r = Reader { bytes: &bytes[..body_end], pos: 8 };
        let kind = ModelKind::from_tag(r.u8()?)?;
        let schedule_tag = r.u8()?;
        let blocks = r.u16()? as usize;
        let hidden = r.u16()? as usize;
        let input_dim = r.u16()? as usize;
        let cond_count = r.u16()? as usize;
        let step_count = r.u64()?;

        let mut tensors = Vec::new();
        while r.pos < body_end {
            tensors.push(r.tensor()?);
        }
        let find = |name: &str| tensors.iter().find(|(n, _, _)| n == name);
        let output_dim = find("head.w").map(|(_, d, _)| d[0]).ok_or_else(|| Error::Corrupt("missing tensor `head.w`".into()))?;
        let mlp_hidden =
            find("blocks.0.mlp.fc1.w").map(|(_, d, _)| d[0]).ok_or_else(|| Error::Corrupt("missing tensor `blocks.0.mlp.fc1.w`".into()))?;
        let arch = ArchConfig { input_dim, output_dim, hidden, blocks, mlp_hidden, cond_count };

        let template = Network::new(arch, 0)?;
        let layout = template.layout();
        let mut params = vec![0.0; layout.len()];
        let mut ema = vec![0.0; layout.len()];
        let expected = 2 * layout.tensors().len() + usize::from(schedule_tag == 2);
        if tensors.len() != expected {
            return Err(Error::Corrupt(format!("expected {expected} tensors, found {}", tensors.len())));
        }
        for (name, dims, values) in &tensors {
            if name == TABLE_NAME {
                continue;
            }
            let (dst, base) = match name.strip_prefix(EMA_PREFIX) {
                Some(base) => (&mut ema, base),
                None => (&mut params, name.as_str()),
            };
            let spec = layout.get(base).ok_or_else(|| Error::Corrupt(format!("unexpected tensor `{name}`")))?;
            if &spec.dims != dims {
                return Err(Error::Shape(format!("tensor `{name}` has shape {dims:?}, expected {:?}", spec.dims)));
            }
            dst[spec.range()].copy_from_slice(values);
        }
        for spec in layout.tensors() {
            if find(&spec.name).is_none() || find(&format!("{EMA_PREFIX}{}", spec.name)).is_none() {
                return Err(Error::Corrupt(format!("missing tensor `{}`", spec.name)));
            }
        }
        let schedule = match schedule_tag {
            0 => Schedule::Linear,
            1 => Schedule::Cosine,
            2 => {
                let (_, dims, rows) = find(TABLE_NAME).ok_or_else(|| Error::Corrupt("missing schedule table".into()))?;
                if dims.len() != 2 || dims[1] != 3 {
                    return Err(Error::Corrupt("schedule table must have shape [n, 3]".into()));
                }
                let col = |j: usize| rows.chunks_exact(3).map(|r| r[j]).collect::<Vec<_>>();
                Schedule::Tabulated(ScheduleTable::new(col(0), col(1), col(2))?)
            }
            other => return Err(Error::Corrupt(format!("unknown schedule tag {other}"))),
        };
        let network = Network::from_parts(arch, params, ema, step_count)?;
        Ok(Self { kind, schedule, network })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::MissingFile { path: path.to_path_buf(), hint: "train or convert a checkpoint first".into() }
            }
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn into_expert(self) -> Result<ExpertModel> {
        match self.kind {
            ModelKind::Expert(objective) => ExpertModel::from_network(objective, self.schedule, self.network),
            ModelKind::Router => Err(Error::Type("checkpoint holds a router, expected an expert".into())),
        }
    }

    pub fn into_router(self) -> Result<RouterModel> {
        match self.kind {
            ModelKind::Router => Ok(RouterModel::from_network(self.network)),
            ModelKind::Expert(_) => Err(Error::Type("checkpoint holds an expert, expected a router".into())),
        }
    }

    /// Names of tensors (live and EMA) whose values differ bit-wise.
    pub fn diff(&self, other: &Checkpoint) -> Result<Vec<String>> {
        if self.network.arch() != other.network.arch() {
            return Err(Error::Shape(format!("architectures differ: {:?} vs {:?}", self.network.arch(), other.network.arch())));
        }
        let a = &self.network;
        let b = &other.network;
        let mut out = Vec::new();
        for spec in a.layout().tensors() {
            let r = spec.range();
            let bits = |x: &[f64], y: &[f64]| x.iter().zip(y).any(|(p, q)| p.to_bits() != q.to_bits());
            if bits(&a.params()[r.clone()], &b.params()[r.clone()]) {
                out.push(spec.name.clone());
            }
            if bits(&a.ema()[r.clone()], &b.ema()[r]) {
                out.push(format!("{EMA_PREFIX}{}", spec.name));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::ArchConfig;

    fn sample_expert(schedule: Schedule) -> ExpertModel {
        let mut m = ExpertModel::new(Objective::Epsilon, schedule, ArchConfig::expert(2, 8, 2, 3), 3).unwrap();
        for (i, v) in m.network_mut().params_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        m.network_mut().step_count = 42;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample_expert(Schedule::Cosine);
        let bytes = m.to_checkpoint().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap().into_expert().unwrap();
        assert_eq!(back, m);
        assert_eq!(&bytes[..4], b"HDDM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 1);
    }

    #[test]
    fn tabulated_schedule_round_trips() {
        let table = ScheduleTable::variance_preserving(vec![0.0, 0.5, 1.0], vec![1.0, 0.6, 0.0]).unwrap();
        let m = sample_expert(Schedule::Tabulated(table));
        let bytes = m.to_checkpoint().to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes, "mem").unwrap().into_expert().unwrap(), m);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample_expert(Schedule::Linear).to_checkpoint().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped, "mem"), Err(Error::Crc { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic, "mem"), Err(Error::BadMagic(_))));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version, "mem"), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn kind_mismatch_is_a_type_error() {
        let r = RouterModel::new(2, 3, 8, 1, 0).unwrap();
        let c = Checkpoint::from_bytes(&r.to_checkpoint().to_bytes().unwrap(), "mem").unwrap();
        assert!(matches!(c.clone().into_expert(), Err(Error::Type(_))));
        assert_eq!(c.into_router().unwrap(), r);
    }
}
