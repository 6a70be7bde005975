//! Binary encodings of what crosses a silo boundary, and of saved models.
//!
//! All integers are little-endian. Both containers share one entry layout:
//!
//! ```text
//! u16      key length L
//! L bytes  key, UTF-8, "<layer>.<name>" e.g. "4.running_mean"
//! u8       tag: 0 = shared, 1 = local statistic
//! u8       rank D
//! D x u32  dimensions
//! ...      values, f32 or f64 LE per the container's dtype byte
//! ```
//!
//! Update message (`FEDSILOU`):
//!
//! ```text
//! 8   magic "FEDSILOU"
//! 2   version u16 = 1
//! 1   dtype: 4 = f32, 8 = f64
//! 4   sender u32 (silo id, or u32::MAX for the coordinator)
//! 4   round u32
//! 8   n_samples u64
//! 4   entry count u32, then the entries
//! ```
//!
//! Model snapshot (`FEDSILOM`):
//!
//! ```text
//! 8   magic "FEDSILOM"
//! 2   version u16 = 1
//! 1   dtype
//! 4   descriptor length u32, then the model spec as JSON
//! 4   entry count u32, then the entries
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamKey, ParamSet, ParamTag};
use crate::real::{Dtype, Real};
use crate::tensor::Tensor;

pub const UPDATE_MAGIC: &[u8; 8] = b"FEDSILOU";
pub const MODEL_MAGIC: &[u8; 8] = b"FEDSILOM";
pub const WIRE_VERSION: u16 = 1;
/// Sender id of the coordinator's broadcast.
pub const COORDINATOR: u32 = u32::MAX;

/// Parameters a silo sends after its local steps, or the coordinator's
/// broadcast of the aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedUpdate<R = f64> {
    pub silo_id: u32,
    pub round: u32,
    pub n_samples: u64,
    pub entries: BTreeMap<ParamKey, Tensor<R>>,
}

/// Raw entry as found in a message, before conversion to a float type.
#[derive(Clone, Debug, PartialEq)]
pub struct WireEntry {
    pub key: String,
    pub tag: ParamTag,
    pub shape: Vec<usize>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len_u32(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{what} {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    fn entry<R: Real>(&mut self, key: &ParamKey, value: &Tensor<R>) -> Result<()> {
        let name = key.to_string();
        self.u16(name.len() as u16);
        self.0.extend_from_slice(name.as_bytes());
        self.u8(match key.tag() {
            ParamTag::Shared => 0,
            ParamTag::LocalStatistic => 1,
        });
        let rank = u8::try_from(value.shape().len()).map_err(|_| Error::DimensionOverflow("rank".into()))?;
        self.u8(rank);
        for &d in value.shape() {
            self.len_u32(d, "dimension")?;
        }
        match R::DTYPE {
            Dtype::F32 => value
                .data()
                .iter()
                .for_each(|v| self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes())),
            Dtype::F64 => value
                .data()
                .iter()
                .for_each(|v| self.0.extend_from_slice(&v.as_f64().to_le_bytes())),
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| Error::DimensionOverflow("offset".into()))?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn header(&mut self, magic: &[u8; 8]) -> Result<Dtype> {
        let got = self.take(8)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u16()?;
        if version != WIRE_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        match self.u8()? {
            4 => Ok(Dtype::F32),
            8 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype width {other}"))),
        }
    }

    fn entry_header(&mut self) -> Result<WireEntry> {
        let len = self.u16()? as usize;
        let key = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("key is not UTF-8".into()))?
            .to_string();
        let tag = match self.u8()? {
            0 => ParamTag::Shared,
            1 => ParamTag::LocalStatistic,
            t => return Err(Error::Format(format!("unknown tag {t} for {key}"))),
        };
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(WireEntry { key, tag, shape })
    }

    fn values<R: Real>(&mut self, dtype: Dtype, count: usize) -> Result<Vec<R>> {
        let width = dtype.width();
        let bytes = self.take(
            count
                .checked_mul(width)
                .ok_or_else(|| Error::DimensionOverflow(format!("{count} values")))?,
        )?;
        Ok(match dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| R::of_f64(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| R::of_f64(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
        })
    }

    fn entry<R: Real>(&mut self, dtype: Dtype) -> Result<(ParamKey, Tensor<R>)> {
        let head = self.entry_header()?;
        let key: ParamKey = head.key.parse()?;
        if key.tag() != head.tag {
            return Err(Error::Format(format!("{key} carries the wrong tag")));
        }
        let count = head
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::DimensionOverflow(format!("{key} shape {:?}", head.shape)))?;
        let data = self.values(dtype, count)?;
        Ok((key, Tensor::new(head.shape, data)?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }

    fn skip_values(&mut self, dtype: Dtype, shape: &[usize]) -> Result<()> {
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(dtype.width()))
            .ok_or_else(|| Error::DimensionOverflow(format!("shape {shape:?}")))?;
        self.take(count).map(|_| ())
    }
}

fn writer_with_header(magic: &[u8; 8], dtype: Dtype) -> Writer {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(magic);
    w.u16(WIRE_VERSION);
    w.u8(dtype.width() as u8);
    w
}

pub fn encode_update<R: Real>(update: &SharedUpdate<R>) -> Result<Vec<u8>> {
    let mut w = writer_with_header(UPDATE_MAGIC, R::DTYPE);
    w.u32(update.silo_id);
    w.u32(update.round);
    w.u64(update.n_samples);
    w.len_u32(update.entries.len(), "entry count")?;
    for (k, v) in &update.entries {
        w.entry(k, v)?;
    }
    Ok(w.0)
}

pub fn decode_update<R: Real>(bytes: &[u8]) -> Result<SharedUpdate<R>> {
    let mut r = Reader { bytes, pos: 0 };
    let dtype = r.header(UPDATE_MAGIC)?;
    let silo_id = r.u32()?;
    let round = r.u32()?;
    let n_samples = r.u64()?;
    let count = r.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let (k, v) = r.entry(dtype)?;
        if entries.insert(k, v).is_some() {
            return Err(Error::Format(format!("duplicate key {k}")));
        }
    }
    r.finish()?;
    Ok(SharedUpdate {
        silo_id,
        round,
        n_samples,
        entries,
    })
}

/// Key headers of an update message, read without interpreting values.
/// Independent of any float type; meant for inspecting traffic.
pub fn inspect_update(bytes: &[u8]) -> Result<Vec<WireEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    let dtype = r.header(UPDATE_MAGIC)?;
    r.take(4 + 4 + 8)?;
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let head = r.entry_header()?;
        r.skip_values(dtype, &head.shape)?;
        out.push(head);
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_model<R: Real>(spec: &ModelSpec, params: &ParamSet<R>) -> Result<Vec<u8>> {
    let mut w = writer_with_header(MODEL_MAGIC, R::DTYPE);
    let descriptor = serde_json::to_vec(spec).map_err(|e| Error::Format(e.to_string()))?;
    w.len_u32(descriptor.len(), "descriptor length")?;
    w.0.extend_from_slice(&descriptor);
    w.len_u32(params.len(), "entry count")?;
    for (k, v) in params.iter() {
        w.entry(k, v)?;
    }
    Ok(w.0)
}

/// Element type recorded in a snapshot.
pub fn model_dtype(bytes: &[u8]) -> Result<Dtype> {
    Reader { bytes, pos: 0 }.header(MODEL_MAGIC)
}

/// Decodes a snapshot into `R`, converting if it was saved in the other width.
pub fn decode_model<R: Real>(bytes: &[u8]) -> Result<(ModelSpec, ParamSet<R>)> {
    let mut r = Reader { bytes, pos: 0 };
    let dtype = r.header(MODEL_MAGIC)?;
    let len = r.u32()? as usize;
    let spec: ModelSpec =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("model descriptor: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let (k, v) = r.entry(dtype)?;
        if params.insert(k, v).is_some() {
            return Err(Error::Format(format!("duplicate key {k}")));
        }
    }
    r.finish()?;
    let net = crate::nn::Network::new(spec, params)?;
    Ok((net.spec, net.params))
}

/// Key headers of a snapshot, read without interpreting values.
pub fn inspect_model(bytes: &[u8]) -> Result<Vec<WireEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    let dtype = r.header(MODEL_MAGIC)?;
    let len = r.u32()? as usize;
    r.take(len)?;
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let head = r.entry_header()?;
        r.skip_values(dtype, &head.shape)?;
        out.push(head);
    }
    r.finish()?;
    Ok(out)
}

pub fn save_model<R: Real>(spec: &ModelSpec, params: &ParamSet<R>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode_model(spec, params)?)?;
    Ok(())
}

pub fn load_model<R: Real>(path: impl AsRef<Path>) -> Result<(ModelSpec, ParamSet<R>)> {
    decode_model(&fs::read(path)?)
}
