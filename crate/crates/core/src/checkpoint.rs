//! DLRA checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DLRA" | u32 version = 1 | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 dtype | u8 ndim | ndim × u32 dims | payload
//! ```
//!
//! dtype codes are 0 = f32, 1 = f64, 2 = u8.
//!
//! Model tensors are stored under their [`ParamKey`] names. An adapted layer
//! stores its frozen base as `layer.L.s.weight`, the adapter as
//! `layer.L.s.lora.{a,b,w,active}` and the folded weight `W₀ + ΔW` as
//! `layer.L.s.merged`. Per-task heads live under `task.<t>.head.*` and
//! unmerged per-task adapter sets under `task.<t>.layer.L.s.lora.*`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapter::DynLoraAdapter;
use crate::error::{Error, Result};
use crate::model::{GlyphTransformer, GlyphTransformerConfig, Head, Linear, NormParams, ParamKey, Slot};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DLRA";
pub const VERSION: u32 = 1;
const META: &str = "meta.config";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_real<T: Real>(data: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => Payload::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            _ => Payload::F64(data.iter().map(|v| v.as_f64()).collect()),
        }
    }

    fn to_real<T: Real>(&self) -> Vec<T> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            Payload::U8(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

/// Ordered list of named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry. Names must be unique and dims must match the payload.
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, payload: Payload) -> Result<()> {
        let name = name.into();
        if dims.iter().product::<usize>() != payload.len() {
            return Err(Error::dim("checkpoint entry", &dims, &[payload.len()]));
        }
        if self.get(&name).is_some() {
            return Err(Error::Contract(format!("duplicate checkpoint entry {name}")));
        }
        self.entries.push(Entry { name, dims, payload });
        Ok(())
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.push(name, t.shape().to_vec(), Payload::from_real(t.data()))
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Reads a float entry as a tensor of `T`.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no entry {name}")))?;
        if e.payload.dtype() == DType::U8 {
            return Err(Error::Data(format!("entry {name} is a mask, not a float tensor")));
        }
        Tensor::new(e.dims.clone(), e.payload.to_real())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.entries.len(), "entry count")?.to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Contract(format!("entry name too long: {} bytes", name.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.payload.dtype() as u8);
            let ndim = u8::try_from(e.dims.len()).map_err(|_| Error::Contract("too many dimensions".into()))?;
            out.push(ndim);
            for &d in &e.dims {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected DLRA".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                offset: 4,
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("entry count")? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let start = r.pos;
            let len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: name_at,
                    message: "entry name is not UTF-8".into(),
                })?
                .to_string();
            let code_at = r.pos;
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format {
                offset: code_at,
                message: format!("unknown dtype code {code}"),
            })?;
            let ndim = r.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("dimension")? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Format {
                    offset: start,
                    message: "entry size overflows".into(),
                })?;
            let raw = r.take(n, "payload")?;
            let payload = match dtype {
                DType::F32 => Payload::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                DType::F64 => Payload::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                DType::U8 => Payload::U8(raw.to_vec()),
            };
            if ck.get(&name).is_some() {
                return Err(Error::Format {
                    offset: start,
                    message: format!("duplicate entry {name}"),
                });
            }
            ck.entries.push(Entry { name, dims, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Adapters keyed by location, as returned by
/// [`GlyphTransformer::detach_adapters`].
pub type AdapterSet<T> = Vec<(usize, Slot, DynLoraAdapter<T>)>;

/// Everything a sequential run keeps besides the live model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunExtras<T> {
    /// Head for every finished task.
    pub heads: BTreeMap<usize, Head<T>>,
    /// Unmerged adapters per finished task (only when merging is off).
    pub adapters: BTreeMap<usize, AdapterSet<T>>,
}

impl<T> Default for RunExtras<T> {
    fn default() -> Self {
        Self {
            heads: BTreeMap::new(),
            adapters: BTreeMap::new(),
        }
    }
}

fn adapter_entries<T: Real>(ck: &mut Checkpoint, prefix: &str, ad: &DynLoraAdapter<T>) -> Result<()> {
    ck.push_tensor(format!("{prefix}.lora.a"), ad.a())?;
    ck.push_tensor(format!("{prefix}.lora.b"), ad.b())?;
    ck.push_tensor(format!("{prefix}.lora.w"), ad.w())?;
    let mask = ad.active().iter().map(|&on| on as u8).collect();
    ck.push(format!("{prefix}.lora.active"), vec![ad.r_max()], Payload::U8(mask))
}

fn read_adapter<T: Real>(ck: &Checkpoint, prefix: &str, base: Tensor<T>, alpha: f64) -> Result<DynLoraAdapter<T>> {
    let a = ck.tensor(&format!("{prefix}.lora.a"))?;
    let b = ck.tensor(&format!("{prefix}.lora.b"))?;
    let w = ck.tensor(&format!("{prefix}.lora.w"))?;
    let name = format!("{prefix}.lora.active");
    let active = match ck.get(&name) {
        Some(Entry {
            payload: Payload::U8(m), ..
        }) => m.iter().map(|&v| v != 0).collect(),
        _ => return Err(Error::Data(format!("checkpoint has no mask {name}"))),
    };
    DynLoraAdapter::from_parts(base, a, b, w, active, alpha)
}

/// Serializes a model (with any attached adapters) plus run extras.
pub fn model_to_checkpoint<T: Real>(model: &GlyphTransformer<T>, extras: &RunExtras<T>) -> Result<Checkpoint> {
    let c = model.config();
    let alpha = model
        .adapters()
        .map(|(_, _, ad)| ad.alpha())
        .chain(extras.adapters.values().flatten().map(|(_, _, ad)| ad.alpha()))
        .next()
        .unwrap_or(0.0);
    let meta = [
        c.image_side,
        c.patch_side,
        c.d_model,
        c.n_heads,
        c.n_layers,
        c.d_ff,
        c.n_classes,
    ]
    .iter()
    .map(|&v| v as f64)
    .chain([alpha])
    .collect::<Vec<_>>();
    let mut ck = Checkpoint::new();
    ck.push(META, vec![meta.len()], Payload::F64(meta))?;

    let mut result = Ok(());
    model.visit(|key, t| {
        if result.is_ok() && !key.is_lora() {
            result = ck.push_tensor(key.to_string(), t);
        }
    });
    result?;
    for (l, s, ad) in model.adapters() {
        let prefix = format!("layer.{l}.{}", s.name());
        adapter_entries(&mut ck, &prefix, ad)?;
        ck.push_tensor(format!("{prefix}.merged"), &ad.merge())?;
    }
    for (t, head) in &extras.heads {
        ck.push_tensor(format!("task.{t}.head.weight"), &head.weight)?;
        ck.push_tensor(format!("task.{t}.head.bias"), &head.bias)?;
    }
    for (t, set) in &extras.adapters {
        for (l, s, ad) in set {
            adapter_entries(&mut ck, &format!("task.{t}.layer.{l}.{}", s.name()), ad)?;
        }
    }
    Ok(ck)
}

/// Inverse of [`model_to_checkpoint`]. Adapters come back attached where
/// their entries exist; the head is the current one.
pub fn checkpoint_to_model<T: Real>(ck: &Checkpoint) -> Result<(GlyphTransformer<T>, RunExtras<T>)> {
    let meta = match ck.get(META) {
        Some(Entry {
            payload: Payload::F64(m),
            ..
        }) if m.len() == 8 => m.clone(),
        _ => return Err(Error::Data(format!("checkpoint has no valid {META}"))),
    };
    let dim = |i: usize| -> Result<usize> {
        let v = meta[i];
        if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(Error::Data(format!("bad {META} value {v}")))
        }
    };
    let config = GlyphTransformerConfig {
        image_side: dim(0)?,
        patch_side: dim(1)?,
        d_model: dim(2)?,
        n_heads: dim(3)?,
        n_layers: dim(4)?,
        d_ff: dim(5)?,
        n_classes: dim(6)?,
    };
    let alpha = meta[7];
    let t = |key: ParamKey| ck.tensor::<T>(&key.to_string());
    let norm = |id| -> Result<NormParams<T>> {
        Ok(NormParams {
            gamma: t(ParamKey::NormGamma(id))?,
            beta: t(ParamKey::NormBeta(id))?,
        })
    };
    use crate::model::NormId;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut linears = Vec::with_capacity(Slot::ALL.len());
        for s in Slot::ALL {
            let base = t(ParamKey::Weight(l, s))?;
            let prefix = format!("layer.{l}.{}", s.name());
            if ck.get(&format!("{prefix}.lora.a")).is_some() {
                linears.push(Linear::Adapted(read_adapter(ck, &prefix, base, alpha)?));
            } else {
                linears.push(Linear::Plain(base));
            }
        }
        blocks.push((norm(NormId::Attn(l))?, norm(NormId::Mlp(l))?, linears));
    }
    let head = Head {
        weight: t(ParamKey::HeadWeight)?,
        bias: t(ParamKey::HeadBias)?,
    };
    let model = GlyphTransformer::from_parts(
        config,
        t(ParamKey::PatchProj)?,
        t(ParamKey::PosEmbed)?,
        blocks,
        norm(NormId::Final)?,
        head,
    )?;

    let mut extras = RunExtras::default();
    for name in ck.names() {
        let Some(rest) = name.strip_prefix("task.") else {
            continue;
        };
        let Some((task, tail)) = rest.split_once('.') else {
            continue;
        };
        let task: usize = task
            .parse()
            .map_err(|_| Error::Data(format!("bad task index in entry {name}")))?;
        if tail == "head.weight" {
            let head = Head {
                weight: ck.tensor(name)?,
                bias: ck.tensor(&format!("task.{task}.head.bias"))?,
            };
            extras.heads.insert(task, head);
        } else if let Some(loc) = tail.strip_suffix(".lora.a") {
            let (l, s) = parse_location(loc).ok_or_else(|| Error::Data(format!("bad adapter entry {name}")))?;
            let base = model
                .tensor(ParamKey::Weight(l, s))
                .ok_or_else(|| Error::Data(format!("no layer for entry {name}")))?
                .clone();
            let ad = read_adapter(ck, &format!("task.{task}.{loc}"), base, alpha)?;
            extras.adapters.entry(task).or_default().push((l, s, ad));
        }
    }
    Ok((model, extras))
}

fn parse_location(loc: &str) -> Option<(usize, Slot)> {
    let rest = loc.strip_prefix("layer.")?;
    let (l, s) = rest.split_once('.')?;
    let slot = Slot::ALL.into_iter().find(|slot| slot.name() == s)?;
    Some((l.parse().ok()?, slot))
}

/// Adapter-free copy of `ck`: every adapted weight is replaced by its merged
/// value and all `lora.*` / `.merged` entries are dropped.
pub fn merged_checkpoint<T: Real>(ck: &Checkpoint) -> Result<Checkpoint> {
    let (mut model, mut extras) = checkpoint_to_model::<T>(ck)?;
    model.merge_adapters();
    extras.adapters.clear();
    model_to_checkpoint(&model, &extras)
}
