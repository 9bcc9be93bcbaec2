//! Model checkpoint format.
//!
//! Binary layout, all integers little-endian:
//!   magic "LIMEMDL1" (8 bytes)
//!   format version u32
//!   metadata JSON: length u32 + bytes (kind, config, vocab, trained flag)
//!   parameter count u32
//!   per parameter: name length u16, name bytes, rank u8, dims u32 each,
//!                  then 32-bit little-endian scalars.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind, VocabInfo};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LIMEMDL1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: ModelKind,
    config: ModelConfig,
    vocab: VocabInfo,
    trained: bool,
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = Meta {
        kind: model.kind,
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        trained: model.trained,
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);

    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in &params {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_f32_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic, not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Format(format!("bad metadata: {e}")))?;

    let n_params = r.u32()? as usize;
    let mut loaded: HashMap<String, Tensor<T>> = HashMap::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("bad name: {e}")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let raw: [u8; 4] = r.take(4)?.try_into().unwrap();
            data.push(T::from_f64(f32::from_le_bytes(raw) as f64));
        }
        loaded.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }

    let mut model = Model::seeded(meta.kind, &meta.config, &meta.vocab)?;
    model.trained = meta.trained;
    let mut missing = Vec::new();
    let mut shape_err = None;
    model.for_each_param_mut(&mut |name, t| {
        match loaded.remove(&name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => {
                shape_err =
                    Some(format!("parameter {name}: shape {:?} vs {:?}", v.shape(), t.shape()))
            }
            None => missing.push(name),
        }
    });
    if let Some(msg) = shape_err {
        return Err(Error::Format(msg));
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint missing parameters: {missing:?}")));
    }
    if !loaded.is_empty() {
        let extra: Vec<String> = loaded.keys().cloned().collect();
        return Err(Error::Format(format!("checkpoint has unknown parameters: {extra:?}")));
    }
    Ok(model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
