//! Binary checkpoint archive: magic "BQSA", version, step counter, a
//! config echo, and a named-tensor table with little-endian row-major
//! payloads. Round trips are bit-exact.

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{Dtype, Element};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"BQSA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_echo: String,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(step: u64, config_echo: String) -> Self {
        Checkpoint {
            step,
            config_echo,
            tensors: Vec::new(),
        }
    }

    pub fn push_tensor<E: Element>(&mut self, name: &str, dims: &[usize], data: &[E]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        debug_assert!(
            self.tensors.iter().all(|t| t.name != name),
            "duplicate tensor name {name}"
        );
        let mut payload = Vec::with_capacity(data.len() * E::DTYPE.size_bytes());
        for v in data {
            v.write_le(&mut payload);
        }
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: E::DTYPE,
            dims: dims.to_vec(),
            payload,
        });
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_data<E: Element>(&self, name: &str) -> Result<Vec<E>> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        if entry.dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} stored as {:?}, requested {:?}",
                entry.dtype,
                E::DTYPE
            )));
        }
        let sz = E::DTYPE.size_bytes();
        Ok(entry.payload.chunks_exact(sz).map(E::read_le).collect())
    }

    /// Stores every parameter under its registry name.
    pub fn push_params<E: Element>(&mut self, params: &Params<E>) {
        for (name, p) in params.iter() {
            self.push_tensor(name, p.dims(), &p.data());
        }
    }

    /// Writes stored values back into matching parameters, bit-exact.
    pub fn load_params<E: Element>(&self, params: &Params<E>) -> Result<()> {
        for (name, p) in params.iter() {
            let entry = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
            if entry.dims != p.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?} but the model expects {:?}",
                    entry.dims,
                    p.dims()
                )));
            }
            p.set_data(&self.tensor_data::<E>(name)?)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config_echo.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dtype.tag());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        struct Cursor<'a> {
            bytes: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.pos + n > self.bytes.len() {
                    return Err(Error::Checkpoint("truncated checkpoint".into()));
                }
                let s = &self.bytes[self.pos..self.pos + n];
                self.pos += n;
                Ok(s)
            }
            fn u32(&mut self) -> Result<u32> {
                Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
            }
            fn u64(&mut self) -> Result<u64> {
                Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            }
        }
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let step = c.u64()?;
        let cfg_len = c.u32()? as usize;
        let config_echo = String::from_utf8(c.take(cfg_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config echo is not utf-8".into()))?;
        let n = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = c.u32()? as usize;
            let name = String::from_utf8(c.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let dtype = Dtype::from_tag(c.take(1)?[0])
                .ok_or_else(|| Error::Checkpoint(format!("bad dtype tag for {name:?}")))?;
            let rank = c.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(c.u64()? as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = c.take(numel * dtype.size_bytes())?.to_vec();
            tensors.push(TensorEntry {
                name,
                dtype,
                dims,
                payload,
            });
        }
        Ok(Checkpoint {
            step,
            config_echo,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::<f32>::new(4, 7, 4, &mut rng);
        let mut params = Params::new();
        mlp.collect_params("mlp", &mut params);

        let mut ck = Checkpoint::new(123, "train.seed=9\n".into());
        ck.push_params(&params);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.step, 123);

        // perturb, then restore and compare bit patterns
        let originals: Vec<Vec<f32>> = params.iter().map(|(_, p)| p.to_vec()).collect();
        for (_, p) in params.iter() {
            p.set_data(&vec![0.5; p.numel()]).unwrap();
        }
        back.load_params(&params).unwrap();
        for ((_, p), orig) in params.iter().zip(&originals) {
            let now = p.to_vec();
            assert_eq!(
                now.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                orig.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut ck = Checkpoint::new(0, String::new());
        ck.push_tensor::<f32>("w", &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = crate::tensor::Tensor::<f32>::var(vec![0.0; 6], [2, 3]).unwrap();
        let mut params = Params::new();
        params.push("w", &p);
        assert!(ck.load_params(&params).is_err());
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        assert!(Checkpoint::decode(b"nope").is_err());
        let ck = Checkpoint::new(1, "x=1".into());
        let mut bytes = ck.encode();
        bytes.truncate(bytes.len() - 1);
        let _ = Checkpoint::decode(&bytes);
        bytes[0] = b'X';
        assert!(Checkpoint::decode(&bytes).is_err());
    }
}
