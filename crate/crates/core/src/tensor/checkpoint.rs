//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "JHCKPT\0\x01"
//! version      u32
//! meta_count   u32, then meta_count × (key: str, value: str)
//! name_count   u32, then name_count × str          -- the name table
//! entry_count  u32, then entry_count × entry
//!   entry:     name_index u32, ndim u32, ndim × u64 dims,
//!              locked u8, numel × f32 payload
//! str:         u32 byte length, UTF-8 bytes
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{AdamState, ParamStore, Rng, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JHCKPT\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub locked: bool,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<CheckpointEntry>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (i, e) in self.entries.iter().enumerate() {
            out.extend_from_slice(&(i as u32).to_le_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(e.locked as u8);
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let names = (0..r.u32()?)
            .map(|_| r.string())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let idx = r.u32()? as usize;
            let name = names
                .get(idx)
                .ok_or_else(|| format!("name index {idx} out of range"))?
                .clone();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let locked = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(format!("bad locked flag {b}")),
            };
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(CheckpointEntry {
                name,
                shape,
                locked,
                data,
            });
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(Self { meta, entries })
    }

    /// Writes via a temporary file and rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|msg| Error::format(path, msg))
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint has no `{key}` entry")))?
            .parse()
            .map_err(|e| Error::Config(format!("checkpoint `{key}`: {e}")))
    }

    /// Appends every parameter of `store` under `namespace/`.
    pub fn push_store(&mut self, namespace: &str, store: &ParamStore) {
        for p in store.iter() {
            self.entries.push(CheckpointEntry {
                name: format!("{namespace}/{}", p.name),
                shape: p.value.shape().to_vec(),
                locked: p.locked,
                data: p.value.data().to_vec(),
            });
        }
    }

    /// Overwrites `store` values and lock flags from `namespace/`; every
    /// parameter must be present with a matching shape.
    pub fn load_store(&self, namespace: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = (0..store.len()).map(super::ParamId).collect();
        for id in ids {
            let name = format!("{namespace}/{}", store.get(id).name);
            let e = self
                .entry(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
            store.set_value(id, Tensor::new(e.shape.clone(), e.data.clone())?)?;
            store.get_mut(id).locked = e.locked;
        }
        Ok(())
    }

    pub fn push_adam(&mut self, namespace: &str, state: &AdamState) {
        self.meta.insert(
            format!("{namespace}.step_count"),
            state.step_count.to_string(),
        );
        self.meta.insert(
            format!("{namespace}.pending"),
            state.pending_micro_steps().to_string(),
        );
        for (name, (m, v)) in &state.moments {
            for (tag, data) in [("m", m), ("v", v)] {
                self.entries.push(CheckpointEntry {
                    name: format!("{namespace}/{tag}/{name}"),
                    shape: vec![data.len()],
                    locked: false,
                    data: data.clone(),
                });
            }
        }
    }

    pub fn load_adam(&self, namespace: &str, state: &mut AdamState) -> Result<()> {
        state.step_count = self.meta_u64(&format!("{namespace}.step_count"))?;
        state.set_pending_micro_steps(self.meta_u64(&format!("{namespace}.pending"))?);
        state.moments.clear();
        let prefix_m = format!("{namespace}/m/");
        for e in &self.entries {
            if let Some(name) = e.name.strip_prefix(&prefix_m) {
                let v = self
                    .entry(&format!("{namespace}/v/{name}"))
                    .ok_or_else(|| Error::Config(format!("missing second moment for `{name}`")))?;
                state
                    .moments
                    .insert(name.to_string(), (e.data.clone(), v.data.clone()));
            }
        }
        Ok(())
    }

    pub fn push_rng(&mut self, key: &str, rng: &Rng) {
        self.meta
            .insert(format!("{key}.seed"), rng.seed().to_string());
        self.meta
            .insert(format!("{key}.position"), rng.position().to_string());
    }

    pub fn load_rng(&self, key: &str) -> Result<Rng> {
        let seed = self.meta_u64(&format!("{key}.seed"))?;
        let pos: u128 = self
            .meta
            .get(&format!("{key}.position"))
            .ok_or_else(|| Error::Config(format!("checkpoint has no `{key}.position`")))?
            .parse()
            .map_err(|e| Error::Config(format!("{key}.position: {e}")))?;
        Ok(Rng::restore(seed, pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(
            vals in proptest::collection::vec(any::<u32>(), 1..64),
            locked in any::<bool>(),
            key in "[a-z.]{1,12}",
            value in "[ -~]{0,20}",
        ) {
            let mut ck = Checkpoint::new();
            ck.meta.insert(key, value);
            ck.entries.push(CheckpointEntry {
                name: "net/w".into(),
                shape: vec![vals.len()],
                locked,
                // arbitrary bit patterns, NaN payloads included
                data: vals.iter().map(|&b| f32::from_bits(b)).collect(),
            });
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), ck.to_bytes());
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut ck = Checkpoint::new();
        ck.entries.push(CheckpointEntry {
            name: "a".into(),
            shape: vec![2],
            locked: true,
            data: vec![1.0, 2.0],
        });
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().contains("magic"));
    }

    #[test]
    fn store_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        store.add_kaiming("conv.w", [4, 3, 3, 3], 27, &mut rng);
        let b = store.add("conv.b", Tensor::zeros([4]));
        store.get_mut(b).locked = true;
        let mut ck = Checkpoint::new();
        ck.push_store("net", &store);
        ck.push_rng("rng", &rng);
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();

        let mut other = store.clone();
        other
            .set_value(other.id_of("conv.w").unwrap(), Tensor::zeros([4, 3, 3, 3]))
            .unwrap();
        other.get_mut(b).locked = false;
        let loaded = Checkpoint::load(&path).unwrap();
        loaded.load_store("net", &mut other).unwrap();
        assert!(store.bitwise_eq(&other));
        assert!(other.get(b).locked);
        let mut r2 = loaded.load_rng("rng").unwrap();
        assert_eq!(r2.next_u64(), rng.next_u64());
    }
}
