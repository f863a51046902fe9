//! Named parameter storage, graph binding and the shared checkpoint container.
//!
//! Checkpoint layout:
//!
//! ```text
//! L2DCKPT 1 <header byte length>\n
//! <TOML header: kind, checksum, [config], [[tensor]] manifest>
//! <little-endian f32 parameter sections, at the manifest offsets>
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{L2dError, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Provenance of a parameter, recorded in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Main-path weight.
    Base,
    /// Copy of a main-path weight inside the diffusion path.
    FrozenCopy,
    /// Low-rank adapter factor.
    Lora,
    /// Module with no main-path counterpart.
    New,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub role: ParamRole,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: IndexMap<String, Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, role: ParamRole, trainable: bool) {
        self.entries.insert(name.into(), Param { value, role, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.entries.get_mut(name)
    }

    /// Value of a parameter that must exist.
    pub fn tensor(&self, name: &str) -> &Tensor<F> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Registers every parameter as a graph leaf. Trainable parameters require
    /// gradients only when `with_grad` is set.
    pub fn bind(&self, g: &mut Graph<F>, with_grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), g.param(p.value.clone(), with_grad && p.trainable)))
            .collect();
        Bound { vars }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            role: p.role,
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// FNV-1a digest of the parameter bytes, for immutability checks.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, p) in &self.entries {
            h.write(name.as_bytes());
            for &x in p.value.data() {
                h.write(&x.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Digest of the values rounded to single precision, which is what a
    /// checkpoint stores.
    pub fn storage_digest(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, p) in &self.entries {
            h.write(name.as_bytes());
            for &x in p.value.data() {
                h.write(&(x.as_f64() as f32).to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Graph variables for a bound [`ParamStore`], looked up by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

const MAGIC: &str = "L2DCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: ParamRole,
    trainable: bool,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    checksum: String,
    data_bytes: usize,
    config: toml::Table,
    tensor: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: toml::Table,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        toml::Value::Table(self.config.clone())
            .try_into()
            .map_err(|e| L2dError::Checkpoint(format!("config section: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(L2dError::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

pub fn write_checkpoint<F: Scalar, C: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    params: &ParamStore<F>,
) -> Result<()> {
    let config = toml::Table::try_from(config).map_err(|e| L2dError::Checkpoint(format!("serializing config: {e}")))?;
    let mut data = Vec::new();
    let mut manifest = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let offset = data.len();
        for &x in p.value.data() {
            data.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        manifest.push(TensorEntry {
            name: name.to_string(),
            role: p.role,
            trainable: p.trainable,
            shape: p.value.shape().to_vec(),
            offset,
            length: data.len() - offset,
        });
    }
    let mut h = Fnv::new();
    h.write(&data);
    let header = Header {
        kind: kind.to_string(),
        checksum: format!("{:016x}", h.finish()),
        data_bytes: data.len(),
        config,
        tensor: manifest,
    };
    let text = toml::to_string(&header).map_err(|e| L2dError::Checkpoint(format!("serializing header: {e}")))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        writeln!(f, "{MAGIC} {VERSION} {}", text.len())?;
        f.write_all(text.as_bytes())?;
        f.write_all(&data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let bad = |msg: String| L2dError::Checkpoint(format!("{}: {msg}", path.display()));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing preamble".into()))?;
    let preamble = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("preamble is not text".into()))?;
    let mut parts = preamble.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint file".into()));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("bad version".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("bad header length".into()))?;
    let header_end = nl + 1 + header_len;
    if header_end > bytes.len() {
        return Err(bad("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[nl + 1..header_end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| bad(format!("header: {e}")))?;
    let data = &bytes[header_end..];
    if data.len() != header.data_bytes {
        return Err(bad(format!(
            "data section holds {} bytes, header declares {}",
            data.len(),
            header.data_bytes
        )));
    }
    let mut h = Fnv::new();
    h.write(data);
    if format!("{:016x}", h.finish()) != header.checksum {
        return Err(bad("checksum mismatch".into()));
    }
    let mut params = ParamStore::new();
    for e in &header.tensor {
        let n: usize = e.shape.iter().product();
        if e.length != n * 4 || e.offset + e.length > data.len() {
            return Err(bad(format!("tensor {} has inconsistent extent", e.name)));
        }
        let values = data[e.offset..e.offset + e.length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(
            e.name.clone(),
            Tensor::new(e.shape.clone(), values)?,
            e.role,
            e.trainable,
        );
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Cfg {
        width: usize,
        label: String,
    }

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(
            "a",
            Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5),
            ParamRole::Base,
            false,
        );
        s.insert(
            "b.lora_a",
            Tensor::from_fn(&[3], |i| -(i as f32)),
            ParamRole::Lora,
            true,
        );
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("l2d-ckpt-{}", std::process::id()));
        let path = dir.join("x.ckpt");
        let cfg = Cfg {
            width: 3,
            label: "toy".into(),
        };
        write_checkpoint(&path, "demo", &cfg, &sample_store()).unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.kind, "demo");
        assert_eq!(ck.config_as::<Cfg>().unwrap(), cfg);
        assert_eq!(ck.params, sample_store());
        // header is human readable
        let text = fs::read(&path).unwrap();
        let head = String::from_utf8_lossy(&text[..200.min(text.len())]).to_string();
        assert!(head.starts_with("L2DCKPT 1 "));
        assert!(head.contains("kind = \"demo\""));
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = std::env::temp_dir().join(format!("l2d-ckpt-bad-{}", std::process::id()));
        let path = dir.join("x.ckpt");
        write_checkpoint(
            &path,
            "demo",
            &Cfg {
                width: 1,
                label: "x".into(),
            },
            &sample_store(),
        )
        .unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).is_err());
        fs::remove_dir_all(dir).ok();
    }
}
