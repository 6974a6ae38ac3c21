//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TSYN1"
//! u32 metadata length, metadata (UTF-8 JSON object)
//! u32 block count
//! per block: u16 name length, name (UTF-8), u32 rows, u32 cols, rows*cols f32
//! 32-byte SHA-256 of every byte between the magic and the digest
//! ```
//!
//! The metadata object always carries `format_version` and `kind`.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::diffusion::{DiffusionConfig, DiffusionModel, LatentNormalizer};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor2D};
use crate::table::PreprocessState;
use crate::tokenizer::ColumnLayout;
use crate::vae::{VaeConfig, VaeModel};

pub const MAGIC: &[u8; 5] = b"TSYN1";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Block {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor2D) -> Self {
        let (rows, cols) = t.shape();
        Self {
            name: name.into(),
            rows,
            cols,
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor2D> {
        Tensor2D::new(self.rows, self.cols, self.data.iter().map(|&v| f64::from(v)).collect())
    }
}

/// Metadata plus named f32 blocks, independent of what model they describe.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: Map<String, Value>,
    pub blocks: Vec<Block>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn digest(bytes: &[u8]) -> [u8; DIGEST_LEN] {
    Sha256::digest(bytes).into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Input(format!("{what} too large for the container format")))
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut metadata = Map::new();
        metadata.insert("format_version".into(), json!(FORMAT_VERSION));
        metadata.insert("kind".into(), json!(kind));
        Self {
            metadata,
            blocks: Vec::new(),
        }
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").and_then(Value::as_str)
    }

    pub fn push_store(&mut self, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.blocks.push(Block::from_tensor(name, t));
        }
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for b in &self.blocks {
            if store.id_of(&b.name).is_some() {
                return Err(Error::Integrity(format!("duplicate block {}", b.name)));
            }
            store.add(b.name.clone(), b.to_tensor()?);
        }
        Ok(store)
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::Input(format!("cannot serialize {key}: {e}")))?;
        self.metadata.insert(key.into(), v);
        Ok(())
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Integrity(format!("metadata lacks {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Integrity(format!("metadata {key:?}: {e}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta =
            serde_json::to_vec(&self.metadata).map_err(|e| Error::Input(format!("cannot serialize metadata: {e}")))?;
        let mut out = Vec::with_capacity(meta.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.blocks.len(), "block count")?.to_le_bytes());
        for b in &self.blocks {
            if b.data.len() != b.rows * b.cols {
                return Err(Error::dim(format!(
                    "block {} holds {} values for {}x{}",
                    b.name,
                    b.data.len(),
                    b.rows,
                    b.cols
                )));
            }
            let name =
                u16::try_from(b.name.len()).map_err(|_| Error::Input(format!("block name {:?} too long", b.name)))?;
            out.extend_from_slice(&name.to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&len_u32(b.rows, "rows")?.to_le_bytes());
            out.extend_from_slice(&len_u32(b.cols, "cols")?.to_le_bytes());
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = digest(&out[MAGIC.len()..]);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    /// Parses and verifies a container. Magic and checksum are checked before
    /// anything else; the format version right after the metadata is parsed.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("not a model file (bad magic)".into()));
        }
        if bytes.len() < MAGIC.len() + DIGEST_LEN {
            return Err(Error::Integrity("file too short".into()));
        }
        let (payload, sum) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if digest(&payload[MAGIC.len()..])[..] != sum[..] {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader {
            bytes: payload,
            pos: MAGIC.len(),
        };
        let meta_len = r.u32()? as usize;
        let meta: Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Integrity(format!("metadata is not JSON: {e}")))?;
        let Value::Object(metadata) = meta else {
            return Err(Error::Integrity("metadata is not a JSON object".into()));
        };
        let found = metadata
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Integrity("metadata lacks format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::new();
        for _ in 0..n_blocks {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("block name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Integrity(format!("block {name} shape {rows}x{cols} exceeds the file")))?;
            let data = r
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            blocks.push(Block { name, rows, cols, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Integrity(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { metadata, blocks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<Vec<u8>> {
        let bytes = self.encode()?;
        std::fs::write(path, &bytes)?;
        Ok(bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)?;
        Ok((Self::decode(&bytes)?, bytes))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Integrity(format!("expected a {kind} file, found {other:?}"))),
        }
    }
}

/// Summary of a finished training run stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_beta: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct VaeArtifact {
    pub model: VaeModel,
    pub state: PreprocessState,
    pub config: VaeConfig,
    pub stats: TrainingStats,
}

impl VaeArtifact {
    pub const KIND: &'static str = "vae";

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(Self::KIND);
        c.set("crate_version", &env!("CARGO_PKG_VERSION"))?;
        c.set("schema", &self.state.schema)?;
        c.set("preprocess", &self.state)?;
        c.set("config", &self.config)?;
        c.set("layout", self.model.layout())?;
        c.set("d", &self.model.d())?;
        c.set("hidden", &self.model.hidden())?;
        c.set("n_layers", &self.model.n_layers())?;
        c.set("stats", &self.stats)?;
        c.push_store(self.model.store());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let state: PreprocessState = c.get("preprocess")?;
        let layout: ColumnLayout = c.get("layout")?;
        if ColumnLayout::from_state(&state).ok().as_ref() != Some(&layout) {
            return Err(Error::Integrity("layout disagrees with the preprocessing state".into()));
        }
        let model = VaeModel::from_store(layout, c.get("d")?, c.get("hidden")?, c.get("n_layers")?, c.to_store()?)?;
        Ok(Self {
            model,
            state,
            config: c.get("config")?,
            stats: c.get("stats")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<Vec<u8>> {
        self.to_container()?.save(path)
    }

    /// Loads the artifact and returns the raw bytes for hashing.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<u8>)> {
        let (c, bytes) = Container::load(path)?;
        Ok((Self::from_container(&c)?, bytes))
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionArtifact {
    pub model: DiffusionModel,
    pub config: DiffusionConfig,
    /// SHA-256 of the VAE file whose latents trained this model.
    pub vae_sha256: String,
    pub stats: TrainingStats,
}

impl DiffusionArtifact {
    pub const KIND: &'static str = "diffusion";

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(Self::KIND);
        c.set("crate_version", &env!("CARGO_PKG_VERSION"))?;
        c.set("config", &self.config)?;
        c.set("normalizer", self.model.normalizer())?;
        c.set("hidden", &self.model.hidden())?;
        c.set("sigma_min", &self.model.sigma_min())?;
        c.set("sigma_max", &self.model.sigma_max())?;
        c.set("vae_sha256", &self.vae_sha256)?;
        c.set("stats", &self.stats)?;
        c.push_store(self.model.store());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let normalizer: LatentNormalizer = c.get("normalizer")?;
        if normalizer.mean.len() != normalizer.std.len() || normalizer.mean.is_empty() {
            return Err(Error::Integrity("latent normalizer is malformed".into()));
        }
        let model = DiffusionModel::from_store(
            c.to_store()?,
            normalizer,
            c.get("hidden")?,
            c.get("sigma_min")?,
            c.get("sigma_max")?,
        )?;
        Ok(Self {
            model,
            config: c.get("config")?,
            vae_sha256: c.get("vae_sha256")?,
            stats: c.get("stats")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<Vec<u8>> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<u8>)> {
        let (c, bytes) = Container::load(path)?;
        Ok((Self::from_container(&c)?, bytes))
    }
}

/// Encoder means of the training table, `rows x latent width`.
pub fn latents_to_container(latents: &Tensor2D, vae_sha256: &str) -> Result<Container> {
    let mut c = Container::new("latents");
    c.set("vae_sha256", &vae_sha256)?;
    c.blocks.push(Block::from_tensor("latents", latents));
    Ok(c)
}

pub fn latents_from_container(c: &Container) -> Result<(Tensor2D, String)> {
    c.expect_kind("latents")?;
    let block = match c.blocks.as_slice() {
        [b] if b.name == "latents" => b,
        _ => return Err(Error::Integrity("latent file must hold one block named latents".into())),
    };
    Ok((block.to_tensor()?, c.get("vae_sha256")?))
}
