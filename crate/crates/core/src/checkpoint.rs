//! The `VITC` weight format, external weight import and head replacement.
//!
//! Layout: the magic `VITC`, a little-endian `u32` version, a `u32` count of
//! header lines, each header line as a `u32` byte length followed by UTF-8
//! text, and finally the tensor payload as little-endian `f32`.
//!
//! Header lines starting with `@` carry the model configuration and
//! metadata. Every other line describes one tensor:
//! `name \t f32 \t shape-csv \t byte-offset \t crc32-hex`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{inventory, is_head, ModelParams, ViTConfig};

pub const MAGIC: &[u8; 4] = b"VITC";
pub const VERSION: u32 = 1;
const DTYPE: &str = "f32";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub source: String,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParams<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn config(&self) -> &ViTConfig {
        self.params.config()
    }
}

/// Tensors as stored, before any inventory check.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub config: ViTConfig,
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Serialises params and metadata into a byte buffer.
pub fn encode(params: &ModelParams<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut lines = vec![
        format!("@config\t{}", params.config().to_kv()),
        format!("@meta\tseed\t{}", meta.seed),
        format!("@meta\tsource\t{}", meta.source.replace(['\t', '\n'], " ")),
        format!("@meta\tstep\t{}", meta.step),
    ];
    let mut payload = Vec::with_capacity(params.num_values() * 4);
    for (name, t) in params.iter() {
        let bytes = tensor_bytes(t);
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        lines.push(format!(
            "{name}\t{DTYPE}\t{}\t{}\t{:08x}",
            shape.join(","),
            payload.len(),
            crc32fast::hash(&bytes)
        ));
        payload.extend_from_slice(&bytes);
    }
    let mut out = Vec::with_capacity(payload.len() + 64 * lines.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(lines.len() as u32).to_le_bytes());
    for line in &lines {
        out.extend_from_slice(&(line.len() as u32).to_le_bytes());
        out.extend_from_slice(line.as_bytes());
    }
    out.extend_from_slice(&payload);
    out
}

/// Writes atomically through a temporary file in the target directory.
pub fn save(params: &ModelParams<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(params, meta);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Integrity(format!(
                "file ends inside the {what} (needs {n} bytes at offset {}, {} available)",
                self.pos,
                self.bytes.len() - self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    crc: u32,
}

fn parse_entry(line: &str) -> Result<Entry> {
    let fields: Vec<&str> = line.split('\t').collect();
    let [name, dtype, shape, offset, crc] = fields.as_slice() else {
        return Err(Error::Format(format!("malformed tensor line {line:?}")));
    };
    if *dtype != DTYPE {
        return Err(Error::Format(format!(
            "tensor {name} has unsupported dtype {dtype}"
        )));
    }
    let bad = |what: &str| Error::Format(format!("tensor {name}: bad {what} in {line:?}"));
    let shape = shape
        .split(',')
        .map(|d| d.parse::<usize>().map_err(|_| bad("shape")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Entry {
        name: name.to_string(),
        shape,
        offset: offset.parse().map_err(|_| bad("offset"))?,
        crc: u32::from_str_radix(crc, 16).map_err(|_| bad("checksum"))?,
    })
}

/// Parses a buffer without checking the tensor set against the inventory.
pub fn decode_raw(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a VITC file (bad magic bytes)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let n_lines = r.u32("header")?;
    let mut config = None;
    let mut meta = CheckpointMeta::default();
    let mut entries = Vec::new();
    for _ in 0..n_lines {
        let len = r.u32("header")? as usize;
        let line = std::str::from_utf8(r.take(len, "header")?)
            .map_err(|_| Error::Format("header line is not UTF-8".into()))?;
        if let Some(kv) = line.strip_prefix("@config\t") {
            config = Some(ViTConfig::from_kv(kv)?);
        } else if let Some(rest) = line.strip_prefix("@meta\t") {
            let (key, value) = rest
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("malformed metadata line {line:?}")))?;
            let num = |v: &str| {
                v.parse()
                    .map_err(|_| Error::Format(format!("bad metadata value {line:?}")))
            };
            match key {
                "seed" => meta.seed = num(value)?,
                "source" => meta.source = value.to_string(),
                "step" => meta.step = num(value)? as usize,
                _ => log::warn!("ignoring unknown checkpoint metadata {key}"),
            }
        } else {
            entries.push(parse_entry(line)?);
        }
    }
    let config = config.ok_or_else(|| Error::Format("header has no @config line".into()))?;

    let payload = &bytes[r.pos..];
    let expected: usize = entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected {
        return Err(Error::Integrity(format!(
            "payload length mismatch: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    let mut tensors = BTreeMap::new();
    for e in entries {
        let len = e.shape.iter().product::<usize>() * 4;
        let chunk = payload.get(e.offset..e.offset + len).ok_or_else(|| {
            Error::Integrity(format!("tensor {} lies outside the payload", e.name))
        })?;
        let crc = crc32fast::hash(chunk);
        if crc != e.crc {
            return Err(Error::Integrity(format!(
                "tensor {} checksum mismatch (stored {:08x}, computed {crc:08x})",
                e.name, e.crc
            )));
        }
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(e.shape, data)?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("tensor {} listed twice", e.name)));
        }
    }
    Ok(RawCheckpoint {
        config,
        meta,
        tensors,
    })
}

/// Parses a buffer and validates it strictly against its own config.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let raw = decode_raw(bytes)?;
    Ok(Checkpoint {
        version: VERSION,
        params: ModelParams::from_tensors(raw.config, raw.tensors)?,
        meta: raw.meta,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

pub fn load_raw(path: &Path) -> Result<RawCheckpoint> {
    decode_raw(&fs::read(path)?)
}

/// Maps tensor names of an external weight file onto the internal
/// inventory. Names without an entry are used unchanged.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RenameTable {
    pub map: BTreeMap<String, String>,
}

impl RenameTable {
    pub fn identity() -> Self {
        Self::default()
    }

    /// One `external internal` pair per line (whitespace separated);
    /// blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(from), Some(to), None) => {
                    map.insert(from.to_string(), to.to_string());
                }
                _ => {
                    return Err(Error::Format(format!(
                        "rename table line {}: {line:?}",
                        i + 1
                    )))
                }
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn apply<'n>(&'n self, name: &'n str) -> &'n str {
        self.map.get(name).map(String::as_str).unwrap_or(name)
    }
}

/// Builds params for `expected` from an external weight file. Every
/// non-head tensor must be present with the expected shape. A head of the
/// right size is kept; otherwise a zero head is installed.
pub fn import_tensors(
    tensors: BTreeMap<String, Tensor<f32>>,
    expected: &ViTConfig,
    renames: &RenameTable,
) -> Result<ModelParams<f32>> {
    expected.validate()?;
    let mut by_name: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, t) in tensors {
        by_name.insert(renames.apply(&name).to_string(), t);
    }
    let mut out = BTreeMap::new();
    let mut head_ok = true;
    for spec in inventory(expected) {
        let found = by_name.remove(&spec.name);
        if is_head(&spec.name) {
            match found {
                Some(t) if t.shape() == spec.shape.as_slice() => {
                    out.insert(spec.name, t);
                }
                _ => head_ok = false,
            }
            continue;
        }
        let t = found.ok_or_else(|| Error::Inventory(format!("missing tensor {}", spec.name)))?;
        if t.shape() != spec.shape.as_slice() {
            if spec.name == "pos_embed" && t.rank() == 2 && t.shape()[1] == spec.shape[1] {
                return Err(Error::Inventory(format!(
                    "pos_embed has {} positions but the configuration needs {}; resolution changes are not supported",
                    t.shape()[0],
                    spec.shape[0]
                )));
            }
            return Err(Error::Inventory(format!(
                "tensor {} has shape {:?}, expected {:?}",
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
        out.insert(spec.name, t);
    }
    for extra in by_name.keys() {
        log::warn!("ignoring tensor {extra} with no counterpart in the model");
    }
    let k = expected.num_classes;
    if head_ok {
        ModelParams::from_tensors(expected.clone(), out)
    } else {
        let staged = expected.with_num_classes(1);
        out.insert("head.weight".into(), Tensor::zeros(&[expected.hidden_d, 1]));
        out.insert("head.bias".into(), Tensor::zeros(&[1]));
        ModelParams::from_tensors(staged, out)?.adapt_head(k)
    }
}

pub fn import_external(
    path: &Path,
    expected: &ViTConfig,
    renames: &RenameTable,
) -> Result<ModelParams<f32>> {
    import_tensors(load_raw(path)?.tensors, expected, renames)
}

/// Zero-initialised head for `num_classes` outputs; other tensors untouched.
pub fn adapt_head(params: ModelParams<f32>, num_classes: usize) -> Result<ModelParams<f32>> {
    params.adapt_head(num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize) -> ModelParams<f32> {
        ModelParams::init(&ViTConfig::tiny(k), 9).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 9,
            source: "unit".into(),
            step: 12,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let p = tiny(3);
        let c = decode(&encode(&p, &meta())).unwrap();
        assert_eq!(c.params, p);
        assert_eq!(c.meta, meta());
        assert_eq!(c.version, 1);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = encode(&tiny(3), &meta());
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format(_))));
        let mut b = encode(&tiny(3), &meta());
        b[4] = 2;
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_reports_lengths() {
        let b = encode(&tiny(3), &meta());
        let err = decode(&b[..b.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("expected") && err.contains("found"), "{err}");
    }

    #[test]
    fn corrupted_byte_is_detected() {
        let mut b = encode(&tiny(3), &meta());
        let n = b.len();
        b[n - 5] ^= 0x40;
        assert!(matches!(decode(&b), Err(Error::Integrity(_))));
    }

    #[test]
    fn extra_tensor_is_named() {
        let p = tiny(3);
        let (cfg, mut t) = p.into_tensors();
        t.insert("rogue.tensor".into(), Tensor::zeros(&[2]));
        let forged = ModelParamsForge(cfg, t);
        let err = decode(&forged.encode()).unwrap_err().to_string();
        assert!(err.contains("rogue.tensor"), "{err}");
    }

    /// Encodes a tensor map that bypasses inventory validation.
    struct ModelParamsForge(ViTConfig, BTreeMap<String, Tensor<f32>>);

    impl ModelParamsForge {
        fn encode(&self) -> Vec<u8> {
            let mut lines = vec![format!("@config\t{}", self.0.to_kv())];
            let mut payload = Vec::new();
            for (name, t) in &self.1 {
                let bytes = tensor_bytes(t);
                let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                lines.push(format!(
                    "{name}\tf32\t{}\t{}\t{:08x}",
                    shape.join(","),
                    payload.len(),
                    crc32fast::hash(&bytes)
                ));
                payload.extend_from_slice(&bytes);
            }
            let mut out = MAGIC.to_vec();
            out.extend_from_slice(&VERSION.to_le_bytes());
            out.extend_from_slice(&(lines.len() as u32).to_le_bytes());
            for l in &lines {
                out.extend_from_slice(&(l.len() as u32).to_le_bytes());
                out.extend_from_slice(l.as_bytes());
            }
            out.extend_from_slice(&payload);
            out
        }
    }

    #[test]
    fn import_swaps_head() {
        let src = tiny(10);
        let (_, tensors) = src.clone().into_tensors();
        let p = import_tensors(tensors, &ViTConfig::tiny(7), &RenameTable::identity()).unwrap();
        assert_eq!(p.get("head.weight").unwrap().shape(), &[32, 7]);
        assert!(p
            .get("head.weight")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        for (name, t) in p.iter().filter(|(n, _)| !is_head(n)) {
            assert_eq!(t, src.get(name).unwrap());
        }
    }

    #[test]
    fn import_names_missing_tensor() {
        let cfg = ViTConfig {
            layers: 4,
            ..ViTConfig::tiny(3)
        };
        let (_, mut tensors) = ModelParams::<f32>::init(&cfg, 1).unwrap().into_tensors();
        tensors.remove("encoder.3.ln1.gamma");
        let err = import_tensors(tensors, &cfg, &RenameTable::identity())
            .unwrap_err()
            .to_string();
        assert!(err.contains("encoder.3.ln1.gamma"), "{err}");
    }

    #[test]
    fn import_rejects_other_resolution() {
        let (_, tensors) = tiny(3).into_tensors();
        let bigger = ViTConfig {
            image_size: 48,
            ..ViTConfig::tiny(3)
        };
        let err = import_tensors(tensors, &bigger, &RenameTable::identity())
            .unwrap_err()
            .to_string();
        assert!(err.contains("pos_embed"), "{err}");
    }

    #[test]
    fn rename_table_applies() {
        let table =
            RenameTable::from_text("# comment\nembedding/kernel patch_embed.weight\n\n").unwrap();
        assert_eq!(table.apply("embedding/kernel"), "patch_embed.weight");
        assert_eq!(table.apply("cls_token"), "cls_token");
        assert!(RenameTable::from_text("only-one-field").is_err());
        let (_, mut tensors) = tiny(3).into_tensors();
        let w = tensors.remove("patch_embed.weight").unwrap();
        tensors.insert("embedding/kernel".into(), w);
        assert!(import_tensors(tensors, &ViTConfig::tiny(3), &table).is_ok());
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vitc");
        save(&tiny(2), &meta(), &path).unwrap();
        assert_eq!(load(&path).unwrap().params, tiny(2));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
