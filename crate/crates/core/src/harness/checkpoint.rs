use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::sdrnet::{path_decode, BlockStats, BnEntry, BnStats, NetConfig, SdrNet, Target};

const MAGIC: &[u8; 4] = b"SDR1";
const VERSION: u32 = 1;
const BN_PREFIX: &str = "bnstats.";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Metadata lines plus named tensors, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor2D)>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
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
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("metadata entry `{k}` cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(meta.as_bytes());
        put_u64(&mut out, self.tensors.len() as u64);
        for (name, t) in &self.tensors {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.rows() as u64);
            put_u64(&mut out, t.cols() as u64);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        put_u64(&mut out, sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing SDR1 magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let meta_len = r.len()?;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let metadata = meta
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("metadata line `{l}` lacks `=`")))
            })
            .collect::<Result<_>>()?;
        let count = r.len()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.len()?;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.len()?;
            let cols = r.len()?;
            let size = rows
                .checked_mul(cols)
                .and_then(|s| s.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let data = r
                .take(size)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor2D::from_vec(rows, cols, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Net parameters, every calibrated statistics entry, and the net shape in the metadata.
    pub fn from_net(net: &SdrNet, bn: &BnStats, extra: &[(String, String)]) -> Self {
        let cfg = net.config();
        let mut metadata = cfg.to_metadata();
        metadata.extend(extra.iter().cloned());
        let mut tensors: Vec<(String, Tensor2D)> = net.names().iter().cloned().zip(net.params().iter().cloned()).collect();
        for (target, entry) in bn.iter() {
            let label = match target {
                Target::Full => "full".to_string(),
                Target::Path(p) => format!("path{}", p.index(cfg.groups).expect("checked on insert")),
            };
            for (l, b) in entry.blocks.iter().enumerate() {
                tensors.push((format!("{BN_PREFIX}{label}.block{l}.mean"), Tensor2D::row_vector(&b.mean)));
                tensors.push((format!("{BN_PREFIX}{label}.block{l}.var"), Tensor2D::row_vector(&b.var)));
            }
        }
        Self { metadata, tensors }
    }

    /// Rebuilds the net and statistics written by [`Checkpoint::from_net`].
    pub fn to_net(&self) -> Result<(SdrNet, BnStats)> {
        let cfg = NetConfig::from_metadata(&self.metadata)?;
        let mut net = SdrNet::zeros(cfg.clone())?;
        let mut seen = vec![false; net.params().len()];
        let mut partial: std::collections::BTreeMap<Target, Vec<BlockStats>> = Default::default();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(BN_PREFIX) {
                let (target, block, field) = parse_bn_name(rest, &cfg).ok_or_else(|| Error::Format(format!("bad statistics tensor `{name}`")))?;
                let blocks = partial.entry(target).or_insert_with(|| vec![BlockStats::default(); cfg.blocks]);
                let slot = blocks.get_mut(block).ok_or_else(|| Error::Format(format!("`{name}` names a missing block")))?;
                match field {
                    "mean" => slot.mean = t.data().to_vec(),
                    _ => slot.var = t.data().to_vec(),
                }
                continue;
            }
            let id = net.find(name).ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
            net.set_param(id, t.clone())?;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("checkpoint lacks `{}`", net.names()[i])));
        }
        let mut bn = BnStats::new();
        for (t, blocks) in partial {
            bn.insert(t, BnEntry { blocks });
        }
        Ok((net, bn))
    }
}

fn parse_bn_name<'a>(rest: &'a str, cfg: &NetConfig) -> Option<(Target, usize, &'a str)> {
    let mut parts = rest.split('.');
    let label = parts.next()?;
    let block = parts.next()?.strip_prefix("block")?.parse().ok()?;
    let field = parts.next()?;
    if parts.next().is_some() || !(field == "mean" || field == "var") {
        return None;
    }
    let target = if label == "full" {
        Target::Full
    } else {
        Target::Path(path_decode(label.strip_prefix("path")?.parse().ok()?, cfg.groups, cfg.blocks).ok()?)
    };
    Some((target, block, field))
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
