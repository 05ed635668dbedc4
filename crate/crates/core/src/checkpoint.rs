//! The "LMK1" checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "LMK1"
//! version    u16
//! width      u8       scalar byte width (4 = f32, 8 = f64)
//! tag        u16 length + UTF-8
//! schedule   u8 flag; if 1: u8 kind code, u32 length, length x f64 alpha_bar
//! metadata   u32 length + JSON
//! params     u64 length + parameter blob
//! checksum   u64      FNV-1a over every preceding byte
//! ```

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecArch, CodecParams};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::ecc::RscConfig;
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::scalar::Scalar;
use crate::tensor::LatentShape;
use crate::toy::{ToyArch, ToyBackend};

pub const MAGIC: &[u8; 4] = b"LMK1";
pub const VERSION: u16 = 1;
pub const CODEC_TAG: &str = "codec";
pub const TOY_BACKEND_TAG: &str = "toy_backend";

/// Decoded container contents before they are turned into a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub scalar_width: u8,
    pub tag: String,
    pub schedule: Option<(ScheduleKind, Vec<f64>)>,
    pub metadata: Vec<u8>,
    pub params: Vec<u8>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let too_long = |what: &str| Error::Format(format!("{what} too long for the container"));
        let mut out = Vec::with_capacity(self.params.len() + self.metadata.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.scalar_width);
        let tag_len = u16::try_from(self.tag.len()).map_err(|_| too_long("tag"))?;
        out.extend_from_slice(&tag_len.to_le_bytes());
        out.extend_from_slice(self.tag.as_bytes());
        match &self.schedule {
            None => out.push(0),
            Some((kind, alpha_bar)) => {
                out.push(1);
                out.push(kind.code());
                let n = u32::try_from(alpha_bar.len()).map_err(|_| too_long("schedule"))?;
                out.extend_from_slice(&n.to_le_bytes());
                for a in alpha_bar {
                    out.extend_from_slice(&a.to_le_bytes());
                }
            }
        }
        let meta_len = u32::try_from(self.metadata.len()).map_err(|_| too_long("metadata"))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&self.metadata);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.params);
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an LMK1 checkpoint (bad magic)".into()));
        }
        if fnv1a(body) != u64::from_le_bytes(sum.try_into().expect("8 bytes")) {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let scalar_width = r.take(1)?[0];
        let tag_len = u16::from_le_bytes(r.array()?) as usize;
        let tag = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint tag is not UTF-8".into()))?;
        let schedule = match r.take(1)?[0] {
            0 => None,
            1 => {
                let kind = ScheduleKind::from_code(r.take(1)?[0]).map_err(|e| Error::Format(e.to_string()))?;
                let n = u32::from_le_bytes(r.array()?) as usize;
                let alpha_bar = (0..n)
                    .map(|_| r.array().map(f64::from_le_bytes))
                    .collect::<Result<Vec<_>>>()?;
                Some((kind, alpha_bar))
            }
            other => return Err(Error::Format(format!("bad schedule flag {other}"))),
        };
        let meta_len = u32::from_le_bytes(r.array()?) as usize;
        let metadata = r.take(meta_len)?.to_vec();
        let param_len = u64::from_le_bytes(r.array()?);
        let param_len = usize::try_from(param_len).map_err(|_| Error::Format("parameter blob too large".into()))?;
        let params = r.take(param_len)?.to_vec();
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after parameter blob".into()));
        }
        Ok(Self {
            scalar_width,
            tag,
            schedule,
            metadata,
            params,
        })
    }

    /// Writes through a temporary file in the same directory and renames it
    /// into place, so readers never observe a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(format!("reading checkpoint {}", path.display())))
    }

    fn expect<T: Scalar>(&self, tag: &str) -> Result<()> {
        if self.tag != tag {
            return Err(Error::Format(format!("expected a `{tag}` checkpoint, found `{}`", self.tag)));
        }
        if self.scalar_width != T::WIDTH {
            return Err(Error::Format(format!(
                "checkpoint stores {}-byte scalars, caller asked for {}-byte",
                self.scalar_width,
                T::WIDTH
            )));
        }
        Ok(())
    }

    fn metadata_as<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_slice(&self.metadata).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))
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
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Metadata stored with a codec checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecMetadata {
    pub k: usize,
    pub latent_shape: LatentShape,
    pub arch: CodecArch,
    /// Error-correcting code the watermark bits were produced with, if any.
    pub ecc: Option<RscConfig>,
}

pub fn codec_container<T: Scalar>(codec: &CodecParams<T>, ecc: Option<&RscConfig>) -> Result<Container> {
    let meta = CodecMetadata {
        k: codec.k(),
        latent_shape: codec.latent_shape(),
        arch: codec.arch(),
        ecc: ecc.cloned(),
    };
    Ok(Container {
        scalar_width: T::WIDTH,
        tag: CODEC_TAG.into(),
        schedule: None,
        metadata: serde_json::to_vec(&meta)?,
        params: codec.to_blob(),
    })
}

pub fn save_codec<T: Scalar>(path: &Path, codec: &CodecParams<T>, ecc: Option<&RscConfig>) -> Result<()> {
    codec_container(codec, ecc)?.save(path)
}

pub fn load_codec<T: Scalar>(path: &Path) -> Result<(CodecParams<T>, CodecMetadata)> {
    let c = Container::load(path)?;
    c.expect::<T>(CODEC_TAG)?;
    let meta: CodecMetadata = c.metadata_as()?;
    // the initial weights are overwritten, so any seed will do
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut codec = CodecParams::new(meta.k, meta.latent_shape, meta.arch, &mut rng)
        .map_err(|e| Error::Format(format!("codec metadata: {e}")))?;
    codec.load_blob(&c.params)?;
    Ok((codec, meta))
}

pub fn backend_container<T: Scalar>(backend: &ToyBackend<T>) -> Result<Container> {
    Ok(Container {
        scalar_width: T::WIDTH,
        tag: TOY_BACKEND_TAG.into(),
        schedule: Some((
            backend.schedule.kind(),
            backend.schedule.alpha_bars().iter().map(|a| a.as_f64()).collect(),
        )),
        metadata: serde_json::to_vec(&backend.arch())?,
        params: backend.to_blob(),
    })
}

pub fn save_toy_backend<T: Scalar>(path: &Path, backend: &ToyBackend<T>) -> Result<()> {
    backend_container(backend)?.save(path)
}

pub fn load_toy_backend<T: Scalar>(path: &Path) -> Result<ToyBackend<T>> {
    let c = Container::load(path)?;
    c.expect::<T>(TOY_BACKEND_TAG)?;
    let arch: ToyArch = c.metadata_as()?;
    let (kind, alpha_bar) = c
        .schedule
        .clone()
        .ok_or_else(|| Error::Format("backend checkpoint has no schedule block".into()))?;
    let schedule = NoiseSchedule::from_alpha_bar(kind, alpha_bar.into_iter().map(T::lit).collect())
        .map_err(|e| Error::Format(format!("schedule block: {e}")))?;
    let mut backend = ToyBackend::with_arch(arch, schedule);
    backend.load_blob(&c.params)?;
    Ok(backend)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_codec() -> CodecParams<f32> {
        let arch = CodecArch {
            hidden: 16,
            coarse_channels: 4,
            fine_channels: 4,
        };
        CodecParams::new(8, LatentShape::new(2, 4, 4), arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn container_roundtrip() {
        let c = Container {
            scalar_width: 8,
            tag: "x".into(),
            schedule: Some((ScheduleKind::Cosine, vec![1.0, 0.5, 0.25])),
            metadata: b"{}".to_vec(),
            params: vec![1, 2, 3],
        };
        assert_eq!(Container::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn corruption_is_detected() {
        let codec = small_codec();
        let mut bytes = codec_container(&codec, None).unwrap().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(Container::from_bytes(b"LMK2abcdefgh"), Err(Error::Format(_))));
        assert!(matches!(Container::from_bytes(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn codec_save_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.lmk");
        let codec = small_codec();
        let ecc = RscConfig::default_for_payload(2);
        save_codec(&path, &codec, Some(&ecc)).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (loaded, meta) = load_codec::<f32>(&path).unwrap();
        assert_eq!(loaded.to_blob(), codec.to_blob());
        assert_eq!(meta.ecc, Some(ecc.clone()));
        save_codec(&path, &loaded, Some(&ecc)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        // wrong precision and wrong section are both format errors
        assert!(matches!(load_codec::<f64>(&path).map(|_| ()).unwrap_err().root(), Error::Format(_)));
        assert!(matches!(load_toy_backend::<f32>(&path).map(|_| ()).unwrap_err().root(), Error::Format(_)));
    }
}
