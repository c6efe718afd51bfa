//! Checkpoint directory layout: a versioned `meta.json` (pyramid geometry,
//! noise schedule, z*, config snapshot) plus one binary parameter blob per
//! scale named `scale_<n>` holding the generator and critic tensors.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::CHANNELS;
use crate::networks::{init_discriminator, init_generator, NoiseMap};
use crate::tensor::Tensor;

use super::{Checkpoint, NoiseSchedule, PyramidMeta, ScaleModel, TrainConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const BLOB_MAGIC: &[u8; 4] = b"UBSC";

#[derive(Serialize, Deserialize)]
struct ZStarMeta {
    height: usize,
    width: usize,
    amplitude_sigma: f32,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    pyramid: PyramidMeta,
    noise_schedule: NoiseSchedule,
    z_star: ZStarMeta,
    config: TrainConfig,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn write_blob(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

struct BlobReader {
    buf: Vec<u8>,
    pos: usize,
    path: PathBuf,
}

impl BlobReader {
    fn open(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        File::open(path).map_err(io_err(path))?.read_to_end(&mut buf).map_err(io_err(path))?;
        Ok(BlobReader { buf, pos: 0, path: path.to_path_buf() })
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{}: truncated parameter blob",
                self.path.display()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_blob(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BlobReader::open(path)?;
    if r.take(4)? != BLOB_MAGIC {
        return Err(Error::CorruptCheckpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::IncompatibleVersion {
            found: version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("non-utf8 tensor name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}

/// Write `meta.json` plus one `scale_<n>` blob per scale. Lossless for every
/// parameter, z*, the schedule and the config snapshot.
pub fn save_checkpoint(ck: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let meta = CheckpointMeta {
        format_version: ck.format_version,
        pyramid: ck.pyramid_meta.clone(),
        noise_schedule: ck.noise_schedule.clone(),
        z_star: ZStarMeta {
            height: ck.z_star.height,
            width: ck.z_star.width,
            amplitude_sigma: ck.z_star.amplitude_sigma,
            data: ck.z_star.data().to_vec(),
        },
        config: ck.config_snapshot.clone(),
    };
    let meta_path = dir.join("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serializable"))
        .map_err(io_err(&meta_path))?;

    for (n, model) in ck.scale_models.iter().enumerate() {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in model.generator.named_tensors() {
            tensors.push((format!("g.{name}"), t));
        }
        for (name, t) in model.discriminator.named_tensors() {
            tensors.push((format!("d.{name}"), t));
        }
        write_blob(&dir.join(format!("scale_{n}")), &tensors)?;
    }
    Ok(())
}

fn fill_from_blob(
    target: &mut [(String, &mut Tensor)],
    prefix: &str,
    blob: &[(String, Tensor)],
    path: &Path,
) -> Result<()> {
    for (name, t) in target.iter_mut() {
        let full = format!("{prefix}.{name}");
        let found = blob.iter().find(|(n, _)| *n == full).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("{}: missing tensor {full}", path.display()))
        })?;
        if found.1.shape() != t.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "{}: tensor {full} has shape {:?}, expected {:?}",
                path.display(),
                found.1.shape(),
                t.shape()
            )));
        }
        **t = found.1.clone();
    }
    Ok(())
}

/// Load a checkpoint directory produced by `save_checkpoint`.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;

    // Check the version before fully parsing, so a future schema gives the
    // incompatibility error rather than a parse error.
    let probe: serde_json::Value = serde_json::from_str(&meta_text)
        .map_err(|e| Error::CorruptCheckpoint(format!("meta.json: {e}")))?;
    let found = probe
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptCheckpoint("meta.json: no format_version".into()))?
        as u32;
    if found != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::IncompatibleVersion { found, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::CorruptCheckpoint(format!("meta.json: {e}")))?;

    if meta.z_star.data.len() != CHANNELS * meta.z_star.height * meta.z_star.width {
        return Err(Error::CorruptCheckpoint("meta.json: z* size mismatch".into()));
    }
    let z_star = NoiseMap::from_planar(
        meta.z_star.height,
        meta.z_star.width,
        meta.z_star.amplitude_sigma,
        meta.z_star.data,
    );

    let num_scales = meta.pyramid.level_dims.len();
    let mut scale_models = Vec::with_capacity(num_scales);
    for n in 0..num_scales {
        let path = dir.join(format!("scale_{n}"));
        let blob = read_blob(&path)?;
        let mut generator = init_generator(&meta.config.net, n, 0);
        let mut discriminator = init_discriminator(&meta.config.net, n, 0);
        fill_from_blob(&mut generator.named_tensors_mut(), "g", &blob, &path)?;
        fill_from_blob(&mut discriminator.named_tensors_mut(), "d", &blob, &path)?;
        scale_models.push(ScaleModel { generator, discriminator });
    }

    let ck = Checkpoint {
        scale_models,
        z_star,
        noise_schedule: meta.noise_schedule,
        pyramid_meta: meta.pyramid,
        config_snapshot: meta.config,
        format_version: meta.format_version,
    };
    ck.validate()?;
    Ok(ck)
}
