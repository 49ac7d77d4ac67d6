//! Binary checkpoint format.
//!
//! ```text
//! "IRRC" | u32 version | u8 precision | u32 len, architecture TOML
//! u64 epoch | u64 seed | u32 entry count
//! per entry: u32 len, name | u8 rank | rank × u32 dims | little-endian values
//! ```

use std::fs;
use std::path::Path;

use crate::arch::{build_model, ArchSpec, Model};
use crate::error::{Error, Result};
use crate::tensor::{Element, Precision};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IRRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub precision: Precision,
    pub arch: ArchSpec,
    pub epoch: u64,
    pub seed: u64,
}

fn precision_byte(p: Precision) -> u8 {
    match p {
        Precision::Standard => 0,
        Precision::Wide => 1,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<T: Element>(model: &Model<T>, epoch: u64, seed: u64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(precision_byte(T::PRECISION));
    let arch = model.spec().to_toml();
    put_u32(&mut out, arch.len())?;
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    put_u32(&mut out, model.params().len())?;
    for (name, p) in model.params().iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        let dims = p.value.shape().dims();
        out.push(dims.len() as u8);
        for d in dims {
            put_u32(&mut out, d)?;
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Element>(
    path: &Path,
    model: &Model<T>,
    epoch: u64,
    seed: u64,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(model, epoch, seed)?)?;
    Ok(())
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<CheckpointHeader> {
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let precision = match r.u8()? {
        0 => Precision::Standard,
        1 => Precision::Wide,
        b => return Err(Error::Checkpoint(format!("unknown precision tag {b}"))),
    };
    let arch = ArchSpec::from_toml(r.string()?)
        .map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
    Ok(CheckpointHeader {
        precision,
        arch,
        epoch: r.u64()?,
        seed: r.u64()?,
    })
}

/// Header only; used to pick the precision before decoding values.
pub fn peek_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    read_header(&mut Reader { bytes, pos: 0 })
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<(Model<T>, CheckpointHeader)> {
    let mut r = Reader { bytes, pos: 0 };
    let header = read_header(&mut r)?;
    if header.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {:?} values, requested {:?}",
            header.precision,
            T::PRECISION
        )));
    }
    let mut model = build_model::<T>(&header.arch)
        .map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
    let count = r.u32()?;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, architecture has {}",
            model.params().len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name = r.string()?.to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        let rank = r.u8()? as usize;
        if rank != 4 {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has rank {rank}"
            )));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let target = model
            .params_mut()
            .tensor_mut(&name)
            .map_err(|_| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if target.shape().dims() != dims {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is {dims:?}, architecture expects {}",
                target.shape()
            )));
        }
        let raw = r.take(target.len() * T::BYTES)?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(T::BYTES)) {
            *dst = T::read_le(chunk);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((model, header))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::arch::Variant;
    use crate::init::scaled_uniform_model;
    use crate::layers::Mode;
    use crate::tensor::Tensor;

    fn model<T: Element>() -> Model<T> {
        let mut m = build_model(&ArchSpec::miniature(Variant::Eirn, 5)).unwrap();
        scaled_uniform_model(&mut m, &mut ChaCha8Rng::seed_from_u64(1));
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model::<f32>();
        let bytes = encode_checkpoint(&m, 7, 42).unwrap();
        let (back, header) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(
            (header.epoch, header.seed, header.precision),
            (7, 42, Precision::Standard)
        );
        assert_eq!(back.params(), m.params());
        let x = Tensor::from_fn((2, 3, 8, 8), |i| (i as f32 * 0.37).sin());
        let a = m.logits(&x, Mode::Infer).unwrap();
        let b = back.logits(&x, Mode::Infer).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn precision_is_checked() {
        let bytes = encode_checkpoint(&model::<f64>(), 0, 0).unwrap();
        assert_eq!(peek_header(&bytes).unwrap().precision, Precision::Wide);
        assert!(decode_checkpoint::<f64>(&bytes).is_ok());
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&model::<f32>(), 0, 0).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f32>(&bad),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]),
            Err(Error::Checkpoint(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_checkpoint::<f32>(&long),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn saves_into_new_directories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/model.ckpt");
        save_checkpoint(&path, &model::<f32>(), 1, 2).unwrap();
        let (m, h) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(h.arch, *m.spec());
    }
}
