//! Single-file training checkpoint.
//!
//! Layout (little-endian): the 8-byte magic `SEMISEG\0`, a u32 format
//! version, then tagged sections `[tag: 4 bytes][len: u64][payload]`.
//! Tensors are stored as raw element bits so a save/load cycle is exact.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor};

use crate::bank::MemoryBank;
use crate::data::{ClassFrequencyTable, FrequencySource};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEMISEG\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Option<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// TOML snapshot of the run configuration.
    pub config: String,
    pub iter: u64,
    pub student: Vec<(String, Tensor)>,
    pub teacher: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
    pub bank: MemoryBank,
    pub frequencies: ClassFrequencyTable,
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let dims = t.dims();
    w.write_u32::<LittleEndian>(dims.len() as u32)?;
    for &d in dims {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => {
            w.write_u8(0)?;
            for v in flat.to_vec1::<f32>()? {
                w.write_u32::<LittleEndian>(v.to_bits())?;
            }
        }
        DType::F64 => {
            w.write_u8(1)?;
            for v in flat.to_vec1::<f64>()? {
                w.write_u64::<LittleEndian>(v.to_bits())?;
            }
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    let dims: Vec<usize> = (0..ndim)
        .map(|_| Ok(r.read_u64::<LittleEndian>()? as usize))
        .collect::<Result<_>>()?;
    let n: usize = dims.iter().product();
    let t = match r.read_u8()? {
        0 => {
            let mut v = vec![0u32; n];
            r.read_u32_into::<LittleEndian>(&mut v)?;
            let v: Vec<f32> = v.into_iter().map(f32::from_bits).collect();
            Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
        }
        1 => {
            let mut v = vec![0u64; n];
            r.read_u64_into::<LittleEndian>(&mut v)?;
            let v: Vec<f64> = v.into_iter().map(f64::from_bits).collect();
            Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
        }
        tag => return Err(Error::Checkpoint(format!("unknown dtype tag {tag}"))),
    };
    Ok(t)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid utf-8 string: {e}")))
}

fn write_named<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        write_str(w, name)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_named<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    (0..n).map(|_| Ok((read_str(r)?, read_tensor(r)?))).collect()
}

fn section<W: Write>(w: &mut W, tag: &[u8; 4], body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    body(&mut buf)?;
    w.write_all(tag)?;
    w.write_u64::<LittleEndian>(buf.len() as u64)?;
    w.write_all(&buf)?;
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        section(&mut out, b"CONF", |b| write_str(b, &self.config))?;
        section(&mut out, b"ITER", |b| Ok(b.write_u64::<LittleEndian>(self.iter)?))?;
        section(&mut out, b"STUD", |b| write_named(b, &self.student))?;
        section(&mut out, b"TEAC", |b| write_named(b, &self.teacher))?;
        section(&mut out, b"OPTM", |b| {
            b.write_f64::<LittleEndian>(self.optimizer.momentum)?;
            b.write_f64::<LittleEndian>(self.optimizer.weight_decay)?;
            b.write_u32::<LittleEndian>(self.optimizer.velocity.len() as u32)?;
            for v in &self.optimizer.velocity {
                match v {
                    Some(t) => {
                        b.write_u8(1)?;
                        write_tensor(b, t)?;
                    }
                    None => b.write_u8(0)?,
                }
            }
            Ok(())
        })?;
        section(&mut out, b"BANK", |b| self.bank.write_to(b))?;
        section(&mut out, b"FREQ", |b| {
            b.write_u8(match self.frequencies.source {
                FrequencySource::LabeledOnly => 0,
                FrequencySource::LabeledPlusPseudo => 1,
            })?;
            b.write_u16::<LittleEndian>(self.frequencies.ignore_index())?;
            b.write_u32::<LittleEndian>(self.frequencies.counts().len() as u32)?;
            for &c in self.frequencies.counts() {
                b.write_u64::<LittleEndian>(c)?;
            }
            Ok(())
        })?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut config = None;
        let mut iter = None;
        let mut student = None;
        let mut teacher = None;
        let mut optimizer = None;
        let mut bank = None;
        let mut frequencies = None;
        while (r.position() as usize) < bytes.len() {
            let mut tag = [0u8; 4];
            r.read_exact(&mut tag)?;
            let len = r.read_u64::<LittleEndian>()? as usize;
            let start = r.position() as usize;
            let body = bytes
                .get(start..start + len)
                .ok_or_else(|| Error::Checkpoint(format!("section {} truncated", String::from_utf8_lossy(&tag))))?;
            let mut b = Cursor::new(body);
            match &tag {
                b"CONF" => config = Some(read_str(&mut b)?),
                b"ITER" => iter = Some(b.read_u64::<LittleEndian>()?),
                b"STUD" => student = Some(read_named(&mut b)?),
                b"TEAC" => teacher = Some(read_named(&mut b)?),
                b"OPTM" => {
                    let momentum = b.read_f64::<LittleEndian>()?;
                    let weight_decay = b.read_f64::<LittleEndian>()?;
                    let n = b.read_u32::<LittleEndian>()? as usize;
                    let velocity = (0..n)
                        .map(|_| match b.read_u8()? {
                            0 => Ok(None),
                            _ => Ok(Some(read_tensor(&mut b)?)),
                        })
                        .collect::<Result<_>>()?;
                    optimizer = Some(OptimizerState {
                        momentum,
                        weight_decay,
                        velocity,
                    });
                }
                b"BANK" => bank = Some(MemoryBank::read_from(&mut b)?),
                b"FREQ" => {
                    let source = match b.read_u8()? {
                        0 => FrequencySource::LabeledOnly,
                        _ => FrequencySource::LabeledPlusPseudo,
                    };
                    let ignore = b.read_u16::<LittleEndian>()?;
                    let n = b.read_u32::<LittleEndian>()? as usize;
                    let mut counts = vec![0u64; n];
                    b.read_u64_into::<LittleEndian>(&mut counts)?;
                    frequencies = Some(ClassFrequencyTable::from_counts(counts, ignore, source));
                }
                other => log::warn!("skipping unknown checkpoint section {}", String::from_utf8_lossy(other)),
            }
            r.set_position((start + len) as u64);
        }
        let missing = |name: &str| Error::Checkpoint(format!("missing section {name}"));
        Ok(Self {
            config: config.ok_or_else(|| missing("CONF"))?,
            iter: iter.ok_or_else(|| missing("ITER"))?,
            student: student.ok_or_else(|| missing("STUD"))?,
            teacher: teacher.ok_or_else(|| missing("TEAC"))?,
            optimizer: optimizer.ok_or_else(|| missing("OPTM"))?,
            bank: bank.ok_or_else(|| missing("BANK"))?,
            frequencies: frequencies.ok_or_else(|| missing("FREQ"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::load(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::load(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::FeatureRecord;

    fn sample() -> Checkpoint {
        let dev = Device::Cpu;
        let a = Tensor::from_vec(vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-9], (2, 2), &dev).unwrap();
        let b = Tensor::from_vec(vec![0.1f64, 1e300], 2, &dev).unwrap();
        let mut bank = MemoryBank::new(2, 3, 2);
        bank.enqueue(
            1,
            vec![FeatureRecord {
                vector: vec![0.25, -7.0],
                class_id: 1,
                confidence: 0.97,
                rank_score: 0.61,
                iteration: 42,
            }],
        )
        .unwrap();
        Checkpoint {
            config: "[train]\ntotal_iters = 5\n".into(),
            iter: 5,
            student: vec![("w".into(), a.clone()), ("b".into(), b.clone())],
            teacher: vec![("w".into(), (a * 2.0).unwrap()), ("b".into(), b)],
            optimizer: OptimizerState {
                momentum: 0.9,
                weight_decay: 1e-4,
                velocity: vec![None, Some(Tensor::new(&[0.5f64, 0.25], &dev).unwrap())],
            },
            bank,
            frequencies: ClassFrequencyTable::from_counts(vec![7, 0], 255, FrequencySource::LabeledPlusPseudo),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.iter, 5);
        assert_eq!(back.bank, ck.bank);
        assert_eq!(back.frequencies, ck.frequencies);
        assert_eq!(back.config, ck.config);
        let w: Vec<f32> = back.student[0].1.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(w[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(
            Checkpoint::load(&path).unwrap().to_bytes().unwrap(),
            ck.to_bytes().unwrap()
        );
    }
}
