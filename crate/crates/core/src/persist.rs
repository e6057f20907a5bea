//! Binary model files.
//!
//! Layout, little-endian:
//!
//! ```text
//! b"CHRM" | version: u16 | kind: u8 | payload | crc32(everything before): u32
//! ```
//!
//! Parameters are stored as raw `f64`, so a save/load round trip is exact.
//! Readers check the magic, then the version, then the checksum.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::dates::TemporalBinning;
use crate::error::{Error, Result};
use crate::linear::{LinearSvmModel, LinearSvrModel};
use crate::net::{LayerSpec, MicroNet, Shape};

pub const MODEL_MAGIC: &[u8; 4] = b"CHRM";
pub const MODEL_VERSION: u16 = 1;

const KIND_SVM: u8 = 1;
const KIND_SVR: u8 = 2;
const KIND_NET: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Svm(LinearSvmModel),
    Svr(LinearSvrModel),
    Net(MicroNet),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Svm(_) => "svm",
            Model::Svr(_) => "svr",
            Model::Net(_) => "net",
        }
    }

    pub fn into_svm(self) -> Result<LinearSvmModel> {
        match self {
            Model::Svm(m) => Ok(m),
            other => Err(wrong("svm", &other)),
        }
    }

    pub fn into_svr(self) -> Result<LinearSvrModel> {
        match self {
            Model::Svr(m) => Ok(m),
            other => Err(wrong("svr", &other)),
        }
    }

    pub fn into_net(self) -> Result<MicroNet> {
        match self {
            Model::Net(m) => Ok(m),
            other => Err(wrong("net", &other)),
        }
    }
}

fn wrong(expected: &'static str, found: &Model) -> Error {
    Error::WrongModelKind {
        expected,
        found: found.kind_name(),
    }
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.write_u64::<LittleEndian>(values.len() as u64).unwrap();
    for &v in values {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
}

fn put_binning(buf: &mut Vec<u8>, b: &TemporalBinning) {
    buf.write_i32::<LittleEndian>(b.origin_year()).unwrap();
    buf.write_u32::<LittleEndian>(b.bin_width_years()).unwrap();
    buf.write_u64::<LittleEndian>(b.n_bins() as u64).unwrap();
}

fn put_spec(buf: &mut Vec<u8>, spec: &LayerSpec) {
    let (tag, fields): (u8, Vec<usize>) = match *spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => (1, vec![in_channels, out_channels, kernel, stride, padding]),
        LayerSpec::FullyConnected { inputs, outputs } => (2, vec![inputs, outputs]),
        LayerSpec::Relu => (3, vec![]),
        LayerSpec::MaxPool { size, stride } => (4, vec![size, stride]),
        LayerSpec::Softmax => (5, vec![]),
    };
    buf.push(tag);
    for f in fields {
        buf.write_u64::<LittleEndian>(f as u64).unwrap();
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.write_u16::<LittleEndian>(MODEL_VERSION).unwrap();
    match model {
        Model::Svm(m) => {
            buf.push(KIND_SVM);
            put_binning(&mut buf, m.binning());
            buf.write_u64::<LittleEndian>(m.dim() as u64).unwrap();
            buf.push(m.normalize_rows() as u8);
            put_f64s(&mut buf, m.weights());
            put_f64s(&mut buf, m.biases());
        }
        Model::Svr(m) => {
            buf.push(KIND_SVR);
            buf.push(m.normalize_rows() as u8);
            put_f64s(&mut buf, m.weight());
            buf.write_f64::<LittleEndian>(m.bias()).unwrap();
        }
        Model::Net(net) => {
            buf.push(KIND_NET);
            let s = net.input_shape();
            for v in [s.channels, s.height, s.width] {
                buf.write_u64::<LittleEndian>(v as u64).unwrap();
            }
            buf.write_u64::<LittleEndian>(net.rng_seed()).unwrap();
            buf.write_u64::<LittleEndian>(net.layers().len() as u64)
                .unwrap();
            for layer in net.layers() {
                put_spec(&mut buf, &layer.spec());
                put_f64s(&mut buf, layer.weights());
                put_f64s(&mut buf, layer.biases());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc).unwrap();
    buf
}

/// Cursor over a checksummed payload; every short read is a corrupt file.
struct Payload<'a> {
    bytes: &'a [u8],
}

impl Payload<'_> {
    fn truncated() -> Error {
        Error::CorruptFile("model payload truncated".into())
    }

    fn u8(&mut self) -> Result<u8> {
        self.bytes.read_u8().map_err(|_| Self::truncated())
    }

    fn u32(&mut self) -> Result<u32> {
        self.bytes
            .read_u32::<LittleEndian>()
            .map_err(|_| Self::truncated())
    }

    fn i32(&mut self) -> Result<i32> {
        self.bytes
            .read_i32::<LittleEndian>()
            .map_err(|_| Self::truncated())
    }

    fn u64(&mut self) -> Result<u64> {
        self.bytes
            .read_u64::<LittleEndian>()
            .map_err(|_| Self::truncated())
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptFile("size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        self.bytes
            .read_f64::<LittleEndian>()
            .map_err(|_| Self::truncated())
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > self.bytes.len() / 8 {
            return Err(Self::truncated());
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::CorruptFile(format!("bad flag byte {v}"))),
        }
    }

    fn binning(&mut self) -> Result<TemporalBinning> {
        let (origin, width, n) = (self.i32()?, self.u32()?, self.usize()?);
        TemporalBinning::new(origin, width, n)
    }

    fn spec(&mut self) -> Result<LayerSpec> {
        Ok(match self.u8()? {
            1 => LayerSpec::Conv {
                in_channels: self.usize()?,
                out_channels: self.usize()?,
                kernel: self.usize()?,
                stride: self.usize()?,
                padding: self.usize()?,
            },
            2 => LayerSpec::FullyConnected {
                inputs: self.usize()?,
                outputs: self.usize()?,
            },
            3 => LayerSpec::Relu,
            4 => LayerSpec::MaxPool {
                size: self.usize()?,
                stride: self.usize()?,
            },
            5 => LayerSpec::Softmax,
            t => return Err(Error::CorruptFile(format!("unknown layer tag {t}"))),
        })
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::CorruptFile("not a model file".into()));
    }
    if bytes.len() < 6 {
        return Err(Error::CorruptFile("model header truncated".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    if bytes.len() < 11 {
        return Err(Error::CorruptFile("model file truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptFile("checksum mismatch".into()));
    }
    let kind = body[6];
    let mut p = Payload { bytes: &body[7..] };
    let model = match kind {
        KIND_SVM => {
            let binning = p.binning()?;
            let dim = p.usize()?;
            let normalize = p.flag()?;
            let weights = p.f64s()?;
            let biases = p.f64s()?;
            Model::Svm(LinearSvmModel::from_parts(
                binning, dim, weights, biases, normalize,
            )?)
        }
        KIND_SVR => {
            let normalize = p.flag()?;
            let weight = p.f64s()?;
            let bias = p.f64()?;
            Model::Svr(LinearSvrModel::from_parts(weight, bias, normalize)?)
        }
        KIND_NET => {
            let input = Shape::new(p.usize()?, p.usize()?, p.usize()?);
            let seed = p.u64()?;
            let n = p.usize()?;
            if n > p.bytes.len() {
                return Err(Payload::truncated());
            }
            let mut specs = Vec::with_capacity(n);
            let mut params = Vec::with_capacity(n);
            for _ in 0..n {
                specs.push(p.spec()?);
                let w = p.f64s()?;
                let b = p.f64s()?;
                params.push((w, b));
            }
            Model::Net(MicroNet::from_parts(input, &specs, params, seed)?)
        }
        k => return Err(Error::CorruptFile(format!("unknown model kind {k}"))),
    };
    if !p.bytes.is_empty() {
        return Err(Error::CorruptFile(
            "trailing bytes after model payload".into(),
        ));
    }
    Ok(model)
}

pub fn write_model<W: Write>(mut w: W, model: &Model) -> Result<()> {
    w.write_all(&encode_model(model))?;
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    read_model(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::default_architecture;

    fn samples() -> Vec<Model> {
        let binning = TemporalBinning::new(1920, 10, 3).unwrap();
        let svm = LinearSvmModel::from_parts(
            binning,
            2,
            vec![0.1, -2.5, 1e-300, 3.0, f64::MIN_POSITIVE, -0.0],
            vec![0.5, -0.5, 1.0 / 3.0],
            true,
        )
        .unwrap();
        let svr =
            LinearSvrModel::from_parts(vec![std::f64::consts::PI, -7.0], 1955.25, false).unwrap();
        let shape = Shape::new(1, 8, 8);
        let net = MicroNet::init(shape, &default_architecture(shape, 11), 42).unwrap();
        vec![Model::Svm(svm), Model::Svr(svr), Model::Net(net)]
    }

    #[test]
    fn round_trips_are_bit_exact() {
        for m in samples() {
            let bytes = encode_model(&m);
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode_model(&back), bytes);
        }
    }

    #[test]
    fn header_errors_in_order() {
        let bytes = encode_model(&samples()[1]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::CorruptFile(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_model(&bad),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode_model(&bad), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode_model(&samples()[0]);
        for cut in 0..bytes.len() {
            assert!(matches!(
                decode_model(&bytes[..cut]),
                Err(Error::CorruptFile(_))
            ));
        }
    }

    #[test]
    fn kind_accessors() {
        let m = samples().remove(0);
        assert!(matches!(
            m.clone().into_net(),
            Err(Error::WrongModelKind {
                expected: "net",
                found: "svm"
            })
        ));
        assert!(m.into_svm().is_ok());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = samples().remove(2);
        save_model(&path, &m).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }
}
