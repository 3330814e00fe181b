//! VOLB on-disk format: a raw little-endian row-major payload plus a JSON
//! sidecar header at `<payload>.json`.
//!
//! ```json
//! {"shape":[D,H,W],"dtype":"f32","order":"row-major","endianness":"little"}
//! ```
//!
//! Images and prompt channels use `f32`; masks use `u8` with values `{0, 1}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Mask3D, Shape3, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolbHeader {
    pub shape: [usize; 3],
    pub dtype: Dtype,
    pub order: String,
    pub endianness: String,
}

impl VolbHeader {
    fn new(shape: Shape3, dtype: Dtype) -> Self {
        VolbHeader { shape: shape.0, dtype, order: "row-major".into(), endianness: "little".into() }
    }
}

/// Either payload kind, as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum VolbData {
    Volume(Volume3D<f32>),
    Mask(Mask3D),
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write(path: &Path, header: &VolbHeader, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let hp = header_path(path);
    let json = serde_json::to_vec(header).map_err(|e| Error::Json { path: hp.clone(), source: e })?;
    fs::write(&hp, json).map_err(|e| Error::io(&hp, e))?;
    fs::write(path, payload).map_err(|e| Error::io(path, e))
}

pub fn save_volume(path: &Path, v: &Volume3D<f32>) -> Result<()> {
    let mut payload = Vec::with_capacity(v.data().len() * 4);
    for &x in v.data() {
        x.write_le(&mut payload);
    }
    write(path, &VolbHeader::new(v.shape(), Dtype::F32), &payload)
}

pub fn save_mask(path: &Path, m: &Mask3D) -> Result<()> {
    write(path, &VolbHeader::new(m.shape(), Dtype::U8), m.data())
}

pub fn read_header(path: &Path) -> Result<VolbHeader> {
    let hp = header_path(path);
    let raw = fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: VolbHeader = serde_json::from_slice(&raw)
        .map_err(|e| Error::Format { path: hp.clone(), reason: format!("bad header: {e}") })?;
    let bad = |reason: String| Error::Format { path: hp.clone(), reason };
    if header.order != "row-major" {
        return Err(bad(format!("unsupported order `{}`", header.order)));
    }
    if header.endianness != "little" {
        return Err(bad(format!("unsupported endianness `{}`", header.endianness)));
    }
    Shape3(header.shape).validate().map_err(|e| bad(e.to_string()))?;
    Ok(header)
}

pub fn load(path: &Path) -> Result<VolbData> {
    let header = read_header(path)?;
    let shape = Shape3(header.shape);
    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = shape.len() * header.dtype.width();
    if payload.len() != expected {
        return Err(Error::Format {
            path: path.to_owned(),
            reason: format!("payload is {} bytes, header implies {expected}", payload.len()),
        });
    }
    let corrupt = |e: Error| Error::Format { path: path.to_owned(), reason: e.to_string() };
    Ok(match header.dtype {
        Dtype::F32 => {
            let data = payload.chunks_exact(4).map(f32::read_le).collect();
            VolbData::Volume(Volume3D::new(shape, data).map_err(corrupt)?)
        }
        Dtype::U8 => VolbData::Mask(Mask3D::new(shape, payload).map_err(corrupt)?),
    })
}

pub fn load_volume(path: &Path) -> Result<Volume3D<f32>> {
    match load(path)? {
        VolbData::Volume(v) => Ok(v),
        VolbData::Mask(m) => Ok(m.to_volume()),
    }
}

pub fn load_mask(path: &Path) -> Result<Mask3D> {
    match load(path)? {
        VolbData::Mask(m) => Ok(m),
        VolbData::Volume(_) => Err(Error::Format {
            path: path.to_owned(),
            reason: "expected dtype u8 mask, found f32".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.volb");
        save_mask(&p, &Mask3D::new(Shape3([1, 2, 3]), vec![0, 1, 1, 0, 0, 1]).unwrap()).unwrap();
        let text = fs::read_to_string(header_path(&p)).unwrap();
        assert_eq!(text, r#"{"shape":[1,2,3],"dtype":"u8","order":"row-major","endianness":"little"}"#);
        assert_eq!(fs::read(&p).unwrap(), vec![0, 1, 1, 0, 0, 1]);
    }

    #[test]
    fn rejects_size_mismatch_and_corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.volb");
        save_volume(&p, &Volume3D::filled(Shape3([2, 2, 2]), 0.5)).unwrap();
        fs::write(&p, [0u8; 31]).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));

        fs::write(header_path(&p), b"{\"shape\":[2,2]}").unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));

        fs::write(header_path(&p), br#"{"shape":[2,0,2],"dtype":"f32","order":"row-major","endianness":"little"}"#)
            .unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_non_binary_mask_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.volb");
        save_mask(&p, &Mask3D::zeros(Shape3([1, 1, 2]))).unwrap();
        fs::write(&p, [0u8, 3]).unwrap();
        assert!(load_mask(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 24)) {
            let dir = tempfile::tempdir().unwrap();
            // arbitrary finite f32 patterns, including subnormals and -0.0
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).map(|x| if x.is_finite() { x } else { 0.0 }).collect();
            let v = Volume3D::new(Shape3([2, 3, 4]), data).unwrap();
            let p = dir.path().join("x.volb");
            save_volume(&p, &v).unwrap();
            let back = load_volume(&p).unwrap();
            prop_assert!(v.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

            let m = Mask3D::new(Shape3([2, 3, 4]), bits.iter().map(|&b| (b & 1) as u8).collect()).unwrap();
            let q = dir.path().join("y.volb");
            save_mask(&q, &m).unwrap();
            prop_assert_eq!(load_mask(&q).unwrap(), m);
        }
    }
}
