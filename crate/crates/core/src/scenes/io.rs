use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, Scene};
use crate::bbox::{BBox, LabeledBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"TMRD";
pub const DATASET_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a dataset: header then labeled, unlabeled and test records.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [ds.height, ds.width, ds.num_classes, ds.labeled.len(), ds.unlabeled.len(), ds.test.len()] {
        put_u32(&mut out, v)?;
    }
    for s in ds.labeled.iter().chain(&ds.unlabeled).chain(&ds.test) {
        if s.image.shape() != [ds.height, ds.width] {
            return Err(Error::shape("encode_dataset", format!("image {:?}", s.image.shape())));
        }
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, s.objects.len())?;
        for o in &s.objects {
            put_u32(&mut out, o.class_id)?;
            for v in o.bbox.to_array() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()? as u32;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let (height, width, num_classes) = (c.u32()?, c.u32()?, c.u32()?);
    let counts = [c.u32()?, c.u32()?, c.u32()?];
    if height == 0 || width == 0 {
        return Err(Error::Format("zero image size".into()));
    }
    let mut splits: Vec<Vec<Scene>> = Vec::new();
    for n in counts {
        let mut split = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let px = (0..height * width).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
            let image = Tensor::new(vec![height, width], px).map_err(|e| Error::Format(e.to_string()))?;
            let k = c.u32()?;
            let mut objects = Vec::with_capacity(k.min(64));
            for _ in 0..k {
                let class_id = c.u32()?;
                let bbox = BBox::new(c.f64()?, c.f64()?, c.f64()?, c.f64()?);
                if class_id >= num_classes {
                    return Err(Error::Format(format!("class {class_id} out of range")));
                }
                objects.push(LabeledBox { class_id, bbox });
            }
            split.push(Scene { image, objects });
        }
        splits.push(split);
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let test = splits.pop().expect("three splits");
    let unlabeled = splits.pop().expect("three splits");
    let labeled = splits.pop().expect("three splits");
    Ok(Dataset { height, width, num_classes, labeled, unlabeled, test })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_dataset(&buf)
}
