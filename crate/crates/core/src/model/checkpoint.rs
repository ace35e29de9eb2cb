//! Binary weight files.
//!
//! Layout, all integers little-endian: `b"SSAN"`, `u16` version, `u32`
//! record count, then per record `u16` name length, UTF-8 name, `u8` rank,
//! `rank × u32` extents and the `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 4] = b"SSAN";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_records<W: Write>(w: &mut W, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(records.len()).map_err(|_| Error::Format("too many records".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name `{}` too long", r.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let rank = u8::try_from(r.shape.len())
            .map_err(|_| Error::Format(format!("`{}` has rank {}", r.name, r.shape.len())))?;
        w.write_all(&[rank])?;
        for &e in &r.shape {
            let e = u32::try_from(e).map_err(|_| Error::Format(format!("`{}` extent {e} too large", r.name)))?;
            w.write_all(&e.to_le_bytes())?;
        }
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("file truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<Record>> {
    let mut magic = [0; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u16(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = read_u32(r, "record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = read_u16(r, &format!("name length of record {i}"))? as usize;
        let mut name = vec![0; len];
        read_exact(r, &mut name, &format!("name of record {i}"))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format(format!("record {i} name is not UTF-8")))?;
        let mut rank = [0; 1];
        read_exact(r, &mut rank, &format!("rank of `{name}`"))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(r, &format!("shape of `{name}`"))? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0; n * 4];
        read_exact(r, &mut bytes, &format!("values of `{name}`"))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(Record { name, shape, values });
    }
    let mut rest = [0; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}

pub fn store_records<F: Scalar>(store: &ParamStore<F>) -> Vec<Record> {
    store
        .iter()
        .map(|(name, t)| Record {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect()
}

/// Copies records into a store; every parameter must appear exactly once
/// with a matching shape.
pub fn apply_records<F: Scalar>(store: &mut ParamStore<F>, records: &[Record]) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for r in records {
        let id = store.find(&r.name).ok_or_else(|| Error::Parameter {
            name: r.name.clone(),
            detail: "not a parameter of this model".into(),
        })?;
        if seen[id.index()] {
            return Err(Error::Parameter {
                name: r.name.clone(),
                detail: "appears twice".into(),
            });
        }
        seen[id.index()] = true;
        let t = store.get(id);
        if t.shape() != r.shape.as_slice() {
            return Err(Error::Parameter {
                name: r.name.clone(),
                detail: format!("checkpoint shape {:?}, model shape {:?}", r.shape, t.shape()),
            });
        }
    }
    if let Some(missing) = store.ids().find(|id| !seen[id.index()]) {
        return Err(Error::Parameter {
            name: store.name(missing).to_string(),
            detail: "missing from checkpoint".into(),
        });
    }
    for r in records {
        let id = store.find(&r.name).expect("checked above");
        for (dst, &v) in store.get_mut(id).data_mut().iter_mut().zip(&r.values) {
            *dst = F::cast(v as f64);
        }
    }
    Ok(())
}

pub fn save_checkpoint<F: Scalar>(store: &ParamStore<F>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, &store_records(store))?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Record>> {
    read_records(&mut BufReader::new(File::open(path)?))
}

pub fn load_checkpoint<F: Scalar>(store: &mut ParamStore<F>, path: &Path) -> Result<()> {
    apply_records(store, &read_checkpoint(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        s.add("b", Tensor::new(&[1], vec![7.0]).unwrap());
        s
    }

    fn bytes(s: &ParamStore<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_records(&mut buf, &store_records(s)).unwrap();
        buf
    }

    #[test]
    fn layout_header() {
        let b = bytes(&store());
        assert_eq!(&b[..4], b"SSAN");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), VERSION);
        assert_eq!(u32::from_le_bytes([b[6], b[7], b[8], b[9]]), 2);
        assert_eq!(u16::from_le_bytes([b[10], b[11]]), 3);
        assert_eq!(&b[12..15], b"a.w");
        assert_eq!(b[15], 2);
        // header 10, two records: (2+3+1+8+24) + (2+1+1+4+4)
        assert_eq!(b.len(), 10 + 38 + 12);
    }

    #[test]
    fn round_trip_bitwise() {
        let s = store();
        let b = bytes(&s);
        let mut t = store();
        for x in t.tensors_mut() {
            x.data_mut().fill(9.0);
        }
        apply_records(&mut t, &read_records(&mut b.as_slice()).unwrap()).unwrap();
        assert_eq!(bytes(&t), b);
    }

    #[test]
    fn corrupt_magic_and_truncation() {
        let mut b = bytes(&store());
        let full = b.clone();
        b[0] = b'X';
        assert!(matches!(read_records(&mut b.as_slice()), Err(Error::Format(_))));
        let cut = &full[..full.len() - 3];
        match read_records(&mut &cut[..]) {
            Err(Error::Format(msg)) => assert!(msg.contains("`b`"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut v = full.clone();
        v[4] = 9;
        assert!(matches!(read_records(&mut v.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let b = bytes(&store());
        let mut other = ParamStore::<f32>::new();
        other.add("a.w", Tensor::zeros(&[3, 2]));
        other.add("b", Tensor::zeros(&[1]));
        match apply_records(&mut other, &read_records(&mut b.as_slice()).unwrap()) {
            Err(Error::Parameter { name, .. }) => assert_eq!(name, "a.w"),
            r => panic!("{r:?}"),
        }
    }
}
