//! `BNFM` tensor container: magic, version u32, count u32, then per tensor a
//! u16 name length, name bytes, u8 rank, u32 extents and f64 payload, all
//! little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndmath::Tensor;

pub const MAGIC: &[u8; 4] = b"BNFM";
pub const VERSION: u32 = 1;

pub fn write_tensors<'a>(w: &mut impl Write, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Contract(format!("tensor name too long: {} bytes", bytes.len())))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Contract(format!("rank {} does not fit in u8", t.shape().len())))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("extent {d} does not fit in u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn parse_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected BNFM".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = c.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap()) as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = c.pos;
            let d = c.u32("extent")? as usize;
            if d == 0 {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("zero extent in tensor `{name}`"),
                });
            }
            shape.push(d);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8, "payload")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(Error::Format {
            offset: c.pos,
            msg: "trailing bytes after last tensor".into(),
        });
    }
    Ok(out)
}

pub fn save_tensors<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(&mut f, tensors)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingInput { path: path.to_path_buf() });
    }
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    parse_tensors(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::{randn, Rng};

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = Rng::new(1);
        let a = randn(&mut rng, [3, 4]);
        let b = Tensor::scalar(-0.0);
        let c = Tensor::new([2], vec![f64::MIN_POSITIVE, 1e300]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("a", &a), ("b", &b), ("ccc", &c)]).unwrap();
        assert_eq!(&buf[..4], b"BNFM");
        assert_eq!(buf.len(), 12 + (2 + 1 + 1 + 8 + 96) + (2 + 1 + 1 + 8) + (2 + 3 + 1 + 4 + 16));
        let back = parse_tensors(&buf).unwrap();
        assert_eq!(back[0], ("a".to_string(), a));
        assert_eq!(back[1].1.data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back[2].1, c);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let t = Tensor::zeros([2]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("w", &t)]).unwrap();
        let cut = &buf[..buf.len() - 3];
        match parse_tensors(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12 + 2 + 1 + 1 + 4),
            other => panic!("{other:?}"),
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(parse_tensors(&bad), Err(Error::Format { offset: 0, .. })));
        let mut extra = buf;
        extra.push(0);
        assert!(parse_tensors(&extra).is_err());
    }
}
