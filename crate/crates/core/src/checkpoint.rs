//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"DPNET\0\0\x01"
//! version u32
//! header  u32 byte length, then UTF-8 lines:
//!           input=<d0>,<d1>,...
//!           layer=<layer description>      (one per layer, in order)
//! blocks  per weighted layer: weight, bias, feedback; each block is
//!           u8 present flag (weight always 1), u64 count, count × f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, NetworkSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DPNET\0\0\x01";
pub const FORMAT_VERSION: u32 = 1;

fn put_block(out: &mut Vec<u8>, t: Option<&Tensor>) {
    match t {
        None => out.push(0),
        Some(t) => {
            out.push(1);
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

pub fn encode(net: &NetworkSpec) -> Vec<u8> {
    let mut header = format!(
        "input={}\n",
        net.input_shape()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    );
    for l in net.layers() {
        header.push_str(&format!("layer={}\n", l.describe()));
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for p in net.params() {
        put_block(&mut out, Some(&p.weight));
        put_block(&mut out, p.bias.as_ref());
        put_block(&mut out, p.feedback.as_ref());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self, shape: &[usize], what: &str) -> Result<Option<Tensor>> {
        match self.take(1)?[0] {
            0 => Ok(None),
            1 => {
                let count = self.u64()? as usize;
                let expect: usize = shape.iter().product();
                if count != expect {
                    return Err(Error::Format(format!(
                        "{what} block holds {count} values, layer needs {expect}"
                    )));
                }
                let raw = self.take(
                    count
                        .checked_mul(8)
                        .ok_or_else(|| Error::Format("block too large".into()))?,
                )?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Ok(Some(Tensor::new(shape.to_vec(), data)?))
            }
            flag => Err(Error::Format(format!("bad {what} presence flag {flag}"))),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<NetworkSpec> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())
        .map_err(|_| Error::Format("not a checkpoint (too short)".into()))?
        != MAGIC
    {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let mut input = None;
    let mut layers = Vec::new();
    for line in header.lines().filter(|l| !l.is_empty()) {
        match line.split_once('=') {
            Some(("input", dims)) => {
                let d = dims
                    .split(',')
                    .map(|s| {
                        s.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad input shape '{dims}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                input = Some(d);
            }
            Some(("layer", desc)) => layers.push(LayerSpec::parse(desc).map_err(|e| Error::Format(e.to_string()))?),
            _ => return Err(Error::Format(format!("unrecognised header line '{line}'"))),
        }
    }
    let input = input.ok_or_else(|| Error::Format("header lacks an input shape".into()))?;
    // Compile once with dummy parameters to learn the block shapes.
    let shapes = NetworkSpec::param_shapes(&input, &layers).map_err(|e| Error::Format(e.to_string()))?;
    let mut params = Vec::with_capacity(shapes.len());
    for (w, b, fb) in shapes {
        let weight = r
            .block(&w, "weight")?
            .ok_or_else(|| Error::Format("weight block missing".into()))?;
        let bias = match b {
            Some(shape) => r.block(&shape, "bias")?,
            None => r.block(&[0], "bias")?,
        };
        let feedback = r.block(&fb, "feedback")?;
        params.push(LayerParams { weight, bias, feedback });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last block",
            bytes.len() - r.pos
        )));
    }
    NetworkSpec::from_parts(&input, layers, params).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    decode(&fs::read(path)?)
}
