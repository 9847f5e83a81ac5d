//! Binary checkpoint: magic, layer count, then per layer its dims and
//! little-endian f32 weights and biases.

use std::io::{Read, Write};
use std::path::Path;

use super::{ConvLayer, ToyNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TOYFCN1\0";

const ACT_NONE: u32 = 0;
const ACT_RELU: u32 = 1;
/// Sanity bound on any single tensor read from disk.
const MAX_TENSOR: usize = 1 << 26;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_checkpoint(net: &ToyNet, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, net.layers.len() as u32)?;
    for l in &net.layers {
        put_u32(w, l.cin as u32)?;
        put_u32(w, l.cout as u32)?;
        put_u32(w, l.kernel as u32)?;
        put_u32(w, if l.relu { ACT_RELU } else { ACT_NONE })?;
        for &v in l.weights.iter().chain(&l.bias) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn bad(reason: impl Into<String>) -> Error {
    Error::MalformedCheckpoint(reason.into())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ToyNet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let count = get_u32(r)? as usize;
    if count == 0 || count > 1024 {
        return Err(bad(format!("implausible layer count {count}")));
    }
    let mut layers = Vec::with_capacity(count);
    for idx in 0..count {
        let cin = get_u32(r)? as usize;
        let cout = get_u32(r)? as usize;
        let kernel = get_u32(r)? as usize;
        let relu = match get_u32(r)? {
            ACT_NONE => false,
            ACT_RELU => true,
            a => return Err(bad(format!("layer {idx}: unknown activation {a}"))),
        };
        let nw = cin
            .checked_mul(cout)
            .and_then(|v| v.checked_mul(kernel * kernel))
            .filter(|&v| v <= MAX_TENSOR)
            .ok_or_else(|| bad(format!("layer {idx}: implausible dims")))?;
        let mut layer = ConvLayer::zeros(cin, cout, kernel, relu).map_err(|e| bad(format!("layer {idx}: {e}")))?;
        layer.weights = get_f32s(r, nw)?;
        layer.bias = get_f32s(r, cout)?;
        layers.push(layer);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes"));
    }
    ToyNet::new(layers).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(net: &ToyNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(net, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyNet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = ToyNet::standard(3, 5, 3, 21).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), net);
    }

    #[test]
    fn rejects_corruption() {
        let net = ToyNet::standard(2, 2, 2, 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let mut truncated = buf.clone();
        truncated.pop();
        assert!(read_checkpoint(&mut truncated.as_slice()).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&mut extra.as_slice()).is_err());
        let mut magic = buf;
        magic[0] = b'X';
        assert!(matches!(read_checkpoint(&mut magic.as_slice()), Err(Error::MalformedCheckpoint(_))));
    }
}
