//! BMN1 binary parameter files.
//!
//! Layout (little-endian): magic `BMN1`, `u32` point-net depth, `u32`
//! edge-net depth, `f64` context-norm epsilon, `u32` layer count, then per
//! layer `u32` inputs, `u32` outputs, `u8` context-norm flag. The values
//! follow in the same layer order: weight row-major, then bias, as `f64`.
//! Layer order is U-net, V-net, E-net, head.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{BmnetParams, Layer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BMN1";

pub fn save_params(params: &BmnetParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_params(params)?)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<BmnetParams> {
    read_params(&std::fs::read(path)?)
}

pub fn write_params(params: &BmnetParams) -> Result<Vec<u8>> {
    params.validate().map_err(|e| Error::Serialization(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + 8 * params.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.u_net.len() as u32).to_le_bytes());
    out.extend_from_slice(&(params.e_net.len() as u32).to_le_bytes());
    out.extend_from_slice(&params.epsilon.to_le_bytes());
    let layers: Vec<&Layer> = params.layers().collect();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in &layers {
        out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
        out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
        out.push(l.context_norm as u8);
    }
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::parse(0, format!("file truncated at byte {}", self.bytes.len())));
        };
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_params(bytes: &[u8]) -> Result<BmnetParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::parse(0, "not a BMN1 parameter file"));
    }
    let point_blocks = r.u32()? as usize;
    let edge_blocks = r.u32()? as usize;
    let epsilon = r.f64()?;
    let count = r.u32()? as usize;
    if count != 2 * point_blocks + edge_blocks + 1 {
        return Err(Error::parse(0, format!(
            "layer count {count} does not match depths {point_blocks}/{edge_blocks}"
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let inputs = r.u32()? as usize;
        let outputs = r.u32()? as usize;
        let flag = r.take(1)?[0];
        if flag > 1 {
            return Err(Error::parse(0, "context-norm flag must be 0 or 1"));
        }
        shapes.push((inputs, outputs, flag == 1));
    }
    let mut layers = Vec::with_capacity(count);
    for (inputs, outputs, context_norm) in shapes {
        let size = inputs.checked_mul(outputs).ok_or_else(|| Error::parse(0, "layer too large"))?;
        let mut values = Vec::with_capacity(size);
        for _ in 0..size {
            values.push(r.f64()?);
        }
        let weight = Array2::from_shape_vec((inputs, outputs), values).expect("sized above");
        let bias = (0..outputs).map(|_| r.f64()).collect::<Result<Array1<f64>>>()?;
        layers.push(Layer { weight, bias, context_norm });
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(0, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut layers = layers.into_iter();
    let params = BmnetParams {
        u_net: layers.by_ref().take(point_blocks).collect(),
        v_net: layers.by_ref().take(point_blocks).collect(),
        e_net: layers.by_ref().take(edge_blocks).collect(),
        head: layers.next().expect("counted"),
        epsilon,
    };
    params.validate().map_err(|e| Error::parse(0, e.to_string()))?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bmnet::{init_params, Architecture};

    #[test]
    fn round_trip_is_bitwise() {
        let p = init_params(9);
        let bytes = write_params(&p).unwrap();
        let q = read_params(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(bytes, write_params(&q).unwrap());
        assert_eq!(q.architecture(), Architecture::default());
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let p = BmnetParams::init(Architecture { width: 3, point_blocks: 2, edge_blocks: 3 }, 0).unwrap();
        let bytes = write_params(&p).unwrap();
        assert!(read_params(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_params(&bytes[..10]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_params(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_params(&bad).is_err());
        // Claim a different edge depth than the shape table holds.
        let mut depth = bytes;
        depth[8] = 4;
        assert!(read_params(&depth).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bmn");
        let p = init_params(1);
        save_params(&p, &path).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
    }
}
