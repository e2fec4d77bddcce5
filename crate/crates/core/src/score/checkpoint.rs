//! Versioned binary checkpoint for [`DenoiserNet`].
//!
//! Layout (little-endian): magic `DMNET`, u32 version, u32 height, u32 width,
//! u8 preconditioned flag, f64 sigma_data, u32 hidden-layer count, u32 per
//! hidden layer, u64 parameter count, then the f64 parameters.

use std::io::{Read, Write};

use super::{DenoiserNet, DenoiserSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DMNET";
const VERSION: u32 = 1;

pub fn write_checkpoint(net: &DenoiserNet, mut out: impl Write) -> Result<()> {
    let spec = net.spec();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(spec.height as u32).to_le_bytes())?;
    out.write_all(&(spec.width as u32).to_le_bytes())?;
    out.write_all(&[spec.sigma_data.is_some() as u8])?;
    out.write_all(&spec.sigma_data.unwrap_or(0.0).to_le_bytes())?;
    out.write_all(&(spec.hidden.len() as u32).to_le_bytes())?;
    for &h in &spec.hidden {
        out.write_all(&(h as u32).to_le_bytes())?;
    }
    out.write_all(&(net.params().len() as u64).to_le_bytes())?;
    for p in net.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("truncated checkpoint"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

pub fn read_checkpoint(mut input: impl Read) -> Result<DenoiserNet> {
    let magic: [u8; 5] = read_array(&mut input)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("not a denoiser checkpoint"));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let height = read_u32(&mut input)? as usize;
    let width = read_u32(&mut input)? as usize;
    let flag = read_array::<1>(&mut input)?[0];
    let sd = f64::from_le_bytes(read_array(&mut input)?);
    let sigma_data = match flag {
        0 => None,
        1 => Some(sd),
        other => return Err(Error::format(format!("bad preconditioning flag {other}"))),
    };
    let layers = read_u32(&mut input)? as usize;
    if layers > 64 {
        return Err(Error::format(format!("implausible layer count {layers}")));
    }
    let hidden = (0..layers).map(|_| read_u32(&mut input).map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
    let spec = DenoiserSpec::new(height, width, hidden, sigma_data).map_err(|e| Error::format(e.to_string()))?;
    let count = u64::from_le_bytes(read_array(&mut input)?) as usize;
    if count != spec.param_count() {
        return Err(Error::format(format!(
            "parameter count {count} does not match layer spec ({})",
            spec.param_count()
        )));
    }
    let params = (0..count).map(|_| read_array(&mut input).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    DenoiserNet::from_params(spec, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn round_trip_is_exact() {
        for sd in [None, Some(0.5)] {
            let spec = DenoiserSpec::new(4, 3, vec![7, 5, 6], sd).unwrap();
            let net = DenoiserNet::init(spec, &mut Rng::new(3)).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&net, &mut buf).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, net);
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn rejects_corruption() {
        let spec = DenoiserSpec::new(2, 2, vec![3], None).unwrap();
        let net = DenoiserNet::init(spec, &mut Rng::new(1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }
}
