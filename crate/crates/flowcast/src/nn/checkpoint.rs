//! Versioned checkpoint container shared by both networks: a JSON config
//! echo followed by named float32 little-endian parameter blobs.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

use super::{Parameterized, Scalar};

const MAGIC: &[u8; 4] = b"FCKP";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config_json: String,
    pub blobs: Vec<(String, Vec<f32>)>,
}

pub fn save<F: Scalar, P: Parameterized<F>>(
    path: &Path,
    config_json: &str,
    net: &mut P,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let cfg = config_json.as_bytes();
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(cfg)?;
    let refs = net.param_refs("");
    w.write_u32::<LittleEndian>(refs.len() as u32)?;
    for p in refs {
        let name = p.name.as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name)?;
        w.write_u64::<LittleEndian>(p.data.len() as u64)?;
        for &v in p.data.iter() {
            w.write_f32::<LittleEndian>(v.to_f64c() as f32)?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated checkpoint".into()))? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let n = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated checkpoint".into()))? as usize;
    let mut blobs = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Format("truncated checkpoint".into()))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let len = r
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::Format("truncated checkpoint".into()))? as usize;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(
                r.read_f32::<LittleEndian>()
                    .map_err(|_| Error::Format("truncated checkpoint blob".into()))?,
            );
        }
        blobs.push((
            String::from_utf8(name).map_err(|_| Error::Format("bad blob name".into()))?,
            data,
        ));
    }
    Ok(Checkpoint {
        config_json: String::from_utf8(cfg).map_err(|_| Error::Format("bad config echo".into()))?,
        blobs,
    })
}

/// Copy blob values onto a freshly constructed network; names and lengths
/// must match exactly.
pub fn restore<F: Scalar, P: Parameterized<F>>(ckpt: &Checkpoint, net: &mut P) -> Result<()> {
    let refs = net.param_refs("");
    if refs.len() != ckpt.blobs.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} blobs, network expects {}",
            ckpt.blobs.len(),
            refs.len()
        )));
    }
    for (p, (name, data)) in refs.into_iter().zip(&ckpt.blobs) {
        if &p.name != name || p.data.len() != data.len() {
            return Err(Error::Format(format!(
                "blob mismatch: {} ({}) vs {} ({})",
                name,
                data.len(),
                p.name,
                p.data.len()
            )));
        }
        for (w, &v) in p.data.iter_mut().zip(data.iter()) {
            *w = F::from_f32c(v);
        }
    }
    Ok(())
}
