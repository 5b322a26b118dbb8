//! Shot-file persistence.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"SHOT"
//! u16    format version (currently 1)
//! u32    D, channels per timestep
//! then per shot:
//!   u64  id
//!   u8   disruptive flag (0/1)
//!   u32  t_disrupt, or 0xFFFF_FFFF when absent
//!   u32  T, timesteps
//!   f32  T * D samples, time-major
//! ```
//!
//! Samples are fp32 on disk; in-memory shots only ever hold
//! fp32-representable values, so a save/load roundtrip is exact.

use super::Shot;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SHOT";
const VERSION: u16 = 1;
const NO_DISRUPT: u32 = 0xFFFF_FFFF;

pub fn save_shots(path: &Path, shots: &[Shot]) -> Result<()> {
    let d = match shots.first() {
        Some(s) => s.d,
        None => return Err(Error::Data("refusing to write an empty shot file".into())),
    };
    if shots.iter().any(|s| s.d != d) {
        return Err(Error::Data("all shots in one file must share a channel count".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for s in shots {
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&[u8::from(s.disruptive)])?;
        let td = match (s.disruptive, s.t_disrupt) {
            (true, Some(t)) => t,
            (false, None) => NO_DISRUPT,
            _ => {
                return Err(Error::Data(format!(
                    "shot {}: disruptive flag and t_disrupt disagree",
                    s.id
                )))
            }
        };
        w.write_all(&td.to_le_bytes())?;
        w.write_all(&(s.t_len() as u32).to_le_bytes())?;
        for &v in &s.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_shots(path: &Path) -> Result<Vec<Shot>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a shot file", path.display())));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported shot file version {version}",
            path.display()
        )));
    }
    let d = read_u32(&mut r)? as usize;
    if d == 0 {
        return Err(Error::Data(format!("{}: zero channel count", path.display())));
    }

    let mut shots = Vec::new();
    loop {
        let mut id_bytes = [0u8; 8];
        match r.read(&mut id_bytes)? {
            0 => break, // clean EOF between records
            8 => {}
            n => {
                // A short read can legitimately split the 8 bytes; finish it.
                r.read_exact(&mut id_bytes[n..])?;
            }
        }
        let id = u64::from_le_bytes(id_bytes);
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let disruptive = match flag[0] {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Data(format!("shot {id}: bad disruptive flag {other}")))
            }
        };
        let td = read_u32(&mut r)?;
        let t_disrupt = if td == NO_DISRUPT { None } else { Some(td) };
        if disruptive != t_disrupt.is_some() {
            return Err(Error::Data(format!(
                "shot {id}: disruptive flag and t_disrupt disagree"
            )));
        }
        let t_len = read_u32(&mut r)? as usize;
        if let Some(t) = t_disrupt {
            if t as usize >= t_len {
                return Err(Error::Data(format!(
                    "shot {id}: t_disrupt {t} outside [0, {t_len})"
                )));
            }
        }
        let mut data = Vec::with_capacity(t_len * d);
        let mut buf = [0u8; 4];
        for _ in 0..t_len * d {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        shots.push(Shot { id, disruptive, t_disrupt, d, data });
    }
    Ok(shots)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorParams};

    #[test]
    fn roundtrip_is_identity() {
        let p = GeneratorParams { shots: 12, test_shots: 0, ..GeneratorParams::default() };
        let ds = generate(&p, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.shots");
        save_shots(&path, &ds.train).unwrap();
        let loaded = load_shots(&path).unwrap();
        assert_eq!(loaded, ds.train);
    }

    #[test]
    fn header_and_flags_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.shots");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_shots(&path).is_err());

        // Inconsistent in-memory shot is refused at save time.
        let bad = Shot { id: 1, disruptive: true, t_disrupt: None, d: 1, data: vec![0.0] };
        assert!(save_shots(&path, &[bad]).is_err());
        assert!(save_shots(&path, &[]).is_err());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let p = GeneratorParams { shots: 4, test_shots: 0, ..GeneratorParams::default() };
        let ds = generate(&p, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.shots");
        save_shots(&path, &ds.train).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.shots");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_shots(&cut).is_err());
    }
}
