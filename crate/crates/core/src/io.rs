//! Portable on-disk array container.
//!
//! Layout (little-endian): magic `LDFV`, format version u32, entry count u32;
//! each entry = name length u32, UTF-8 name, rank u32, dims (u64 each), raw
//! float64 payload in row-major order. No compression. Round trips are
//! bit-exact, including signed zeros.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LDFV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub data: ArrayD<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, data: ArrayD<f64>) -> Self {
        NamedArray { name: name.into(), data }
    }
}

/// Encode a JSON-serializable value as a 1-d array, one byte per element, so
/// metadata can ride inside the container alongside the tensors.
pub fn encode_json_entry<T: serde::Serialize>(
    name: impl Into<String>,
    value: &T,
) -> Result<NamedArray> {
    let text = serde_json::to_string(value)?;
    let bytes: Vec<f64> = text.bytes().map(|b| b as f64).collect();
    let data = ArrayD::from_shape_vec(IxDyn(&[bytes.len()]), bytes).expect("1-d shape");
    Ok(NamedArray::new(name, data))
}

pub fn decode_json_entry<T: serde::de::DeserializeOwned>(a: &NamedArray) -> Result<T> {
    let mut bytes = Vec::with_capacity(a.data.len());
    for &x in a.data.iter() {
        if x.fract() != 0.0 || !(0.0..256.0).contains(&x) {
            return Err(Error::MalformedContainer(format!(
                "entry {} is not a byte sequence",
                a.name
            )));
        }
        bytes.push(x as u8);
    }
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::MalformedContainer(format!("entry {} is not UTF-8: {e}", a.name)))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reserved entry describing a stored trajectory.
pub const TRAJ_META_ENTRY: &str = "__traj_meta__";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct TrajectoryMeta {
    dt: f64,
    t0: f64,
    lx: f64,
    ly: f64,
    channels: Vec<String>,
}

/// Store a trajectory as one `[steps, ny, nx]` tensor per channel plus a
/// metadata entry; round trips are bit-exact.
pub fn save_trajectory(path: impl AsRef<Path>, traj: &crate::grid::Trajectory) -> Result<()> {
    let first = &traj.states[0];
    let grid = first.grid;
    let names: Vec<String> = first.channel_names().to_vec();
    let meta = TrajectoryMeta {
        dt: traj.dt,
        t0: traj.t0,
        lx: grid.lx,
        ly: grid.ly,
        channels: names.clone(),
    };
    let mut arrays = vec![encode_json_entry(TRAJ_META_ENTRY, &meta)?];
    for name in &names {
        let mut data = ArrayD::zeros(IxDyn(&[traj.states.len(), grid.ny, grid.nx]));
        for (k, s) in traj.states.iter().enumerate() {
            let ch = s.channel(name).ok_or_else(|| {
                Error::ShapeMismatch(format!("state {k} is missing channel {name}"))
            })?;
            if s.grid != grid {
                return Err(Error::GridMismatch);
            }
            data.index_axis_mut(ndarray::Axis(0), k)
                .assign(&ch.view().into_dyn());
        }
        arrays.push(NamedArray::new(name.clone(), data));
    }
    write_arrays(path, &arrays)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<crate::grid::Trajectory> {
    let arrays = read_arrays(path)?;
    let meta_arr = arrays
        .iter()
        .find(|a| a.name == TRAJ_META_ENTRY)
        .ok_or_else(|| Error::MalformedContainer("missing trajectory metadata".into()))?;
    let meta: TrajectoryMeta = decode_json_entry(meta_arr)?;
    let mut channels = Vec::with_capacity(meta.channels.len());
    let mut steps = None;
    let mut shape = None;
    for name in &meta.channels {
        let entry = arrays
            .iter()
            .find(|a| &a.name == name)
            .ok_or_else(|| Error::MalformedContainer(format!("missing channel {name}")))?;
        if entry.data.ndim() != 3 {
            return Err(Error::MalformedContainer(format!(
                "channel {name} has rank {}, expected 3",
                entry.data.ndim()
            )));
        }
        let s = entry.data.shape().to_vec();
        if let Some(prev) = &shape {
            if &s != prev {
                return Err(Error::MalformedContainer("channel shapes disagree".into()));
            }
        }
        steps = Some(s[0]);
        shape = Some(s);
        channels.push((name.clone(), entry.data.clone()));
    }
    let steps = steps.ok_or_else(|| Error::MalformedContainer("trajectory has no channels".into()))?;
    let dims = shape.expect("shape recorded");
    let grid = crate::grid::Grid::new(dims[2], dims[1], meta.lx, meta.ly)?;
    let mut states = Vec::with_capacity(steps);
    for k in 0..steps {
        let chans: Vec<(String, ndarray::Array2<f64>)> = channels
            .iter()
            .map(|(name, data)| {
                let a = data
                    .index_axis(ndarray::Axis(0), k)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("rank checked");
                (name.clone(), a)
            })
            .collect();
        states.push(crate::grid::FieldState::new(grid, chans)?);
    }
    crate::grid::Trajectory::new(states, meta.dt, meta.t0)
}

pub fn write_arrays(path: impl AsRef<Path>, arrays: &[NamedArray]) -> Result<()> {
    for a in arrays {
        if let Some(bad) = a.data.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "array {} contains non-finite value {bad}",
                a.name
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        let name = a.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = a.data.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        // Row-major (C order) payload; go through a standard-layout view so
        // arbitrary strides serialize correctly.
        let contiguous = a.data.as_standard_layout();
        for &x in contiguous.iter() {
            w.write_all(&x.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_arrays(path: impl AsRef<Path>) -> Result<Vec<NamedArray>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::MalformedContainer(format!(
            "bad magic bytes {magic:?}"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::MalformedContainer(format!(
            "unsupported format version {version}"
        )));
    }
    let count = read_u32(&mut r, "entry count")? as usize;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        if name_len > 1 << 20 {
            return Err(Error::MalformedContainer(format!(
                "entry {k}: implausible name length {name_len}"
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::MalformedContainer(format!("entry {k}: bad utf-8 name: {e}")))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::MalformedContainer(format!(
                "entry {name}: implausible rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, "dims")?;
            let d = u64::from_le_bytes(b) as usize;
            len = len.checked_mul(d).ok_or_else(|| {
                Error::MalformedContainer(format!("entry {name}: dims overflow"))
            })?;
            dims.push(d);
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, "payload")?;
            data.push(f64::from_bits(u64::from_le_bytes(b)));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| {
            Error::MalformedContainer(format!("entry {name}: shape mismatch: {e}"))
        })?;
        out.push(NamedArray::new(name, arr));
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::MalformedContainer(format!("truncated {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn round_trip_is_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut data: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(-10.0..10.0)).collect();
        data[0] = -0.0;
        data[1] = 0.0;
        data[2] = f64::MIN_POSITIVE / 2.0; // subnormal
        let arr = ArrayD::from_shape_vec(IxDyn(&[64, 64]), data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ldfv");
        write_arrays(&path, &[NamedArray::new("field", arr.clone())]).unwrap();
        let back = read_arrays(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].name, "field");
        for (a, b) in arr.iter().zip(back[0].data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ldfv");
        write_arrays(&path, &[]).unwrap();
        let back = read_arrays(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn three_d_shapes_survive() {
        // a 3-channel trajectory of 20 states at 25^2, one 3-D entry per channel
        let t = ArrayD::from_shape_fn(IxDyn(&[20, 25, 25]), |ix| {
            (ix[0] * 625 + ix[1] * 25 + ix[2]) as f64
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ldfv");
        let named: Vec<NamedArray> = (0..3)
            .map(|c| NamedArray::new(format!("ch{c}"), t.clone()))
            .collect();
        write_arrays(&path, &named).unwrap();
        let back = read_arrays(&path).unwrap();
        assert_eq!(back.len(), 3);
        for b in &back {
            assert_eq!(b.data.shape(), &[20, 25, 25]);
        }
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ldfv");
        let arr = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| 1.0);
        write_arrays(&path, &[NamedArray::new("a", arr)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(read_arrays(&path).is_err());
    }

    #[test]
    fn bad_magic_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ldfv");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_arrays(&path).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ldfv");
        let mut arr = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| 1.0);
        arr[IxDyn(&[0, 0])] = f64::INFINITY;
        assert!(write_arrays(&path, &[NamedArray::new("a", arr)]).is_err());
    }
}
