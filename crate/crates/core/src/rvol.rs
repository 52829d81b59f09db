//! RVOL volume files: raw little-endian f64 samples in x-fastest order plus
//! a JSON sidecar (`<name>.rvol` + `<name>.rvol.json`). Round-trips are bit
//! exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    order: String,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    s.into()
}

pub fn export_volume(v: &Volume, path: &Path) -> Result<()> {
    let side = Sidecar {
        dims: [v.dims().0, v.dims().1, v.dims().2],
        spacing: [v.spacing().0, v.spacing().1, v.spacing().2],
        dtype: "f64".into(),
        order: "x-fastest".into(),
    };
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for &s in v.data() {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

/// Reads an RVOL file; with `hu_clamp` the samples are clamped to the
/// [-1000, 600] HU window and affinely mapped onto [0, 255].
pub fn import_volume(path: &Path, hu_clamp: bool) -> Result<Volume> {
    let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if side.dtype != "f64" {
        return Err(Error::UnknownDtype(side.dtype));
    }
    if side.order != "x-fastest" {
        return Err(Error::Sidecar(format!(
            "unsupported order {:?} (expected \"x-fastest\")",
            side.order
        )));
    }
    let bytes = fs::read(path)?;
    let n = side.dims[0] * side.dims[1] * side.dims[2];
    if bytes.len() != n * 8 {
        return Err(Error::Sidecar(format!(
            "file holds {} bytes but sidecar dims {:?} imply {}",
            bytes.len(),
            side.dims,
            n * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let v = Volume::with_spacing(
        (side.dims[0], side.dims[1], side.dims[2]),
        (side.spacing[0], side.spacing[1], side.spacing[2]),
        data,
    )?;
    Ok(if hu_clamp { hu_normalize(&v) } else { v })
}

/// Clamp to [-1000, 600] HU, then map affinely to [0, 255].
pub fn hu_normalize(v: &Volume) -> Volume {
    v.map(|s| (s.clamp(-1000.0, 600.0) + 1000.0) / 1600.0 * 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hu_window_constants() {
        let v = Volume::new((5, 1, 1), vec![-1000.0, 600.0, -200.0, 2000.0, -5000.0]).unwrap();
        let n = hu_normalize(&v);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 255.0);
        assert_eq!(n.data()[2], 127.5);
        assert_eq!(n.data()[3], 255.0);
        assert_eq!(n.data()[4], 0.0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v = Volume::new((8, 8, 8), (0..512).map(|_| rng.gen::<f64>()).collect()).unwrap();
        v.set_spacing((0.5, 0.5, 1.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.rvol");
        export_volume(&v, &path).unwrap();
        let back = import_volume(&path, false).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.spacing(), (0.5, 0.5, 1.0));

        // byte-stable across rewrites
        let first = std::fs::read(&path).unwrap();
        export_volume(&v, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn sidecar_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.rvol");
        let v = Volume::new((2, 2, 2), vec![0.0; 8]).unwrap();
        export_volume(&v, &path).unwrap();
        std::fs::write(&path, [0u8; 16]).unwrap();
        assert!(matches!(
            import_volume(&path, false),
            Err(Error::Sidecar(_))
        ));
    }
}
