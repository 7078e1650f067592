//! Binary volume files and 16-bit PGM export.
//!
//! Volume layout (little-endian):
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 8     | magic `PDIFVOL1`              |
//! | 12    | nx, ny, nz as `u32`           |
//! | 24    | sx, sy, sz as `f64`           |
//! | 1     | kind tag as `u8`              |
//! | 8·n   | payload `f64`, x-fastest      |

use std::io::Write;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::volume::{Volume, VolumeKind};

pub const VOLUME_MAGIC: &[u8; 8] = b"PDIFVOL1";
pub const VOLUME_HEADER_BYTES: usize = 8 + 3 * 4 + 3 * 8 + 1;

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_BYTES + 8 * vol.len());
    out.extend_from_slice(VOLUME_MAGIC);
    for d in vol.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in vol.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(vol.kind().tag());
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Little-endian cursor over a byte buffer that reports truncation against
/// the originating file.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    pub fn expect_magic(&mut self, magic: &'static [u8; 8]) -> Result<()> {
        let found = self.bytes.get(..8).unwrap_or(self.bytes);
        if found != magic {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected: std::str::from_utf8(magic).unwrap_or("?"),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        self.pos = 8;
        Ok(())
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads exactly `n` f64 values that must end the file.
    pub fn f64_payload(&mut self, n: usize) -> Result<Vec<f64>> {
        let expected = self.pos + 8 * n;
        if self.bytes.len() < expected {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected,
                found: self.bytes.len(),
            });
        }
        if self.bytes.len() > expected {
            return Err(Error::PayloadMismatch {
                path: self.path.to_path_buf(),
                expected,
                found: self.bytes.len(),
            });
        }
        let data = self.bytes[self.pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos = expected;
        Ok(data)
    }
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let mut r = Reader::new(bytes, path);
    r.expect_magic(VOLUME_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f64()?, r.f64()?, r.f64()?];
    let tag = r.u8()?;
    let kind = VolumeKind::from_tag(tag)
        .ok_or_else(|| Error::Invalid(format!("{}: unknown volume kind tag {tag}", path.display())))?;
    let data = r.f64_payload(dims[0] * dims[1] * dims[2])?;
    Volume::new(dims, spacing, kind, data)
}

pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_volume(vol))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

/// Axial slice as a binary 16-bit PGM (P5, maxval 65535, big-endian samples).
/// Values are mapped linearly from `[lo, hi]` to `[0, 65535]` and clamped.
pub fn export_pgm(vol: &Volume, slice_index: usize, window: (f64, f64)) -> Result<Vec<u8>> {
    let [nx, ny, nz] = vol.dims();
    ensure!(slice_index < nz, Invalid, "slice {slice_index} out of range 0..{nz}");
    let (lo, hi) = window;
    ensure!(lo < hi, Invalid, "window must satisfy lo < hi, got ({lo}, {hi})");
    let mut out = format!("P5\n{nx} {ny}\n65535\n").into_bytes();
    let slice = vol.slice(slice_index);
    for &v in &slice.data {
        out.extend_from_slice(&pgm_level(v, lo, hi).to_be_bytes());
    }
    Ok(out)
}

pub(crate) fn pgm_level(v: f64, lo: f64, hi: f64) -> u16 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 65535.0).round() as u16
}

/// Several equally sized slices side by side in one 16-bit PGM.
pub fn export_pgm_row(vols: &[(&Volume, (f64, f64))], slice_index: usize) -> Result<Vec<u8>> {
    ensure!(!vols.is_empty(), Invalid, "no volumes to export");
    let [nx, ny, _] = vols[0].0.dims();
    for (v, (lo, hi)) in vols {
        ensure!(v.dims()[..2] == [nx, ny], Shape, "slices differ in size");
        ensure!(slice_index < v.dims()[2], Invalid, "slice {slice_index} out of range");
        ensure!(lo < hi, Invalid, "window must satisfy lo < hi");
    }
    let width = nx * vols.len();
    let mut out = format!("P5\n{width} {ny}\n65535\n").into_bytes();
    for y in 0..ny {
        for (v, (lo, hi)) in vols {
            for x in 0..nx {
                out.extend_from_slice(&pgm_level(v.get(x, y, slice_index), *lo, *hi).to_be_bytes());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kind_strategy() -> impl Strategy<Value = VolumeKind> {
        prop_oneof![
            Just(VolumeKind::Activity),
            Just(VolumeKind::Anatomical),
            Just(VolumeKind::Generic),
        ]
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..4,
            sx in 0.1f64..5.0, sz in 0.1f64..5.0,
            kind in kind_strategy(),
            seed in any::<u64>(),
        ) {
            let n = nx * ny * nz;
            let mut s = seed;
            let data: Vec<f64> = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 100.0 - 20.0
            }).collect();
            let vol = Volume::new([nx, ny, nz], [sx, sx, sz], kind, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("v.vol");
            save_volume(&vol, &path).unwrap();
            let back = load_volume(&path).unwrap();
            prop_assert_eq!(back.dims(), vol.dims());
            prop_assert_eq!(back.spacing(), vol.spacing());
            prop_assert_eq!(back.kind(), vol.kind());
            prop_assert!(back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn file_size_for_small_volume() {
        let vol = Volume::zeros([2, 2, 1], [1.0; 3], VolumeKind::Generic).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.vol");
        save_volume(&vol, &path).unwrap();
        // 8 magic + 12 dims + 24 spacing + 1 kind = 45 header bytes, then 4 * 8 payload
        assert_eq!(VOLUME_HEADER_BYTES, 45);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 45 + 32);
    }

    #[test]
    fn unwritable_path_is_an_error_and_creates_nothing() {
        let vol = Volume::zeros([1, 1, 1], [1.0; 3], VolumeKind::Generic).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("v.vol");
        assert!(matches!(save_volume(&vol, &path), Err(Error::Io { .. })));
        assert!(!path.exists());
    }

    #[test]
    fn truncated_payload() {
        let vol = Volume::zeros([2, 2, 2], [1.0; 3], VolumeKind::Generic).unwrap();
        let mut bytes = encode_volume(&vol);
        bytes.truncate(bytes.len() - 8);
        let err = decode_volume(&bytes, Path::new("t.vol")).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn oversized_payload() {
        let vol = Volume::zeros([2, 2, 2], [1.0; 3], VolumeKind::Generic).unwrap();
        let mut bytes = encode_volume(&vol);
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        let err = decode_volume(&bytes, Path::new("t.vol")).unwrap_err();
        assert!(matches!(err, Error::PayloadMismatch { .. }), "{err}");
    }

    #[test]
    fn corrupted_magic_names_expected() {
        let vol = Volume::zeros([1, 1, 1], [1.0; 3], VolumeKind::Generic).unwrap();
        let mut bytes = encode_volume(&vol);
        bytes[0] = b'X';
        let err = decode_volume(&bytes, Path::new("m.vol")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("PDIFVOL1"));
    }

    fn pgm_pixels(bytes: &[u8], n: usize) -> Vec<u16> {
        let payload = &bytes[bytes.len() - 2 * n..];
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    }

    #[test]
    fn pgm_constant_volume_is_mid_gray() {
        let vol = Volume::filled([3, 2, 2], [1.0; 3], VolumeKind::Generic, 2.0).unwrap();
        let bytes = export_pgm(&vol, 1, (1.0, 3.0)).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n65535\n".len() + 12);
        // (2 - 1) / (3 - 1) * 65535 = 32767.5, rounded half away from zero
        assert!(pgm_pixels(&bytes, 6).iter().all(|&p| p == 32768));
    }

    #[test]
    fn pgm_clamps_and_checks_range() {
        let vol = Volume::new([3, 1, 1], [1.0; 3], VolumeKind::Generic, vec![-5.0, 0.0, 9.0]).unwrap();
        let bytes = export_pgm(&vol, 0, (0.0, 4.0)).unwrap();
        assert_eq!(pgm_pixels(&bytes, 3), vec![0, 0, 65535]);
        assert!(export_pgm(&vol, 1, (0.0, 4.0)).is_err());
        assert!(export_pgm(&vol, 0, (4.0, 4.0)).is_err());
    }
}
