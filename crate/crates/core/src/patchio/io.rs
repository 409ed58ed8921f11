//! Little-endian video tensor files.
//!
//! Layout: magic `VINV`, `u32` version (1), `u32` H, W, F, C, `f64` fps,
//! then `H·W·F·C` `f64` values in `(h, w, f, c)` row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::video::VideoTensor;
use crate::error::{Error, Result};

pub const VIDEO_MAGIC: &[u8; 4] = b"VINV";
pub const VIDEO_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 16 + 8;

pub fn encode_video(v: &VideoTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + v.values().len() * 8);
    out.extend_from_slice(VIDEO_MAGIC);
    out.extend_from_slice(&VIDEO_VERSION.to_le_bytes());
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&v.fps.to_le_bytes());
    for x in v.values() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_video(bytes: &[u8]) -> Result<VideoTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != VIDEO_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VIDEO_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dims: Vec<usize> = (0..4).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let fps = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("extent product overflows".into()))?;
    let expected = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VideoTensor::new(dims[0], dims[1], dims[2], dims[3], fps, values)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_video(path: impl AsRef<Path>, v: &VideoTensor) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_video(v))?;
    f.flush()?;
    Ok(())
}

pub fn read_video(path: impl AsRef<Path>) -> Result<VideoTensor> {
    decode_video(&fs::read(path)?)
}

/// Writes each frame as an 8-bit grayscale PNG (channel mean, `[-1, 1]` mapped to `[0, 255]`).
pub fn export_png_frames(dir: impl AsRef<Path>, prefix: &str, v: &VideoTensor) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for f in 0..v.frames {
        let frame = v.frame(f);
        let mut pixels = Vec::with_capacity(v.height * v.width);
        for y in 0..v.height {
            for x in 0..v.width {
                let g = ((frame.luma(y, x).clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                pixels.push(g);
            }
        }
        let file = fs::File::create(dir.join(format!("{prefix}_{f:04}.png")))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), v.width as u32, v.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(&pixels)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use rand::SeedableRng;

    fn clip() -> VideoTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::randn(&[3 * 4 * 5 * 2], 1.0, &mut rng);
        VideoTensor::new(3, 4, 5, 2, 12.5, t.into_data()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let v = clip();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vinv");
        write_video(&p, &v).unwrap();
        let back = read_video(&p).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.fps.to_bits(), v.fps.to_bits());
        assert!(back
            .values()
            .iter()
            .zip(v.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_video(&clip());
        assert_eq!(&bytes[..4], b"VINV");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 12.5);
        assert_eq!(bytes.len(), 32 + 120 * 8);
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let mut bytes = encode_video(&clip());
        bytes[0] = b'X';
        assert!(matches!(decode_video(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_video(&clip());
        bytes[4] = 2;
        assert!(matches!(decode_video(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn inconsistent_length_is_length_error() {
        let mut bytes = encode_video(&clip());
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(decode_video(&bytes), Err(Error::Length { .. })));
        let mut bytes = encode_video(&clip());
        bytes[8] = 9;
        assert!(matches!(decode_video(&bytes), Err(Error::Length { .. })));
        assert!(matches!(decode_video(b"VIN"), Err(Error::Length { .. })));
    }

    #[test]
    fn png_export_writes_every_frame() {
        let dir = tempfile::tempdir().unwrap();
        export_png_frames(dir.path(), "f", &clip()).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 5);
    }
}
