//! Sample dumps.
//!
//! ```text
//! magic    8 bytes "MADFSMPL"
//! height   u32
//! width    u32
//! channels u32
//! count    u32
//! data     count·height·width·channels f32, little-endian,
//!          sample-major, then row, column, channel
//! ```

use std::path::Path;

use madformer_core::layout::LatentGrid;

use crate::checkpoint::write_file;
use crate::error::{AppError, Result};

pub const SAMPLE_MAGIC: &[u8; 8] = b"MADFSMPL";

pub fn encode_samples(grids: &[LatentGrid]) -> Result<Vec<u8>> {
    let first = grids
        .first()
        .ok_or_else(|| AppError::Config("no samples to dump".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut out = Vec::with_capacity(24 + grids.len() * h * w * c * 4);
    out.extend_from_slice(SAMPLE_MAGIC);
    for v in [h, w, c, grids.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for g in grids {
        if (g.height, g.width, g.channels) != (h, w, c) {
            return Err(AppError::DimensionMismatch(h * w * c, g.data.len()));
        }
        for &x in &g.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_samples(buf: &[u8]) -> std::result::Result<Vec<LatentGrid>, String> {
    if buf.len() < 24 || &buf[..8] != SAMPLE_MAGIC {
        return Err("not a sample dump".into());
    }
    let word = |i: usize| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c, n) = (word(0), word(1), word(2), word(3));
    let per = h * w * c;
    if buf.len() != 24 + n * per * 4 {
        return Err(format!("expected {} bytes, found {}", 24 + n * per * 4, buf.len()));
    }
    let floats: Vec<f64> = buf[24..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(floats
        .chunks(per.max(1))
        .take(n)
        .map(|d| {
            let mut g = LatentGrid::zeros(h, w, c);
            g.data.copy_from_slice(d);
            g
        })
        .collect())
}

/// Binary PGM of channel 0, samples side by side with a one-pixel gap,
/// scaled to the joint min/max.
pub fn render_pgm(grids: &[LatentGrid]) -> Vec<u8> {
    let Some(first) = grids.first() else {
        return b"P5\n0 0\n255\n".to_vec();
    };
    let (h, w, c) = (first.height, first.width, first.channels);
    let width = grids.len() * (w + 1) - 1;
    let vals = grids.iter().flat_map(|g| g.data.iter().step_by(c.max(1)));
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {h}\n255\n").into_bytes();
    for r in 0..h {
        for (k, g) in grids.iter().enumerate() {
            if k > 0 {
                out.push(0);
            }
            for col in 0..w {
                let v = g.patch(r, col)[0];
                out.push(((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn write_samples(path: &Path, grids: &[LatentGrid]) -> Result<()> {
    write_file(path, &encode_samples(grids)?)?;
    write_file(&path.with_extension("pgm"), &render_pgm(grids))
}

pub fn read_samples(path: &Path) -> Result<Vec<LatentGrid>> {
    let buf = std::fs::read(path).map_err(AppError::io(path))?;
    decode_samples(&buf).map_err(|msg| AppError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(seed: f64) -> LatentGrid {
        let mut g = LatentGrid::zeros(2, 3, 2);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = seed + i as f64 * 0.25;
        }
        g
    }

    #[test]
    fn round_trip() {
        let gs = vec![grid(0.0), grid(-1.5)];
        let back = decode_samples(&encode_samples(&gs).unwrap()).unwrap();
        assert_eq!(back, gs);
    }

    #[test]
    fn pgm_shape() {
        let p = render_pgm(&[grid(0.0), grid(1.0)]);
        let header = b"P5\n7 2\n255\n";
        assert_eq!(&p[..header.len()], header);
        assert_eq!(p.len(), header.len() + 14);
    }

    #[test]
    fn rejects_truncation() {
        let bytes = encode_samples(&[grid(0.0)]).unwrap();
        assert!(decode_samples(&bytes[..bytes.len() - 1]).is_err());
    }
}
