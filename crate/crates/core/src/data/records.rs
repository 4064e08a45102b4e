//! Binary clip-record files.
//!
//! Layout: 8-byte magic `ECHOCLP1`, five little-endian u32 header fields
//! (count, T, H, W, C) padded with four zero bytes to a 32-byte preamble,
//! then `count` records of T*H*W*C little-endian f32 pixels followed by one
//! f32 label.

use std::fs;
use std::path::Path;

use super::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ECHOCLP1";
const PREAMBLE_LEN: usize = 32;

pub fn write_records(clips: &[VideoClip], path: &Path) -> Result<()> {
    let first = clips.first().ok_or(Error::EmptyInput("clip list"))?;
    let shape = first.shape().to_vec();
    for c in clips {
        if c.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: c.shape().to_vec(),
                context: "record clips must share one shape",
            });
        }
    }
    let mut bytes = Vec::with_capacity(
        PREAMBLE_LEN + clips.len() * (first.frames.numel() * 4 + 4),
    );
    bytes.extend_from_slice(MAGIC);
    for v in [clips.len(), shape[0], shape[1], shape[2], shape[3]] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&[0u8; 4]);
    for clip in clips {
        for &px in clip.frames.data() {
            bytes.extend_from_slice(&(px as f32).to_le_bytes());
        }
        bytes.extend_from_slice(&(clip.label as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<VideoClip>> {
    let bytes = fs::read(path)?;
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::Format {
            detail: format!("file too short for preamble ({} bytes)", bytes.len()),
            offset: bytes.len() as u64,
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format {
            detail: "bad magic (expected ECHOCLP1)".to_string(),
            offset: 0,
        });
    }
    let mut fields = [0usize; 5];
    for (i, f) in fields.iter_mut().enumerate() {
        let at = 8 + i * 4;
        *f = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    }
    let [count, t, h, w, c] = fields;
    if t == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::Format {
            detail: format!("zero extent in header: T={t} H={h} W={w} C={c}"),
            offset: 8,
        });
    }
    let clip_len = t * h * w * c;
    let expected = PREAMBLE_LEN + count * (clip_len * 4 + 4);
    if bytes.len() != expected {
        return Err(Error::Format {
            detail: format!(
                "payload size mismatch: header implies {expected} bytes, file has {}",
                bytes.len()
            ),
            offset: bytes.len().min(expected) as u64,
        });
    }
    let mut clips = Vec::with_capacity(count);
    let mut at = PREAMBLE_LEN;
    for _ in 0..count {
        let mut data = Vec::with_capacity(clip_len);
        for i in 0..clip_len {
            let o = at + i * 4;
            data.push(f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as f64);
        }
        at += clip_len * 4;
        let label = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as f64;
        at += 4;
        clips.push(VideoClip::new(Tensor::from_vec(vec![t, h, w, c], data)?, label)?);
    }
    Ok(clips)
}
