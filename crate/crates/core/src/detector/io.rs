//! Binary weights file.
//!
//! Layout (little endian): magic `CLDW`, `u16` version, config echo
//! (`u32` input height, width, stride, class count, conv1 and conv2
//! channels, anchor count; `u8` anchor-free flag; `f64` NMS IOU and
//! confidence threshold; `f64` anchor width/height pairs), then the six
//! tensors as `f32` in declaration order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DetectorConfig, DetectorWeights};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CLDW";
const VERSION: u16 = 1;

pub fn encode_weights(cfg: &DetectorConfig, w: &DetectorWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * w.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.input_height,
        cfg.input_width,
        cfg.stride,
        cfg.num_classes,
        cfg.conv1_channels,
        cfg.conv2_channels,
        cfg.anchors.len(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(u8::from(cfg.anchor_free));
    out.extend_from_slice(&cfg.nms_iou.to_le_bytes());
    out.extend_from_slice(&cfg.conf_threshold.to_le_bytes());
    for &(aw, ah) in &cfg.anchors {
        out.extend_from_slice(&aw.to_le_bytes());
        out.extend_from_slice(&ah.to_le_bytes());
    }
    for t in w.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("weights file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<(DetectorConfig, DetectorWeights)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| Error::Format("missing CLDW magic".into()))? != MAGIC {
        return Err(Error::Format("missing CLDW magic".into()));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let (input_height, input_width, stride) = (c.u32()?, c.u32()?, c.u32()?);
    let (num_classes, conv1_channels, conv2_channels, n_anchors) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    let anchor_free = match c.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad anchor-free flag {b}"))),
    };
    let nms_iou = c.f64()?;
    let conf_threshold = c.f64()?;
    if n_anchors > 1024 {
        return Err(Error::Format(format!("implausible anchor count {n_anchors}")));
    }
    let mut anchors = Vec::with_capacity(n_anchors);
    for _ in 0..n_anchors {
        anchors.push((c.f64()?, c.f64()?));
    }
    let cfg = DetectorConfig {
        input_height,
        input_width,
        stride,
        anchors,
        anchor_free,
        num_classes,
        conv1_channels,
        conv2_channels,
        nms_iou,
        conf_threshold,
    };
    cfg.validate().map_err(|e| Error::Format(format!("config echo: {e}")))?;
    let mut w = DetectorWeights::zeros(&cfg);
    for t in w.tensors_mut() {
        let raw = c.take(4 * t.len())?;
        for (v, b) in t.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in weights file", bytes.len() - c.pos)));
    }
    w.validate(&cfg).map_err(|e| Error::Format(e.to_string()))?;
    Ok((cfg, w))
}

pub fn save_weights(path: &Path, cfg: &DetectorConfig, w: &DetectorWeights) -> Result<()> {
    fs::write(path, encode_weights(cfg, w))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(DetectorConfig, DetectorWeights)> {
    decode_weights(&fs::read(path)?)
}

/// Hex SHA-256 of the encoded weights file.
pub fn weights_digest(cfg: &DetectorConfig, w: &DetectorWeights) -> String {
    hex::encode(Sha256::digest(encode_weights(cfg, w)))
}
