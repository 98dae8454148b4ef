//! Precomputed per-sequence feature container (`FSLF`).
//!
//! Little-endian layout:
//!
//! ```text
//! header:    magic "FSLF" | version u32 | variant u8 (0 binary, 1 real)
//!            | descriptor length u32 | frame count u32
//! frame:     frame_id u64 | keypoint count u32 | keypoint*
//! keypoint:  x f32 | y f32 | octave u8 | scale f32 | orientation f32 | response f32
//!            | [length u32, only when the header length is 0] | payload
//! payload:   binary: ceil(length / 8) bytes, bit i in byte i/8 at position i%8
//!            real:   length x f32
//! ```
//!
//! A header descriptor length of 0 marks a file whose records carry their own length.

use std::io::{Read, Write};
use std::path::Path;

use super::descriptor::BitDescriptor;
use super::{validate_frame_features, Descriptor, DescriptorKind, FeatureError, Keypoint};

pub const FEATURE_MAGIC: &[u8; 4] = b"FSLF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrame {
    pub frame_id: u64,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    /// Variant and length declared in the header. A length of 0 means per-record lengths.
    pub kind: DescriptorKind,
    pub frames: Vec<FeatureFrame>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureError> {
        if self.pos + n > self.buf.len() {
            return Err(FeatureError::MalformedRecord(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, FeatureError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, FeatureError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, FeatureError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.push(self.kind.variant_code());
        let declared = self.kind.len();
        out.extend_from_slice(&(declared as u32).to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        for f in &self.frames {
            out.extend_from_slice(&f.frame_id.to_le_bytes());
            out.extend_from_slice(&(f.keypoints.len() as u32).to_le_bytes());
            for (k, d) in f.keypoints.iter().zip(&f.descriptors) {
                out.extend_from_slice(&(k.x as f32).to_le_bytes());
                out.extend_from_slice(&(k.y as f32).to_le_bytes());
                out.push(k.octave.min(255) as u8);
                out.extend_from_slice(&(k.scale as f32).to_le_bytes());
                out.extend_from_slice(&(k.orientation as f32).to_le_bytes());
                out.extend_from_slice(&(k.response as f32).to_le_bytes());
                if declared == 0 {
                    out.extend_from_slice(&(d.kind().len() as u32).to_le_bytes());
                }
                match d {
                    Descriptor::Binary(b) => out.extend_from_slice(&b.to_bytes()),
                    Descriptor::Real(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FeatureError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != FEATURE_MAGIC {
            return Err(FeatureError::MalformedRecord("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(FeatureError::MalformedRecord(format!("unsupported version {version}")));
        }
        let variant = r.u8()?;
        let declared = r.u32()? as usize;
        let kind = match variant {
            0 => DescriptorKind::Binary(declared),
            1 => DescriptorKind::Real(declared),
            v => return Err(FeatureError::MalformedRecord(format!("unknown variant {v}"))),
        };
        let n_frames = r.u32()? as usize;
        let mut frames = Vec::with_capacity(n_frames.min(1 << 16));
        for _ in 0..n_frames {
            let frame_id = r.u64()?;
            let n = r.u32()? as usize;
            let mut keypoints = Vec::with_capacity(n.min(1 << 16));
            let mut descriptors = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let x = r.f32()? as f64;
                let y = r.f32()? as f64;
                let octave = r.u8()? as usize;
                let scale = r.f32()? as f64;
                let orientation = r.f32()? as f64;
                let response = r.f32()? as f64;
                if ![x, y, scale, orientation, response].iter().all(|v| v.is_finite()) {
                    return Err(FeatureError::MalformedRecord(format!(
                        "non-finite keypoint field in frame {frame_id}"
                    )));
                }
                let len = if declared == 0 { r.u32()? as usize } else { declared };
                let d = match kind {
                    DescriptorKind::Binary(_) => {
                        Descriptor::Binary(BitDescriptor::from_bytes(r.take(len.div_ceil(8))?, len))
                    }
                    DescriptorKind::Real(_) => {
                        Descriptor::Real((0..len).map(|_| r.f32()).collect::<Result<_, _>>()?)
                    }
                };
                keypoints.push(Keypoint {
                    x,
                    y,
                    octave,
                    scale: if scale > 0.0 { scale } else { 1.0 },
                    orientation,
                    response,
                });
                descriptors.push(d);
            }
            frames.push(FeatureFrame {
                frame_id,
                keypoints,
                descriptors,
            });
        }
        if r.pos != buf.len() {
            return Err(FeatureError::MalformedRecord(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self { kind, frames })
    }

    pub fn read(path: &Path) -> Result<Self, FeatureError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| FeatureError::Io(path.display().to_string(), e.to_string()))?;
        Self::from_bytes(&buf)
    }

    pub fn write(&self, path: &Path) -> Result<(), FeatureError> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| FeatureError::Io(path.display().to_string(), e.to_string()))
    }

    /// Keypoints and validated descriptors of one frame; real descriptors are L2-normalized.
    pub fn frame(&self, frame_id: u64) -> Result<(Vec<Keypoint>, Vec<Descriptor>), FeatureError> {
        let f = self
            .frames
            .iter()
            .find(|f| f.frame_id == frame_id)
            .ok_or(FeatureError::MissingFrame(frame_id))?;
        validate_frame_features(&f.keypoints, &f.descriptors)?;
        let descriptors = f.descriptors.iter().cloned().map(Descriptor::l2_normalized).collect();
        Ok((f.keypoints.clone(), descriptors))
    }
}

/// Loads one frame of precomputed features from an `FSLF` file.
pub fn load_external_features(path: &Path, frame_id: u64) -> Result<(Vec<Keypoint>, Vec<Descriptor>), FeatureError> {
    FeatureFile::read(path)?.frame(frame_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn real_frame(id: u64, lens: &[usize]) -> FeatureFrame {
        FeatureFrame {
            frame_id: id,
            keypoints: lens.iter().enumerate().map(|(i, _)| Keypoint::at(10.0 + i as f64, 20.5)).collect(),
            descriptors: lens
                .iter()
                .map(|&n| Descriptor::Real((0..n).map(|k| (k % 7) as f32 + 1.0).collect()))
                .collect(),
        }
    }

    #[test]
    fn two_real_keypoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fslf");
        FeatureFile {
            kind: DescriptorKind::Real(128),
            frames: vec![real_frame(7, &[128, 128])],
        }
        .write(&path)
        .unwrap();
        let (k, d) = load_external_features(&path, 7).unwrap();
        assert_eq!(k.len(), 2);
        assert_eq!(k[1].x, 11.0);
        for desc in &d {
            assert_eq!(desc.kind(), DescriptorKind::Real(128));
            let Descriptor::Real(v) = desc else { unreachable!() };
            let n: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mixed_lengths_rejected() {
        let file = FeatureFile {
            kind: DescriptorKind::Real(0),
            frames: vec![real_frame(0, &[128, 64])],
        };
        let back = FeatureFile::from_bytes(&file.to_bytes()).unwrap();
        assert!(matches!(back.frame(0), Err(FeatureError::MixedDescriptorLength(128, 64))));
    }

    #[test]
    fn missing_frame() {
        let file = FeatureFile {
            kind: DescriptorKind::Real(4),
            frames: vec![real_frame(0, &[4])],
        };
        assert!(matches!(file.frame(3), Err(FeatureError::MissingFrame(3))));
    }

    #[test]
    fn binary_payload_round_trip() {
        let mut b = BitDescriptor::zeros(256);
        b.set(5, true);
        b.set(255, true);
        let file = FeatureFile {
            kind: DescriptorKind::Binary(256),
            frames: vec![FeatureFrame {
                frame_id: 42,
                keypoints: vec![Keypoint { octave: 2, scale: 4.0, ..Keypoint::at(1.5, 2.5) }],
                descriptors: vec![Descriptor::Binary(b)],
            }],
        };
        let bytes = file.to_bytes();
        // header 17 bytes, frame header 12, keypoint 21 + 32 payload
        assert_eq!(bytes.len(), 17 + 12 + 21 + 32);
        assert_eq!(FeatureFile::from_bytes(&bytes).unwrap(), file);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let file = FeatureFile {
            kind: DescriptorKind::Real(4),
            frames: vec![real_frame(0, &[4])],
        };
        let bytes = file.to_bytes();
        assert!(matches!(
            FeatureFile::from_bytes(&bytes[..bytes.len() - 1]),
            Err(FeatureError::MalformedRecord(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FeatureFile::from_bytes(&bad), Err(FeatureError::MalformedRecord(_))));
    }
}
