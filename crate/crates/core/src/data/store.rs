use super::{DataError, Outcome, Source, StepRecord, Trajectory};
use crate::features::KINEMATIC_DIM;
use crate::world::Configuration;
use std::path::Path;
use twox_hash::XxHash64;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"GZBC";
pub const TRAJECTORY_VERSION: u16 = 1;
const HEADER_LEN: usize = 76;
const TRAILER_LEN: usize = 8;

fn record_len(pixels: usize) -> usize {
    4 + 3 * pixels + 4 * pixels + 4 * KINEMATIC_DIM + 4 * 4 + 4 * 2 + 3
}

impl Trajectory {
    pub fn to_bytes(&self) -> Vec<u8> {
        let pixels = self.width as usize * self.height as usize;
        let mut b = Vec::with_capacity(HEADER_LEN + self.steps.len() * record_len(pixels) + TRAILER_LEN);
        b.extend_from_slice(TRAJECTORY_MAGIC);
        b.extend_from_slice(&TRAJECTORY_VERSION.to_le_bytes());
        b.push(match self.source {
            Source::Oracle => 0,
            Source::Human => 1,
        });
        b.push(match self.outcome {
            Outcome::Success => 0,
            Outcome::Timeout => 1,
        });
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&(self.config.start_index as u32).to_le_bytes());
        b.extend_from_slice(&(self.config.target_index as u32).to_le_bytes());
        b.extend_from_slice(&self.config.initial_yaw.to_le_bytes());
        b.extend_from_slice(&self.world_hash.to_le_bytes());
        b.extend_from_slice(&self.width.to_le_bytes());
        b.extend_from_slice(&self.height.to_le_bytes());
        b.extend_from_slice(&(KINEMATIC_DIM as u16).to_le_bytes());
        b.extend_from_slice(&0u16.to_le_bytes());
        for v in self.final_position {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.steps.len() as u32).to_le_bytes());
        debug_assert_eq!(b.len(), HEADER_LEN);
        for s in &self.steps {
            b.extend_from_slice(&s.index.to_le_bytes());
            b.extend_from_slice(&s.rgb);
            s.depth.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
            s.kin.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
            s.action.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
            s.gaze.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
            b.push(s.collision as u8);
            b.push(s.phase);
            b.push(s.pattern);
        }
        let sum = XxHash64::oneshot(0, &b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    /// Trailing checksum of the serialised form.
    pub fn checksum(&self) -> u64 {
        let b = self.to_bytes();
        u64::from_le_bytes(b[b.len() - 8..].try_into().unwrap())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 4 || &bytes[..4] != TRAJECTORY_MAGIC {
            return Err(DataError::BadMagic);
        }
        if bytes.len() < 6 {
            return Err(DataError::Corrupt("truncated header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TRAJECTORY_VERSION {
            return Err(DataError::Version { found: version, expected: TRAJECTORY_VERSION });
        }
        if bytes.len() < HEADER_LEN + TRAILER_LEN {
            return Err(DataError::Checksum { stored: 0, computed: XxHash64::oneshot(0, bytes) });
        }
        let (body, tail) = bytes.split_at(bytes.len() - TRAILER_LEN);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = XxHash64::oneshot(0, body);
        if stored != computed {
            return Err(DataError::Checksum { stored, computed });
        }
        let mut r = Reader { b: body, pos: 6 };
        let source = match r.u8()? {
            0 => Source::Oracle,
            1 => Source::Human,
            x => return Err(DataError::Corrupt(format!("unknown source tag {x}"))),
        };
        let outcome = match r.u8()? {
            0 => Outcome::Success,
            1 => Outcome::Timeout,
            x => return Err(DataError::Corrupt(format!("unknown outcome tag {x}"))),
        };
        let seed = r.u64()?;
        let start_index = r.u32()? as usize;
        let target_index = r.u32()? as usize;
        let initial_yaw = r.f64()?;
        let world_hash = r.u64()?;
        let width = r.u16()?;
        let height = r.u16()?;
        let kin_dim = r.u16()? as usize;
        if kin_dim != KINEMATIC_DIM {
            return Err(DataError::Corrupt(format!("kinematic dimension {kin_dim}")));
        }
        r.u16()?;
        let final_position = [r.f64()?, r.f64()?, r.f64()?];
        let count = r.u32()? as usize;
        let pixels = width as usize * height as usize;
        if body.len() != HEADER_LEN + count * record_len(pixels) {
            return Err(DataError::Corrupt(format!("{count} records do not fill {} bytes", body.len() - HEADER_LEN)));
        }
        let mut steps = Vec::with_capacity(count);
        for _ in 0..count {
            let index = r.u32()?;
            let rgb = r.take(3 * pixels)?.to_vec();
            let depth = r.f32s(pixels)?;
            let kin: [f32; KINEMATIC_DIM] = r.f32s(KINEMATIC_DIM)?.try_into().unwrap();
            let action: [f32; 4] = r.f32s(4)?.try_into().unwrap();
            let gaze: [f32; 2] = r.f32s(2)?.try_into().unwrap();
            let collision = r.u8()? != 0;
            let phase = r.u8()?;
            let pattern = r.u8()?;
            steps.push(StepRecord { index, rgb, depth, kin, action, gaze, collision, phase, pattern });
        }
        let t = Trajectory {
            source,
            outcome,
            seed,
            config: Configuration { start_index, target_index, initial_yaw },
            world_hash,
            width,
            height,
            final_position,
            steps,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<u64, DataError> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.b.len() {
            return Err(DataError::Corrupt("unexpected end of data".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DataError> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::NO_TAG;

    pub(crate) fn synthetic(steps: usize, w: u16, h: u16) -> Trajectory {
        let pixels = w as usize * h as usize;
        Trajectory {
            source: Source::Oracle,
            outcome: Outcome::Success,
            seed: 11,
            config: Configuration { start_index: 1, target_index: 2, initial_yaw: -0.7 },
            world_hash: 0xdead_beef,
            width: w,
            height: h,
            final_position: [1.0, 2.0, 2.5],
            steps: (0..steps)
                .map(|i| StepRecord {
                    index: i as u32,
                    rgb: (0..3 * pixels).map(|p| ((p + i) % 256) as u8).collect(),
                    depth: (0..pixels).map(|p| 0.1 + (p * 7 + i) as f32 * 0.37).collect(),
                    kin: std::array::from_fn(|k| (k as f32 - 8.0) * 0.1 + i as f32 * 1e-3),
                    action: [0.5, -0.25, 0.0, if i % 3 == 0 { 0.9 } else { 0.0 }],
                    gaze: [0.5, 0.125],
                    collision: i % 17 == 0,
                    phase: (i % 3) as u8,
                    pattern: NO_TAG,
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let t = synthetic(300, 8, 6);
        let b = t.to_bytes();
        let back = Trajectory::from_bytes(&b).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn layout_sizes() {
        let t = synthetic(2, 64, 48);
        assert_eq!(t.to_bytes().len(), 76 + 2 * 21_599 + 8);
    }

    #[test]
    fn truncation_and_version_errors() {
        let b = synthetic(5, 4, 4).to_bytes();
        assert!(matches!(Trajectory::from_bytes(&b[..b.len() - 10]), Err(DataError::Checksum { .. })));
        assert!(matches!(Trajectory::from_bytes(&b[..40]), Err(DataError::Checksum { .. })));
        let mut v = b.clone();
        v[4] = 9;
        let err = Trajectory::from_bytes(&v).unwrap_err();
        assert!(matches!(err, DataError::Version { found: 9, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains('1'));
        let mut m = b.clone();
        m[0] = b'X';
        assert!(matches!(Trajectory::from_bytes(&m), Err(DataError::BadMagic)));
    }

    #[test]
    fn out_of_bounds_labels_rejected() {
        let mut t = synthetic(3, 2, 2);
        t.steps[1].gaze = [1.5, 0.0];
        assert!(Trajectory::from_bytes(&t.to_bytes()).is_err());
    }
}
