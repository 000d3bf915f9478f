use super::{DataError, Trajectory};
use crate::features::{hog_f32, stack_pair_into, stacked_partner, HogParams, KINEMATIC_DIM, STACK_DELTA};
use crate::world::Configuration;

/// Training samples with precomputed HOG descriptors. RGB frames are kept
/// per trajectory so stacked inputs are assembled on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub hog_params: HogParams,
    hog_len: usize,
    frames: Vec<Vec<u8>>,
    configs: Vec<Configuration>,
    traj_of: Vec<u32>,
    step_of: Vec<u32>,
    hog: Vec<f32>,
    kin: Vec<f32>,
    action: Vec<f32>,
    gaze: Vec<f32>,
}

/// Inputs and labels of one batch, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// `[B, 6, H, W]`.
    pub frames: Vec<f32>,
    /// `[B, hog_len]`.
    pub hog: Vec<f32>,
    /// `[B, 16]`.
    pub kin: Vec<f32>,
    /// `[B, 4]`.
    pub action: Vec<f32>,
    /// `[B, 2]`.
    pub gaze: Vec<f32>,
}

impl Dataset {
    pub fn new(width: usize, height: usize, hog_params: HogParams) -> Self {
        Self {
            width,
            height,
            hog_params,
            hog_len: hog_params.descriptor_len(width, height),
            frames: Vec::new(),
            configs: Vec::new(),
            traj_of: Vec::new(),
            step_of: Vec::new(),
            hog: Vec::new(),
            kin: Vec::new(),
            action: Vec::new(),
            gaze: Vec::new(),
        }
    }

    pub fn push(&mut self, t: &Trajectory) -> Result<(), DataError> {
        if t.width as usize != self.width || t.height as usize != self.height {
            return Err(DataError::Invalid(format!("frame size {}x{} in a {}x{} dataset", t.width, t.height, self.width, self.height)));
        }
        t.validate()?;
        let id = self.frames.len() as u32;
        let mut frames = Vec::with_capacity(t.steps.len() * 3 * self.width * self.height);
        for (pos, s) in t.steps.iter().enumerate() {
            frames.extend_from_slice(&s.rgb);
            let h = hog_f32(&s.depth, self.width, self.height, &self.hog_params).map_err(|e| DataError::Invalid(e.to_string()))?;
            self.hog.extend_from_slice(&h);
            self.kin.extend_from_slice(&s.kin);
            self.action.extend_from_slice(&s.action);
            self.gaze.extend_from_slice(&s.gaze);
            self.traj_of.push(id);
            self.step_of.push(pos as u32);
        }
        self.frames.push(frames);
        self.configs.push(t.config);
        Ok(())
    }

    pub fn from_trajectories<'a>(
        trajectories: impl IntoIterator<Item = &'a Trajectory>,
        width: usize,
        height: usize,
        hog_params: HogParams,
    ) -> Result<Self, DataError> {
        let mut d = Self::new(width, height, hog_params);
        for t in trajectories {
            d.push(t)?;
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.traj_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traj_of.is_empty()
    }

    pub fn hog_len(&self) -> usize {
        self.hog_len
    }

    pub fn trajectory_count(&self) -> usize {
        self.frames.len()
    }

    /// Configuration of the trajectory sample `i` came from.
    pub fn config_of(&self, i: usize) -> Configuration {
        self.configs[self.traj_of[i] as usize]
    }

    pub fn yaw_actions(&self) -> Vec<f32> {
        self.action.chunks(4).map(|a| a[3]).collect()
    }

    pub fn action(&self, i: usize) -> &[f32] {
        &self.action[4 * i..4 * i + 4]
    }

    pub fn gaze(&self, i: usize) -> &[f32] {
        &self.gaze[2 * i..2 * i + 2]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let pixels = self.width * self.height;
        let fsz = 3 * pixels;
        let mut b = Batch {
            size: indices.len(),
            frames: vec![0.0; indices.len() * 6 * pixels],
            hog: Vec::with_capacity(indices.len() * self.hog_len),
            kin: Vec::with_capacity(indices.len() * KINEMATIC_DIM),
            action: Vec::with_capacity(indices.len() * 4),
            gaze: Vec::with_capacity(indices.len() * 2),
        };
        for (slot, &i) in indices.iter().enumerate() {
            let frames = &self.frames[self.traj_of[i] as usize];
            let t = self.step_of[i] as usize;
            let p = stacked_partner(t, STACK_DELTA);
            stack_pair_into(
                &frames[t * fsz..(t + 1) * fsz],
                &frames[p * fsz..(p + 1) * fsz],
                &mut b.frames[slot * 6 * pixels..(slot + 1) * 6 * pixels],
            );
            b.hog.extend_from_slice(&self.hog[i * self.hog_len..(i + 1) * self.hog_len]);
            b.kin.extend_from_slice(&self.kin[i * KINEMATIC_DIM..(i + 1) * KINEMATIC_DIM]);
            b.action.extend_from_slice(self.action(i));
            b.gaze.extend_from_slice(self.gaze(i));
        }
        b
    }
}
