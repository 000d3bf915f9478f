//! The two-headed policy network, its combined objective and the training
//! loop.

use crate::data::{batches_per_epoch, oversample_weights, Batch, BatchSampler, DataError, Dataset};
use crate::features::{HogParams, KINEMATIC_DIM};
use crate::nn::{
    read_checkpoint, write_checkpoint, Adam, AdamConfig, BatchNorm1d, Conv2d, Graph, Linear, Mode, NnError, ParamStore,
    Scalar, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input dimension mismatch: {0}")]
    Dimension(String),
}

/// Architecture description. Its canonical JSON form is hashed into every
/// checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub width: usize,
    pub height: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub visual_dim: usize,
    pub hog: HogParams,
    pub backbone: Vec<usize>,
    pub head_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            conv_channels: vec![16, 32, 32],
            kernel: 3,
            stride: 2,
            padding: 1,
            visual_dim: 484,
            hog: HogParams::default(),
            backbone: vec![128, 128],
            head_hidden: 32,
        }
    }
}

impl PolicyConfig {
    pub fn hog_len(&self) -> usize {
        self.hog.descriptor_len(self.width, self.height)
    }

    pub fn fused_dim(&self) -> usize {
        self.visual_dim + self.hog_len() + KINEMATIC_DIM
    }

    /// Spatial size after the convolution stack.
    pub fn conv_output(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.height, self.width);
        for _ in &self.conv_channels {
            h = (h + 2 * self.padding - self.kernel) / self.stride + 1;
            w = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        }
        (*self.conv_channels.last().unwrap_or(&6), h, w)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.conv_channels.is_empty() || self.backbone.is_empty() {
            return Err(PolicyError::Config("need at least one convolution and one backbone layer".into()));
        }
        if self.width % self.hog.cell != 0 || self.height % self.hog.cell != 0 || self.hog_len() == 0 {
            return Err(PolicyError::Config(format!("HOG {:?} does not tile {}x{}", self.hog, self.width, self.height)));
        }
        if self.kernel == 0 || self.stride == 0 || self.width + 2 * self.padding < self.kernel {
            return Err(PolicyError::Config("degenerate convolution geometry".into()));
        }
        if [self.visual_dim, self.head_hidden].contains(&0) || self.conv_channels.contains(&0) || self.backbone.contains(&0) {
            return Err(PolicyError::Config("zero-width layer".into()));
        }
        Ok(())
    }

    pub fn arch_hash(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("config serializes");
        twox_hash::XxHash64::oneshot(0, canonical.as_bytes())
    }
}

/// Weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_gaze: f64,
    pub lambda_bc: f64,
}

impl LossWeights {
    pub const GAZE_BC: LossWeights = LossWeights { lambda_gaze: 1.0, lambda_bc: 1.0 };
    pub const VANILLA_BC: LossWeights = LossWeights { lambda_gaze: 0.0, lambda_bc: 1.0 };

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.lambda_gaze >= 0.0 && self.lambda_bc >= 0.0 && self.lambda_gaze.is_finite() && self.lambda_bc.is_finite()) {
            return Err(PolicyError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[B, 4]` in `[-1, 1]`.
    pub action: Var,
    /// `[B, 2]` in `[0, 1]`.
    pub gaze: Var,
}

/// Loss nodes: `total = lambda_gaze * gaze + lambda_bc * bc`.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub gaze: Var,
    pub bc: Var,
}

/// Inputs for a batch of `batch` samples, row-major.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a, T> {
    pub batch: usize,
    /// `[B, 6, H, W]`.
    pub frames: &'a [T],
    /// `[B, hog_len]`.
    pub hog: &'a [T],
    /// `[B, 16]`.
    pub kin: &'a [T],
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layers {
    convs: Vec<Conv2d>,
    visual: Linear,
    norm: BatchNorm1d,
    backbone: Vec<Linear>,
    action_hidden: Linear,
    action_out: Linear,
    gaze_hidden: Linear,
    gaze_out: Linear,
}

#[derive(Debug, Clone)]
pub struct PolicyNetwork<T> {
    pub config: PolicyConfig,
    pub store: ParamStore<T>,
    layers: Layers,
}

fn check_input<T>(c: &PolicyConfig, input: &PolicyInput<'_, T>) -> Result<(), PolicyError> {
    let b = input.batch;
    let expect = [
        ("frames", input.frames.len(), b * 6 * c.height * c.width),
        ("hog", input.hog.len(), b * c.hog_len()),
        ("kin", input.kin.len(), b * KINEMATIC_DIM),
    ];
    for (name, found, want) in expect {
        if found != want || b == 0 {
            return Err(PolicyError::Dimension(format!("{name}: {found} values for batch {b}, expected {want}")));
        }
    }
    Ok(())
}

impl Layers {
    fn forward<T: Scalar>(
        &self,
        c: &PolicyConfig,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        input: &PolicyInput<'_, T>,
        mode: Mode,
    ) -> Result<ForwardVars, PolicyError> {
        let b = input.batch;
        let frames = g.input(Tensor::new(vec![b, 6, c.height, c.width], input.frames.to_vec())?);
        let hog = g.input(Tensor::new(vec![b, c.hog_len()], input.hog.to_vec())?);
        let kin = g.input(Tensor::new(vec![b, KINEMATIC_DIM], input.kin.to_vec())?);
        let mut x = frames;
        for conv in &self.convs {
            x = conv.forward(g, store, x)?;
            x = g.relu(x);
        }
        let flat: usize = g.shape(x)[1..].iter().product();
        x = g.reshape(x, vec![b, flat])?;
        x = self.visual.forward(g, store, x)?;
        x = g.relu(x);
        let mut h = g.concat(&[x, hog, kin])?;
        h = self.norm.forward(g, store, h, mode)?;
        for layer in &self.backbone {
            h = layer.forward(g, store, h)?;
            h = g.relu(h);
        }
        let a = self.action_hidden.forward(g, store, h)?;
        let a = g.relu(a);
        let a = self.action_out.forward(g, store, a)?;
        let action = g.tanh(a);
        let z = self.gaze_hidden.forward(g, store, h)?;
        let z = g.relu(z);
        let z = self.gaze_out.forward(g, store, z)?;
        let gaze = g.sigmoid(z);
        Ok(ForwardVars { action, gaze })
    }
}

impl<T: Scalar> PolicyNetwork<T> {
    /// Deterministic initialisation from `seed`.
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut in_c = 6;
        for (i, &c) in config.conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("encoder.conv{i}"), in_c, c, config.kernel, config.stride, config.padding, &mut rng));
            in_c = c;
        }
        let (c, h, w) = config.conv_output();
        let visual = Linear::new(&mut store, "encoder.dense", c * h * w, config.visual_dim, &mut rng);
        let norm = BatchNorm1d::new(&mut store, "fusion.norm", config.fused_dim());
        let mut backbone = Vec::new();
        let mut width = config.fused_dim();
        for (i, &n) in config.backbone.iter().enumerate() {
            backbone.push(Linear::new(&mut store, &format!("backbone.fc{i}"), width, n, &mut rng));
            width = n;
        }
        let action_hidden = Linear::new(&mut store, "action.hidden", width, config.head_hidden, &mut rng);
        let action_out = Linear::new(&mut store, "action.out", config.head_hidden, 4, &mut rng);
        let gaze_hidden = Linear::new(&mut store, "gaze.hidden", width, config.head_hidden, &mut rng);
        let gaze_out = Linear::new(&mut store, "gaze.out", config.head_hidden, 2, &mut rng);
        let layers = Layers { convs, visual, norm, backbone, action_hidden, action_out, gaze_hidden, gaze_out };
        Ok(Self { config, store, layers })
    }

    pub fn arch_hash(&self) -> u64 {
        self.config.arch_hash()
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Parameters used only by the gaze head.
    pub fn gaze_head_params(&self) -> Vec<crate::nn::ParamId> {
        let l = &self.layers;
        vec![l.gaze_hidden.w, l.gaze_hidden.b, l.gaze_out.w, l.gaze_out.b]
    }

    /// Sets both output layers to zero.
    pub fn zero_output_layers(&mut self) {
        let l = &self.layers;
        for id in [l.action_out.w, l.action_out.b, l.gaze_out.w, l.gaze_out.b] {
            self.store.get_mut(id).value.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, input: &PolicyInput<'_, T>, mode: Mode) -> Result<ForwardVars, PolicyError> {
        let Self { config, store, layers } = self;
        check_input(config, input)?;
        layers.forward(config, g, store, input, mode)
    }

    /// Forward pass reading parameters from `store`, which must have the
    /// layout of `self.store`.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        input: &PolicyInput<'_, T>,
        mode: Mode,
    ) -> Result<ForwardVars, PolicyError> {
        check_input(&self.config, input)?;
        if store.len() != self.store.len() {
            return Err(PolicyError::Dimension(format!("store has {} parameters, network {}", store.len(), self.store.len())));
        }
        self.layers.forward(&self.config, g, store, input, mode)
    }

    /// Eval-mode prediction: `(actions [B*4], gazes [B*2])`.
    pub fn predict(&mut self, input: &PolicyInput<'_, T>) -> Result<(Vec<T>, Vec<T>), PolicyError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, Mode::Eval)?;
        Ok((g.value(out.action).data.clone(), g.value(out.gaze).data.clone()))
    }

    pub fn cast<U: Scalar>(&self) -> PolicyNetwork<U> {
        PolicyNetwork { config: self.config.clone(), store: self.store.cast(), layers: self.layers.clone() }
    }
}

/// Adds the combined objective to `g`.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardVars,
    gaze_target: &Tensor<T>,
    action_target: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossVars, PolicyError> {
    w.validate()?;
    let gaze = g.mse(out.gaze, gaze_target)?;
    let bc = g.mse(out.action, action_target)?;
    let total = g.weighted_sum(&[(T::from_f64(w.lambda_gaze), gaze), (T::from_f64(w.lambda_bc), bc)])?;
    Ok(LossVars { total, gaze, bc })
}

impl PolicyNetwork<f32> {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(&self.store, self.arch_hash(), &mut out).expect("writing to memory");
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.checkpoint_bytes()).map_err(NnError::from)?;
        Ok(())
    }

    /// Loads a checkpoint written for `config`; fails on any architecture
    /// mismatch.
    pub fn load(path: &Path, config: PolicyConfig) -> Result<Self, PolicyError> {
        let bytes = std::fs::read(path).map_err(NnError::from)?;
        Self::from_checkpoint_bytes(&bytes, config)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], config: PolicyConfig) -> Result<Self, PolicyError> {
        let mut net = Self::init(config, 0)?;
        let ck = read_checkpoint(bytes)?;
        let hash = net.arch_hash();
        ck.apply(&mut net.store, hash)?;
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub yaw_threshold: f64,
    pub oversample_boost: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::GAZE_BC,
            optimizer: AdamConfig::default(),
            epochs: 20,
            batch_size: 128,
            seed: 0,
            yaw_threshold: crate::data::DEFAULT_YAW_THRESHOLD,
            oversample_boost: crate::data::DEFAULT_BOOST,
        }
    }
}

/// Mean losses over one epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub gaze_loss: f64,
    pub bc_loss: f64,
    pub batches: usize,
}

/// One optimisation step on `batch`; returns `(total, gaze, bc)`.
pub fn train_step(
    net: &mut PolicyNetwork<f32>,
    opt: &mut Adam<f32>,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<(f64, f64, f64), PolicyError> {
    let input = PolicyInput { batch: batch.size, frames: &batch.frames, hog: &batch.hog, kin: &batch.kin };
    let mut g = Graph::new();
    let out = net.forward(&mut g, &input, Mode::Train)?;
    let gaze_t = Tensor::new(vec![batch.size, 2], batch.gaze.clone())?;
    let action_t = Tensor::new(vec![batch.size, 4], batch.action.clone())?;
    let loss = combined_loss(&mut g, &out, &gaze_t, &action_t, weights)?;
    net.store.zero_grad();
    g.backward(loss.total, &mut net.store)?;
    opt.step(&mut net.store);
    let v = |x: Var| g.value(x).data[0] as f64;
    Ok((v(loss.total), v(loss.gaze), v(loss.bc)))
}

/// Trains a freshly initialised network on `data`, calling `on_epoch` after
/// every epoch.
pub fn train(
    config: PolicyConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(PolicyNetwork<f32>, Vec<EpochLog>), PolicyError> {
    cfg.weights.validate()?;
    if data.is_empty() {
        return Err(DataError::Empty.into());
    }
    if data.width != config.width || data.height != config.height || data.hog_params != config.hog {
        return Err(PolicyError::Dimension("dataset geometry differs from the architecture".into()));
    }
    let mut net = PolicyNetwork::<f32>::init(config, cfg.seed)?;
    let mut opt = Adam::new(cfg.optimizer);
    let weights = oversample_weights(&data.yaw_actions(), cfg.yaw_threshold, cfg.oversample_boost)?;
    let mut sampler = BatchSampler::new(&weights, cfg.batch_size, cfg.seed.wrapping_add(0x5eed))?;
    let per_epoch = batches_per_epoch(data.len(), cfg.batch_size);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut t, mut gz, mut bc) = (0.0, 0.0, 0.0);
        for _ in 0..per_epoch {
            let idx = sampler.next_batch();
            let batch = data.batch(&idx);
            let (a, b, c) = train_step(&mut net, &mut opt, &batch, &cfg.weights)?;
            t += a;
            gz += b;
            bc += c;
        }
        let n = per_epoch as f64;
        let log = EpochLog { epoch: epoch + 1, total: t / n, gaze_loss: gz / n, bc_loss: bc / n, batches: per_epoch };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((net, logs))
}
