//! Tactile embedding: a frozen feed-forward map from the last `W` pressure
//! matrices to a `d_z`-dimensional vector, pre-trained to regress the lid's
//! torsional friction.
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! magic    b"TENC"
//! version  u32 (= 1)
//! window   u32
//! sensors  u32   (per finger)
//! embed    u32
//! network  Mlp::write_to
//! ```

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::contact_geometry::NUM_FINGERS;
use crate::error::{Error, Result};
use crate::nn::{read_u32, Activation, Adam, Mlp};

pub const ENCODER_MAGIC: &[u8; 4] = b"TENC";
pub const ENCODER_VERSION: u32 = 1;

/// Ring buffer of the most recent flattened pressure matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileWindow {
    frame_len: usize,
    capacity: usize,
    frames: VecDeque<Vec<f64>>,
}

impl TactileWindow {
    /// A window pre-filled with zero frames.
    pub fn zeroed(capacity: usize, sensors_per_finger: usize) -> Self {
        let frame_len = NUM_FINGERS * sensors_per_finger;
        Self {
            frame_len,
            capacity,
            frames: (0..capacity).map(|_| vec![0.0; frame_len]).collect(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn push(&mut self, frame: &[f64]) {
        assert_eq!(frame.len(), self.frame_len, "pressure frame size mismatch");
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame.to_vec());
    }

    pub fn latest(&self) -> &[f64] {
        self.frames.back().expect("window is never empty")
    }

    /// Oldest frame first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.capacity * self.frame_len);
        for f in &self.frames {
            out.extend_from_slice(f);
        }
        out
    }

    pub fn reset(&mut self) {
        for f in &mut self.frames {
            f.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Trained map from a flattened window to the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub window: usize,
    pub sensors_per_finger: usize,
    pub embed_dim: usize,
    pub net: Mlp,
    pub frozen: bool,
}

impl EncoderParams {
    pub fn new_random(window: usize, sensors_per_finger: usize, embed_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut sizes = vec![window * NUM_FINGERS * sensors_per_finger];
        sizes.extend_from_slice(hidden);
        sizes.push(embed_dim);
        Self {
            window,
            sensors_per_finger,
            embed_dim,
            net: Mlp::new(&sizes, Activation::Tanh, 1.0, rng),
            frozen: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.window * NUM_FINGERS * self.sensors_per_finger
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ENCODER_MAGIC);
        for v in [ENCODER_VERSION, self.window as u32, self.sensors_per_finger as u32, self.embed_dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        self.net.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut input = bytes;
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|e| Error::format(origin, e.to_string()))?;
        if &magic != ENCODER_MAGIC {
            return Err(Error::format(origin, "not a tactile encoder file"));
        }
        let mut header = [0u32; 4];
        for h in &mut header {
            *h = read_u32(&mut input).map_err(|e| Error::format(origin, e.to_string()))?;
        }
        let [version, window, sensors, embed] = header;
        if version != ENCODER_VERSION {
            return Err(Error::format(origin, format!("unsupported encoder version {version}")));
        }
        let net = Mlp::read_from(&mut input).map_err(|e| Error::format(origin, e.to_string()))?;
        if !input.is_empty() {
            return Err(Error::format(origin, "trailing bytes after encoder network"));
        }
        let params = Self {
            window: window as usize,
            sensors_per_finger: sensors as usize,
            embed_dim: embed as usize,
            net,
            frozen: true,
        };
        if params.net.input_dim() != params.input_dim() || params.net.output_dim() != params.embed_dim {
            return Err(Error::format(origin, "header does not match network shape"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialised parameters.
    pub fn checksum(&self) -> String {
        Sha256::digest(self.to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Produces the embedding placed in the policy observation.
#[derive(Debug, Clone, PartialEq)]
pub enum TactileEncoder {
    Learned(EncoderParams),
    /// Embedding is the newest pressure matrix itself.
    Passthrough { sensors_per_finger: usize },
}

impl TactileEncoder {
    pub fn embed_dim(&self) -> usize {
        match self {
            TactileEncoder::Learned(p) => p.embed_dim,
            TactileEncoder::Passthrough { sensors_per_finger } => NUM_FINGERS * sensors_per_finger,
        }
    }

    pub fn window_len(&self) -> usize {
        match self {
            TactileEncoder::Learned(p) => p.window,
            TactileEncoder::Passthrough { .. } => 1,
        }
    }

    pub fn sensors_per_finger(&self) -> usize {
        match self {
            TactileEncoder::Learned(p) => p.sensors_per_finger,
            TactileEncoder::Passthrough { sensors_per_finger } => *sensors_per_finger,
        }
    }

    pub fn checksum(&self) -> Option<String> {
        match self {
            TactileEncoder::Learned(p) => Some(p.checksum()),
            TactileEncoder::Passthrough { .. } => None,
        }
    }

    fn check(&self, window: &TactileWindow) -> Result<()> {
        let expected_frame = NUM_FINGERS * self.sensors_per_finger();
        if window.frame_len() != expected_frame {
            return Err(Error::config(format!(
                "tactile frame has {} entries, encoder expects {expected_frame}",
                window.frame_len()
            )));
        }
        if let TactileEncoder::Learned(p) = self {
            if window.capacity() != p.window {
                return Err(Error::config(format!(
                    "tactile window holds {} frames, encoder expects {}",
                    window.capacity(),
                    p.window
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self, window: &TactileWindow) -> Result<DVector<f64>> {
        self.check(window)?;
        Ok(match self {
            TactileEncoder::Learned(p) => {
                let x = DMatrix::from_vec(p.input_dim(), 1, window.flatten());
                let y = p.net.forward(&x);
                DVector::from_column_slice(y.as_slice())
            }
            TactileEncoder::Passthrough { .. } => DVector::from_column_slice(window.latest()),
        })
    }

    /// Embeddings for several windows at once, one column per window.
    pub fn encode_batch(&self, windows: &[&TactileWindow]) -> Result<DMatrix<f64>> {
        for w in windows {
            self.check(w)?;
        }
        Ok(match self {
            TactileEncoder::Learned(p) => {
                let mut x = DMatrix::zeros(p.input_dim(), windows.len());
                for (c, w) in windows.iter().enumerate() {
                    x.column_mut(c).copy_from_slice(&w.flatten());
                }
                p.net.forward(&x)
            }
            TactileEncoder::Passthrough { .. } => {
                let dim = self.embed_dim();
                let mut x = DMatrix::zeros(dim, windows.len());
                for (c, w) in windows.iter().enumerate() {
                    x.column_mut(c).copy_from_slice(w.latest());
                }
                x
            }
        })
    }
}

/// Regression head used only while pre-training: `friction = mean + scale * (W z + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrictionHead {
    pub net: Mlp,
    pub target_mean: f64,
    pub target_scale: f64,
}

impl FrictionHead {
    pub fn predict(&self, encoder: &EncoderParams, windows: &DMatrix<f64>) -> Vec<f64> {
        let z = encoder.net.forward(windows);
        let y = self.net.forward(&z);
        y.iter().map(|v| self.target_mean + self.target_scale * v).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainSettings {
    pub window: usize,
    pub sensors_per_finger: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Supervised friction regression; returns the frozen encoder and the head.
pub fn pretrain(
    windows: &[Vec<f64>],
    frictions: &[f64],
    hidden: &[usize],
    settings: &PretrainSettings,
    rng: &mut impl Rng,
) -> Result<(EncoderParams, FrictionHead)> {
    if windows.is_empty() {
        return Err(Error::Input("encoder pre-training needs a non-empty dataset".into()));
    }
    if windows.len() != frictions.len() {
        return Err(Error::Input("window and friction counts differ".into()));
    }
    let mut encoder = EncoderParams::new_random(
        settings.window,
        settings.sensors_per_finger,
        settings.embed_dim,
        hidden,
        rng,
    );
    let dim = encoder.input_dim();
    if let Some(bad) = windows.iter().position(|w| w.len() != dim) {
        return Err(Error::Input(format!("window {bad} has the wrong length (expected {dim})")));
    }
    let n = frictions.len() as f64;
    let mean = frictions.iter().sum::<f64>() / n;
    let std = (frictions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-9 { std } else { 1.0 };
    let mut head = FrictionHead {
        net: Mlp::new(&[settings.embed_dim, 1], Activation::Identity, 1.0, rng),
        target_mean: mean,
        target_scale: scale,
    };

    let enc_shapes: Vec<usize> = encoder.net.param_slices().iter().map(|s| s.len()).collect();
    let head_shapes: Vec<usize> = head.net.param_slices().iter().map(|s| s.len()).collect();
    let mut enc_opt = Adam::new(settings.learning_rate, &enc_shapes);
    let mut head_opt = Adam::new(settings.learning_rate, &head_shapes);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let batch = settings.batch_size.max(1);
    for _ in 0..settings.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let mut x = DMatrix::zeros(dim, chunk.len());
            let mut t = DMatrix::zeros(1, chunk.len());
            for (c, &idx) in chunk.iter().enumerate() {
                x.column_mut(c).copy_from_slice(&windows[idx]);
                t[(0, c)] = (frictions[idx] - mean) / scale;
            }
            let enc_cache = encoder.net.forward_cached(&x);
            let head_cache = head.net.forward_cached(enc_cache.output());
            // mean squared error on the standardised target
            let grad_y = (head_cache.output() - &t) * (2.0 / chunk.len() as f64);
            let head_grads = head.net.backward(&head_cache, &grad_y);
            let grad_z = head.net.layers[0].weight.tr_mul(&grad_y);
            let enc_grads = encoder.net.backward(&enc_cache, &grad_z);
            head_opt.step(&mut head.net.param_slices_mut(), &head_grads.slices());
            enc_opt.step(&mut encoder.net.param_slices_mut(), &enc_grads.slices());
        }
    }
    encoder.frozen = true;
    Ok((encoder, head))
}
