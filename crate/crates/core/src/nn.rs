//! Small dense networks with hand-written backpropagation, an Adam
//! optimiser and a little-endian binary encoding.
//!
//! Batches are stored column-wise: an input batch is `features × batch`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 1,
            Activation::Identity => 0,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Feed-forward network: tanh hidden layers and a configurable output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("cache holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols())).collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }
}

fn activate(z: &mut DMatrix<f64>, activation: Activation) {
    if activation == Activation::Tanh {
        z.apply(|v| *v = v.tanh());
    }
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`. Weights are drawn from
    /// `N(0, gain² / fan_in)`; the output layer uses `output_gain`.
    pub fn new(sizes: &[usize], output: Activation, output_gain: f64, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least an input and an output size");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let gain = if l == last { output_gain } else { 5.0 / 3.0 };
                let std = gain / (fan_in as f64).sqrt();
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| std * rng.sample::<f64, _>(StandardNormal));
                Layer {
                    weight,
                    bias: DVector::zeros(fan_out),
                    activation: if l == last { output } else { Activation::Tanh },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty network").weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = &layer.weight * &x;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            activate(&mut z, layer.activation);
            x = z;
        }
        x
    }

    pub fn forward_cached(&self, input: &DMatrix<f64>) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let mut z = &layer.weight * activations.last().expect("input pushed");
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            activate(&mut z, layer.activation);
            activations.push(z);
        }
        ForwardCache { activations }
    }

    /// Parameter gradients of a scalar loss whose gradient with respect to
    /// the network output is `grad_output` (same shape as the output).
    pub fn backward(&self, cache: &ForwardCache, grad_output: &DMatrix<f64>) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_output.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if layer.activation == Activation::Tanh {
                delta.zip_apply(&cache.activations[l + 1], |d, y| *d *= 1.0 - y * y);
            }
            grads.weights[l] = &delta * cache.activations[l].transpose();
            grads.biases[l] = delta.column_sum();
            if l > 0 {
                delta = layer.weight.tr_mul(&delta);
            }
        }
        grads
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &self.layers {
            out.push(layer.weight.as_slice());
            out.push(layer.bias.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            out.push(layer.weight.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length mismatch");
        let mut offset = 0;
        for slot in self.param_slices_mut() {
            slot.copy_from_slice(&flat[offset..offset + slot.len()]);
            offset += slot.len();
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            out.write_all(&(layer.weight.nrows() as u32).to_le_bytes())?;
            out.write_all(&(layer.weight.ncols() as u32).to_le_bytes())?;
            out.write_all(&[layer.activation.tag()])?;
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> std::io::Result<Self> {
        let invalid = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
        let n_layers = read_u32(input)? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(invalid("implausible layer count"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = read_u32(input)? as usize;
            let cols = read_u32(input)? as usize;
            if rows == 0 || cols == 0 || rows.saturating_mul(cols) > 1 << 26 {
                return Err(invalid("implausible layer shape"));
            }
            let mut tag = [0u8; 1];
            input.read_exact(&mut tag)?;
            let activation = Activation::from_tag(tag[0]).ok_or_else(|| invalid("unknown activation tag"))?;
            let weight = DMatrix::from_vec(rows, cols, read_f64s(input, rows * cols)?);
            let bias = DVector::from_vec(read_f64s(input, rows)?);
            layers.push(Layer { weight, bias, activation });
        }
        for pair in layers.windows(2) {
            if pair[0].weight.nrows() != pair[1].weight.ncols() {
                return Err(invalid("layer shapes do not chain"));
            }
        }
        Ok(Self { layers })
    }
}

pub(crate) fn read_u32(input: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f64s(input: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_slices(learning_rate: f64, params: &[&[f64]]) -> Self {
        Self::new(learning_rate, &params.iter().map(|p| p.len()).collect::<Vec<_>>())
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.first.len(), "parameter tensor count changed");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[t], &mut self.second[t]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Global L2 norm over a set of gradient tensors.
pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales the gradients in place when their global norm exceeds `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
        let y = net.forward(x);
        0.5 * (y - target).norm_squared()
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for output in [Activation::Identity, Activation::Tanh] {
            let mut net = Mlp::new(&[4, 6, 5, 3], output, 1.0, &mut rng);
            for layer in &mut net.layers {
                layer.bias = DVector::from_fn(layer.bias.len(), |_, _| rng.random_range(-0.3..0.3));
            }
            let x = DMatrix::from_fn(4, 7, |_, _| rng.random_range(-1.0..1.0));
            let target = DMatrix::from_fn(3, 7, |_, _| rng.random_range(-1.0..1.0));
            let cache = net.forward_cached(&x);
            let grads = net.backward(&cache, &(cache.output() - &target));
            let analytic: Vec<f64> = grads.slices().concat();
            let base = net.flat_params();
            let h = 1e-6;
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let mut a = net.clone();
                a.set_flat_params(&plus);
                let mut b = net.clone();
                b.set_flat_params(&minus);
                let fd = (loss(&a, &x, &target) - loss(&b, &x, &target)) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
                assert!(err < 1e-6, "param {i}: fd {fd} vs analytic {}", analytic[i]);
            }
        }
    }

    #[test]
    fn serialization_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[3, 8, 2], Activation::Tanh, 0.5, &mut rng);
        let mut bytes = Vec::new();
        net.write_to(&mut bytes).unwrap();
        let back = Mlp::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, net);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[3, 8, 2], Activation::Tanh, 0.5, &mut rng);
        let mut bytes = Vec::new();
        net.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Mlp::read_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(0.05, &[2]);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut [x.as_mut_slice()], &[g.as_slice()]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn adam_leaves_parameters_alone_on_zero_gradients() {
        let mut x = vec![0.7, -0.1];
        let mut adam = Adam::new(0.1, &[2]);
        adam.step(&mut [x.as_mut_slice()], &[&[0.0, 0.0]]);
        assert_eq!(x, vec![0.7, -0.1]);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut a = vec![3.0, 0.0];
        let mut b = vec![4.0];
        let norm = clip_global_norm(&mut [a.as_mut_slice(), b.as_mut_slice()], 1.0);
        assert_eq!(norm, 5.0);
        assert!((global_norm(&[&a, &b]) - 1.0).abs() < 1e-12);
    }
}
