//! Small dense tanh networks with hand-written reverse mode.
//!
//! A [`FeedForwardNet`] is a chain of affine layers, `tanh` on every hidden
//! layer and a configurable head on the last one. Two gradient flavors are
//! provided, both driven by the same backward pass:
//!
//! - [`FeedForwardNet::param_gradient`]: d<upstream, net(x)>/d(params), used
//!   by the trainers;
//! - [`FeedForwardNet::input_jacobian`]: d net(x)/dx, one reverse pass per
//!   output, used to craft attacks.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`.

use rand::Rng;

use crate::{Error, Result};

/// Transform applied to the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// Scalar value estimate.
    Value,
    /// Unnormalized action logits; softmax is applied by the caller.
    Logits,
    /// Gaussian mean, unbounded.
    GaussianMean,
    /// `tanh` on the output, bounded to [-1, 1].
    Tanh,
}

impl OutputHead {
    fn tag(self) -> u8 {
        match self {
            OutputHead::Value => 0,
            OutputHead::Logits => 1,
            OutputHead::GaussianMean => 2,
            OutputHead::Tanh => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(OutputHead::Value),
            1 => Some(OutputHead::Logits),
            2 => Some(OutputHead::GaussianMean),
            3 => Some(OutputHead::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    head: OutputHead,
}

/// Parameter-shaped gradient of a [`FeedForwardNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-layer activations recorded by a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache always holds the input")
    }
}

impl FeedForwardNet {
    /// Scaled uniform init: variance `gain^2 / fan_in` on hidden layers and
    /// `output_gain^2 / fan_in` on the last layer, zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        head: OutputHead,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let n_layers = layer_sizes.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let gain = if l + 1 == n_layers { output_gain } else { 1.0 };
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            head,
        })
    }

    /// Builds a net from explicit parameters.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        head: OutputHead,
    ) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let n_layers = layer_sizes.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::Shape(format!(
                "expected {n_layers} layers, got {} weight and {} bias arrays",
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..n_layers {
            let (i, o) = (layer_sizes[l], layer_sizes[l + 1]);
            if weights[l].len() != i * o || biases[l].len() != o {
                return Err(Error::Shape(format!(
                    "layer {l}: expected {o}x{i} weights and {o} biases"
                )));
            }
        }
        let net = Self {
            layer_sizes,
            weights,
            biases,
            head,
        };
        if !net.is_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|p| p.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, net expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.activations.pop().unwrap())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let n_layers = self.weights.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());
        for l in 0..n_layers {
            let input = &activations[l];
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.weights[l];
            let mut out = self.biases[l].clone();
            for (o, z) in out.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *z += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            let last = l + 1 == n_layers;
            if !last || self.head == OutputHead::Tanh {
                out.iter_mut().for_each(|z| *z = z.tanh());
            }
            debug_assert_eq!(out.len(), n_out);
            activations.push(out);
        }
        Ok(ForwardCache { activations })
    }

    /// Reverse pass from `upstream = dL/d(output)`.
    ///
    /// Accumulates parameter gradients into `grad` when given and returns
    /// `dL/dx`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        mut grad: Option<&mut Gradient>,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream has length {}, net outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let n_layers = self.weights.len();
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let out = &cache.activations[l + 1];
            let last = l + 1 == n_layers;
            if !last || self.head == OutputHead::Tanh {
                for (d, y) in delta.iter_mut().zip(out) {
                    *d *= 1.0 - y * y;
                }
            }
            let input = &cache.activations[l];
            let n_in = self.layer_sizes[l];
            let w = &self.weights[l];
            if let Some(g) = grad.as_deref_mut() {
                let gw = &mut g.weights[l];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * n_in..(o + 1) * n_in];
                    for (gr, xi) in row.iter_mut().zip(input) {
                        *gr += d * xi;
                    }
                }
                for (gb, d) in g.biases[l].iter_mut().zip(&delta) {
                    *gb += d;
                }
            }
            let mut next = vec![0.0; n_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for (nx, wi) in next.iter_mut().zip(row) {
                    *nx += d * wi;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// `k x d` Jacobian of the outputs with respect to the input.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let cache = self.forward_cached(x)?;
        let k = self.output_dim();
        let mut unit = vec![0.0; k];
        let mut rows = Vec::with_capacity(k);
        for j in 0..k {
            unit[j] = 1.0;
            rows.push(self.backward(&cache, &unit, None)?);
            unit[j] = 0.0;
        }
        Ok(rows)
    }

    /// Gradient of `<upstream, net(x)>` with respect to every parameter.
    pub fn param_gradient(&self, x: &[f64], upstream: &[f64]) -> Result<Gradient> {
        let cache = self.forward_cached(x)?;
        let mut grad = Gradient::zeros_like(self);
        self.backward(&cache, upstream, Some(&mut grad))?;
        Ok(grad)
    }

    /// Flat view of every parameter, weights of each layer then its biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }

    pub fn params_flat_mut(&mut self) -> Vec<&mut f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            flat.extend(w.iter_mut());
            flat.extend(b.iter_mut());
        }
        flat
    }

    const MAGIC: &'static [u8; 4] = b"FFN\0";
    const VERSION: u32 = 1;

    /// Versioned little-endian record: magic, version, head tag, layer
    /// sizes, then per layer the row-major weights followed by biases.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_params());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.push(self.head.tag());
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for p in self.params_flat() {
            out.extend_from_slice(&p.to_bits().to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes); returns the net and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != Self::MAGIC {
            return Err(Error::Checkpoint("bad network magic".into()));
        }
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported network version {version}")));
        }
        let head = OutputHead::from_tag(r.u8()?)
            .ok_or_else(|| Error::Checkpoint("unknown output head".into()))?;
        let n = r.u32()? as usize;
        let sizes = (0..n).map(|_| r.u32().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        validate_sizes(&sizes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (i, o) = (sizes[l], sizes[l + 1]);
            weights.push((0..i * o).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            biases.push((0..o).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        let net = Self::from_parts(sizes, weights, biases, head)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok((net, r.pos))
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
        return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
    }
    Ok(())
}

impl Gradient {
    pub fn zeros_like(net: &FeedForwardNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|g| *g *= s);
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| *g == 0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| w.iter().chain(b))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-softmax, stable for large logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated record".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity2() -> FeedForwardNet {
        FeedForwardNet::from_parts(
            vec![2, 2],
            vec![vec![1.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0, 0.0]],
            OutputHead::Value,
        )
        .unwrap()
    }

    fn random_net(rng: &mut ChaCha8Rng) -> FeedForwardNet {
        let mut net = FeedForwardNet::new(&[4, 8, 3], OutputHead::Logits, 1.0, rng).unwrap();
        for b in net.biases_mut() {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        net
    }

    // Plain layer-by-layer evaluation, written without the cache machinery.
    fn reference_forward(net: &FeedForwardNet, x: &[f64]) -> Vec<f64> {
        let sizes = net.layer_sizes();
        let mut h = x.to_vec();
        for l in 0..sizes.len() - 1 {
            let mut z = vec![0.0; sizes[l + 1]];
            for o in 0..sizes[l + 1] {
                let mut acc = net.biases()[l][o];
                for i in 0..sizes[l] {
                    acc += net.weights()[l][o * sizes[l] + i] * h[i];
                }
                z[o] = if l + 2 < sizes.len() { acc.tanh() } else { acc };
            }
            h = z;
        }
        h
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = FeedForwardNet::from_parts(
            vec![3, 4, 2],
            vec![vec![0.0; 12], vec![0.0; 8]],
            vec![vec![0.0; 4], vec![0.0; 2]],
            OutputHead::Logits,
        )
        .unwrap();
        assert_eq!(net.forward(&[0.4, -1.0, 0.2]).unwrap(), vec![0.0, 0.0]);
        let jac = net.input_jacobian(&[0.4, -1.0, 0.2]).unwrap();
        assert!(jac.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let net = identity2();
        assert_eq!(net.forward(&[0.3, -0.5]).unwrap(), vec![0.3, -0.5]);
        let jac = net.input_jacobian(&[0.9, 0.1]).unwrap();
        assert_eq!(jac, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn linear_jacobian_is_weight_matrix() {
        let w = vec![0.5, -2.0, 3.0, 1.5, 0.25, -0.75];
        let net = FeedForwardNet::from_parts(
            vec![3, 2],
            vec![w.clone()],
            vec![vec![0.1, -0.2]],
            OutputHead::Value,
        )
        .unwrap();
        let jac = net.input_jacobian(&[0.2, 0.7, -0.4]).unwrap();
        assert_eq!(jac[0], w[..3]);
        assert_eq!(jac[1], w[3..]);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let net = random_net(&mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = net.forward(&x).unwrap();
            let want = reference_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let net = identity2();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(net.param_gradient(&[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_net(&mut rng);
        let g = net.param_gradient(&[0.1, 0.2, 0.3, 0.4], &[0.0; 3]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn linear_param_gradient() {
        let net = identity2();
        let x = [0.3, -0.5];
        let g = net.param_gradient(&x, &[0.0, 1.0]).unwrap();
        assert_eq!(g.weights[0], vec![0.0, 0.0, 0.3, -0.5]);
        assert_eq!(g.biases[0], vec![0.0, 1.0]);
    }

    #[test]
    fn softmax_values() {
        let p = softmax(&[0.0; 5]);
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] >= 0.0 && p[1] < 1e-300);
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (g, w) in p.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((g - w).abs() < 1e-5);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = random_net(&mut rng);
        let bytes = net.to_bytes();
        let (back, used) = FeedForwardNet::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, net);
        assert_eq!(back.to_bytes(), bytes);
        assert!(FeedForwardNet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn init_output_gain_shrinks_last_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = FeedForwardNet::new(&[14, 64, 64, 5], OutputHead::Logits, 0.01, &mut rng).unwrap();
        let bound = 0.01 * (3.0f64 / 64.0).sqrt();
        assert!(net.weights()[2].iter().all(|w| w.abs() <= bound));
        assert!(net.biases().iter().flatten().all(|b| *b == 0.0));
    }
}
