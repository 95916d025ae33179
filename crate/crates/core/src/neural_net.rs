//! Fully-connected Q-network with hand-written backprop and Adam.
//!
//! Parameters live in one flat vector, layer by layer: weights row-major
//! (`rows = fan_out`, `cols = fan_in`), then biases. The weight file uses the
//! same order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::trading_env::{Normalizer, CHANNELS};

pub const DEFAULT_HIDDEN: usize = 50;
pub const OUTPUTS: usize = 2;

pub const WEIGHT_MAGIC: &[u8; 8] = b"XRLQNET1";
const MAGIC_PREFIX: &[u8; 7] = b"XRLQNET";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    fn len(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Same layout as [`QNetwork`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros_like(net: &QNetwork) -> Self {
        Gradients(vec![0.0; net.params.len()])
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }
}

fn offsets_for(shapes: &[LayerShape]) -> Vec<usize> {
    shapes
        .iter()
        .scan(0, |acc, s| {
            let off = *acc;
            *acc += s.len();
            Some(off)
        })
        .collect()
}

impl QNetwork {
    /// `input_dim -> hidden -> hidden -> 2`, Glorot-uniform weights, zero biases.
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        let shapes = vec![
            LayerShape {
                rows: hidden,
                cols: input_dim,
            },
            LayerShape {
                rows: hidden,
                cols: hidden,
            },
            LayerShape {
                rows: OUTPUTS,
                cols: hidden,
            },
        ];
        let mut net = Self::zeros(shapes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.shapes.len() {
            let s = net.shapes[l];
            let bound = Self::init_bound(s);
            let off = net.offsets[l];
            for w in &mut net.params[off..off + s.rows * s.cols] {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    /// Glorot-uniform half-width for a layer.
    pub fn init_bound(shape: LayerShape) -> f64 {
        (6.0 / (shape.cols + shape.rows) as f64).sqrt()
    }

    /// All-zero network with arbitrary layer shapes ending in two outputs.
    pub fn zeros(shapes: Vec<LayerShape>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in shapes.windows(2) {
            if pair[0].rows != pair[1].cols {
                return Err(Error::Dimension {
                    expected: pair[0].rows,
                    found: pair[1].cols,
                });
            }
        }
        let last = shapes[shapes.len() - 1];
        if last.rows != OUTPUTS {
            return Err(Error::Dimension {
                expected: OUTPUTS,
                found: last.rows,
            });
        }
        if shapes.iter().any(|s| s.rows == 0 || s.cols == 0) {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        let offsets = offsets_for(&shapes);
        let total = shapes.iter().map(LayerShape::len).sum();
        Ok(Self {
            shapes,
            offsets,
            params: vec![0.0; total],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].cols
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weight(&self, layer: usize, row: usize, col: usize) -> f64 {
        let s = self.shapes[layer];
        self.params[self.offsets[layer] + row * s.cols + col]
    }

    pub fn weight_mut(&mut self, layer: usize, row: usize, col: usize) -> &mut f64 {
        let s = self.shapes[layer];
        &mut self.params[self.offsets[layer] + row * s.cols + col]
    }

    pub fn bias(&self, layer: usize, row: usize) -> f64 {
        let s = self.shapes[layer];
        self.params[self.offsets[layer] + s.rows * s.cols + row]
    }

    pub fn bias_mut(&mut self, layer: usize, row: usize) -> &mut f64 {
        let s = self.shapes[layer];
        &mut self.params[self.offsets[layer] + s.rows * s.cols + row]
    }

    /// Flat index range of a layer's weights and biases.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let off = self.offsets[layer];
        off..off + self.shapes[layer].len()
    }

    pub fn expect_input_dim(&self, expected: usize) -> Result<()> {
        if self.input_dim() == expected {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected,
                found: self.input_dim(),
            })
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "observation contains a non-finite value".into(),
            ));
        }
        Ok(())
    }

    fn affine(&self, layer: usize, input: &[f64], out: &mut Vec<f64>) {
        let s = self.shapes[layer];
        let off = self.offsets[layer];
        let (w, b) = self.params[off..off + s.len()].split_at(s.rows * s.cols);
        out.clear();
        out.extend(
            w.chunks_exact(s.cols)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()),
        );
    }

    /// `(Q(s, sell), Q(s, buy))`.
    pub fn forward(&self, x: &[f64]) -> Result<[f64; OUTPUTS]> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> [f64; OUTPUTS] {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.shapes.len() - 1;
        for l in 0..=last {
            self.affine(l, &cur, &mut next);
            if l < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        [cur[0], cur[1]]
    }

    /// Gradient of `(Q(s, action) - target)^2`; the other output head gets no error.
    pub fn backward(&self, x: &[f64], action: usize, target: f64) -> Result<Gradients> {
        self.check_input(x)?;
        if action >= OUTPUTS {
            return Err(Error::Usage(format!("action index {action} out of range")));
        }
        if !target.is_finite() {
            return Err(Error::Numeric("non-finite regression target".into()));
        }
        let last = self.shapes.len() - 1;
        // activations[l] is the input to layer l
        let mut activations = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.shapes.len());
        for l in 0..=last {
            let mut z = Vec::new();
            self.affine(l, &activations[l], &mut z);
            let a = if l < last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            activations.push(a);
        }
        let q = &activations[last + 1];
        let mut delta = vec![0.0; OUTPUTS];
        delta[action] = 2.0 * (q[action] - target);

        let mut grads = Gradients::zeros_like(self);
        for l in (0..=last).rev() {
            let s = self.shapes[l];
            let off = self.offsets[l];
            let input = &activations[l];
            {
                let g = &mut grads.0[off..off + s.len()];
                let (gw, gb) = g.split_at_mut(s.rows * s.cols);
                for (r, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    for (gwc, xc) in gw[r * s.cols..(r + 1) * s.cols].iter_mut().zip(input) {
                        *gwc = d * xc;
                    }
                    gb[r] = *d;
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; s.cols];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &self.params[off + r * s.cols..off + (r + 1) * s.cols];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            for (p, z) in prev.iter_mut().zip(&pre[l - 1]) {
                if *z <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok(grads)
    }

    /// Independent deep copy, used to refresh the target network.
    pub fn copy_parameters(&self) -> Self {
        self.clone()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.005;

    pub fn new(net: &QNetwork, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; net.params.len()],
            v: vec![0.0; net.params.len()],
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, net: &mut QNetwork, grads: &Gradients) -> Result<()> {
        if grads.0.len() != net.params.len() || self.m.len() != net.params.len() {
            return Err(Error::Dimension {
                expected: net.params.len(),
                found: grads.0.len(),
            });
        }
        if grads.0.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in net
            .params
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Serializes the network and its observation scaling.
pub fn save_weights(net: &QNetwork, normalizer: &Normalizer) -> Vec<u8> {
    let mut out =
        Vec::with_capacity(8 + 4 + net.shapes.len() * 8 + (net.params.len() + 2 * CHANNELS) * 8);
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&(net.shapes.len() as u32).to_le_bytes());
    for s in &net.shapes {
        out.extend_from_slice(&(s.rows as u32).to_le_bytes());
        out.extend_from_slice(&(s.cols as u32).to_le_bytes());
    }
    for p in &net.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for c in 0..CHANNELS {
        out.extend_from_slice(&normalizer.min[c].to_le_bytes());
        out.extend_from_slice(&normalizer.max[c].to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end
            .ok_or_else(|| Error::Format(format!("weight file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn load_weights(bytes: &[u8]) -> Result<(QNetwork, Normalizer)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8)?;
    if &magic[..7] != MAGIC_PREFIX {
        return Err(Error::Format(
            "not a Q-network weight file (bad magic)".into(),
        ));
    }
    if magic != WEIGHT_MAGIC {
        return Err(Error::Format(format!(
            "unsupported weight file version {:?}",
            magic[7] as char
        )));
    }
    let layers = cur.u32()?;
    if layers == 0 || layers > 64 {
        return Err(Error::Format(format!("implausible layer count {layers}")));
    }
    let mut shapes = Vec::with_capacity(layers);
    for _ in 0..layers {
        let rows = cur.u32()?;
        let cols = cur.u32()?;
        shapes.push(LayerShape { rows, cols });
    }
    let total: usize = shapes.iter().map(LayerShape::len).sum();
    if total.saturating_mul(8) > bytes.len() {
        return Err(Error::Format(
            "weight file truncated in parameter block".into(),
        ));
    }
    let mut net =
        QNetwork::zeros(shapes).map_err(|e| Error::Format(format!("bad layer shapes: {e}")))?;
    for p in net.params.iter_mut() {
        *p = cur.f64()?;
    }
    let mut normalizer = Normalizer {
        min: [0.0; CHANNELS],
        max: [0.0; CHANNELS],
    };
    for c in 0..CHANNELS {
        normalizer.min[c] = cur.f64()?;
        normalizer.max[c] = cur.f64()?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after weight file",
            bytes.len() - cur.pos
        )));
    }
    Ok((net, normalizer))
}
