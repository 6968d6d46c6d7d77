use rand::Rng;
use serde::{Deserialize, Serialize};

use super::UtteranceFeatures;
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Layer sizes of the encoder, independent of the feature dimension.
///
/// Desk-scale defaults; the production-scale model used 768 recurrent units
/// and a 256-unit projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderShape {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        EncoderShape {
            num_layers: 1,
            hidden_dim: 32,
            embed_dim: 16,
        }
    }
}

impl EncoderShape {
    pub fn with_input(self, input_dim: usize) -> EncoderHyper {
        EncoderHyper {
            input_dim,
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
        }
    }
}

/// Full encoder shape including the input feature dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderHyper {
    pub input_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl EncoderHyper {
    pub fn new(input_dim: usize) -> Self {
        EncoderShape::default().with_input(input_dim)
    }

    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_layers == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::config(format!("encoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    fn layer_size(&self, layer: usize) -> usize {
        let h = self.hidden_dim;
        3 * h * (self.layer_input(layer) + h + 1)
    }

    pub fn param_count(&self) -> usize {
        let recurrent: usize = (0..self.num_layers).map(|l| self.layer_size(l)).sum();
        recurrent + self.embed_dim * (self.hidden_dim + 1)
    }

    fn layer_offset(&self, layer: usize) -> usize {
        (0..layer).map(|l| self.layer_size(l)).sum()
    }

    fn projection_offset(&self) -> usize {
        self.layer_offset(self.num_layers)
    }
}

/// Offsets of one recurrent layer inside the flat parameter vector.
///
/// `w` is `3H × in` (update, reset, candidate blocks), `u` is `3H × H`, `b` is `3H`.
#[derive(Clone, Copy)]
struct LayerView {
    input: usize,
    w: usize,
    u: usize,
    b: usize,
}

/// Flat encoder parameters plus the hyperparameters that give them shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    hyper: EncoderHyper,
    values: Vec<f64>,
}

/// Per-frame activations retained by [`EncoderParams::forward`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    frames: usize,
    /// Per layer: hidden states `(F+1) × H` with row 0 the zero initial state.
    hidden: Vec<Vec<f64>>,
    update: Vec<Vec<f64>>,
    reset: Vec<Vec<f64>>,
    candidate: Vec<Vec<f64>>,
    input: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl EncoderParams {
    pub fn zeros(hyper: EncoderHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(EncoderParams {
            hyper,
            values: vec![0.0; hyper.param_count()],
        })
    }

    /// Uniform initialisation in `±1/√fan_in` for every weight and bias.
    pub fn init<R: Rng + ?Sized>(hyper: EncoderHyper, rng: &mut R) -> Result<Self> {
        let mut p = EncoderParams::zeros(hyper)?;
        let h = hyper.hidden_dim;
        for l in 0..hyper.num_layers {
            let v = p.layer(l);
            let bw = 1.0 / (v.input as f64).sqrt();
            let bu = 1.0 / (h as f64).sqrt();
            for x in &mut p.values[v.w..v.u] {
                *x = rng.random_range(-bw..bw);
            }
            for x in &mut p.values[v.u..v.b + 3 * h] {
                *x = rng.random_range(-bu..bu);
            }
        }
        let bp = 1.0 / (h as f64).sqrt();
        let off = hyper.projection_offset();
        for x in &mut p.values[off..] {
            *x = rng.random_range(-bp..bp);
        }
        Ok(p)
    }

    pub fn from_vec(hyper: EncoderHyper, values: Vec<f64>) -> Result<Self> {
        hyper.validate()?;
        if values.len() != hyper.param_count() {
            return Err(Error::shape("EncoderParams::from_vec", hyper.param_count(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("encoder parameters contain non-finite values"));
        }
        Ok(EncoderParams { hyper, values })
    }

    pub fn hyper(&self) -> &EncoderHyper {
        &self.hyper
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn layer(&self, l: usize) -> LayerView {
        let h = self.hyper.hidden_dim;
        let input = self.hyper.layer_input(l);
        let w = self.hyper.layer_offset(l);
        let u = w + 3 * h * input;
        let b = u + 3 * h * h;
        LayerView { input, w, u, b }
    }

    /// Projection weight (`E × H`) and bias offsets.
    fn projection(&self) -> (usize, usize) {
        let off = self.hyper.projection_offset();
        (off, off + self.hyper.embed_dim * self.hyper.hidden_dim)
    }

    fn check_input(&self, u: &UtteranceFeatures) -> Result<()> {
        if u.dim() != self.hyper.input_dim {
            return Err(Error::shape("encode", self.hyper.input_dim, u.dim()));
        }
        Ok(())
    }

    /// Embedding of one utterance: the top layer's last hidden state through
    /// the projection. Not normalised.
    pub fn encode(&self, u: &UtteranceFeatures) -> Result<Vec<f64>> {
        Ok(self.forward(u)?.0)
    }

    pub fn forward(&self, u: &UtteranceFeatures) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(u)?;
        let h = self.hyper.hidden_dim;
        let f = u.frames();
        let p = &self.values;
        let mut cache = ForwardCache {
            frames: f,
            hidden: Vec::with_capacity(self.hyper.num_layers),
            update: Vec::with_capacity(self.hyper.num_layers),
            reset: Vec::with_capacity(self.hyper.num_layers),
            candidate: Vec::with_capacity(self.hyper.num_layers),
            input: u.values().as_slice().to_vec(),
        };
        let mut pre = vec![0.0; 3 * h];
        let mut rh = vec![0.0; h];
        for l in 0..self.hyper.num_layers {
            let v = self.layer(l);
            let mut hs = vec![0.0; (f + 1) * h];
            let mut zs = vec![0.0; f * h];
            let mut rs = vec![0.0; f * h];
            let mut ns = vec![0.0; f * h];
            for t in 0..f {
                let x: &[f64] = if l == 0 {
                    u.frame(t)
                } else {
                    &cache.hidden[l - 1][(t + 1) * h..(t + 2) * h]
                };
                let (prev_hs, next_hs) = hs.split_at_mut((t + 1) * h);
                let h_prev = &prev_hs[t * h..];
                let h_next = &mut next_hs[..h];
                for g in 0..3 * h {
                    let wrow = &p[v.w + g * v.input..v.w + (g + 1) * v.input];
                    let mut a = p[v.b + g];
                    for (wv, xv) in wrow.iter().zip(x) {
                        a += wv * xv;
                    }
                    pre[g] = a;
                }
                for g in 0..2 * h {
                    let urow = &p[v.u + g * h..v.u + (g + 1) * h];
                    let mut a = pre[g];
                    for (uv, hv) in urow.iter().zip(h_prev) {
                        a += uv * hv;
                    }
                    pre[g] = sigmoid(a);
                }
                for q in 0..h {
                    rh[q] = pre[h + q] * h_prev[q];
                }
                for q in 0..h {
                    let g = 2 * h + q;
                    let urow = &p[v.u + g * h..v.u + (g + 1) * h];
                    let mut a = pre[g];
                    for (uv, rv) in urow.iter().zip(&rh) {
                        a += uv * rv;
                    }
                    let n = a.tanh();
                    let z = pre[q];
                    zs[t * h + q] = z;
                    rs[t * h + q] = pre[h + q];
                    ns[t * h + q] = n;
                    h_next[q] = (1.0 - z) * n + z * h_prev[q];
                }
            }
            cache.hidden.push(hs);
            cache.update.push(zs);
            cache.reset.push(rs);
            cache.candidate.push(ns);
        }
        let (pw, pb) = self.projection();
        let top = &cache.hidden[self.hyper.num_layers - 1][f * h..];
        let emb = (0..self.hyper.embed_dim)
            .map(|e| {
                let row = &p[pw + e * h..pw + (e + 1) * h];
                p[pb + e] + row.iter().zip(top).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok((emb, cache))
    }

    /// Accumulates `∂(upstreamᵀ·embedding)/∂params` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let h = self.hyper.hidden_dim;
        let e_dim = self.hyper.embed_dim;
        if upstream.len() != e_dim {
            return Err(Error::shape("EncoderParams::backward", e_dim, upstream.len()));
        }
        if grad.len() != self.values.len() {
            return Err(Error::shape("EncoderParams::backward", self.values.len(), grad.len()));
        }
        let p = &self.values;
        let f = cache.frames;
        let layers = self.hyper.num_layers;

        // projection
        let (pw, pb) = self.projection();
        let top = &cache.hidden[layers - 1][f * h..];
        let mut inject = vec![0.0; f * h];
        for e in 0..e_dim {
            let de = upstream[e];
            if de == 0.0 {
                continue;
            }
            grad[pb + e] += de;
            for q in 0..h {
                grad[pw + e * h + q] += de * top[q];
                inject[(f - 1) * h + q] += de * p[pw + e * h + q];
            }
        }

        let mut da = vec![0.0; 3 * h];
        let mut dh = vec![0.0; h];
        let mut dh_next = vec![0.0; h];
        let mut rh = vec![0.0; h];
        for l in (0..layers).rev() {
            let v = self.layer(l);
            let hs = &cache.hidden[l];
            let zs = &cache.update[l];
            let rs = &cache.reset[l];
            let ns = &cache.candidate[l];
            let mut below = if l > 0 { vec![0.0; f * v.input] } else { Vec::new() };
            dh_next.iter_mut().for_each(|x| *x = 0.0);
            for t in (0..f).rev() {
                let h_prev = &hs[t * h..(t + 1) * h];
                let x: &[f64] = if l == 0 {
                    &cache.input[t * v.input..(t + 1) * v.input]
                } else {
                    &cache.hidden[l - 1][(t + 1) * h..(t + 2) * h]
                };
                for q in 0..h {
                    dh[q] = dh_next[q] + inject[t * h + q];
                }
                // candidate and update gate pre-activations
                for q in 0..h {
                    let z = zs[t * h + q];
                    let n = ns[t * h + q];
                    let r = rs[t * h + q];
                    rh[q] = r * h_prev[q];
                    da[2 * h + q] = dh[q] * (1.0 - z) * (1.0 - n * n);
                    da[q] = dh[q] * (h_prev[q] - n) * z * (1.0 - z);
                    dh_next[q] = dh[q] * z;
                }
                // through U_n (r ⊙ h)
                for q in 0..h {
                    let g = 2 * h + q;
                    let dan = da[g];
                    if dan == 0.0 {
                        continue;
                    }
                    let urow = v.u + g * h;
                    for k in 0..h {
                        grad[urow + k] += dan * rh[k];
                    }
                }
                for k in 0..h {
                    let mut drh = 0.0;
                    for q in 0..h {
                        drh += p[v.u + (2 * h + q) * h + k] * da[2 * h + q];
                    }
                    let r = rs[t * h + k];
                    da[h + k] = drh * h_prev[k] * r * (1.0 - r);
                    dh_next[k] += drh * r;
                }
                // U_z, U_r and hidden-path gradient
                for g in 0..2 * h {
                    let dg = da[g];
                    if dg == 0.0 {
                        continue;
                    }
                    let urow = v.u + g * h;
                    for k in 0..h {
                        grad[urow + k] += dg * h_prev[k];
                        dh_next[k] += p[urow + k] * dg;
                    }
                }
                // input weights, biases and gradient to the layer below
                for g in 0..3 * h {
                    let dg = da[g];
                    grad[v.b + g] += dg;
                    if dg == 0.0 {
                        continue;
                    }
                    let wrow = v.w + g * v.input;
                    for k in 0..v.input {
                        grad[wrow + k] += dg * x[k];
                    }
                    if l > 0 {
                        let dx = &mut below[t * v.input..(t + 1) * v.input];
                        for k in 0..v.input {
                            dx[k] += p[wrow + k] * dg;
                        }
                    }
                }
            }
            if l > 0 {
                inject = below;
            }
        }
        Ok(())
    }

    /// Embeddings of several utterances, one row each.
    pub fn encode_batch(&self, utterances: &[&UtteranceFeatures]) -> Result<Matrix> {
        let mut out = Matrix::zeros(utterances.len(), self.hyper.embed_dim);
        for (i, u) in utterances.iter().enumerate() {
            let e = self.encode(u)?;
            out.row_mut(i).copy_from_slice(&e);
        }
        Ok(out)
    }

    /// Forward pass over all utterances, keeping caches for [`Self::backward_batch`].
    pub fn forward_batch(&self, utterances: &[&UtteranceFeatures]) -> Result<(Matrix, Vec<ForwardCache>)> {
        let mut out = Matrix::zeros(utterances.len(), self.hyper.embed_dim);
        let mut caches = Vec::with_capacity(utterances.len());
        for (i, u) in utterances.iter().enumerate() {
            let (e, c) = self.forward(u)?;
            out.row_mut(i).copy_from_slice(&e);
            caches.push(c);
        }
        Ok((out, caches))
    }

    /// Parameter gradient for one upstream row per cached utterance, summed in order.
    pub fn backward_batch(&self, caches: &[ForwardCache], upstream: &Matrix) -> Result<Vec<f64>> {
        if upstream.rows() != caches.len() {
            return Err(Error::shape("backward_batch", caches.len(), upstream.rows()));
        }
        let mut grad = vec![0.0; self.values.len()];
        for (i, c) in caches.iter().enumerate() {
            let row = upstream.row(i);
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            self.backward(c, row, &mut grad)?;
        }
        Ok(grad)
    }

    /// Gradient of `Σᵢ upstreamᵢ · f(uᵢ)` with respect to the parameters.
    pub fn encode_batch_with_grads(&self, utterances: &[&UtteranceFeatures], upstream: &Matrix) -> Result<Vec<f64>> {
        if upstream.rows() != utterances.len() {
            return Err(Error::shape("encode_batch_with_grads", utterances.len(), upstream.rows()));
        }
        let (_, caches) = self.forward_batch(utterances)?;
        self.backward_batch(&caches, upstream)
    }
}
