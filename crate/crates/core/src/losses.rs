//! Episodic similarity losses over a batch of `N` dialogues × `M` utterances.
//!
//! Every loss returns the per-utterance values `ℓ[i][j]` together with the
//! gradient of each dialogue's summed loss `Σⱼ ℓ[i][j]` with respect to the
//! whole embedding matrix. Keeping the per-dialogue split lets the rejection
//! weights be applied after the fact without recomputing anything.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, norm, Matrix, NORM_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ava,
    Ge2e,
    Aproto,
}

impl LossKind {
    pub fn uses_scale(self) -> bool {
        !matches!(self, LossKind::Ava)
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ava" => Ok(LossKind::Ava),
            "ge2e" => Ok(LossKind::Ge2e),
            "aproto" => Ok(LossKind::Aproto),
            other => Err(Error::config(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Embeddings of an episodic batch; row `i·M + j` holds utterance `j` of dialogue `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    n: usize,
    m: usize,
    embeddings: Matrix,
}

impl EmbeddingBatch {
    pub fn new(n_dialogues: usize, utter_per_dialogue: usize, embeddings: Matrix) -> Result<Self> {
        if n_dialogues < 2 || utter_per_dialogue < 2 {
            return Err(Error::config(format!(
                "episodic batch needs N >= 2 and M >= 2, got N={n_dialogues} M={utter_per_dialogue}"
            )));
        }
        if embeddings.rows() != n_dialogues * utter_per_dialogue {
            return Err(Error::shape(
                "EmbeddingBatch::new",
                n_dialogues * utter_per_dialogue,
                embeddings.rows(),
            ));
        }
        Ok(EmbeddingBatch {
            n: n_dialogues,
            m: utter_per_dialogue,
            embeddings,
        })
    }

    pub fn n_dialogues(&self) -> usize {
        self.n
    }

    pub fn utter_per_dialogue(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    #[inline]
    pub fn index(&self, dialogue: usize, slot: usize) -> usize {
        dialogue * self.m + slot
    }

    /// Inverse of [`Self::index`].
    pub fn position(&self, row: usize) -> (usize, usize) {
        (row / self.m, row % self.m)
    }

    #[inline]
    pub fn get(&self, dialogue: usize, slot: usize) -> &[f64] {
        self.embeddings.row(self.index(dialogue, slot))
    }
}

/// Learnable logit scale `w` and bias `b` for the centroid-based losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossScaleParams {
    pub w: f64,
    pub b: f64,
}

pub const MIN_SCALE: f64 = 1e-6;

impl Default for LossScaleParams {
    fn default() -> Self {
        LossScaleParams { w: 10.0, b: -5.0 }
    }
}

impl LossScaleParams {
    /// Projects `w` back onto `w >= 1e-6`.
    pub fn clamp(&mut self) {
        if !(self.w >= MIN_SCALE) {
            self.w = MIN_SCALE;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScaleGrad {
    pub dw: f64,
    pub db: f64,
}

#[derive(Debug, Clone)]
pub struct PerUtteranceLoss {
    /// `N × M` values `ℓ[i][j]`.
    pub values: Matrix,
    /// `∂(Σᵢⱼ ℓ)/∂x`, `(N·M) × D`.
    pub grad: Matrix,
    /// `∂(Σⱼ ℓ[i][j])/∂x` for each dialogue `i`.
    pub dialogue_grads: Vec<Matrix>,
    /// Per-dialogue `∂(Σⱼ ℓ[i][j])/∂(w, b)`; `None` for the unscaled loss.
    pub scale_grads: Option<Vec<ScaleGrad>>,
    /// Number of terms in each query's softmax denominator, `N × M` (0 for masked rows).
    pub denominator_terms: Vec<usize>,
}

impl PerUtteranceLoss {
    pub fn total(&self) -> f64 {
        self.values.as_slice().iter().sum()
    }

    /// `Σⱼ ℓ[i][j]` for each dialogue.
    pub fn dialogue_sums(&self) -> Vec<f64> {
        (0..self.values.rows())
            .map(|i| self.values.row(i).iter().sum())
            .collect()
    }
}

/// Cosine similarity with the norm guard applied to both arguments.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    dot(x, y) / (norm(x).max(NORM_EPSILON) * norm(y).max(NORM_EPSILON))
}

/// Mean of dialogue `i`'s embeddings excluding slot `j`.
pub fn positive_centroid(batch: &EmbeddingBatch, i: usize, j: usize) -> Result<Vec<f64>> {
    if i >= batch.n || j >= batch.m {
        return Err(Error::shape("positive_centroid", format!("({}, {})", batch.n, batch.m), format!("({i}, {j})")));
    }
    let mut c = vec![0.0; batch.dim()];
    for k in (0..batch.m).filter(|&k| k != j) {
        for (a, b) in c.iter_mut().zip(batch.get(i, k)) {
            *a += b;
        }
    }
    let scale = 1.0 / (batch.m - 1) as f64;
    c.iter_mut().for_each(|v| *v *= scale);
    Ok(c)
}

/// Unit-normalised rows plus the guarded norms they were divided by.
struct Normalized {
    unit: Matrix,
    norms: Vec<f64>,
}

fn normalize(m: &Matrix) -> Normalized {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = unit.row_mut(r);
        let n = norm(row).max(NORM_EPSILON);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Normalized { unit, norms }
}

/// A weighted combination of embedding rows: a single utterance or a centroid.
struct Anchor {
    rows: Vec<(usize, f64)>,
    unit: Vec<f64>,
    norm: f64,
}

impl Anchor {
    fn single(row: usize, nz: &Normalized) -> Self {
        Anchor {
            rows: vec![(row, 1.0)],
            unit: nz.unit.row(row).to_vec(),
            norm: nz.norms[row],
        }
    }

    fn mean(batch: &EmbeddingBatch, rows: Vec<usize>) -> Self {
        let coeff = 1.0 / rows.len() as f64;
        let mut v = vec![0.0; batch.dim()];
        for &r in &rows {
            for (a, b) in v.iter_mut().zip(batch.embeddings.row(r)) {
                *a += coeff * b;
            }
        }
        let n = norm(&v).max(NORM_EPSILON);
        v.iter_mut().for_each(|x| *x /= n);
        Anchor {
            rows: rows.into_iter().map(|r| (r, coeff)).collect(),
            unit: v,
            norm: n,
        }
    }

    /// Adds `g · ∂cos(query, anchor)/∂x` into `out`, where `cos = q̂·â`.
    fn backprop(&self, query: usize, cos: f64, g: f64, nz: &Normalized, out: &mut Matrix) {
        if g == 0.0 {
            return;
        }
        let qn = nz.norms[query];
        let q_hat = nz.unit.row(query);
        {
            let dq = out.row_mut(query);
            for d in 0..dq.len() {
                dq[d] += g * (self.unit[d] - cos * q_hat[d]) / qn;
            }
        }
        for &(r, coeff) in &self.rows {
            let dr = out.row_mut(r);
            let s = g * coeff / self.norm;
            for d in 0..dr.len() {
                dr[d] += s * (q_hat[d] - cos * self.unit[d]);
            }
        }
    }
}

fn accepted_dialogues(batch: &EmbeddingBatch, mask: Option<&[bool]>) -> Result<Vec<bool>> {
    let accept = match mask {
        None => vec![true; batch.n],
        Some(m) if m.len() == batch.n => m.to_vec(),
        Some(m) => return Err(Error::shape("accept mask", batch.n, m.len())),
    };
    let count = accept.iter().filter(|a| **a).count();
    if count < 2 {
        return Err(Error::BatchSkipped { accepted: count });
    }
    Ok(accept)
}

/// Softmax cross-entropy with the positive at index 0.
/// Returns the loss and `∂ℓ/∂logit` for each logit.
fn cross_entropy_first(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let mut g: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    g[0] -= 1.0;
    (lse - logits[0], g)
}

fn empty_result(batch: &EmbeddingBatch, scaled: bool) -> PerUtteranceLoss {
    PerUtteranceLoss {
        values: Matrix::zeros(batch.n, batch.m),
        grad: Matrix::zeros(batch.n * batch.m, batch.dim()),
        dialogue_grads: (0..batch.n)
            .map(|_| Matrix::zeros(batch.n * batch.m, batch.dim()))
            .collect(),
        scale_grads: scaled.then(|| vec![ScaleGrad::default(); batch.n]),
        denominator_terms: vec![0; batch.n * batch.m],
    }
}

fn finish(mut out: PerUtteranceLoss) -> Result<PerUtteranceLoss> {
    for g in &out.dialogue_grads {
        out.grad.add_scaled(g, 1.0)?;
    }
    if !out.values.is_finite() || !out.grad.is_finite() {
        return Err(Error::numeric("loss or gradient is not finite"));
    }
    Ok(out)
}

fn ava_impl(batch: &EmbeddingBatch, mask: Option<&[bool]>) -> Result<PerUtteranceLoss> {
    let accept = accepted_dialogues(batch, mask)?;
    let nz = normalize(&batch.embeddings);
    let mut out = empty_result(batch, false);
    let mut logits = Vec::with_capacity(batch.n * batch.m + 1);
    let mut partners = Vec::with_capacity(batch.n * batch.m);
    for i in (0..batch.n).filter(|&i| accept[i]) {
        for j in 0..batch.m {
            let q = batch.index(i, j);
            let q_hat = nz.unit.row(q);
            let centroid = Anchor::mean(batch, (0..batch.m).filter(|&k| k != j).map(|k| batch.index(i, k)).collect());
            logits.clear();
            partners.clear();
            logits.push(dot(q_hat, &centroid.unit));
            for k in (0..batch.n).filter(|&k| k != i && accept[k]) {
                for l in 0..batch.m {
                    let r = batch.index(k, l);
                    partners.push(r);
                    logits.push(dot(q_hat, nz.unit.row(r)));
                }
            }
            let (loss, g) = cross_entropy_first(&logits);
            out.values.set(i, j, loss);
            out.denominator_terms[q] = logits.len();
            let dg = &mut out.dialogue_grads[i];
            centroid.backprop(q, logits[0], g[0], &nz, dg);
            for (t, &r) in partners.iter().enumerate() {
                Anchor::single(r, &nz).backprop(q, logits[t + 1], g[t + 1], &nz, dg);
            }
        }
    }
    finish(out)
}

/// All-versus-all loss: each utterance against its leave-one-out dialogue
/// centroid (positive) and every individual utterance of the other dialogues.
pub fn ava_loss(batch: &EmbeddingBatch) -> Result<PerUtteranceLoss> {
    ava_impl(batch, None)
}

/// All-versus-all loss with rejected dialogues removed: they contribute no
/// rows and never appear in an accepted query's denominator.
pub fn masked_ava_loss(batch: &EmbeddingBatch, accept_mask: &[bool]) -> Result<PerUtteranceLoss> {
    ava_impl(batch, Some(accept_mask))
}

/// Shared body of the prototype losses; `prototype(k, i, j)` lists the rows
/// averaged into dialogue `k`'s prototype for query `(i, j)`.
fn prototype_loss<P>(
    batch: &EmbeddingBatch,
    scale: &LossScaleParams,
    mask: Option<&[bool]>,
    prototype: P,
) -> Result<PerUtteranceLoss>
where
    P: Fn(usize, usize, usize) -> Vec<usize>,
{
    let accept = accepted_dialogues(batch, mask)?;
    let nz = normalize(&batch.embeddings);
    let mut out = empty_result(batch, true);
    let mut cosines = Vec::with_capacity(batch.n);
    let mut logits = Vec::with_capacity(batch.n);
    let mut anchors = Vec::with_capacity(batch.n);
    for i in (0..batch.n).filter(|&i| accept[i]) {
        for j in 0..batch.m {
            let q = batch.index(i, j);
            let q_hat = nz.unit.row(q);
            anchors.clear();
            // own dialogue first so the positive logit is index 0
            anchors.push(Anchor::mean(batch, prototype(i, i, j)));
            for k in (0..batch.n).filter(|&k| k != i && accept[k]) {
                anchors.push(Anchor::mean(batch, prototype(k, i, j)));
            }
            cosines.clear();
            cosines.extend(anchors.iter().map(|a| dot(q_hat, &a.unit)));
            logits.clear();
            logits.extend(cosines.iter().map(|c| scale.w * c + scale.b));
            let (loss, g) = cross_entropy_first(&logits);
            out.values.set(i, j, loss);
            out.denominator_terms[q] = logits.len();
            let sg = &mut out.scale_grads.as_mut().expect("scaled")[i];
            for (gk, ck) in g.iter().zip(&cosines) {
                sg.dw += gk * ck;
                sg.db += gk;
            }
            let dg = &mut out.dialogue_grads[i];
            for (a, (gk, ck)) in anchors.iter().zip(g.iter().zip(&cosines)) {
                a.backprop(q, *ck, scale.w * gk, &nz, dg);
            }
        }
    }
    finish(out)
}

fn ge2e_impl(batch: &EmbeddingBatch, scale: &LossScaleParams, mask: Option<&[bool]>) -> Result<PerUtteranceLoss> {
    let m = batch.m;
    prototype_loss(batch, scale, mask, |k, i, j| {
        if k == i {
            (0..m).filter(|&l| l != j).map(|l| k * m + l).collect()
        } else {
            (0..m).map(|l| k * m + l).collect()
        }
    })
}

fn aproto_impl(batch: &EmbeddingBatch, scale: &LossScaleParams, mask: Option<&[bool]>) -> Result<PerUtteranceLoss> {
    let m = batch.m;
    prototype_loss(batch, scale, mask, |k, _i, j| {
        (0..m).filter(|&l| l != j).map(|l| k * m + l).collect()
    })
}

/// GE2E softmax loss: logits `w·cos(x, cₖ) + b` against every dialogue
/// centroid, the query's own centroid leaving the query out.
pub fn ge2e_loss(batch: &EmbeddingBatch, scale: &LossScaleParams) -> Result<PerUtteranceLoss> {
    ge2e_impl(batch, scale, None)
}

/// Angular prototypical loss. For query slot `j`, every dialogue's prototype
/// is the mean of its utterances in the other slots, so the query set and the
/// support set never overlap.
pub fn aproto_loss(batch: &EmbeddingBatch, scale: &LossScaleParams) -> Result<PerUtteranceLoss> {
    aproto_impl(batch, scale, None)
}

/// Dispatches on `kind`, optionally dropping rejected dialogues entirely.
pub fn compute_loss(
    kind: LossKind,
    batch: &EmbeddingBatch,
    scale: &LossScaleParams,
    accept_mask: Option<&[bool]>,
) -> Result<PerUtteranceLoss> {
    match kind {
        LossKind::Ava => ava_impl(batch, accept_mask),
        LossKind::Ge2e => ge2e_impl(batch, scale, accept_mask),
        LossKind::Aproto => aproto_impl(batch, scale, accept_mask),
    }
}
