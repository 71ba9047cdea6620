//! Soft assignment, spatial attention and VLAD aggregation.
//!
//! The aggregation layer clusters the t local features into K learnable
//! centers by softmax soft assignment, accumulates per-cluster residuals, and
//! concatenates the (optionally per-cluster normalized) residual blocks into
//! one descriptor that is finally scaled to unit L2 norm. The
//! attention-weighted variant multiplies every feature's residual
//! contribution by a per-location scalar learned as a 1x1 convolution over
//! the feature map followed by a sigmoid.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::linalg::{self, dot, Matrix};
use rand_chacha::ChaCha20Rng;

/// Norm floor below which a vector is considered a zero descriptor.
pub const NORM_FLOOR: f64 = 1e-12;

/// Parameters of one aggregation layer over D-dimensional features.
#[derive(Debug, Clone)]
pub struct VladParams {
    /// K x D cluster centers.
    pub centers: Matrix,
    /// K x D soft-assignment weights (one row per cluster).
    pub assign_weights: Matrix,
    /// K soft-assignment biases.
    pub assign_bias: Vec<f64>,
    /// D attention weights (the 1x1 convolution over feature channels).
    pub attention_weights: Vec<f64>,
    /// Attention bias.
    pub attention_bias: f64,
}

impl VladParams {
    pub fn clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn zeros(clusters: usize, dim: usize) -> Self {
        VladParams {
            centers: Matrix::zeros(clusters, dim),
            assign_weights: Matrix::zeros(clusters, dim),
            assign_bias: vec![0.0; clusters],
            attention_weights: vec![0.0; dim],
            attention_bias: 0.0,
        }
    }

    /// Seeded init: centers and assignment weights Glorot-uniform, attention
    /// weights at zero with a high bias. The initial attention map is then
    /// uniform (the constant cancels in normalization, so the weighted layer
    /// starts exactly at the plain layer's output) and sits on the flat side
    /// of the sigmoid, where locations are only suppressed on accumulated
    /// evidence rather than by early gradient noise.
    pub fn init(clusters: usize, dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let a = (6.0 / (clusters + dim) as f64).sqrt();
        VladParams {
            centers: Matrix::from_fn(clusters, dim, |_, _| crate::rng::uniform(rng, -a, a)),
            assign_weights: Matrix::from_fn(clusters, dim, |_, _| {
                crate::rng::uniform(rng, -a, a)
            }),
            assign_bias: vec![0.0; clusters],
            attention_weights: vec![0.0; dim],
            attention_bias: 2.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        VladParams::zeros(self.clusters(), self.dim())
    }

    /// Centers, assignment weights, assignment bias, attention weights,
    /// attention bias, in that order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.centers.data());
        out.extend_from_slice(self.assign_weights.data());
        out.extend_from_slice(&self.assign_bias);
        out.extend_from_slice(&self.attention_weights);
        out.push(self.attention_bias);
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let need = self.centers.data().len()
            + self.assign_weights.data().len()
            + self.assign_bias.len()
            + self.attention_weights.len()
            + 1;
        if flat.len() != need {
            return Err(Error::DimMismatch(format!(
                "aggregation expects {need} values, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let c = self.centers.data_mut();
        c.copy_from_slice(&flat[offset..offset + c.len()]);
        offset += c.len();
        let w = self.assign_weights.data_mut();
        w.copy_from_slice(&flat[offset..offset + w.len()]);
        offset += w.len();
        let nb = self.assign_bias.len();
        self.assign_bias.copy_from_slice(&flat[offset..offset + nb]);
        offset += nb;
        let na = self.attention_weights.len();
        self.attention_weights
            .copy_from_slice(&flat[offset..offset + na]);
        offset += na;
        self.attention_bias = flat[offset];
        Ok(())
    }

    fn check_dim(&self, fmap: &FeatureMap) -> Result<()> {
        if fmap.dim() != self.dim() {
            return Err(Error::DimMismatch(format!(
                "feature dim {} vs aggregation dim {}",
                fmap.dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Gradients with the same shape as [`VladParams`].
pub type VladGrads = VladParams;

/// Per-location attention weights.
///
/// [`spatial_attention`] produces sigmoid outputs in (0, 1); the aggregation
/// itself accepts any finite non-negative weights (an all-zero map is the
/// canonical way to hit the zero-descriptor error).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(Vec<f64>);

impl AttentionMap {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("attention map is empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "attention weights must be finite and non-negative".into(),
            ));
        }
        Ok(AttentionMap(weights))
    }

    pub fn uniform(t: usize, value: f64) -> Self {
        AttentionMap(vec![value; t])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// t x K soft-assignment matrix; every row is non-negative and sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix(Matrix);

impl AssignmentMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        for l in 0..m.rows() {
            let row = m.row(l);
            if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "assignment row {l} has negative or non-finite entries"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "assignment row {l} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(AssignmentMatrix(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn locations(&self) -> usize {
        self.0.rows()
    }

    pub fn clusters(&self) -> usize {
        self.0.cols()
    }
}

/// Unit-L2-norm global descriptor; the retrieval key.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor(Vec<f64>);

impl GlobalDescriptor {
    /// Wrap a vector that is already unit norm (within 1e-9).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let n = linalg::l2_norm(&values);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "descriptor norm {n} is not 1 within 1e-9"
            )));
        }
        Ok(GlobalDescriptor(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Softmax soft assignment of every feature row to the K clusters.
pub fn soft_assign(fmap: &FeatureMap, params: &VladParams) -> Result<AssignmentMatrix> {
    params.check_dim(fmap)?;
    let t = fmap.locations();
    let k = params.clusters();
    let mut m = Matrix::zeros(t, k);
    for l in 0..t {
        let f = fmap.row(l);
        let mut logits = params.assign_weights.matvec(f)?;
        for (z, b) in logits.iter_mut().zip(&params.assign_bias) {
            *z += b;
        }
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
        let mut sum = 0.0;
        for z in logits.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        for (slot, z) in m.row_mut(l).iter_mut().zip(&logits) {
            *slot = z / sum;
        }
    }
    AssignmentMatrix::new(m)
}

/// Backward through the soft assignment.
///
/// `grad_assign` is dL/d(assignment). Accumulates into `grads` and adds the
/// feature-map contribution into `grad_fmap`.
pub(crate) fn soft_assign_backward(
    fmap: &FeatureMap,
    assign: &AssignmentMatrix,
    params: &VladParams,
    grad_assign: &Matrix,
    grads: &mut VladGrads,
    grad_fmap: &mut Matrix,
) -> Result<()> {
    let t = fmap.locations();
    let k = params.clusters();
    for l in 0..t {
        let a = assign.matrix().row(l);
        let g = grad_assign.row(l);
        let inner = dot(a, g);
        // dz = a .* (g - <a, g>) per softmax row.
        let dz: Vec<f64> = a.iter().zip(g).map(|(ai, gi)| ai * (gi - inner)).collect();
        let f = fmap.row(l);
        for kk in 0..k {
            grads.assign_bias[kk] += dz[kk];
        }
        grads.assign_weights.add_outer(&dz, f);
        linalg::axpy(1.0, &params.assign_weights.matvec_t(&dz)?, grad_fmap.row_mut(l));
    }
    Ok(())
}

/// Per-location attention weight: sigmoid of a 1x1 convolution over channels.
pub fn spatial_attention(fmap: &FeatureMap, params: &VladParams) -> Result<AttentionMap> {
    params.check_dim(fmap)?;
    let weights = (0..fmap.locations())
        .map(|l| sigmoid(dot(params.attention_weights.as_slice(), fmap.row(l)) + params.attention_bias))
        .collect();
    AttentionMap::new(weights)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Backward through the spatial attention. `grad_att[l]` is dL/d(weight l).
pub(crate) fn spatial_attention_backward(
    fmap: &FeatureMap,
    att: &AttentionMap,
    grad_att: &[f64],
    params: &VladParams,
    grads: &mut VladGrads,
    grad_fmap: &mut Matrix,
) -> Result<()> {
    for l in 0..fmap.locations() {
        let s = att.weights()[l];
        let dpre = grad_att[l] * s * (1.0 - s);
        grads.attention_bias += dpre;
        linalg::axpy(dpre, fmap.row(l), &mut grads.attention_weights);
        linalg::axpy(dpre, &params.attention_weights, grad_fmap.row_mut(l));
    }
    Ok(())
}

/// Intermediates of one aggregation, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct VladCache {
    /// K x D residual blocks before any normalization.
    pub blocks_raw: Matrix,
    /// Per-block norms (only when intra-normalization is on).
    pub block_norms: Option<Vec<f64>>,
    /// Concatenated vector just before the final normalization.
    pub concat_unit_blocks: Vec<f64>,
    /// Norm removed by the final normalization.
    pub final_norm: f64,
    pub intra_norm: bool,
}

/// Attention-weighted VLAD: V_k = sum_l att_l * assign_lk * (f_l - c_k),
/// per-cluster normalization when `intra_norm`, concatenation, then unit L2.
pub fn att_vlad(
    fmap: &FeatureMap,
    att: &AttentionMap,
    assign: &AssignmentMatrix,
    params: &VladParams,
    intra_norm: bool,
) -> Result<GlobalDescriptor> {
    Ok(att_vlad_with_cache(fmap, att, assign, params, intra_norm)?.0)
}

pub(crate) fn att_vlad_with_cache(
    fmap: &FeatureMap,
    att: &AttentionMap,
    assign: &AssignmentMatrix,
    params: &VladParams,
    intra_norm: bool,
) -> Result<(GlobalDescriptor, VladCache)> {
    params.check_dim(fmap)?;
    let t = fmap.locations();
    let k = params.clusters();
    let d = params.dim();
    if att.len() != t {
        return Err(Error::DimMismatch(format!(
            "attention length {} vs {} locations",
            att.len(),
            t
        )));
    }
    if assign.locations() != t || assign.clusters() != k {
        return Err(Error::DimMismatch(format!(
            "assignment {}x{} vs {} locations, {} clusters",
            assign.locations(),
            assign.clusters(),
            t,
            k
        )));
    }

    let mut blocks = Matrix::zeros(k, d);
    for l in 0..t {
        let f = fmap.row(l);
        let s = att.weights()[l];
        let a = assign.matrix().row(l);
        for kk in 0..k {
            let w = s * a[kk];
            if w == 0.0 {
                continue;
            }
            let c = params.centers.row(kk);
            let row = blocks.row_mut(kk);
            for j in 0..d {
                row[j] += w * (f[j] - c[j]);
            }
        }
    }
    let blocks_raw = blocks.clone();

    let mut block_norms = None;
    if intra_norm {
        let mut norms = Vec::with_capacity(k);
        for kk in 0..k {
            let norm = linalg::normalize(blocks.row_mut(kk), NORM_FLOOR, &format!("cluster {kk}"))?;
            norms.push(norm);
        }
        block_norms = Some(norms);
    }

    let concat_unit_blocks: Vec<f64> = blocks.data().to_vec();
    let mut values = concat_unit_blocks.clone();
    let final_norm = linalg::normalize(&mut values, NORM_FLOOR, "descriptor")?;
    let desc = GlobalDescriptor(values);
    Ok((
        desc,
        VladCache {
            blocks_raw,
            block_norms,
            concat_unit_blocks,
            final_norm,
            intra_norm,
        },
    ))
}

/// Plain VLAD: identical to [`att_vlad`] with every attention weight at 1.
pub fn net_vlad(
    fmap: &FeatureMap,
    assign: &AssignmentMatrix,
    params: &VladParams,
    intra_norm: bool,
) -> Result<GlobalDescriptor> {
    let att = AttentionMap::uniform(fmap.locations(), 1.0);
    att_vlad(fmap, &att, assign, params, intra_norm)
}

/// Backward through the aggregation. `grad_desc` is dL/d(descriptor).
///
/// Adds dL/d(attention) into `grad_att`, dL/d(assignment) into `grad_assign`,
/// dL/d(features) into `grad_fmap` and dL/d(centers) into `grads.centers`.
pub(crate) fn att_vlad_backward(
    fmap: &FeatureMap,
    att: &AttentionMap,
    assign: &AssignmentMatrix,
    params: &VladParams,
    cache: &VladCache,
    grad_desc: &[f64],
    grads: &mut VladGrads,
    grad_att: &mut [f64],
    grad_assign: &mut Matrix,
    grad_fmap: &mut Matrix,
) -> Result<()> {
    let t = fmap.locations();
    let k = params.clusters();
    let d = params.dim();

    // Final normalization.
    let unit: Vec<f64> = cache
        .concat_unit_blocks
        .iter()
        .map(|v| v / cache.final_norm)
        .collect();
    let grad_concat = linalg::normalize_backward(&unit, cache.final_norm, grad_desc);

    // Per-cluster normalization (identity when intra_norm is off).
    let mut grad_blocks = Matrix::zeros(k, d);
    if cache.intra_norm {
        let norms = cache.block_norms.as_ref().expect("intra norms cached");
        for kk in 0..k {
            let seg = &grad_concat[kk * d..(kk + 1) * d];
            let unit_block: Vec<f64> = cache.blocks_raw.row(kk).iter().map(|v| v / norms[kk]).collect();
            let db = linalg::normalize_backward(&unit_block, norms[kk], seg);
            grad_blocks.row_mut(kk).copy_from_slice(&db);
        }
    } else {
        grad_blocks.data_mut().copy_from_slice(&grad_concat);
    }

    // Core sum: V_k = sum_l s_l a_lk (f_l - c_k).
    for l in 0..t {
        let f = fmap.row(l);
        let s = att.weights()[l];
        let a = assign.matrix().row(l);
        let mut ds = 0.0;
        for kk in 0..k {
            let c = params.centers.row(kk);
            let gv = grad_blocks.row(kk);
            let mut resid_dot = 0.0;
            for j in 0..d {
                resid_dot += (f[j] - c[j]) * gv[j];
            }
            ds += a[kk] * resid_dot;
            *grad_assign.at_mut(l, kk) += s * resid_dot;
            let w = s * a[kk];
            let gf = grad_fmap.row_mut(l);
            for j in 0..d {
                gf[j] += w * gv[j];
            }
        }
        grad_att[l] += ds;
    }
    // Centers: dV_k/dc_k = -(sum_l s_l a_lk) I.
    for kk in 0..k {
        let mut mass = 0.0;
        for l in 0..t {
            mass += att.weights()[l] * assign.matrix().at(l, kk);
        }
        let gv = grad_blocks.row(kk);
        let gc = grads.centers.row_mut(kk);
        for j in 0..d {
            gc[j] -= mass * gv[j];
        }
    }
    Ok(())
}
