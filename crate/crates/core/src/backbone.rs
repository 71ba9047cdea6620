//! Local-feature backbones.
//!
//! Two small MLP extractors stand in for the full-size networks usually used
//! in this pipeline, with the same interface: a point cloud maps to one
//! feature row per point (shared per-point MLP, so the map is exactly
//! permutation-equivariant), an image maps to one feature row per patch.
//! Both are differentiable in their parameters and their inputs; the backward
//! passes here are certified against central finite differences by the
//! gradient suite.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::uniform;
use crate::scene::{Image, PointCloud};

/// t x D matrix of local features (one row per point or patch).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Matrix);

impl FeatureMap {
    pub fn locations(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, l: usize) -> &[f64] {
        self.0.row(l)
    }
}

/// One fully connected layer, `weight` stored out x in.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseLayer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out)); zero bias.
    pub fn glorot(out_dim: usize, in_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        DenseLayer {
            weight: Matrix::from_fn(out_dim, in_dim, |_, _| uniform(rng, -a, a)),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// A stack of dense layers with `max(0, .)` between them (not after the last).
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("mlp needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[1].in_dim() != w[0].out_dim() {
                return Err(Error::DimMismatch(format!(
                    "mlp layers do not chain: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(MlpParams { layers })
    }

    /// Glorot-initialized `in -> hidden -> out` stack.
    pub fn glorot(dims: &[usize], rng: &mut ChaCha20Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("mlp needs at least two dims".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::glorot(w[1], w[0], rng))
            .collect();
        MlpParams::new(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.out_dim(), l.in_dim()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weight.data_mut();
            let need = w.len() + layer.bias.len();
            if offset + need > flat.len() {
                return Err(Error::DimMismatch("flat vector too short for mlp".into()));
            }
            w.copy_from_slice(&flat[offset..offset + w.len()]);
            offset += w.len();
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        if offset != flat.len() {
            return Err(Error::DimMismatch("flat vector too long for mlp".into()));
        }
        Ok(())
    }
}

/// Forward intermediates for one batch of rows, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `inputs[k]` is the t x in_k input to layer k (post-activation of k-1).
    inputs: Vec<Matrix>,
    /// `preacts[k]` is the t x out_k pre-activation output of layer k.
    preacts: Vec<Matrix>,
}

impl MlpCache {
    /// Smallest |pre-activation| feeding a ReLU; gradcheck rejects points
    /// sitting on the kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        // The last layer is linear; only hidden layers pass through max(0, .).
        for pre in &self.preacts[..self.preacts.len().saturating_sub(1)] {
            for v in pre.data() {
                margin = margin.min(v.abs());
            }
        }
        margin
    }
}

/// Gradients with the same shape as [`MlpParams`].
pub type MlpGrads = MlpParams;

/// Apply the MLP to every row of `rows` (t x in_dim).
pub fn mlp_forward(params: &MlpParams, rows: &Matrix) -> Result<(Matrix, MlpCache)> {
    if rows.cols() != params.in_dim() {
        return Err(Error::DimMismatch(format!(
            "mlp expects input width {}, got {}",
            params.in_dim(),
            rows.cols()
        )));
    }
    let t = rows.rows();
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut preacts = Vec::with_capacity(params.layers.len());
    let mut current = rows.clone();
    for (k, layer) in params.layers.iter().enumerate() {
        let mut pre = Matrix::zeros(t, layer.out_dim());
        for l in 0..t {
            let mut y = layer.weight.matvec(current.row(l))?;
            for (yi, bi) in y.iter_mut().zip(&layer.bias) {
                *yi += bi;
            }
            pre.row_mut(l).copy_from_slice(&y);
        }
        inputs.push(current);
        let last = k + 1 == params.layers.len();
        current = if last {
            pre.clone()
        } else {
            let mut act = pre.clone();
            for v in act.data_mut() {
                *v = v.max(0.0);
            }
            act
        };
        preacts.push(pre);
    }
    Ok((current, MlpCache { inputs, preacts }))
}

/// Backward through the MLP: `grad_out` is dL/d(output rows). Accumulates
/// parameter gradients into `grads` and returns dL/d(input rows).
pub fn mlp_backward(
    params: &MlpParams,
    cache: &MlpCache,
    grad_out: &Matrix,
    grads: &mut MlpGrads,
) -> Result<Matrix> {
    let t = grad_out.rows();
    let mut upstream = grad_out.clone();
    for (k, layer) in params.layers.iter().enumerate().rev() {
        let last = k + 1 == params.layers.len();
        // Through the activation (identity on the last layer).
        let mut dpre = upstream;
        if !last {
            for (dv, pv) in dpre.data_mut().iter_mut().zip(cache.preacts[k].data()) {
                if *pv <= 0.0 {
                    *dv = 0.0;
                }
            }
        }
        let mut dinput = Matrix::zeros(t, layer.in_dim());
        let g = &mut grads.layers[k];
        for l in 0..t {
            let d = dpre.row(l);
            g.weight.add_outer(d, cache.inputs[k].row(l));
            for (bi, di) in g.bias.iter_mut().zip(d) {
                *bi += di;
            }
            dinput.row_mut(l).copy_from_slice(&layer.weight.matvec_t(d)?);
        }
        upstream = dinput;
    }
    Ok(upstream)
}

/// Per-point features: row l of the result depends only on point l.
pub fn point_backbone(cloud: &PointCloud, params: &MlpParams) -> Result<FeatureMap> {
    Ok(point_backbone_with_cache(cloud, params)?.0)
}

pub(crate) fn point_backbone_with_cache(
    cloud: &PointCloud,
    params: &MlpParams,
) -> Result<(FeatureMap, MlpCache)> {
    if params.in_dim() != 3 {
        return Err(Error::DimMismatch(format!(
            "point backbone needs input width 3, got {}",
            params.in_dim()
        )));
    }
    let rows = Matrix::from_fn(cloud.len(), 3, |i, j| cloud.points()[i][j]);
    let (out, cache) = mlp_forward(params, &rows)?;
    Ok((FeatureMap(out), cache))
}

/// Per-patch features: the image is cut into `patch` x `patch` tiles
/// (row-major over tiles), each flattened row-major over (row, col, channel)
/// and passed through the MLP.
pub fn image_backbone(image: &Image, params: &MlpParams, patch: usize) -> Result<FeatureMap> {
    Ok(image_backbone_with_cache(image, params, patch)?.0)
}

pub(crate) fn image_backbone_with_cache(
    image: &Image,
    params: &MlpParams,
    patch: usize,
) -> Result<(FeatureMap, MlpCache)> {
    if patch == 0 || image.height() % patch != 0 || image.width() % patch != 0 {
        return Err(Error::DimMismatch(format!(
            "patch {} must divide image {}x{}",
            patch,
            image.height(),
            image.width()
        )));
    }
    let expected = patch * patch * image.channels();
    if params.in_dim() != expected {
        return Err(Error::DimMismatch(format!(
            "image backbone needs input width {expected}, got {}",
            params.in_dim()
        )));
    }
    let rows = patches_to_rows(image, patch);
    let (out, cache) = mlp_forward(params, &rows)?;
    Ok((FeatureMap(out), cache))
}

pub(crate) fn patches_to_rows(image: &Image, patch: usize) -> Matrix {
    let tiles_y = image.height() / patch;
    let tiles_x = image.width() / patch;
    let width = patch * patch * image.channels();
    Matrix::from_fn(tiles_y * tiles_x, width, |tile, k| {
        let ty = tile / tiles_x;
        let tx = tile % tiles_x;
        let c = k % image.channels();
        let within = k / image.channels();
        let pr = within / patch;
        let pc = within % patch;
        image.at(ty * patch + pr, tx * patch + pc, c)
    })
}

/// Scatter per-patch input-row gradients back onto image pixels
/// (for input-gradient checks).
pub(crate) fn rows_to_image_grad(grad_rows: &Matrix, image: &Image, patch: usize) -> Vec<f64> {
    let tiles_x = image.width() / patch;
    let mut grad = vec![0.0; image.height() * image.width() * image.channels()];
    for tile in 0..grad_rows.rows() {
        let ty = tile / tiles_x;
        let tx = tile % tiles_x;
        for k in 0..grad_rows.cols() {
            let c = k % image.channels();
            let within = k / image.channels();
            let pr = within / patch;
            let pc = within % patch;
            let row = ty * patch + pr;
            let col = tx * patch + pc;
            grad[(row * image.width() + col) * image.channels() + c] += grad_rows.at(tile, k);
        }
    }
    grad
}
