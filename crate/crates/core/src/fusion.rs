//! Channel gating, branch fusion and the end-to-end descriptor pipeline.
//!
//! A branch descriptor g is reweighted by a learned gate (W g) .* g — a fully
//! connected layer produces one multiplier per channel, optionally squashed
//! through a sigmoid. Applied per branch this is the local channel gate;
//! applied across the concatenated point+image vector it is the global gate
//! that arbitrates between the modalities. The pipeline assembles:
//! backbone -> (attention-weighted) VLAD per branch -> optional local gate ->
//! concat -> optional global gate -> final unit normalization.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    image_backbone_with_cache, mlp_backward, point_backbone_with_cache, FeatureMap, MlpCache,
    MlpParams,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::scene::Scene;
use crate::vlad::{
    att_vlad_backward, att_vlad_with_cache, soft_assign, soft_assign_backward, spatial_attention,
    spatial_attention_backward, AssignmentMatrix, AttentionMap, GlobalDescriptor, VladCache,
    VladParams,
};
use crate::world::transform::DomainTransform;

/// Parameters of one channel gate over a D-dimensional vector.
#[derive(Debug, Clone)]
pub struct ChannelGateParams {
    /// D x D fully connected gate weights.
    pub weight: Matrix,
    /// Squash the gate through a sigmoid before multiplying.
    pub sigmoid: bool,
}

impl ChannelGateParams {
    pub fn zeros(dim: usize, sigmoid: bool) -> Self {
        ChannelGateParams {
            weight: Matrix::zeros(dim, dim),
            sigmoid,
        }
    }

    /// Sigmoid gates start at zero weight: the gate is then uniformly 0.5,
    /// which cancels in normalization, so a gated pipeline begins exactly at
    /// its ungated parent's output. The literal product gate cannot start
    /// at the identity, so it gets a generic Glorot init instead.
    pub fn init(dim: usize, sigmoid: bool, rng: &mut ChaCha20Rng) -> Self {
        if sigmoid {
            return ChannelGateParams::zeros(dim, true);
        }
        let a = (6.0 / (2 * dim) as f64).sqrt();
        ChannelGateParams {
            weight: Matrix::from_fn(dim, dim, |_, _| crate::rng::uniform(rng, -a, a)),
            sigmoid,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn zeros_like(&self) -> Self {
        ChannelGateParams::zeros(self.dim(), self.sigmoid)
    }

    fn check(&self, g: &[f64]) -> Result<()> {
        if self.weight.rows() != self.weight.cols() {
            return Err(Error::DimMismatch("gate weight must be square".into()));
        }
        if g.len() != self.dim() {
            return Err(Error::DimMismatch(format!(
                "gate dim {} vs input dim {}",
                self.dim(),
                g.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GateCache {
    input: Vec<f64>,
    gate: Vec<f64>,
}

pub(crate) fn gate_forward(g: &[f64], params: &ChannelGateParams) -> Result<(Vec<f64>, GateCache)> {
    params.check(g)?;
    let gate_pre = params.weight.matvec(g)?;
    let gate: Vec<f64> = if params.sigmoid {
        gate_pre.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
    } else {
        gate_pre.clone()
    };
    let out: Vec<f64> = gate.iter().zip(g).map(|(gt, gi)| gt * gi).collect();
    Ok((
        out,
        GateCache {
            input: g.to_vec(),
            gate,
        },
    ))
}

/// Backward through a gate: returns dL/d(input), accumulates dL/d(weight).
pub(crate) fn gate_backward(
    params: &ChannelGateParams,
    cache: &GateCache,
    grad_out: &[f64],
    grad_weight: &mut Matrix,
) -> Result<Vec<f64>> {
    let mut dgate: Vec<f64> = grad_out
        .iter()
        .zip(&cache.input)
        .map(|(go, gi)| go * gi)
        .collect();
    if params.sigmoid {
        for (dv, gt) in dgate.iter_mut().zip(&cache.gate) {
            *dv *= gt * (1.0 - gt);
        }
    }
    grad_weight.add_outer(&dgate, &cache.input);
    let mut dinput = params.weight.matvec_t(&dgate)?;
    for ((di, gt), go) in dinput.iter_mut().zip(&cache.gate).zip(grad_out) {
        *di += gt * go;
    }
    Ok(dinput)
}

/// Per-branch channel gate: output = (W g) .* g.
pub fn local_channel_attention(g: &[f64], params: &ChannelGateParams) -> Result<Vec<f64>> {
    Ok(gate_forward(g, params)?.0)
}

/// Global channel gate over the concatenated multimodal vector; same formula
/// as the local gate.
pub fn global_channel_attention(g_fused: &[f64], params: &ChannelGateParams) -> Result<Vec<f64>> {
    Ok(gate_forward(g_fused, params)?.0)
}

/// Point-branch block first, then the image block.
pub fn concat(gp: &[f64], gi: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(gp.len() + gi.len());
    out.extend_from_slice(gp);
    out.extend_from_slice(gi);
    out
}

/// Aggregation flavor per branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VladFlavor {
    NetVlad,
    AttVlad,
}

/// Point-feature extractor selector. One implementation exists at this
/// scale; the tag keeps the slot open for heavier backbones behind the same
/// interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointBackboneKind {
    #[default]
    PerPointMlp,
}

/// Which branches the pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Fused,
    ImageOnly,
    PointOnly,
}

/// The configuration matrix: four fused variants plus the two single-modality
/// baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Plain VLAD per branch, concat, no global gate.
    #[serde(rename = "pic01")]
    Pic01,
    /// Attention-weighted VLAD per branch, concat, no global gate.
    #[serde(rename = "pic02")]
    Pic02,
    /// Plain VLAD per branch, concat, global channel gate.
    #[serde(rename = "pic03")]
    Pic03,
    /// Attention-weighted VLAD per branch, concat, global channel gate.
    #[serde(rename = "pic04")]
    Pic04,
    #[serde(rename = "image-only")]
    ImageOnly,
    #[serde(rename = "point-only")]
    PointOnly,
}

impl Variant {
    pub const ALL_FUSED: [Variant; 4] =
        [Variant::Pic01, Variant::Pic02, Variant::Pic03, Variant::Pic04];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Pic01 => "pic01",
            Variant::Pic02 => "pic02",
            Variant::Pic03 => "pic03",
            Variant::Pic04 => "pic04",
            Variant::ImageOnly => "image-only",
            Variant::PointOnly => "point-only",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "pic01" => Ok(Variant::Pic01),
            "pic02" => Ok(Variant::Pic02),
            "pic03" => Ok(Variant::Pic03),
            "pic04" => Ok(Variant::Pic04),
            "image-only" => Ok(Variant::ImageOnly),
            "point-only" => Ok(Variant::PointOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected pic01..pic04, image-only, point-only)"
            ))),
        }
    }
}

/// Model dimensions; the small defaults train on one core in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub clusters: usize,
    pub point_feature_dim: usize,
    pub image_feature_dim: usize,
    pub hidden: usize,
    pub cloud_points: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub patch: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            clusters: 8,
            point_feature_dim: 32,
            image_feature_dim: 32,
            hidden: 64,
            cloud_points: 128,
            image_height: 32,
            image_width: 32,
            image_channels: 3,
            patch: 8,
        }
    }
}

impl ModelDims {
    /// Tiny dimensions used by the gradient-certification suite.
    pub fn tiny() -> Self {
        ModelDims {
            clusters: 2,
            point_feature_dim: 4,
            image_feature_dim: 4,
            hidden: 5,
            cloud_points: 6,
            image_height: 4,
            image_width: 4,
            image_channels: 1,
            patch: 2,
        }
    }

    pub fn point_branch_dim(&self) -> usize {
        self.clusters * self.point_feature_dim
    }

    pub fn image_branch_dim(&self) -> usize {
        self.clusters * self.image_feature_dim
    }

    pub fn fused_dim(&self) -> usize {
        self.point_branch_dim() + self.image_branch_dim()
    }

    pub fn patch_input_dim(&self) -> usize {
        self.patch * self.patch * self.image_channels
    }

    pub fn validate(&self) -> Result<()> {
        let any_zero = [
            self.clusters,
            self.point_feature_dim,
            self.image_feature_dim,
            self.hidden,
            self.cloud_points,
            self.image_height,
            self.image_width,
            self.image_channels,
            self.patch,
        ]
        .iter()
        .any(|v| *v == 0);
        if any_zero {
            return Err(Error::InvalidArgument("model dims must be positive".into()));
        }
        if self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch {} must divide image {}x{}",
                self.patch, self.image_height, self.image_width
            )));
        }
        Ok(())
    }
}

/// Full pipeline configuration; encodes exactly one column of the variant
/// matrix plus the dataset-wide knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub modality: Modality,
    pub vlad_flavor: VladFlavor,
    pub point_backbone: PointBackboneKind,
    /// Per-branch channel gate before fusion.
    pub lca_enabled: bool,
    /// Global channel gate after concatenation.
    pub gca_enabled: bool,
    /// Map images toward the day reference color distribution first.
    pub daynight_enabled: bool,
    /// Squash gates through a sigmoid (off = the literal product form).
    pub gate_sigmoid: bool,
    /// L2-normalize every cluster block before concatenation.
    pub intra_norm: bool,
    pub dims: ModelDims,
}

impl PipelineConfig {
    /// Canonical configuration for a variant. The per-branch local gate
    /// defaults to off (it can be enabled through the config); the global
    /// gate defines the gated variants.
    pub fn for_variant(variant: Variant, dims: ModelDims) -> PipelineConfig {
        let (modality, flavor, gca) = match variant {
            Variant::Pic01 => (Modality::Fused, VladFlavor::NetVlad, false),
            Variant::Pic02 => (Modality::Fused, VladFlavor::AttVlad, false),
            Variant::Pic03 => (Modality::Fused, VladFlavor::NetVlad, true),
            Variant::Pic04 => (Modality::Fused, VladFlavor::AttVlad, true),
            Variant::ImageOnly => (Modality::ImageOnly, VladFlavor::NetVlad, false),
            Variant::PointOnly => (Modality::PointOnly, VladFlavor::NetVlad, false),
        };
        PipelineConfig {
            modality,
            vlad_flavor: flavor,
            point_backbone: PointBackboneKind::PerPointMlp,
            lca_enabled: false,
            gca_enabled: gca,
            daynight_enabled: false,
            gate_sigmoid: true,
            intra_norm: false,
            dims,
        }
    }

    pub fn variant(&self) -> Variant {
        match (self.modality, self.vlad_flavor, self.gca_enabled) {
            (Modality::ImageOnly, _, _) => Variant::ImageOnly,
            (Modality::PointOnly, _, _) => Variant::PointOnly,
            (Modality::Fused, VladFlavor::NetVlad, false) => Variant::Pic01,
            (Modality::Fused, VladFlavor::AttVlad, false) => Variant::Pic02,
            (Modality::Fused, VladFlavor::NetVlad, true) => Variant::Pic03,
            (Modality::Fused, VladFlavor::AttVlad, true) => Variant::Pic04,
        }
    }

    pub fn uses_point_branch(&self) -> bool {
        matches!(self.modality, Modality::Fused | Modality::PointOnly)
    }

    pub fn uses_image_branch(&self) -> bool {
        matches!(self.modality, Modality::Fused | Modality::ImageOnly)
    }
}

/// All learnable parameters of a configured pipeline.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub point_mlp: Option<MlpParams>,
    pub image_mlp: Option<MlpParams>,
    pub point_vlad: Option<VladParams>,
    pub image_vlad: Option<VladParams>,
    pub point_gate: Option<ChannelGateParams>,
    pub image_gate: Option<ChannelGateParams>,
    pub fused_gate: Option<ChannelGateParams>,
}

/// Gradients share the parameter layout.
pub type ModelGrads = ModelParams;

impl ModelParams {
    /// Seeded initialization for a config.
    pub fn init(config: &PipelineConfig, seed: u64) -> Result<ModelParams> {
        config.dims.validate()?;
        let d = &config.dims;
        let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::ParamInit, 0);
        let point = config.uses_point_branch();
        let image = config.uses_image_branch();
        let fused = config.modality == Modality::Fused;
        Ok(ModelParams {
            point_mlp: point
                .then(|| MlpParams::glorot(&[3, d.hidden, d.point_feature_dim], &mut rng))
                .transpose()?,
            image_mlp: image
                .then(|| {
                    MlpParams::glorot(&[d.patch_input_dim(), d.hidden, d.image_feature_dim], &mut rng)
                })
                .transpose()?,
            point_vlad: point.then(|| VladParams::init(d.clusters, d.point_feature_dim, &mut rng)),
            image_vlad: image.then(|| VladParams::init(d.clusters, d.image_feature_dim, &mut rng)),
            point_gate: (fused && config.lca_enabled)
                .then(|| ChannelGateParams::init(d.point_branch_dim(), config.gate_sigmoid, &mut rng)),
            image_gate: (fused && config.lca_enabled)
                .then(|| ChannelGateParams::init(d.image_branch_dim(), config.gate_sigmoid, &mut rng)),
            fused_gate: (fused && config.gca_enabled)
                .then(|| ChannelGateParams::init(d.fused_dim(), config.gate_sigmoid, &mut rng)),
        })
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            point_mlp: self.point_mlp.as_ref().map(|m| m.zeros_like()),
            image_mlp: self.image_mlp.as_ref().map(|m| m.zeros_like()),
            point_vlad: self.point_vlad.as_ref().map(|v| v.zeros_like()),
            image_vlad: self.image_vlad.as_ref().map(|v| v.zeros_like()),
            point_gate: self.point_gate.as_ref().map(|g| g.zeros_like()),
            image_gate: self.image_gate.as_ref().map(|g| g.zeros_like()),
            fused_gate: self.fused_gate.as_ref().map(|g| g.zeros_like()),
        }
    }

    /// Named tensors in a stable order: (name, dims, values).
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mlp = |name: &str, m: &Option<MlpParams>, out: &mut Vec<_>| {
            if let Some(m) = m {
                for (k, layer) in m.layers.iter().enumerate() {
                    out.push((
                        format!("{name}.layer{k}.weight"),
                        vec![layer.weight.rows(), layer.weight.cols()],
                        layer.weight.data().to_vec(),
                    ));
                    out.push((
                        format!("{name}.layer{k}.bias"),
                        vec![layer.bias.len()],
                        layer.bias.clone(),
                    ));
                }
            }
        };
        mlp("point_backbone", &self.point_mlp, &mut out);
        mlp("image_backbone", &self.image_mlp, &mut out);
        let vlad = |name: &str, v: &Option<VladParams>, out: &mut Vec<_>| {
            if let Some(v) = v {
                out.push((
                    format!("{name}.centers"),
                    vec![v.centers.rows(), v.centers.cols()],
                    v.centers.data().to_vec(),
                ));
                out.push((
                    format!("{name}.assign_weights"),
                    vec![v.assign_weights.rows(), v.assign_weights.cols()],
                    v.assign_weights.data().to_vec(),
                ));
                out.push((
                    format!("{name}.assign_bias"),
                    vec![v.assign_bias.len()],
                    v.assign_bias.clone(),
                ));
                out.push((
                    format!("{name}.attention_weights"),
                    vec![v.attention_weights.len()],
                    v.attention_weights.clone(),
                ));
                out.push((format!("{name}.attention_bias"), vec![1], vec![v.attention_bias]));
            }
        };
        vlad("point_vlad", &self.point_vlad, &mut out);
        vlad("image_vlad", &self.image_vlad, &mut out);
        let gate = |name: &str, g: &Option<ChannelGateParams>, out: &mut Vec<_>| {
            if let Some(g) = g {
                out.push((
                    format!("{name}.weight"),
                    vec![g.weight.rows(), g.weight.cols()],
                    g.weight.data().to_vec(),
                ));
            }
        };
        gate("point_gate", &self.point_gate, &mut out);
        gate("image_gate", &self.image_gate, &mut out);
        gate("fused_gate", &self.fused_gate, &mut out);
        out
    }

    /// Flatten every parameter into one vector (stable order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.visit(|data| flat.extend_from_slice(data));
        flat
    }

    /// Overwrite parameters from a flat vector produced by [`flatten`]
    /// against the same layout.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0usize;
        let mut fail = false;
        self.visit_mut(|data| {
            if offset + data.len() <= flat.len() {
                data.copy_from_slice(&flat[offset..offset + data.len()]);
            } else {
                fail = true;
            }
            offset += data.len();
        });
        if fail || offset != flat.len() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} values, model expects {}",
                flat.len(),
                offset
            )));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(|data| n += data.len());
        n
    }

    fn visit(&self, mut f: impl FnMut(&[f64])) {
        if let Some(m) = &self.point_mlp {
            for layer in &m.layers {
                f(layer.weight.data());
                f(&layer.bias);
            }
        }
        if let Some(m) = &self.image_mlp {
            for layer in &m.layers {
                f(layer.weight.data());
                f(&layer.bias);
            }
        }
        for v in [&self.point_vlad, &self.image_vlad].into_iter().flatten() {
            f(v.centers.data());
            f(v.assign_weights.data());
            f(&v.assign_bias);
            f(&v.attention_weights);
            f(std::slice::from_ref(&v.attention_bias));
        }
        for g in [&self.point_gate, &self.image_gate, &self.fused_gate]
            .into_iter()
            .flatten()
        {
            f(g.weight.data());
        }
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        if let Some(m) = &mut self.point_mlp {
            for layer in &mut m.layers {
                f(layer.weight.data_mut());
                f(&mut layer.bias);
            }
        }
        if let Some(m) = &mut self.image_mlp {
            for layer in &mut m.layers {
                f(layer.weight.data_mut());
                f(&mut layer.bias);
            }
        }
        for v in [&mut self.point_vlad, &mut self.image_vlad]
            .into_iter()
            .flatten()
        {
            f(v.centers.data_mut());
            f(v.assign_weights.data_mut());
            f(&mut v.assign_bias);
            f(&mut v.attention_weights);
            f(std::slice::from_mut(&mut v.attention_bias));
        }
        for g in [&mut self.point_gate, &mut self.image_gate, &mut self.fused_gate]
            .into_iter()
            .flatten()
        {
            f(g.weight.data_mut());
        }
    }
}

/// Trained model: parameters plus the optional day-night transform.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    pub transform: Option<DomainTransform>,
}

impl Model {
    pub fn new(params: ModelParams) -> Self {
        Model {
            params,
            transform: None,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BranchCache {
    fmap: FeatureMap,
    mlp: MlpCache,
    assign: AssignmentMatrix,
    att: AttentionMap,
    attention_learned: bool,
    vlad: VladCache,
    gate: Option<GateCache>,
}

#[derive(Debug, Clone)]
pub(crate) struct PipelineCache {
    point: Option<BranchCache>,
    image: Option<BranchCache>,
    fused_gate: Option<GateCache>,
    prenorm_unit: Vec<f64>,
    final_norm: f64,
}

impl PipelineCache {
    /// Smallest ReLU pre-activation magnitude across both backbones.
    pub(crate) fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for b in [&self.point, &self.image].into_iter().flatten() {
            m = m.min(b.mlp.kink_margin());
        }
        m
    }
}

fn branch_forward(
    fmap: FeatureMap,
    mlp_cache: MlpCache,
    vlad_params: &VladParams,
    gate_params: Option<&ChannelGateParams>,
    flavor: VladFlavor,
    intra_norm: bool,
) -> Result<(Vec<f64>, BranchCache)> {
    let assign = soft_assign(&fmap, vlad_params)?;
    let (att, attention_learned) = match flavor {
        VladFlavor::AttVlad => (spatial_attention(&fmap, vlad_params)?, true),
        VladFlavor::NetVlad => (AttentionMap::uniform(fmap.locations(), 1.0), false),
    };
    let (desc, vlad_cache) = att_vlad_with_cache(&fmap, &att, &assign, vlad_params, intra_norm)?;
    let mut values = desc.values().to_vec();
    let mut gate_cache = None;
    if let Some(gp) = gate_params {
        let (gated, cache) = gate_forward(&values, gp)?;
        values = gated;
        gate_cache = Some(cache);
    }
    Ok((
        values,
        BranchCache {
            fmap,
            mlp: mlp_cache,
            assign,
            att,
            attention_learned,
            vlad: vlad_cache,
            gate: gate_cache,
        },
    ))
}

/// Compute the scene's global descriptor under `config`.
pub fn forward_pipeline(
    scene: &Scene,
    model: &Model,
    config: &PipelineConfig,
) -> Result<GlobalDescriptor> {
    Ok(forward_pipeline_with_cache(scene, model, config)?.0)
}

pub(crate) fn forward_pipeline_with_cache(
    scene: &Scene,
    model: &Model,
    config: &PipelineConfig,
) -> Result<(GlobalDescriptor, PipelineCache)> {
    let mut point_branch = None;
    let mut image_branch = None;
    let mut point_values: Vec<f64> = Vec::new();
    let mut image_values: Vec<f64> = Vec::new();

    if config.uses_point_branch() {
        let mlp = model
            .params
            .point_mlp
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model lacks point backbone".into()))?;
        let vlad = model
            .params
            .point_vlad
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model lacks point aggregation".into()))?;
        let (fmap, cache) = point_backbone_with_cache(&scene.cloud, mlp)?;
        let (values, branch) = branch_forward(
            fmap,
            cache,
            vlad,
            model.params.point_gate.as_ref().filter(|_| config.lca_enabled),
            config.vlad_flavor,
            config.intra_norm,
        )?;
        point_values = values;
        point_branch = Some(branch);
    }

    if config.uses_image_branch() {
        let mlp = model
            .params
            .image_mlp
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model lacks image backbone".into()))?;
        let vlad = model
            .params
            .image_vlad
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model lacks image aggregation".into()))?;
        let image = if config.daynight_enabled {
            let transform = model.transform.as_ref().ok_or_else(|| {
                Error::InvalidArgument("day-night transform enabled but model has none".into())
            })?;
            transform.apply(&scene.image)?
        } else {
            scene.image.clone()
        };
        let (fmap, cache) = image_backbone_with_cache(&image, mlp, config.dims.patch)?;
        let (values, branch) = branch_forward(
            fmap,
            cache,
            vlad,
            model.params.image_gate.as_ref().filter(|_| config.lca_enabled),
            config.vlad_flavor,
            config.intra_norm,
        )?;
        image_values = values;
        image_branch = Some(branch);
    }

    let mut fused = match config.modality {
        Modality::Fused => concat(&point_values, &image_values),
        Modality::PointOnly => point_values,
        Modality::ImageOnly => image_values,
    };

    let mut fused_gate_cache = None;
    if config.modality == Modality::Fused && config.gca_enabled {
        let gp = model
            .params
            .fused_gate
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model lacks global gate".into()))?;
        let (gated, cache) = gate_forward(&fused, gp)?;
        fused = gated;
        fused_gate_cache = Some(cache);
    }

    let final_norm = linalg::normalize(&mut fused, crate::vlad::NORM_FLOOR, "fused descriptor")?;
    let desc = GlobalDescriptor::from_unit(fused.clone())
        .expect("normalized vector is unit norm");
    Ok((
        desc,
        PipelineCache {
            point: point_branch,
            image: image_branch,
            fused_gate: fused_gate_cache,
            prenorm_unit: fused,
            final_norm,
        },
    ))
}

fn branch_backward(
    branch: &BranchCache,
    vlad_params: &VladParams,
    gate_params: Option<&ChannelGateParams>,
    vlad_grads: &mut VladParams,
    gate_grads: Option<&mut ChannelGateParams>,
    mlp_params: &MlpParams,
    mlp_grads: &mut MlpParams,
    grad_branch: &[f64],
) -> Result<Matrix> {
    let mut upstream = grad_branch.to_vec();
    if let (Some(gp), Some(cache)) = (gate_params, branch.gate.as_ref()) {
        let gg = gate_grads.expect("gate grads present when gate params present");
        upstream = gate_backward(gp, cache, &upstream, &mut gg.weight)?;
    }

    let t = branch.fmap.locations();
    let k = vlad_params.clusters();
    let mut grad_att = vec![0.0; t];
    let mut grad_assign = Matrix::zeros(t, k);
    let mut grad_fmap = Matrix::zeros(t, branch.fmap.dim());
    att_vlad_backward(
        &branch.fmap,
        &branch.att,
        &branch.assign,
        vlad_params,
        &branch.vlad,
        &upstream,
        vlad_grads,
        &mut grad_att,
        &mut grad_assign,
        &mut grad_fmap,
    )?;
    if branch.attention_learned {
        spatial_attention_backward(
            &branch.fmap,
            &branch.att,
            &grad_att,
            vlad_params,
            vlad_grads,
            &mut grad_fmap,
        )?;
    }
    soft_assign_backward(
        &branch.fmap,
        &branch.assign,
        vlad_params,
        &grad_assign,
        vlad_grads,
        &mut grad_fmap,
    )?;
    mlp_backward(mlp_params, &branch.mlp, &grad_fmap, mlp_grads)
}

/// Backward through the whole pipeline; accumulates into `grads`.
///
/// Returns the gradient with respect to the (possibly transformed) input
/// feature rows per branch for diagnostic use.
pub(crate) fn backward_pipeline(
    model: &Model,
    config: &PipelineConfig,
    cache: &PipelineCache,
    grad_desc: &[f64],
    grads: &mut ModelGrads,
) -> Result<()> {
    let mut upstream = linalg::normalize_backward(&cache.prenorm_unit, cache.final_norm, grad_desc);

    if let Some(gate_cache) = &cache.fused_gate {
        let gp = model.params.fused_gate.as_ref().expect("gca params");
        let gg = grads.fused_gate.as_mut().expect("gca grads");
        upstream = gate_backward(gp, gate_cache, &upstream, &mut gg.weight)?;
    }

    let point_dim = cache
        .point
        .as_ref()
        .map(|_| config.dims.point_branch_dim())
        .unwrap_or(0);
    let (point_seg, image_seg) = match config.modality {
        Modality::Fused => upstream.split_at(point_dim),
        Modality::PointOnly => (upstream.as_slice(), &[] as &[f64]),
        Modality::ImageOnly => (&[] as &[f64], upstream.as_slice()),
    };

    if let Some(branch) = &cache.point {
        branch_backward(
            branch,
            model.params.point_vlad.as_ref().expect("point vlad"),
            model.params.point_gate.as_ref().filter(|_| config.lca_enabled),
            grads.point_vlad.as_mut().expect("point vlad grads"),
            grads.point_gate.as_mut(),
            model.params.point_mlp.as_ref().expect("point mlp"),
            grads.point_mlp.as_mut().expect("point mlp grads"),
            point_seg,
        )?;
    }
    if let Some(branch) = &cache.image {
        branch_backward(
            branch,
            model.params.image_vlad.as_ref().expect("image vlad"),
            model.params.image_gate.as_ref().filter(|_| config.lca_enabled),
            grads.image_vlad.as_mut().expect("image vlad grads"),
            grads.image_gate.as_mut(),
            model.params.image_mlp.as_ref().expect("image mlp"),
            grads.image_mlp.as_mut().expect("image mlp grads"),
            image_seg,
        )?;
    }
    Ok(())
}
