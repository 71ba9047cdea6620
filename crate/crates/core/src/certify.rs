//! Gradient certification suite.
//!
//! Every hand-derived backward pass is checked against central finite
//! differences on small seeded instances, with respect to parameters and
//! inputs alike. Instances that land too close to a non-smooth point (a ReLU
//! kink, a hinge corner, a max/min tie) are rejected and redrawn, so a
//! failure always means a wrong gradient rather than an unlucky draw.

use rand_chacha::ChaCha20Rng;

use crate::backbone::{
    image_backbone_with_cache, mlp_backward, point_backbone_with_cache, rows_to_image_grad,
    FeatureMap, MlpParams,
};
use crate::error::{Error, Result};
use crate::fusion::{
    backward_pipeline, forward_pipeline_with_cache, gate_backward, gate_forward,
    ChannelGateParams, Model, ModelDims, ModelParams, PipelineConfig, Variant,
};
use crate::linalg::Matrix;
use crate::rng::{stream_rng, uniform, Stream};
use crate::scene::{GeoCoordinate, Image, PointCloud, Scene, Timestamp};
use crate::train::gradcheck::gradcheck;
use crate::train::loss::{lazy_quadruplet_loss_backward, lazy_quadruplet_loss_detailed};
use crate::vlad::{
    att_vlad_backward, att_vlad_with_cache, soft_assign, soft_assign_backward, spatial_attention,
    spatial_attention_backward, VladParams,
};

/// Reject instances closer than this to a kink.
const KINK_MARGIN: f64 = 1e-3;
/// Redraw attempts per seed before giving up.
const MAX_REDRAWS: u64 = 60;

/// Result of certifying one operation.
#[derive(Debug, Clone)]
pub struct OpGradReport {
    pub op: &'static str,
    pub seeds_checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Full suite result.
#[derive(Debug, Clone)]
pub struct GradCertification {
    pub tolerance: f64,
    pub step: f64,
    pub ops: Vec<OpGradReport>,
}

impl GradCertification {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    /// One line per operation.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for op in &self.ops {
            out.push_str(&format!(
                "{:<24} seeds={} max_rel_err={:.3e} {}\n",
                op.op,
                op.seeds_checked,
                op.max_rel_err,
                if op.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Run the suite: every differentiable operation at `h`, `tolerance`, over
/// `n_seeds` seeded instances each.
pub fn certify_gradients(
    dims: &ModelDims,
    n_seeds: usize,
    h: f64,
    tolerance: f64,
) -> Result<GradCertification> {
    dims.validate()?;
    type Check = fn(&ModelDims, u64, f64) -> Result<f64>;
    let checks: [(&'static str, Check); 9] = [
        ("point_backbone", check_point_backbone),
        ("image_backbone", check_image_backbone),
        ("soft_assign", check_soft_assign),
        ("spatial_attention", check_spatial_attention),
        ("att_vlad", check_att_vlad),
        ("local_channel_attention", check_local_gate),
        ("global_channel_attention", check_global_gate),
        ("lazy_quadruplet_loss", check_loss),
        ("full_pipeline", check_full_pipeline),
    ];
    let mut ops = Vec::with_capacity(checks.len());
    for (name, check) in checks {
        let mut max_rel = 0.0f64;
        for seed in 0..n_seeds as u64 {
            let rel = check(dims, seed, h)?;
            max_rel = max_rel.max(rel);
        }
        ops.push(OpGradReport {
            op: name,
            seeds_checked: n_seeds,
            max_rel_err: max_rel,
            passed: max_rel <= tolerance,
        });
    }
    Ok(GradCertification {
        tolerance,
        step: h,
        ops,
    })
}

fn probe_matrix(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
        sign * uniform(rng, 0.5, 1.5)
    })
}

fn probe_vec(n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    probe_matrix(1, n, rng).data().to_vec()
}

use rand::Rng as _;

fn weighted_sum(values: &[f64], probe: &[f64]) -> f64 {
    values.iter().zip(probe).map(|(v, p)| v * p).sum()
}

fn check_point_backbone(dims: &ModelDims, seed: u64, h: f64) -> Result<f64> {
    for attempt in 0..MAX_REDRAWS {
        let mut rng = stream_rng(seed + 7919 * attempt, Stream::GradCheck, 1);
        let params = MlpParams::glorot(&[3, dims.hidden, dims.point_feature_dim], &mut rng)?;
        let t = dims.cloud_points;
        let points: Vec<[f64; 3]> = (0..t)
            .map(|_| {
                [
                    uniform(&mut rng, -1.0, 1.0),
                    uniform(&mut rng, -1.0, 1.0),
                    uniform(&mut rng, -1.0, 1.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(points.clone())?;
        let probe = probe_matrix(t, dims.point_feature_dim, &mut rng);

        let (_, cache) = point_backbone_with_cache(&cloud, &params)?;
        if cache.kink_margin() < KINK_MARGIN {
            continue;
        }
        let mut grads = params.zeros_like();
        let grad_points = mlp_backward(&params, &cache, &probe, &mut grads)?;

        let mut analytic = grads.flatten();
        analytic.extend_from_slice(grad_points.data());
        let mut x = params.flatten();
        x.extend(points.iter().flatten());

        let n_params = params.flatten().len();
        let f = |x: &[f64]| -> Result<f64> {
            let mut p = params.clone();
            p.unflatten(&x[..n_params])?;
            let pts: Vec<[f64; 3]> = x[n_params..]
                .chunks(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            let (fmap, _) = point_backbone_with_cache(&PointCloud::new(pts)?, &p)?;
            Ok(weighted_sum(fmap.0.data(), probe.data()))
        };
        return gradcheck(f, &analytic, &x, h);
    }
    Err(Error::GradCheckFailed(
        "point_backbone: no instance cleared the kink margin".into(),
    ))
}

fn check_image_backbone(dims: &ModelDims, seed: u64, h: f64) -> Result<f64> {
    for attempt in 0..MAX_REDRAWS {
        let mut rng = stream_rng(seed + 7919 * attempt, Stream::GradCheck, 2);
        let params = MlpParams::glorot(
            &[dims.patch_input_dim(), dims.hidden, dims.image_feature_dim],
            &mut rng,
        )?;
        let n = dims.image_height * dims.image_width * dims.image_channels;
        // Keep pixels inside (h, 1 - h) so the probes stay valid images.
        let pixels: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.1, 0.9)).collect();
        let image = Image::new(
            dims.image_height,
            dims.image_width,
            dims.image_channels,
            pixels.clone(),
        )?;
        let t = (dims.image_height / dims.patch) * (dims.image_width / dims.patch);
        let probe = probe_matrix(t, dims.image_feature_dim, &mut rng);

        let (_, cache) = image_backbone_with_cache(&image, &params, dims.patch)?;
        if cache.kink_margin() < KINK_MARGIN {
            continue;
        }
        let mut grads = params.zeros_like();
        let grad_rows = mlp_backward(&params, &cache, &probe, &mut grads)?;
        let grad_pixels = rows_to_image_grad(&grad_rows, &image, dims.patch);

        let mut analytic = grads.flatten();
        analytic.extend_from_slice(&grad_pixels);
        let mut x = params.flatten();
        x.extend_from_slice(&pixels);

        let n_params = params.flatten().len();
        let f = |x: &[f64]| -> Result<f64> {
            let mut p = params.clone();
            p.unflatten(&x[..n_params])?;
            let img = Image::new(
                dims.image_height,
                dims.image_width,
                dims.image_channels,
                x[n_params..].to_vec(),
            )?;
            let (fmap, _) = image_backbone_with_cache(&img, &p, dims.patch)?;
            Ok(weighted_sum(fmap.0.data(), probe.data()))
        };
        return gradcheck(f, &analytic, &x, h);
    }
    Err(Error::GradCheckFailed(
        "image_backbone: no instance cleared the kink margin".into(),
    ))
}

fn random_fmap(t: usize, d: usize, rng: &mut ChaCha20Rng) -> FeatureMap {
    FeatureMap(Matrix::from_fn(t, d, |_, _| uniform(rng, -1.0, 1.0)))
}

fn random_vlad_params(k: usize, d: usize, rng: &mut ChaCha20Rng) -> VladParams {
    let mut p = VladParams::init(k, d, rng);
    p.attention_weights = (0..d).map(|_| uniform(rng, -0.8, 0.8)).collect();
    p.attention_bias = uniform(rng, -0.3, 0.3);
    for b in p.assign_bias.iter_mut() {
        *b = uniform(rng, -0.3, 0.3);
    }
    p
}

fn check_soft_assign(dims: &ModelDims, seed: u64, h: f64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::GradCheck, 3);
    let (t, d, k) = (dims.cloud_points, dims.point_feature_dim, dims.clusters);
    let params = random_vlad_params(k, d, &mut rng);
    let fmap = random_fmap(t, d, &mut rng);
    let probe = probe_matrix(t, k, &mut rng);

    let assign = soft_assign(&fmap, &params)?;
    let mut grads = params.zeros_like();
    let mut grad_fmap = Matrix::zeros(t, d);
    soft_assign_backward(&fmap, &assign, &params, &probe, &mut grads, &mut grad_fmap)?;

    let mut analytic = Vec::new();
    analytic.extend_from_slice(grads.assign_weights.data());
    analytic.extend_from_slice(&grads.assign_bias);
    analytic.extend_from_slice(grad_fmap.data());
    let mut x = Vec::new();
    x.extend_from_slice(params.assign_weights.data());
    x.extend_from_slice(&params.assign_bias);
    x.extend_from_slice(fmap.0.data());

    let f = |x: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        let nw = p.assign_weights.data().len();
        p.assign_weights = Matrix::from_vec(k, d, x[..nw].to_vec())?;
        p.assign_bias = x[nw..nw + k].to_vec();
        let fm = FeatureMap(Matrix::from_vec(t, d, x[nw + k..].to_vec())?);
        let a = soft_assign(&fm, &p)?;
        Ok(weighted_sum(a.matrix().data(), probe.data()))
    };
    gradcheck(f, &analytic, &x, h)
}

fn check_spatial_attention(dims: &ModelDims, seed: u64, h: f64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::GradCheck, 4);
    let (t, d) = (dims.cloud_points, dims.point_feature_dim);
    let params = random_vlad_params(dims.clusters, d, &mut rng);
    let fmap = random_fmap(t, d, &mut rng);
    let probe = probe_vec(t, &mut rng);

    let att = spatial_attention(&fmap, &params)?;
    let mut grads = params.zeros_like();
    let mut grad_fmap = Matrix::zeros(t, d);
    spatial_attention_backward(&fmap, &att, &probe, &params, &mut grads, &mut grad_fmap)?;

    let mut analytic = Vec::new();
    analytic.extend_from_slice(&grads.attention_weights);
    analytic.push(grads.attention_bias);
    analytic.extend_from_slice(grad_fmap.data());
    let mut x = Vec::new();
    x.extend_from_slice(&params.attention_weights);
    x.push(params.attention_bias);
    x.extend_from_slice(fmap.0.data());

    let f = |x: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.attention_weights = x[..d].to_vec();
        p.attention_bias = x[d];
        let fm = FeatureMap(Matrix::from_vec(t, d, x[d + 1..].to_vec())?);
        let a = spatial_attention(&fm, &p)?;
        Ok(weighted_sum(a.weights(), &probe))
    };
    gradcheck(f, &analytic, &x, h)
}

/// The aggregation composed with its two learned inputs (soft assignment and
/// spatial attention), checked with respect to every parameter and the
/// feature map.
fn check_att_vlad(dims: &ModelDims, seed: u64, h: f64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::GradCheck, 5);
    let (t, d, k) = (dims.cloud_points, dims.point_feature_dim, dims.clusters);
    let intra_norm = seed % 2 == 0;
    let params = random_vlad_params(k, d, &mut rng);
    let fmap = random_fmap(t, d, &mut rng);
    let probe = probe_vec(k * d, &mut rng);

    let forward = |params: &VladParams, fmap: &FeatureMap| -> Result<f64> {
        let assign = soft_assign(fmap, params)?;
        let att = spatial_attention(fmap, params)?;
        let (desc, _) = att_vlad_with_cache(fmap, &att, &assign, params, intra_norm)?;
        Ok(weighted_sum(desc.values(), &probe))
    };

    // Analytic gradient via the composed backward passes.
    let assign = soft_assign(&fmap, &params)?;
    let att = spatial_attention(&fmap, &params)?;
    let (_, cache) = att_vlad_with_cache(&fmap, &att, &assign, &params, intra_norm)?;
    let mut grads = params.zeros_like();
    let mut grad_att = vec![0.0; t];
    let mut grad_assign = Matrix::zeros(t, k);
    let mut grad_fmap = Matrix::zeros(t, d);
    att_vlad_backward(
        &fmap,
        &att,
        &assign,
        &params,
        &cache,
        &probe,
        &mut grads,
        &mut grad_att,
        &mut grad_assign,
        &mut grad_fmap,
    )?;
    spatial_attention_backward(&fmap, &att, &grad_att, &params, &mut grads, &mut grad_fmap)?;
    soft_assign_backward(&fmap, &assign, &params, &grad_assign, &mut grads, &mut grad_fmap)?;

    let mut analytic = grads.flatten();
    analytic.extend_from_slice(grad_fmap.data());
    let mut x = params.flatten();
    x.extend_from_slice(fmap.0.data());

    let n_params = params.flatten().len();
    let f = |x: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.unflatten(&x[..n_params])?;
        let fm = FeatureMap(Matrix::from_vec(t, d, x[n_params..].to_vec())?);
        forward(&p, &fm)
    };
    gradcheck(f, &analytic, &x, h)
}

fn check_gate(dim: usize, sigmoid: bool, stream_index: u64, seed: u64, h: f64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::GradCheck, stream_index);
    let params = ChannelGateParams::init(dim, sigmoid, &mut rng);
    let input: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let probe = probe_vec(dim, &mut rng);

    let (_, cache) = gate_forward(&input, &params)?;
    let mut grad_weight = Matrix::zeros(dim, dim);
    let grad_input = gate_backward(&params, &cache, &probe, &mut grad_weight)?;

    let mut analytic = grad_weight.data().to_vec();
    analytic.extend_from_slice(&grad_input);
    let mut x = params.weight.data().to_vec();
    x.extend_from_slice(&input);

    let f = |x: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.weight = Matrix::from_vec(dim, dim, x[..dim * dim].to_vec())?;
        let (out, _) = gate_forward(&x[dim * dim..], &p)?;
        Ok(weighted_sum(&out, &probe))
    };
    gradcheck(f, &analytic, &x, h)
}

fn check_local_gate(dims: &ModelDims, seed: u64, h: f64) -> Result<f64> {
    check_gate(dims.point_branch_dim(), false, 6, seed, h)
}

fn check_global_gate(dims: &ModelDims, seed: u64, h: f64) -> Result<f64> {
    check_gate(dims.fused_dim(), true, 7, seed, h)
}

fn check_loss(dims: &ModelDims, seed: u64, h: f64) -> Result<f64> {
    let dim = dims.fused_dim();
    let (n_pos, n_neg) = (2usize, 3usize);
    for attempt in 0..MAX_REDRAWS {
        let mut rng = stream_rng(seed + 7919 * attempt, Stream::GradCheck, 8);
        let draw = |rng: &mut ChaCha20Rng| -> Vec<f64> {
            (0..dim).map(|_| uniform(rng, -1.0, 1.0)).collect()
        };
        let anchor = draw(&mut rng);
        let decoy = draw(&mut rng);
        let positives: Vec<Vec<f64>> = (0..n_pos).map(|_| draw(&mut rng)).collect();
        let negatives: Vec<Vec<f64>> = (0..n_neg).map(|_| draw(&mut rng)).collect();
        let (alpha, beta) = (1.0, 0.6);

        let pos_refs: Vec<&[f64]> = positives.iter().map(|p| p.as_slice()).collect();
        let neg_refs: Vec<&[f64]> = negatives.iter().map(|n| n.as_slice()).collect();
        let breakdown =
            lazy_quadruplet_loss_detailed(&anchor, &pos_refs, &neg_refs, &decoy, alpha, beta)?;
        // Want both hinges active and everything clear of ties.
        if breakdown.kink_margin < KINK_MARGIN
            || breakdown.anchor_hinge.is_none()
            || breakdown.decoy_hinge.is_none()
        {
            continue;
        }
        let grads =
            lazy_quadruplet_loss_backward(&anchor, &pos_refs, &neg_refs, &decoy, &breakdown, 1.0);

        let mut analytic = grads.anchor.clone();
        for p in &grads.positives {
            analytic.extend_from_slice(p);
        }
        for n in &grads.negatives {
            analytic.extend_from_slice(n);
        }
        analytic.extend_from_slice(&grads.decoy);

        let mut x = anchor.clone();
        for p in &positives {
            x.extend_from_slice(p);
        }
        for n in &negatives {
            x.extend_from_slice(n);
        }
        x.extend_from_slice(&decoy);

        let f = |x: &[f64]| -> Result<f64> {
            let anchor = &x[..dim];
            let mut offset = dim;
            let mut pos: Vec<&[f64]> = Vec::with_capacity(n_pos);
            for _ in 0..n_pos {
                pos.push(&x[offset..offset + dim]);
                offset += dim;
            }
            let mut neg: Vec<&[f64]> = Vec::with_capacity(n_neg);
            for _ in 0..n_neg {
                neg.push(&x[offset..offset + dim]);
                offset += dim;
            }
            let decoy = &x[offset..offset + dim];
            crate::train::loss::lazy_quadruplet_loss(anchor, &pos, &neg, decoy, alpha, beta)
        };
        return gradcheck(f, &analytic, &x, h);
    }
    Err(Error::GradCheckFailed(
        "lazy_quadruplet_loss: no instance with both hinges active".into(),
    ))
}

fn random_scene(dims: &ModelDims, rng: &mut ChaCha20Rng, id: u64) -> Result<Scene> {
    let cloud = PointCloud::new(
        (0..dims.cloud_points)
            .map(|_| {
                [
                    uniform(rng, -1.0, 1.0),
                    uniform(rng, -1.0, 1.0),
                    uniform(rng, -1.0, 1.0),
                ]
            })
            .collect(),
    )?;
    let n = dims.image_height * dims.image_width * dims.image_channels;
    let image = Image::new(
        dims.image_height,
        dims.image_width,
        dims.image_channels,
        (0..n).map(|_| uniform(rng, 0.05, 0.95)).collect(),
    )?;
    Ok(Scene {
        id,
        image,
        cloud,
        coord: GeoCoordinate::new(0.0, 0.0)?,
        t_image: Timestamp::new(id as f64)?,
        t_cloud: Timestamp::new(id as f64)?,
    })
}

/// End-to-end: the full fused pipeline (attention aggregation plus both
/// gates) composed with the quadruplet loss, differentiated with respect to
/// every model parameter.
fn check_full_pipeline(dims: &ModelDims, seed: u64, h: f64) -> Result<f64> {
    let mut config = PipelineConfig::for_variant(Variant::Pic04, *dims);
    // Include the per-branch gates so the composition covers every stage.
    config.lca_enabled = true;
    let (alpha, beta) = (1.2, 0.8);
    for attempt in 0..MAX_REDRAWS {
        let mut rng = stream_rng(seed + 7919 * attempt, Stream::GradCheck, 9);
        let mut params = ModelParams::init(&config, rng.random())?;
        // Move the attention parameters off their uniform-map init; a uniform
        // attention scale cancels in normalization, which pins the bias
        // gradient at a structural zero.
        for vlad in [params.point_vlad.as_mut(), params.image_vlad.as_mut()] {
            let vlad = vlad.expect("fused variant has both branches");
            for w in vlad.attention_weights.iter_mut() {
                *w = uniform(&mut rng, -0.8, 0.8);
            }
            vlad.attention_bias = uniform(&mut rng, -0.3, 0.3);
        }
        let model = Model::new(params);
        let scenes: Vec<Scene> = (0..5)
            .map(|i| random_scene(dims, &mut rng, i))
            .collect::<Result<_>>()?;

        let loss_of = |model: &Model| -> Result<f64> {
            let mut descs = Vec::with_capacity(5);
            for scene in &scenes {
                descs.push(forward_pipeline_with_cache(scene, model, &config)?.0);
            }
            let pos: Vec<&[f64]> = vec![descs[1].values()];
            let neg: Vec<&[f64]> = vec![descs[2].values(), descs[3].values()];
            crate::train::loss::lazy_quadruplet_loss(
                descs[0].values(),
                &pos,
                &neg,
                descs[4].values(),
                alpha,
                beta,
            )
        };

        let mut descs = Vec::with_capacity(5);
        let mut margin = f64::INFINITY;
        for scene in &scenes {
            let (d, c) = forward_pipeline_with_cache(scene, &model, &config)?;
            margin = margin.min(c.kink_margin());
            descs.push((d, c));
        }
        let pos: Vec<&[f64]> = vec![descs[1].0.values()];
        let neg: Vec<&[f64]> = vec![descs[2].0.values(), descs[3].0.values()];
        let breakdown = lazy_quadruplet_loss_detailed(
            descs[0].0.values(),
            &pos,
            &neg,
            descs[4].0.values(),
            alpha,
            beta,
        )?;
        if margin.min(breakdown.kink_margin) < KINK_MARGIN
            || breakdown.anchor_hinge.is_none()
            || breakdown.decoy_hinge.is_none()
        {
            continue;
        }

        let grads_loss = lazy_quadruplet_loss_backward(
            descs[0].0.values(),
            &pos,
            &neg,
            descs[4].0.values(),
            &breakdown,
            1.0,
        );
        let mut grads = model.params.zeros_like();
        let scene_grads = [
            &grads_loss.anchor,
            &grads_loss.positives[0],
            &grads_loss.negatives[0],
            &grads_loss.negatives[1],
            &grads_loss.decoy,
        ];
        for ((_, cache), g) in descs.iter().zip(scene_grads) {
            backward_pipeline(&model, &config, cache, g, &mut grads)?;
        }

        let analytic = grads.flatten();
        let x = model.params.flatten();
        let f = |x: &[f64]| -> Result<f64> {
            let mut m = model.clone();
            m.params.unflatten(x)?;
            loss_of(&m)
        };
        return gradcheck(f, &analytic, &x, h);
    }
    Err(Error::GradCheckFailed(
        "full_pipeline: no instance cleared the kink margin".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_tiny_dims() {
        let report = certify_gradients(&ModelDims::tiny(), 2, 1e-5, 1e-4).unwrap();
        assert_eq!(report.ops.len(), 9);
        for op in &report.ops {
            assert!(
                op.passed,
                "{} failed with max_rel_err {:.3e}",
                op.op, op.max_rel_err
            );
        }
        let names: Vec<&str> = report.ops.iter().map(|o| o.op).collect();
        let mut unique = names.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), names.len(), "each op listed exactly once");
    }
}

