//! Scene data model and dataset-preparation rules.
//!
//! A scene is one place observation: a camera image plus a point-cloud submap,
//! stamped with per-modality capture times and a planar world coordinate.
//! This module owns the preparation steps that turn raw streams into a scene
//! database: nearest-timestamp pairing of the two sensor streams, seeded point
//! downsampling, `[-1, 1]` cloud normalization and trajectory-based
//! train/test splitting.

pub mod persist;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{sample_without_replacement, stream_rng, Stream};

/// Capture time in seconds, monotone within one sensor stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timestamp(pub f64);

impl Timestamp {
    pub fn new(seconds: f64) -> Result<Self> {
        if !seconds.is_finite() || seconds < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "timestamp must be finite and non-negative, got {seconds}"
            )));
        }
        Ok(Timestamp(seconds))
    }

    pub fn seconds(self) -> f64 {
        self.0
    }
}

/// Planar world-frame position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoCoordinate {
    pub x: f64,
    pub y: f64,
}

impl GeoCoordinate {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "coordinate must be finite, got ({x}, {y})"
            )));
        }
        Ok(GeoCoordinate { x, y })
    }

    pub fn distance(&self, other: &GeoCoordinate) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// N x 3 point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("point cloud needs at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("point cloud contains non-finite values".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }
}

/// H x W x C image with values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimMismatch(format!(
                "image {}x{}x{} needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument(
                "image values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mean pixel value across all channels.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// One place observation.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: u64,
    pub image: Image,
    pub cloud: PointCloud,
    pub coord: GeoCoordinate,
    pub t_image: Timestamp,
    pub t_cloud: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// Ordered collection of scenes with unique ids.
#[derive(Debug, Clone)]
pub struct SceneDatabase {
    scenes: Vec<Scene>,
    split_tag: SplitTag,
}

impl SceneDatabase {
    pub fn new(scenes: Vec<Scene>, split_tag: SplitTag) -> Result<Self> {
        let mut ids: Vec<u64> = scenes.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != scenes.len() {
            return Err(Error::InvalidArgument("scene ids must be unique".into()));
        }
        Ok(SceneDatabase { scenes, split_tag })
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Concatenate two databases; ids must stay globally unique.
    pub fn merged(&self, other: &SceneDatabase, tag: SplitTag) -> Result<SceneDatabase> {
        let mut scenes = self.scenes.clone();
        scenes.extend(other.scenes.iter().cloned());
        SceneDatabase::new(scenes, tag)
    }
}

/// Pair each point cloud with the image whose timestamp is nearest.
///
/// Returns `(image_index, cloud_index)` for every cloud, ties broken toward
/// the smaller image index.
pub fn pair_by_timestamp<I, C>(
    images: &[(Timestamp, I)],
    clouds: &[(Timestamp, C)],
) -> Result<Vec<(usize, usize)>> {
    if images.is_empty() || clouds.is_empty() {
        return Err(Error::NoCandidates);
    }
    // Sort image timestamps once, keeping for each distinct instant the
    // smallest original index (any later duplicate can never win a tie).
    let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(images.len());
    for (idx, (t, _)) in images.iter().enumerate() {
        sorted.push((t.seconds(), idx));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    sorted.dedup_by(|next, prev| next.0 == prev.0);

    let mut pairs = Vec::with_capacity(clouds.len());
    for (cloud_idx, (tc, _)) in clouds.iter().enumerate() {
        let tc = tc.seconds();
        let pos = sorted.partition_point(|(t, _)| *t < tc);
        let mut best: Option<(f64, usize)> = None;
        for cand in [pos.checked_sub(1), Some(pos)].into_iter().flatten() {
            if let Some(&(t, idx)) = sorted.get(cand) {
                let diff = (t - tc).abs();
                let better = match best {
                    None => true,
                    Some((bd, bi)) => diff < bd || (diff == bd && idx < bi),
                };
                if better {
                    best = Some((diff, idx));
                }
            }
        }
        let (_, image_idx) = best.expect("non-empty image list");
        pairs.push((image_idx, cloud_idx));
    }
    Ok(pairs)
}

/// Seeded uniform downsampling to exactly `target` points.
///
/// Without replacement when the input has enough points, with replacement
/// otherwise. Deterministic per seed.
pub fn downsample(points: &[[f64; 3]], target: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    if points.is_empty() || target == 0 {
        return Err(Error::InvalidArgument(
            "downsample needs a non-empty cloud and a positive target".into(),
        ));
    }
    let mut rng = stream_rng(seed, Stream::Downsample, 0);
    let out = if points.len() >= target {
        sample_without_replacement(&mut rng, points.len(), target)
            .into_iter()
            .map(|i| points[i])
            .collect()
    } else {
        (0..target)
            .map(|_| points[rng.random_range(0..points.len())])
            .collect()
    };
    Ok(out)
}

use rand::Rng as _;

/// Center at the centroid and scale so the largest absolute coordinate is 1.
pub fn normalize_cloud(points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("normalize_cloud needs at least one point".into()));
    }
    let n = points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in points {
        for k in 0..3 {
            centroid[k] += p[k];
        }
    }
    for c in centroid.iter_mut() {
        *c /= n;
    }
    let mut centered: Vec<[f64; 3]> = points
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let scale = centered
        .iter()
        .flatten()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::DegenerateCloud);
    }
    for p in centered.iter_mut() {
        for v in p.iter_mut() {
            *v /= scale;
        }
    }
    Ok(centered)
}

/// Split a trajectory-ordered scene list into train and test databases.
///
/// Test scenes are picked greedily along the trajectory with pairwise spacing
/// at least `test_spacing_m` (never two in a row, so dense trajectories keep
/// a train set). The remaining scenes form the train set, thinned so that
/// consecutive picks stay within `train_overlap_m` of trajectory arc length
/// where the sampling density allows it.
pub fn split_by_spacing(
    scenes: &[Scene],
    train_overlap_m: f64,
    test_spacing_m: f64,
) -> Result<(SceneDatabase, SceneDatabase)> {
    if scenes.len() < 2 {
        return Err(Error::InvalidArgument(
            "split needs at least two scenes".into(),
        ));
    }
    if !(train_overlap_m > 0.0) || !(test_spacing_m > 0.0) {
        return Err(Error::InvalidArgument("spacings must be positive".into()));
    }

    let mut test_idx: Vec<usize> = Vec::new();
    let mut prev_was_test = false;
    for (i, scene) in scenes.iter().enumerate() {
        let far_enough = test_idx
            .iter()
            .all(|&j| scenes[j].coord.distance(&scene.coord) >= test_spacing_m);
        if far_enough && !prev_was_test {
            test_idx.push(i);
            prev_was_test = true;
        } else {
            prev_was_test = false;
        }
    }

    let is_test: Vec<bool> = {
        let mut mask = vec![false; scenes.len()];
        for &i in &test_idx {
            mask[i] = true;
        }
        mask
    };

    // Thin the remaining scenes: skip a candidate only while the arc gap to
    // the next train candidate still fits inside the overlap window.
    let train_candidates: Vec<usize> = (0..scenes.len()).filter(|&i| !is_test[i]).collect();
    let mut train_idx: Vec<usize> = Vec::new();
    if let Some(&first) = train_candidates.first() {
        train_idx.push(first);
        let mut last_kept = first;
        for w in 0..train_candidates.len() {
            let i = train_candidates[w];
            if i == first {
                continue;
            }
            let gap_now = scenes[last_kept].coord.distance(&scenes[i].coord);
            let next_fits = train_candidates.get(w + 1).is_some_and(|&j| {
                scenes[last_kept].coord.distance(&scenes[j].coord) <= train_overlap_m
            });
            if gap_now > train_overlap_m || !next_fits {
                train_idx.push(i);
                last_kept = i;
            }
        }
    }

    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::InvalidArgument(
            "split produced an empty train or test set; adjust spacings".into(),
        ));
    }

    let train: Vec<Scene> = train_idx.iter().map(|&i| scenes[i].clone()).collect();
    let test: Vec<Scene> = test_idx.iter().map(|&i| scenes[i].clone()).collect();
    Ok((
        SceneDatabase::new(train, SplitTag::Train)?,
        SceneDatabase::new(test, SplitTag::Test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(t: f64) -> Timestamp {
        Timestamp::new(t).unwrap()
    }

    #[test]
    fn pairing_picks_nearest() {
        let images: Vec<(Timestamp, ())> = vec![(ts(0.0), ()), (ts(1.0), ()), (ts(2.0), ())];
        let clouds: Vec<(Timestamp, ())> = vec![(ts(0.9), ())];
        assert_eq!(pair_by_timestamp(&images, &clouds).unwrap(), vec![(1, 0)]);
    }

    #[test]
    fn pairing_single_candidate() {
        let images: Vec<(Timestamp, ())> = vec![(ts(100.0), ())];
        let clouds: Vec<(Timestamp, ())> = vec![(ts(0.0), ())];
        assert_eq!(pair_by_timestamp(&images, &clouds).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn pairing_tie_prefers_smaller_image_index() {
        // Image 0 at t=3 and image 1 at t=1 are equally far from t=2.
        let images: Vec<(Timestamp, ())> = vec![(ts(3.0), ()), (ts(1.0), ())];
        let clouds: Vec<(Timestamp, ())> = vec![(ts(2.0), ())];
        assert_eq!(pair_by_timestamp(&images, &clouds).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn pairing_rejects_empty() {
        let images: Vec<(Timestamp, ())> = vec![];
        let clouds: Vec<(Timestamp, ())> = vec![(ts(0.0), ())];
        assert!(matches!(
            pair_by_timestamp(&images, &clouds),
            Err(Error::NoCandidates)
        ));
    }

    #[test]
    fn downsample_same_size_is_permutation() {
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mut out = downsample(&pts, 5, 9).unwrap();
        out.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(out, pts);
    }

    #[test]
    fn downsample_upsamples_single_point() {
        let pts = vec![[1.0, 2.0, 3.0]];
        let out = downsample(&pts, 4, 0).unwrap();
        assert_eq!(out, vec![[1.0, 2.0, 3.0]; 4]);
    }

    #[test]
    fn downsample_deterministic_and_member() {
        let mut rng = stream_rng(5, Stream::Test, 0);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                [
                    crate::rng::uniform(&mut rng, -1.0, 1.0),
                    crate::rng::uniform(&mut rng, -1.0, 1.0),
                    crate::rng::uniform(&mut rng, -1.0, 1.0),
                ]
            })
            .collect();
        let a = downsample(&pts, 128, 42).unwrap();
        let b = downsample(&pts, 128, 42).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(pts.contains(p));
        }
        // Distinct rows (sampling without replacement from distinct inputs).
        let mut sorted = a.clone();
        sorted.sort_by(|x, y| {
            x[0].total_cmp(&y[0])
                .then(x[1].total_cmp(&y[1]))
                .then(x[2].total_cmp(&y[2]))
        });
        sorted.dedup();
        assert_eq!(sorted.len(), 128);
    }

    #[test]
    fn normalize_symmetric_example() {
        let pts = vec![[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let out = normalize_cloud(&pts).unwrap();
        assert_eq!(out, vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_rejects_identical_points() {
        let pts = vec![[1.0, 1.0, 1.0]; 4];
        assert!(matches!(normalize_cloud(&pts), Err(Error::DegenerateCloud)));
    }

    #[test]
    fn normalize_bounds_and_centering() {
        let mut rng = stream_rng(17, Stream::Test, 0);
        let pts: Vec<[f64; 3]> = (0..128)
            .map(|_| {
                [
                    crate::rng::uniform(&mut rng, -30.0, 20.0),
                    crate::rng::uniform(&mut rng, 5.0, 80.0),
                    crate::rng::uniform(&mut rng, -2.0, 2.0),
                ]
            })
            .collect();
        let out = normalize_cloud(&pts).unwrap();
        let max_abs = out.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!((max_abs - 1.0).abs() < 1e-12);
        for k in 0..3 {
            let mean = out.iter().map(|p| p[k]).sum::<f64>() / out.len() as f64;
            assert!(mean.abs() < 1e-12, "axis {k} mean {mean}");
        }
        assert!(out.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
    }

    fn scene_at(id: u64, x: f64) -> Scene {
        Scene {
            id,
            image: Image::new(1, 1, 1, vec![0.5]).unwrap(),
            cloud: PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap(),
            coord: GeoCoordinate::new(x, 0.0).unwrap(),
            t_image: ts(id as f64),
            t_cloud: ts(id as f64),
        }
    }

    #[test]
    fn split_collinear_respects_test_spacing() {
        let scenes: Vec<Scene> = [0.0, 10.0, 20.0, 30.0]
            .iter()
            .enumerate()
            .map(|(i, &x)| scene_at(i as u64, x))
            .collect();
        let (train, test) = split_by_spacing(&scenes, 10.0, 25.0).unwrap();
        for a in test.scenes() {
            for b in test.scenes() {
                if a.id != b.id {
                    assert!(a.coord.distance(&b.coord) >= 25.0);
                }
            }
        }
        let train_ids: Vec<u64> = train.scenes().iter().map(|s| s.id).collect();
        let test_ids: Vec<u64> = test.scenes().iter().map(|s| s.id).collect();
        for id in &test_ids {
            assert!(!train_ids.contains(id));
        }
        assert!(!train_ids.is_empty() && !test_ids.is_empty());
    }

    #[test]
    fn split_rejects_tiny_input() {
        let scenes = vec![scene_at(0, 0.0)];
        assert!(split_by_spacing(&scenes, 10.0, 25.0).is_err());
    }
}
