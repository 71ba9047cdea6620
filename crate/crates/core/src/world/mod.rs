//! Synthetic benchmark world.
//!
//! A world is a set of places along a random-walk path, each with a latent
//! appearance vector. The image of a place renders half of the latent as a
//! sinusoidal texture (plus an uninformative noise band standing in for sky /
//! vehicle-hood pixels), the point cloud renders the other half as a noisy
//! 3-D curve plus uniform clutter points. Two modalities therefore carry
//! complementary halves of the identity signal. Traversals share places but
//! draw independent observation noise; a configurable fraction of the query
//! traversal is corrupted to night conditions (gamma darkening, sensor noise,
//! point dropout).

pub mod transform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, sample_without_replacement, stream_rng, uniform, Stream};
use crate::scene::{
    downsample, normalize_cloud, GeoCoordinate, Image, PointCloud, Scene, SceneDatabase, SplitTag,
    Timestamp,
};
use transform::night_corrupt;

/// Night corruption strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    /// Gamma exponent applied to night images (> 1 darkens).
    pub gamma: f64,
    /// Gaussian noise sigma added to night images.
    pub noise_sigma: f64,
    /// Probability that a night-scene point is dropped (replaced by a
    /// duplicate of a surviving point).
    pub point_dropout: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            gamma: 4.0,
            noise_sigma: 0.06,
            point_dropout: 0.1,
        }
    }
}

/// Parameters of the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub n_places: usize,
    /// Side length of the square world, meters.
    pub area_m: f64,
    /// Minimum pairwise distance between places, meters.
    pub min_spacing_m: f64,
    pub latent_dim: usize,
    /// Fraction of the query traversal corrupted to night conditions.
    pub night_fraction: f64,
    /// Master seed; all world randomness derives from it.
    pub seed: u64,
    /// Scene shape.
    pub cloud_points: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    /// Observation noise sigma on image pixels, per traversal.
    pub image_noise_sigma: f64,
    /// Observation noise sigma on raw point coordinates, per traversal.
    pub point_noise_sigma: f64,
    pub corruption: CorruptionSpec,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_places: 200,
            area_m: 1000.0,
            min_spacing_m: 30.0,
            latent_dim: 8,
            night_fraction: 0.3,
            seed: 42,
            cloud_points: 128,
            image_height: 32,
            image_width: 32,
            image_channels: 3,
            image_noise_sigma: 0.04,
            point_noise_sigma: 0.35,
            corruption: CorruptionSpec::default(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_places < 2 {
            return Err(Error::InvalidArgument("world needs at least two places".into()));
        }
        if !(self.min_spacing_m > 0.0) || !(self.area_m > 0.0) {
            return Err(Error::InvalidArgument("area and spacing must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.night_fraction) {
            return Err(Error::InvalidArgument(format!(
                "night_fraction must be in [0, 1], got {}",
                self.night_fraction
            )));
        }
        if self.latent_dim < 2 {
            return Err(Error::InvalidArgument("latent_dim must be at least 2".into()));
        }
        if !(self.corruption.gamma > 0.0)
            || self.corruption.noise_sigma < 0.0
            || !(0.0..=1.0).contains(&self.corruption.point_dropout)
        {
            return Err(Error::InvalidArgument("corruption parameters out of range".into()));
        }
        if self.cloud_points == 0
            || self.image_height == 0
            || self.image_width == 0
            || self.image_channels == 0
        {
            return Err(Error::InvalidArgument("scene shape must be positive".into()));
        }
        Ok(())
    }
}

/// The three traversal roles; they select independent noise streams and
/// disjoint id ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Traversal {
    Database,
    Query,
    Training,
}

impl Traversal {
    fn noise_stream(self) -> Stream {
        match self {
            Traversal::Database => Stream::DbNoise,
            Traversal::Query => Stream::QueryNoise,
            Traversal::Training => Stream::TrainNoise,
        }
    }

    fn id_offset(self, n: usize) -> u64 {
        match self {
            Traversal::Database => 0,
            Traversal::Query => n as u64,
            Traversal::Training => 2 * n as u64,
        }
    }

    fn time_offset(self) -> f64 {
        match self {
            Traversal::Database => 0.0,
            Traversal::Query => 1.0e6,
            Traversal::Training => 2.0e6,
        }
    }

    /// Sub-index within the night-pick stream.
    fn night_pick_index(self) -> u64 {
        match self {
            Traversal::Database => u64::MAX, // never corrupted
            Traversal::Query => 0,
            Traversal::Training => 1,
        }
    }
}

/// A generated benchmark: one database traversal and one query traversal of
/// the same places, plus the ids of the corrupted (night) queries.
#[derive(Debug, Clone)]
pub struct World {
    pub database: SceneDatabase,
    pub queries: SceneDatabase,
    pub night_query_ids: Vec<u64>,
}

/// Deterministic world layout: coordinates along the path plus per-place
/// latents.
#[derive(Debug, Clone)]
struct Layout {
    coords: Vec<GeoCoordinate>,
    latents: Vec<Vec<f64>>,
}

fn build_layout(spec: &WorldSpec) -> Result<Layout> {
    let margin = spec.min_spacing_m.min(spec.area_m / 10.0);
    let lo = margin;
    let hi = spec.area_m - margin;
    if hi <= lo {
        return Err(Error::SpacingUnsatisfiable(format!(
            "area {} too small for spacing {}",
            spec.area_m, spec.min_spacing_m
        )));
    }
    let step = spec.min_spacing_m * 1.25;
    let mut rng = stream_rng(spec.seed, Stream::WorldLayout, 0);

    // Random-walk path with backtracking; when a dead end survives repeated
    // backtracking, the walk teleports to a fresh in-spacing start and
    // continues from there.
    let spacing_ok = |coords: &[(f64, f64)], cx: f64, cy: f64| {
        coords.iter().all(|&(x, y)| {
            let dx = cx - x;
            let dy = cy - y;
            (dx * dx + dy * dy).sqrt() >= spec.min_spacing_m
        })
    };
    let budget = 3000 * spec.n_places as u64;
    let mut spent = 0u64;
    let mut coords: Vec<(f64, f64)> = Vec::with_capacity(spec.n_places);
    coords.push((uniform(&mut rng, lo, hi), uniform(&mut rng, lo, hi)));
    let mut heading = uniform(&mut rng, 0.0, std::f64::consts::TAU);
    while coords.len() < spec.n_places {
        if spent > budget {
            return Err(Error::SpacingUnsatisfiable(format!(
                "{} places with spacing {} m did not fit in {} m x {} m",
                spec.n_places, spec.min_spacing_m, spec.area_m, spec.area_m
            )));
        }
        let mut placed = false;
        for attempt in 0..120 {
            spent += 1;
            // Gentle turns first, anything on later attempts.
            let span = if attempt < 40 { 0.9 } else { std::f64::consts::PI };
            let candidate_heading = heading + uniform(&mut rng, -span, span);
            let (px, py) = *coords.last().expect("non-empty");
            let cx = px + step * candidate_heading.cos();
            let cy = py + step * candidate_heading.sin();
            if cx < lo || cx > hi || cy < lo || cy > hi {
                continue;
            }
            if spacing_ok(&coords, cx, cy) {
                coords.push((cx, cy));
                heading = candidate_heading;
                placed = true;
                break;
            }
        }
        if !placed {
            // The walk is locally saturated; restart the segment anywhere
            // legal. Failing that, the area genuinely is full.
            let mut found = false;
            for _ in 0..400 {
                spent += 1;
                let cx = uniform(&mut rng, lo, hi);
                let cy = uniform(&mut rng, lo, hi);
                if spacing_ok(&coords, cx, cy) {
                    coords.push((cx, cy));
                    heading = uniform(&mut rng, 0.0, std::f64::consts::TAU);
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::SpacingUnsatisfiable(format!(
                    "{} places with spacing {} m did not fit in {} m x {} m",
                    spec.n_places, spec.min_spacing_m, spec.area_m, spec.area_m
                )));
            }
        }
    }
    let coords = coords
        .into_iter()
        .map(|(x, y)| GeoCoordinate::new(x, y))
        .collect::<Result<Vec<_>>>()?;
    // The image share of the latent clusters around shared archetypes:
    // groups of places look alike on camera (the perceptual-aliasing regime
    // of real place recognition) and only fine offsets tell siblings apart,
    // while the geometry share stays fully distinct per place.
    let mut latent_rng = stream_rng(spec.seed, Stream::WorldLatent, 0);
    let cloud_dims = cloud_latent_dims(spec.latent_dim);
    let n_archetypes = spec.n_places.div_ceil(PLACES_PER_ARCHETYPE).max(1);
    let archetypes: Vec<Vec<f64>> = (0..n_archetypes)
        .map(|_| {
            (cloud_dims..spec.latent_dim)
                .map(|_| uniform(&mut latent_rng, -1.0, 1.0))
                .collect()
        })
        .collect();
    let latents = (0..spec.n_places)
        .map(|place| {
            let archetype = &archetypes[place % n_archetypes];
            let mut z: Vec<f64> = (0..cloud_dims)
                .map(|_| uniform(&mut latent_rng, -1.0, 1.0))
                .collect();
            z.extend(archetype.iter().map(|a| {
                (a + uniform(&mut latent_rng, -ARCHETYPE_SPREAD, ARCHETYPE_SPREAD)).clamp(-1.2, 1.2)
            }));
            z
        })
        .collect();
    Ok(Layout { coords, latents })
}

/// Fraction of image rows (from the top) that carry no place signal.
const NOISE_BAND_FRACTION: f64 = 0.25;
/// Fraction of raw cloud points that are uniform clutter.
const CLUTTER_FRACTION: f64 = 0.35;
/// Raw points generated per output point before downsampling.
const RAW_OVERSAMPLE: usize = 2;
/// Share of the latent vector rendered by the point cloud; the rest drives
/// the image. The cloud is deliberately the stronger modality, the image the
/// richer-but-unreliable one.
const CLOUD_LATENT_SHARE: f64 = 0.625;
/// Places per latent archetype (groups of this size look alike).
const PLACES_PER_ARCHETYPE: usize = 8;
/// Uniform half-width of the per-place offset around its archetype.
const ARCHETYPE_SPREAD: f64 = 0.22;

fn cloud_latent_dims(latent_dim: usize) -> usize {
    (((latent_dim as f64) * CLOUD_LATENT_SHARE).round() as usize).clamp(1, latent_dim - 1)
}

/// Render the image of a place: sinusoidal texture from the image share of
/// the latent, rank-equalized per channel so place identity lives in spatial
/// structure rather than in the value distribution, then a pure-noise band on
/// top and observation noise everywhere.
fn render_image(
    spec: &WorldSpec,
    latent: &[f64],
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Result<Image> {
    let (h, w, c) = (spec.image_height, spec.image_width, spec.image_channels);
    let half = &latent[cloud_latent_dims(spec.latent_dim)..];
    let n_waves = (half.len() / 2).max(1);
    let noise_rows = ((h as f64) * NOISE_BAND_FRACTION) as usize;

    // Signal pass: raw sinusoid mixture per channel.
    let mut signal = vec![0.0f64; h * w * c];
    for row in 0..h {
        for col in 0..w {
            let u = (row as f64 + 0.5) / h as f64;
            let v = (col as f64 + 0.5) / w as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for m in 0..n_waves {
                    let zi = half[(2 * m) % half.len()];
                    let zj = half[(2 * m + 1) % half.len()];
                    let fu = 1.0 + 1.2 * zi.abs();
                    let fv = 1.0 + 1.2 * zj.abs();
                    let phase = std::f64::consts::PI * (zi + zj) * (ch as f64 * 0.7 + 1.0);
                    acc += (std::f64::consts::TAU * (fu * u + fv * v) + phase).sin();
                }
                signal[(row * w + col) * c + ch] = acc;
            }
        }
    }

    // Rank-equalize each channel: every day image then shares the same
    // (uniform) value distribution, so the day-night normalization cannot
    // erase place identity, which lives in where values sit, not which
    // values occur.
    let n_px = h * w;
    for ch in 0..c {
        let mut order: Vec<usize> = (0..n_px).collect();
        order.sort_by(|&a, &b| {
            signal[a * c + ch]
                .total_cmp(&signal[b * c + ch])
                .then(a.cmp(&b))
        });
        let mut equalized = vec![0.0f64; n_px];
        for (rank, &px) in order.iter().enumerate() {
            equalized[px] = (rank as f64 + 0.5) / n_px as f64;
        }
        for px in 0..n_px {
            signal[px * c + ch] = equalized[px];
        }
    }

    let mut data = Vec::with_capacity(h * w * c);
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let value = if row < noise_rows {
                    // Saturated salt-and-pepper junk: high-variance features
                    // no cluster center can absorb.
                    if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 }
                } else {
                    signal[(row * w + col) * c + ch] + spec.image_noise_sigma * normal(rng)
                };
                data.push(value.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(h, w, c, data)
}

/// Raw cloud of a place: a latent-driven 3-D curve plus uniform clutter,
/// before downsampling and normalization.
fn render_raw_cloud(
    spec: &WorldSpec,
    latent: &[f64],
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Vec<[f64; 3]> {
    let half = &latent[..cloud_latent_dims(spec.latent_dim)];
    let pick = |i: usize| half[i % half.len()];
    let scale = 10.0;
    let raw_n = spec.cloud_points * RAW_OVERSAMPLE;
    let n_clutter = ((raw_n as f64) * CLUTTER_FRACTION) as usize;
    let n_structured = raw_n - n_clutter;

    // A handful of latent-parameterized structures: every place gets poles,
    // a wall segment and a curved ridge whose positions, orientations and
    // sizes all move with the latent.
    let n_structs = 4usize;
    let mut points = Vec::with_capacity(raw_n);
    for s in 0..n_structs {
        let za = pick(s);
        let zb = pick(s + 1);
        let zc = pick(s + 2);
        let zd = pick(s + 3);
        let cx = 0.8 * scale * za;
        let cy = 0.8 * scale * zb;
        let quota = n_structured / n_structs
            + if s < n_structured % n_structs { 1 } else { 0 };
        for j in 0..quota {
            let t = j as f64 / quota.max(1) as f64;
            let p = match s % 4 {
                // Vertical pole: position from the latent, height from zc.
                0 => {
                    let height = scale * (0.6 + 0.6 * zc.abs());
                    [cx, cy, height * t]
                }
                // Wall segment: direction and length from the latent.
                1 => {
                    let dir = std::f64::consts::PI * zc;
                    let len = scale * (0.8 + 0.8 * zd.abs());
                    let along = len * (t - 0.5);
                    [
                        cx + along * dir.cos(),
                        cy + along * dir.sin(),
                        scale * 0.25 * (1.0 + zd) * (8.0 * t).sin().abs(),
                    ]
                }
                // Curved ridge: latent-frequency arc.
                2 => {
                    let freq = 1.0 + 3.0 * zc.abs();
                    let theta = std::f64::consts::TAU * t;
                    let r = scale * (0.4 + 0.5 * zd.abs());
                    [
                        cx + r * (freq * theta).cos(),
                        cy + r * (freq * theta).sin(),
                        scale * 0.3 * (theta + std::f64::consts::PI * za).sin(),
                    ]
                }
                // Tilted plane patch.
                _ => {
                    let u = t;
                    let v = ((j * 31) % quota.max(1)) as f64 / quota.max(1) as f64;
                    let side = scale * (0.5 + 0.5 * zc.abs());
                    [
                        cx + side * (u - 0.5),
                        cy + side * (v - 0.5) * zd.signum(),
                        scale * (0.3 + 0.4 * za.abs()) * (u * zc + v * zd + 1.0) * 0.5,
                    ]
                }
            };
            points.push([
                p[0] + spec.point_noise_sigma * normal(rng),
                p[1] + spec.point_noise_sigma * normal(rng),
                p[2] + spec.point_noise_sigma * normal(rng),
            ]);
        }
    }
    for _ in 0..n_clutter {
        points.push([
            uniform(rng, -1.3 * scale, 1.3 * scale),
            uniform(rng, -1.3 * scale, 1.3 * scale),
            uniform(rng, 0.0, 1.0 * scale),
        ]);
    }
    points
}

/// Replace dropped points by duplicates of surviving ones; point count and
/// order are preserved.
fn dropout_points(
    points: &[[f64; 3]],
    probability: f64,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Vec<[f64; 3]> {
    if probability <= 0.0 {
        return points.to_vec();
    }
    let kept: Vec<usize> = (0..points.len())
        .filter(|_| rng.random::<f64>() >= probability)
        .collect();
    if kept.is_empty() {
        return points.to_vec();
    }
    (0..points.len())
        .map(|i| {
            if kept.binary_search(&i).is_ok() {
                points[i]
            } else {
                points[kept[rng.random_range(0..kept.len())]]
            }
        })
        .collect()
}

use rand::Rng as _;

/// Generate one traversal of the layout. Returns the database and the ids of
/// night-corrupted scenes (empty for the database traversal).
fn generate_traversal(
    spec: &WorldSpec,
    layout: &Layout,
    traversal: Traversal,
    tag: SplitTag,
) -> Result<(SceneDatabase, Vec<u64>)> {
    let n = spec.n_places;
    let id_offset = traversal.id_offset(n);
    let t_offset = traversal.time_offset();

    let mut scenes = Vec::with_capacity(n);
    for place in 0..n {
        let id = id_offset + place as u64;
        let mut noise_rng = stream_rng(spec.seed, traversal.noise_stream(), place as u64);
        let image = render_image(spec, &layout.latents[place], &mut noise_rng)?;
        let raw = render_raw_cloud(spec, &layout.latents[place], &mut noise_rng);
        let sampled = downsample(&raw, spec.cloud_points, spec.seed ^ id)?;
        let normalized = normalize_cloud(&sampled)?;
        let t_base = t_offset + 1.0 + place as f64;
        let t_cloud = t_base + 0.2 * (noise_rng.random::<f64>() - 0.5);
        let t_image = t_cloud + 0.3 * (noise_rng.random::<f64>() - 0.5);
        scenes.push(Scene {
            id,
            image,
            cloud: PointCloud::new(normalized)?,
            coord: layout.coords[place],
            t_image: Timestamp::new(t_image)?,
            t_cloud: Timestamp::new(t_cloud)?,
        });
    }

    // Night corruption in a second pass so the base observation draws are
    // identical whether or not corruption is enabled. Night damage is
    // heterogeneous: a per-scene severity draw makes mild nights mostly a
    // gamma (exposure) shift, which a color normalization can undo, and
    // severe nights noise-dominated, which nothing can undo.
    let mut night_ids = Vec::new();
    if traversal != Traversal::Database && spec.night_fraction > 0.0 {
        let count = ((spec.night_fraction * n as f64).round() as usize).min(n);
        let mut pick_rng = stream_rng(spec.seed, Stream::NightPick, traversal.night_pick_index());
        let mut picked = sample_without_replacement(&mut pick_rng, n, count);
        picked.sort_unstable();
        for place in picked {
            let scene = &mut scenes[place];
            let mut severity_rng =
                stream_rng(spec.seed, Stream::NightCorrupt, scene.id.rotate_left(7));
            let severity: f64 = severity_rng.random();
            // Mild nights (severity <= 0.5) are dark but clean: a strong
            // exposure shift that a color normalization can undo. Severe
            // nights add sensor noise that nothing can undo.
            let gamma = 1.0 + (spec.corruption.gamma - 1.0) * (0.4 + 0.6 * severity);
            let noise_share = ((severity - 0.5) / 0.5).max(0.0);
            let sigma = 0.02 + spec.corruption.noise_sigma * noise_share * noise_share;
            scene.image = night_corrupt(
                &scene.image,
                gamma,
                sigma,
                spec.seed ^ scene.id.rotate_left(17),
            )?;
            if spec.corruption.point_dropout > 0.0 {
                let mut drop_rng =
                    stream_rng(spec.seed, Stream::NightCorrupt, scene.id.rotate_left(31));
                let dropped = dropout_points(
                    scene.cloud.points(),
                    spec.corruption.point_dropout,
                    &mut drop_rng,
                );
                scene.cloud = PointCloud::new(normalize_cloud(&dropped)?)?;
            }
            night_ids.push(scene.id);
        }
    }

    Ok((SceneDatabase::new(scenes, tag)?, night_ids))
}

/// Generate the benchmark: a clean database traversal and a query traversal
/// with `night_fraction` of its scenes corrupted.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let layout = build_layout(spec)?;
    let (database, _) = generate_traversal(spec, &layout, Traversal::Database, SplitTag::Train)?;
    let (queries, night_query_ids) =
        generate_traversal(spec, &layout, Traversal::Query, SplitTag::Test)?;
    Ok(World {
        database,
        queries,
        night_query_ids,
    })
}

/// Generate the held-out training twin: a third traversal of the same places
/// with its own observation noise and its own night picks. Training on
/// database + twin leaves the query traversal untouched.
pub fn generate_training_twin(spec: &WorldSpec) -> Result<(SceneDatabase, Vec<u64>)> {
    spec.validate()?;
    let layout = build_layout(spec)?;
    generate_traversal(spec, &layout, Traversal::Training, SplitTag::Train)
}
