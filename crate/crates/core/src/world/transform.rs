//! Image-domain corruptions and the histogram-matching normalization.
//!
//! Night corruption darkens an image through a gamma curve, adds sensor
//! noise and clips. The recovery direction is handled by a pluggable
//! image-to-image transform whose reference implementation matches each
//! channel's empirical value distribution onto a day reference distribution;
//! the mapping is monotone per channel, so pixel ordering survives.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{normal, stream_rng, Stream};
use crate::scene::Image;

/// Histogram resolution for the empirical CDFs.
pub const CDF_BINS: usize = 256;

/// Gamma-darken, add Gaussian noise, clip to [0, 1]. Deterministic per seed.
pub fn night_corrupt(image: &Image, gamma: f64, sigma: f64, seed: u64) -> Result<Image> {
    if !(gamma > 0.0) || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "night corruption needs gamma > 0 and sigma >= 0, got {gamma}, {sigma}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::NightCorrupt, 0);
    let data: Vec<f64> = image
        .data()
        .iter()
        .map(|&p| {
            let dark = if gamma == 1.0 { p } else { p.powf(gamma) };
            let noisy = if sigma > 0.0 {
                dark + sigma * normal(&mut rng)
            } else {
                dark
            };
            noisy.clamp(0.0, 1.0)
        })
        .collect();
    Image::new(image.height(), image.width(), image.channels(), data)
}

/// Per-channel cumulative value distributions on [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCdfs {
    /// One cumulative vector per channel; each is non-decreasing and ends at 1.
    cdfs: Vec<Vec<f64>>,
}

impl ChannelCdfs {
    pub fn new(cdfs: Vec<Vec<f64>>) -> Result<Self> {
        if cdfs.is_empty() {
            return Err(Error::InvalidArgument("reference needs at least one channel".into()));
        }
        for (c, cdf) in cdfs.iter().enumerate() {
            if cdf.is_empty() {
                return Err(Error::InvalidArgument(format!("channel {c} cdf is empty")));
            }
            if cdf.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "channel {c} cdf is not monotone"
                )));
            }
            let last = *cdf.last().expect("non-empty");
            if (last - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "channel {c} cdf ends at {last}, expected 1"
                )));
            }
        }
        Ok(ChannelCdfs { cdfs })
    }

    pub fn channels(&self) -> usize {
        self.cdfs.len()
    }

    pub fn bins(&self) -> usize {
        self.cdfs[0].len()
    }

    pub fn cdf(&self, channel: usize) -> &[f64] {
        &self.cdfs[channel]
    }

    /// Value at quantile `q`: the first bin whose cumulative mass reaches
    /// `q`, linearly interpolated within the bin's value span.
    fn invert(&self, channel: usize, q: f64) -> f64 {
        let cdf = &self.cdfs[channel];
        let bins = cdf.len();
        let idx = cdf.partition_point(|&v| v < q).min(bins - 1);
        let lo = if idx == 0 { 0.0 } else { cdf[idx - 1] };
        let hi = cdf[idx];
        let frac = if hi > lo {
            ((q - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        (idx as f64 + frac) / bins as f64
    }

    pub fn median(&self, channel: usize) -> f64 {
        self.invert(channel, 0.5)
    }

    /// Persist as one `cdf_channel_<c>.csv` per channel with bin,cumulative rows.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (c, cdf) in self.cdfs.iter().enumerate() {
            let path = dir.join(format!("cdf_channel_{c}.csv"));
            let mut out = String::from("bin,cumulative\n");
            for (b, v) in cdf.iter().enumerate() {
                out.push_str(&format!("{b},{v}\n"));
            }
            fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ChannelCdfs> {
        let mut cdfs = Vec::new();
        loop {
            let path = dir.join(format!("cdf_channel_{}.csv", cdfs.len()));
            if !path.exists() {
                break;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut cdf = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if i == 0 {
                    continue; // header
                }
                let (bin, value) = line
                    .split_once(',')
                    .ok_or_else(|| Error::malformed(&path, format!("bad row: {line}")))?;
                let bin: usize = bin
                    .parse()
                    .map_err(|_| Error::malformed(&path, format!("bad bin: {bin}")))?;
                if bin != cdf.len() {
                    return Err(Error::malformed(&path, format!("bin {bin} out of order")));
                }
                let value: f64 = value
                    .parse()
                    .map_err(|_| Error::malformed(&path, format!("bad value: {value}")))?;
                cdf.push(value);
            }
            cdfs.push(cdf);
        }
        if cdfs.is_empty() {
            return Err(Error::malformed(dir, "no cdf_channel_*.csv files"));
        }
        ChannelCdfs::new(cdfs)
    }
}

#[inline]
fn bin_of(value: f64, bins: usize) -> usize {
    ((value * bins as f64) as usize).min(bins - 1)
}

/// Empirical per-channel CDFs over a set of images (all with the same
/// channel count).
pub fn build_reference_cdf<'a>(
    images: impl IntoIterator<Item = &'a Image>,
    bins: usize,
) -> Result<ChannelCdfs> {
    let mut counts: Vec<Vec<u64>> = Vec::new();
    let mut total = 0u64;
    for image in images {
        if counts.is_empty() {
            counts = vec![vec![0u64; bins]; image.channels()];
        } else if counts.len() != image.channels() {
            return Err(Error::DimMismatch(format!(
                "reference images disagree on channels: {} vs {}",
                counts.len(),
                image.channels()
            )));
        }
        for row in 0..image.height() {
            for col in 0..image.width() {
                for c in 0..image.channels() {
                    counts[c][bin_of(image.at(row, col, c), bins)] += 1;
                }
            }
        }
        total += (image.height() * image.width()) as u64;
    }
    if total == 0 {
        return Err(Error::NoCandidates);
    }
    let cdfs = counts
        .into_iter()
        .map(|ch| {
            let mut acc = 0u64;
            let mut cdf = Vec::with_capacity(bins);
            for c in ch {
                acc += c;
                cdf.push(acc as f64 / total as f64);
            }
            // Guard against float drift on the final entry.
            if let Some(last) = cdf.last_mut() {
                *last = 1.0;
            }
            cdf
        })
        .collect();
    ChannelCdfs::new(cdfs)
}

/// Map every pixel through reference_cdf^-1(empirical_cdf(pixel)), per
/// channel. Constant channels map to the reference median.
pub fn histogram_normalize(image: &Image, reference: &ChannelCdfs) -> Result<Image> {
    if image.channels() != reference.channels() {
        return Err(Error::DimMismatch(format!(
            "image has {} channels, reference {}",
            image.channels(),
            reference.channels()
        )));
    }
    let bins = reference.bins();
    let n_pixels = (image.height() * image.width()) as f64;
    let mut data = vec![0.0; image.data().len()];
    for c in 0..image.channels() {
        // Empirical CDF of this channel.
        let mut counts = vec![0u64; bins];
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for row in 0..image.height() {
            for col in 0..image.width() {
                let v = image.at(row, col, c);
                counts[bin_of(v, bins)] += 1;
                min = min.min(v);
                max = max.max(v);
            }
        }
        let degenerate = min == max;
        let median = reference.median(c);
        // Midpoint empirical CDF: mass strictly below the bin plus half the
        // bin's own mass, so self-matching maps every value back to its own
        // bin center.
        let mut below = vec![0.0; bins];
        let mut acc = 0u64;
        for (b, cnt) in counts.iter().enumerate() {
            below[b] = (acc as f64 + 0.5 * *cnt as f64) / n_pixels;
            acc += cnt;
        }
        for row in 0..image.height() {
            for col in 0..image.width() {
                let idx = (row * image.width() + col) * image.channels() + c;
                let v = image.at(row, col, c);
                data[idx] = if degenerate {
                    median
                } else {
                    reference.invert(c, below[bin_of(v, bins)])
                };
            }
        }
    }
    Image::new(image.height(), image.width(), image.channels(), data)
}

/// A named image-to-image mapping applied before feature extraction.
#[derive(Debug, Clone)]
pub enum DomainTransform {
    /// Pass-through.
    Identity,
    /// Match each channel's value distribution onto the reference.
    HistogramMatch(ChannelCdfs),
}

impl DomainTransform {
    pub fn apply(&self, image: &Image) -> Result<Image> {
        match self {
            DomainTransform::Identity => Ok(image.clone()),
            DomainTransform::HistogramMatch(reference) => histogram_normalize(image, reference),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DomainTransform::Identity => "identity",
            DomainTransform::HistogramMatch(_) => "histogram-match",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, uniform};

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = stream_rng(seed, Stream::Test, 3);
        Image::new(
            h,
            w,
            c,
            (0..h * w * c).map(|_| uniform(&mut rng, 0.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_corruption_is_identity() {
        let image = random_image(8, 8, 3, 0);
        let out = night_corrupt(&image, 1.0, 0.0, 7).unwrap();
        assert_eq!(out, image);
    }

    #[test]
    fn white_image_is_fixed_point_of_gamma() {
        let image = Image::new(4, 4, 1, vec![1.0; 16]).unwrap();
        let out = night_corrupt(&image, 3.7, 0.0, 7).unwrap();
        assert_eq!(out.data(), image.data());
    }

    #[test]
    fn corruption_stays_in_range_and_darkens() {
        let image = random_image(8, 8, 3, 1);
        let out = night_corrupt(&image, 2.5, 0.0, 3).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.mean() <= image.mean());
        // Recompute directly.
        for (o, p) in out.data().iter().zip(image.data()) {
            assert!((o - p.powf(2.5)).abs() < 1e-15);
        }
        // Deterministic per seed, including the noisy path.
        let a = night_corrupt(&image, 2.5, 0.1, 11).unwrap();
        let b = night_corrupt(&image, 2.5, 0.1, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_matching_is_near_identity() {
        let image = random_image(16, 16, 2, 2);
        let reference = build_reference_cdf(std::iter::once(&image), CDF_BINS).unwrap();
        let out = histogram_normalize(&image, &reference).unwrap();
        let tol = 1.0 / (2.0 * CDF_BINS as f64);
        for (o, p) in out.data().iter().zip(image.data()) {
            assert!((o - p).abs() <= tol + 1e-12, "{o} vs {p}");
        }
    }

    #[test]
    fn constant_channel_maps_to_reference_median() {
        let reference_img = random_image(16, 16, 1, 3);
        let reference = build_reference_cdf(std::iter::once(&reference_img), CDF_BINS).unwrap();
        let image = Image::new(4, 4, 1, vec![0.2; 16]).unwrap();
        let out = histogram_normalize(&image, &reference).unwrap();
        let median = reference.median(0);
        assert!(out.data().iter().all(|v| *v == median));
    }

    #[test]
    fn normalization_is_monotone_per_channel() {
        let image = random_image(12, 12, 3, 4);
        let reference_img = random_image(12, 12, 3, 5);
        let reference = build_reference_cdf(std::iter::once(&reference_img), CDF_BINS).unwrap();
        let out = histogram_normalize(&image, &reference).unwrap();
        for c in 0..3 {
            let mut pairs: Vec<(f64, f64)> = Vec::new();
            for row in 0..12 {
                for col in 0..12 {
                    pairs.push((image.at(row, col, c), out.at(row, col, c)));
                }
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                assert!(w[1].1 >= w[0].1, "rank order broken in channel {c}");
            }
        }
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn darkened_image_is_pulled_toward_reference_means() {
        let day = random_image(16, 16, 3, 6);
        let reference = build_reference_cdf(std::iter::once(&day), CDF_BINS).unwrap();
        let night = night_corrupt(&day, 4.0, 0.02, 9).unwrap();
        let restored = histogram_normalize(&night, &reference).unwrap();
        for c in 0..3 {
            let mean_of = |img: &Image| {
                let mut s = 0.0;
                for row in 0..16 {
                    for col in 0..16 {
                        s += img.at(row, col, c);
                    }
                }
                s / 256.0
            };
            let day_mean = mean_of(&day);
            let restored_mean = mean_of(&restored);
            assert!(
                (restored_mean - day_mean).abs() < 0.05,
                "channel {c}: {restored_mean} vs {day_mean}"
            );
        }
    }

    #[test]
    fn cdf_round_trips_through_csv() {
        let image = random_image(10, 10, 3, 7);
        let reference = build_reference_cdf(std::iter::once(&image), CDF_BINS).unwrap();
        let dir = tempfile::tempdir().unwrap();
        reference.save(dir.path()).unwrap();
        let loaded = ChannelCdfs::load(dir.path()).unwrap();
        assert_eq!(loaded, reference);
    }
}
