//! On-disk format for scene databases.
//!
//! A database directory holds:
//! - `meta.json` — split tag and scene count;
//! - `scenes.jsonl` — one JSON record per scene (id, coordinate, timestamps,
//!   relative paths to the binary payloads);
//! - `cloud_<id>.bin` — little-endian u32 point count, then f64 xyz triples;
//! - `image_<id>.bin` — three little-endian u32 dims (h, w, c), then f64
//!   values row-major.
//!
//! All floats round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{GeoCoordinate, Image, PointCloud, Scene, SceneDatabase, SplitTag, Timestamp};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    split_tag: SplitTag,
    n_scenes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    id: u64,
    x: f64,
    y: f64,
    t_image: f64,
    t_cloud: f64,
    cloud_path: String,
    image_path: String,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + cloud.len() * 24);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn decode_cloud(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let mut r = bytes;
    let n = read_u32(path, &mut r)? as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([read_f64(path, &mut r)?, read_f64(path, &mut r)?, read_f64(path, &mut r)?]);
    }
    if !r.is_empty() {
        return Err(Error::malformed(path, "trailing bytes in cloud file"));
    }
    PointCloud::new(points)
}

fn encode_image(image: &Image) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + image.data().len() * 8);
    for d in [image.height(), image.width(), image.channels()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_image(path: &Path, bytes: &[u8]) -> Result<Image> {
    let mut r = bytes;
    let h = read_u32(path, &mut r)? as usize;
    let w = read_u32(path, &mut r)? as usize;
    let c = read_u32(path, &mut r)? as usize;
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w * c {
        data.push(read_f64(path, &mut r)?);
    }
    if !r.is_empty() {
        return Err(Error::malformed(path, "trailing bytes in image file"));
    }
    Image::new(h, w, c, data)
}

fn read_u32(path: &Path, r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::malformed(path, "truncated u32"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(path: &Path, r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::malformed(path, "truncated f64"))?;
    Ok(f64::from_le_bytes(b))
}

/// Persist a database under `dir`, creating it if needed.
pub fn save_database(db: &SceneDatabase, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        split_tag: db.split_tag(),
        n_scenes: db.len(),
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::malformed(dir.join("meta.json"), e.to_string()))?;
    write_file(&dir.join("meta.json"), meta_json.as_bytes())?;

    let jsonl_path = dir.join("scenes.jsonl");
    let file = fs::File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for scene in db.scenes() {
        let cloud_path = format!("cloud_{:08}.bin", scene.id);
        let image_path = format!("image_{:08}.bin", scene.id);
        write_file(&dir.join(&cloud_path), &encode_cloud(&scene.cloud))?;
        write_file(&dir.join(&image_path), &encode_image(&scene.image))?;
        let record = SceneRecord {
            id: scene.id,
            x: scene.coord.x,
            y: scene.coord.y,
            t_image: scene.t_image.seconds(),
            t_cloud: scene.t_cloud.seconds(),
            cloud_path,
            image_path,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::malformed(&jsonl_path, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&jsonl_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&jsonl_path, e))?;
    Ok(())
}

/// Load a database previously written by [`save_database`].
pub fn load_database(dir: &Path) -> Result<SceneDatabase> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_slice(&read_file(&meta_path)?)
        .map_err(|e| Error::malformed(&meta_path, e.to_string()))?;

    let jsonl_path = dir.join("scenes.jsonl");
    let text = String::from_utf8(read_file(&jsonl_path)?)
        .map_err(|_| Error::malformed(&jsonl_path, "not utf-8"))?;
    let mut scenes = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(line)
            .map_err(|e| Error::malformed(&jsonl_path, e.to_string()))?;
        let cloud = decode_cloud(&dir.join(&record.cloud_path), &read_file(&dir.join(&record.cloud_path))?)?;
        let image = decode_image(&dir.join(&record.image_path), &read_file(&dir.join(&record.image_path))?)?;
        scenes.push(Scene {
            id: record.id,
            image,
            cloud,
            coord: GeoCoordinate::new(record.x, record.y)?,
            t_image: Timestamp::new(record.t_image)?,
            t_cloud: Timestamp::new(record.t_cloud)?,
        });
    }
    if scenes.len() != meta.n_scenes {
        return Err(Error::malformed(
            &jsonl_path,
            format!("meta says {} scenes, found {}", meta.n_scenes, scenes.len()),
        ));
    }
    SceneDatabase::new(scenes, meta.split_tag)
}

/// Stable list of the files that make up a persisted database, relative to
/// its directory, in hashing order.
pub fn database_files(db: &SceneDatabase) -> Vec<PathBuf> {
    let mut files = vec![PathBuf::from("meta.json"), PathBuf::from("scenes.jsonl")];
    for scene in db.scenes() {
        files.push(PathBuf::from(format!("cloud_{:08}.bin", scene.id)));
        files.push(PathBuf::from(format!("image_{:08}.bin", scene.id)));
    }
    files
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, uniform, Stream};

    fn random_scene(id: u64, rng: &mut rand_chacha::ChaCha20Rng) -> Scene {
        let cloud = PointCloud::new(
            (0..16)
                .map(|_| {
                    [
                        uniform(rng, -1.0, 1.0),
                        uniform(rng, -1.0, 1.0),
                        uniform(rng, -1.0, 1.0),
                    ]
                })
                .collect(),
        )
        .unwrap();
        let image = Image::new(
            4,
            4,
            3,
            (0..48).map(|_| uniform(rng, 0.0, 1.0)).collect(),
        )
        .unwrap();
        Scene {
            id,
            image,
            cloud,
            coord: GeoCoordinate::new(uniform(rng, 0.0, 100.0), uniform(rng, 0.0, 100.0)).unwrap(),
            t_image: Timestamp::new(id as f64 + 0.25).unwrap(),
            t_cloud: Timestamp::new(id as f64).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = stream_rng(1, Stream::Test, 0);
        let scenes: Vec<Scene> = (0..5).map(|i| random_scene(i, &mut rng)).collect();
        let db = SceneDatabase::new(scenes, SplitTag::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_database(&db, dir.path()).unwrap();
        let loaded = load_database(dir.path()).unwrap();
        assert_eq!(loaded.split_tag(), db.split_tag());
        assert_eq!(loaded.len(), db.len());
        for (a, b) in db.scenes().iter().zip(loaded.scenes()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.coord, b.coord);
            assert_eq!(a.t_image, b.t_image);
            assert_eq!(a.t_cloud, b.t_cloud);
            assert_eq!(a.cloud, b.cloud);
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn truncated_cloud_is_rejected() {
        let mut rng = stream_rng(2, Stream::Test, 0);
        let db = SceneDatabase::new(vec![random_scene(0, &mut rng)], SplitTag::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_database(&db, dir.path()).unwrap();
        let cloud_path = dir.path().join("cloud_00000000.bin");
        let bytes = fs::read(&cloud_path).unwrap();
        fs::write(&cloud_path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_database(dir.path()),
            Err(Error::Malformed { .. })
        ));
    }
}
