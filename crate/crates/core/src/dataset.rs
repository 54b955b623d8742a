//! Scene datasets on disk.
//!
//! A dataset directory holds one `SCN1` record per scene and an `index.txt`
//! listing the record file names in order. Record layout (little-endian):
//!
//! ```text
//! magic "SCN1" | version u32 | C u32 | H u32 | W u32 | K u32
//! seed u64 | min_objects u32 | max_objects u32
//! C·H·W f32 pixels (channel-major) | H·W u8 labels
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::semantics::{generate_scene, Scene, SceneParams, NUM_CLASSES};
use crate::tensor::{Shape, Tensor};
use crate::wire::{ByteReader, ByteWriter};

pub const SCENE_MAGIC: &[u8; 4] = b"SCN1";
const SCENE_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.txt";

/// Which disjoint seed stream a scene set is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// `count` scenes whose seeds derive from `(seed, split, i)`.
pub fn generate_scenes(
    seed: u64,
    split: Split,
    count: usize,
    params: &SceneParams,
) -> Result<Vec<Scene>> {
    let stream = match split {
        Split::Train => rng::stream::DATASET,
        Split::Validation => rng::stream::VALIDATION,
        Split::Test => rng::stream::TEST,
    };
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(rng::derive_seed(seed, stream, i as u64), params))
        .collect()
}

pub fn scene_to_bytes(scene: &Scene) -> Vec<u8> {
    let s = scene.shape();
    let mut w = ByteWriter::new();
    w.bytes(SCENE_MAGIC)
        .u32(SCENE_VERSION)
        .u32(s.channels as u32)
        .u32(s.height as u32)
        .u32(s.width as u32)
        .u32(NUM_CLASSES as u32)
        .u64(scene.seed)
        .u32(scene.params.min_objects as u32)
        .u32(scene.params.max_objects as u32);
    for v in scene.image.data() {
        w.f32(*v as f32);
    }
    w.bytes(&scene.labels);
    w.finish()
}

pub fn scene_from_bytes(bytes: &[u8]) -> Result<Scene> {
    let mut r = ByteReader::new(bytes, "scene record");
    r.expect_magic(SCENE_MAGIC)?;
    let version = r.u32("version")?;
    if version != SCENE_VERSION {
        return Err(Error::format(format!("scene record: unsupported version {version}")));
    }
    let c = r.u32("channels")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let k = r.u32("class count")? as usize;
    if c == 0 || h == 0 || w == 0 || k == 0 || k > NUM_CLASSES {
        return Err(Error::format(format!(
            "scene record: bad dimensions {c}x{h}x{w} with {k} classes"
        )));
    }
    let seed = r.u64("seed")?;
    let min_objects = r.u32("min objects")? as usize;
    let max_objects = r.u32("max objects")? as usize;
    let shape = Shape::new(c, h, w);
    let pixels = r.f32_vec(shape.numel(), "pixels")?;
    let labels = r.take(shape.plane(), "labels")?.to_vec();
    r.finish()?;
    if let Some(l) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::format(format!("scene record: label {l} outside 0..{k}")));
    }
    let image = Tensor::from_vec(shape, pixels.into_iter().map(|v| v as f64).collect())?;
    if !image.is_finite() {
        return Err(Error::format("scene record: non-finite pixel"));
    }
    Ok(Scene {
        seed,
        image,
        labels,
        params: SceneParams {
            height: h,
            width: w,
            min_objects,
            max_objects,
        },
    })
}

fn record_name(i: usize) -> String {
    format!("scene_{i:05}.scn")
}

/// Writes records and the index into `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (i, scene) in scenes.iter().enumerate() {
        let name = record_name(i);
        fs::write(dir.join(&name), scene_to_bytes(scene))?;
        index.push_str(&name);
        index.push('\n');
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let index_path = dir.join(INDEX_FILE);
    let index = fs::read_to_string(&index_path).map_err(|e| {
        Error::format(format!("cannot read dataset index {}: {e}", index_path.display()))
    })?;
    let paths: Vec<PathBuf> = index
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| dir.join(l))
        .collect();
    if paths.is_empty() {
        return Err(Error::format(format!("dataset {} is empty", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            scene_from_bytes(&fs::read(p)?)
                .map_err(|e| Error::format(format!("{}: {e}", p.display())))
        })
        .collect()
}
