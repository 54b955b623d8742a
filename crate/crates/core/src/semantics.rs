//! Synthetic street-like scenes and the semantic condition extractor.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Shape, Tensor};

pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const VEHICLE: u8 = 2;
pub const PEDESTRIAN: u8 = 3;
pub const SKY: u8 = 4;
pub const NUM_CLASSES: usize = 5;
pub const MAX_CLASSES: usize = 16;

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.25;

/// Class colours in [0, 1] RGB, mapped to [−1, 1] when rendered.
const PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [0.35, 0.45, 0.30],
    [0.25, 0.25, 0.28],
    [0.80, 0.15, 0.15],
    [0.95, 0.85, 0.20],
    [0.45, 0.65, 0.95],
];

/// Segmentation labels plus an edge bitmap, both H×W row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticCondition {
    num_classes: usize,
    height: usize,
    width: usize,
    segmentation: Vec<u8>,
    edges: Vec<u8>,
}

impl SemanticCondition {
    pub fn new(
        num_classes: usize,
        height: usize,
        width: usize,
        segmentation: Vec<u8>,
        edges: Vec<u8>,
    ) -> Result<Self> {
        if num_classes == 0 || num_classes > MAX_CLASSES {
            return Err(Error::config(format!(
                "class count {num_classes} outside 1..={MAX_CLASSES}"
            )));
        }
        let plane = height * width;
        if segmentation.len() != plane || edges.len() != plane {
            return Err(Error::config(format!(
                "condition maps must hold {plane} entries, got {} labels and {} edges",
                segmentation.len(),
                edges.len()
            )));
        }
        if let Some(l) = segmentation.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::config(format!(
                "label {l} outside 0..{num_classes}"
            )));
        }
        if edges.iter().any(|&e| e > 1) {
            return Err(Error::config("edge map must be binary"));
        }
        Ok(SemanticCondition {
            num_classes,
            height,
            width,
            segmentation,
            edges,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn segmentation(&self) -> &[u8] {
        &self.segmentation
    }

    pub fn edges(&self) -> &[u8] {
        &self.edges
    }

    /// Channels fed to the denoiser: `K + 1`.
    pub fn channel_count(&self) -> usize {
        self.num_classes + 1
    }

    /// K one-hot planes followed by the edge plane, values in {0, 1}.
    pub fn to_channels(&self) -> Tensor {
        let plane = self.height * self.width;
        let shape = Shape::new(self.channel_count(), self.height, self.width);
        let mut t = Tensor::zeros(shape);
        let data = t.data_mut();
        for (p, &l) in self.segmentation.iter().enumerate() {
            data[l as usize * plane + p] = 1.0;
        }
        let edge_base = self.num_classes * plane;
        for (p, &e) in self.edges.iter().enumerate() {
            data[edge_base + p] = e as f64;
        }
        t
    }

    pub fn edge_density(&self) -> f64 {
        self.edges.iter().map(|&e| e as usize).sum::<usize>() as f64 / self.edges.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 32,
            width: 32,
            min_objects: 1,
            max_objects: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub image: Tensor,
    pub labels: Vec<u8>,
    pub params: SceneParams,
}

impl Scene {
    pub fn shape(&self) -> Shape {
        self.image.shape()
    }
}

fn render(labels: &[u8], height: usize, width: usize) -> Tensor {
    let shape = Shape::new(3, height, width);
    let plane = shape.plane();
    let mut img = Tensor::zeros(shape);
    let data = img.data_mut();
    for (p, &l) in labels.iter().enumerate() {
        for (c, v) in PALETTE[l as usize].iter().enumerate() {
            // kept on the f32 grid so stored scene records reload exactly
            data[c * plane + p] = (v * 2.0 - 1.0) as f32 as f64;
        }
    }
    img
}

/// Renders a deterministic scene: sky band, background strip, road, and a
/// handful of vehicles (rectangles) and pedestrians (ellipses).
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    let (h, w) = (params.height, params.width);
    if h < 16 || w < 16 {
        return Err(Error::config(format!("scene must be at least 16x16, got {h}x{w}")));
    }
    if params.min_objects > params.max_objects {
        return Err(Error::config("min_objects exceeds max_objects"));
    }
    let mut rng = rng::seeded(seed);
    let mut labels = vec![BACKGROUND; h * w];
    let horizon = rng.gen_range(h / 4..h / 2);
    let road_top = rng.gen_range(horizon + 2..horizon + 8).min(h - 2);
    for y in 0..h {
        let class = if y < horizon {
            SKY
        } else if y >= road_top {
            ROAD
        } else {
            BACKGROUND
        };
        labels[y * w..(y + 1) * w].fill(class);
    }

    let count = rng.gen_range(params.min_objects..=params.max_objects);
    for _ in 0..count {
        if rng.gen_bool(0.5) {
            let ow = rng.gen_range((w * 5 / 32).max(3)..=(w * 9 / 32).max(4));
            let oh = rng.gen_range((h * 3 / 32).max(2)..=(h * 5 / 32).max(3));
            let x = rng.gen_range(0..=w - ow);
            let y_hi = h - oh;
            let y_lo = road_top.saturating_sub(oh / 2).min(y_hi);
            let y = rng.gen_range(y_lo..=y_hi);
            for row in labels[y * w..(y + oh) * w].chunks_mut(w) {
                row[x..x + ow].fill(VEHICLE);
            }
        } else {
            let ow = rng.gen_range((w / 16).max(2)..=(w * 3 / 32).max(2));
            let oh = rng.gen_range((h * 5 / 32).max(3)..=(h * 8 / 32).max(4));
            let x = rng.gen_range(0..=w - ow);
            let y_hi = h - oh;
            let y_lo = horizon.max(road_top.saturating_sub(oh)).min(y_hi);
            let y = rng.gen_range(y_lo..=y_hi);
            let (cy, cx) = (y as f64 + oh as f64 / 2.0, x as f64 + ow as f64 / 2.0);
            let (ry, rx) = (oh as f64 / 2.0, ow as f64 / 2.0);
            for py in y..y + oh {
                for px in x..x + ow {
                    let dy = (py as f64 + 0.5 - cy) / ry;
                    let dx = (px as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        labels[py * w + px] = PEDESTRIAN;
                    }
                }
            }
        }
    }

    let image = render(&labels, h, w);
    Ok(Scene {
        seed,
        image,
        labels,
        params: *params,
    })
}

/// Edge bitmap: 1 where the largest per-channel central-difference gradient
/// magnitude exceeds `threshold`. Borders replicate the edge pixel.
pub fn edge_map(image: &Tensor, threshold: f64) -> Vec<u8> {
    let shape = image.shape();
    let (h, w) = (shape.height, shape.width);
    let mut best = vec![0.0f64; h * w];
    for c in 0..shape.channels {
        let ch = image.channel(c);
        for y in 0..h {
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let gx = (ch[y * w + xr] - ch[y * w + xl]) / 2.0;
                let gy = (ch[yd * w + x] - ch[yu * w + x]) / 2.0;
                let mag = (gx * gx + gy * gy).sqrt();
                let slot = &mut best[y * w + x];
                if mag > *slot {
                    *slot = mag;
                }
            }
        }
    }
    best.iter().map(|&m| (m > threshold) as u8).collect()
}

/// Oracle extractor: segmentation is the provided label map; edges come from
/// the image gradient.
pub fn extract_conditions(
    image: &Tensor,
    labels: &[u8],
    num_classes: usize,
    edge_threshold: f64,
) -> Result<SemanticCondition> {
    let shape = image.shape();
    if labels.len() != shape.plane() {
        return Err(Error::config(format!(
            "label map has {} entries, image plane has {}",
            labels.len(),
            shape.plane()
        )));
    }
    SemanticCondition::new(
        num_classes,
        shape.height,
        shape.width,
        labels.to_vec(),
        edge_map(image, edge_threshold),
    )
}

pub fn scene_conditions(scene: &Scene, edge_threshold: f64) -> Result<SemanticCondition> {
    extract_conditions(&scene.image, &scene.labels, NUM_CLASSES, edge_threshold)
}
