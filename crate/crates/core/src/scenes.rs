//! Synthetic street scenes with ground-truth segmentation, and label-boundary
//! edge maps used as the second generation condition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_stream, mix_seed, SplitMix64};

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SceneClass {
    Background = 0,
    Road = 1,
    Vehicle = 2,
    Sign = 3,
}

impl SceneClass {
    pub const ALL: [SceneClass; NUM_CLASSES] = [
        SceneClass::Background,
        SceneClass::Road,
        SceneClass::Vehicle,
        SceneClass::Sign,
    ];
}

const LAYOUT_SALT: u64 = 0x5CE7_E1A7_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub max_vehicles: u32,
    pub max_signs: u32,
    pub texture_scale: f32,
    /// Base intensity per class, indexed by label.
    pub class_levels: [f32; NUM_CLASSES],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            max_vehicles: 3,
            max_signs: 2,
            texture_scale: 0.05,
            class_levels: [-0.6, -0.2, 0.4, 0.8],
        }
    }
}

impl SceneConfig {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 || self.height > 64 || self.width > 64 {
            return Err(Error::InvalidArgument(format!(
                "scene size {}x{} outside [4, 64]",
                self.height, self.width
            )));
        }
        if !self.class_levels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "class levels must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Row-major `height x width` label grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "label map needs {} values, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn contains(&self, class: SceneClass) -> bool {
        self.labels.contains(&(class as u8))
    }
}

/// Row-major binary grid; each byte is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width || bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument(
                "edge map must be height*width values in {0, 1}".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Row-major intensities in [-1, 1].
    pub image: Vec<f32>,
    pub label_map: LabelMap,
    pub scene_seed: u64,
}

/// Deterministic scene: a road band, up to `max_vehicles` rectangles on the
/// road and up to `max_signs` discs above it, painted in that order.
pub fn generate_scene(scene_seed: u64, cfg: &SceneConfig) -> Scene {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = SplitMix64::new(mix_seed(scene_seed, LAYOUT_SALT));
    let mut labels = vec![SceneClass::Background as u8; h * w];

    let road_top = (h as f64 * rng.range(0.4, 0.6)) as usize;
    let road_h = ((h as f64 * rng.range(0.2, 0.35)) as usize).max(2);
    let road_bottom = (road_top + road_h).min(h);
    for y in road_top..road_bottom {
        labels[y * w..(y + 1) * w].fill(SceneClass::Road as u8);
    }
    let road_h = road_bottom - road_top;

    let vehicles = rng.below(cfg.max_vehicles as u64 + 1);
    for _ in 0..vehicles {
        let vw = (4 + rng.below(6) as usize).min(w);
        let vh = (3 + rng.below(4) as usize).min(road_h);
        let x0 = rng.below((w - vw + 1) as u64) as usize;
        let y0 = road_top + rng.below((road_h - vh + 1) as u64) as usize;
        for y in y0..y0 + vh {
            labels[y * w + x0..y * w + x0 + vw].fill(SceneClass::Vehicle as u8);
        }
    }

    let signs = rng.below(cfg.max_signs as u64 + 1);
    for _ in 0..signs {
        let r = rng.range(1.5, 3.0);
        let cx = rng.range(r, w as f64 - r);
        let cy_max = (road_top as f64 - r).max(r + 0.5);
        let cy = rng.range(r, cy_max);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r * r {
                    labels[y * w + x] = SceneClass::Sign as u8;
                }
            }
        }
    }

    let texture = gaussian_stream(scene_seed, h * w).expect("scene has pixels");
    let image = labels
        .iter()
        .zip(&texture)
        .map(|(&l, &z)| (cfg.class_levels[l as usize] + cfg.texture_scale * z).clamp(-1.0, 1.0))
        .collect();

    Scene {
        image,
        label_map: LabelMap {
            height: h,
            width: w,
            labels,
        },
        scene_seed,
    }
}

/// Marks every pixel with a 4-neighbour of a different label.
pub fn extract_edges(label_map: &LabelMap) -> EdgeMap {
    let (h, w) = (label_map.height, label_map.width);
    let mut bits = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = label_map.get(y, x);
            let differs = (y > 0 && label_map.get(y - 1, x) != l)
                || (y + 1 < h && label_map.get(y + 1, x) != l)
                || (x > 0 && label_map.get(y, x - 1) != l)
                || (x + 1 < w && label_map.get(y, x + 1) != l);
            bits[y * w + x] = differs as u8;
        }
    }
    EdgeMap {
        height: h,
        width: w,
        bits,
    }
}

/// The image a perfect generator would produce for `labels`: each pixel at
/// its class base level, no texture.
pub fn class_level_image(labels: &LabelMap, cfg: &SceneConfig) -> Vec<f32> {
    labels
        .labels
        .iter()
        .map(|&l| cfg.class_levels[l as usize])
        .collect()
}

/// Flat dump: image as f32 LE, then one byte per label, then edge bits
/// packed MSB-first, row-major throughout.
pub fn dump_scene(scene: &Scene) -> Vec<u8> {
    let edges = extract_edges(&scene.label_map);
    let mut out = Vec::with_capacity(scene.image.len() * 5 + edges.bits.len().div_ceil(8));
    for v in &scene.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&scene.label_map.labels);
    for chunk in edges.bits.chunks(8) {
        let mut byte = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            byte |= b << (7 - i);
        }
        out.push(byte);
    }
    out
}

/// Seeds and generator settings that fully determine a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub scene_config: SceneConfig,
    pub train_seeds: Vec<u64>,
    #[serde(default)]
    pub eval_seeds: Vec<u64>,
}

impl DatasetManifest {
    /// `train` consecutive seeds from `base`, then `eval` more after them.
    pub fn sequential(base: u64, train: usize, eval: usize) -> Self {
        Self {
            scene_config: SceneConfig::default(),
            train_seeds: (0..train as u64).map(|i| base + i).collect(),
            eval_seeds: (0..eval as u64).map(|i| base + train as u64 + i).collect(),
        }
    }

    pub fn train_scenes(&self) -> Vec<Scene> {
        self.train_seeds
            .iter()
            .map(|&s| generate_scene(s, &self.scene_config))
            .collect()
    }

    pub fn eval_scenes(&self) -> Vec<Scene> {
        self.eval_seeds
            .iter()
            .map(|&s| generate_scene(s, &self.scene_config))
            .collect()
    }
}
