//! Goal-oriented quality scores. Every metric is lower-is-better so the
//! transmitter's acceptance test is always `score <= tau`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sqrtm_psd, SymMatrix};
use crate::scenes::{extract_edges, EdgeMap, LabelMap, Scene, SceneConfig, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricScore {
    pub value: f64,
    pub metric_id: String,
}

impl MetricScore {
    fn new(metric_id: &str, value: f64) -> Self {
        Self {
            value,
            metric_id: metric_id.to_string(),
        }
    }
}

pub const PATCH_SIZE: usize = 8;
pub const PATCH_STRIDE: usize = 4;
pub const FEATURE_DIM: usize = 6;
const COV_RIDGE: f64 = 1e-6;

/// Mean, standard deviation, edge density, and the fractions of labels 1, 2
/// and 3 under one patch.
pub type PatchFeature = [f64; FEATURE_DIM];

/// An image with the labels its features are read against.
#[derive(Clone, Copy, Debug)]
pub struct LabeledImage<'a> {
    pub image: &'a [f32],
    pub labels: &'a LabelMap,
}

/// Features of every `PATCH_SIZE` patch at `PATCH_STRIDE`.
pub fn patch_features(item: LabeledImage<'_>) -> Vec<PatchFeature> {
    let (h, w) = (item.labels.height, item.labels.width);
    let edges = extract_edges(item.labels);
    let mut out = Vec::new();
    if h < PATCH_SIZE || w < PATCH_SIZE {
        return out;
    }
    let area = (PATCH_SIZE * PATCH_SIZE) as f64;
    for y0 in (0..=h - PATCH_SIZE).step_by(PATCH_STRIDE) {
        for x0 in (0..=w - PATCH_SIZE).step_by(PATCH_STRIDE) {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut edge = 0.0;
            let mut classes = [0.0; NUM_CLASSES];
            for y in y0..y0 + PATCH_SIZE {
                for x in x0..x0 + PATCH_SIZE {
                    let i = y * w + x;
                    let v = item.image[i] as f64;
                    sum += v;
                    sq += v * v;
                    edge += edges.bits[i] as f64;
                    if let Some(c) = classes.get_mut(item.labels.labels[i] as usize) {
                        *c += 1.0;
                    }
                }
            }
            let mean = sum / area;
            let var = (sq / area - mean * mean).max(0.0);
            out.push([
                mean,
                var.sqrt(),
                edge / area,
                classes[1] / area,
                classes[2] / area,
                classes[3] / area,
            ]);
        }
    }
    out
}

/// Sample mean and (unbiased) covariance of a feature cloud.
#[derive(Clone, Debug)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
}

pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianFit> {
    let dim = features.first().map_or(0, Vec::len);
    let needed = 2 * dim.max(1);
    if features.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: features.len(),
        });
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = SymMatrix::from_fn(dim, |i, j| {
        features
            .iter()
            .map(|f| (f[i] - mean[i]) * (f[j] - mean[j]))
            .sum::<f64>()
            / (n - 1.0)
    });
    cov.add_ridge(COV_RIDGE);
    Ok(GaussianFit { mean, cov })
}

/// Squared Fréchet distance between two Gaussians.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let root_a = sqrtm_psd(&a.cov)?;
    let dim = a.cov.dim();
    let inner = crate::numerics::matmul_square(
        &root_a.matmul(&b.cov),
        root_a.as_row_major(),
        dim,
    );
    // Symmetrize rounding noise before taking the root.
    let inner = SymMatrix::from_fn(dim, |i, j| 0.5 * (inner[i * dim + j] + inner[j * dim + i]));
    let cross = sqrtm_psd(&inner)?.trace();
    Ok((mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

fn feature_cloud(set: &[LabeledImage<'_>]) -> Vec<Vec<f64>> {
    set.iter()
        .flat_map(|&item| patch_features(item))
        .map(|f| f.to_vec())
        .collect()
}

/// Fréchet distance between the patch-feature distributions of two sets.
pub fn toy_fid(set_a: &[LabeledImage<'_>], set_b: &[LabeledImage<'_>]) -> Result<MetricScore> {
    let fa = fit_gaussian(&feature_cloud(set_a))?;
    let fb = fit_gaussian(&feature_cloud(set_b))?;
    Ok(MetricScore::new("toy_fid", frechet_distance(&fa, &fb)?))
}

/// `1 - |a & b| / |a | b|`; zero when both maps are empty.
pub fn edge_iou(a: &EdgeMap, b: &EdgeMap) -> Result<MetricScore> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::InvalidArgument(format!(
            "edge maps are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    let value = if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    };
    Ok(MetricScore::new("edge_iou", value))
}

/// Labels each pixel with the class whose base level is nearest.
pub fn segment_by_levels(image: &[f32], height: usize, width: usize, cfg: &SceneConfig) -> LabelMap {
    let cuts: Vec<f32> = cfg
        .class_levels
        .windows(2)
        .map(|w| 0.5 * (w[0] + w[1]))
        .collect();
    let labels = image
        .iter()
        .map(|&v| cuts.iter().filter(|&&c| v >= c).count() as u8)
        .collect();
    LabelMap {
        height,
        width,
        labels,
    }
}

/// `1 - mean IoU` of the level-threshold segmentation of `image_hat`,
/// averaged over the classes present in `truth`.
pub fn downstream_miou(image_hat: &[f32], truth: &LabelMap, cfg: &SceneConfig) -> Result<MetricScore> {
    if image_hat.len() != truth.labels.len() {
        return Err(Error::InvalidArgument(format!(
            "image has {} pixels, labels have {}",
            image_hat.len(),
            truth.labels.len()
        )));
    }
    let pred = segment_by_levels(image_hat, truth.height, truth.width, cfg);
    let mut inter = [0usize; NUM_CLASSES];
    let mut union = [0usize; NUM_CLASSES];
    let mut present = [false; NUM_CLASSES];
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        let (p, t) = (p as usize, t as usize);
        present[t] = true;
        if p == t {
            inter[t] += 1;
            union[t] += 1;
        } else {
            union[t] += 1;
            union[p] += 1;
        }
    }
    let ious: Vec<f64> = (0..NUM_CLASSES)
        .filter(|&c| present[c])
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    let mean = if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    Ok(MetricScore::new("downstream_miou", 1.0 - mean))
}

pub fn rmse(a: &[f32], b: &[f32]) -> Result<MetricScore> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "images have {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(MetricScore::new("rmse", (sq / a.len() as f64).sqrt()))
}

/// A score of a generated image against the scene it should reproduce.
pub trait GoQosMetric: Send + Sync {
    fn id(&self) -> &'static str;
    fn score(&self, candidate: &[f32], scene: &Scene) -> Result<MetricScore>;
}

/// The built-in metrics, selectable by name in configs and on the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ToyFid,
    EdgeIou,
    DownstreamMiou,
    Rmse,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::ToyFid,
        MetricKind::EdgeIou,
        MetricKind::DownstreamMiou,
        MetricKind::Rmse,
    ];

    pub fn with_config(self, cfg: SceneConfig) -> SceneMetric {
        SceneMetric { kind: self, cfg }
    }
}

/// A [`MetricKind`] bound to the scene settings it needs for segmentation.
#[derive(Clone, Debug)]
pub struct SceneMetric {
    pub kind: MetricKind,
    pub cfg: SceneConfig,
}

impl GoQosMetric for SceneMetric {
    fn id(&self) -> &'static str {
        match self.kind {
            MetricKind::ToyFid => "toy_fid",
            MetricKind::EdgeIou => "edge_iou",
            MetricKind::DownstreamMiou => "downstream_miou",
            MetricKind::Rmse => "rmse",
        }
    }

    fn score(&self, candidate: &[f32], scene: &Scene) -> Result<MetricScore> {
        let truth = &scene.label_map;
        match self.kind {
            MetricKind::ToyFid => {
                let seg = segment_by_levels(candidate, truth.height, truth.width, &self.cfg);
                toy_fid(
                    &[LabeledImage {
                        image: candidate,
                        labels: &seg,
                    }],
                    &[LabeledImage {
                        image: &scene.image,
                        labels: truth,
                    }],
                )
            }
            MetricKind::EdgeIou => {
                let seg = segment_by_levels(candidate, truth.height, truth.width, &self.cfg);
                edge_iou(&extract_edges(&seg), &extract_edges(truth))
            }
            MetricKind::DownstreamMiou => downstream_miou(candidate, truth, &self.cfg),
            MetricKind::Rmse => rmse(candidate, &scene.image),
        }
    }
}

/// One `metric_id,value,k,scene_seed` report row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric_id: String,
    pub value: f64,
    pub k: usize,
    pub scene_seed: u64,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "metric_id,value,k,scene_seed";

    pub fn to_csv_line(&self) -> String {
        format!("{},{},{},{}", self.metric_id, self.value, self.k, self.scene_seed)
    }
}
