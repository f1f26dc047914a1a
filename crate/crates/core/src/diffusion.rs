//! Conditional denoising diffusion at desk scale.
//!
//! The noise predictor is a two-hidden-layer tanh MLP over the noisy image,
//! both conditions and a sinusoidal time embedding, plus a per-timestep
//! affine skip (scalar on `x_t`, scalar on the edge map, bias per class)
//! that training starts at the per-class Gaussian prior predictor.
//! Gradients are derived by hand; training follows the quantized-latent
//! loop in which every draw at the terminal step is replaced by its
//! projection onto the shared seed basis.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::noise_codec::{project_gd, reconstruct, GdConfig, SeedBasis};
use crate::numerics::{dot, gaussian_stream, mix_seed, SplitMix64};
use crate::scenes::{extract_edges, EdgeMap, LabelMap, NUM_CLASSES};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.1;

/// Variance schedule; index `t - 1` holds step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// `T` betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut running = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                running *= a;
                running
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    /// 100 steps, beta from 1e-4 to 0.1 (`alpha_bar_T` is about 0.0056).
    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Whether the terminal latent is close to isotropic noise.
    pub fn is_near_isotropic(&self) -> bool {
        self.alpha_bar(self.steps()) < 0.01
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Closed-form marginal `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(x0: &[f32], t: usize, eps: &[f32], sched: &Schedule) -> Result<Vec<f32>> {
    sched.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::InvalidArgument(format!(
            "image has {} elements, noise has {}",
            x0.len(),
            eps.len()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (s * x as f64 + n * e as f64) as f32)
        .collect())
}

/// Segmentation labels and their edge map, as consumed by the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub label_map: LabelMap,
    pub edge_map: EdgeMap,
    pub num_labels: u8,
}

impl ConditionSet {
    pub fn new(label_map: LabelMap, edge_map: EdgeMap, num_labels: u8) -> Result<Self> {
        if label_map.height != edge_map.height || label_map.width != edge_map.width {
            return Err(Error::InvalidArgument(
                "label and edge maps have different shapes".into(),
            ));
        }
        if num_labels < 2 {
            return Err(Error::InvalidArgument("need at least two label classes".into()));
        }
        if let Some(&l) = label_map.labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside [0, {num_labels})"
            )));
        }
        if edge_map.bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("edge map is not binary".into()));
        }
        Ok(Self {
            label_map,
            edge_map,
            num_labels,
        })
    }

    /// Derives the edge map from the labels.
    pub fn from_labels(label_map: LabelMap) -> Self {
        let edge_map = extract_edges(&label_map);
        Self {
            label_map,
            edge_map,
            num_labels: NUM_CLASSES as u8,
        }
    }

    pub fn pixels(&self) -> usize {
        self.label_map.labels.len()
    }

    /// Concatenated label channel (scaled to [0, 1]) and edge channel.
    fn channels(&self) -> Vec<f64> {
        let scale = 1.0 / (self.num_labels - 1) as f64;
        self.label_map
            .labels
            .iter()
            .map(|&l| l as f64 * scale)
            .chain(self.edge_map.bits.iter().map(|&b| b as f64))
            .collect()
    }
}

/// Shape of the reference noise predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub num_labels: usize,
}

impl Architecture {
    pub fn reference(dim: usize, steps: usize) -> Self {
        Self {
            dim,
            hidden: 256,
            time_dim: 32,
            steps,
            num_labels: NUM_CLASSES,
        }
    }

    pub fn input_dim(&self) -> usize {
        3 * self.dim + self.time_dim
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut next = |len: usize| {
            let r = offset..offset + len;
            offset += len;
            r
        };
        let (h, d, i, t) = (self.hidden, self.dim, self.input_dim(), self.steps);
        let w1 = next(h * i);
        let b1 = next(h);
        let w2 = next(h * h);
        let b2 = next(h);
        let w3 = next(d * h);
        let b3 = next(d);
        let skip_x = next(t);
        let skip_edge = next(t);
        let skip_class = next(t * self.num_labels);
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            skip_x,
            skip_edge,
            skip_class,
            total: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.steps == 0 || self.num_labels < 2 {
            return Err(Error::InvalidArgument(format!("invalid architecture {self:?}")));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("time embedding width must be even".into()));
        }
        Ok(())
    }
}

type Range = std::ops::Range<usize>;

#[derive(Clone, Debug)]
struct Layout {
    w1: Range,
    b1: Range,
    w2: Range,
    b2: Range,
    w3: Range,
    b3: Range,
    skip_x: Range,
    skip_edge: Range,
    skip_class: Range,
    total: usize,
}

/// Names of the parameter tensors in declaration (and checkpoint) order.
pub const TENSOR_NAMES: [&str; 9] = [
    "w1",
    "b1",
    "w2",
    "b2",
    "w3",
    "b3",
    "skip_x",
    "skip_edge",
    "skip_class",
];

/// Sinusoidal embedding of step `t`: sines then cosines.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Flat parameter vector for the noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    arch: Architecture,
    init_seed: u64,
    values: Vec<f64>,
}

impl DenoiserParams {
    /// Scaled Gaussian weights (f32-representable), zero biases and skips.
    pub fn init(arch: Architecture, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut values = vec![0.0; layout.total];
        for (salt, range, fan_in) in [
            (1u64, layout.w1.clone(), arch.input_dim()),
            (2, layout.w2.clone(), arch.hidden),
            (3, layout.w3.clone(), arch.hidden),
        ] {
            let scale = 1.0 / (fan_in as f64).sqrt();
            let draws = gaussian_stream(mix_seed(init_seed, salt), range.len())?;
            for (v, z) in values[range].iter_mut().zip(draws) {
                *v = (z as f64 * scale) as f32 as f64;
            }
        }
        Ok(Self {
            arch,
            init_seed,
            values,
        })
    }

    /// Sets the skip to the minimum-mean-square noise predictor for pixels
    /// drawn independently around their class mean with variance `var`:
    /// `sigma_t (x_t - sqrt(ab_t) m) / (ab_t var + sigma_t^2)`.
    pub fn init_skip_prior(&mut self, sched: &Schedule, prior: &ClassPrior) -> Result<()> {
        let a = self.arch;
        if sched.steps() != a.steps || prior.means.len() != a.num_labels || prior.var.is_nan() || prior.var < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "prior needs {} steps, {} class means and a nonnegative variance",
                a.steps, a.num_labels
            )));
        }
        let l = a.layout();
        for t in 1..=a.steps {
            let ab = sched.alpha_bar(t);
            let sn = (1.0 - ab).sqrt();
            let gain = sn / (ab * prior.var + sn * sn);
            self.values[l.skip_x.start + t - 1] = gain;
            self.values[l.skip_edge.start + t - 1] = 0.0;
            for (c, &m) in prior.means.iter().enumerate() {
                self.values[l.skip_class.start + (t - 1) * a.num_labels + c] = -ab.sqrt() * m * gain;
            }
        }
        Ok(())
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            init_seed: 0,
            values: vec![0.0; arch.param_count()],
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Slices of each named tensor, in [`TENSOR_NAMES`] order.
    pub fn tensor_ranges(&self) -> Vec<(&'static str, Range)> {
        let l = self.arch.layout();
        TENSOR_NAMES
            .iter()
            .copied()
            .zip([l.w1, l.b1, l.w2, l.b2, l.w3, l.b3, l.skip_x, l.skip_edge, l.skip_class])
            .collect()
    }

    /// Rounds every parameter to the nearest f32 so the in-memory model and
    /// its checkpoint are the same function.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    fn check_cond(&self, cond: &ConditionSet) -> Result<()> {
        if cond.pixels() != self.arch.dim {
            return Err(Error::InvalidArgument(format!(
                "conditions cover {} pixels, model dimension is {}",
                cond.pixels(),
                self.arch.dim
            )));
        }
        if cond.num_labels as usize != self.arch.num_labels {
            return Err(Error::InvalidArgument(format!(
                "conditions use {} labels, model expects {}",
                cond.num_labels, self.arch.num_labels
            )));
        }
        Ok(())
    }

    /// Binds a condition set, caching its contribution to the first layer.
    pub fn bind<'a>(&'a self, cond: &ConditionSet) -> Result<BoundDenoiser<'a>> {
        self.check_cond(cond)?;
        let a = &self.arch;
        let l = a.layout();
        let channels = cond.channels();
        let w1 = &self.values[l.w1.clone()];
        let inp = a.input_dim();
        let cond_pre = (0..a.hidden)
            .map(|j| dot(&w1[j * inp + a.dim..j * inp + 3 * a.dim], &channels))
            .collect();
        let time_embeddings = (1..=a.steps).map(|t| time_embedding(t, a.time_dim)).collect();
        Ok(BoundDenoiser {
            params: self,
            layout: l,
            labels: cond.label_map.labels.clone(),
            edges: cond.edge_map.bits.iter().map(|&b| b as f64).collect(),
            channels,
            cond_pre,
            time_embeddings,
        })
    }

    /// Writes the checkpoint: `DGM1`, dims header, f32 values, CRC32.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let bytes = self.checkpoint_bytes();
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let a = &self.arch;
        let mut buf = Vec::with_capacity(48 + 4 * self.values.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [a.dim, a.hidden, a.time_dim, a.steps, a.num_labels] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.init_seed.to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        Self::from_checkpoint_bytes(&buf)
    }

    pub fn from_checkpoint_bytes(buf: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 5 * 4 + 8 + 8;
        if buf.len() < HEADER + 4 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        if &buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checkpoint(format!(
                "checksum {stored:#010x} != computed {computed:#010x}"
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as usize;
        let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap());
        let arch = Architecture {
            dim: u32_at(4),
            hidden: u32_at(8),
            time_dim: u32_at(12),
            steps: u32_at(16),
            num_labels: u32_at(20),
        };
        arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let init_seed = u64_at(24);
        let count = u64_at(32) as usize;
        if count != arch.param_count() || body.len() != HEADER + 4 * count {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match architecture {arch:?}"
            )));
        }
        let values = body[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            arch,
            init_seed,
            values,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DGM1";

/// Anything that predicts the noise in `x_t` at step `t`.
pub trait NoisePredictor {
    fn dim(&self) -> usize;
    fn predict_noise(&self, x_t: &[f64], t: usize) -> Vec<f64>;
}

/// A denoiser with one condition set bound to it.
pub struct BoundDenoiser<'a> {
    params: &'a DenoiserParams,
    layout: Layout,
    labels: Vec<u8>,
    edges: Vec<f64>,
    channels: Vec<f64>,
    cond_pre: Vec<f64>,
    time_embeddings: Vec<Vec<f64>>,
}

struct Activations {
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl BoundDenoiser<'_> {
    fn forward(&self, x_t: &[f64], t: usize) -> Activations {
        let a = &self.params.arch;
        let l = &self.layout;
        let p = &self.params.values;
        let inp = a.input_dim();
        let (d, h) = (a.dim, a.hidden);
        let temb = &self.time_embeddings[t - 1];

        let w1 = &p[l.w1.clone()];
        let b1 = &p[l.b1.clone()];
        let h1: Vec<f64> = (0..h)
            .map(|j| {
                let row = &w1[j * inp..(j + 1) * inp];
                let z = b1[j] + dot(&row[..d], x_t) + self.cond_pre[j] + dot(&row[3 * d..], temb);
                z.tanh()
            })
            .collect();

        let w2 = &p[l.w2.clone()];
        let b2 = &p[l.b2.clone()];
        let h2: Vec<f64> = (0..h)
            .map(|j| (b2[j] + dot(&w2[j * h..(j + 1) * h], &h1)).tanh())
            .collect();

        let w3 = &p[l.w3.clone()];
        let b3 = &p[l.b3.clone()];
        let sx = p[l.skip_x.start + t - 1];
        let se = p[l.skip_edge.start + t - 1];
        let sc = &p[l.skip_class.start + (t - 1) * a.num_labels..][..a.num_labels];
        let out = (0..d)
            .map(|i| {
                b3[i]
                    + dot(&w3[i * h..(i + 1) * h], &h2)
                    + sx * x_t[i]
                    + se * self.edges[i]
                    + sc[self.labels[i] as usize]
            })
            .collect();
        Activations { h1, h2, out }
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d out`.
    fn backward(&self, x_t: &[f64], t: usize, acts: &Activations, g_out: &[f64], grad: &mut [f64]) {
        let a = &self.params.arch;
        let l = &self.layout;
        let p = &self.params.values;
        let (d, h, inp) = (a.dim, a.hidden, a.input_dim());

        for (gb, &g) in grad[l.b3.clone()].iter_mut().zip(g_out) {
            *gb += g;
        }
        grad[l.skip_x.start + t - 1] += dot(g_out, x_t);
        grad[l.skip_edge.start + t - 1] += dot(g_out, &self.edges);
        let class_base = l.skip_class.start + (t - 1) * a.num_labels;
        for (&lab, &g) in self.labels.iter().zip(g_out) {
            grad[class_base + lab as usize] += g;
        }

        let w3 = &p[l.w3.clone()];
        let mut dh2 = vec![0.0; h];
        {
            let gw3 = &mut grad[l.w3.clone()];
            for i in 0..d {
                let g = g_out[i];
                if g == 0.0 {
                    continue;
                }
                for (gw, &hv) in gw3[i * h..(i + 1) * h].iter_mut().zip(&acts.h2) {
                    *gw += g * hv;
                }
                for (dv, &wv) in dh2.iter_mut().zip(&w3[i * h..(i + 1) * h]) {
                    *dv += g * wv;
                }
            }
        }
        let dz2: Vec<f64> = dh2.iter().zip(&acts.h2).map(|(g, y)| g * (1.0 - y * y)).collect();

        for (gb, &g) in grad[l.b2.clone()].iter_mut().zip(&dz2) {
            *gb += g;
        }
        let w2 = &p[l.w2.clone()];
        let mut dh1 = vec![0.0; h];
        {
            let gw2 = &mut grad[l.w2.clone()];
            for j in 0..h {
                let g = dz2[j];
                for (gw, &hv) in gw2[j * h..(j + 1) * h].iter_mut().zip(&acts.h1) {
                    *gw += g * hv;
                }
                for (dv, &wv) in dh1.iter_mut().zip(&w2[j * h..(j + 1) * h]) {
                    *dv += g * wv;
                }
            }
        }
        let dz1: Vec<f64> = dh1.iter().zip(&acts.h1).map(|(g, y)| g * (1.0 - y * y)).collect();

        for (gb, &g) in grad[l.b1.clone()].iter_mut().zip(&dz1) {
            *gb += g;
        }
        let temb = &self.time_embeddings[t - 1];
        let gw1 = &mut grad[l.w1.clone()];
        for (j, &g) in dz1.iter().enumerate() {
            let row = &mut gw1[j * inp..(j + 1) * inp];
            let (rx, rest) = row.split_at_mut(d);
            let (rc, rt) = rest.split_at_mut(2 * d);
            for (gw, &v) in rx.iter_mut().zip(x_t) {
                *gw += g * v;
            }
            for (gw, &v) in rc.iter_mut().zip(&self.channels) {
                *gw += g * v;
            }
            for (gw, &v) in rt.iter_mut().zip(temb) {
                *gw += g * v;
            }
        }
    }

    /// Mean squared error against `target`; adds its gradient (scaled by
    /// `weight`) into `grad` when given.
    pub fn loss_and_grad(
        &self,
        x_t: &[f64],
        t: usize,
        target: &[f64],
        weight: f64,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let acts = self.forward(x_t, t);
        let d = target.len() as f64;
        let loss = acts
            .out
            .iter()
            .zip(target)
            .map(|(o, y)| (o - y) * (o - y))
            .sum::<f64>()
            / d;
        if let Some(grad) = grad {
            let g_out: Vec<f64> = acts
                .out
                .iter()
                .zip(target)
                .map(|(o, y)| weight * 2.0 * (o - y) / d)
                .collect();
            self.backward(x_t, t, &acts, &g_out, grad);
        }
        loss
    }
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn dim(&self) -> usize {
        self.params.arch.dim
    }

    fn predict_noise(&self, x_t: &[f64], t: usize) -> Vec<f64> {
        self.forward(x_t, t).out
    }
}

/// Predicted noise for `x_t` at step `t` under `cond`.
pub fn denoiser_predict(
    params: &DenoiserParams,
    x_t: &[f64],
    t: usize,
    cond: &ConditionSet,
) -> Result<Vec<f64>> {
    if t == 0 || t > params.arch.steps {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside [1, {}]",
            params.arch.steps
        )));
    }
    if x_t.len() != params.arch.dim {
        return Err(Error::InvalidArgument(format!(
            "latent has {} elements, model dimension is {}",
            x_t.len(),
            params.arch.dim
        )));
    }
    Ok(params.bind(cond)?.predict_noise(x_t, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    /// DDIM-style update with no injected noise.
    Deterministic,
    /// DDPM posterior with `sigma_t^2 = beta_t`; step noise seeded by
    /// `nonce ^ t`.
    Ancestral { nonce: u64 },
}

/// Runs the reverse chain from `x_T` down to step 1 and returns the final
/// clean-image estimate.
pub fn reverse_sample_with<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x_big_t: &[f32],
    sched: &Schedule,
    mode: SamplerMode,
) -> Result<Vec<f32>> {
    let d = predictor.dim();
    if x_big_t.len() != d {
        return Err(Error::InvalidArgument(format!(
            "latent has {} elements, model dimension is {d}",
            x_big_t.len()
        )));
    }
    let mut x: Vec<f64> = x_big_t.iter().map(|&v| v as f64).collect();
    let mut x0_hat = vec![0.0; d];
    for t in (1..=sched.steps()).rev() {
        let eps = predictor.predict_noise(&x, t);
        let ab = sched.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in 0..d {
            x0_hat[i] = ((x[i] - sn * eps[i]) / sa).clamp(-1.0, 1.0);
        }
        if t == 1 {
            break;
        }
        let ab_prev = sched.alpha_bar(t - 1);
        match mode {
            SamplerMode::Deterministic => {
                let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                for i in 0..d {
                    x[i] = pa * x0_hat[i] + pn * eps[i];
                }
            }
            SamplerMode::Ancestral { nonce } => {
                let beta = sched.beta(t);
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let z = gaussian_stream(nonce ^ t as u64, d)?;
                let sigma = beta.sqrt();
                for i in 0..d {
                    x[i] = c0 * x0_hat[i] + ct * x[i] + sigma * z[i] as f64;
                }
            }
        }
    }
    Ok(x0_hat.into_iter().map(|v| v as f32).collect())
}

/// [`reverse_sample_with`] for the reference model and a condition set.
pub fn reverse_sample(
    params: &DenoiserParams,
    x_big_t: &[f32],
    cond: &ConditionSet,
    sched: &Schedule,
    mode: SamplerMode,
) -> Result<Vec<f32>> {
    if sched.steps() != params.arch.steps {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} steps, model was built for {}",
            sched.steps(),
            params.arch.steps
        )));
    }
    reverse_sample_with(&params.bind(cond)?, x_big_t, sched, mode)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub train_seed: u64,
    pub init_seed: u64,
    pub hidden: usize,
    pub time_dim: usize,
    pub projection: GdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            train_seed: 0x7EA1_D1FF,
            init_seed: 0x1417,
            hidden: 256,
            time_dim: 32,
            projection: GdConfig::default(),
        }
    }
}

/// Trained parameters and the per-step mean batch loss.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: DenoiserParams,
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first and last `window` steps.
    pub fn loss_drop(&self, window: usize) -> Option<(f64, f64)> {
        if self.losses.len() < window || window == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((
            mean(&self.losses[..window]),
            mean(&self.losses[self.losses.len() - window..]),
        ))
    }
}

/// One training example: a clean image and its conditions.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub image: Vec<f32>,
    pub cond: ConditionSet,
}

/// Draws the noisy input and regression target for one training sample.
/// At the terminal step the latent is replaced by its projection onto the
/// basis and the target becomes the noise that projection implies.
pub fn training_pair(
    image: &[f32],
    t: usize,
    eps: &[f32],
    basis: &SeedBasis,
    sched: &Schedule,
    gd: &GdConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x_t = forward_diffuse(image, t, eps, sched)?;
    if t == sched.steps() {
        let w = project_gd(&x_t, basis, gd)?;
        let x_hat = reconstruct(&w, basis)?;
        let ab = sched.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let target = x_hat
            .iter()
            .zip(image)
            .map(|(&xh, &x0)| (xh as f64 - sa * x0 as f64) / sn)
            .collect();
        Ok((x_hat.iter().map(|&v| v as f64).collect(), target))
    } else {
        Ok((
            x_t.iter().map(|&v| v as f64).collect(),
            eps.iter().map(|&v| v as f64).collect(),
        ))
    }
}

/// Trains the reference denoiser with Adam. Fully determined by the dataset
/// order, the basis, the schedule and `cfg`.
/// Per-label pixel means and the pooled within-label variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrior {
    pub means: Vec<f64>,
    pub var: f64,
}

impl ClassPrior {
    /// Statistics of a dataset; absent labels get mean 0.
    pub fn from_dataset(dataset: &[TrainingExample], num_labels: usize) -> Self {
        let mut sum = vec![0.0; num_labels];
        let mut count = vec![0usize; num_labels];
        for ex in dataset {
            for (&v, &lab) in ex.image.iter().zip(&ex.cond.label_map.labels) {
                if let Some(s) = sum.get_mut(lab as usize) {
                    *s += v as f64;
                    count[lab as usize] += 1;
                }
            }
        }
        let means: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect();
        let (mut sq, mut total) = (0.0, 0usize);
        for ex in dataset {
            for (&v, &lab) in ex.image.iter().zip(&ex.cond.label_map.labels) {
                if let Some(&m) = means.get(lab as usize) {
                    sq += (v as f64 - m).powi(2);
                    total += 1;
                }
            }
        }
        let var = if total == 0 { 0.0 } else { sq / total as f64 };
        Self { means, var }
    }
}

pub fn train_diffgo(
    dataset: &[TrainingExample],
    basis: &SeedBasis,
    sched: &Schedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_diffgo_with_progress(dataset, basis, sched, cfg, |_, _| {})
}

pub fn train_diffgo_with_progress(
    dataset: &[TrainingExample],
    basis: &SeedBasis,
    sched: &Schedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    let dim = first.image.len();
    if basis.dim() != dim {
        return Err(Error::InvalidArgument(format!(
            "basis dimension {} does not match image size {dim}",
            basis.dim()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let arch = Architecture {
        dim,
        hidden: cfg.hidden,
        time_dim: cfg.time_dim,
        steps: sched.steps(),
        num_labels: first.cond.num_labels as usize,
    };
    let mut params = DenoiserParams::init(arch, cfg.init_seed)?;
    for ex in dataset {
        params.check_cond(&ex.cond)?;
        if ex.image.len() != dim {
            return Err(Error::InvalidArgument("images differ in size".into()));
        }
    }
    params.init_skip_prior(sched, &ClassPrior::from_dataset(dataset, arch.num_labels))?;

    let n_params = params.values.len();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut losses = Vec::with_capacity(cfg.steps);
    let weight = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut rng = SplitMix64::new(mix_seed(cfg.train_seed, step as u64));
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let ex = &dataset[rng.below(dataset.len() as u64) as usize];
            let t = 1 + rng.below(sched.steps() as u64) as usize;
            let eps = gaussian_stream(rng.next_u64(), dim)?;
            let (x_t, target) = training_pair(&ex.image, t, &eps, basis, sched, &cfg.projection)?;
            let bound = params.bind(&ex.cond)?;
            batch_loss += weight * bound.loss_and_grad(&x_t, t, &target, weight, Some(&mut grad));
        }
        losses.push(batch_loss);
        progress(step, batch_loss);

        let k = (step + 1) as i32;
        let c1 = 1.0 - cfg.beta1.powi(k);
        let c2 = 1.0 - cfg.beta2.powi(k);
        for i in 0..n_params {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            params.values[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
    params.round_to_f32();
    Ok(TrainReport { params, losses })
}
