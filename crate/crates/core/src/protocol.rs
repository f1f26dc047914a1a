//! Message format, transmitter and receiver pipelines, bandwidth accounting
//! and a framed transport.
//!
//! Wire layout (little-endian unless noted):
//!
//! ```text
//! "DGO1" | version u8 = 1 | sampler u8 | basis fingerprint u64 | nonce u64
//! | n u32 | k u32 | k x (index u32, value f32)
//! | H u16 | W u16 | L u8
//! | label runs: (label u8, length u16)...          until H*W pixels
//! | edge runs: length u16, alternating 0/1 from 0   until H*W pixels
//! | CRC32 (IEEE) of everything before it
//! ```
//!
//! Frames on a byte stream are a big-endian u32 payload length followed by
//! the payload.

use std::collections::VecDeque;
use std::io::{ErrorKind, Read, Write};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::diffusion::{
    forward_diffuse, reverse_sample, ConditionSet, DenoiserParams, SamplerMode, Schedule,
};
use crate::error::{Error, Result};
use crate::goqos::GoQosMetric;
use crate::noise_codec::{
    project_gd, reconstruct, reconstruct_checked, residual_norm, truncate_topk, GdConfig,
    SeedBasis, WeightVector,
};
use crate::numerics::gaussian_stream;
use crate::scenes::{extract_edges, EdgeMap, LabelMap, Scene};

pub const MESSAGE_MAGIC: &[u8; 4] = b"DGO1";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 30;
const CRC_LEN: usize = 4;
/// Header, dims block, one label run, one edge run, CRC.
pub const MIN_MESSAGE_LEN: usize = HEADER_LEN + 5 + 3 + 2 + CRC_LEN;
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

/// What crosses the link: sparse weights, the conditions, and enough to
/// replay the transmitter's sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffGoMessage {
    pub basis_fingerprint: u64,
    pub weights: WeightVector,
    pub conditions: ConditionSet,
    pub sampler_mode: SamplerMode,
}

impl DiffGoMessage {
    pub fn k_used(&self) -> usize {
        self.weights.nnz()
    }

    fn sampler_bytes(&self) -> (u8, u64) {
        match self.sampler_mode {
            SamplerMode::Deterministic => (0, 0),
            SamplerMode::Ancestral { nonce } => (1, nonce),
        }
    }
}

fn push_label_runs(out: &mut Vec<u8>, labels: &[u8]) {
    let mut i = 0;
    while i < labels.len() {
        let l = labels[i];
        let mut len = 1;
        while i + len < labels.len() && labels[i + len] == l && len < u16::MAX as usize {
            len += 1;
        }
        out.push(l);
        out.extend_from_slice(&(len as u16).to_le_bytes());
        i += len;
    }
}

fn push_edge_runs(out: &mut Vec<u8>, bits: &[u8]) {
    let mut current = 0u8;
    let mut i = 0;
    loop {
        let mut len = 0usize;
        while i + len < bits.len() && bits[i + len] == current {
            len += 1;
        }
        i += len;
        // Runs longer than u16 are split with an empty run of the other value.
        while len > u16::MAX as usize {
            out.extend_from_slice(&u16::MAX.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            len -= u16::MAX as usize;
        }
        out.extend_from_slice(&(len as u16).to_le_bytes());
        if i >= bits.len() {
            break;
        }
        current ^= 1;
    }
}

/// Run-length encoded conditions block: dims, label runs, edge runs.
pub fn encode_conditions(cond: &ConditionSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(cond.label_map.height as u16).to_le_bytes());
    out.extend_from_slice(&(cond.label_map.width as u16).to_le_bytes());
    out.push(cond.num_labels);
    push_label_runs(&mut out, &cond.label_map.labels);
    push_edge_runs(&mut out, &cond.edge_map.bits);
    out
}

pub fn encode_message(msg: &DiffGoMessage) -> Vec<u8> {
    let entries = msg.weights.entries();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * entries.len() + 64);
    let (mode, nonce) = msg.sampler_bytes();
    out.extend_from_slice(MESSAGE_MAGIC);
    out.push(WIRE_VERSION);
    out.push(mode);
    out.extend_from_slice(&msg.basis_fingerprint.to_le_bytes());
    out.extend_from_slice(&nonce.to_le_bytes());
    out.extend_from_slice(&(msg.weights.n() as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for &(i, v) in entries {
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out.extend(encode_conditions(&msg.conditions));
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::MalformedMessage(format!(
                "message ends at byte {} while reading {n} more",
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Inverse of [`encode_message`].
///
/// The checksum is verified before any field is interpreted, so a damaged
/// byte anywhere is reported as [`Error::CorruptMessage`]. Buffers too short
/// to hold any message are [`Error::MalformedMessage`].
pub fn decode_message(bytes: &[u8]) -> Result<DiffGoMessage> {
    if bytes.len() < MIN_MESSAGE_LEN {
        return Err(Error::MalformedMessage(format!(
            "{} bytes is shorter than the smallest message ({MIN_MESSAGE_LEN})",
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CorruptMessage { stored, computed });
    }
    if &body[..4] != MESSAGE_MAGIC {
        return Err(Error::UnsupportedFormat(format!("magic {:02x?}", &body[..4])));
    }
    if body[4] != WIRE_VERSION {
        return Err(Error::UnsupportedFormat(format!("version {}", body[4])));
    }

    let mut c = Cursor { buf: body, pos: 5 };
    let mode = c.u8()?;
    let basis_fingerprint = c.u64()?;
    let nonce = c.u64()?;
    let sampler_mode = match (mode, nonce) {
        (0, 0) => SamplerMode::Deterministic,
        (0, _) => {
            return Err(Error::MalformedMessage(
                "nonce set for deterministic sampler".into(),
            ))
        }
        (1, nonce) => SamplerMode::Ancestral { nonce },
        (m, _) => return Err(Error::MalformedMessage(format!("sampler mode {m}"))),
    };

    let n = c.u32()? as usize;
    let k = c.u32()? as usize;
    if k > n {
        return Err(Error::MalformedMessage(format!("k = {k} exceeds n = {n}")));
    }
    let mut entries = Vec::with_capacity(k);
    for _ in 0..k {
        let idx = c.u32()?;
        let val = f32::from_bits(c.u32()?);
        entries.push((idx, val));
    }
    let weights = WeightVector::from_entries(n, entries)
        .map_err(|e| Error::MalformedMessage(e.to_string()))?;

    let h = c.u16()? as usize;
    let w = c.u16()? as usize;
    let num_labels = c.u8()?;
    if h == 0 || w == 0 {
        return Err(Error::MalformedMessage(format!("condition size {h}x{w}")));
    }
    let total = h * w;
    let mut labels = Vec::with_capacity(total);
    while labels.len() < total {
        let l = c.u8()?;
        let len = c.u16()? as usize;
        if len == 0 {
            return Err(Error::MalformedMessage("empty label run".into()));
        }
        if l >= num_labels {
            return Err(Error::MalformedMessage(format!(
                "label {l} outside [0, {num_labels})"
            )));
        }
        if labels.len() + len > total {
            return Err(Error::MalformedMessage("label runs overflow the map".into()));
        }
        labels.resize(labels.len() + len, l);
    }
    let mut bits = Vec::with_capacity(total);
    let mut current = 0u8;
    while bits.len() < total {
        let len = c.u16()? as usize;
        if bits.len() + len > total {
            return Err(Error::MalformedMessage("edge runs overflow the map".into()));
        }
        bits.resize(bits.len() + len, current);
        current ^= 1;
    }
    if c.pos != body.len() {
        return Err(Error::MalformedMessage(format!(
            "{} trailing bytes before checksum",
            body.len() - c.pos
        )));
    }
    let conditions = ConditionSet::new(
        LabelMap::new(h, w, labels)?,
        EdgeMap::new(h, w, bits)?,
        num_labels,
    )
    .map_err(|e| Error::MalformedMessage(e.to_string()))?;

    Ok(DiffGoMessage {
        basis_fingerprint,
        weights,
        conditions,
        sampler_mode,
    })
}

/// Reliable, ordered delivery of whole messages.
pub trait Transport {
    fn send(&mut self, payload: &[u8]) -> Result<()>;
    fn receive(&mut self) -> Result<Vec<u8>>;
}

/// Length-prefixed frames over any byte stream.
#[derive(Debug)]
pub struct FramedStreamTransport<S> {
    stream: S,
}

impl<S> FramedStreamTransport<S> {
    pub fn into_inner(self) -> S {
        self.stream
    }
}

pub fn framed_stream_transport<S: Read + Write>(stream: S) -> FramedStreamTransport<S> {
    FramedStreamTransport { stream }
}

impl<S: Read + Write> Transport for FramedStreamTransport<S> {
    fn send(&mut self, payload: &[u8]) -> Result<()> {
        if payload.len() > MAX_FRAME_LEN {
            return Err(Error::FrameTooLarge(payload.len() as u64));
        }
        let mut frame = Vec::with_capacity(4 + payload.len());
        frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        frame.extend_from_slice(payload);
        self.stream.write_all(&frame)?;
        self.stream.flush()?;
        Ok(())
    }

    fn receive(&mut self) -> Result<Vec<u8>> {
        let mut len_buf = [0u8; 4];
        let got = read_full(&mut self.stream, &mut len_buf)?;
        if got == 0 {
            return Err(Error::Closed);
        }
        if got < 4 {
            return Err(Error::TruncatedFrame);
        }
        let len = u32::from_be_bytes(len_buf) as usize;
        if len > MAX_FRAME_LEN {
            return Err(Error::FrameTooLarge(len as u64));
        }
        let mut payload = vec![0u8; len];
        if read_full(&mut self.stream, &mut payload)? < len {
            return Err(Error::TruncatedFrame);
        }
        Ok(payload)
    }
}

/// Reads until `buf` is full or the stream ends; returns bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

/// Shared in-process byte FIFO; clones are endpoints of the same pipe.
#[derive(Clone, Debug, Default)]
pub struct MemoryPipe {
    bytes: Arc<Mutex<VecDeque<u8>>>,
}

impl Read for MemoryPipe {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let mut q = self.bytes.lock().expect("pipe lock poisoned");
        let n = buf.len().min(q.len());
        for (dst, src) in buf.iter_mut().zip(q.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}

impl Write for MemoryPipe {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.bytes
            .lock()
            .expect("pipe lock poisoned")
            .extend(buf.iter().copied());
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

pub type InMemoryTransport = FramedStreamTransport<MemoryPipe>;

/// A FIFO transport with the same framing as the stream variant. Clone the
/// returned pipe with [`in_memory_pair`] to hand one end to a receiver.
pub fn in_memory_transport() -> InMemoryTransport {
    framed_stream_transport(MemoryPipe::default())
}

/// Two transports sharing one pipe: what one sends, the other receives.
pub fn in_memory_pair() -> (InMemoryTransport, InMemoryTransport) {
    let pipe = MemoryPipe::default();
    (framed_stream_transport(pipe.clone()), framed_stream_transport(pipe))
}

/// Everything the transmitter needs besides the scene and shared state.
#[derive(Clone, Debug)]
pub struct TransmitConfig {
    pub tau: f64,
    /// Strictly increasing weight counts tried before the full basis.
    pub hierarchy: Vec<usize>,
    pub forward_seed: u64,
    pub sampler_mode: SamplerMode,
    pub projection: GdConfig,
}

impl TransmitConfig {
    pub fn new(tau: f64, hierarchy: Vec<usize>, forward_seed: u64) -> Self {
        Self {
            tau,
            hierarchy,
            forward_seed,
            sampler_mode: SamplerMode::Deterministic,
            projection: GdConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeedbackEntry {
    /// Requested weight count (`n_i`, or `n` for the final fallback).
    pub n_i: usize,
    /// Nonzero weights actually kept.
    pub k_used: usize,
    pub metric_id: String,
    pub score: f64,
    pub latent_residual: f64,
}

#[derive(Clone, Debug)]
pub struct TransmitOutcome {
    pub message: DiffGoMessage,
    pub feedback_log: Vec<FeedbackEntry>,
    /// The locally generated image the receiver will reproduce.
    pub accepted_candidate: Vec<f32>,
    /// Terminal latent from forward diffusion.
    pub latent: Vec<f32>,
    /// Full projection weights before truncation.
    pub full_weights: WeightVector,
}

impl TransmitOutcome {
    pub fn accepted(&self) -> &FeedbackEntry {
        self.feedback_log.last().expect("feedback log is never empty")
    }
}

fn check_hierarchy(hierarchy: &[usize], n: usize) -> Result<()> {
    if hierarchy.first() == Some(&0) {
        return Err(Error::InvalidArgument("hierarchy entries must be positive".into()));
    }
    if !hierarchy.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidArgument(format!(
            "hierarchy {hierarchy:?} is not strictly increasing"
        )));
    }
    if hierarchy.last().is_some_and(|&last| last >= n) {
        return Err(Error::InvalidArgument(format!(
            "hierarchy {hierarchy:?} must stay below the basis size {n}"
        )));
    }
    Ok(())
}

/// Terminal latent for `image` under a pinned forward-noise seed.
pub fn terminal_latent(image: &[f32], sched: &Schedule, forward_seed: u64) -> Result<Vec<f32>> {
    let eps = gaussian_stream(forward_seed, image.len())?;
    forward_diffuse(image, sched.steps(), &eps, sched)
}

/// Generates locally what the receiver would generate from `weights`.
pub fn local_candidate(
    weights: &WeightVector,
    cond: &ConditionSet,
    model: &DenoiserParams,
    basis: &SeedBasis,
    sched: &Schedule,
    mode: SamplerMode,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let x_hat = reconstruct(weights, basis)?;
    let candidate = reverse_sample(model, &x_hat, cond, sched, mode)?;
    Ok((x_hat, candidate))
}

/// Hierarchical weight sharing with local generative feedback: try the top
/// `n_1 < n_2 < ...` weights, then all `n`, and send the first whose
/// locally generated image scores at most `tau`.
pub fn transmit_pipeline(
    scene: &Scene,
    model: &DenoiserParams,
    basis: &SeedBasis,
    sched: &Schedule,
    metric: &dyn GoQosMetric,
    cfg: &TransmitConfig,
) -> Result<TransmitOutcome> {
    check_hierarchy(&cfg.hierarchy, basis.len())?;
    let latent = terminal_latent(&scene.image, sched, cfg.forward_seed)?;
    let conditions = ConditionSet::from_labels(scene.label_map.clone());
    let full_weights = project_gd(&latent, basis, &cfg.projection)?;

    let mut feedback_log = Vec::new();
    let mut chosen = None;
    for &n_i in cfg.hierarchy.iter().chain(std::iter::once(&basis.len())) {
        let w_hat = truncate_topk(&full_weights, n_i)?;
        let (x_hat, candidate) =
            local_candidate(&w_hat, &conditions, model, basis, sched, cfg.sampler_mode)?;
        let score = metric.score(&candidate, scene)?;
        feedback_log.push(FeedbackEntry {
            n_i,
            k_used: w_hat.nnz(),
            metric_id: score.metric_id.clone(),
            score: score.value,
            latent_residual: residual_norm(&latent, &x_hat),
        });
        let passes = score.value <= cfg.tau;
        chosen = Some((w_hat, candidate));
        if passes {
            break;
        }
    }
    let (weights, accepted_candidate) = chosen.expect("at least the full basis is tried");
    Ok(TransmitOutcome {
        message: DiffGoMessage {
            basis_fingerprint: basis.fingerprint(),
            weights,
            conditions,
            sampler_mode: cfg.sampler_mode,
        },
        feedback_log,
        accepted_candidate,
        latent,
        full_weights,
    })
}

/// Regenerates the transmitter's accepted image from a message.
pub fn receive_pipeline(
    msg: &DiffGoMessage,
    model: &DenoiserParams,
    basis: &SeedBasis,
    sched: &Schedule,
) -> Result<Vec<f32>> {
    let x_hat = reconstruct_checked(&msg.weights, msg.basis_fingerprint, basis)?;
    reverse_sample(model, &x_hat, &msg.conditions, sched, msg.sampler_mode)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Top-k seed-basis weights plus both conditions.
    DiffGo,
    /// The full terminal latent plus both conditions.
    Od,
    /// Both conditions; the receiver draws its own latent.
    Rn,
    /// Segmentation map only; the receiver draws its own latent.
    Gesco,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DiffGo => "diffgo",
            Method::Od => "od",
            Method::Rn => "rn",
            Method::Gesco => "gesco",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diffgo" | "diff-go" => Ok(Method::DiffGo),
            "od" => Ok(Method::Od),
            "rn" => Ok(Method::Rn),
            "gesco" => Ok(Method::Gesco),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Transmitted volume in float-equivalents, split the way the comparison
/// tables report it: `C` label symbols, `E` edge bits / 32, and extras.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Accounting {
    pub method: Method,
    pub condition_symbols: usize,
    pub edge_float_equiv: f64,
    pub extra_floats: usize,
    pub total_float_equiv: f64,
    pub wire_bytes: usize,
}

impl Accounting {
    /// `C`, `C+E`, `C+E+k` style label.
    pub fn pattern(&self) -> String {
        let mut s = "C".to_string();
        if self.edge_float_equiv > 0.0 {
            s.push_str("+E");
        }
        if self.extra_floats > 0 {
            s.push_str(&format!("+{}", self.extra_floats));
        }
        s
    }
}

pub fn floats_transmitted(msg: &DiffGoMessage, method: Method) -> Accounting {
    let cond = &msg.conditions;
    let pixels = cond.pixels();
    let c = pixels;
    let e = pixels as f64 / 32.0;
    let bare = DiffGoMessage {
        weights: WeightVector::zeros(msg.weights.n()),
        ..msg.clone()
    };
    let bare_bytes = encode_message(&bare).len();
    let mut edge_runs = Vec::new();
    push_edge_runs(&mut edge_runs, &cond.edge_map.bits);

    let (edge, extra, wire_bytes) = match method {
        Method::DiffGo => (e, msg.k_used(), encode_message(msg).len()),
        Method::Od => (e, pixels, bare_bytes + 4 * pixels),
        Method::Rn => (e, 0, bare_bytes),
        Method::Gesco => (0.0, 0, bare_bytes - edge_runs.len()),
    };
    Accounting {
        method,
        condition_symbols: c,
        edge_float_equiv: edge,
        extra_floats: extra,
        total_float_equiv: c as f64 + edge + extra as f64,
        wire_bytes,
    }
}

/// Conditions a receiver can rebuild from a segmentation map alone.
pub fn conditions_from_labels(labels: &LabelMap) -> ConditionSet {
    ConditionSet::new(labels.clone(), extract_edges(labels), crate::scenes::NUM_CLASSES as u8)
        .expect("scene labels are in range")
}
