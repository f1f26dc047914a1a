//! Experiment driver behind the `diffgo` binary.
//!
//! Every artifact is a function of the config file, the dataset manifest it
//! points to and the command-line inputs. Exit codes: 0 success, 2 config
//! error, 3 missing artifact, 4 runtime error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{
    reverse_sample, train_diffgo_with_progress, ConditionSet, DenoiserParams, SamplerMode,
    Schedule, TrainConfig, TrainingExample, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
};
use crate::error::Error;
use crate::goqos::{GoQosMetric, MetricKind};
use crate::noise_codec::{residual_norm, SeedBasis, WeightVector};
use crate::numerics::{gaussian_stream, mix_seed};
use crate::protocol::{
    conditions_from_labels, decode_message, encode_message, floats_transmitted,
    in_memory_pair, receive_pipeline, terminal_latent, transmit_pipeline, Accounting,
    DiffGoMessage, Method, TransmitConfig, Transport,
};
use crate::scenes::{dump_scene, generate_scene, DatasetManifest, Scene, SceneConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const CHECKPOINT_FILE: &str = "model.dgm";
pub const BASIS_FILE: &str = "basis.json";
pub const CONFIG_HASH_FILE: &str = "config.sha256";
pub const LOSS_FILE: &str = "loss.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// A failed command: the exit code plus a message for stderr.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self { code: EXIT_MISSING, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::BasisMismatch { .. } => CliError::config(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSettings {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_seed: u64,
    pub init_seed: u64,
    pub hidden: usize,
    pub time_dim: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            train_seed: d.train_seed,
            init_seed: d.init_seed,
            hidden: d.hidden,
            time_dim: d.time_dim,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            train_seed: self.train_seed,
            init_seed: self.init_seed,
            hidden: self.hidden,
            time_dim: self.time_dim,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest, relative to the config file.
    pub manifest: PathBuf,
    pub basis_seeds: Vec<u64>,
    pub schedule: ScheduleSettings,
    pub train: TrainSettings,
    /// Weight counts tried before the full basis.
    pub hierarchy: Vec<usize>,
    /// Acceptance threshold per metric (scores are lower-is-better).
    pub tau: BTreeMap<MetricKind, f64>,
    /// Metric that gates hierarchical weight sharing.
    pub gate_metric: MetricKind,
    /// Salt for the per-scene forward-diffusion noise.
    pub forward_seed: u64,
    /// Salt for receiver-side random latents (RN and GESCO).
    pub random_latent_seed: u64,
    /// Artifact directory, relative to the config file.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            basis_seeds: (1..=128).collect(),
            schedule: ScheduleSettings::default(),
            train: TrainSettings::default(),
            hierarchy: vec![1, 8, 32],
            tau: BTreeMap::from([
                (MetricKind::ToyFid, 0.01),
                (MetricKind::EdgeIou, 0.05),
                (MetricKind::DownstreamMiou, 0.02),
                (MetricKind::Rmse, 0.1),
            ]),
            gate_metric: MetricKind::DownstreamMiou,
            forward_seed: 0xF0E1_D2C3,
            random_latent_seed: 0x5EED_0F4A,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.basis_seeds.is_empty() {
            return Err(CliError::config("basis_seeds is empty"));
        }
        if self.train.batch_size == 0 || self.train.hidden == 0 || self.train.time_dim == 0 {
            return Err(CliError::config("train batch_size, hidden and time_dim must be positive"));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(CliError::config(format!("train lr {} is not positive", self.train.lr)));
        }
        if self.hierarchy.first() == Some(&0) || !self.hierarchy.windows(2).all(|w| w[0] < w[1]) {
            return Err(CliError::config(format!(
                "hierarchy {:?} must be strictly increasing positive counts",
                self.hierarchy
            )));
        }
        if self.hierarchy.last().is_some_and(|&h| h >= self.basis_seeds.len()) {
            return Err(CliError::config(format!(
                "hierarchy {:?} must stay below the basis size {}",
                self.hierarchy,
                self.basis_seeds.len()
            )));
        }
        let tau = self.gate_tau()?;
        if tau.is_nan() {
            return Err(CliError::config("tau is NaN"));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> CliResult<Schedule> {
        let s = &self.schedule;
        Schedule::linear(s.steps, s.beta_start, s.beta_end).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn gate_tau(&self) -> CliResult<f64> {
        self.tau.get(&self.gate_metric).copied().ok_or_else(|| {
            CliError::config(format!("no tau configured for gate metric {:?}", self.gate_metric))
        })
    }

    /// Forward-diffusion seed for one scene.
    pub fn forward_seed_for(&self, scene_seed: u64) -> u64 {
        mix_seed(self.forward_seed, scene_seed)
    }

    /// Receiver-side latent seed for one scene.
    pub fn random_latent_seed_for(&self, scene_seed: u64) -> u64 {
        mix_seed(self.random_latent_seed, scene_seed)
    }
}

/// Basis description written next to the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisRecord {
    pub dim: usize,
    pub seeds: Vec<u64>,
    pub fingerprint: u64,
}

/// A loaded config with its manifest, basis and schedule.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub manifest: DatasetManifest,
    pub basis: SeedBasis,
    pub schedule: Schedule,
    pub output_dir: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::config(format!("invalid {what} {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("config types serialize");
    bytes.push(b'\n');
    bytes
}

impl Experiment {
    /// Loads `config_path`; `out` overrides the configured output directory.
    pub fn load(config_path: &Path, out: Option<&Path>) -> CliResult<Self> {
        let config: ExperimentConfig = read_json(config_path, "config")?;
        let base = config_path.parent().unwrap_or(Path::new("."));
        let manifest: DatasetManifest = read_json(&base.join(&config.manifest), "manifest")?;
        let output_dir = out.map_or_else(|| base.join(&config.output_dir), Path::to_path_buf);
        Self::from_parts(config, manifest, output_dir)
    }

    pub fn from_parts(config: ExperimentConfig, manifest: DatasetManifest, output_dir: PathBuf) -> CliResult<Self> {
        config.validate()?;
        manifest
            .scene_config
            .validate()
            .map_err(|e| CliError::config(format!("manifest scene config: {e}")))?;
        if manifest.train_seeds.is_empty() {
            return Err(CliError::config("manifest has no training seeds"));
        }
        let schedule = config.schedule()?;
        let basis = SeedBasis::build(&config.basis_seeds, manifest.scene_config.pixels())
            .map_err(|e| CliError::config(format!("basis: {e}")))?;
        Ok(Self {
            config,
            manifest,
            basis,
            schedule,
            output_dir,
        })
    }

    pub fn scene_config(&self) -> &SceneConfig {
        &self.manifest.scene_config
    }

    /// SHA-256 over the serialized config and manifest.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(serde_json::to_vec(&self.manifest).expect("manifest serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn basis_record(&self) -> BasisRecord {
        BasisRecord {
            dim: self.basis.dim(),
            seeds: self.basis.seeds().to_vec(),
            fingerprint: self.basis.fingerprint(),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join(CHECKPOINT_FILE)
    }

    /// Reads the trained model and checks it against this config.
    pub fn load_model(&self) -> CliResult<DenoiserParams> {
        let path = self.checkpoint_path();
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CliError::missing(format!(
                    "checkpoint {} not found; run `diffgo train` first",
                    path.display()
                )))
            }
            Err(e) => return Err(CliError::runtime(format!("cannot read {}: {e}", path.display()))),
        };
        let params = DenoiserParams::from_checkpoint_bytes(&bytes)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        let arch = params.architecture();
        if arch.dim != self.basis.dim() || arch.steps != self.schedule.steps() {
            return Err(CliError::config(format!(
                "checkpoint is for dim {} and {} steps, config has dim {} and {} steps",
                arch.dim,
                arch.steps,
                self.basis.dim(),
                self.schedule.steps()
            )));
        }
        let basis_path = self.output_dir.join(BASIS_FILE);
        if basis_path.exists() {
            let record: BasisRecord = read_json(&basis_path, "basis record")?;
            if record != self.basis_record() {
                return Err(CliError::config(format!(
                    "{} does not match the configured basis",
                    basis_path.display()
                )));
            }
        }
        Ok(params)
    }

    pub fn training_set(&self) -> Vec<TrainingExample> {
        self.manifest
            .train_scenes()
            .into_iter()
            .map(|s| TrainingExample {
                image: s.image,
                cond: ConditionSet::from_labels(s.label_map),
            })
            .collect()
    }

    pub fn scene(&self, scene_seed: u64) -> Scene {
        generate_scene(scene_seed, self.scene_config())
    }

    pub fn transmit_config(&self, scene_seed: u64) -> CliResult<TransmitConfig> {
        Ok(TransmitConfig::new(
            self.config.gate_tau()?,
            self.config.hierarchy.clone(),
            self.config.forward_seed_for(scene_seed),
        ))
    }
}

/// Output of `train`.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub params: DenoiserParams,
    pub losses: Vec<f64>,
    pub config_hash: String,
}

impl TrainArtifacts {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(s, "{i},{l}").unwrap();
        }
        s
    }
}

/// Trains the model and writes checkpoint, basis record, config hash and
/// loss curve into the output directory.
pub fn cmd_train(exp: &Experiment) -> CliResult<TrainArtifacts> {
    let data = exp.training_set();
    let report = train_diffgo_with_progress(
        &data,
        &exp.basis,
        &exp.schedule,
        &exp.config.train.to_train_config(),
        |_, _| {},
    )?;
    let artifacts = TrainArtifacts {
        params: report.params,
        losses: report.losses,
        config_hash: exp.config_hash(),
    };
    let dir = &exp.output_dir;
    write_file(&dir.join(CHECKPOINT_FILE), &artifacts.params.checkpoint_bytes())?;
    write_file(&dir.join(BASIS_FILE), &to_json_bytes(&exp.basis_record()))?;
    write_file(&dir.join(CONFIG_HASH_FILE), format!("{}\n", artifacts.config_hash).as_bytes())?;
    write_file(&dir.join(LOSS_FILE), artifacts.loss_csv().as_bytes())?;
    Ok(artifacts)
}

/// Image a method delivers for one scene, with what it cost on the wire.
#[derive(Clone, Debug)]
pub struct MethodOutput {
    pub method: Method,
    pub scene_seed: u64,
    /// Image generated on the sending side (or the direct reference path).
    pub local: Vec<f32>,
    /// Image regenerated after encode, transport and decode.
    pub received: Vec<f32>,
    pub accounting: Accounting,
    pub k_used: usize,
    pub latent_residual: Option<f64>,
}

impl MethodOutput {
    pub fn byte_equal(&self) -> bool {
        self.local.len() == self.received.len()
            && self.local.iter().zip(&self.received).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn latent_bytes(latent: &[f32]) -> Vec<u8> {
    latent.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn latent_from_bytes(bytes: &[u8], dim: usize) -> CliResult<Vec<f32>> {
    if bytes.len() != 4 * dim {
        return Err(CliError::runtime(format!(
            "latent frame has {} bytes, expected {}",
            bytes.len(),
            4 * dim
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Runs one method on one scene, including the receiver replay over an
/// in-memory transport.
pub fn run_method(
    exp: &Experiment,
    model: &DenoiserParams,
    scene: &Scene,
    method: Method,
) -> CliResult<MethodOutput> {
    let sched = &exp.schedule;
    let basis = &exp.basis;
    let mode = SamplerMode::Deterministic;
    let (mut tx, mut rx) = in_memory_pair();
    let cond = ConditionSet::from_labels(scene.label_map.clone());

    let mut latent_frame = None;
    let (local, message, k_used, latent_residual) = match method {
        Method::DiffGo => {
            let metric = exp.config.gate_metric.with_config(exp.scene_config().clone());
            let cfg = exp.transmit_config(scene.scene_seed)?;
            let outcome = transmit_pipeline(scene, model, basis, sched, &metric, &cfg)?;
            let accepted = outcome.accepted().clone();
            (
                outcome.accepted_candidate,
                outcome.message,
                accepted.k_used,
                Some(accepted.latent_residual),
            )
        }
        Method::Od => {
            let latent = terminal_latent(&scene.image, sched, exp.config.forward_seed_for(scene.scene_seed))?;
            let local = reverse_sample(model, &latent, &cond, sched, mode)?;
            latent_frame = Some(latent_bytes(&latent));
            (local, bare_message(basis, cond.clone(), mode), basis.dim(), Some(0.0))
        }
        Method::Rn | Method::Gesco => {
            let cond = if method == Method::Gesco {
                conditions_from_labels(&scene.label_map)
            } else {
                cond.clone()
            };
            let latent = gaussian_stream(exp.config.random_latent_seed_for(scene.scene_seed), basis.dim())?;
            let local = reverse_sample(model, &latent, &cond, sched, mode)?;
            (local, bare_message(basis, cond, mode), 0, None)
        }
    };
    tx.send(&encode_message(&message))?;
    if let Some(frame) = latent_frame {
        tx.send(&frame)?;
    }

    let received_msg = decode_message(&rx.receive()?)?;
    let received = match method {
        Method::DiffGo => receive_pipeline(&received_msg, model, basis, sched)?,
        Method::Od => {
            let latent = latent_from_bytes(&rx.receive()?, basis.dim())?;
            reverse_sample(model, &latent, &received_msg.conditions, sched, received_msg.sampler_mode)?
        }
        Method::Rn | Method::Gesco => {
            let cond = if method == Method::Gesco {
                conditions_from_labels(&received_msg.conditions.label_map)
            } else {
                received_msg.conditions.clone()
            };
            let latent = gaussian_stream(exp.config.random_latent_seed_for(scene.scene_seed), basis.dim())?;
            reverse_sample(model, &latent, &cond, sched, received_msg.sampler_mode)?
        }
    };
    Ok(MethodOutput {
        method,
        scene_seed: scene.scene_seed,
        local,
        received,
        accounting: floats_transmitted(&message, method),
        k_used,
        latent_residual,
    })
}

fn bare_message(basis: &SeedBasis, conditions: ConditionSet, mode: SamplerMode) -> DiffGoMessage {
    DiffGoMessage {
        basis_fingerprint: basis.fingerprint(),
        weights: WeightVector::zeros(basis.len()),
        conditions,
        sampler_mode: mode,
    }
}

/// Scores of the received image under every built-in metric, in
/// [`MetricKind::ALL`] order.
pub fn score_all(exp: &Experiment, image: &[f32], scene: &Scene) -> CliResult<Vec<f64>> {
    MetricKind::ALL
        .iter()
        .map(|k| Ok(k.with_config(exp.scene_config().clone()).score(image, scene)?.value))
        .collect()
}

/// One row of the `run` report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub method: Method,
    pub scene_seed: u64,
    pub k_used: usize,
    pub toy_fid: f64,
    pub edge_iou: f64,
    pub downstream_miou: f64,
    pub rmse: f64,
    pub accounting: Accounting,
    pub byte_equal: bool,
}

impl RunRow {
    pub const CSV_HEADER: &'static str = "method,scene_seed,k_used,toy_fid,edge_iou,downstream_miou,rmse,\
pattern,condition_symbols,edge_float_equiv,extra_floats,total_float_equiv,wire_bytes,byte_equal";

    pub fn to_csv_line(&self) -> String {
        let a = &self.accounting;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method.name(),
            self.scene_seed,
            self.k_used,
            self.toy_fid,
            self.edge_iou,
            self.downstream_miou,
            self.rmse,
            a.pattern(),
            a.condition_symbols,
            a.edge_float_equiv,
            a.extra_floats,
            a.total_float_equiv,
            a.wire_bytes,
            self.byte_equal
        )
    }
}

pub fn cmd_run(exp: &Experiment, scene_seeds: &[u64], methods: &[Method]) -> CliResult<Vec<RunRow>> {
    let model = exp.load_model()?;
    let mut rows = Vec::new();
    for &seed in scene_seeds {
        let scene = exp.scene(seed);
        for &method in methods {
            let out = run_method(exp, &model, &scene, method)?;
            let s = score_all(exp, &out.received, &scene)?;
            rows.push(RunRow {
                method,
                scene_seed: seed,
                k_used: out.k_used,
                toy_fid: s[0],
                edge_iou: s[1],
                downstream_miou: s[2],
                rmse: s[3],
                byte_equal: out.byte_equal(),
                accounting: out.accounting,
            });
        }
    }
    Ok(rows)
}

pub fn run_csv(rows: &[RunRow]) -> String {
    let mut s = format!("{}\n", RunRow::CSV_HEADER);
    for r in rows {
        writeln!(s, "{}", r.to_csv_line()).unwrap();
    }
    s
}

/// Mean scores over the evaluation set for one forced weight count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub k: usize,
    pub residual_norm: f64,
    pub toy_fid: f64,
    pub edge_iou: f64,
    pub downstream_miou: f64,
    pub rmse: f64,
    pub floats: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "k,residual_norm,toy_fid,edge_iou,downstream_miou,rmse,floats";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.k, self.residual_norm, self.toy_fid, self.edge_iou, self.downstream_miou, self.rmse, self.floats
        )
    }
}

/// Transmit config that sends exactly the top `k` weights.
pub fn forced_k_config(exp: &Experiment, k: usize, scene_seed: u64) -> CliResult<TransmitConfig> {
    let n = exp.basis.len();
    if k == 0 || k > n {
        return Err(CliError::config(format!("k = {k} outside [1, {n}]")));
    }
    let hierarchy = if k == n { Vec::new() } else { vec![k] };
    Ok(TransmitConfig::new(f64::INFINITY, hierarchy, exp.config.forward_seed_for(scene_seed)))
}

pub fn cmd_ablate(exp: &Experiment, ks: &[usize]) -> CliResult<Vec<AblationRow>> {
    if ks.is_empty() {
        return Err(CliError::config("k list is empty"));
    }
    for &k in ks {
        forced_k_config(exp, k, 0)?;
    }
    let model = exp.load_model()?;
    let scenes = exp.manifest.eval_scenes();
    if scenes.is_empty() {
        return Err(CliError::config("manifest has no evaluation seeds"));
    }
    let gate = exp.config.gate_metric.with_config(exp.scene_config().clone());
    let mut rows = Vec::new();
    for &k in ks {
        let mut sums = [0.0f64; 6];
        for scene in &scenes {
            let cfg = forced_k_config(exp, k, scene.scene_seed)?;
            let out = transmit_pipeline(scene, &model, &exp.basis, &exp.schedule, &gate, &cfg)?;
            let x_hat = crate::noise_codec::reconstruct(&out.message.weights, &exp.basis)?;
            sums[0] += residual_norm(&out.latent, &x_hat);
            for (acc, v) in sums[1..5].iter_mut().zip(score_all(exp, &out.accepted_candidate, scene)?) {
                *acc += v;
            }
            sums[5] += floats_transmitted(&out.message, Method::DiffGo).total_float_equiv;
        }
        let m = scenes.len() as f64;
        rows.push(AblationRow {
            k,
            residual_norm: sums[0] / m,
            toy_fid: sums[1] / m,
            edge_iou: sums[2] / m,
            downstream_miou: sums[3] / m,
            rmse: sums[4] / m,
            floats: sums[5] / m,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{}\n", AblationRow::CSV_HEADER);
    for r in rows {
        writeln!(s, "{}", r.to_csv_line()).unwrap();
    }
    s
}

/// Writes a default config and manifest into `dir`.
pub fn cmd_init(dir: &Path) -> CliResult<(PathBuf, PathBuf)> {
    let config = ExperimentConfig::default();
    let manifest = DatasetManifest::sequential(1000, 200, 50);
    let config_path = dir.join("config.json");
    let manifest_path = dir.join(&config.manifest);
    write_file(&config_path, &to_json_bytes(&config))?;
    write_file(&manifest_path, &to_json_bytes(&manifest))?;
    Ok((config_path, manifest_path))
}

#[derive(Parser, Debug)]
#[command(name = "diffgo", version, about = "Goal-oriented diffusion codec experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a default config.json and manifest.json.
    Init {
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train the noise predictor and write the shared artifacts.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Transmit and receive scenes with one or all methods.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Scene to run; defaults to every evaluation seed.
        #[arg(long)]
        scene_seed: Option<u64>,
        /// diffgo, od, rn, gesco or all.
        #[arg(long, default_value = "diffgo")]
        method: String,
    },
    /// Sweep the number of shared weights over the evaluation set.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,8,32,128")]
        k_list: Vec<usize>,
    },
    /// Dump one scene as raw bytes.
    Scene {
        #[arg(long)]
        scene_seed: u64,
        /// Take the scene settings from this config's manifest.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn parse_methods(s: &str) -> CliResult<Vec<Method>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(vec![Method::DiffGo, Method::Od, Method::Rn, Method::Gesco]);
    }
    s.split(',')
        .map(|m| m.trim().parse::<Method>().map_err(|e| CliError::config(e.to_string())))
        .collect()
}

fn execute(command: Command, stdout: &mut dyn Write) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::runtime(format!("cannot write output: {e}"));
    match command {
        Command::Init { out } => {
            let (config, manifest) = cmd_init(&out)?;
            writeln!(stdout, "wrote {} and {}", config.display(), manifest.display()).map_err(io)?;
        }
        Command::Train { cfg } => {
            let exp = Experiment::load(&cfg.config, cfg.out.as_deref())?;
            let artifacts = cmd_train(&exp)?;
            stdout.write_all(artifacts.loss_csv().as_bytes()).map_err(io)?;
        }
        Command::Run { cfg, scene_seed, method } => {
            let methods = parse_methods(&method)?;
            let exp = Experiment::load(&cfg.config, cfg.out.as_deref())?;
            let seeds = scene_seed.map_or_else(|| exp.manifest.eval_seeds.clone(), |s| vec![s]);
            if seeds.is_empty() {
                return Err(CliError::config("no scene seed given and the manifest has no evaluation seeds"));
            }
            let csv = run_csv(&cmd_run(&exp, &seeds, &methods)?);
            let name = match scene_seed {
                Some(s) => format!("run_{}_{s}.csv", method.to_ascii_lowercase().replace(',', "-")),
                None => format!("run_{}_eval.csv", method.to_ascii_lowercase().replace(',', "-")),
            };
            write_file(&exp.output_dir.join(name), csv.as_bytes())?;
            stdout.write_all(csv.as_bytes()).map_err(io)?;
        }
        Command::Ablate { cfg, k_list } => {
            let exp = Experiment::load(&cfg.config, cfg.out.as_deref())?;
            let csv = ablation_csv(&cmd_ablate(&exp, &k_list)?);
            write_file(&exp.output_dir.join(ABLATION_FILE), csv.as_bytes())?;
            stdout.write_all(csv.as_bytes()).map_err(io)?;
        }
        Command::Scene { scene_seed, config, out } => {
            let scene_cfg = match config {
                Some(path) => Experiment::load(&path, None)?.manifest.scene_config,
                None => SceneConfig::default(),
            };
            let scene = generate_scene(scene_seed, &scene_cfg);
            let path = out.join(format!("scene_{scene_seed}.bin"));
            write_file(&path, &dump_scene(&scene))?;
            writeln!(
                stdout,
                "wrote {} ({}x{})",
                path.display(),
                scene_cfg.height,
                scene_cfg.width
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors go to `stderr`.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        assert!(json.contains("\"downstream_miou\""));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"train": {"steps": 5}}"#).unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.batch_size, TrainSettings::default().batch_size);
        assert_eq!(c.basis_seeds.len(), 128);
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for hierarchy in [vec![8, 8], vec![128], vec![0, 4]] {
            let c = ExperimentConfig {
                hierarchy,
                ..Default::default()
            };
            assert_eq!(c.validate().unwrap_err().code, EXIT_CONFIG);
        }
        let mut c = ExperimentConfig::default();
        c.tau.remove(&MetricKind::DownstreamMiou);
        assert_eq!(c.validate().unwrap_err().code, EXIT_CONFIG);
        let mut c = ExperimentConfig::default();
        c.schedule.beta_end = 1.5;
        assert_eq!(c.validate().unwrap_err().code, EXIT_CONFIG);
    }

    #[test]
    fn method_lists() {
        assert_eq!(parse_methods("all").unwrap().len(), 4);
        assert_eq!(parse_methods("od,rn").unwrap(), vec![Method::Od, Method::Rn]);
        assert_eq!(parse_methods("nope").unwrap_err().code, EXIT_CONFIG);
    }

    #[test]
    fn forced_k_uses_empty_hierarchy_at_full_basis() {
        let exp = Experiment::from_parts(
            ExperimentConfig {
                basis_seeds: (1..=16).collect(),
                hierarchy: vec![],
                ..Default::default()
            },
            DatasetManifest::sequential(0, 1, 1),
            PathBuf::from("unused"),
        )
        .unwrap();
        assert_eq!(forced_k_config(&exp, 16, 0).unwrap().hierarchy, Vec::<usize>::new());
        assert_eq!(forced_k_config(&exp, 3, 0).unwrap().hierarchy, vec![3]);
        assert!(forced_k_config(&exp, 17, 0).is_err());
        assert!(forced_k_config(&exp, 0, 0).is_err());
    }
}
