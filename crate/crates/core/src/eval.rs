//! Scoring of candidate architectures.
//!
//! An [`Evaluator`] maps a compiled candidate to three segmentation metrics;
//! the reward is their geometric mean. Two evaluators ship with the crate:
//! a deterministic [`SurrogateEvaluator`] for desk-scale runs and an
//! [`ExternalEvaluator`] that talks to a child process over a
//! line-delimited JSON protocol.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cost::{count_params, summarize, CostError, CostReport, GraphSummary};
use crate::genotype::{Genotype, SpaceConfig};
use crate::graph::{compile, GraphError, GraphIR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub miou: f64,
    pub mean_acc: f64,
    pub fw_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("metric {name} = {value} outside (0, 1]")]
    Domain { name: &'static str, value: f64 },
    #[error("evaluator reported: {0}")]
    Remote(String),
    #[error("evaluator timed out after {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {reason} (line: {line:?})")]
    Protocol { reason: String, line: String },
    #[error("evaluator process exited")]
    ProcessExited,
    #[error("could not start evaluator: {0}")]
    Spawn(String),
    #[error("evaluator handshake failed: {0}")]
    Handshake(String),
    #[error("candidate could not be prepared: {0}")]
    Candidate(String),
}

impl EvalError {
    /// Errors that should stop a search rather than zero one architecture.
    pub fn is_fatal(&self) -> bool {
        matches!(self, EvalError::Spawn(_) | EvalError::Handshake(_) | EvalError::Candidate(_))
    }
}

impl MetricTriple {
    pub fn new(miou: f64, mean_acc: f64, fw_iou: f64) -> Result<Self, EvalError> {
        let m = Self { miou, mean_acc, fw_iou };
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<(), EvalError> {
        for (name, value) in [("miou", self.miou), ("mean_acc", self.mean_acc), ("fw_iou", self.fw_iou)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(EvalError::Domain { name, value });
            }
        }
        Ok(())
    }
}

/// Geometric mean of the three metrics.
pub fn reward(metrics: &MetricTriple) -> Result<f64, EvalError> {
    metrics.check()?;
    Ok((metrics.miou * metrics.mean_acc * metrics.fw_iou).cbrt())
}

/// Structural features used by the surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchFeatures {
    pub params_generated: u64,
    /// Distinct pool entries read by at least one block.
    pub used_pool_entries: usize,
    pub pool_size: usize,
    pub strided_blocks: usize,
}

/// A genotype with everything an evaluator may want to look at.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub genotype: Genotype,
    pub graph: GraphIR,
    pub cost: CostReport,
    pub summary: GraphSummary,
    pub features: ArchFeatures,
}

#[derive(Debug, Error)]
pub enum PrepareError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl Candidate {
    pub fn prepare(genotype: &Genotype, space: &SpaceConfig) -> Result<Self, PrepareError> {
        let graph = compile(genotype, space)?;
        let cost = count_params(&graph, space);
        let summary = summarize(&graph, space)?;
        let features = ArchFeatures {
            params_generated: cost.params_generated,
            used_pool_entries: graph.consumed.iter().filter(|&&c| c > 0).count(),
            pool_size: graph.pool.len(),
            strided_blocks: graph.strided_blocks,
        };
        Ok(Self { genotype: genotype.clone(), graph, cost, summary, features })
    }
}

/// Scores candidates. `id` identifies the request (the architecture index
/// during search) and seeds any evaluator-side randomness.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, id: u64, candidate: &Candidate) -> Result<MetricTriple, EvalError>;
}

impl<E: Evaluator + ?Sized> Evaluator for Arc<E> {
    fn evaluate(&self, id: u64, candidate: &Candidate) -> Result<MetricTriple, EvalError> {
        (**self).evaluate(id, candidate)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&self, id: u64, candidate: &Candidate) -> Result<MetricTriple, EvalError> {
        (**self).evaluate(id, candidate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    /// Parameter count (excluding the stem) that maximizes the first metric.
    pub target_params: f64,
    /// Weight of pool connectivity in the second metric.
    pub connectivity_scale: f64,
    pub target_strided_blocks: usize,
    /// Multiplicative noise half-width.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { target_params: 300_000.0, connectivity_scale: 0.5, target_strided_blocks: 2, noise_sigma: 0.02, seed: 0 }
    }
}

impl SurrogateConfig {
    /// Stand-in for a longer training schedule: half the noise, fresh seed.
    pub fn longer_training(&self) -> Self {
        Self { noise_sigma: self.noise_sigma / 2.0, seed: self.seed ^ 0x9e37_79b9_7f4a_7c15, ..*self }
    }
}

const METRIC_FLOOR: f64 = 0.05;

/// Noise-free surrogate metrics for the given features.
pub fn surrogate_base(features: &ArchFeatures, cfg: &SurrogateConfig) -> [f64; 3] {
    let ratio = features.params_generated.max(1) as f64 / cfg.target_params;
    let m1 = (-ratio.log2().abs() / 4.0).exp();
    let m2 = 0.5 + cfg.connectivity_scale * features.used_pool_entries as f64 / features.pool_size as f64;
    let gap = features.strided_blocks.abs_diff(cfg.target_strided_blocks) as f64;
    let m3 = 1.0 - 0.15 * gap;
    [m1, m2, m3].map(|m| m.clamp(METRIC_FLOOR, 1.0))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Surrogate metrics with seeded multiplicative noise for request `id`.
pub fn surrogate_metrics(features: &ArchFeatures, cfg: &SurrogateConfig, id: u64) -> MetricTriple {
    let base = surrogate_base(features, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(id)));
    let sigma = cfg.noise_sigma;
    let [miou, mean_acc, fw_iou] = base.map(|m| {
        let eps = if sigma > 0.0 { rng.gen_range(-sigma..=sigma) } else { 0.0 };
        (m * (1.0 + eps)).clamp(f64::MIN_POSITIVE, 1.0)
    });
    MetricTriple { miou, mean_acc, fw_iou }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurrogateEvaluator {
    pub config: SurrogateConfig,
}

impl SurrogateEvaluator {
    pub fn new(config: SurrogateConfig) -> Self {
        Self { config }
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, id: u64, candidate: &Candidate) -> Result<MetricTriple, EvalError> {
        Ok(surrogate_metrics(&candidate.features, &self.config, id))
    }
}

/// Result of scoring one architecture, with failures folded into reward 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub reward: f64,
    pub metrics: Option<MetricTriple>,
    pub error: Option<String>,
}

/// Scores `candidate`; non-fatal evaluator errors become reward 0.
pub fn score<E: Evaluator + ?Sized>(evaluator: &E, id: u64, candidate: &Candidate) -> Result<Outcome, EvalError> {
    match evaluator.evaluate(id, candidate).and_then(|m| reward(&m).map(|r| (m, r))) {
        Ok((metrics, reward)) => Ok(Outcome { reward, metrics: Some(metrics), error: None }),
        Err(e) if e.is_fatal() => Err(e),
        Err(e) => Ok(Outcome { reward: 0.0, metrics: None, error: Some(e.to_string()) }),
    }
}

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Serialize)]
struct Request<'a> {
    id: u64,
    genotype: &'a Genotype,
    summary: &'a GraphSummary,
}

type Reply = Result<MetricTriple, EvalError>;
type Pending = Arc<Mutex<HashMap<u64, Sender<Reply>>>>;

/// Client side of the evaluation protocol over arbitrary byte streams.
///
/// Requests may be pipelined: each caller registers its id and waits on its
/// own channel while a reader thread routes responses by id.
pub struct ProtocolClient {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Pending,
    alive: Arc<AtomicBool>,
}

impl ProtocolClient {
    /// Reads the handshake and starts the response router.
    pub fn connect(writer: Box<dyn Write + Send>, reader: Box<dyn BufRead + Send>) -> Result<Self, EvalError> {
        let mut reader = reader;
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|e| EvalError::Handshake(e.to_string()))?;
        if n == 0 {
            return Err(EvalError::Handshake("evaluator closed its output before the handshake".into()));
        }
        let version = serde_json::from_str::<Value>(&line).ok().and_then(|v| v.get("protocol").and_then(Value::as_u64));
        if version != Some(PROTOCOL_VERSION) {
            return Err(EvalError::Handshake(format!("unsupported handshake {:?}", line.trim_end())));
        }
        let pending: Pending = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        {
            let pending = Arc::clone(&pending);
            let alive = Arc::clone(&alive);
            thread::spawn(move || route_responses(reader, pending, alive));
        }
        Ok(Self { writer: Mutex::new(writer), pending, alive })
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    /// Sends one request; the response arrives on the returned channel.
    pub fn submit(&self, id: u64, genotype: &Genotype, summary: &GraphSummary) -> Result<Receiver<Reply>, EvalError> {
        if !self.is_alive() {
            return Err(EvalError::ProcessExited);
        }
        let (tx, rx) = mpsc::channel();
        {
            let mut pending = self.pending.lock().unwrap();
            if pending.contains_key(&id) {
                return Err(EvalError::Protocol {
                    reason: format!("duplicate in-flight id {id}"),
                    line: String::new(),
                });
            }
            pending.insert(id, tx);
        }
        let mut line = serde_json::to_string(&Request { id, genotype, summary }).expect("request serializes");
        line.push('\n');
        let sent = {
            let mut w = self.writer.lock().unwrap();
            w.write_all(line.as_bytes()).and_then(|_| w.flush())
        };
        if sent.is_err() {
            self.pending.lock().unwrap().remove(&id);
            self.alive.store(false, Ordering::SeqCst);
            return Err(EvalError::ProcessExited);
        }
        Ok(rx)
    }

    /// Waits for the reply to `id`; on timeout the id is abandoned.
    pub fn wait(&self, id: u64, rx: Receiver<Reply>, timeout: Duration) -> Reply {
        match rx.recv_timeout(timeout) {
            Ok(reply) => reply,
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().unwrap().remove(&id);
                Err(EvalError::Timeout(timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(EvalError::ProcessExited),
        }
    }

    pub fn evaluate(&self, id: u64, genotype: &Genotype, summary: &GraphSummary, timeout: Duration) -> Reply {
        let rx = self.submit(id, genotype, summary)?;
        self.wait(id, rx, timeout)
    }
}

/// Parses one response line into its id and reply.
pub fn parse_response(line: &str) -> Result<(u64, Reply), EvalError> {
    let protocol = |reason: &str| EvalError::Protocol { reason: reason.to_string(), line: line.to_string() };
    let value: Value = serde_json::from_str(line).map_err(|e| protocol(&e.to_string()))?;
    let id = value.get("id").and_then(Value::as_u64).ok_or_else(|| protocol("missing id"))?;
    if let Some(err) = value.get("error") {
        let text = err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string());
        return Ok((id, Err(EvalError::Remote(text))));
    }
    let field =
        |name: &str| value.get(name).and_then(Value::as_f64).ok_or_else(|| protocol(&format!("missing {name}")));
    let reply = match (field("miou"), field("mean_acc"), field("fw_iou")) {
        (Ok(a), Ok(b), Ok(c)) => MetricTriple::new(a, b, c),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => Err(e),
    };
    Ok((id, reply))
}

fn route_responses(mut reader: Box<dyn BufRead + Send>, pending: Pending, alive: Arc<AtomicBool>) {
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        match parse_response(trimmed) {
            Ok((id, reply)) => {
                if let Some(tx) = pending.lock().unwrap().remove(&id) {
                    let _ = tx.send(reply);
                }
            }
            // Without an id the stream cannot be trusted; fail everything in flight.
            Err(e) => {
                for (_, tx) in pending.lock().unwrap().drain() {
                    let _ = tx.send(Err(e.clone()));
                }
            }
        }
    }
    alive.store(false, Ordering::SeqCst);
    for (_, tx) in pending.lock().unwrap().drain() {
        let _ = tx.send(Err(EvalError::ProcessExited));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    /// Program and arguments.
    pub command: Vec<String>,
    pub timeout_secs: f64,
}

impl ExternalConfig {
    pub fn new(command: Vec<String>) -> Self {
        Self { command, timeout_secs: 600.0 }
    }

    /// Splits a command line on whitespace.
    pub fn parse(command_line: &str) -> Self {
        Self::new(command_line.split_whitespace().map(str::to_string).collect())
    }
}

struct Session {
    child: Child,
    client: Arc<ProtocolClient>,
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Evaluator running as a child process. A process that exits mid-request
/// is restarted once; a second exit fails that architecture.
pub struct ExternalEvaluator {
    config: ExternalConfig,
    session: Mutex<Option<Session>>,
}

impl ExternalEvaluator {
    pub fn spawn(config: ExternalConfig) -> Result<Self, EvalError> {
        let session = Self::start(&config)?;
        Ok(Self { config, session: Mutex::new(Some(session)) })
    }

    fn start(config: &ExternalConfig) -> Result<Session, EvalError> {
        let (program, args) =
            config.command.split_first().ok_or_else(|| EvalError::Spawn("empty evaluator command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EvalError::Spawn(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match ProtocolClient::connect(Box::new(stdin), Box::new(BufReader::new(stdout))) {
            Ok(client) => Ok(Session { child, client: Arc::new(client) }),
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    fn client(&self, restart: bool) -> Result<Arc<ProtocolClient>, EvalError> {
        let mut guard = self.session.lock().unwrap();
        let needs_start = match guard.as_ref() {
            Some(s) => restart && !s.client.is_alive(),
            None => true,
        };
        if needs_start {
            *guard = None;
            *guard = Some(Self::start(&self.config)?);
        }
        Ok(Arc::clone(&guard.as_ref().expect("session").client))
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.config.timeout_secs)
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&self, id: u64, candidate: &Candidate) -> Result<MetricTriple, EvalError> {
        let attempt = |restart: bool| {
            let client = self.client(restart)?;
            client.evaluate(id, &candidate.genotype, &candidate.summary, self.timeout())
        };
        match attempt(false) {
            Err(EvalError::ProcessExited) => attempt(true),
            other => other,
        }
    }
}
