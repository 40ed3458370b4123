//! Candidate gating, loop-closure detection strategies and precision-recall
//! evaluation.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::model::ModelWeights;
use crate::net::tensor::Tensor;
use crate::uncertainty::{mahalanobis, PoseWithCov};

/// Environment variable naming the on-disk feature cache directory.
pub const CACHE_ENV: &str = "OVERLAP_LOOP_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Gate {
    /// Every non-recent scan (place recognition without a pose prior).
    None,
    Euclidean { radius: f64 },
    /// Mahalanobis distance under the query covariance, in standard deviations.
    Mahalanobis { sigmas: f64 },
}

impl FromStr for Gate {
    type Err = Error;

    /// `none`, `euclidean:<radius>`, `mahalanobis` (3σ) or `mahalanobis:<sigmas>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let number = |a: Option<&str>, default: Option<f64>| -> Result<f64> {
            match a {
                Some(a) => a.trim().parse::<f64>().map_err(|_| Error::Validation(format!("bad gate parameter {a:?}"))),
                None => default.ok_or_else(|| Error::Validation(format!("gate {kind:?} needs a parameter"))),
            }
        };
        let gate = match kind.trim() {
            "none" => Gate::None,
            "euclidean" => Gate::Euclidean { radius: number(arg, None)? },
            "mahalanobis" => Gate::Mahalanobis { sigmas: number(arg, Some(3.0))? },
            other => return Err(Error::Validation(format!("unknown gate {other:?}"))),
        };
        gate.validate()?;
        Ok(gate)
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gate::None => write!(f, "none"),
            Gate::Euclidean { radius } => write!(f, "euclidean:{radius}"),
            Gate::Mahalanobis { sigmas } => write!(f, "mahalanobis:{sigmas}"),
        }
    }
}

impl Gate {
    fn validate(&self) -> Result<()> {
        match *self {
            Gate::Euclidean { radius } if !(radius > 0.0 && radius.is_finite()) => {
                Err(Error::Validation(format!("euclidean gate radius must be positive, got {radius}")))
            }
            Gate::Mahalanobis { sigmas } if !(sigmas > 0.0 && sigmas.is_finite()) => {
                Err(Error::Validation(format!("mahalanobis gate bound must be positive, got {sigmas}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Highest predicted overlap.
    Best,
    /// Among the `k` highest predicted overlaps, the candidate nearest in
    /// Mahalanobis distance.
    NearestOfTopK { k: usize },
}

impl FromStr for Strategy {
    type Err = Error;

    /// `best`, `top-k` (k = 10) or `top-k:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "best" => Ok(Strategy::Best),
            "top-k" | "nearest_of_top_k" => Ok(Strategy::NearestOfTopK { k: 10 }),
            other => {
                let k = other
                    .strip_prefix("top-k:")
                    .or_else(|| other.strip_prefix("nearest_of_top_k:"))
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(|| Error::Validation(format!("unknown strategy {other:?}")))?;
                Ok(Strategy::NearestOfTopK { k })
            }
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Best => write!(f, "best"),
            Strategy::NearestOfTopK { k } => write!(f, "top-k:{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Scans immediately preceding the query that are never candidates.
    pub recent_exclusion: usize,
    /// Ground-truth overlap from which a detection counts as a true loop.
    pub tp_overlap_threshold: f64,
    pub gate: Gate,
    pub strategy: Strategy,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig { recent_exclusion: 100, tp_overlap_threshold: 0.3, gate: Gate::None, strategy: Strategy::Best }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tp_overlap_threshold > 0.0 && self.tp_overlap_threshold < 1.0) {
            return Err(Error::Validation(format!(
                "true-positive overlap threshold must lie in (0, 1), got {}",
                self.tp_overlap_threshold
            )));
        }
        if let Strategy::NearestOfTopK { k: 0 } = self.strategy {
            return Err(Error::Validation("top-k strategy needs k > 0".into()));
        }
        self.gate.validate()
    }
}

/// Ids that may close a loop with `query_id`: older than the exclusion window
/// and inside the gate. `history[i]` is the estimated pose of scan `i`.
pub fn gate_candidates(query_id: usize, history: &[PoseWithCov], cfg: &DetectionConfig) -> Result<Vec<usize>> {
    let query = history
        .get(query_id)
        .ok_or_else(|| Error::Validation(format!("query {query_id} outside a history of {} poses", history.len())))?;
    let end = query_id.saturating_sub(cfg.recent_exclusion);
    let mut out = Vec::with_capacity(end);
    for (id, cand) in history[..end].iter().enumerate() {
        let keep = match cfg.gate {
            Gate::None => true,
            Gate::Euclidean { radius } => (query.mean.translation() - cand.mean.translation()).norm() <= radius,
            Gate::Mahalanobis { sigmas } => mahalanobis(&query.mean, &cand.mean, &query.cov)? <= sigmas,
        };
        if keep {
            out.push(id);
        }
    }
    Ok(out)
}

/// Network output for one (query, candidate) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: usize,
    pub overlap: f64,
    pub yaw: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub query: usize,
    pub candidate: usize,
    pub overlap: f64,
    pub yaw: u16,
    /// Distance to the query under its covariance (top-k strategy only).
    pub mahalanobis: Option<f64>,
}

/// Sorts by predicted overlap, highest first; ties go to the lower id.
pub fn rank(scored: &[ScoredCandidate]) -> Vec<ScoredCandidate> {
    let mut out = scored.to_vec();
    out.sort_by(|a, b| b.overlap.total_cmp(&a.overlap).then(a.id.cmp(&b.id)));
    out
}

/// Picks the loop candidate for one query according to the strategy.
pub fn detect(query: usize, scored: &[ScoredCandidate], history: &[PoseWithCov], cfg: &DetectionConfig) -> Result<Option<LoopCandidate>> {
    let ranked = rank(scored);
    let Some(first) = ranked.first() else { return Ok(None) };
    match cfg.strategy {
        Strategy::Best => Ok(Some(LoopCandidate {
            query,
            candidate: first.id,
            overlap: first.overlap,
            yaw: first.yaw,
            mahalanobis: None,
        })),
        Strategy::NearestOfTopK { k } => {
            let q = history
                .get(query)
                .ok_or_else(|| Error::Validation(format!("query {query} outside a history of {} poses", history.len())))?;
            let mut best: Option<(f64, &ScoredCandidate)> = None;
            for c in ranked.iter().take(k) {
                let cand = history
                    .get(c.id)
                    .ok_or_else(|| Error::Validation(format!("candidate {} outside the pose history", c.id)))?;
                let d = mahalanobis(&q.mean, &cand.mean, &q.cov)?;
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, c));
                }
            }
            Ok(best.map(|(d, c)| LoopCandidate { query, candidate: c.id, overlap: c.overlap, yaw: c.yaw, mahalanobis: Some(d) }))
        }
    }
}

/// One query's detection together with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub query: usize,
    pub candidate: usize,
    pub predicted_overlap: f64,
    /// Ground-truth overlap of the detected pair.
    pub true_overlap: f64,
    /// Whether any gated candidate of the query is a true loop.
    pub has_closure: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Detections with predicted overlap at or above this value are accepted.
    pub threshold: f64,
    pub precision: f64,
    /// Best precision at this recall or higher; monotone in the threshold.
    pub interpolated_precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Ordered by increasing threshold.
    pub pr_points: Vec<PrPoint>,
    pub f1_max: f64,
    pub f1_threshold: f64,
    pub auc: f64,
    pub queries: usize,
    pub positives: usize,
}

/// Sweeps the acceptance threshold over every predicted overlap. A detection
/// is a true positive when accepted with ground-truth overlap at or above the
/// configured threshold; recall is relative to the queries that have a loop.
pub fn evaluate(detections: &[Detection], cfg: &DetectionConfig) -> Result<EvalReport> {
    let positives = detections.iter().filter(|d| d.has_closure).count();
    if positives == 0 {
        return Err(Error::Validation("no query has a ground-truth loop; recall is undefined".into()));
    }
    if let Some(d) = detections.iter().find(|d| !(d.predicted_overlap.is_finite() && d.true_overlap.is_finite())) {
        return Err(Error::Numeric(format!("non-finite overlap for query {}", d.query)));
    }
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| b.predicted_overlap.total_cmp(&a.predicted_overlap).then(a.query.cmp(&b.query)));

    // descending thresholds: accept a growing prefix
    let mut raw = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].predicted_overlap;
        while i < sorted.len() && sorted[i].predicted_overlap == t {
            if sorted[i].true_overlap >= cfg.tp_overlap_threshold {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        raw.push((t, tp as f64 / (tp + fp) as f64, tp as f64 / positives as f64));
    }

    let mut f1_max = 0.0;
    let mut f1_threshold = raw[0].0;
    for &(t, p, r) in &raw {
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f1 > f1_max {
            f1_max = f1;
            f1_threshold = t;
        }
    }

    // interpolate from the low-threshold (high-recall) end
    let mut points = Vec::with_capacity(raw.len());
    let mut best = 0.0f64;
    for &(t, p, r) in raw.iter().rev() {
        best = best.max(p);
        points.push(PrPoint { threshold: t, precision: p, interpolated_precision: best, recall: r });
    }

    let mut auc = 0.0;
    let (mut prev_r, mut prev_p) = (0.0, points.last().map_or(0.0, |p| p.interpolated_precision));
    for p in points.iter().rev() {
        auc += (p.recall - prev_r) * (p.interpolated_precision + prev_p) * 0.5;
        prev_r = p.recall;
        prev_p = p.interpolated_precision;
    }

    Ok(EvalReport { pr_points: points, f1_max, f1_threshold, auc: auc.clamp(0.0, 1.0), queries: detections.len(), positives })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per sweep point.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.pr_points {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One query's candidates with predictions and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedQuery {
    pub query: usize,
    pub candidates: Vec<RankedEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: usize,
    pub predicted_overlap: f64,
    pub true_overlap: f64,
}

/// Share of queries with a true loop that have one among their `n` highest
/// predictions. Queries without a true loop are left out.
pub fn recall_at_n(queries: &[RankedQuery], threshold: f64, n: usize) -> Result<f64> {
    let mut with_loop = 0usize;
    let mut hits = 0usize;
    for q in queries {
        if !q.candidates.iter().any(|c| c.true_overlap >= threshold) {
            continue;
        }
        with_loop += 1;
        let mut ranked = q.candidates.clone();
        ranked.sort_by(|a, b| b.predicted_overlap.total_cmp(&a.predicted_overlap).then(a.id.cmp(&b.id)));
        if ranked.iter().take(n).any(|c| c.true_overlap >= threshold) {
            hits += 1;
        }
    }
    if with_loop == 0 {
        return Err(Error::Validation("no query has a ground-truth loop; recall is undefined".into()));
    }
    Ok(hits as f64 / with_loop as f64)
}

/// Leg features per scan, memoized in memory and optionally on disk. Disk
/// entries are exact (JSON with round-trip floats) so cached and fresh
/// predictions agree bit for bit.
pub struct FeatureCache {
    dir: Option<PathBuf>,
    namespace: String,
    memory: Mutex<HashMap<String, Tensor>>,
}

impl FeatureCache {
    pub fn in_memory(namespace: impl Into<String>) -> Self {
        FeatureCache { dir: None, namespace: namespace.into(), memory: Mutex::new(HashMap::new()) }
    }

    pub fn on_disk(dir: impl Into<PathBuf>, namespace: impl Into<String>) -> Self {
        FeatureCache { dir: Some(dir.into()), namespace: namespace.into(), memory: Mutex::new(HashMap::new()) }
    }

    /// Disk-backed when `OVERLAP_LOOP_CACHE` is set.
    pub fn from_env(namespace: impl Into<String>) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Self::on_disk(PathBuf::from(dir), namespace),
            _ => Self::in_memory(namespace),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let mut h = Sha256::new();
        h.update(key.as_bytes());
        self.dir.as_ref().map(|d| d.join(&self.namespace).join(format!("{}.json", hex(&h.finalize()[..16]))))
    }

    pub fn get_or_compute(&self, key: &str, compute: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
        if let Some(t) = self.memory.lock().expect("cache lock").get(key) {
            return Ok(t.clone());
        }
        let path = self.path(key);
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            match serde_json::from_str::<Tensor>(&text) {
                Ok(t) => {
                    self.memory.lock().expect("cache lock").insert(key.to_string(), t.clone());
                    return Ok(t);
                }
                Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", p.display()),
            }
        }
        let t = compute()?;
        if let Some(p) = path {
            let dir = p.parent().expect("cache file has a parent");
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            std::fs::write(&p, serde_json::to_string(&t)?).map_err(|e| Error::io(&p, e))?;
        }
        self.memory.lock().expect("cache lock").insert(key.to_string(), t.clone());
        Ok(t)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a model's architecture, channels and parameters.
pub fn weights_fingerprint(w: &ModelWeights) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&w.arch).expect("architecture serializes").as_bytes());
    h.update(w.channels.to_string().as_bytes());
    for block in w.params() {
        for v in block {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize()[..16])
}

/// Predictions of `query` against each candidate from cached leg features.
pub fn score_candidates(model: &ModelWeights, features: &[Tensor], query: usize, candidates: &[usize]) -> Result<Vec<ScoredCandidate>> {
    candidates
        .iter()
        .map(|&id| {
            let p = model.predict_from_features(&features[query], &features[id])?;
            Ok(ScoredCandidate { id, overlap: p.overlap, yaw: p.yaw })
        })
        .collect()
}

/// Per-query outcome of a detection sweep over a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query: usize,
    pub scored: Vec<ScoredCandidate>,
    pub detection: Option<LoopCandidate>,
}

/// Gates, scores and detects every query of a sequence, in parallel; results
/// are ordered by query id.
pub fn run_detection(model: &ModelWeights, features: &[Tensor], history: &[PoseWithCov], cfg: &DetectionConfig) -> Result<Vec<QueryOutcome>> {
    cfg.validate()?;
    if features.len() != history.len() {
        return Err(Error::Validation(format!("{} feature volumes for {} poses", features.len(), history.len())));
    }
    (0..history.len())
        .into_par_iter()
        .map(|q| {
            let ids = gate_candidates(q, history, cfg)?;
            let scored = score_candidates(model, features, q, &ids)?;
            let detection = detect(q, &scored, history, cfg)?;
            Ok(QueryOutcome { query: q, scored, detection })
        })
        .collect()
}

/// Attaches ground truth to detection outcomes. Queries with no gated
/// candidates are skipped. `truth(query, candidate)` returns the true overlap.
pub fn attach_ground_truth(
    outcomes: &[QueryOutcome],
    cfg: &DetectionConfig,
    truth: impl Fn(usize, usize) -> Result<f64> + Sync,
) -> Result<(Vec<Detection>, Vec<RankedQuery>)> {
    let pairs: Vec<(Detection, RankedQuery)> = outcomes
        .par_iter()
        .filter_map(|o| o.detection.map(|d| (o, d)))
        .map(|(o, d)| {
            let candidates = o
                .scored
                .iter()
                .map(|c| Ok(RankedEntry { id: c.id, predicted_overlap: c.overlap, true_overlap: truth(o.query, c.id)? }))
                .collect::<Result<Vec<_>>>()?;
            let has_closure = candidates.iter().any(|c| c.true_overlap >= cfg.tp_overlap_threshold);
            let true_overlap = candidates.iter().find(|c| c.id == d.candidate).expect("detected id was scored").true_overlap;
            Ok((
                Detection { query: o.query, candidate: d.candidate, predicted_overlap: d.overlap, true_overlap, has_closure },
                RankedQuery { query: o.query, candidates },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Writes detections as JSON lines, one object per query.
pub fn write_detections(mut out: impl Write, detections: &[impl Serialize]) -> Result<()> {
    for d in detections {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n").map_err(|e| Error::io("<detections>", e))?;
    }
    Ok(())
}
