//! Experiment harness: single-session and merged-map localization matrices
//! over seeded synthetic sessions, per-cell metrics and CSV output.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FamilyId;
use crate::graph::MultiSessionMap;
use crate::io::map_to_string;
use crate::slam::{localize_session, map_session, LocalizationEvent, Outcome, SessionSummary, SlamConfig, SlamError};
use crate::synthworld::{
    generate_world, localization_times, mapping_times, simulate_session, FamilyModel, FamilyPreset, OdometryNoise,
    RenderConfig, SessionRecord, SynthError, TrajectorySpec, World, WorldParams,
};
use crate::vocabulary::SearchBackend;

pub const SUMMARY_SCHEMA: &str = "msslam.summary/1";
pub const TIMELINE_SCHEMA: &str = "msslam.timeline/1";

/// Map id of the baseline where each query uses its closest-time single map.
pub const BASELINE_ID: &str = "1|2|3|4|5|6";
pub const QUERY_IDS: [&str; 6] = ["A", "B", "C", "D", "E", "F"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no event logs to evaluate")]
    MissingLogs,
    #[error(transparent)]
    Slam(#[from] SlamError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// One localized (or failed) query frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub schema: String,
    pub map_id: String,
    pub query_id: String,
    pub family: String,
    pub seed: u64,
    pub frame: usize,
    pub timestamp: f64,
    pub outcome: String,
    pub stage: Option<String>,
    pub matched_node: Option<u32>,
    pub matched_session: Option<u32>,
    pub jump_mm: Option<f64>,
    pub inliers: usize,
    pub inlier_pct: f64,
}

impl TimelineRow {
    pub fn accepted(&self) -> bool {
        self.outcome != "failed"
    }

    pub fn from_event(map_id: &str, query_id: &str, family: FamilyId, seed: u64, e: &LocalizationEvent) -> Self {
        Self {
            schema: TIMELINE_SCHEMA.to_string(),
            map_id: map_id.to_string(),
            query_id: query_id.to_string(),
            family: family.code().to_string(),
            seed,
            frame: e.frame_index,
            timestamp: e.timestamp,
            outcome: e.outcome.label().to_string(),
            stage: match e.outcome {
                Outcome::Failed(Some(s)) => Some(s.to_string()),
                Outcome::Failed(None) => Some("no_candidate".to_string()),
                _ => None,
            },
            matched_node: e.outcome.matched().map(|n| n.0),
            matched_session: e.matched_session.map(|s| s.0),
            jump_mm: e.jump_mm,
            inliers: e.inliers,
            inlier_pct: e.inlier_pct,
        }
    }
}

/// Metrics of one (map, query, family, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub schema: String,
    pub map_id: String,
    pub query_id: String,
    pub family: String,
    pub seed: u64,
    pub frames: usize,
    pub localized: usize,
    pub localization_pct: f64,
    /// Mean over localized frames.
    pub inlier_pct: f64,
    /// Mean over jumps; empty without any.
    pub jump_mm: Option<f64>,
    /// Longest run of consecutive failed frames.
    pub max_gap: usize,
    /// Session matched most often (ties to the lower id).
    pub dominant_session: Option<u32>,
}

pub fn max_gap(accepted: impl IntoIterator<Item = bool>) -> usize {
    let (mut run, mut best) = (0, 0);
    for a in accepted {
        run = if a { 0 } else { run + 1 };
        best = best.max(run);
    }
    best
}

/// Metrics of one cell's timeline.
pub fn summarize(rows: &[TimelineRow]) -> Result<SummaryRow, EvalError> {
    let first = rows.first().ok_or(EvalError::MissingLogs)?;
    let ok: Vec<&TimelineRow> = rows.iter().filter(|r| r.accepted()).collect();
    let jumps: Vec<f64> = rows.iter().filter_map(|r| r.jump_mm).collect();
    let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
    for r in &ok {
        if let Some(s) = r.matched_session {
            *votes.entry(s).or_default() += 1;
        }
    }
    let dominant = votes
        .iter()
        .fold(None, |best: Option<(u32, usize)>, (&s, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((s, c)),
        })
        .map(|(s, _)| s);
    Ok(SummaryRow {
        schema: SUMMARY_SCHEMA.to_string(),
        map_id: first.map_id.clone(),
        query_id: first.query_id.clone(),
        family: first.family.clone(),
        seed: first.seed,
        frames: rows.len(),
        localized: ok.len(),
        localization_pct: 100.0 * ok.len() as f64 / rows.len() as f64,
        inlier_pct: if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|r| r.inlier_pct).sum::<f64>() / ok.len() as f64
        },
        jump_mm: (!jumps.is_empty()).then(|| jumps.iter().sum::<f64>() / jumps.len() as f64),
        max_gap: max_gap(rows.iter().map(|r| r.accepted())),
        dominant_session: dominant,
    })
}

/// Groups rows by cell, in order of first appearance, and summarizes each.
pub fn evaluate_logs(rows: &[TimelineRow]) -> Result<Vec<SummaryRow>, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::MissingLogs);
    }
    let mut order: Vec<(String, String, String, u64)> = Vec::new();
    let mut cells: BTreeMap<(String, String, String, u64), Vec<TimelineRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.map_id.clone(), r.query_id.clone(), r.family.clone(), r.seed);
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        cells.entry(key).or_default().push(r.clone());
    }
    order.iter().map(|k| summarize(&cells[k])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub map_id: String,
    pub family: String,
    pub seed: u64,
    pub sessions: usize,
    pub nodes: usize,
    pub links: usize,
    pub words: usize,
    pub postings: u64,
    pub serialized_bytes: usize,
}

impl MemoryRow {
    pub fn of(map_id: &str, family: FamilyId, seed: u64, map: &MultiSessionMap) -> Self {
        Self {
            map_id: map_id.to_string(),
            family: family.code().to_string(),
            seed,
            sessions: map.sessions.len(),
            nodes: map.nodes.len(),
            links: map.links.len(),
            words: map.vocabulary.len(),
            postings: map.vocabulary.total_postings(),
            serialized_bytes: map_to_string(map).len(),
        }
    }
}

/// Consecutive-session chaining of one mapping session onto the
/// accumulated map of the earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub family: String,
    pub seed: u64,
    pub session: usize,
    pub frames: usize,
    pub aligned: bool,
    pub anchor_frame: Option<usize>,
    pub inter_session_frames: usize,
    pub inter_session_pct: f64,
    /// Longest run of frames without a link to an earlier session.
    pub max_gap: usize,
}

impl ChainRow {
    fn of(family: FamilyId, seed: u64, index: usize, s: &SessionSummary) -> Self {
        Self {
            family: family.code().to_string(),
            seed,
            session: index + 1,
            frames: s.frames,
            aligned: s.aligned,
            anchor_frame: s.anchor_frame,
            inter_session_frames: s.inter_session_frames,
            inter_session_pct: if s.frames == 0 {
                0.0
            } else {
                100.0 * s.inter_session_frames as f64 / s.frames as f64
            },
            max_gap: s.max_gap,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub families: Vec<FamilyId>,
    /// Preset overrides; families without one use their default preset.
    pub presets: Vec<FamilyPreset>,
    pub world: WorldParams,
    pub render: RenderConfig,
    pub noise: OdometryNoise,
    pub trajectory: TrajectorySpec,
    pub slam: SlamConfig,
    pub backend: SearchBackend,
    /// Merged maps besides the all-sessions chain, as 0-based session lists.
    pub combos: Vec<Vec<usize>>,
    /// Also run the full 6 × 6 single-map matrix.
    pub single_matrix: bool,
    /// Also build the merged maps: `combos` and the all-sessions chain.
    pub multi_session: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1],
            families: FamilyId::ALL.to_vec(),
            presets: Vec::new(),
            world: WorldParams::default(),
            render: RenderConfig::default(),
            noise: OdometryNoise::default(),
            trajectory: TrajectorySpec::default(),
            slam: SlamConfig::default(),
            backend: SearchBackend::default(),
            combos: vec![vec![0, 5], vec![0, 2, 4], vec![1, 3, 5]],
            single_matrix: true,
            multi_session: true,
        }
    }
}

impl ExperimentConfig {
    pub fn preset(&self, family: FamilyId) -> FamilyPreset {
        self.presets
            .iter()
            .find(|p| p.family == family)
            .copied()
            .unwrap_or_else(|| FamilyPreset::for_family(family))
    }
}

pub fn combo_id(sessions: &[usize]) -> String {
    sessions.iter().map(|s| (s + 1).to_string()).collect::<Vec<_>>().join("+")
}

/// SplitMix64 step, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The six mapping and six localization sessions of one seed and family.
pub struct SeedSessions {
    pub world: World,
    pub mapping: Vec<SessionRecord>,
    pub queries: Vec<SessionRecord>,
}

pub fn simulate_seed(cfg: &ExperimentConfig, family: FamilyId, seed: u64) -> Result<SeedSessions, EvalError> {
    let world = generate_world(seed, &cfg.world)?;
    let model = FamilyModel::new(&world, &cfg.preset(family));
    let sim = |time: f64, stream: u64, label: String| {
        simulate_session(&world, &model, &cfg.trajectory, time, &cfg.noise, &cfg.render, mix_seed(seed, stream), label)
    };
    let mapping = mapping_times()
        .iter()
        .enumerate()
        .map(|(i, &t)| sim(t, 100 + i as u64, (i + 1).to_string()))
        .collect();
    let queries = localization_times()
        .iter()
        .enumerate()
        .map(|(i, &t)| sim(t, 200 + i as u64, QUERY_IDS[i].to_string()))
        .collect();
    Ok(SeedSessions {
        world,
        mapping,
        queries,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentResults {
    pub timelines: Vec<TimelineRow>,
    pub summaries: Vec<SummaryRow>,
    pub memory: Vec<MemoryRow>,
    pub chain: Vec<ChainRow>,
}

impl ExperimentResults {
    fn extend(&mut self, other: ExperimentResults) {
        self.timelines.extend(other.timelines);
        self.summaries.extend(other.summaries);
        self.memory.extend(other.memory);
        self.chain.extend(other.chain);
    }

    pub fn summary(&self, map_id: &str, query_id: &str, family: FamilyId, seed: u64) -> Option<&SummaryRow> {
        self.summaries
            .iter()
            .find(|r| r.map_id == map_id && r.query_id == query_id && r.family == family.code() && r.seed == seed)
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("summary.csv"), &self.summaries)?;
        write_csv(&dir.join("timelines.csv"), &self.timelines)?;
        write_csv(&dir.join("memory.csv"), &self.memory)?;
        write_csv(&dir.join("chain.csv"), &self.chain)?;
        Ok(())
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_timelines(path: &Path) -> Result<Vec<TimelineRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(EvalError::from)).collect()
}

fn empty_map(world: &World, family: FamilyId, backend: SearchBackend) -> MultiSessionMap {
    MultiSessionMap::new(world.camera, family, backend)
}

fn localize_all(
    map: &MultiSessionMap,
    map_id: &str,
    queries: &[SessionRecord],
    family: FamilyId,
    seed: u64,
    cfg: &SlamConfig,
    out: &mut ExperimentResults,
) -> Result<(), EvalError> {
    for (j, q) in queries.iter().enumerate() {
        let events = localize_session(map, q, cfg)?;
        let rows: Vec<TimelineRow> = events
            .iter()
            .map(|e| TimelineRow::from_event(map_id, QUERY_IDS[j], family, seed, e))
            .collect();
        out.summaries.push(summarize(&rows)?);
        out.timelines.extend(rows);
    }
    Ok(())
}

/// Every matrix of one family and seed.
pub fn run_cell(cfg: &ExperimentConfig, family: FamilyId, seed: u64) -> Result<ExperimentResults, EvalError> {
    let data = simulate_seed(cfg, family, seed)?;
    let mut out = ExperimentResults::default();

    if cfg.single_matrix {
        let mut baseline = Vec::new();
        for (i, rec) in data.mapping.iter().enumerate() {
            let mut map = empty_map(&data.world, family, cfg.backend);
            map_session(&mut map, rec, &cfg.slam)?;
            let id = (i + 1).to_string();
            out.memory.push(MemoryRow::of(&id, family, seed, &map));
            let mut cell = ExperimentResults::default();
            localize_all(&map, &id, &data.queries, family, seed, &cfg.slam, &mut cell)?;
            baseline.extend(cell.timelines.iter().filter(|r| r.query_id == QUERY_IDS[i]).cloned());
            out.extend(cell);
        }
        for r in &mut baseline {
            r.map_id = BASELINE_ID.to_string();
        }
        for j in 0..data.queries.len() {
            let rows: Vec<TimelineRow> = baseline.iter().filter(|r| r.query_id == QUERY_IDS[j]).cloned().collect();
            out.summaries.push(summarize(&rows)?);
        }
        out.timelines.extend(baseline);
    }

    if !cfg.multi_session {
        return Ok(out);
    }
    for combo in &cfg.combos {
        let mut map = empty_map(&data.world, family, cfg.backend);
        for &s in combo {
            map_session(&mut map, &data.mapping[s], &cfg.slam)?;
        }
        let id = combo_id(combo);
        out.memory.push(MemoryRow::of(&id, family, seed, &map));
        localize_all(&map, &id, &data.queries, family, seed, &cfg.slam, &mut out)?;
    }

    // All sessions, each mapped onto the accumulation of the earlier ones.
    let mut map = empty_map(&data.world, family, cfg.backend);
    for (i, rec) in data.mapping.iter().enumerate() {
        let s = map_session(&mut map, rec, &cfg.slam)?;
        if i > 0 {
            out.chain.push(ChainRow::of(family, seed, i, &s));
        }
    }
    let id = combo_id(&(0..data.mapping.len()).collect::<Vec<_>>());
    out.memory.push(MemoryRow::of(&id, family, seed, &map));
    localize_all(&map, &id, &data.queries, family, seed, &cfg.slam, &mut out)?;
    Ok(out)
}

/// Runs every (family, seed) cell in parallel; output order is fixed by
/// the family and seed order of `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults, EvalError> {
    let jobs: Vec<(FamilyId, u64)> = cfg
        .families
        .iter()
        .flat_map(|&f| cfg.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let parts: Vec<Result<ExperimentResults, EvalError>> = jobs.par_iter().map(|&(f, s)| run_cell(cfg, f, s)).collect();
    let mut out = ExperimentResults::default();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
