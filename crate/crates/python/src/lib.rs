use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;
use serde_json::json;

use msslam::eval::{run_experiment as run_matrix, ExperimentConfig, TimelineRow};
use msslam::features::FamilyId;
use msslam::geom::CameraIntrinsics;
use msslam::graph::MultiSessionMap;
use msslam::io::{map_from_str, map_hash, map_to_string, session_from_str, to_string, world_from_str};
use msslam::slam::{localize_session, map_session, merge_maps, SessionSummary, SlamConfig};
use msslam::synthworld::{
    generate_world as make_world, parse_start_time, simulate_session as simulate, FamilyModel, FamilyPreset,
    OdometryNoise, RenderConfig, TrajectorySpec, WorldParams,
};
use msslam::vocabulary::SearchBackend;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn family(code: &str) -> PyResult<FamilyId> {
    FamilyId::from_code(code).map_err(value_err)
}

/// Hands a JSON document to Python as native objects.
fn loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn engine(radius: f64, threshold: f64, min_inliers: usize) -> SlamConfig {
    let mut cfg = SlamConfig::default();
    cfg.proximity_radius = radius;
    cfg.bayes.threshold = threshold;
    cfg.registration.min_inliers = min_inliers;
    cfg
}

fn summary_json(s: &SessionSummary) -> serde_json::Value {
    json!({
        "session": s.label,
        "frames": s.frames,
        "aligned": s.aligned,
        "anchor_frame": s.anchor_frame,
        "inter_session_frames": s.inter_session_frames,
        "max_gap": s.max_gap,
        "loop_closures": s.loop_closures,
        "proximity_links": s.proximity_links,
    })
}

/// Generates a synthetic world; returns its JSON document.
#[pyfunction]
fn generate_world(seed: u64) -> PyResult<String> {
    Ok(to_string(&make_world(seed, &WorldParams::default()).map_err(value_err)?))
}

/// Simulates one traversal; `start` is `HH:MM`, `1`..`6` or `A`..`F`.
#[pyfunction]
#[pyo3(signature = (world, family_code, start, seed, label=None))]
fn simulate_session(world: &str, family_code: &str, start: &str, seed: u64, label: Option<String>) -> PyResult<String> {
    let world = world_from_str(world).map_err(value_err)?;
    let fam = family(family_code)?;
    let t = parse_start_time(start).ok_or_else(|| PyValueError::new_err(format!("bad start time {start}")))?;
    let model = FamilyModel::new(&world, &FamilyPreset::for_family(fam));
    let rec = simulate(
        &world,
        &model,
        &TrajectorySpec::default(),
        t,
        &OdometryNoise::default(),
        &RenderConfig::default(),
        seed,
        label.unwrap_or_else(|| start.to_string()),
    );
    Ok(to_string(&rec))
}

/// Runs the mapping/localization matrices; returns summary rows as dicts.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, seeds: Vec<u64>, families: Vec<String>) -> PyResult<Bound<'py, PyList>> {
    let cfg = ExperimentConfig {
        seeds,
        families: families.iter().map(|f| family(f)).collect::<PyResult<_>>()?,
        ..Default::default()
    };
    let results = py.detach(|| run_matrix(&cfg)).map_err(value_err)?;
    let out = PyList::empty(py);
    for row in &results.summaries {
        out.append(loads(py, &to_string(row))?)?;
    }
    Ok(out)
}

/// A multi-session map.
#[pyclass(name = "Map")]
struct PyMap {
    inner: MultiSessionMap,
}

#[pymethods]
impl PyMap {
    /// Empty map for a descriptor family; camera intrinsics come from
    /// `world` when given.
    #[new]
    #[pyo3(signature = (family_code, world=None))]
    fn new(family_code: &str, world: Option<&str>) -> PyResult<Self> {
        let camera = match world {
            Some(w) => world_from_str(w).map_err(value_err)?.camera,
            None => CameraIntrinsics::default(),
        };
        Ok(Self {
            inner: MultiSessionMap::new(camera, family(family_code)?, SearchBackend::default()),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: map_from_str(text).map_err(|e| PyIOError::new_err(e.to_string()))?,
        })
    }

    fn to_json(&self) -> String {
        map_to_string(&self.inner)
    }

    /// SHA-256 of the serialized map.
    fn hash(&self) -> String {
        map_hash(&self.inner)
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family.code()
    }

    #[getter]
    fn sessions(&self) -> usize {
        self.inner.sessions.len()
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.inner.nodes.len()
    }

    #[getter]
    fn links(&self) -> usize {
        self.inner.links.len()
    }

    #[getter]
    fn words(&self) -> usize {
        self.inner.vocabulary.len()
    }

    /// Maps one session JSON document onto this map; returns its summary.
    #[pyo3(signature = (session, radius=1.0, threshold=0.15, min_inliers=20))]
    fn map_session<'py>(
        &mut self,
        py: Python<'py>,
        session: &str,
        radius: f64,
        threshold: f64,
        min_inliers: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let rec = session_from_str(session).map_err(value_err)?;
        let summary = map_session(&mut self.inner, &rec, &engine(radius, threshold, min_inliers)).map_err(value_err)?;
        loads(py, &summary_json(&summary).to_string())
    }

    /// Localizes a session without modifying the map; returns one timeline
    /// row per frame.
    #[pyo3(signature = (session, map_id="map", seed=0, radius=1.0, threshold=0.15, min_inliers=20))]
    fn localize<'py>(
        &self,
        py: Python<'py>,
        session: &str,
        map_id: &str,
        seed: u64,
        radius: f64,
        threshold: f64,
        min_inliers: usize,
    ) -> PyResult<Bound<'py, PyList>> {
        let rec = session_from_str(session).map_err(value_err)?;
        let events = localize_session(&self.inner, &rec, &engine(radius, threshold, min_inliers)).map_err(value_err)?;
        let out = PyList::empty(py);
        for e in &events {
            let row = TimelineRow::from_event(map_id, &rec.label, self.inner.family, seed, e);
            out.append(loads(py, &to_string(&row))?)?;
        }
        Ok(out)
    }

    /// Re-maps every session of `maps`, in order, into one new map.
    #[staticmethod]
    fn merge(maps: Vec<PyRef<'_, PyMap>>) -> PyResult<Self> {
        if maps.len() < 2 {
            return Err(PyValueError::new_err("merge needs at least two maps"));
        }
        let owned: Vec<MultiSessionMap> = maps.iter().map(|m| m.inner.clone()).collect();
        let (inner, _) = merge_maps(&owned, &SlamConfig::default()).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Map(family={}, sessions={}, nodes={}, words={})",
            self.inner.family.code(),
            self.inner.sessions.len(),
            self.inner.nodes.len(),
            self.inner.vocabulary.len()
        )
    }
}

#[pymodule]
fn pymsslam(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_world, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_session, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<PyMap>()?;
    Ok(())
}
