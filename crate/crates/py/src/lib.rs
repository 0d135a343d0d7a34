//! Python bindings. Structured results cross the boundary as plain dicts
//! and lists built from the same serde views the CLI and report emit.

use std::collections::BTreeSet;
use std::path::Path;

use evalkit::comparison::{compare_all, cld_letters, sequential_paired_test, welch_t_test, MetricData, PairedBinarySequence};
use evalkit::datatools::{self, filter_corpus, parse_demo_jsonl, MotionThresholds};
use evalkit::posterior;
use evalkit::protocol::{self, SessionPlan, SlotUpdate};
use evalkit::report::run_report_file;
use evalkit::scoring::{score_rubric, RubricSpec, TaskCompletion};
use evalkit::synthlab::{calibrate_sequential_boundary, CalibrationConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(evalkit, EvalkitError, PyValueError, "Raised for any evalkit domain error.");

fn err(e: impl std::fmt::Display) -> PyErr {
    EvalkitError::new_err(e.to_string())
}

/// Converts through JSON so Python sees dicts, lists and floats.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
#[pyo3(signature = (successes, trials, level = 0.95, grid = false))]
fn beta_posterior<'py>(py: Python<'py>, successes: u64, trials: u64, level: f64, grid: bool) -> PyResult<Bound<'py, PyAny>> {
    let post = posterior::beta_posterior(successes, trials).map_err(err)?;
    let mut v = serde_json::json!({
        "n": trials,
        "s": successes,
        "alpha": post.alpha,
        "beta": post.beta,
        "empirical_sr": post.empirical_rate(),
        "mean": post.mean(),
        "mode": post.mode(),
        "credible_interval": post.credible_interval(level),
    });
    if grid {
        v["grid"] = serde_json::to_value(post.density_grid()).map_err(err)?;
    }
    to_py(py, &v)
}

/// `counts[i]` rollouts reached `i` of `len(counts) - 1` milestones.
#[pyfunction]
#[pyo3(signature = (counts, draws = 4000, seed = 0))]
fn dirichlet_mean_posterior<'py>(py: Python<'py>, counts: Vec<u64>, draws: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    if counts.len() < 2 {
        return Err(err("counts needs one entry per completion level, at least 2"));
    }
    let m = counts.len() - 1;
    let samples: Vec<TaskCompletion> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(TaskCompletion::from_counts(i, m), c as usize))
        .collect();
    let d = posterior::dirichlet_mean_posterior(&samples, m, draws, seed).map_err(err)?;
    to_py(
        py,
        &serde_json::json!({
            "expected_mean": d.posterior.expected_mean(),
            "mc_mean": d.mc_mean,
            "mc_std_error": d.mc_std_error,
            "draws": d.draws,
            "seed": d.seed,
            "grid": d.grid,
        }),
    )
}

#[pyfunction]
fn bonferroni_alpha(alpha: f64, k: usize) -> PyResult<f64> {
    evalkit::comparison::bonferroni_alpha(alpha, k).map_err(err)
}

/// Paired sequential test on outcomes aligned by initial condition; `None`
/// marks a missing rollout.
#[pyfunction]
#[pyo3(signature = (a, b, alpha = 0.05))]
fn sequential_test<'py>(py: Python<'py>, a: Vec<Option<bool>>, b: Vec<Option<bool>>, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
    if a.len() != b.len() {
        return Err(err(format!("sequences differ in length: {} vs {}", a.len(), b.len())));
    }
    let d = sequential_paired_test(&PairedBinarySequence::from_aligned(&a, &b), alpha).map_err(err)?;
    to_py(py, &d)
}

#[pyfunction]
#[pyo3(signature = (a, b, alpha = 0.05))]
fn welch_test<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &welch_t_test(&a, &b, alpha).map_err(err)?)
}

fn compare<'py>(py: Python<'py>, policies: Vec<String>, data: MetricData, alpha: f64, per_test_alpha: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
    let matrix = compare_all(&policies, &data, alpha, per_test_alpha).map_err(err)?;
    let cld = cld_letters(&matrix).map_err(err)?;
    let letters: serde_json::Map<String, serde_json::Value> = cld
        .policies
        .iter()
        .zip(&cld.letters)
        .map(|(p, l)| (p.clone(), l.clone().into()))
        .collect();
    to_py(py, &serde_json::json!({ "matrix": matrix, "letters": letters }))
}

/// All pairwise sequential tests plus the letter display.
#[pyfunction]
#[pyo3(signature = (policies, outcomes, alpha = 0.05, per_test_alpha = None))]
fn compare_binary<'py>(
    py: Python<'py>,
    policies: Vec<String>,
    outcomes: Vec<Vec<Option<bool>>>,
    alpha: f64,
    per_test_alpha: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    compare(py, policies, MetricData::Binary(outcomes), alpha, per_test_alpha)
}

/// All pairwise Welch tests on task completion plus the letter display.
#[pyfunction]
#[pyo3(signature = (policies, samples, alpha = 0.05, per_test_alpha = None))]
fn compare_tc<'py>(
    py: Python<'py>,
    policies: Vec<String>,
    samples: Vec<Vec<f64>>,
    alpha: f64,
    per_test_alpha: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    compare(py, policies, MetricData::TaskCompletion(samples), alpha, per_test_alpha)
}

/// Returns `(achieved, milestones, task_completion)`. Answers list the
/// milestones first, then the failure questions.
#[pyfunction]
#[pyo3(signature = (answers, milestones, failure_questions = Vec::new()))]
fn rubric_score(answers: Vec<bool>, milestones: Vec<String>, failure_questions: Vec<String>) -> PyResult<(usize, usize, f64)> {
    let spec = RubricSpec::new("rubric", milestones, failure_questions).map_err(err)?;
    let tc = score_rubric(&answers, &spec).map_err(err)?;
    Ok((tc.numerator(), tc.denominator(), tc.value()))
}

#[pyfunction]
fn normalize_value(x: f64, p02: f64, p98: f64) -> f64 {
    datatools::normalize_value(x, datatools::Percentiles { p02, p98 })
}

/// Returns `(value, lossy)`; `lossy` is set for clipped inputs.
#[pyfunction]
fn denormalize_value(y: f64, p02: f64, p98: f64) -> (f64, bool) {
    let d = datatools::denormalize_value(y, datatools::Percentiles { p02, p98 });
    (d.value, d.lossy)
}

/// Per-(dim, timestep) percentile normalizer for one data source.
#[pyclass(module = "evalkit", frozen)]
struct Normalizer {
    inner: datatools::Normalizer,
}

#[pymethods]
impl Normalizer {
    /// `samples[i][t][d]`: dimension `d` at timestep `t` of sample `i`.
    #[staticmethod]
    #[pyo3(signature = (source_id, samples, exempt_dims = Vec::new()))]
    fn fit(source_id: &str, samples: Vec<Vec<Vec<f64>>>, exempt_dims: Vec<usize>) -> PyResult<Self> {
        let exempt: BTreeSet<usize> = exempt_dims.into_iter().collect();
        let inner = datatools::fit_normalizer(source_id, &samples, &exempt).map_err(err)?;
        Ok(Normalizer { inner })
    }

    #[getter]
    fn source_id(&self) -> &str {
        &self.inner.source_id
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.inner.timesteps
    }

    /// `(p02, p98)`, or `None` for an exempt dimension.
    fn percentiles(&self, dim: usize, timestep: usize) -> PyResult<Option<(f64, f64)>> {
        if dim >= self.inner.dims || timestep >= self.inner.timesteps {
            return Err(err(format!("({dim}, {timestep}) outside {}x{}", self.inner.dims, self.inner.timesteps)));
        }
        Ok(self.inner.cells.get(&(dim, timestep)).map(|p| (p.p02, p.p98)))
    }

    /// Normalizes a `[timestep][dim]` chunk.
    fn normalize(&self, chunk: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        self.inner.normalize_chunk(&self.inner.source_id, &chunk).map_err(err)
    }

    /// Returns `(rows, lossy)`.
    fn denormalize(&self, chunk: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, bool)> {
        self.inner.denormalize_chunk(&self.inner.source_id, &chunk).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Normalizer(source_id={:?}, dims={}, timesteps={}, exempt={:?})",
            self.inner.source_id, self.inner.dims, self.inner.timesteps, self.inner.exempt_dims
        )
    }
}

/// Blinded evaluation session. Only `reveal()` exposes policy identities.
#[pyclass(module = "evalkit")]
struct Session {
    inner: protocol::Session,
}

impl Session {
    fn update(&mut self, bundle_id: &str, slot: usize, update: SlotUpdate, rollout_id: Option<&str>, evaluator_id: Option<&str>) -> PyResult<String> {
        let status = self
            .inner
            .record_slot(bundle_id, slot, rollout_id, update, evaluator_id)
            .map_err(err)?;
        Ok(serde_json::to_value(status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default())
    }
}

#[pymethods]
impl Session {
    /// `policies` is a list of `(policy_id, display_name)`.
    #[new]
    #[pyo3(signature = (policies, tasks, n_bundles, seed = 0))]
    fn new(policies: Vec<(String, String)>, tasks: Vec<String>, n_bundles: usize, seed: u64) -> PyResult<Self> {
        let inner = protocol::create_session(&SessionPlan {
            policies,
            tasks,
            n_bundles,
            rng_seed: seed,
            ..Default::default()
        })
        .map_err(err)?;
        Ok(Session { inner })
    }

    #[getter]
    fn session_id(&self) -> &str {
        &self.inner.session_id
    }

    /// `(done, total)` slots.
    #[getter]
    fn progress(&self) -> (usize, usize) {
        self.inner.progress()
    }

    #[getter]
    fn complete(&self) -> bool {
        self.inner.is_complete()
    }

    fn missing_slots(&self) -> Vec<String> {
        self.inner.missing_slots()
    }

    /// The next slot to run, blinded.
    fn next_assignment<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.next_assignment().map_err(err)?)
    }

    fn start(&mut self, bundle_id: &str, slot: usize) -> PyResult<String> {
        self.update(bundle_id, slot, SlotUpdate::Running, None, None)
    }

    #[pyo3(signature = (bundle_id, slot, rollout_id = None, evaluator_id = None))]
    fn finish(&mut self, bundle_id: &str, slot: usize, rollout_id: Option<&str>, evaluator_id: Option<&str>) -> PyResult<String> {
        self.update(bundle_id, slot, SlotUpdate::Done, rollout_id, evaluator_id)
    }

    /// First abort re-queues the slot, a second marks it missing.
    fn abort(&mut self, bundle_id: &str, slot: usize) -> PyResult<String> {
        self.update(bundle_id, slot, SlotUpdate::Aborted, None, None)
    }

    /// Blinding code to policy id.
    fn reveal(&self) -> Vec<(String, String)> {
        self.inner
            .policies
            .iter()
            .map(|p| (p.blinding_code.clone(), p.policy_id.clone()))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        let (done, total) = self.inner.progress();
        format!("Session({}, {done}/{total} slots)", self.inner.session_id)
    }
}

/// Writes the report directory and returns its provenance record.
#[pyfunction]
fn run_report<'py>(py: Python<'py>, config_path: &str, out_dir: &str) -> PyResult<Bound<'py, PyAny>> {
    let bundle = py
        .detach(|| run_report_file(Path::new(config_path), Path::new(out_dir)))
        .map_err(err)?;
    to_py(py, &bundle.provenance)
}

#[pyfunction]
#[pyo3(signature = (alpha = 0.05, horizon = 200, replications = 10_000, seed = 2024, correlation = 0.0))]
fn calibrate<'py>(py: Python<'py>, alpha: f64, horizon: usize, replications: usize, seed: u64, correlation: f64) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = CalibrationConfig::new(alpha, horizon, replications, seed);
    cfg.correlation = correlation;
    let report = py.detach(|| calibrate_sequential_boundary(&cfg)).map_err(err)?;
    let frozen = report.frozen_boundary().kappa;
    let v = to_py(py, &report)?;
    v.set_item("frozen_kappa", frozen)?;
    Ok(v)
}

/// Filters one-demo-per-line JSONL. Returns the corpus summary with the
/// index of the first kept frame of every demo.
#[pyfunction]
#[pyo3(signature = (jsonl, translation_m = datatools::TRANSLATION_THRESHOLD_M, rotation_deg = datatools::ROTATION_THRESHOLD_DEG))]
fn filter_demos<'py>(py: Python<'py>, jsonl: &str, translation_m: f64, rotation_deg: f64) -> PyResult<Bound<'py, PyAny>> {
    let demos = parse_demo_jsonl(jsonl).map_err(err)?;
    let th = MotionThresholds {
        translation_m,
        rotation_deg,
    };
    let (filtered, summary) = filter_corpus(&demos, th).map_err(err)?;
    let mut v = serde_json::to_value(&summary).map_err(err)?;
    v["first_kept"] = filtered.iter().map(|f| f.first_kept).collect::<Vec<_>>().into();
    to_py(py, &v)
}

#[pymodule(name = "evalkit")]
pub fn evalkit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EvalkitError", m.py().get_type::<EvalkitError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Normalizer>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(beta_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_mean_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(bonferroni_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(sequential_test, m)?)?;
    m.add_function(wrap_pyfunction!(welch_test, m)?)?;
    m.add_function(wrap_pyfunction!(compare_binary, m)?)?;
    m.add_function(wrap_pyfunction!(compare_tc, m)?)?;
    m.add_function(wrap_pyfunction!(rubric_score, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_value, m)?)?;
    m.add_function(wrap_pyfunction!(denormalize_value, m)?)?;
    m.add_function(wrap_pyfunction!(run_report, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(filter_demos, m)?)?;
    Ok(())
}
