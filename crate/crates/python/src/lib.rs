//! Python bindings. Values cross the boundary as plain lists, dicts and
//! floats; images travel as flat `bytes` in HWC order.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sensorlab::evalkit::{self, RunResult, SaliencyMethod};
use sensorlab::rssm::{NoiseSource, Observation, ObservationBundle};
use sensorlab::trainer::{
    self, model_view, Mode, TrainConfig as CoreConfig, Trainer as CoreTrainer,
};
use sensorlab::worlds::{Environment, Reacher as CoreReacher, WorldConfig, IMAGE_ID, PROPRIO_ID};
use sensorlab::{agents, dists, objectives, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Shape { .. } | Error::Domain(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for sensorlab::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Training configuration; keys follow the `section.key` names of the
/// config file format.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: CoreConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (mode = "model_free", **overrides))]
    fn new(mode: &str, overrides: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let mode = Mode::parse(mode)
            .ok_or_else(|| PyValueError::new_err(format!("unknown mode {mode:?}")))?;
        let mut c = TrainConfig {
            inner: CoreConfig::for_mode(mode),
        };
        for (k, v) in overrides.unwrap_or_default() {
            c.set(&k.replacen('_', ".", 1), &v)?;
        }
        Ok(c)
    }

    /// Parses config-file text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(TrainConfig {
            inner: CoreConfig::parse(text).py()?,
        })
    }

    #[staticmethod]
    fn keys() -> Vec<(String, String)> {
        CoreConfig::keys()
            .iter()
            .map(|(k, d)| (k.to_string(), d.to_string()))
            .collect()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(PyValueError::new_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn objective(&self) -> String {
        self.inner.objective_label()
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig({}, seed={})",
            self.inner.objective_label(),
            self.inner.seed
        )
    }
}

/// A training run on the toy reacher.
#[pyclass(name = "Trainer")]
struct Trainer {
    inner: CoreTrainer<CoreReacher>,
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(config: TrainConfig) -> PyResult<Self> {
        let c = config.inner;
        c.validate().py()?;
        let env = CoreReacher::new(c.world.clone()).py()?;
        Ok(Trainer {
            inner: CoreTrainer::new(c, env).py()?,
        })
    }

    /// Runs the configured protocol to its step budget.
    fn run(&mut self, py: Python<'_>) -> PyResult<()> {
        let inner = &mut self.inner;
        py.detach(|| inner.run()).py()
    }

    /// Collects one episode into replay and returns its return.
    #[pyo3(signature = (random = true))]
    fn collect(&mut self, random: bool) -> PyResult<f64> {
        self.inner.collect(random).py()
    }

    /// One representation update; returns the reported objective terms.
    fn model_step(&mut self) -> PyResult<BTreeMap<String, f64>> {
        let names = trainer::objective_terms(&self.inner.model, &self.inner.config).py()?;
        let step = self.inner.model_step().py()?;
        let mut terms: BTreeMap<String, f64> = names.into_iter().zip(step.terms).collect();
        terms.insert("total".into(), step.total);
        Ok(terms)
    }

    /// Deterministic returns on the evaluation episode set.
    fn evaluate(&mut self) -> PyResult<Vec<f64>> {
        self.inner.evaluate().py()
    }

    fn write_outputs(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write_outputs(&dir).py()
    }

    fn metrics_csv(&self) -> String {
        self.inner.metrics.to_csv()
    }

    fn eval_csv(&self) -> String {
        self.inner.eval_csv()
    }

    /// `(checks, violations)` of the parameter-separation log.
    fn separation(&self) -> (usize, usize) {
        (
            self.inner.separation.checks,
            self.inner.separation.violations,
        )
    }

    fn model_digest(&self) -> String {
        self.inner.model.params.digest()
    }

    #[getter]
    fn env_steps(&self) -> usize {
        self.inner.env_steps
    }

    #[getter]
    fn total_updates(&self) -> usize {
        self.inner.total_updates
    }

    #[getter]
    fn replay_steps(&self) -> usize {
        self.inner.buffer.total_steps()
    }

    /// Pixel saliency of the first posterior of episode `seed`, as a
    /// row-major list of lists.
    #[pyo3(signature = (seed, probes = None))]
    fn saliency(&mut self, seed: u64, probes: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let t = &mut self.inner;
        let bundle = t.env.reset(seed);
        let method = match probes {
            Some(count) => SaliencyMethod::Probes { count, seed },
            None => SaliencyMethod::Exact,
        };
        let zero = vec![0.0; t.model.config.action_dim];
        let map = evalkit::saliency_map(
            &t.model,
            &t.model.initial_latent(),
            &zero,
            &bundle,
            IMAGE_ID,
            method,
        )
        .py()?;
        Ok(map.values.chunks(map.size).map(<[f64]>::to_vec).collect())
    }

    /// Posterior features `[h; mean]` after filtering one episode driven by
    /// `actions` from reset `seed`.
    fn filter(&mut self, seed: u64, actions: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let t = &mut self.inner;
        let mut bundle = t.env.reset(seed);
        let mut state = t.model.initial_latent();
        let mut prev = vec![0.0; t.model.config.action_dim];
        let mut out = Vec::with_capacity(actions.len() + 1);
        for a in actions.iter().map(Some).chain(std::iter::once(None)) {
            let view = model_view(&t.model.config, &bundle).py()?;
            state = t
                .model
                .observe(&[state], &[prev], &[view], &mut NoiseSource::Zero)
                .py()?
                .remove(0);
            out.push(state.features());
            let Some(a) = a else { break };
            let step = t.env.step(a).py()?;
            bundle = step.bundle;
            prev = a.clone();
            if step.done {
                break;
            }
        }
        Ok(out)
    }
}

fn bundle_dict<'py>(
    py: Python<'py>,
    bundle: &ObservationBundle,
) -> PyResult<BTreeMap<String, Py<PyAny>>> {
    let mut d = BTreeMap::new();
    for id in [IMAGE_ID, PROPRIO_ID] {
        match bundle.get(id) {
            Some(Observation::Image(img)) => {
                d.insert(
                    id.to_string(),
                    PyBytes::new(py, &img.pixels).into_any().unbind(),
                );
            }
            Some(Observation::Vector(v)) => {
                d.insert(
                    id.to_string(),
                    v.clone().into_pyobject(py)?.into_any().unbind(),
                );
            }
            None => {}
        }
    }
    Ok(d)
}

/// The two-sensor reacher: `reset` and `step` return dicts with `image`
/// (HWC `bytes` at the rendered size) and `proprio` (list of floats).
#[pyclass(name = "Reacher")]
struct Reacher {
    inner: CoreReacher,
}

#[pymethods]
impl Reacher {
    #[new]
    #[pyo3(signature = (variant = "clean", image_size = 32, episode_length = 100, action_repeat = 1))]
    fn new(
        variant: &str,
        image_size: usize,
        episode_length: usize,
        action_repeat: usize,
    ) -> PyResult<Self> {
        let variant = sensorlab::worlds::Variant::parse(variant)
            .ok_or_else(|| PyValueError::new_err(format!("unknown variant {variant:?}")))?;
        let defaults = WorldConfig::default();
        let config = WorldConfig {
            variant,
            image_size,
            precrop_size: image_size
                + (defaults.precrop_size - defaults.image_size) * image_size / defaults.image_size,
            episode_length,
            action_repeat,
            ..defaults
        };
        Ok(Reacher {
            inner: CoreReacher::new(config).py()?,
        })
    }

    fn reset<'py>(&mut self, py: Python<'py>, seed: u64) -> PyResult<BTreeMap<String, Py<PyAny>>> {
        let b = self.inner.reset(seed);
        bundle_dict(py, &b)
    }

    /// Returns `(observation, reward, done)`.
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        action: Vec<f64>,
    ) -> PyResult<(BTreeMap<String, Py<PyAny>>, f64, bool)> {
        let r = self.inner.step(&action).py()?;
        Ok((bundle_dict(py, &r.bundle)?, r.reward, r.done))
    }

    /// Occlusion-free render of the current state, HWC `bytes`.
    fn ground_truth_image<'py>(&self, py: Python<'py>) -> Option<Bound<'py, PyBytes>> {
        self.inner
            .ground_truth_image()
            .map(|img| PyBytes::new(py, &img.pixels))
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.config.precrop_shape();
        (s.size, s.size, s.channels)
    }

    #[getter]
    fn episode_steps(&self) -> usize {
        self.inner.episode_steps()
    }
}

#[pyfunction]
fn iqm(values: Vec<f64>) -> PyResult<f64> {
    evalkit::iqm(&values).py()
}

/// Percentile interval of the pooled IQM, resampling within each stratum.
#[pyfunction]
#[pyo3(signature = (strata, resamples = 2000, level = 0.95, seed = 0))]
fn bootstrap_ci(
    strata: Vec<Vec<f64>>,
    resamples: usize,
    level: f64,
    seed: u64,
) -> PyResult<(f64, f64)> {
    evalkit::stratified_bootstrap_ci(
        &strata,
        resamples,
        level,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .py()
}

/// Aggregates training output directories into rows of
/// `variant, objective, step, iqm, ci_low, ci_high`.
#[pyfunction]
#[pyo3(signature = (runs, resamples = 2000, seed = 0))]
fn aggregate(
    runs: Vec<PathBuf>,
    resamples: usize,
    seed: u64,
) -> PyResult<Vec<(String, String, usize, f64, f64, f64)>> {
    let results = runs
        .iter()
        .map(|d| RunResult::load(d))
        .collect::<sensorlab::Result<Vec<_>>>()
        .py()?;
    Ok(evalkit::aggregate(&results, resamples, seed)
        .py()?
        .into_iter()
        .map(|r| (r.variant, r.objective, r.step, r.iqm, r.ci_low, r.ci_high))
        .collect())
}

/// Symmetric InfoNCE estimate of a positive score matrix.
#[pyfunction]
fn infonce(scores: Vec<Vec<f64>>) -> PyResult<f64> {
    objectives::infonce(&scores).py()
}

/// `KL(N(mq, sq²) ‖ N(mp, sp²))` for diagonal Gaussians.
#[pyfunction]
fn kl_diag(mq: Vec<f64>, sq: Vec<f64>, mp: Vec<f64>, sp: Vec<f64>) -> PyResult<f64> {
    let q = dists::DiagGaussian::new(mq, sq).py()?;
    let p = dists::DiagGaussian::new(mp, sp).py()?;
    dists::kl_diag(&q, &p).py()
}

#[pyfunction]
#[pyo3(signature = (rewards, values, gamma = 0.99, lam = 0.95))]
fn lambda_returns(rewards: Vec<f64>, values: Vec<f64>, gamma: f64, lam: f64) -> PyResult<Vec<f64>> {
    agents::lambda_returns(&rewards, &values, gamma, lam).py()
}

/// Returns of a uniform random policy on episodes `first_seed..`.
#[pyfunction]
#[pyo3(signature = (config, episodes, first_seed, policy_seed = 0))]
fn random_returns(
    config: TrainConfig,
    episodes: usize,
    first_seed: u64,
    policy_seed: u64,
) -> PyResult<Vec<f64>> {
    let mut env = CoreReacher::new(config.inner.world.clone()).py()?;
    let mut policy = trainer::RandomPolicy {
        action_dim: env.action_dim(),
        rng: ChaCha8Rng::seed_from_u64(policy_seed),
    };
    evalkit::evaluate_policy(&mut env, &mut policy, episodes, first_seed).py()
}

/// Runs the command-line tool in-process; returns its exit status.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("sensorlab".to_string())
        .chain(args)
        .collect();
    py.detach(|| evalkit::cli_run(argv, &mut std::io::stdout(), &mut std::io::stderr()))
}

#[pymodule(name = "sensorlab")]
pub fn sensorlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TrainConfig>()?;
    m.add_class::<Trainer>()?;
    m.add_class::<Reacher>()?;
    m.add_function(wrap_pyfunction!(iqm, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(kl_diag, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_returns, m)?)?;
    m.add_function(wrap_pyfunction!(random_returns, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
