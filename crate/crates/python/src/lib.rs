//! Python bindings: scenes, the forecasting model, training, metrics and
//! the gradient check.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use tgforecast::datagen::{self, DatasetSpec, Preset, Split};
use tgforecast::harness::eval::{evaluate_prepared, load_model, save_model};
use tgforecast::harness::gradcheck::{run_grad_check, GradCheckSettings};
use tgforecast::harness::{self, TrainConfig, TrainOptions};
use tgforecast::metrics::{self, MISS_THRESHOLD_M};
use tgforecast::nn::ParamStore;
use tgforecast::objective;
use tgforecast::scene::normalize_scene;
use tgforecast::{Error, Model, ModelConfig, Point2, RawScene, Toggles};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn points(v: &[(f64, f64)]) -> Vec<Point2> {
    v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
}

fn tuples(v: &[Point2]) -> Vec<(f64, f64)> {
    v.iter().map(|p| (p.x, p.y)).collect()
}

fn modes(v: &[Vec<(f64, f64)>]) -> Vec<Vec<Point2>> {
    v.iter().map(|m| points(m)).collect()
}

fn parse_split(split: Option<&str>) -> PyResult<Option<Split>> {
    match split {
        None | Some("all") => Ok(None),
        Some("train") => Ok(Some(Split::Train)),
        Some("val") => Ok(Some(Split::Val)),
        Some(other) => Err(PyValueError::new_err(format!(
            "unknown split `{other}`; expected train, val or all"
        ))),
    }
}

/// A scene record in its original frame.
#[pyclass(name = "Scene", frozen, from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: RawScene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = RawScene::from_json(text, "<python>".as_ref()).map_err(py_err)?;
        Ok(PyScene { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = tgforecast::scene::load_scene(&path).map_err(py_err)?;
        Ok(PyScene { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        tgforecast::scene::write_scene(&self.inner, &path).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// The scene in the frame of the agent of interest.
    fn normalized(&self) -> PyResult<PyScene> {
        let n = normalize_scene(&self.inner).map_err(py_err)?;
        Ok(PyScene { inner: n.scene })
    }

    #[getter]
    fn scene_id(&self) -> String {
        self.inner.scene_id.clone()
    }

    #[getter]
    fn num_agents(&self) -> usize {
        self.inner.agents.len()
    }

    #[getter]
    fn num_lanes(&self) -> usize {
        self.inner.lanes.len()
    }

    #[getter]
    fn ground_truth(&self) -> Vec<(f64, f64)> {
        tuples(&self.inner.gt_future)
    }

    /// Observed positions of the agent of interest.
    #[getter]
    fn observed(&self) -> Vec<(f64, f64)> {
        self.inner.aoi().observed().map(|s| (s.x, s.y)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(id={:?}, agents={}, lanes={})",
            self.inner.scene_id,
            self.inner.agents.len(),
            self.inner.lanes.len()
        )
    }
}

/// K modes in the normalized frame, with their raw-frame counterparts.
#[pyclass(name = "Forecast", frozen, get_all)]
struct PyForecast {
    scene_id: String,
    trajectories: Vec<Vec<(f64, f64)>>,
    raw_trajectories: Vec<Vec<(f64, f64)>>,
    probabilities: Vec<f64>,
    goals: Vec<(f64, f64)>,
}

#[pymethods]
impl PyForecast {
    fn __repr__(&self) -> String {
        format!("Forecast(id={:?}, k={})", self.scene_id, self.trajectories.len())
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    model: Model,
    store: ParamStore,
}

fn prepare_all(model: &Model, scenes: &[PyScene]) -> PyResult<Vec<tgforecast::PreparedScene>> {
    scenes.iter().map(|s| model.prepare(&s.inner).map_err(py_err)).collect()
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed=0, feature_dim=128, k=6, tg=true, seq_mem=true, scene_mem=true, goal_pred=true, goal_loss=true))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        feature_dim: usize,
        k: usize,
        tg: bool,
        seq_mem: bool,
        scene_mem: bool,
        goal_pred: bool,
        goal_loss: bool,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            feature_dim,
            k,
            toggles: Toggles {
                tg,
                seq_mem,
                scene_mem,
                goal_pred,
                goal_loss,
            },
            ..ModelConfig::default()
        };
        let (model, store) = Model::new(cfg, seed).map_err(py_err)?;
        Ok(PyModel { model, store })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, store) = load_model(&path, None).map_err(py_err)?;
        Ok(PyModel { model, store })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.model, &self.store, &path).map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.model.cfg.hash_hex()
    }

    fn forecast(&self, scene: &PyScene) -> PyResult<PyForecast> {
        let p = self.model.prepare(&scene.inner).map_err(py_err)?;
        let out = self.model.forecast(&self.store, &p).map_err(py_err)?;
        Ok(PyForecast {
            scene_id: out.scene_id.clone(),
            trajectories: out.trajectories.iter().map(|t| tuples(t)).collect(),
            raw_trajectories: out.raw_trajectories().iter().map(|t| tuples(t)).collect(),
            probabilities: out.probabilities.clone(),
            goals: tuples(&out.goals.refined),
        })
    }

    /// Loss terms on one scene with ground truth.
    fn loss(&self, scene: &PyScene) -> PyResult<HashMap<String, f64>> {
        let p = self.model.prepare(&scene.inner).map_err(py_err)?;
        let r = self.model.loss(&self.store, &p, None).map_err(py_err)?;
        Ok(HashMap::from([
            ("total".to_string(), r.total),
            ("traj".to_string(), r.traj_loss),
            ("goal_reg".to_string(), r.goal_reg_loss),
            ("goal_cls".to_string(), r.goal_cls_loss),
            ("best_mode".to_string(), r.best_mode_index as f64),
        ]))
    }

    /// Mean minADE, minFDE, miss rate and Brier-minFDE in the normalized frame.
    #[pyo3(signature = (scenes, k=None))]
    fn evaluate(&self, scenes: Vec<PyScene>, k: Option<usize>) -> PyResult<HashMap<String, f64>> {
        let prepared = prepare_all(&self.model, &scenes)?;
        let r = evaluate_prepared(&self.model, &self.store, &prepared, k.unwrap_or(self.model.cfg.k))
            .map_err(py_err)?;
        Ok(HashMap::from([
            ("min_ade".to_string(), r.min_ade),
            ("min_fde".to_string(), r.min_fde),
            ("miss_rate".to_string(), r.miss_rate),
            ("b_min_fde".to_string(), r.b_min_fde),
        ]))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(feature_dim={}, k={}, parameters={})",
            self.model.cfg.feature_dim,
            self.model.cfg.k,
            self.store.num_scalars()
        )
    }
}

/// One scene of a named preset (straight, curve, t_intersection, four_way, yield).
#[pyfunction]
#[pyo3(signature = (preset, seed, scene_id=None))]
fn gen_scene(preset: &str, seed: u64, scene_id: Option<String>) -> PyResult<PyScene> {
    use rand::{Rng, SeedableRng};
    let preset = Preset::parse(preset).map_err(py_err)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let template = preset.sample(&mut rng);
    let id = scene_id.unwrap_or_else(|| format!("{}_{seed}", preset.name()));
    let inner = datagen::gen_scene(&template, rng.random(), &id).map_err(py_err)?;
    Ok(PyScene { inner })
}

#[pyfunction]
fn micro_scene(seed: u64) -> PyScene {
    PyScene {
        inner: datagen::micro_scene(seed),
    }
}

/// Writes a dataset and returns the number of scenes.
#[pyfunction]
#[pyo3(signature = (out, seed, counts, val_fraction=0.2))]
fn gen_dataset(out: PathBuf, seed: u64, counts: &str, val_fraction: f64) -> PyResult<usize> {
    let spec = DatasetSpec {
        counts: datagen::parse_counts(counts).map_err(py_err)?,
        val_fraction,
    };
    let m = datagen::gen_dataset(&spec, seed, &out).map_err(py_err)?;
    Ok(m.scenes.len())
}

#[pyfunction]
#[pyo3(signature = (path, split=None))]
fn load_scenes(path: PathBuf, split: Option<&str>) -> PyResult<Vec<PyScene>> {
    let scenes = datagen::load_scenes(&path, parse_split(split)?).map_err(py_err)?;
    Ok(scenes.into_iter().map(|inner| PyScene { inner }).collect())
}

/// Trains on the train split of `data` and returns the model and the
/// per-step loss curve. `config` is a TOML training configuration file.
#[pyfunction]
#[pyo3(signature = (data, seed, config=None, out=None, epochs=None, feature_dim=None, verbose=false))]
fn train(
    data: PathBuf,
    seed: u64,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    feature_dim: Option<usize>,
    verbose: bool,
) -> PyResult<(PyModel, Vec<f64>)> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(&p).map_err(py_err)?,
        None => TrainConfig::default(),
    };
    cfg.seed = Some(seed);
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.lr_decay_epochs.retain(|&d| d < e);
    }
    if let Some(d) = feature_dim {
        cfg.model.feature_dim = d;
    }
    let train_set = datagen::load_split(&data, Some(Split::Train)).map_err(py_err)?;
    let val_set = datagen::load_split(&data, Some(Split::Val)).map_err(py_err)?;
    let opts = TrainOptions { out_dir: out, verbose };
    let o = harness::train(&cfg, &train_set, &val_set, &opts).map_err(py_err)?;
    let curve = o.record.loss_curve();
    Ok((
        PyModel {
            model: o.model,
            store: o.store,
        },
        curve,
    ))
}

/// `(scene_id, max relative error)` per micro-scene.
#[pyfunction]
#[pyo3(signature = (scenes=20, feature_dim=8, seed=0, per_block=None))]
fn grad_check(scenes: usize, feature_dim: usize, seed: u64, per_block: Option<usize>) -> PyResult<Vec<(String, f64)>> {
    let settings = GradCheckSettings {
        model: ModelConfig {
            feature_dim,
            ..ModelConfig::default()
        },
        scenes,
        eps: 1e-6,
        per_block,
        seed,
        jitter: 0.05,
    };
    let r = run_grad_check(&settings).map_err(py_err)?;
    Ok(r.into_iter().map(|s| (s.scene_id, s.max_rel_error)).collect())
}

/// `(minFDE, selected mode)`.
#[pyfunction]
fn min_fde(preds: Vec<Vec<(f64, f64)>>, gt: Vec<(f64, f64)>) -> PyResult<(f64, usize)> {
    metrics::min_fde(&modes(&preds), &points(&gt)).map_err(py_err)
}

#[pyfunction]
fn min_ade(preds: Vec<Vec<(f64, f64)>>, gt: Vec<(f64, f64)>) -> PyResult<f64> {
    metrics::min_ade(&modes(&preds), &points(&gt)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (preds, gt, threshold=MISS_THRESHOLD_M))]
fn miss(preds: Vec<Vec<(f64, f64)>>, gt: Vec<(f64, f64)>, threshold: f64) -> PyResult<u8> {
    metrics::miss(&modes(&preds), &points(&gt), threshold).map_err(py_err)
}

#[pyfunction]
fn brier_min_fde(preds: Vec<Vec<(f64, f64)>>, probs: Vec<f64>, gt: Vec<(f64, f64)>) -> PyResult<f64> {
    metrics::brier_min_fde(&modes(&preds), &probs, &points(&gt)).map_err(py_err)
}

#[pyfunction]
fn smooth_l1(x: f64) -> f64 {
    objective::smooth_l1(x)
}

#[pymodule]
fn tgforecast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyForecast>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_scene, m)?)?;
    m.add_function(wrap_pyfunction!(micro_scene, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(min_fde, m)?)?;
    m.add_function(wrap_pyfunction!(min_ade, m)?)?;
    m.add_function(wrap_pyfunction!(miss, m)?)?;
    m.add_function(wrap_pyfunction!(brier_min_fde, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    Ok(())
}
