//! Python bindings. Thin wrappers: every numeric path stays in the core
//! crate, Python sees flat f64 lists and plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use certitrain::attack::{fgsm_random_init, fosc, pgd, AttackConfig};
use certitrain::bounds::{abstract_loss_at, is_verified, margin_lower_bounds};
use certitrain::checkpoint::{checkpoint_load, checkpoint_save};
use certitrain::config::RunConfig;
use certitrain::error::CertError;
use certitrain::eval::{evaluate, predict, EvalReport};
use certitrain::joint::MomentState;
use certitrain::net::{ce_loss_grads, init_network, LayerSpec, Network};
use certitrain::rng::{derive_rng, stream};
use certitrain::tensor::Tensor;
use certitrain::train::{metrics_csv, train};

fn err(e: CertError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A feedforward classifier plus the optimizer state it was trained with
/// (None for freshly initialized or baseline-style checkpoints).
#[pyclass(name = "Network")]
struct PyNetwork {
    inner: Network,
    moments: Option<MomentState>,
}

impl PyNetwork {
    fn input(&self, x: Vec<f64>) -> PyResult<Tensor> {
        Tensor::new(self.inner.input_shape().to_vec(), x).map_err(err)
    }
}

#[pymethods]
impl PyNetwork {
    /// Build a seeded network from a JSON layer list, e.g.
    /// `[{"affine": {"out_dim": 16}}, "relu", {"affine": {"out_dim": 2}}]`.
    #[staticmethod]
    fn from_specs(specs_json: &str, input_shape: Vec<usize>, seed: u64) -> PyResult<Self> {
        let specs: Vec<LayerSpec> = serde_json::from_str(specs_json)
            .map_err(|e| PyValueError::new_err(format!("layer specs: {e}")))?;
        let inner = init_network(specs, input_shape, seed).map_err(err)?;
        Ok(PyNetwork { inner, moments: None })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, moments) = checkpoint_load(&path).map_err(err)?;
        Ok(PyNetwork { inner, moments })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint_save(&self.inner, self.moments.as_ref(), &path).map_err(err)
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.theta.len()
    }

    #[getter]
    fn has_optimizer_state(&self) -> bool {
        self.moments.is_some()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let (logits, _) = self.inner.forward(&self.input(x)?).map_err(err)?;
        Ok(logits.data)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        predict(&self.inner, &self.input(x)?).map_err(err)
    }

    fn clean_loss(&self, x: Vec<f64>, y: usize) -> PyResult<f64> {
        let (loss, _, _) = ce_loss_grads(&self.inner, &self.input(x)?, y).map_err(err)?;
        Ok(loss)
    }

    /// Certified lower bounds of logit(y) - logit(j) for every j != y,
    /// ascending in j.
    fn margin_lower_bounds(&self, x: Vec<f64>, eps: f64, y: usize) -> PyResult<Vec<f64>> {
        let (mb, _) = margin_lower_bounds(&self.inner, &self.input(x)?, eps, y).map_err(err)?;
        Ok(mb.lower)
    }

    fn is_verified(&self, x: Vec<f64>, eps: f64, y: usize) -> PyResult<bool> {
        let (mb, _) = margin_lower_bounds(&self.inner, &self.input(x)?, eps, y).map_err(err)?;
        Ok(is_verified(&mb))
    }

    fn abstract_loss(&self, x: Vec<f64>, eps: f64, y: usize) -> PyResult<f64> {
        let (loss, _, _) = abstract_loss_at(&self.inner, &self.input(x)?, eps, y).map_err(err)?;
        Ok(loss)
    }

    #[pyo3(signature = (x, y, eps, seed = 0))]
    fn fgsm(&self, x: Vec<f64>, y: usize, eps: f64, seed: u64) -> PyResult<Vec<f64>> {
        let mut rng = derive_rng(seed, &[stream::ATTACK]);
        let adv = fgsm_random_init(&self.inner, &self.input(x)?, y, eps, &mut rng).map_err(err)?;
        Ok(adv.data)
    }

    #[pyo3(signature = (x, y, eps, steps = 200, step_size = None, seed = 0))]
    fn pgd(
        &self,
        x: Vec<f64>,
        y: usize,
        eps: f64,
        steps: usize,
        step_size: Option<f64>,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let step_size = step_size.unwrap_or(eps / 4.0);
        let mut rng = derive_rng(seed, &[stream::ATTACK]);
        let adv = pgd(&self.inner, &self.input(x)?, y, eps, steps, step_size, &mut rng)
            .map_err(err)?;
        Ok(adv.data)
    }

    /// Stationarity of x_adv for the inner maximization; 0 means a
    /// first-order-optimal attack.
    fn fosc(&self, x: Vec<f64>, x_adv: Vec<f64>, y: usize, eps: f64) -> PyResult<f64> {
        let x = self.input(x)?;
        let x_adv = self.input(x_adv)?;
        fosc(&self.inner, &x, &x_adv, y, eps).map_err(err)
    }
}

/// Run a full training job from a run-config JSON string. Returns the
/// trained network and the per-step metrics CSV.
#[pyfunction]
fn train_from_config(config_json: &str) -> PyResult<(PyNetwork, String)> {
    let cfg = RunConfig::from_str_json(config_json).map_err(err)?;
    let (train_data, _) = cfg.load_data().map_err(err)?;
    let tc = cfg.train_config(train_data.len()).map_err(err)?;
    let net0 = cfg.build_net().map_err(err)?;
    let result = train(net0, &tc, &train_data).map_err(err)?;
    let csv = metrics_csv(&result.records);
    Ok((
        PyNetwork { inner: result.net, moments: Some(result.moments) },
        csv,
    ))
}

/// Evaluate a network on the config's evaluation split: standard, PGD, and
/// IBP-verified error rates as a dict.
#[pyfunction]
fn evaluate_from_config<'py>(
    py: Python<'py>,
    config_json: &str,
    net: &PyNetwork,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::from_str_json(config_json).map_err(err)?;
    let (_, eval_data) = cfg.load_data().map_err(err)?;
    let e = cfg.eval_resolved();
    let mut attack = AttackConfig::new(e.eps);
    attack.pgd_steps = e.pgd_steps;
    attack.pgd_step_size = e.pgd_step_size;
    let report = evaluate(&net.inner, &eval_data, e.eps, &attack, e.seed, "python").map_err(err)?;
    report_dict(py, &report)
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("standard_error", r.standard_error)?;
    d.set_item("verified_error", r.verified_error)?;
    d.set_item("pgd_error", r.pgd_error)?;
    d.set_item("eps", r.eps)?;
    d.set_item("pgd_steps", r.pgd_steps)?;
    d.set_item("n_examples", r.n_examples)?;
    d.set_item("model_id", &r.model_id)?;
    Ok(d)
}

#[pymodule]
fn certitrain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(train_from_config, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_from_config, m)?)?;
    Ok(())
}
