//! Python bindings. Complex matrices cross the boundary as lists of rows
//! of Python `complex` values.

use num_complex::Complex64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use qprecode::channel::{gen_los_ula, gen_rayleigh, gen_symbols, CMatrix, ChannelMatrix, ChannelModel};
use qprecode::dataset::ChannelDataset;
use qprecode::energy::{self, DacMode, GnnShape, PowerModel};
use qprecode::gnn::checkpoint::Checkpoint;
use qprecode::gnn::{self, GnnConfig, GnnWeights};
use qprecode::harness::{self, ExperimentConfig};
use qprecode::metrics::{self, estimate_bussgang, noise_variance, rate_from_snidr, snidr_from_samples};
use qprecode::precoders::{self, linear_quantized_tx, PrecoderKind};
use qprecode::quantizer::{lloyd_max, Resolution, ScalarQuantizer};
use qprecode::SymbolBatch;

type Rows = Vec<Vec<Complex64>>;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: &Rows) -> PyResult<CMatrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(CMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn to_rows(m: &CMatrix) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn channel(h: &Rows) -> PyResult<ChannelMatrix> {
    ChannelMatrix::new(to_matrix(h)?, ChannelModel::Rayleigh).map_err(err)
}

fn bits_arg(bits: Option<u32>) -> PyResult<Resolution> {
    Resolution::design(bits).map_err(err)
}

/// Lloyd-Max quantizer for a unit-variance Gaussian input.
#[pyclass(name = "Quantizer", module = "qprecode_py", frozen)]
struct PyQuantizer {
    inner: ScalarQuantizer,
}

#[pymethods]
impl PyQuantizer {
    #[new]
    fn new(bits: u32) -> PyResult<Self> {
        Ok(PyQuantizer { inner: lloyd_max(bits, Default::default()).map_err(err)? })
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.inner.bits()
    }

    #[getter]
    fn levels(&self) -> Vec<f64> {
        self.inner.levels().to_vec()
    }

    #[getter]
    fn thresholds(&self) -> Vec<f64> {
        self.inner.thresholds().to_vec()
    }

    fn msqe(&self) -> f64 {
        self.inner.msqe()
    }

    fn quantize(&self, x: f64) -> PyResult<f64> {
        self.inner.quantize(x).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

#[pyclass(name = "ChannelDataset", module = "qprecode_py", frozen)]
struct PyDataset {
    inner: ChannelDataset,
}

#[pymethods]
impl PyDataset {
    /// `model` is `"rayleigh"` or `"los"`.
    #[staticmethod]
    fn generate(model: &str, m: usize, k: usize, count: usize, seed: u64) -> PyResult<Self> {
        let model: ChannelModel = model.parse().map_err(err)?;
        Ok(PyDataset { inner: ChannelDataset::generate(model, m, k, count, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: ChannelDataset::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    fn channel(&self, i: usize) -> PyResult<Rows> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(to_rows(self.inner.channel(i).entries()))
    }
}

/// Trained or freshly initialised GNN precoder.
#[pyclass(name = "Gnn", module = "qprecode_py")]
struct PyGnn {
    cfg: GnnConfig,
    weights: GnnWeights,
    q: ScalarQuantizer,
}

#[pymethods]
impl PyGnn {
    #[new]
    #[pyo3(signature = (m, k, bits, d_h, n_h, seed = 0))]
    fn new(m: usize, k: usize, bits: u32, d_h: usize, n_h: usize, seed: u64) -> PyResult<Self> {
        let cfg = GnnConfig::new(m, k, bits, d_h, n_h).map_err(err)?;
        let q = lloyd_max(bits, Default::default()).map_err(err)?;
        Ok(PyGnn { weights: GnnWeights::init(&cfg, seed), cfg, q })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let c = Checkpoint::load(path).map_err(err)?;
        let q = lloyd_max(c.config.bits, Default::default()).map_err(err)?;
        Ok(PyGnn { cfg: c.config, weights: c.weights, q })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let c = Checkpoint {
            config: self.cfg,
            seed: 0,
            weights: self.weights.clone(),
            metadata: serde_json::Value::Null,
            optimizer: None,
        };
        c.save(path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    /// Per-antenna level probabilities `(p_re, p_im)`, each M rows of 2^b.
    fn probabilities(&self, h: Rows, s: Vec<Complex64>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let p = gnn::forward(&to_matrix(&h)?, &s, &self.weights, &self.cfg).map_err(err)?;
        let rows = |m: &gnn::RMatrix| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        Ok((rows(&p.p_re), rows(&p.p_im)))
    }

    /// Argmax DAC outputs for one symbol vector (unnormalized).
    fn infer(&self, h: Rows, s: Vec<Complex64>) -> PyResult<Vec<Complex64>> {
        gnn::infer(&to_matrix(&h)?, &s, &self.weights, &self.cfg, &self.q).map_err(err)
    }

    /// Sum rate on `h` at `snr_db`, with `n_s` symbols from `seed`.
    #[pyo3(signature = (h, snr_db, n_s = 1000, seed = 0))]
    fn rate(&self, h: Rows, snr_db: f64, n_s: usize, seed: u64) -> PyResult<f64> {
        let h = channel(&h)?;
        let s = gen_symbols(h.k(), n_s, seed).map_err(err)?.as_columns();
        let p_t = h.m() as f64;
        let y = qprecode::trainer::gnn_outputs(h.entries(), &s, &self.weights, &self.cfg, &self.q, p_t).map_err(err)?;
        Ok(rate_from_snidr(&snidr_from_samples(&h, &s, &y, noise_variance(p_t, snr_db)).map_err(err)?))
    }
}

#[pyfunction]
fn rayleigh_channel(m: usize, k: usize, seed: u64) -> PyResult<Rows> {
    Ok(to_rows(gen_rayleigh(m, k, seed).map_err(err)?.entries()))
}

#[pyfunction]
fn los_channel(m: usize, angles_deg: Vec<f64>) -> PyResult<Rows> {
    Ok(to_rows(gen_los_ula(m, &angles_deg).map_err(err)?.entries()))
}

/// Precoding matrix W (M×K) of `"mrt"` or `"zf"` at total power `p_t`.
#[pyfunction]
fn precoder(kind: &str, h: Rows, p_t: f64) -> PyResult<Rows> {
    let kind: PrecoderKind = kind.parse().map_err(err)?;
    Ok(to_rows(precoders::precode(kind, &channel(&h)?, p_t).map_err(err)?.w()))
}

/// Quantized linear precoding on `n_s` symbols: returns `(rate, nmse_db)`.
/// `bits=None` disables quantization.
#[pyfunction]
#[pyo3(signature = (kind, h, bits, snr_db, n_s = 1000, seed = 0))]
fn linear_eval(kind: &str, h: Rows, bits: Option<u32>, snr_db: f64, n_s: usize, seed: u64) -> PyResult<(f64, f64)> {
    let kind: PrecoderKind = kind.parse().map_err(err)?;
    let h = channel(&h)?;
    let batch: SymbolBatch = gen_symbols(h.k(), n_s, seed).map_err(err)?;
    let p_t = h.m() as f64;
    let y = linear_quantized_tx(&h, kind, &bits_arg(bits)?, &batch, p_t).map_err(err)?;
    let s = batch.as_columns();
    let rate = rate_from_snidr(&snidr_from_samples(&h, &s, &y, noise_variance(p_t, snr_db)).map_err(err)?);
    let nmse = metrics::nmse_db(&s, &(h.entries().transpose() * &y)).map_err(err)?;
    Ok((rate, nmse))
}

/// Bussgang gain Ĝ (M×K) and distortion covariance Ĉ_q (M×M) of outputs
/// `y` (M×N) produced from symbols `s` (K×N).
#[pyfunction]
fn bussgang(s: Rows, y: Rows) -> PyResult<(Rows, Rows)> {
    let est = estimate_bussgang(&to_matrix(&s)?, &to_matrix(&y)?).map_err(err)?;
    Ok((to_rows(&est.g), to_rows(&est.c_q)))
}

/// Closed-form operation counts as a dict.
#[pyfunction]
fn gnn_flops(py: Python<'_>, m: usize, k: usize, d_h: usize, n_h: usize, bits: u32) -> PyResult<Py<PyAny>> {
    let r = energy::gnn_flops(m, k, d_h, n_h, bits).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("mul", r.mul)?;
    d.set_item("add", r.add)?;
    d.set_item("total", r.total)?;
    d.set_item("input", r.input)?;
    d.set_item("hidden", r.hidden)?;
    d.set_item("output", r.output)?;
    Ok(d.into_any().unbind())
}

/// `(p_dacs_w, p_gnn_w, p_total_w, req_flops_per_s)`; pass `d_h=None` for
/// a linear precoder.
#[pyfunction]
#[pyo3(signature = (mode, m, k, bits, bandwidth_hz, d_h = None, n_h = None))]
fn power(mode: &str, m: usize, k: usize, bits: u32, bandwidth_hz: f64, d_h: Option<usize>, n_h: Option<usize>) -> PyResult<(f64, f64, f64, f64)> {
    let mode: DacMode = mode.parse().map_err(err)?;
    let gnn = match (d_h, n_h) {
        (Some(d_h), Some(n_h)) => Some(GnnShape { d_h, n_h }),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("give both d_h and n_h or neither")),
    };
    let r = energy::power_row(&PowerModel::default(), mode, m, k, bits, gnn, bandwidth_hz).map_err(err)?;
    Ok((r.p_dacs_w, r.p_gnn_w, r.p_total_w, r.req_flops_per_s))
}

/// Run a key-value experiment config (same format as the CLI) and return
/// the run manifest as JSON text.
#[pyfunction]
fn run_config(text: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::parse(text).map_err(err)?;
    let m = harness::run(&cfg).map_err(err)?;
    serde_json::to_string(&m).map_err(err)
}

#[pymodule]
pub fn qprecode_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuantizer>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyGnn>()?;
    m.add_function(wrap_pyfunction!(rayleigh_channel, m)?)?;
    m.add_function(wrap_pyfunction!(los_channel, m)?)?;
    m.add_function(wrap_pyfunction!(precoder, m)?)?;
    m.add_function(wrap_pyfunction!(linear_eval, m)?)?;
    m.add_function(wrap_pyfunction!(bussgang, m)?)?;
    m.add_function(wrap_pyfunction!(gnn_flops, m)?)?;
    m.add_function(wrap_pyfunction!(power, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
