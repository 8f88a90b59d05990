//! Python bindings: tensors, index maps, the convolution variants and whole
//! model loading, inference and tuning.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use vcnn::conv::{
    conv_granular, conv_parallel_scalar, conv_sequential, conv_vectorized,
    conv_vectorized_fused_output, enumerate_valid_g, ConvSpec, Granularity, PlainWeights,
    WeightBank,
};
use vcnn::modelio::{load_image, load_model, save_model, ImageError, ModelError};
use vcnn::pool::default_threads;
use vcnn::synth::{random_input, random_model};
use vcnn::tensor::{
    index_to_coord_chunked4, index_to_coord_row_major, reorder_from_chunked4, reorder_to_chunked4,
};
use vcnn::tuner::{tune_network, TuneError, TuneTable};
use vcnn::{ArithMode, GranularityPlan, Layout, NetworkDef, Shape3, WorkerPool};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn model_err(e: ModelError) -> PyErr {
    match e {
        ModelError::Io(e) => PyIOError::new_err(e.to_string()),
        e => value_err(e),
    }
}

fn image_err(e: ImageError) -> PyErr {
    match e {
        ImageError::Io(e) => PyIOError::new_err(e.to_string()),
        e => value_err(e),
    }
}

fn tune_err(e: TuneError) -> PyErr {
    match e {
        TuneError::Io(e) => PyIOError::new_err(e.to_string()),
        e => value_err(e),
    }
}

fn parse_layout(name: &str) -> PyResult<Layout> {
    match name {
        "row_major" => Ok(Layout::RowMajor),
        "chunked4" => Ok(Layout::Chunked4),
        _ => Err(value_err(format!("unknown layout `{name}`"))),
    }
}

fn parse_mode(relaxed: bool) -> ArithMode {
    if relaxed {
        ArithMode::Relaxed
    } else {
        ArithMode::Strict
    }
}

fn make_pool(threads: Option<usize>) -> PyResult<WorkerPool> {
    WorkerPool::new(threads.unwrap_or_else(default_threads)).map_err(value_err)
}

/// A 3-D feature map in row-major or chunked-4 storage.
#[pyclass(name = "Tensor", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(vcnn::Tensor3);

#[pymethods]
impl PyTensor {
    /// `data` must hold the stored elements for `layout`, including padded
    /// zero channels for chunked-4.
    #[new]
    #[pyo3(signature = (layers, height, width, data, layout = "row_major"))]
    fn new(layers: usize, height: usize, width: usize, data: Vec<f32>, layout: &str) -> PyResult<Self> {
        let t = vcnn::Tensor3::from_vec(Shape3::new(layers, height, width), parse_layout(layout)?, data)
            .map_err(value_err)?;
        Ok(Self(t))
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s.layers, s.height, s.width)
    }

    #[getter]
    fn layout(&self) -> &'static str {
        match self.0.layout() {
            Layout::RowMajor => "row_major",
            Layout::Chunked4 => "chunked4",
        }
    }

    /// Stored elements in storage order.
    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    /// Logical elements in row-major order, whatever the storage.
    fn to_list(&self) -> Vec<f32> {
        self.0.to_row_major_vec()
    }

    fn get(&self, m: usize, h: usize, w: usize) -> PyResult<f32> {
        let s = self.0.shape();
        if m >= s.layers || h >= s.height || w >= s.width {
            return Err(value_err(format!("({m}, {h}, {w}) outside {s:?}")));
        }
        Ok(self.0.get(m, h, w))
    }

    fn to_chunked4(&self) -> Self {
        match self.0.layout() {
            Layout::RowMajor => Self(reorder_to_chunked4(&self.0)),
            Layout::Chunked4 => self.clone(),
        }
    }

    fn to_row_major(&self) -> Self {
        match self.0.layout() {
            Layout::Chunked4 => Self(reorder_from_chunked4(&self.0)),
            Layout::RowMajor => self.clone(),
        }
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f32 {
        self.0.max_abs_diff(&other.0)
    }

    fn __repr__(&self) -> String {
        let (l, h, w) = self.shape();
        format!("Tensor(shape=({l}, {h}, {w}), layout={})", self.layout())
    }
}

/// One convolution's weights in both plain and pre-reordered form.
#[pyclass(name = "Conv", frozen)]
struct PyConv {
    plain: PlainWeights,
    bank: WeightBank,
}

#[pymethods]
impl PyConv {
    /// `kernels` are in `[out][in][K][K]` order.
    #[new]
    #[pyo3(signature = (kernel, stride, pad, in_layers, out_layers, kernels, biases))]
    fn new(
        kernel: usize,
        stride: usize,
        pad: usize,
        in_layers: usize,
        out_layers: usize,
        kernels: Vec<f32>,
        biases: Vec<f32>,
    ) -> PyResult<Self> {
        let spec = ConvSpec::new(kernel, stride, pad, in_layers, out_layers);
        spec.validate().map_err(value_err)?;
        let plain = PlainWeights::new(spec, kernels, biases).map_err(value_err)?;
        let bank = WeightBank::from_plain(&plain);
        Ok(Self { plain, bank })
    }

    /// Kernels in the chunked `[out][in_chunk][K][K][lane]` order.
    fn chunked_kernels(&self) -> Vec<f32> {
        self.bank.kernels().to_vec()
    }

    fn valid_granularities(&self) -> Vec<usize> {
        enumerate_valid_g(self.plain.spec().out_layers)
            .into_iter()
            .map(|g| g.get())
            .collect()
    }

    fn sequential(&self, x: &PyTensor) -> PyResult<PyTensor> {
        conv_sequential(&x.0, &self.plain).map(PyTensor).map_err(value_err)
    }

    #[pyo3(signature = (x, threads = None))]
    fn parallel_scalar(&self, x: &PyTensor, threads: Option<usize>) -> PyResult<PyTensor> {
        conv_parallel_scalar(&make_pool(threads)?, &x.0, &self.plain)
            .map(PyTensor)
            .map_err(value_err)
    }

    /// Chunked-4 input, row-major output.
    #[pyo3(signature = (x, relaxed = false, threads = None))]
    fn vectorized(&self, x: &PyTensor, relaxed: bool, threads: Option<usize>) -> PyResult<PyTensor> {
        conv_vectorized(&make_pool(threads)?, &x.0, &self.bank, parse_mode(relaxed))
            .map(PyTensor)
            .map_err(value_err)
    }

    /// Chunked-4 input and output.
    #[pyo3(signature = (x, relaxed = false, threads = None))]
    fn fused(&self, x: &PyTensor, relaxed: bool, threads: Option<usize>) -> PyResult<PyTensor> {
        conv_vectorized_fused_output(&make_pool(threads)?, &x.0, &self.bank, parse_mode(relaxed))
            .map(PyTensor)
            .map_err(value_err)
    }

    #[pyo3(signature = (x, g, relaxed = false, threads = None))]
    fn granular(&self, x: &PyTensor, g: usize, relaxed: bool, threads: Option<usize>) -> PyResult<PyTensor> {
        let g = Granularity::new(g, self.plain.spec().out_layers).map_err(value_err)?;
        conv_granular(&make_pool(threads)?, &x.0, &self.bank, g, parse_mode(relaxed))
            .map(PyTensor)
            .map_err(value_err)
    }
}

/// A loaded network with weights.
#[pyclass(name = "Model", frozen)]
struct PyModel(vcnn::Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_model(path).map(Self).map_err(model_err)
    }

    /// SqueezeNet v1.0 with seeded random weights.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn synthetic_squeezenet(seed: u64) -> PyResult<Self> {
        random_model(NetworkDef::squeezenet_v1_0(), seed)
            .map(Self)
            .map_err(value_err)
    }

    /// A model from a TOML topology with seeded random weights.
    #[staticmethod]
    #[pyo3(signature = (toml, seed = 0))]
    fn synthetic(toml: &str, seed: u64) -> PyResult<Self> {
        let def = NetworkDef::from_toml(toml).map_err(value_err)?;
        random_model(def, seed).map(Self).map_err(value_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.0, path).map_err(model_err)
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.0.def().input;
        (s.layers, s.height, s.width)
    }

    fn node_names(&self) -> Vec<String> {
        self.0.def().nodes.iter().map(|n| n.name.clone()).collect()
    }

    fn conv_ids(&self) -> Vec<String> {
        self.0.banks().into_iter().map(|(id, _)| id).collect()
    }

    #[pyo3(signature = (seed = 0))]
    fn random_input(&self, seed: u64) -> PyTensor {
        PyTensor(random_input(self.0.def(), seed))
    }

    fn load_image(&self, path: &str) -> PyResult<PyTensor> {
        let def = self.0.def();
        load_image(path, &def.mean, def.input.height, def.input.width)
            .map(PyTensor)
            .map_err(image_err)
    }

    /// Returns `(probabilities, logits)`; probabilities is `None` for
    /// networks without a softmax node.
    #[pyo3(signature = (x, plan = None, relaxed = false, threads = None))]
    fn forward(
        &self,
        py: Python<'_>,
        x: &PyTensor,
        plan: Option<&str>,
        relaxed: bool,
        threads: Option<usize>,
    ) -> PyResult<(Option<Vec<f32>>, Vec<f32>)> {
        let plan = match plan {
            Some(p) => {
                let t = TuneTable::load(p).map_err(tune_err)?;
                t.plan.validate(self.0.def()).map_err(value_err)?;
                t.plan
            }
            None => GranularityPlan::new(),
        };
        let pool = make_pool(threads)?;
        let out = py
            .detach(|| vcnn::forward(&pool, &self.0, &x.0, &plan, parse_mode(relaxed)))
            .map_err(value_err)?;
        Ok((out.probabilities, out.logits))
    }

    fn forward_sequential(&self, py: Python<'_>, x: &PyTensor) -> PyResult<(Option<Vec<f32>>, Vec<f32>)> {
        let seq = self.0.to_sequential();
        let out = py
            .detach(|| vcnn::forward_sequential(&seq, &x.0))
            .map_err(value_err)?;
        Ok((out.probabilities, out.logits))
    }

    /// Tunes every convolution, writes the plan to `out` and returns the
    /// selected `{conv_id: g}`.
    #[pyo3(signature = (x, out, repeats = 10, threads = None))]
    fn tune(
        &self,
        py: Python<'_>,
        x: &PyTensor,
        out: &str,
        repeats: usize,
        threads: Option<usize>,
    ) -> PyResult<Vec<(String, usize)>> {
        let pool = make_pool(threads)?;
        let table = py
            .detach(|| tune_network(&pool, &self.0, &x.0, repeats, ArithMode::Strict))
            .map_err(tune_err)?;
        table.save(out).map_err(tune_err)?;
        Ok(table.plan.iter().map(|(k, g)| (k.to_string(), g.get())).collect())
    }
}

#[pyfunction]
#[pyo3(name = "index_to_coord_row_major")]
fn py_index_row_major(x: usize, layers: usize, height: usize, width: usize) -> PyResult<(usize, usize, usize)> {
    let c = index_to_coord_row_major(x, Shape3::new(layers, height, width)).map_err(value_err)?;
    Ok((c.m, c.h, c.w))
}

#[pyfunction]
#[pyo3(name = "index_to_coord_chunked4")]
fn py_index_chunked4(x: usize, layers: usize, height: usize, width: usize) -> PyResult<(usize, usize, usize)> {
    let c = index_to_coord_chunked4(x, Shape3::new(layers, height, width)).map_err(value_err)?;
    Ok((c.m, c.h, c.w))
}

#[pyfunction]
#[pyo3(name = "enumerate_valid_g")]
fn py_enumerate_valid_g(out_layers: usize) -> Vec<usize> {
    enumerate_valid_g(out_layers).into_iter().map(|g| g.get()).collect()
}

#[pyfunction]
#[pyo3(name = "softmax")]
fn py_softmax(logits: Vec<f32>) -> Vec<f32> {
    vcnn::layers::softmax(&logits)
}

#[pymodule]
fn pyvcnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConv>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(py_index_row_major, m)?)?;
    m.add_function(wrap_pyfunction!(py_index_chunked4, m)?)?;
    m.add_function(wrap_pyfunction!(py_enumerate_valid_g, m)?)?;
    m.add_function(wrap_pyfunction!(py_softmax, m)?)?;
    Ok(())
}
