//! Python bindings: compile MiniML, inspect and run images, drive the DDC check.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use mlboot::bytecode::{decode_image, disassemble, encode_image, verify_image, BytecodeImage};
use mlboot::corpus::{run_captured, Corpus, Legs};
use mlboot::ddc;
use mlboot::seedc;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A decoded bytecode image.
#[pyclass(name = "Image", frozen)]
struct PyImage {
    inner: BytecodeImage,
}

#[pymethods]
impl PyImage {
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        decode_image(data).map(|inner| PyImage { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        mlboot::corpus::load_image(&path).map(|inner| PyImage { inner }).map_err(value_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = encode_image(&self.inner).map_err(value_err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn disassemble(&self) -> PyResult<String> {
        disassemble(&self.inner).map_err(value_err)
    }

    /// Verifier diagnostics; empty when the image is sound.
    fn verify(&self) -> Vec<String> {
        verify_image(&self.inner).iter().map(|d| d.to_string()).collect()
    }

    /// Run with captured ports; returns `(stdout, stderr, status)`.
    #[pyo3(signature = (argv = Vec::new(), cwd = None))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        argv: Vec<String>,
        cwd: Option<PathBuf>,
    ) -> (Bound<'py, PyBytes>, Bound<'py, PyBytes>, i32) {
        let out = py.detach(|| run_captured(&self.inner, argv, cwd.as_deref()));
        (PyBytes::new(py, &out.stdout), PyBytes::new(py, &out.stderr), out.status)
    }

    #[getter]
    fn code_words(&self) -> usize {
        self.inner.code.len()
    }

    #[getter]
    fn global_count(&self) -> u32 {
        self.inner.global_count
    }

    #[getter]
    fn primitives(&self) -> Vec<String> {
        self.inner.prims.clone()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Image(code_words={}, prims={}, globals={}, consts={})",
            self.inner.code.len(),
            self.inner.prims.len(),
            self.inner.global_count,
            self.inner.consts.len()
        )
    }
}

/// Compile MiniML `(name, text)` sources, concatenated in order, with the seed compiler.
#[pyfunction]
fn compile_miniml(py: Python<'_>, sources: Vec<(String, String)>) -> PyResult<PyImage> {
    let sources: Vec<(String, Vec<u8>)> = sources.into_iter().map(|(n, t)| (n, t.into_bytes())).collect();
    py.detach(|| seedc::compile_sources(&sources)).map(|inner| PyImage { inner }).map_err(value_err)
}

/// Interpret FullML source files with the seed-compiled interpreter.
#[pyfunction]
#[pyo3(signature = (sources, args = Vec::new(), corpus = None))]
fn interp<'py>(
    py: Python<'py>,
    sources: Vec<String>,
    args: Vec<String>,
    corpus: Option<PathBuf>,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyBytes>, i32)> {
    let corpus = corpus.map(Corpus::new).unwrap_or_else(Corpus::locate);
    let out = py.detach(|| Legs::new(&corpus).map(|legs| legs.interpret(&sources, &args))).map_err(runtime_err)?;
    Ok((PyBytes::new(py, &out.stdout), PyBytes::new(py, &out.stderr), out.status))
}

#[pyfunction]
fn sha256_hex(data: &[u8]) -> String {
    ddc::sha256_hex(data)
}

/// Diverse double-compilation of the corpus' fullc; returns `(verdict, report text)`.
#[pyfunction]
#[pyo3(signature = (workdir, seed = None, corpus = None))]
fn ddc_check(
    py: Python<'_>,
    workdir: PathBuf,
    seed: Option<PathBuf>,
    corpus: Option<PathBuf>,
) -> PyResult<(String, String)> {
    let corpus = corpus.map(Corpus::new).unwrap_or_else(Corpus::locate);
    let seed = seed.unwrap_or_else(|| corpus.seed_path());
    let report = py.detach(|| ddc::ddc_check(&seed, &corpus, &workdir)).map_err(runtime_err)?;
    Ok((report.verdict.as_str().to_string(), report.render()))
}

#[pymodule]
fn mlboot_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_function(wrap_pyfunction!(compile_miniml, m)?)?;
    m.add_function(wrap_pyfunction!(interp, m)?)?;
    m.add_function(wrap_pyfunction!(sha256_hex, m)?)?;
    m.add_function(wrap_pyfunction!(ddc_check, m)?)?;
    Ok(())
}
