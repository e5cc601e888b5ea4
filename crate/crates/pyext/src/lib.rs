//! Python bindings for the tcmsim scheduling simulator.

use pyo3::prelude::*;

#[pymodule]
fn tcmsim_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
