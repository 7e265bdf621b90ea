use pyo3::prelude::*;

#[pymodule]
fn rulcast(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
