use pyo3::prelude::*;

#[pymodule]
fn breaklab(_py: Python<'_>, _m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
