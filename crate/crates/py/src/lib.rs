use pyo3::prelude::*;

#[pymodule]
fn minibert_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
