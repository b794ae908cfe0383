use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

/// Registers the module in an embedded interpreter and runs the Python smoke script.
#[test]
fn python_smoke_script_passes() {
    let script =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/python/smoke_test.py"))
            .unwrap();
    let path = CString::new(concat!(env!("CARGO_MANIFEST_DIR"), "/python/smoke_test.py")).unwrap();
    Python::initialize();
    Python::attach(|py| -> PyResult<()> {
        let m = PyModule::new(py, "voluntary_el_py")?;
        voluntary_el_py::voluntary_el_py(&m)?;
        py.import("sys")?
            .getattr("modules")?
            .set_item("voluntary_el_py", &m)?;
        let globals = PyDict::new(py);
        globals.set_item("__name__", "__main__")?;
        globals.set_item("__file__", path.to_str().unwrap())?;
        py.run(&CString::new(script).unwrap(), Some(&globals), None)
    })
    .unwrap_or_else(|e| panic!("{e}"));
}
