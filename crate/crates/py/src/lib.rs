//! Python bindings. Tensors cross the boundary as nested lists shaped
//! `[heads][rows][head_dim]`; head layouts are inferred from those shapes.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ctxbench::attnref;
use ctxbench::cpmech::{run_exact, CpConfig, Mechanism, ProcessGrid};
use ctxbench::fabric::Topology;
use ctxbench::masks::{KernelCapabilityMatrix, MaskPattern, MaskSpec as CoreMaskSpec};
use ctxbench::numcore::{HeadLayout, Tensor3};
use ctxbench::report::{self, KernelClass, MatrixFile, MemoryModel};
use ctxbench::sparse::{self, BlockGrid};

type Nested = Vec<Vec<Vec<f64>>>;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(x: &Nested) -> PyResult<Tensor3<f64>> {
    let h = x.len();
    let s = x.first().map_or(0, Vec::len);
    let d = x.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(h * s * d);
    for (hi, rows) in x.iter().enumerate() {
        if rows.len() != s {
            return Err(err(format!("head {hi} has {} rows, expected {s}", rows.len())));
        }
        for row in rows {
            if row.len() != d {
                return Err(err(format!("head {hi} has a row of width {}, expected {d}", row.len())));
            }
            data.extend_from_slice(row);
        }
    }
    Tensor3::new(h, s, d, data).map_err(err)
}

fn nested(t: &Tensor3<f64>) -> Nested {
    (0..t.heads())
        .map(|h| (0..t.rows()).map(|i| t.row(h, i).to_vec()).collect())
        .collect()
}

fn layout_of(q: &Tensor3<f64>, k: &Tensor3<f64>) -> PyResult<HeadLayout> {
    HeadLayout::new(q.heads(), k.heads(), q.cols()).map_err(err)
}

#[pyclass(name = "MaskSpec", frozen, module = "ctxbench")]
struct MaskSpec(CoreMaskSpec);

#[pymethods]
impl MaskSpec {
    #[new]
    #[pyo3(signature = (pattern, seq_len, doc_lens=None, window=None, prefix_lens=None, block_size=None, global_len=None, pad_len=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        pattern: &str,
        seq_len: usize,
        doc_lens: Option<Vec<usize>>,
        window: Option<usize>,
        prefix_lens: Option<Vec<usize>>,
        block_size: Option<usize>,
        global_len: Option<usize>,
        pad_len: usize,
    ) -> PyResult<Self> {
        let pattern: MaskPattern = pattern.parse().map_err(err)?;
        let mut b = CoreMaskSpec::builder(pattern, seq_len).pad_len(pad_len);
        if let Some(l) = doc_lens {
            b = b.doc_lens(&l);
        }
        if let Some(w) = window {
            b = b.window(w);
        }
        if let Some(p) = prefix_lens {
            b = b.prefix_lens(p);
        }
        if let Some(bs) = block_size {
            b = b.block_size(bs);
        }
        if let Some(g) = global_len {
            b = b.global_len(g);
        }
        b.build().map(MaskSpec).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CoreMaskSpec::from_json(text).map(MaskSpec).map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn pattern(&self) -> &'static str {
        self.0.pattern().snake_name()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.0.seq_len()
    }

    fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.0.is_allowed(i, j)
    }

    fn count_unmasked(&self) -> u64 {
        self.0.count_unmasked()
    }

    /// Row-major boolean matrix.
    fn to_dense(&self) -> PyResult<Vec<Vec<bool>>> {
        let d = self.0.to_dense().map_err(err)?;
        Ok((0..d.rows()).map(|i| (0..d.cols()).map(|j| d.get(i, j)).collect()).collect())
    }

    fn to_ascii(&self) -> PyResult<String> {
        Ok(self.0.to_dense().map_err(err)?.to_ascii())
    }

    fn __repr__(&self) -> String {
        format!("MaskSpec({}, seq_len={})", self.0.pattern().snake_name(), self.0.seq_len())
    }
}

#[pyclass(name = "BlockMask", frozen, module = "ctxbench")]
struct BlockMask(sparse::BlockMask);

#[pymethods]
impl BlockMask {
    #[getter]
    fn top_k(&self) -> usize {
        self.0.top_k()
    }

    #[getter]
    fn groups(&self) -> usize {
        self.0.groups()
    }

    fn selected(&self, group: usize, q_block: usize) -> Vec<usize> {
        self.0.selected(group, q_block).to_vec()
    }

    fn achieved_sparsity(&self, group: usize) -> f64 {
        self.0.achieved_sparsity(group)
    }

    fn selected_area(&self, group: usize) -> u64 {
        self.0.selected_area(group)
    }

    fn dense_popcount(&self, group: usize) -> PyResult<u64> {
        Ok(self.0.to_dense(group).map_err(err)?.popcount())
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }
}

#[pyfunction]
fn mask_patterns() -> Vec<&'static str> {
    MaskPattern::ALL.iter().map(|p| p.snake_name()).collect()
}

#[pyfunction]
fn mechanisms() -> Vec<&'static str> {
    Mechanism::ALL.iter().map(|m| m.name()).collect()
}

/// Returns `(out, lse)`; `lse` is flat, `head * rows + row`.
#[pyfunction]
fn attention_forward(q: Nested, k: Nested, v: Nested, mask: &MaskSpec) -> PyResult<(Nested, Vec<f64>)> {
    let (q, k, v) = (tensor(&q)?, tensor(&k)?, tensor(&v)?);
    let fwd = attnref::attention_forward(&q, &k, &v, &layout_of(&q, &k)?, &mask.0).map_err(err)?;
    Ok((nested(&fwd.out), fwd.lse))
}

/// Returns `(dq, dk, dv)` for the loss `sum(d_out * out)`.
#[pyfunction]
fn attention_backward(q: Nested, k: Nested, v: Nested, d_out: Nested, mask: &MaskSpec) -> PyResult<(Nested, Nested, Nested)> {
    let (q, k, v, d_out) = (tensor(&q)?, tensor(&k)?, tensor(&v)?, tensor(&d_out)?);
    let layout = layout_of(&q, &k)?;
    let fwd = attnref::attention_forward(&q, &k, &v, &layout, &mask.0).map_err(err)?;
    let g = attnref::attention_backward(&q, &k, &v, &fwd, &d_out, &layout, &mask.0).map_err(err)?;
    Ok((nested(&g.dq), nested(&g.dk), nested(&g.dv)))
}

/// Runs one context-parallel mechanism on the simulated fabric.
#[pyfunction]
#[pyo3(signature = (mechanism, world_size, q, k, v, mask, d_out=None, grid=None, inner_window=None))]
#[allow(clippy::too_many_arguments)]
fn context_parallel<'py>(
    py: Python<'py>,
    mechanism: &str,
    world_size: usize,
    q: Nested,
    k: Nested,
    v: Nested,
    mask: &MaskSpec,
    d_out: Option<Nested>,
    grid: Option<(usize, usize)>,
    inner_window: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mech: Mechanism = mechanism.parse().map_err(err)?;
    let mut cfg = CpConfig::new(mech, world_size);
    if let Some((u, r)) = grid {
        let mut g = ProcessGrid::new(u, r);
        g.inner_window = inner_window;
        cfg = cfg.with_grid(g);
    }
    let (q, k, v) = (tensor(&q)?, tensor(&k)?, tensor(&v)?);
    let d_out = d_out.as_ref().map(tensor).transpose()?;
    let layout = layout_of(&q, &k)?;
    let run = run_exact(&cfg, &Topology::with_world(world_size), &q, &k, &v, d_out.as_ref(), layout, &mask.0).map_err(err)?;

    let out = PyDict::new(py);
    out.set_item("out", nested(&run.out))?;
    out.set_item("lse", run.lse.clone())?;
    out.set_item("padded", run.padded)?;
    out.set_item("forward_comm_bytes", run.forward_log.total_bytes())?;
    out.set_item("forward_time", run.forward_timeline.total)?;
    if let Some((dq, dk, dv)) = &run.grads {
        out.set_item("grads", (nested(dq), nested(dk), nested(dv)))?;
    }
    if let (Some(log), Some(t)) = (&run.backward_log, &run.backward_timeline) {
        out.set_item("backward_comm_bytes", log.total_bytes())?;
        out.set_item("backward_time", t.total)?;
    }
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (q_block_sizes, k_block_sizes, ratio, groups=1, seed=0))]
fn sample_block_mask(q_block_sizes: Vec<usize>, k_block_sizes: Vec<usize>, ratio: f64, groups: usize, seed: u64) -> PyResult<BlockMask> {
    let grid = BlockGrid::new(q_block_sizes, k_block_sizes).map_err(err)?;
    sparse::sample_block_mask(&grid, ratio, groups, seed).map(BlockMask).map_err(err)
}

#[pyfunction]
fn sparsity_to_topk(ratio: f64, num_k_blocks: usize) -> PyResult<usize> {
    sparse::sparsity_to_topk(ratio, num_k_blocks).map_err(err)
}

/// `kernel` is `naive_full_mask` or `fused_linear`.
#[pyfunction]
fn peak_activation_elements(kernel: &str, batch: u64, seq_len: u64, heads: u64, head_dim: u64) -> PyResult<u64> {
    let kernel: KernelClass = serde_json::from_value(serde_json::Value::String(kernel.to_string())).map_err(err)?;
    Ok(report::peak_activation_elements(&MemoryModel::new(
        kernel, batch, seq_len, heads, head_dim,
    )))
}

/// Runs a matrix given as JSON text (`{"runs": [...]}`), returning the CSV
/// and JSON reports.
#[pyfunction]
fn run_matrix(config_json: &str) -> PyResult<(String, String)> {
    let file: MatrixFile = serde_json::from_str(config_json).map_err(err)?;
    for r in &file.runs {
        r.validate().map_err(err)?;
    }
    let results = report::run_matrix(&file.runs);
    Ok((report::to_csv(&results), report::to_json(&results)))
}

/// Dense and sparse kernel capability tables as CSV.
#[pyfunction]
fn capabilities() -> (String, String) {
    (KernelCapabilityMatrix::dense_kernels().to_csv(), sparse::sparse_capabilities_csv())
}

/// `(name, forward_err, backward_err, passed)` per case.
#[pyfunction]
#[pyo3(signature = (seq_len=32, worlds=vec![2, 4]))]
fn verify(seq_len: usize, worlds: Vec<usize>) -> Vec<(String, f64, f64, bool)> {
    report::verify_suite(seq_len, &worlds)
        .into_iter()
        .map(|c| {
            let ok = c.passed();
            (c.name, c.forward_err, c.backward_err, ok)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "ctxbench")]
fn ctxbench_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<MaskSpec>()?;
    m.add_class::<BlockMask>()?;
    m.add_function(wrap_pyfunction!(mask_patterns, m)?)?;
    m.add_function(wrap_pyfunction!(mechanisms, m)?)?;
    m.add_function(wrap_pyfunction!(attention_forward, m)?)?;
    m.add_function(wrap_pyfunction!(attention_backward, m)?)?;
    m.add_function(wrap_pyfunction!(context_parallel, m)?)?;
    m.add_function(wrap_pyfunction!(sample_block_mask, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity_to_topk, m)?)?;
    m.add_function(wrap_pyfunction!(peak_activation_elements, m)?)?;
    m.add_function(wrap_pyfunction!(run_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(capabilities, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_round_trip() {
        let x: Nested = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![vec![5.0, 6.0], vec![7.0, 8.0]]];
        let t = tensor(&x).unwrap();
        assert_eq!(t.dims(), (2, 2, 2));
        assert_eq!(t.get(1, 0, 1), 6.0);
        assert_eq!(nested(&t), x);
    }

    #[test]
    fn ragged_input_is_rejected() {
        assert!(tensor(&vec![vec![vec![1.0, 2.0], vec![3.0]]]).is_err());
        assert!(tensor(&vec![vec![vec![1.0]], vec![]]).is_err());
    }
}
