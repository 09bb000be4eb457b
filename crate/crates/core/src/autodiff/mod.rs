//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as a node holding its value and a
//! pullback closure. Nodes are appended in evaluation order, so the node
//! vector is already a topological order and the backward pass is a single
//! reverse sweep. Values are shared through `Rc` so pullbacks can capture
//! their inputs without copying.
//!
//! Tensors are at most two-dimensional; scalars have shape `[]`.

mod ops;
mod signal;

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use signal::{gru_step_reference, StftMagConfig};

/// Dense row-major tensor value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) type Pullback = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Rc<Vec<f64>>,
    shape: Vec<usize>,
    needs_grad: bool,
    pullback: Option<Pullback>,
}

/// Records a computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Accumulates cotangents during the backward sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    needs: &'a [bool],
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    pub(crate) fn add(&mut self, id: usize, g: &[f64]) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn add_owned(&mut self, id: usize, g: Vec<f64>) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.shape.clone(), t.data.clone(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.shape.clone(), t.data.clone(), false)
    }

    pub fn param_vec(&self, shape: &[usize], data: Vec<f64>) -> Var<'_> {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.leaf(shape.to_vec(), data, true)
    }

    pub fn constant_vec(&self, shape: &[usize], data: Vec<f64>) -> Var<'_> {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.leaf(shape.to_vec(), data, false)
    }

    pub fn scalar_constant(&self, v: f64) -> Var<'_> {
        self.leaf(vec![], vec![v], false)
    }

    fn leaf(&self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(data),
            shape,
            needs_grad,
            pullback: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[Var<'_>],
        pullback: impl Fn(&[f64], &mut GradSink<'_>) + 'static,
    ) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = parents.iter().any(|p| p.needs_grad());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(data),
            shape,
            needs_grad,
            pullback: if needs_grad {
                Some(Box::new(pullback))
            } else {
                None
            },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Runs the backward sweep from a scalar `output`.
    pub fn gradients(&self, output: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::Shape("output belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if !out.shape.is_empty() || out.value.len() != 1 {
            return Err(Error::Shape(format!(
                "gradient requires a scalar output, got shape {:?}",
                out.shape
            )));
        }
        let needs: Vec<bool> = nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if needs[output.id] {
            grads[output.id] = Some(vec![1.0]);
        }
        for id in (0..=output.id).rev() {
            let Some(pullback) = &nodes[id].pullback else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            {
                let mut sink = GradSink {
                    grads: &mut grads,
                    needs: &needs,
                };
                pullback(&g, &mut sink);
            }
            // Leaves keep their cotangent; interior nodes are released.
        }
        Ok(Gradients {
            tape_id: self as *const Tape as usize,
            grads,
        })
    }
}

/// Cotangents produced by one backward sweep.
pub struct Gradients {
    tape_id: usize,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is not on the path.
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        assert_eq!(
            self.tape_id, v.tape as *const Tape as usize,
            "variable from a different tape"
        );
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => vec![0.0; v.len()],
        }
    }

    pub fn wrt_tensor(&self, v: Var<'_>) -> Tensor {
        Tensor {
            shape: v.shape(),
            data: self.wrt(v),
        }
    }
}

/// Gradients of a scalar `output` with respect to each of `inputs`.
pub fn grad(output: Var<'_>, inputs: &[Var<'_>]) -> Result<Vec<Tensor>> {
    for v in inputs {
        if !std::ptr::eq(v.tape, output.tape) {
            return Err(Error::Shape("input belongs to another tape".into()));
        }
    }
    let g = output.tape.gradients(output)?;
    Ok(inputs.iter().map(|v| g.wrt_tensor(*v)).collect())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().as_ref().clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape(),
            data: self.to_vec(),
        }
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let s = self.shape();
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("tensors are at most 2-D"),
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with row-major storage.
///
/// `a` is `m×k` after the optional transpose, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the `m*k`, `k*n` and `m*n`
    // elements whose lengths were asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central finite-difference oracle shared by gradient tests.

    use super::*;

    /// Returns the worst relative error between the tape gradient of
    /// `f` and central differences over every entry of every input.
    pub fn check_gradients(
        inputs: &[Tensor],
        step: f64,
        f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    ) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&tape, &vars);
        let analytic = grad(out, &vars).unwrap();

        let eval = |ins: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = ins.iter().map(|t| tape.param(t)).collect();
            f(&tape, &vars).item()
        };

        let mut worst: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].data[j] += step;
                let mut minus = inputs.to_vec();
                minus[i].data[j] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic[i].data[j];
                let scale = a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
        worst
    }

    pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        }
    }
}
