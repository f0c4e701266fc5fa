//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every node on a [`Tape`] holds an `rows x cols` block of `f64` values and the
//! operation that produced it. Nodes are appended in evaluation order, so the
//! node list is already a topological order and the backward pass is a single
//! reverse sweep.
//!
//! ```
//! use quadfit::diffopt::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.param(vec![3.0], 1, 1);
//! let y = x * x;
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.value(y), vec![9.0]);
//! assert_eq!(grads.wrt(x), vec![6.0]);
//! ```

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::error::{Error, Result};

/// An operation implemented outside the tape's closed op set.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the tape only needs the adjoint.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Vector-Jacobian product for each input, in input order. `None` means
    /// the op has no adjoint and the backward pass fails with
    /// [`Error::NotDifferentiable`] if a gradient has to flow through it.
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_output: &[f64],
    ) -> Option<Vec<Vec<f64>>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    MulScalar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Powf(usize, f64),
    Sigmoid(usize),
    Relu(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    SmoothL1(usize, f64),
    GemanMcClure(usize, f64),
    GatherRows(usize, Rc<[Option<usize>]>),
    ScatterAddRows(usize, Rc<[usize]>),
    ConcatRows(Rc<[usize]>),
    ConcatCols(Rc<[usize]>),
    SliceCols(usize, usize),
    Rodrigues(usize),
    RowAffine(usize, usize),
    Custom(Rc<[usize]>, Rc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Custom(_, op) => op.name(),
            _ => "builtin",
        }
    }
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// Append-only recording of a differentiable computation.
///
/// A tape is confined to one thread; build a fresh one per loss evaluation.
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
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

/// Adjoints for every node of a tape after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `var`; zeros when the
    /// root does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Vec<f64> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.sizes[var.id]])
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

    fn push(&self, value: Vec<f64>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, rows, cols, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Leaf that gradients are taken with respect to.
    pub fn param(&self, value: Vec<f64>, rows: usize, cols: usize) -> Var<'_> {
        assert_eq!(value.len(), rows * cols, "param value does not match shape");
        self.push(value, rows, cols, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Vec<f64>, rows: usize, cols: usize) -> Var<'_> {
        assert_eq!(value.len(), rows * cols, "constant value does not match shape");
        self.push(value, rows, cols, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(vec![value], 1, 1)
    }

    pub fn value(&self, var: Var<'_>) -> Vec<f64> {
        self.nodes.borrow()[var.id].value.clone()
    }

    pub fn shape(&self, var: Var<'_>) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[var.id].rows, nodes[var.id].cols)
    }

    /// Registers a node computed outside the tape. `value` must already be the
    /// forward result of `op` applied to `inputs`.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Vec<f64>,
        rows: usize,
        cols: usize,
        op: Rc<dyn CustomOp>,
    ) -> Var<'t> {
        let ids: Rc<[usize]> = inputs.iter().map(|v| v.id).collect();
        let rg = self.any_requires(&ids);
        self.push(value, rows, cols, Op::Custom(ids, op), rg)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (value, rows, cols, rg) = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].id].cols;
            let mut value = Vec::new();
            let mut rows = 0;
            let mut rg = false;
            for p in parts {
                let n = &nodes[p.id];
                assert_eq!(n.cols, cols, "concat_rows column mismatch");
                value.extend_from_slice(&n.value);
                rows += n.rows;
                rg |= n.requires_grad;
            }
            (value, rows, cols, rg)
        };
        let ids: Rc<[usize]> = parts.iter().map(|v| v.id).collect();
        self.push(value, rows, cols, Op::ConcatRows(ids), rg)
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (value, rows, cols, rg) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].rows;
            let cols: usize = parts.iter().map(|p| nodes[p.id].cols).sum();
            let mut value = vec![0.0; rows * cols];
            let mut offset = 0;
            let mut rg = false;
            for p in parts {
                let n = &nodes[p.id];
                assert_eq!(n.rows, rows, "concat_cols row mismatch");
                for r in 0..rows {
                    value[r * cols + offset..r * cols + offset + n.cols]
                        .copy_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
                }
                offset += n.cols;
                rg |= n.requires_grad;
            }
            (value, rows, cols, rg)
        };
        let ids: Rc<[usize]> = parts.iter().map(|v| v.id).collect();
        self.push(value, rows, cols, Op::ConcatCols(ids), rg)
    }

    fn any_requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: Var<'_>, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let (value, rows, cols, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.id];
            (n.value.iter().map(|&x| f(x)).collect(), n.rows, n.cols, n.requires_grad)
        };
        self.push(value, rows, cols, op, rg)
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let (value, rows, cols, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            assert_eq!(
                (na.rows, na.cols),
                (nb.rows, nb.cols),
                "elementwise shape mismatch"
            );
            let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
            (v, na.rows, na.cols, na.requires_grad || nb.requires_grad)
        };
        self.push(value, rows, cols, op, rg)
    }

    /// Reverse sweep from a scalar (1x1) root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got {}x{}",
                root_node.rows, root_node.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let mut sizes: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        grads.resize(nodes.len(), None);
        sizes.truncate(nodes.len());
        Ok(Gradients { grads, sizes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    contrib(slot);
}

fn add_into(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().copied()));
            accumulate(grads, nodes, *b, |d| add_into(d, g.iter().copied()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().copied()));
            accumulate(grads, nodes, *b, |d| add_into(d, g.iter().map(|x| -x)));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(vb).map(|(g, y)| g * y)));
            accumulate(grads, nodes, *b, |d| add_into(d, g.iter().zip(va).map(|(g, x)| g * x)));
        }
        Op::Div(a, b) => {
            let vb = &nodes[*b].value;
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(vb).map(|(g, y)| g / y)));
            accumulate(grads, nodes, *b, |d| {
                add_into(d, g.iter().zip(vb).zip(out).map(|((g, y), q)| -g * q / y))
            });
        }
        Op::Neg(a) => accumulate(grads, nodes, *a, |d| add_into(d, g.iter().map(|x| -x))),
        Op::Scale(a, k) => accumulate(grads, nodes, *a, |d| add_into(d, g.iter().map(|x| x * k))),
        Op::Offset(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, |d| add_into(d, g.iter().copied())),
        Op::AddRow(a, row) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().copied()));
            let cols = node.cols;
            accumulate(grads, nodes, *row, |d| {
                for chunk in g.chunks(cols) {
                    add_into(d, chunk.iter().copied());
                }
            });
        }
        Op::MulCol(a, col) => {
            let (va, vc) = (&nodes[*a].value, &nodes[*col].value);
            let cols = node.cols;
            accumulate(grads, nodes, *a, |d| {
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i] * vc[i / cols];
                }
            });
            accumulate(grads, nodes, *col, |d| {
                for (i, &gi) in g.iter().enumerate() {
                    d[i / cols] += gi * va[i];
                }
            });
        }
        Op::MulScalar(a, s) => {
            let (va, vs) = (&nodes[*a].value, nodes[*s].value[0]);
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().map(|x| x * vs)));
            accumulate(grads, nodes, *s, |d| d[0] += g.iter().zip(va).map(|(g, x)| g * x).sum::<f64>());
        }
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let (m, k, n) = (na.rows, na.cols, nb.cols);
            accumulate(grads, nodes, *a, |d| {
                // dA = G B^T
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * nb.value[p * n + j];
                        }
                        d[i * k + p] += acc;
                    }
                }
            });
            accumulate(grads, nodes, *b, |d| {
                // dB = A^T G
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = na.value[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        let row = &mut d[p * n..(p + 1) * n];
                        for (dst, &gij) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *dst += a_ip * gij;
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (node.rows, node.cols);
            accumulate(grads, nodes, *a, |d| {
                // out is r x c, input is c x r
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += g[i * c + j];
                    }
                }
            });
        }
        Op::Sin(a) => {
            let va = &nodes[*a].value;
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(va).map(|(g, x)| g * x.cos())));
        }
        Op::Cos(a) => {
            let va = &nodes[*a].value;
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(va).map(|(g, x)| -g * x.sin())));
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(out).map(|(g, y)| g * y))),
        Op::Log(a) => {
            let va = &nodes[*a].value;
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(va).map(|(g, x)| g / x)));
        }
        Op::Sqrt(a) => accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(out).map(|(g, y)| 0.5 * g / y))),
        Op::Powf(a, p) => {
            let va = &nodes[*a].value;
            accumulate(grads, nodes, *a, |d| {
                add_into(d, g.iter().zip(va).map(|(g, x)| g * p * x.powf(p - 1.0)))
            });
        }
        Op::Sigmoid(a) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y))))
        }
        Op::Relu(a) => {
            let va = &nodes[*a].value;
            accumulate(grads, nodes, *a, |d| {
                add_into(d, g.iter().zip(va).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }))
            });
        }
        Op::Tanh(a) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y))))
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::SumCols(a) => {
            let cols = nodes[*a].cols;
            accumulate(grads, nodes, *a, |d| {
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i / cols];
                }
            });
        }
        Op::SmoothL1(a, beta) => {
            let va = &nodes[*a].value;
            accumulate(grads, nodes, *a, |d| {
                add_into(
                    d,
                    g.iter().zip(va).map(|(g, x)| {
                        if x.abs() < *beta {
                            g * x / beta
                        } else {
                            g * x.signum()
                        }
                    }),
                )
            });
        }
        Op::GemanMcClure(a, sigma) => {
            let va = &nodes[*a].value;
            let s2 = sigma * sigma;
            accumulate(grads, nodes, *a, |d| {
                add_into(d, g.iter().zip(va).map(|(g, q)| g * s2 * s2 / ((s2 + q) * (s2 + q))))
            });
        }
        Op::GatherRows(a, idx) => {
            let cols = node.cols;
            accumulate(grads, nodes, *a, |d| {
                for (r, src) in idx.iter().enumerate() {
                    if let Some(s) = src {
                        add_into(&mut d[s * cols..(s + 1) * cols], g[r * cols..(r + 1) * cols].iter().copied());
                    }
                }
            });
        }
        Op::ScatterAddRows(a, idx) => {
            let cols = node.cols;
            accumulate(grads, nodes, *a, |d| {
                for (r, &dst) in idx.iter().enumerate() {
                    add_into(&mut d[r * cols..(r + 1) * cols], g[dst * cols..(dst + 1) * cols].iter().copied());
                }
            });
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids.iter() {
                let len = nodes[id].value.len();
                accumulate(grads, nodes, id, |d| add_into(d, g[offset..offset + len].iter().copied()));
                offset += len;
            }
        }
        Op::ConcatCols(ids) => {
            let (rows, cols) = (node.rows, node.cols);
            let mut offset = 0;
            for &id in ids.iter() {
                let c = nodes[id].cols;
                accumulate(grads, nodes, id, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * c..(r + 1) * c], g[r * cols + offset..r * cols + offset + c].iter().copied());
                    }
                });
                offset += c;
            }
        }
        Op::SliceCols(a, start) => {
            let (rows, cols) = (node.rows, node.cols);
            let src_cols = nodes[*a].cols;
            accumulate(grads, nodes, *a, |d| {
                for r in 0..rows {
                    add_into(
                        &mut d[r * src_cols + start..r * src_cols + start + cols],
                        g[r * cols..(r + 1) * cols].iter().copied(),
                    );
                }
            });
        }
        Op::Rodrigues(a) => {
            let va = &nodes[*a].value;
            accumulate(grads, nodes, *a, |d| {
                for (r, w) in va.chunks(3).enumerate() {
                    let (_, jac) = rodrigues_with_jacobian([w[0], w[1], w[2]]);
                    let gr = &g[r * 9..(r + 1) * 9];
                    for i in 0..3 {
                        d[r * 3 + i] += gr.iter().zip(&jac[i]).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
        }
        Op::RowAffine(m, x) => {
            let (vm, vx) = (&nodes[*m].value, &nodes[*x].value);
            accumulate(grads, nodes, *m, |d| {
                for (r, gy) in g.chunks(3).enumerate() {
                    let xr = &vx[r * 3..r * 3 + 3];
                    let dm = &mut d[r * 12..(r + 1) * 12];
                    for a in 0..3 {
                        for b in 0..3 {
                            dm[a * 3 + b] += gy[a] * xr[b];
                        }
                        dm[9 + a] += gy[a];
                    }
                }
            });
            accumulate(grads, nodes, *x, |d| {
                for (r, gy) in g.chunks(3).enumerate() {
                    let mr = &vm[r * 12..(r + 1) * 12];
                    for b in 0..3 {
                        d[r * 3 + b] += (0..3).map(|a| mr[a * 3 + b] * gy[a]).sum::<f64>();
                    }
                }
            });
        }
        Op::Custom(ids, op) => {
            if !ids.iter().any(|&i| nodes[i].requires_grad) {
                return Ok(());
            }
            let inputs: Vec<&[f64]> = ids.iter().map(|&i| nodes[i].value.as_slice()).collect();
            let Some(input_grads) = op.backward(&inputs, out, g) else {
                return Err(Error::NotDifferentiable(node.op.name().to_string()));
            };
            for (&id, ig) in ids.iter().zip(input_grads) {
                accumulate(grads, nodes, id, |d| add_into(d, ig.into_iter()));
            }
        }
    }
    Ok(())
}

/// Rotation matrix (row-major) for an axis-angle vector together with
/// `dR/dw_i` for each component.
pub fn rodrigues_with_jacobian(w: [f64; 3]) -> ([f64; 9], [[f64; 9]; 3]) {
    let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, a1, b1) = if t2 < 1e-4 {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let t = t2.sqrt();
        let (s, c) = t.sin_cos();
        (
            s / t,
            (1.0 - c) / t2,
            (t * c - s) / (t2 * t),
            (t * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    };
    let k = skew(w);
    let k2 = mat3_mul(&k, &k);
    let mut r = [0.0; 9];
    for i in 0..9 {
        r[i] = a * k[i] + b * k2[i];
    }
    r[0] += 1.0;
    r[4] += 1.0;
    r[8] += 1.0;

    let mut jac = [[0.0; 9]; 3];
    for (i, ji) in jac.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = skew(e);
        let eik = mat3_mul(&ei, &k);
        let kei = mat3_mul(&k, &ei);
        for m in 0..9 {
            ji[m] = a1 * w[i] * k[m] + a * ei[m] + b1 * w[i] * k2[m] + b * (eik[m] + kei[m]);
        }
    }
    (r, jac)
}

pub(crate) fn skew(w: [f64; 3]) -> [f64; 9] {
    [0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0]
}

pub(crate) fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    c
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.value(*self)
    }

    /// First element; convenient for 1x1 results.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape(*self)
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.tape.binary(self, other, Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.tape.unary(self, Op::Scale(self.id, k), |x| x * k)
    }

    pub fn offset(self, k: f64) -> Var<'t> {
        self.tape.unary(self, Op::Offset(self.id), |x| x + k)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (value, rows, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (na, nr) = (&nodes[self.id], &nodes[row.id]);
            assert_eq!((nr.rows, nr.cols), (1, na.cols), "add_row shape mismatch");
            let v = na
                .value
                .iter()
                .enumerate()
                .map(|(i, x)| x + nr.value[i % na.cols])
                .collect();
            (v, na.rows, na.cols, na.requires_grad || nr.requires_grad)
        };
        self.tape.push(value, rows, cols, Op::AddRow(self.id, row.id), rg)
    }

    /// Multiplies each row by the matching entry of a `rows x 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let (value, rows, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (na, nc) = (&nodes[self.id], &nodes[col.id]);
            assert_eq!((nc.rows, nc.cols), (na.rows, 1), "mul_col shape mismatch");
            let v = na
                .value
                .iter()
                .enumerate()
                .map(|(i, x)| x * nc.value[i / na.cols])
                .collect();
            (v, na.rows, na.cols, na.requires_grad || nc.requires_grad)
        };
        self.tape.push(value, rows, cols, Op::MulCol(self.id, col.id), rg)
    }

    /// Multiplies every entry by a 1x1 variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        let (value, rows, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (na, ns) = (&nodes[self.id], &nodes[s.id]);
            assert_eq!(ns.value.len(), 1, "mul_scalar expects a 1x1 factor");
            let k = ns.value[0];
            (
                na.value.iter().map(|x| x * k).collect(),
                na.rows,
                na.cols,
                na.requires_grad || ns.requires_grad,
            )
        };
        self.tape.push(value, rows, cols, Op::MulScalar(self.id, s.id), rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (value, m, n, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            assert_eq!(na.cols, nb.rows, "matmul inner dimension mismatch");
            let (m, k, n) = (na.rows, na.cols, nb.cols);
            let mut v = vec![0.0; m * n];
            for i in 0..m {
                let out = &mut v[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = na.value[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    for (o, &b) in out.iter_mut().zip(&nb.value[p * n..(p + 1) * n]) {
                        *o += a_ip * b;
                    }
                }
            }
            (v, m, n, na.requires_grad || nb.requires_grad)
        };
        self.tape.push(value, m, n, Op::MatMul(self.id, other.id), rg)
    }

    pub fn t(self) -> Var<'t> {
        let (value, rows, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let mut v = vec![0.0; n.value.len()];
            for i in 0..n.rows {
                for j in 0..n.cols {
                    v[j * n.rows + i] = n.value[i * n.cols + j];
                }
            }
            (v, n.cols, n.rows, n.requires_grad)
        };
        self.tape.push(value, rows, cols, Op::Transpose(self.id), rg)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            assert_eq!(n.value.len(), rows * cols, "reshape size mismatch");
            (n.value.clone(), n.requires_grad)
        };
        self.tape.push(value, rows, cols, Op::Reshape(self.id), rg)
    }

    pub fn sin(self) -> Var<'t> {
        self.tape.unary(self, Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.tape.unary(self, Op::Cos(self.id), f64::cos)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self, Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self, Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.tape.unary(self, Op::Powf(self.id, p), move |x| x.powf(p))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self, Op::Sigmoid(self.id), sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self, Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self, Op::Tanh(self.id), f64::tanh)
    }

    pub fn sum(self) -> Var<'t> {
        let (s, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().sum(), n.requires_grad)
        };
        self.tape.push(vec![s], 1, 1, Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let (s, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().sum::<f64>() / n.value.len() as f64, n.requires_grad)
        };
        self.tape.push(vec![s], 1, 1, Op::Mean(self.id), rg)
    }

    /// Row sums: `rows x cols -> rows x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let (value, rows, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.value.chunks(n.cols.max(1)).map(|r| r.iter().sum()).collect::<Vec<f64>>(),
                n.rows,
                n.requires_grad,
            )
        };
        self.tape.push(value, rows, 1, Op::SumCols(self.id), rg)
    }

    /// Elementwise Huber-style smooth L1 with transition at `beta`.
    pub fn smooth_l1(self, beta: f64) -> Var<'t> {
        self.tape.unary(self, Op::SmoothL1(self.id, beta), move |x| smooth_l1(x, beta))
    }

    /// Geman-McClure robustifier applied to squared residual norms:
    /// `sigma^2 q / (sigma^2 + q)`.
    pub fn geman_mcclure_sq(self, sigma: f64) -> Var<'t> {
        let s2 = sigma * sigma;
        self.tape.unary(self, Op::GemanMcClure(self.id, sigma), move |q| s2 * q / (s2 + q))
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(self, idx: &[Option<usize>]) -> Var<'t> {
        let (value, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let mut v = vec![0.0; idx.len() * n.cols];
            for (r, src) in idx.iter().enumerate() {
                if let Some(s) = src {
                    assert!(*s < n.rows, "gather index out of range");
                    v[r * n.cols..(r + 1) * n.cols].copy_from_slice(&n.value[s * n.cols..(s + 1) * n.cols]);
                }
            }
            (v, n.cols, n.requires_grad)
        };
        self.tape
            .push(value, idx.len(), cols, Op::GatherRows(self.id, idx.into()), rg)
    }

    /// Rows `start..start+len`.
    pub fn rows_range(self, start: usize, len: usize) -> Var<'t> {
        let idx: Vec<Option<usize>> = (start..start + len).map(Some).collect();
        self.gather_rows(&idx)
    }

    pub fn row(self, r: usize) -> Var<'t> {
        self.rows_range(r, 1)
    }

    /// Adds row `r` of `self` into row `idx[r]` of an `out_rows`-row zero matrix.
    pub fn scatter_add_rows(self, idx: &[usize], out_rows: usize) -> Var<'t> {
        let (value, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            assert_eq!(idx.len(), n.rows, "scatter index count mismatch");
            let mut v = vec![0.0; out_rows * n.cols];
            for (r, &dst) in idx.iter().enumerate() {
                add_into(&mut v[dst * n.cols..(dst + 1) * n.cols], n.value[r * n.cols..(r + 1) * n.cols].iter().copied());
            }
            (v, n.cols, n.requires_grad)
        };
        self.tape
            .push(value, out_rows, cols, Op::ScatterAddRows(self.id, idx.into()), rg)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let (value, rows, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            assert!(start + len <= n.cols, "slice_cols out of range");
            let mut v = Vec::with_capacity(n.rows * len);
            for r in 0..n.rows {
                v.extend_from_slice(&n.value[r * n.cols + start..r * n.cols + start + len]);
            }
            (v, n.rows, n.requires_grad)
        };
        self.tape.push(value, rows, len, Op::SliceCols(self.id, start), rg)
    }

    pub fn col(self, c: usize) -> Var<'t> {
        self.slice_cols(c, 1)
    }

    /// Axis-angle rows (`n x 3`) to row-major rotation matrices (`n x 9`).
    pub fn rodrigues(self) -> Var<'t> {
        let (value, rows, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            assert_eq!(n.cols, 3, "rodrigues expects n x 3 axis-angle rows");
            let mut v = Vec::with_capacity(n.rows * 9);
            for w in n.value.chunks(3) {
                v.extend_from_slice(&rodrigues([w[0], w[1], w[2]]));
            }
            (v, n.rows, n.requires_grad)
        };
        self.tape.push(value, rows, 9, Op::Rodrigues(self.id), rg)
    }

    /// Per-row affine map: `self` is `n x 12` (row-major 3x3 followed by a
    /// translation), `x` is `n x 3`; returns `M_i x_i + t_i`.
    pub fn row_affine(self, x: Var<'t>) -> Var<'t> {
        let (value, rows, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (nm, nx) = (&nodes[self.id], &nodes[x.id]);
            assert_eq!(nm.cols, 12, "row_affine expects n x 12 transforms");
            assert_eq!((nx.rows, nx.cols), (nm.rows, 3), "row_affine point shape mismatch");
            let mut v = Vec::with_capacity(nm.rows * 3);
            for (m, p) in nm.value.chunks(12).zip(nx.value.chunks(3)) {
                for a in 0..3 {
                    v.push(m[a * 3] * p[0] + m[a * 3 + 1] * p[1] + m[a * 3 + 2] * p[2] + m[9 + a]);
                }
            }
            (v, nm.rows, nm.requires_grad || nx.requires_grad)
        };
        self.tape.push(value, rows, 3, Op::RowAffine(self.id, x.id), rg)
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, Op::Add(self.id, rhs.id), |x, y| x + y)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, Op::Sub(self.id, rhs.id), |x, y| x - y)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, Op::Mul(self.id, rhs.id), |x, y| x * y)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self, Op::Neg(self.id), |x| -x)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

/// Row-major rotation matrix for an axis-angle vector.
pub fn rodrigues(w: [f64; 3]) -> [f64; 9] {
    let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = if t2 < 1e-8 {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let t = t2.sqrt();
        (t.sin() / t, (1.0 - t.cos()) / t2)
    };
    let k = skew(w);
    let k2 = mat3_mul(&k, &k);
    let mut r = [0.0; 9];
    for i in 0..9 {
        r[i] = a * k[i] + b * k2[i];
    }
    r[0] += 1.0;
    r[4] += 1.0;
    r[8] += 1.0;
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn square_at_three() {
        let tape = Tape::new();
        let x = tape.param(vec![3.0], 1, 1);
        let y = x * x;
        let g = tape.backward(y).unwrap();
        assert_eq!(y.item(), 9.0);
        assert_eq!(g.wrt(x), vec![6.0]);
    }

    #[test]
    fn sum_of_sines_at_zero() {
        let tape = Tape::new();
        let x = tape.param(vec![0.0; 5], 5, 1);
        let y = x.sin().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), vec![1.0; 5]);
    }

    #[test]
    fn rodrigues_jacobian_matches_differences() {
        for w in [[0.3, -0.2, 0.9], [1e-4, 2e-4, -3e-5], [0.0, 0.0, 0.0], [2.0, 1.0, -1.5]] {
            let (r, jac) = rodrigues_with_jacobian(w);
            let plain = rodrigues(w);
            assert!(r.iter().zip(&plain).all(|(a, b)| (a - b).abs() < 1e-15), "forward paths disagree at {w:?}");
            for i in 0..3 {
                for m in 0..9 {
                    let num = fd(|x| rodrigues([x[0], x[1], x[2]])[m], &w)[i];
                    assert!((num - jac[i][m]).abs() < 1e-7, "w={w:?} i={i} m={m}: {num} vs {}", jac[i][m]);
                }
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rodrigues([0.4, -1.1, 0.7]);
        let rt_r = mat3_mul(&[r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]], &r);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rt_r[i * 3 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn composite_program_gradients() {
        // Exercises every built-in op in one program and compares to central differences.
        let program = |x: &[f64]| -> (f64, Vec<f64>) {
            let tape = Tape::new();
            let a = tape.param(x[..6].to_vec(), 2, 3);
            let w = tape.param(x[6..9].to_vec(), 1, 3);
            let b = tape.constant(vec![0.5, -1.0, 2.0, 0.1, 0.3, 0.7], 3, 2);
            let h = a.matmul(b).relu().offset(0.1); // 2x2
            let h2 = h.t().matmul(h).reshape(1, 4).sigmoid();
            let rot = w.rodrigues(); // 1x9
            let pts = tape.concat_rows(&[a, w]); // 3x3
            let m = tape.concat_cols(&[rot, w]).gather_rows(&[Some(0), Some(0), Some(0)]);
            let moved = m.row_affine(pts); // 3x3
            let gm = moved.square().sum_cols().geman_mcclure_sq(1.5).sum();
            let sl = (moved - pts).smooth_l1(0.5).mean();
            let sc = h2.sum().mul_scalar(w.col(0).offset(2.0));
            let trig = a.sin().sum() + a.cos().exp().sum().ln() + a.square().offset(1.0).sqrt().sum();
            let pw = a.square().offset(0.5).powf(1.5).sum().tanh();
            let col = tape.constant(vec![2.0, -1.0], 2, 1);
            let mc = a.mul_col(col).add_row(w).div(a.square().offset(2.0)).sum();
            let sc2 = a.slice_cols(1, 2).scatter_add_rows(&[1, 1], 3).scale(0.7).sum();
            let total = gm + sl + sc + trig + pw + mc + sc2 - (-a).sum();
            let g = tape.backward(total).unwrap();
            let mut grad = g.wrt(a);
            grad.extend(g.wrt(w));
            (total.item(), grad)
        };
        let x = [0.3, -0.7, 1.1, 0.4, 0.9, -0.2, 0.2, -0.5, 0.8];
        let (_, analytic) = program(&x);
        let numeric = fd(|p| program(p).0, &x);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-6, "coord {i}: analytic {a} numeric {n}");
        }
    }

    struct NoAdjoint;
    impl CustomOp for NoAdjoint {
        fn name(&self) -> &str {
            "hard_threshold"
        }
        fn backward(&self, _: &[&[f64]], _: &[f64], _: &[f64]) -> Option<Vec<Vec<f64>>> {
            None
        }
    }

    #[test]
    fn custom_op_without_adjoint_is_not_differentiable() {
        let tape = Tape::new();
        let x = tape.param(vec![0.2], 1, 1);
        let y = tape.custom(&[x], vec![1.0], 1, 1, Rc::new(NoAdjoint));
        let err = tape.backward(y.sum()).unwrap_err();
        assert!(err.to_string().starts_with("not differentiable"), "{err}");
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let tape = Tape::new();
        let c = tape.constant(vec![1.0, 2.0], 1, 2);
        let y = tape.custom(&[c], vec![3.0], 1, 1, Rc::new(NoAdjoint));
        let x = tape.param(vec![2.0], 1, 1);
        let total = y + x;
        let g = tape.backward(total).unwrap();
        assert_eq!(g.wrt(x), vec![1.0]);
        assert_eq!(g.wrt(c), vec![0.0, 0.0]);
    }
}
