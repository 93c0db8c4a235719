//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The model is small enough that a define-by-run tape is the simplest way to
//! get analytic gradients that provably match finite differences: every
//! operation records its inputs and a closure that maps the output gradient to
//! input gradients. Nodes are created in topological order, so the backward
//! pass is a single reverse sweep over the node list.
//!
//! Scalars are rank-0 arrays. All shapes are checked at op construction;
//! violations are programmer errors and panic.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn, NdFloat};
use std::cell::RefCell;
use std::iter::Sum;

/// Element type of the tape: `f32` or `f64`.
pub trait Real: NdFloat + Sum + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> f64 {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

type GradFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Real> {
    value: ArrayD<F>,
    parents: Vec<Var>,
    grad_fn: Option<GradFn<F>>,
    needs_grad: bool,
}

/// Gradient of the swept scalar with respect to every node, indexed by `Var`.
pub struct Gradients<F: Real>(Vec<Option<ArrayD<F>>>);

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the given shape when nothing flowed there.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, parents: Vec<Var>, grad_fn: Option<GradFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = grad_fn.is_some()
            && parents.iter().any(|p| nodes[p.0].needs_grad);
        let grad_fn = if needs_grad { grad_fn } else { None };
        nodes.push(Node {
            value,
            parents,
            grad_fn,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf with no gradient tracking.
    pub fn constant(&self, value: ArrayD<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            needs_grad: false,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that accumulates gradient (a trainable tensor placed on the tape).
    pub fn param(&self, value: ArrayD<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            needs_grad: true,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayD<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert!(val.len() == 1, "scalar_value on non-scalar");
        *val.first().unwrap()
    }

    pub fn vec_value(&self, v: Var) -> Vec<F> {
        self.nodes.borrow()[v.0].value.iter().copied().collect()
    }

    /// Reverse sweep from `output` (must be rank 0). Seeds d(output)/d(output) = 1.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[output.0].value.len() == 1,
            "backward from non-scalar output"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(ArrayD::ones(nodes[output.0].value.raw_dim()));
        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            let (Some(fun), Some(_)) = (&node.grad_fn, &grads[i]) else {
                continue;
            };
            let out_grad = grads[i].take().unwrap();
            let parent_grads = fun(&out_grad);
            assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(nodes[p.0].value.shape(), pg.shape());
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(out_grad);
        }
        Gradients(grads)
    }

    // ── leaf helpers ──────────────────────────────────────────────────

    pub fn scalar(&self, x: F) -> Var {
        self.constant(ndarray::arr0(x).into_dyn())
    }

    pub fn zeros1(&self, n: usize) -> Var {
        self.constant(ArrayD::zeros(IxDyn(&[n])))
    }

    pub fn empty_matrix(&self, cols: usize) -> Var {
        self.constant(ArrayD::zeros(IxDyn(&[0, cols])))
    }

    // ── elementwise ───────────────────────────────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &va + &vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g: &ArrayD<F>| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &va - &vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g: &ArrayD<F>| vec![g.clone(), -g.clone()])),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = -self.value(a);
        self.push(out, vec![a], Some(Box::new(|g: &ArrayD<F>| vec![-g.clone()])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &va * &vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g: &ArrayD<F>| vec![g * &vb, g * &va])),
        )
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &ArrayD<F>| vec![g.mapv(|x| x * c)])),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let mask = va.mapv(|x| if x > F::zero() { F::one() } else { F::zero() });
        let out = &va * &mask;
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &ArrayD<F>| vec![g * &mask])),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| F::one() / (F::one() + (-x).exp()));
        let saved = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &ArrayD<F>| {
                vec![g * &saved.mapv(|s| s * (F::one() - s))]
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.tanh());
        let saved = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &ArrayD<F>| {
                vec![g * &saved.mapv(|t| F::one() - t * t)]
            })),
        )
    }

    /// Elementwise natural log. Inputs must be strictly positive.
    pub fn ln(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.ln());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &ArrayD<F>| vec![g / &va])),
        )
    }

    // ── indexing / structure ──────────────────────────────────────────

    /// v[i] as a rank-0 scalar.
    pub fn index(&self, v: Var, i: usize) -> Var {
        let vv = self.value(v);
        assert_eq!(vv.ndim(), 1, "index: expects a vector");
        let n = vv.len();
        assert!(i < n, "index: out of range");
        let out = ndarray::arr0(vv[[i]]).into_dyn();
        self.push(
            out,
            vec![v],
            Some(Box::new(move |g: &ArrayD<F>| {
                let mut back = ArrayD::zeros(IxDyn(&[n]));
                back[[i]] = *g.first().unwrap();
                vec![back]
            })),
        )
    }

    /// Row i of a matrix as a vector.
    pub fn row(&self, m: Var, i: usize) -> Var {
        let vm = self.value(m);
        assert_eq!(vm.ndim(), 2, "row: expects a matrix");
        let (r, c) = (vm.shape()[0], vm.shape()[1]);
        assert!(i < r, "row: out of range");
        let out = vm
            .index_axis(Axis(0), i)
            .to_owned()
            .into_dyn();
        self.push(
            out,
            vec![m],
            Some(Box::new(move |g: &ArrayD<F>| {
                let mut back = ArrayD::zeros(IxDyn(&[r, c]));
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                back.index_axis_mut(Axis(0), i).assign(&gv);
                vec![back]
            })),
        )
    }

    /// Embedding lookup: stacks `table[idx[0]], table[idx[1]], ...` into a matrix.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        assert_eq!(vt.ndim(), 2, "gather_rows: expects a matrix");
        let (rows, cols) = (vt.shape()[0], vt.shape()[1]);
        for &i in idx {
            assert!(i < rows, "gather_rows: index out of range");
        }
        let mut out = Array2::<F>::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&vt.index_axis(Axis(0), i));
        }
        let idx = idx.to_vec();
        self.push(
            out.into_dyn(),
            vec![table],
            Some(Box::new(move |g: &ArrayD<F>| {
                let mut back = Array2::<F>::zeros((rows, cols));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = back.row_mut(i);
                    dst += &gv.row(r);
                }
                vec![back.into_dyn()]
            })),
        )
    }

    /// Stack 1-D vectors (all the same length) into a matrix, one per row.
    pub fn stack_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows: empty input");
        let vals: Vec<ArrayD<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = vals[0].len();
        let mut out = Array2::<F>::zeros((vals.len(), cols));
        for (r, v) in vals.iter().enumerate() {
            assert_eq!(v.ndim(), 1, "stack_rows: parts must be vectors");
            assert_eq!(v.len(), cols, "stack_rows: ragged input");
            out.row_mut(r)
                .assign(&v.view().into_dimensionality::<Ix1>().unwrap());
        }
        self.push(
            out.into_dyn(),
            parts.to_vec(),
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                (0..gv.nrows())
                    .map(|r| gv.row(r).to_owned().into_dyn())
                    .collect()
            })),
        )
    }

    /// Stack matrices (same column count) on top of each other.
    pub fn vcat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "vcat: empty input");
        let vals: Vec<ArrayD<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = vals[0].shape()[1];
        let row_counts: Vec<usize> = vals
            .iter()
            .map(|v| {
                assert_eq!(v.ndim(), 2, "vcat: parts must be matrices");
                assert_eq!(v.shape()[1], cols, "vcat: column mismatch");
                v.shape()[0]
            })
            .collect();
        let total: usize = row_counts.iter().sum();
        let mut out = Array2::<F>::zeros((total, cols));
        let mut at = 0;
        for v in &vals {
            let r = v.shape()[0];
            out.slice_mut(ndarray::s![at..at + r, ..])
                .assign(&v.view().into_dimensionality::<Ix2>().unwrap());
            at += r;
        }
        self.push(
            out.into_dyn(),
            parts.to_vec(),
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut at = 0;
                row_counts
                    .iter()
                    .map(|&r| {
                        let piece = gv.slice(ndarray::s![at..at + r, ..]).to_owned();
                        at += r;
                        piece.into_dyn()
                    })
                    .collect()
            })),
        )
    }

    /// Concatenate matrices (same row count) side by side.
    pub fn hcat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "hcat: empty input");
        let vals: Vec<ArrayD<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals[0].shape()[0];
        let col_counts: Vec<usize> = vals
            .iter()
            .map(|v| {
                assert_eq!(v.ndim(), 2, "hcat: parts must be matrices");
                assert_eq!(v.shape()[0], rows, "hcat: row mismatch");
                v.shape()[1]
            })
            .collect();
        let total: usize = col_counts.iter().sum();
        let mut out = Array2::<F>::zeros((rows, total));
        let mut at = 0;
        for v in &vals {
            let c = v.shape()[1];
            out.slice_mut(ndarray::s![.., at..at + c])
                .assign(&v.view().into_dimensionality::<Ix2>().unwrap());
            at += c;
        }
        self.push(
            out.into_dyn(),
            parts.to_vec(),
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut at = 0;
                col_counts
                    .iter()
                    .map(|&c| {
                        let piece = gv.slice(ndarray::s![.., at..at + c]).to_owned();
                        at += c;
                        piece.into_dyn()
                    })
                    .collect()
            })),
        )
    }

    /// Concatenate vectors into one vector.
    pub fn concat1d(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat1d: empty input");
        let vals: Vec<ArrayD<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let lens: Vec<usize> = vals
            .iter()
            .map(|v| {
                assert_eq!(v.ndim(), 1, "concat1d: parts must be vectors");
                v.len()
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut out = Array1::<F>::zeros(total);
        let mut at = 0;
        for v in &vals {
            out.slice_mut(ndarray::s![at..at + v.len()])
                .assign(&v.view().into_dimensionality::<Ix1>().unwrap());
            at += v.len();
        }
        self.push(
            out.into_dyn(),
            parts.to_vec(),
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut at = 0;
                lens.iter()
                    .map(|&n| {
                        let piece = gv.slice(ndarray::s![at..at + n]).to_owned();
                        at += n;
                        piece.into_dyn()
                    })
                    .collect()
            })),
        )
    }

    /// v[start..start+len] of a vector.
    pub fn slice1d(&self, v: Var, start: usize, len: usize) -> Var {
        let vv = self.value(v);
        assert_eq!(vv.ndim(), 1, "slice1d: expects a vector");
        let n = vv.len();
        assert!(start + len <= n, "slice1d: out of range");
        let out = vv
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .slice(ndarray::s![start..start + len])
            .to_owned();
        self.push(
            out.into_dyn(),
            vec![v],
            Some(Box::new(move |g: &ArrayD<F>| {
                let mut back = Array1::<F>::zeros(n);
                back.slice_mut(ndarray::s![start..start + len])
                    .assign(&g.view().into_dimensionality::<Ix1>().unwrap());
                vec![back.into_dyn()]
            })),
        )
    }

    /// Mean over rows of a matrix; matrix must have at least one row.
    pub fn mean_rows(&self, m: Var) -> Var {
        let vm = self.value(m);
        assert_eq!(vm.ndim(), 2, "mean_rows: expects a matrix");
        let (r, c) = (vm.shape()[0], vm.shape()[1]);
        assert!(r > 0, "mean_rows: empty matrix");
        let inv = F::one() / F::from_f64(r as f64);
        let out = vm
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .sum_axis(Axis(0))
            .mapv(|x| x * inv);
        self.push(
            out.into_dyn(),
            vec![m],
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut back = Array2::<F>::zeros((r, c));
                for mut row in back.rows_mut() {
                    row.assign(&gv.mapv(|x| x * inv));
                }
                vec![back.into_dyn()]
            })),
        )
    }

    /// Sum of all entries of a vector, as a scalar.
    pub fn sum_vec(&self, v: Var) -> Var {
        let vv = self.value(v);
        assert_eq!(vv.ndim(), 1, "sum_vec: expects a vector");
        let n = vv.len();
        let out = ndarray::arr0(vv.iter().copied().sum::<F>()).into_dyn();
        self.push(
            out,
            vec![v],
            Some(Box::new(move |g: &ArrayD<F>| {
                let gs = *g.first().unwrap();
                vec![ArrayD::from_elem(IxDyn(&[n]), gs)]
            })),
        )
    }

    // ── linear algebra ────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a).into_dimensionality::<Ix2>().expect("matmul: a");
        let vb = self.value(b).into_dimensionality::<Ix2>().expect("matmul: b");
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dim mismatch");
        let out = va.dot(&vb);
        self.push(
            out.into_dyn(),
            vec![a, b],
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    gv.dot(&vb.t()).into_dyn(),
                    va.t().dot(&gv).into_dyn(),
                ]
            })),
        )
    }

    /// Matrix-vector product A·x.
    pub fn matvec(&self, a: Var, x: Var) -> Var {
        let va = self.value(a).into_dimensionality::<Ix2>().expect("matvec: a");
        let vx = self.value(x).into_dimensionality::<Ix1>().expect("matvec: x");
        assert_eq!(va.ncols(), vx.len(), "matvec: dim mismatch");
        let out = va.dot(&vx);
        self.push(
            out.into_dyn(),
            vec![a, x],
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                // dA = g ⊗ x, dx = Aᵀ g
                let mut da = Array2::<F>::zeros(va.raw_dim());
                for (i, gi) in gv.iter().enumerate() {
                    da.row_mut(i).assign(&vx.mapv(|xj| xj * *gi));
                }
                vec![da.into_dyn(), va.t().dot(&gv).into_dyn()]
            })),
        )
    }

    /// Vector-matrix product xᵀA (x of length m, A of shape m×n).
    pub fn vecmat(&self, x: Var, a: Var) -> Var {
        let vx = self.value(x).into_dimensionality::<Ix1>().expect("vecmat: x");
        let va = self.value(a).into_dimensionality::<Ix2>().expect("vecmat: a");
        assert_eq!(vx.len(), va.nrows(), "vecmat: dim mismatch");
        let out = vx.dot(&va);
        self.push(
            out.into_dyn(),
            vec![x, a],
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                // dx = A g, dA = x ⊗ g
                let mut da = Array2::<F>::zeros(va.raw_dim());
                for (i, xi) in vx.iter().enumerate() {
                    da.row_mut(i).assign(&gv.mapv(|gj| gj * *xi));
                }
                vec![va.dot(&gv).into_dyn(), da.into_dyn()]
            })),
        )
    }

    pub fn dot(&self, x: Var, y: Var) -> Var {
        let vx = self.value(x).into_dimensionality::<Ix1>().expect("dot: x");
        let vy = self.value(y).into_dimensionality::<Ix1>().expect("dot: y");
        assert_eq!(vx.len(), vy.len(), "dot: length mismatch");
        let out = ndarray::arr0(vx.dot(&vy)).into_dyn();
        self.push(
            out,
            vec![x, y],
            Some(Box::new(move |g: &ArrayD<F>| {
                let gs = *g.first().unwrap();
                vec![
                    vy.mapv(|v| v * gs).into_dyn(),
                    vx.mapv(|v| v * gs).into_dyn(),
                ]
            })),
        )
    }

    // ── broadcasting ──────────────────────────────────────────────────

    /// Each row of `m` multiplied elementwise by `s`.
    pub fn mul_row_broadcast(&self, m: Var, s: Var) -> Var {
        let vm = self.value(m).into_dimensionality::<Ix2>().expect("mul_row_broadcast: m");
        let vs = self.value(s).into_dimensionality::<Ix1>().expect("mul_row_broadcast: s");
        assert_eq!(vm.ncols(), vs.len(), "mul_row_broadcast: dim mismatch");
        let out = &vm * &vs;
        self.push(
            out.into_dyn(),
            vec![m, s],
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let dm = &gv * &vs;
                let ds = (&gv.to_owned() * &vm).sum_axis(Axis(0));
                vec![dm.into_dyn(), ds.into_dyn()]
            })),
        )
    }

    /// Each row of `m` plus `b` (bias over rows).
    pub fn add_row_broadcast(&self, m: Var, b: Var) -> Var {
        let vm = self.value(m).into_dimensionality::<Ix2>().expect("add_row_broadcast: m");
        let vb = self.value(b).into_dimensionality::<Ix1>().expect("add_row_broadcast: b");
        assert_eq!(vm.ncols(), vb.len(), "add_row_broadcast: dim mismatch");
        let out = &vm + &vb;
        self.push(
            out.into_dyn(),
            vec![m, b],
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![g.clone(), gv.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// v + c with a scalar node broadcast over all components.
    pub fn add_scalar_broadcast(&self, v: Var, c: Var) -> Var {
        let vv = self.value(v).into_dimensionality::<Ix1>().expect("add_scalar_broadcast: v");
        let vc = self.scalar_value(c);
        let out = vv.mapv(|x| x + vc);
        self.push(
            out.into_dyn(),
            vec![v, c],
            Some(Box::new(move |g: &ArrayD<F>| {
                let total = g.iter().copied().sum::<F>();
                vec![g.clone(), ndarray::arr0(total).into_dyn()]
            })),
        )
    }

    // ── softmax ───────────────────────────────────────────────────────

    /// Softmax over unmasked positions; masked positions are exactly zero.
    /// Returns the distribution and a flag set when every position is masked
    /// (in which case the output is the all-zero vector).
    pub fn masked_softmax(&self, logits: Var, mask: &[u8]) -> (Var, bool) {
        let vl = self.value(logits).into_dimensionality::<Ix1>().expect("masked_softmax: logits");
        assert_eq!(vl.len(), mask.len(), "masked_softmax: mask length mismatch");
        let n = vl.len();
        if mask.iter().all(|&m| m == 0) {
            return (self.zeros1(n), true);
        }
        let neg = F::from_f64(-1e9);
        let shifted: Vec<F> = vl
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m == 1 { x } else { x + neg })
            .collect();
        let max = shifted
            .iter()
            .copied()
            .fold(F::from_f64(f64::NEG_INFINITY), F::max);
        let mut exps: Vec<F> = shifted.iter().map(|&x| (x - max).exp()).collect();
        for (e, &m) in exps.iter_mut().zip(mask) {
            if m == 0 {
                *e = F::zero();
            }
        }
        let total: F = exps.iter().copied().sum();
        let p = Array1::from_vec(exps.iter().map(|&e| e / total).collect::<Vec<F>>());
        let saved = p.clone();
        let out = self.push(
            p.into_dyn(),
            vec![logits],
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let inner: F = gv
                    .iter()
                    .zip(saved.iter())
                    .map(|(&gi, &pi)| gi * pi)
                    .sum();
                let back = Array1::from_iter(
                    gv.iter()
                        .zip(saved.iter())
                        .map(|(&gi, &pi)| pi * (gi - inner)),
                );
                vec![back.into_dyn()]
            })),
        );
        (out, false)
    }

    /// Softmax with no masking.
    pub fn softmax(&self, logits: Var) -> Var {
        let n = self.value(logits).len();
        let mask = vec![1u8; n];
        self.masked_softmax(logits, &mask).0
    }

    // ── fused char-CNN unit ───────────────────────────────────────────

    /// 1-D convolution over character embeddings followed by ReLU and
    /// max-over-time pooling, fused into one node.
    ///
    /// `chars`: L×d matrix (L ≥ width; callers pad), `kernel`: (width·d)×C,
    /// `bias`: C. Output: C-vector, out_j = relu(max_p window_p · K_:,j + b_j).
    /// `valid` restricts max-over-time to the first `valid` windows, so
    /// pooling never selects a window made purely of padding rows (such a
    /// window outputs exactly the bias, parking a rectifier kink on the
    /// zero-initialized bias itself).
    pub fn conv_relu_maxpool(
        &self,
        chars: Var,
        kernel: Var,
        bias: Var,
        width: usize,
        valid: usize,
    ) -> Var {
        let vc = self.value(chars).into_dimensionality::<Ix2>().expect("conv: chars");
        let vk = self.value(kernel).into_dimensionality::<Ix2>().expect("conv: kernel");
        let vb = self.value(bias).into_dimensionality::<Ix1>().expect("conv: bias");
        let (len, d) = (vc.nrows(), vc.ncols());
        assert!(len >= width, "conv: input shorter than kernel width");
        assert_eq!(vk.nrows(), width * d, "conv: kernel rows != width*d");
        assert_eq!(vk.ncols(), vb.len(), "conv: channel mismatch");
        let channels = vk.ncols();
        let positions = len - width + 1;
        assert!(
            (1..=positions).contains(&valid),
            "conv: valid window count {valid} outside 1..={positions}"
        );
        let positions = valid;

        // windows[p] = flattened chars[p..p+width]
        let mut windows = Array2::<F>::zeros((positions, width * d));
        for p in 0..positions {
            for w in 0..width {
                for j in 0..d {
                    windows[[p, w * d + j]] = vc[[p + w, j]];
                }
            }
        }
        let pre = windows.dot(&vk) + &vb; // positions × channels
        let mut out = Array1::<F>::zeros(channels);
        let mut argmax = vec![0usize; channels];
        for c in 0..channels {
            let mut best = pre[[0, c]];
            let mut best_p = 0usize;
            for p in 1..positions {
                if pre[[p, c]] > best {
                    best = pre[[p, c]];
                    best_p = p;
                }
            }
            argmax[c] = best_p;
            out[c] = if best > F::zero() { best } else { F::zero() };
        }
        let active: Vec<bool> = (0..channels)
            .map(|c| pre[[argmax[c], c]] > F::zero())
            .collect();
        self.push(
            out.into_dyn(),
            vec![chars, kernel, bias],
            Some(Box::new(move |g: &ArrayD<F>| {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dchars = Array2::<F>::zeros((len, d));
                let mut dkernel = Array2::<F>::zeros((width * d, channels));
                let mut dbias = Array1::<F>::zeros(channels);
                for c in 0..channels {
                    if !active[c] {
                        continue;
                    }
                    let gc = gv[c];
                    if gc == F::zero() {
                        continue;
                    }
                    let p = argmax[c];
                    dbias[c] += gc;
                    for w in 0..width {
                        for j in 0..d {
                            dkernel[[w * d + j, c]] += gc * windows[[p, w * d + j]];
                            dchars[[p + w, j]] += gc * vk[[w * d + j, c]];
                        }
                    }
                }
                vec![dchars.into_dyn(), dkernel.into_dyn(), dbias.into_dyn()]
            })),
        )
    }
}
