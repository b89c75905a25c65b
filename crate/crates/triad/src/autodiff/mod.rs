//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! recorded nodes in reverse and accumulates gradients for every node,
//! including leaves. Values are dynamic-dimension arrays so one op set serves
//! vectors, matrices and batched 3-D tensors. The engine is generic over
//! `f32`/`f64`: training runs at `f32`, gradient verification at `f64`.

pub mod check;
pub mod nn;

use std::cell::{Ref, RefCell};
use std::iter::Sum;

use ndarray::{ArrayD, Axis, IxDyn, NdFloat, Zip};
use num_traits::FromPrimitive;

use crate::error::{Error, Result};

/// Element type bound: everything the tape needs from a float.
pub trait Scalar: NdFloat + FromPrimitive + Sum + Send + Sync {
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Backward function: upstream gradient -> one gradient per parent.
type BackFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<ArrayD<T>>>;

struct Node<T> {
    value: ArrayD<T>,
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
}

/// Append-only operation tape. One tape per forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Grads<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient w.r.t. `v`, zeros if the node never received one.
    pub fn wrt(&self, v: Var<'_, T>) -> ArrayD<T> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(v.shape()),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
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

    /// Insert a leaf value. Leaves accumulate gradients but have no parents;
    /// a leaf that is never read back acts as a detached constant.
    pub fn leaf(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None)
    }

    fn push(&self, value: ArrayD<T>, parents: Vec<usize>, back: Option<BackFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            back,
        });
        Var { tape: self, id }
    }

    /// Reverse pass from a scalar loss. Nodes are recorded in topological
    /// order, so a single reverse sweep suffices.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(ArrayD::ones(nodes[loss.id].value.raw_dim()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.back {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[pid] {
                        Some(acc) => *acc = &*acc + &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

/// Broadcast shape of `a` and `b` under numpy right-aligned rules.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `target` shape, inverting a broadcast.
fn reduce_to_shape<T: Scalar>(mut g: ArrayD<T>, target: &[usize]) -> ArrayD<T> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &t) in target.iter().enumerate() {
        if t == 1 && g.shape()[i] > 1 {
            let summed = g.sum_axis(Axis(i)).insert_axis(Axis(i));
            g = summed;
        }
    }
    g
}

fn to_std<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Borrow of the node value.
    pub fn value_ref(&self) -> Ref<'t, ArrayD<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Owned copy of the node value.
    pub fn value(&self) -> ArrayD<T> {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> IxDyn {
        self.value_ref().raw_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> T {
        let v = self.value_ref();
        assert_eq!(v.len(), 1, "scalar() on non-scalar value");
        *v.iter().next().unwrap()
    }

    fn unary(
        &self,
        value: ArrayD<T>,
        back: impl Fn(&ArrayD<T>) -> ArrayD<T> + 'static,
    ) -> Var<'t, T> {
        self.tape
            .push(value, vec![self.id], Some(Box::new(move |g| vec![back(g)])))
    }

    pub fn add(&self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape());
        let value = &a.broadcast(IxDyn(&out_shape)).unwrap() + &b.broadcast(IxDyn(&out_shape)).unwrap();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                vec![
                    reduce_to_shape(g.clone(), &sa),
                    reduce_to_shape(g.clone(), &sb),
                ]
            })),
        )
    }

    pub fn sub(&self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape());
        let value = &a.broadcast(IxDyn(&out_shape)).unwrap() - &b.broadcast(IxDyn(&out_shape)).unwrap();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                vec![
                    reduce_to_shape(g.clone(), &sa),
                    reduce_to_shape(g.mapv(|x| -x), &sb),
                ]
            })),
        )
    }

    pub fn mul(&self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape());
        let value = &a.broadcast(IxDyn(&out_shape)).unwrap() * &b.broadcast(IxDyn(&out_shape)).unwrap();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                let ga = g * &b.broadcast(IxDyn(&g.shape().to_vec())).unwrap();
                let gb = g * &a.broadcast(IxDyn(&g.shape().to_vec())).unwrap();
                vec![reduce_to_shape(ga, &sa), reduce_to_shape(gb, &sb)]
            })),
        )
    }

    pub fn div(&self, other: Var<'t, T>) -> Var<'t, T> {
        self.mul(other.recip())
    }

    pub fn neg(&self) -> Var<'t, T> {
        let value = self.value().mapv(|x| -x);
        self.unary(value, |g| g.mapv(|x| -x))
    }

    /// `k * x + c` with constant scalars.
    pub fn affine(&self, k: T, c: T) -> Var<'t, T> {
        let value = self.value().mapv(|x| k * x + c);
        self.unary(value, move |g| g.mapv(|x| x * k))
    }

    pub fn scale(&self, k: T) -> Var<'t, T> {
        self.affine(k, T::zero())
    }

    pub fn recip(&self) -> Var<'t, T> {
        let y = self.value().mapv(|x| T::one() / x);
        let yc = y.clone();
        self.unary(y, move |g| g * &yc.mapv(|v| -v * v))
    }

    pub fn exp(&self) -> Var<'t, T> {
        let y = self.value().mapv(|x| x.exp());
        let yc = y.clone();
        self.unary(y, move |g| g * &yc)
    }

    pub fn ln(&self) -> Var<'t, T> {
        let x = self.value();
        let y = x.mapv(|v| v.ln());
        self.unary(y, move |g| g / &x)
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        let y = self.value().mapv(|x| x.sqrt());
        let yc = y.clone();
        let half = T::of_f64(0.5);
        self.unary(y, move |g| g * &yc.mapv(|v| half / v))
    }

    pub fn square(&self) -> Var<'t, T> {
        let x = self.value();
        let y = &x * &x;
        let two = T::of_f64(2.0);
        self.unary(y, move |g| g * &x.mapv(|v| two * v))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let y = self.value().mapv(|x| x.tanh());
        let yc = y.clone();
        self.unary(y, move |g| g * &yc.mapv(|v| T::one() - v * v))
    }

    /// Smooth GELU (tanh form).
    pub fn gelu(&self) -> Var<'t, T> {
        let c = T::of_f64(0.7978845608028654); // sqrt(2/pi)
        let k = T::of_f64(0.044715);
        let half = T::of_f64(0.5);
        let x = self.value();
        let y = x.mapv(|v| {
            let u = c * (v + k * v * v * v);
            half * v * (T::one() + u.tanh())
        });
        self.unary(y, move |g| {
            let dydx = x.mapv(|v| {
                let u = c * (v + k * v * v * v);
                let t = u.tanh();
                let sech2 = T::one() - t * t;
                let du = c * (T::one() + T::of_f64(3.0) * k * v * v);
                half * (T::one() + t) + half * v * sech2 * du
            });
            g * &dydx
        })
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = other.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dims");
        let value = a.dot(&b).into_dyn();
        self.tape.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![
                    g2.dot(&b.t()).into_dyn(),
                    a.t().dot(&g2).into_dyn(),
                ]
            })),
        )
    }

    /// Batched 3-D matrix product: `(B,M,K) x (B,K,N) -> (B,M,N)`.
    pub fn bmm(&self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value().into_dimensionality::<ndarray::Ix3>().unwrap();
        let b = other.value().into_dimensionality::<ndarray::Ix3>().unwrap();
        assert_eq!(a.shape()[0], b.shape()[0], "bmm batch dims");
        assert_eq!(a.shape()[2], b.shape()[1], "bmm inner dims");
        let (bs, m, n) = (a.shape()[0], a.shape()[1], b.shape()[2]);
        let mut value = ndarray::Array3::<T>::zeros((bs, m, n));
        for i in 0..bs {
            value
                .index_axis_mut(Axis(0), i)
                .assign(&a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i)));
        }
        self.tape.push(
            value.into_dyn(),
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut ga = ndarray::Array3::<T>::zeros(a.raw_dim());
                let mut gb = ndarray::Array3::<T>::zeros(b.raw_dim());
                for i in 0..g3.shape()[0] {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&a.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![ga.into_dyn(), gb.into_dyn()]
            })),
        )
    }

    /// Axis permutation.
    pub fn transpose(&self, perm: &[usize]) -> Var<'t, T> {
        let perm_owned = perm.to_vec();
        let value = to_std(self.value().permuted_axes(IxDyn(perm)));
        let mut inv = vec![0usize; perm_owned.len()];
        for (i, &p) in perm_owned.iter().enumerate() {
            inv[p] = i;
        }
        self.unary(value, move |g| to_std(g.clone().permuted_axes(IxDyn(&inv))))
    }

    /// 2-D transpose.
    pub fn t2(&self) -> Var<'t, T> {
        self.transpose(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let in_shape = self.dims();
        let value = to_std(self.value())
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.unary(value, move |g| {
            to_std(g.clone())
                .into_shape_with_order(IxDyn(&in_shape))
                .unwrap()
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&self) -> Var<'t, T> {
        let in_shape = self.dims();
        let s = self.value().sum();
        let value = ArrayD::from_elem(IxDyn(&[1]), s);
        self.unary(value, move |g| {
            ArrayD::from_elem(IxDyn(&in_shape), g[[0]])
        })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean_all(&self) -> Var<'t, T> {
        let n = self.value_ref().len();
        self.sum_all().scale(T::one() / T::from_usize(n).unwrap())
    }

    /// Sum over one axis, optionally keeping it as length 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Var<'t, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let mut value = x.sum_axis(Axis(axis));
        if keepdim {
            value = value.insert_axis(Axis(axis));
        }
        self.unary(value, move |g| {
            let gk = if keepdim {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(axis))
            };
            let mut out = ArrayD::zeros(IxDyn(&in_shape));
            Zip::from(&mut out)
                .and_broadcast(&gk)
                .for_each(|o, &v| *o = v);
            out
        })
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t, T> {
        let x = self.value();
        let last = x.ndim() - 1;
        let mut y = x;
        for mut row in y.rows_mut() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let yc = y.clone();
        self.unary(y, move |g| {
            let dot = (g * &yc).sum_axis(Axis(last)).insert_axis(Axis(last));
            &yc * &(g - &dot)
        })
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Var<'t, T> {
        let x = self.value();
        let last = x.ndim() - 1;
        let mut y = x;
        for mut row in y.rows_mut() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let yc = y.clone();
        self.unary(y, move |g| {
            let gsum = g.sum_axis(Axis(last)).insert_axis(Axis(last));
            g - &(&yc.mapv(|v| v.exp()) * &gsum)
        })
    }

    /// Contiguous sub-range along `axis`, keeping the axis.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Var<'t, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let value = x
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        self.unary(value, move |g| {
            let mut out = ArrayD::zeros(IxDyn(&in_shape));
            out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end))
                .assign(g);
            out
        })
    }

    /// Select index `i` along `axis`, removing that axis.
    pub fn index_axis(&self, axis: usize, i: usize) -> Var<'t, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let value = x.index_axis(Axis(axis), i).to_owned();
        self.unary(value, move |g| {
            let mut out = ArrayD::zeros(IxDyn(&in_shape));
            out.index_axis_mut(Axis(axis), i).assign(g);
            out
        })
    }

    /// Diagonal of a square matrix: `(N,N) -> (N,)`.
    pub fn diag2(&self) -> Var<'t, T> {
        let x = self.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        let n = x.nrows();
        assert_eq!(n, x.ncols(), "diag2 requires a square matrix");
        let value = ndarray::Array1::from_iter((0..n).map(|i| x[[i, i]])).into_dyn();
        self.unary(value, move |g| {
            let mut out = ndarray::Array2::<T>::zeros((n, n));
            for i in 0..n {
                out[[i, i]] = g[[i]];
            }
            out.into_dyn()
        })
    }

    /// Select one column per row: `(N,K) -> (N,)` at `cols[i]`.
    pub fn gather_rows(&self, cols: &[usize]) -> Var<'t, T> {
        let x = self.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(x.nrows(), cols.len(), "gather_rows index count");
        let cols_owned = cols.to_vec();
        let (n, k) = (x.nrows(), x.ncols());
        let value =
            ndarray::Array1::from_iter(cols.iter().enumerate().map(|(i, &c)| x[[i, c]])).into_dyn();
        self.unary(value, move |g| {
            let mut out = ndarray::Array2::<T>::zeros((n, k));
            for (i, &c) in cols_owned.iter().enumerate() {
                out[[i, c]] = g[[i]];
            }
            out.into_dyn()
        })
    }
}

/// Concatenate along the last axis.
pub fn concat_last<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Var<'t, T> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<ArrayD<T>> = parts.iter().map(|p| p.value()).collect();
    let last = values[0].ndim() - 1;
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[last]).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let value = ndarray::concatenate(Axis(last), &views).expect("concat shapes");
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push(
        value,
        ids,
        Some(Box::new(move |g| {
            let mut parts: Vec<ArrayD<T>> = Vec::with_capacity(widths.len());
            let mut start = 0usize;
            for &w in &widths {
                let sl = g.slice_axis(Axis(last), ndarray::Slice::from(start..start + w));
                parts.push(sl.to_owned());
                start += w;
            }
            parts
        })),
    )
}

/// Expand a 1-D bias table into a matrix via an index map:
/// `out[i,j] = table[idx[i,j]]`. Used for relative-position attention bias.
pub fn table_lookup<'t, T: Scalar>(
    table: Var<'t, T>,
    idx: &ndarray::Array2<usize>,
) -> Var<'t, T> {
    let tape = table.tape;
    let tv = table.value();
    assert_eq!(tv.ndim(), 1, "table_lookup expects a 1-D table");
    let len = tv.len();
    let idx_owned = idx.clone();
    let (r, c) = idx.dim();
    let mut value = ndarray::Array2::<T>::zeros((r, c));
    for i in 0..r {
        for j in 0..c {
            value[[i, j]] = tv[[idx[[i, j]]]];
        }
    }
    tape.push(
        value.into_dyn(),
        vec![table.id],
        Some(Box::new(move |g| {
            let mut gt = ndarray::Array1::<T>::zeros(len);
            for i in 0..r {
                for j in 0..c {
                    gt[[idx_owned[[i, j]]]] = gt[[idx_owned[[i, j]]]] + g[[i, j]];
                }
            }
            vec![gt.into_dyn()]
        })),
    )
}

/// Row-wise L2 normalization: each row divided by its Euclidean norm.
/// Degenerate zero rows produce non-finite values; callers guard.
pub fn l2_normalize_rows<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let last = x.value_ref().ndim() - 1;
    let norm = x.square().sum_axis(last, true).sqrt();
    x.mul(norm.recip())
}

/// Cosine-similarity matrix between row sets: `(N,D) x (M,D) -> (N,M)`.
pub fn cosine_matrix<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    l2_normalize_rows(a).matmul(l2_normalize_rows(b).t2())
}

/// Checked leaf construction: rejects non-finite input values.
pub fn finite_leaf<'t, T: Scalar>(tape: &'t Tape<T>, value: ArrayD<T>, what: &str) -> Result<Var<'t, T>> {
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter(format!("non-finite values in {what}")));
    }
    Ok(tape.leaf(value))
}
