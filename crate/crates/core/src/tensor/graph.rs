use std::cell::RefCell;
use std::sync::Arc;

use super::{matmul_raw, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention problem inside a packed attention call: query rows
/// `q_start..q_start + q_len` attend to key/value rows `kv_start..kv_start + kv_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

type BackFn<T> = Box<dyn Fn(&[T], &mut GradSink<T>)>;

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    back: Option<BackFn<T>>,
}

/// Accumulates gradients for parent nodes while the tape is replayed.
pub struct GradSink<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
    needs: Vec<bool>,
}

impl<T: Real> GradSink<T> {
    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs[v.0] {
            return;
        }
        let len = self.lens[v.0];
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }

    fn add(&mut self, v: Var, g: &[T]) {
        self.acc(v, |buf| {
            for (b, &x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        });
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Operation tape.
///
/// A graph built with [`Graph::inference`] records values only; no backward
/// closures are kept and [`Graph::backward`] yields no gradients.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Tensor<T>, needs_grad: bool, back: Option<BackFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.record && needs_grad;
        nodes.push(Node { value, needs_grad, back: if needs_grad { back } else { None } });
        Var(nodes.len() - 1)
    }

    fn op(&self, value: Tensor<T>, parents: &[Var], back: impl Fn(&[T], &mut GradSink<T>) + 'static) -> Var {
        let needs = self.record && parents.iter().any(|&p| self.needs_grad(p));
        if needs {
            self.push(value, true, Some(Box::new(back)))
        } else {
            self.push(value, false, None)
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, false, None)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(t, true, None)
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
            lens: nodes.iter().map(|nd| nd.value.len()).collect(),
            needs: nodes.iter().map(|nd| nd.needs_grad).collect(),
        };
        let mut out: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if !nodes[loss.0].needs_grad {
            return Grads { grads: out };
        }
        sink.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = sink.grads[i].take() else { continue };
            match &nodes[i].back {
                Some(back) => back(&g, &mut sink),
                None => out[i] = Some(g),
            }
        }
        Grads { grads: out }
    }

    // ----------------------------------------------------------------- shape

    /// Same storage, new shape.
    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let v = self.value(x).reshape(shape);
        self.op(v, &[x], move |g, s| s.add(x, g))
    }

    /// Rows `start..start + len` of `x` viewed as `[rows, cols]`.
    pub fn narrow_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let v = xv.narrow_rows(start, len);
        self.op(v, &[x], move |g, s| {
            s.acc(x, |buf| {
                for (b, &v) in buf[start * c..(start + len) * c].iter_mut().zip(g) {
                    *b += v;
                }
            })
        })
    }

    /// Selected rows of `x` viewed as `[rows, cols]`, in the given order.
    pub fn gather_rows(&self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let rows = xv.rows();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in &idx {
            assert!(r < rows, "row index {r} out of range for {rows} rows");
            data.extend_from_slice(&xv.data()[r * c..(r + 1) * c]);
        }
        let v = Tensor::new(vec![idx.len(), c], data);
        self.op(v, &[x], move |g, s| {
            s.acc(x, |buf| {
                for (o, &r) in idx.iter().enumerate() {
                    for (b, &v) in buf[r * c..(r + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]) {
                        *b += v;
                    }
                }
            })
        })
    }

    /// Stacks `[rows_i, cols]` inputs along the row axis.
    pub fn concat_rows(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let vals: Vec<Tensor<T>> = xs.iter().map(|&x| self.value(x)).collect();
        let c = vals[0].cols();
        let mut data = Vec::with_capacity(vals.iter().map(Tensor::len).sum());
        let mut offsets = Vec::with_capacity(xs.len());
        for v in &vals {
            assert_eq!(v.cols(), c, "concat_rows needs equal column counts");
            offsets.push(data.len());
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / c.max(1);
        let lens: Vec<usize> = vals.iter().map(Tensor::len).collect();
        let parents = xs.to_vec();
        self.op(Tensor::new(vec![rows, c], data), xs, move |g, s| {
            for ((&p, &off), &len) in parents.iter().zip(&offsets).zip(&lens) {
                s.add(p, &g[off..off + len]);
            }
        })
    }

    /// Joins `[rows, ca]` and `[rows, cb]` along the column axis.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (ca, cb) = (av.cols(), bv.cols());
        let rows = av.rows();
        assert_eq!(rows, bv.rows(), "concat_cols needs equal row counts");
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        self.op(Tensor::new(shape, data), &[a, b], move |g, s| {
            let w = ca + cb;
            s.acc(a, |buf| {
                for r in 0..rows {
                    for (b, &v) in buf[r * ca..(r + 1) * ca].iter_mut().zip(&g[r * w..r * w + ca]) {
                        *b += v;
                    }
                }
            });
            s.acc(b, |buf| {
                for r in 0..rows {
                    for (b, &v) in buf[r * cb..(r + 1) * cb].iter_mut().zip(&g[r * w + ca..(r + 1) * w]) {
                        *b += v;
                    }
                }
            });
        })
    }

    /// `out[i] = x[map[i]]`, or zero where `map[i]` is `None`.
    ///
    /// Covers padding, patch rearrangement and neighbourhood unfolding.
    pub fn remap(&self, x: Var, map: Arc<Vec<Option<u32>>>, shape: impl Into<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), map.len());
        let data = map.iter().map(|m| m.map_or(T::zero(), |i| xv.data()[i as usize])).collect();
        self.op(Tensor::new(shape, data), &[x], move |g, s| {
            s.acc(x, |buf| {
                for (&m, &v) in map.iter().zip(g) {
                    if let Some(i) = m {
                        buf[i as usize] += v;
                    }
                }
            })
        })
    }

    // ------------------------------------------------------------ elementwise

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add needs equal sizes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        self.op(Tensor::new(av.shape().to_vec(), data), &[a, b], move |g, s| {
            s.add(a, g);
            s.add(b, g);
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "sub needs equal sizes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        self.op(Tensor::new(av.shape().to_vec(), data), &[a, b], move |g, s| {
            s.add(a, g);
            s.acc(b, |buf| {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b -= v;
                }
            });
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "mul needs equal sizes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        self.op(Tensor::new(av.shape().to_vec(), data), &[a, b], move |g, s| {
            s.acc(a, |buf| {
                for ((b, &v), &y) in buf.iter_mut().zip(g).zip(bv.data()) {
                    *b += v * y;
                }
            });
            s.acc(b, |buf| {
                for ((b, &v), &x) in buf.iter_mut().zip(g).zip(av.data()) {
                    *b += v * x;
                }
            });
        })
    }

    pub fn scale(&self, x: Var, k: T) -> Var {
        let v = self.value(x).map(|e| e * k);
        self.op(v, &[x], move |g, s| {
            s.acc(x, |buf| {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v * k;
                }
            })
        })
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_bias(&self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = bv.len();
        assert_eq!(xv.cols(), c, "bias length must match the last axis");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (e, &b) in row.iter_mut().zip(bv.data()) {
                *e += b;
            }
        }
        self.op(Tensor::new(xv.shape().to_vec(), data), &[x, bias], move |g, s| {
            s.add(x, g);
            s.acc(bias, |buf| {
                for row in g.chunks(c) {
                    for (b, &v) in buf.iter_mut().zip(row) {
                        *b += v;
                    }
                }
            });
        })
    }

    /// `x` is `[groups, n, c]` (any leading layout with that many elements) and
    /// `y` is `[groups, c]`; row `y[g]` is added to every row of group `g`.
    pub fn add_group_rows(&self, x: Var, y: Var) -> Var {
        let (xv, yv) = (self.value(x), self.value(y));
        let c = yv.cols();
        let groups = yv.rows();
        assert_eq!(xv.len() % (groups * c), 0, "group broadcast does not divide input");
        let per = xv.len() / groups;
        let mut data = xv.data().to_vec();
        for (gi, chunk) in data.chunks_mut(per).enumerate() {
            let yr = &yv.data()[gi * c..(gi + 1) * c];
            for row in chunk.chunks_mut(c) {
                for (e, &b) in row.iter_mut().zip(yr) {
                    *e += b;
                }
            }
        }
        self.op(Tensor::new(xv.shape().to_vec(), data), &[x, y], move |g, s| {
            s.add(x, g);
            s.acc(y, |buf| {
                for (gi, chunk) in g.chunks(per).enumerate() {
                    let yr = &mut buf[gi * c..(gi + 1) * c];
                    for row in chunk.chunks(c) {
                        for (b, &v) in yr.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                }
            });
        })
    }

    /// Like [`Graph::add_group_rows`] but multiplies.
    pub fn mul_group_rows(&self, x: Var, y: Var) -> Var {
        let (xv, yv) = (self.value(x), self.value(y));
        let c = yv.cols();
        let groups = yv.rows();
        assert_eq!(xv.len() % (groups * c), 0, "group broadcast does not divide input");
        let per = xv.len() / groups;
        let mut data = xv.data().to_vec();
        for (gi, chunk) in data.chunks_mut(per).enumerate() {
            let yr = &yv.data()[gi * c..(gi + 1) * c];
            for row in chunk.chunks_mut(c) {
                for (e, &b) in row.iter_mut().zip(yr) {
                    *e *= b;
                }
            }
        }
        self.op(Tensor::new(xv.shape().to_vec(), data), &[x, y], move |g, s| {
            s.acc(x, |buf| {
                for (gi, (bc, gc)) in buf.chunks_mut(per).zip(g.chunks(per)).enumerate() {
                    let yr = &yv.data()[gi * c..(gi + 1) * c];
                    for (br, gr) in bc.chunks_mut(c).zip(gc.chunks(c)) {
                        for ((b, &gv), &w) in br.iter_mut().zip(gr).zip(yr) {
                            *b += gv * w;
                        }
                    }
                }
            });
            s.acc(y, |buf| {
                for (gi, (xc, gc)) in xv.data().chunks(per).zip(g.chunks(per)).enumerate() {
                    let yr = &mut buf[gi * c..(gi + 1) * c];
                    for (xr, gr) in xc.chunks(c).zip(gc.chunks(c)) {
                        for ((b, &gv), &xe) in yr.iter_mut().zip(gr).zip(xr) {
                            *b += gv * xe;
                        }
                    }
                }
            });
        })
    }

    pub fn silu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let sig: Vec<T> = xv.data().iter().map(|&e| T::one() / (T::one() + (-e).exp())).collect();
        let data = xv.data().iter().zip(&sig).map(|(&e, &s)| e * s).collect();
        self.op(Tensor::new(xv.shape().to_vec(), data), &[x], move |g, s| {
            s.acc(x, |buf| {
                for ((b, &v), (&e, &sg)) in buf.iter_mut().zip(g).zip(xv.data().iter().zip(&sig)) {
                    *b += v * sg * (T::one() + e * (T::one() - sg));
                }
            })
        })
    }

    // ---------------------------------------------------------------- linear

    /// `x` viewed as `[rows, k]` times `w` (`[k, n]`).
    pub fn matmul(&self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(wv.shape().len(), 2, "matmul weight must be 2-D");
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.cols(), k, "matmul inner dimensions differ: {:?} x {:?}", xv.shape(), wv.shape());
        let rows = xv.rows();
        let data = matmul_raw(xv.data(), wv.data(), rows, k, n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.op(Tensor::new(shape, data), &[x, w], move |g, s| {
            // dx = g · wᵀ
            s.acc(x, |buf| T::gemm(rows, n, k, T::one(), g, (n, 1), wv.data(), (1, n), T::one(), buf, (k, 1)));
            // dw = xᵀ · g
            s.acc(w, |buf| T::gemm(k, rows, n, T::one(), xv.data(), (1, k), g, (n, 1), T::one(), buf, (n, 1)));
        })
    }

    /// `x·w + b`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let rows = xv.rows();
        let eps = T::lit(eps);
        let cn = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.op(Tensor::new(xv.shape().to_vec(), out), &[x, gamma, beta], move |g, s| {
            s.acc(gamma, |buf| {
                for r in 0..rows {
                    for j in 0..c {
                        buf[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            });
            s.acc(beta, |buf| {
                for row in g.chunks(c) {
                    for (b, &v) in buf.iter_mut().zip(row) {
                        *b += v;
                    }
                }
            });
            s.acc(x, |buf| {
                let mut dh = vec![T::zero(); c];
                for r in 0..rows {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..c {
                        dh[j] = g[r * c + j] * gv.data()[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * xhat[r * c + j];
                    }
                    mean_dh /= cn;
                    mean_dh_h /= cn;
                    for j in 0..c {
                        buf[r * c + j] += rstd[r] * (dh[j] - mean_dh - xhat[r * c + j] * mean_dh_h);
                    }
                }
            });
        })
    }

    // ------------------------------------------------------------- attention

    /// Packed multi-head scaled dot-product attention.
    ///
    /// `q` is `[mq, heads * d]`, `k` and `v` are `[mk, heads * d]`. Each segment
    /// is an independent problem; query rows outside every segment are zero.
    /// Scores are scaled by `1/sqrt(d)` and softmax-normalized per query row.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<Segment>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hd = qv.cols();
        assert!(heads > 0 && hd % heads == 0, "width {hd} not divisible by {heads} heads");
        assert_eq!(kv.cols(), hd, "key width differs from query width");
        assert_eq!(vv.cols(), hd, "value width differs from query width");
        assert_eq!(kv.rows(), vv.rows(), "keys and values need equal row counts");
        let d = hd / heads;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let mut out = vec![T::zero(); qv.len()];
        // Softmax probabilities per (segment, head), kept for the reverse pass.
        let mut probs: Vec<Vec<T>> = Vec::with_capacity(segments.len() * heads);
        for seg in &segments {
            assert!(seg.q_start + seg.q_len <= qv.rows() && seg.kv_start + seg.kv_len <= kv.rows());
            assert!(seg.kv_len > 0 || seg.q_len == 0, "attention over an empty key set");
            for h in 0..heads {
                let mut p = vec![T::zero(); seg.q_len * seg.kv_len];
                if seg.q_len > 0 {
                    T::gemm(
                        seg.q_len,
                        d,
                        seg.kv_len,
                        scale,
                        &qv.data()[seg.q_start * hd + h * d..],
                        (hd, 1),
                        &kv.data()[seg.kv_start * hd + h * d..],
                        (1, hd),
                        T::zero(),
                        &mut p,
                        (seg.kv_len, 1),
                    );
                    softmax_rows(&mut p, seg.kv_len);
                    T::gemm(
                        seg.q_len,
                        seg.kv_len,
                        d,
                        T::one(),
                        &p,
                        (seg.kv_len, 1),
                        &vv.data()[seg.kv_start * hd + h * d..],
                        (hd, 1),
                        T::zero(),
                        &mut out[seg.q_start * hd + h * d..],
                        (hd, 1),
                    );
                }
                probs.push(p);
            }
        }
        self.op(Tensor::new(qv.shape().to_vec(), out), &[q, k, v], move |g, s| {
            let mut dq = vec![T::zero(); qv.len()];
            let mut dk = vec![T::zero(); kv.len()];
            let mut dv = vec![T::zero(); vv.len()];
            for (si, seg) in segments.iter().enumerate() {
                if seg.q_len == 0 {
                    continue;
                }
                for h in 0..heads {
                    let p = &probs[si * heads + h];
                    let (m, l) = (seg.q_len, seg.kv_len);
                    let go = &g[seg.q_start * hd + h * d..];
                    // dV += Pᵀ · dO
                    T::gemm(l, m, d, T::one(), p, (1, l), go, (hd, 1), T::one(), &mut dv[seg.kv_start * hd + h * d..], (hd, 1));
                    // dP = dO · Vᵀ
                    let mut ds = vec![T::zero(); m * l];
                    T::gemm(m, d, l, T::one(), go, (hd, 1), &vv.data()[seg.kv_start * hd + h * d..], (1, hd), T::zero(), &mut ds, (l, 1));
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                    for r in 0..m {
                        let row = &mut ds[r * l..(r + 1) * l];
                        let prow = &p[r * l..(r + 1) * l];
                        let dot: T = row.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (e, &pp) in row.iter_mut().zip(prow) {
                            *e = pp * (*e - dot);
                        }
                    }
                    // dQ += scale · dS · K ; dK += scale · dSᵀ · Q
                    T::gemm(m, l, d, scale, &ds, (l, 1), &kv.data()[seg.kv_start * hd + h * d..], (hd, 1), T::one(), &mut dq[seg.q_start * hd + h * d..], (hd, 1));
                    T::gemm(l, m, d, scale, &ds, (1, l), &qv.data()[seg.q_start * hd + h * d..], (hd, 1), T::one(), &mut dk[seg.kv_start * hd + h * d..], (hd, 1));
                }
            }
            s.add(q, &dq);
            s.add(k, &dk);
            s.add(v, &dv);
        })
    }

    // ---------------------------------------------------------------- losses

    /// Mean of squared differences over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "mse needs equal sizes");
        let n = T::from_usize(av.len()).unwrap();
        let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let loss = diff.iter().map(|&e| e * e).sum::<T>() / n;
        self.op(Tensor::new(vec![1], vec![loss]), &[a, b], move |g, s| {
            let k = g[0] * T::lit(2.0) / n;
            s.acc(a, |buf| {
                for (b, &e) in buf.iter_mut().zip(&diff) {
                    *b += k * e;
                }
            });
            s.acc(b, |buf| {
                for (b, &e) in buf.iter_mut().zip(&diff) {
                    *b -= k * e;
                }
            });
        })
    }

    /// `sum(x ⊙ r)` for a constant `r`; projects any output to a scalar.
    pub fn dot_const(&self, x: Var, r: Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), r.len());
        let val: T = xv.data().iter().zip(r.data()).map(|(&a, &b)| a * b).sum();
        self.op(Tensor::new(vec![1], vec![val]), &[x], move |g, s| {
            s.acc(x, |buf| {
                for (b, &w) in buf.iter_mut().zip(r.data()) {
                    *b += g[0] * w;
                }
            })
        })
    }
}

fn softmax_rows<T: Real>(p: &mut [T], width: usize) {
    for row in p.chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            sum += *e;
        }
        for e in row.iter_mut() {
            *e /= sum;
        }
    }
}
