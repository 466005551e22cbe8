//! A small tape-based reverse-mode differentiator over `f64` arrays.
//!
//! Every operation the restoration network needs (convolutions, channel
//! gating, cross-attention, pooling, L1 losses) records a closure on the
//! tape that maps the output gradient to the gradients of its parents.
//! Inference graphs skip the closures entirely.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&[Node], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got shape {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

fn mat<'a>(data: &'a [f64], rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

fn mat_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// im2col for a stride-1, zero-padded square kernel. Output is `[c*k*k, h*w]`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    // filled row by row without a zeroing pass; this is the hot loop of every 3x3 conv
    let mut cols = Vec::with_capacity(c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = ((-dx).max(0) as usize).min(w);
                let x1 = ((w as isize - dx.max(0)).max(0) as usize).clamp(x0, w);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        cols.resize(cols.len() + w, 0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    cols.resize(cols.len() + x0, 0.0);
                    let (s0, s1) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
                    cols.extend_from_slice(&src_row[s0..s1]);
                    cols.resize(cols.len() + (w - x1), 0.0);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, k: usize) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = (w as isize - dxo.max(0)).max(0) as usize;
                    for xx in x0..x1.min(w) {
                        plane[sy as usize * w + (xx as isize + dxo) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph for inference only; [`Graph::backward`] yields no gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar: shape {:?}", t.shape());
        t.iter().next().copied().unwrap_or(0.0)
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        let backward = if self.track { backward } else { None };
        self.nodes.push(Node {
            value,
            parents: parents.into_iter().map(|p| p.0).collect(),
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_grads = back(&self.nodes, &g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, vec![a, b], Some(Box::new(|_, g| vec![g.clone(), g.clone()])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (a.0, b.0);
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |n, g| {
                vec![g * &n[bi].value, g * &n[ai].value]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, vec![a], Some(Box::new(move |_, g| vec![g * s])))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ai = a.0;
        let value = self.value(a).mapv(gelu_scalar);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |n, g| {
                let mut d = n[ai].value.mapv(gelu_grad_scalar);
                d *= g;
                vec![d]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_scalar);
        let out = self.nodes.len();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |n, g| {
                let s = &n[out].value;
                let mut d = s.mapv(|v| v * (1.0 - v));
                d *= g;
                vec![d]
            })),
        )
    }

    /// Stride-1 convolution with zero "same" padding; `w` is `[out, in, k, k]`, `b` is `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let [bn, c, h, wd] = shape4(self.value(x));
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv input channels {c} vs weight {ws:?}");
        assert_eq!(ws[3], k, "square kernels only");
        assert_eq!(self.value(b).shape(), &[o], "conv bias shape");
        let hw = h * wd;
        let ckk = c * k * k;
        let xs = contiguous(self.value(x));
        let wdata = contiguous(self.value(w));
        let bias = contiguous(self.value(b));
        let wm = mat(&wdata, o, ckk);
        let mut out = Vec::with_capacity(bn * o * hw);
        for _ in 0..bn {
            for &bv in bias.iter() {
                out.resize(out.len() + hw, bv);
            }
        }
        let mut saved_cols: Vec<Vec<f64>> = Vec::new();
        for bi in 0..bn {
            let xb = &xs[bi * c * hw..(bi + 1) * c * hw];
            let cols = if k == 1 { xb.to_vec() } else { im2col(xb, c, h, wd, k) };
            let ob = &mut out[bi * o * hw..(bi + 1) * o * hw];
            general_mat_mul(1.0, &wm, &mat(&cols, ckk, hw), 1.0, &mut mat_mut(ob, o, hw));
            if self.track {
                saved_cols.push(cols);
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&[bn, o, h, wd]), out).expect("conv output");
        if !self.track {
            return self.push(value, vec![x, w, b], None);
        }
        let wdata = wdata.into_owned();
        let back: BackwardFn = Box::new(move |_, g| {
            let gs = contiguous(g);
            let wm = mat(&wdata, o, ckk);
            let mut dw = Array2::<f64>::zeros((o, ckk));
            let mut db = vec![0.0; o];
            let mut dx = vec![0.0; bn * c * hw];
            let mut dcols = vec![0.0; ckk * hw];
            for bi in 0..bn {
                let gb = &gs[bi * o * hw..(bi + 1) * o * hw];
                let gm = mat(gb, o, hw);
                let cols = &saved_cols[bi];
                general_mat_mul(1.0, &gm, &mat(cols, ckk, hw).t(), 1.0, &mut dw);
                for (oi, d) in db.iter_mut().enumerate() {
                    *d += gb[oi * hw..(oi + 1) * hw].iter().sum::<f64>();
                }
                let dxb = &mut dx[bi * c * hw..(bi + 1) * c * hw];
                if k == 1 {
                    general_mat_mul(1.0, &wm.t(), &gm, 0.0, &mut mat_mut(dxb, ckk, hw));
                } else {
                    general_mat_mul(1.0, &wm.t(), &gm, 0.0, &mut mat_mut(&mut dcols, ckk, hw));
                    col2im_add(&dcols, dxb, c, h, wd, k);
                }
            }
            vec![
                Tensor::from_shape_vec(IxDyn(&[bn, c, h, wd]), dx).expect("dx"),
                dw.into_shape_with_order(IxDyn(&[o, c, k, k])).expect("dw"),
                Tensor::from_shape_vec(IxDyn(&[o]), db).expect("db"),
            ]
        });
        self.push(value, vec![x, w, b], Some(back))
    }

    /// Space-to-depth: `[b, c, h, w]` to `[b, c*r*r, h/r, w/r]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let [bn, c, h, w] = shape4(self.value(x));
        assert!(h % r == 0 && w % r == 0, "spatial dims {h}x{w} not divisible by {r}");
        let value = unshuffle(self.value(x), r);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |_, g| {
                let _ = (bn, c, h, w);
                vec![shuffle(g, r)]
            })),
        )
    }

    /// Depth-to-space: `[b, c*r*r, h, w]` to `[b, c, h*r, w*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let [_, c, _, _] = shape4(self.value(x));
        assert!(c % (r * r) == 0, "channels {c} not divisible by {}", r * r);
        let value = shuffle(self.value(x), r);
        self.push(value, vec![x], Some(Box::new(move |_, g| vec![unshuffle(g, r)])))
    }

    /// Multiply `[b, c, h, w]` features by a per-channel `[b, c]` gate.
    pub fn mul_channels(&mut self, x: Var, m: Var) -> Var {
        let [bn, c, h, w] = shape4(self.value(x));
        assert_eq!(self.value(m).shape(), &[bn, c], "channel gate shape");
        let (xi, mi) = (x.0, m.0);
        let mut value = self.value(x).to_owned();
        {
            let mv = self.value(m);
            for bi in 0..bn {
                for ci in 0..c {
                    let s = mv[[bi, ci]];
                    value
                        .slice_mut(ndarray::s![bi, ci, .., ..])
                        .mapv_inplace(|v| v * s);
                }
            }
        }
        self.push(
            value,
            vec![x, m],
            Some(Box::new(move |n, g| {
                let xv = &n[xi].value;
                let mv = &n[mi].value;
                let mut dx = g.to_owned();
                let mut dm = Tensor::zeros(IxDyn(&[bn, c]));
                for bi in 0..bn {
                    for ci in 0..c {
                        let s = mv[[bi, ci]];
                        dx.slice_mut(ndarray::s![bi, ci, .., ..])
                            .mapv_inplace(|v| v * s);
                        let gs = g.slice(ndarray::s![bi, ci, .., ..]);
                        let xs = xv.slice(ndarray::s![bi, ci, .., ..]);
                        dm[[bi, ci]] = gs.iter().zip(xs.iter()).map(|(a, b)| a * b).sum();
                    }
                }
                let _ = (h, w);
                vec![dx, dm]
            })),
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let [bn, ca, h, w] = shape4(self.value(a));
        let [bb, cb, hb, wb] = shape4(self.value(b));
        assert_eq!((bn, h, w), (bb, hb, wb), "concat shape mismatch");
        let value = ndarray::concatenate(ndarray::Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |_, g| {
                vec![
                    g.slice(ndarray::s![.., 0..ca, .., ..]).to_owned().into_dyn(),
                    g.slice(ndarray::s![.., ca..ca + cb, .., ..]).to_owned().into_dyn(),
                ]
            })),
        )
    }

    /// Global average pooling: `[b, c, h, w]` to `[b, c]`.
    pub fn gap(&mut self, x: Var) -> Var {
        let [bn, c, h, w] = shape4(self.value(x));
        let n = (h * w) as f64;
        let value = self
            .value(x)
            .sum_axis(ndarray::Axis(3))
            .sum_axis(ndarray::Axis(2))
            .mapv(|v| v / n);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |_, g| {
                let mut dx = Tensor::zeros(IxDyn(&[bn, c, h, w]));
                for bi in 0..bn {
                    for ci in 0..c {
                        let v = g[[bi, ci]] / n;
                        dx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(v);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Adaptive average pooling to at most `s x s` bins (fewer if the map is smaller).
    pub fn adaptive_avg_pool(&mut self, x: Var, s: usize) -> Var {
        let [bn, c, h, w] = shape4(self.value(x));
        let (sh, sw) = (s.min(h).max(1), s.min(w).max(1));
        let bins_y = adaptive_bins(h, sh);
        let bins_x = adaptive_bins(w, sw);
        let xv = self.value(x);
        let mut value = Tensor::zeros(IxDyn(&[bn, c, sh, sw]));
        for bi in 0..bn {
            for ci in 0..c {
                for (oy, &(y0, y1)) in bins_y.iter().enumerate() {
                    for (ox, &(x0, x1)) in bins_x.iter().enumerate() {
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                acc += xv[[bi, ci, y, xx]];
                            }
                        }
                        value[[bi, ci, oy, ox]] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            }
        }
        self.push(
            value,
            vec![x],
            Some(Box::new(move |_, g| {
                let mut dx = Tensor::zeros(IxDyn(&[bn, c, h, w]));
                for bi in 0..bn {
                    for ci in 0..c {
                        for (oy, &(y0, y1)) in bins_y.iter().enumerate() {
                            for (ox, &(x0, x1)) in bins_x.iter().enumerate() {
                                let v = g[[bi, ci, oy, ox]] / ((y1 - y0) * (x1 - x0)) as f64;
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        dx[[bi, ci, y, xx]] += v;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Affine map over the last axis: `[.., in]` with `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be rank 2");
        let (o, i) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("rank >= 1"), i, "linear input dim {xs:?} vs weight {ws:?}");
        assert_eq!(self.value(b).shape(), &[o], "linear bias shape");
        let rows = xs.iter().product::<usize>() / i;
        let xdata = contiguous(self.value(x)).into_owned();
        let wdata = contiguous(self.value(w)).into_owned();
        let mut out = Array2::<f64>::zeros((rows, o));
        for mut r in out.rows_mut() {
            r.assign(&self.value(b).view().into_dimensionality::<ndarray::Ix1>().expect("bias"));
        }
        general_mat_mul(1.0, &mat(&xdata, rows, i), &mat(&wdata, o, i).t(), 1.0, &mut out);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("rank >= 1") = o;
        let value = out.into_shape_with_order(IxDyn(&out_shape)).expect("linear output");
        self.push(
            value,
            vec![x, w, b],
            Some(Box::new(move |_, g| {
                let gs = contiguous(g);
                let gm = mat(&gs, rows, o);
                let mut dx = Array2::<f64>::zeros((rows, i));
                general_mat_mul(1.0, &gm, &mat(&wdata, o, i), 0.0, &mut dx);
                let mut dw = Array2::<f64>::zeros((o, i));
                general_mat_mul(1.0, &gm.t(), &mat(&xdata, rows, i), 0.0, &mut dw);
                let db = gm.sum_axis(ndarray::Axis(0));
                vec![
                    dx.into_shape_with_order(IxDyn(&xs)).expect("dx"),
                    dw.into_dyn(),
                    db.into_dyn(),
                ]
            })),
        )
    }

    /// `[b, c, h, w]` to token layout `[b, h*w, c]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let [bn, c, h, w] = shape4(self.value(x));
        let value = self
            .value(x)
            .view()
            .into_shape_with_order(IxDyn(&[bn, c, h * w]))
            .expect("token view")
            .permuted_axes(IxDyn(&[0, 2, 1]))
            .as_standard_layout()
            .into_owned();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |_, g| {
                let d = g
                    .view()
                    .permuted_axes(IxDyn(&[0, 2, 1]))
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&[bn, c, h, w]))
                    .expect("token grad");
                vec![d]
            })),
        )
    }

    /// Token layout `[b, h*w, c]` back to `[b, c, h, w]`.
    pub fn from_tokens(&mut self, t: Var, h: usize, w: usize) -> Var {
        let s = self.value(t).shape().to_vec();
        assert_eq!(s.len(), 3, "tokens must be rank 3");
        let (bn, n, c) = (s[0], s[1], s[2]);
        assert_eq!(n, h * w, "token count {n} vs {h}x{w}");
        let value = self
            .value(t)
            .view()
            .permuted_axes(IxDyn(&[0, 2, 1]))
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[bn, c, h, w]))
            .expect("from tokens");
        self.push(
            value,
            vec![t],
            Some(Box::new(move |_, g| {
                let d = g
                    .view()
                    .into_shape_with_order(IxDyn(&[bn, c, n]))
                    .expect("grad view")
                    .permuted_axes(IxDyn(&[0, 2, 1]))
                    .as_standard_layout()
                    .into_owned();
                vec![d]
            })),
        )
    }

    /// Multi-head scaled dot-product attention; `q: [b, nq, dim]`, `k, v: [b, nk, dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let qs = self.value(q).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        assert_eq!(qs.len(), 3, "queries must be rank 3");
        assert_eq!(ks, self.value(v).shape(), "key/value shape mismatch");
        let (bn, nq, dim) = (qs[0], qs[1], qs[2]);
        let nk = ks[1];
        assert_eq!((ks[0], ks[2]), (bn, dim), "query/key shape mismatch");
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qi, ki, vi) = (q.0, k.0, v.0);
        let qv = contiguous(self.value(q));
        let kv = contiguous(self.value(k));
        let vv = contiguous(self.value(v));
        let mut out = vec![0.0; bn * nq * dim];
        // attention weights, [b, heads, nq, nk]
        let mut probs = vec![0.0; bn * heads * nq * nk];
        for bi in 0..bn {
            for hd in 0..heads {
                let off = hd * dh;
                for a in 0..nq {
                    let qrow = &qv[(bi * nq + a) * dim + off..][..dh];
                    let row = &mut probs[((bi * heads + hd) * nq + a) * nk..][..nk];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let krow = &kv[(bi * nk + j) * dim + off..][..dh];
                        let s: f64 = qrow.iter().zip(krow).map(|(x, y)| x * y).sum();
                        *r = s * scale;
                        mx = mx.max(*r);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    let orow = &mut out[(bi * nq + a) * dim + off..][..dh];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r /= z;
                        let vrow = &vv[(bi * nk + j) * dim + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += *r * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[bn, nq, dim]), out).expect("attention output");
        self.push(
            out,
            vec![q, k, v],
            Some(Box::new(move |n, g| {
                let qv = contiguous(&n[qi].value);
                let kv = contiguous(&n[ki].value);
                let vv = contiguous(&n[vi].value);
                let gs = contiguous(g);
                let mut dq = vec![0.0; bn * nq * dim];
                let mut dk = vec![0.0; bn * nk * dim];
                let mut dv = vec![0.0; bn * nk * dim];
                let mut dp = vec![0.0; nk];
                for bi in 0..bn {
                    for hd in 0..heads {
                        let off = hd * dh;
                        for a in 0..nq {
                            let p = &probs[((bi * heads + hd) * nq + a) * nk..][..nk];
                            let qo = (bi * nq + a) * dim + off;
                            let go = &gs[qo..][..dh];
                            for j in 0..nk {
                                let ko = (bi * nk + j) * dim + off;
                                let vrow = &vv[ko..][..dh];
                                dp[j] = go.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                for (d, &x) in dv[ko..][..dh].iter_mut().zip(go) {
                                    *d += p[j] * x;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..nk {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ko = (bi * nk + j) * dim + off;
                                for e in 0..dh {
                                    dq[qo + e] += ds * kv[ko + e];
                                    dk[ko + e] += ds * qv[qo + e];
                                }
                            }
                        }
                    }
                }
                let dq = Tensor::from_shape_vec(IxDyn(&[bn, nq, dim]), dq).expect("dq");
                let dk = Tensor::from_shape_vec(IxDyn(&[bn, nk, dim]), dk).expect("dk");
                let dv = Tensor::from_shape_vec(IxDyn(&[bn, nk, dim]), dv).expect("dv");
                vec![dq, dk, dv]
            })),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.value(x).raw_dim();
        let value = Tensor::from_elem(IxDyn(&[]), self.value(x).sum());
        self.push(
            value,
            vec![x],
            Some(Box::new(move |_, g| {
                vec![Tensor::from_elem(shape.clone(), g.iter().next().copied().unwrap_or(0.0))]
            })),
        )
    }

    /// Mean absolute difference, returned as a rank-0 tensor.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "l1 shape mismatch");
        let (ai, bi) = (a.0, b.0);
        let n = self.value(a).len().max(1) as f64;
        let total: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let value = Tensor::from_elem(IxDyn(&[]), total / n);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |nodes, g| {
                let gv = g.iter().next().copied().unwrap_or(0.0) / n;
                let mut da = &nodes[ai].value - &nodes[bi].value;
                da.mapv_inplace(|d| {
                    if d > 0.0 {
                        gv
                    } else if d < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                let db = da.mapv(|v| -v);
                vec![da, db]
            })),
        )
    }
}

fn adaptive_bins(n: usize, s: usize) -> Vec<(usize, usize)> {
    (0..s)
        .map(|i| {
            let start = (i * n) / s;
            let end = ((i + 1) * n).div_ceil(s);
            (start, end)
        })
        .collect()
}

fn unshuffle(x: &Tensor, r: usize) -> Tensor {
    let [bn, c, h, w] = shape4(x);
    let (oh, ow) = (h / r, w / r);
    let xs = contiguous(x);
    let mut out = vec![0.0; xs.len()];
    for bi in 0..bn {
        for ci in 0..c {
            let src = &xs[(bi * c + ci) * h * w..][..h * w];
            for dy in 0..r {
                for dx in 0..r {
                    let oc = (ci * r + dy) * r + dx;
                    let dst = &mut out[(bi * c * r * r + oc) * oh * ow..][..oh * ow];
                    for y in 0..oh {
                        let srow = &src[(y * r + dy) * w..][..w];
                        for (xx, d) in dst[y * ow..][..ow].iter_mut().enumerate() {
                            *d = srow[xx * r + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[bn, c * r * r, oh, ow]), out).expect("unshuffle")
}

fn shuffle(x: &Tensor, r: usize) -> Tensor {
    let [bn, cr, h, w] = shape4(x);
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xs = contiguous(x);
    let mut out = vec![0.0; xs.len()];
    for bi in 0..bn {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * oh * ow..][..oh * ow];
            for dy in 0..r {
                for dx in 0..r {
                    let ic = (ci * r + dy) * r + dx;
                    let src = &xs[(bi * cr + ic) * h * w..][..h * w];
                    for y in 0..h {
                        let drow = &mut dst[(y * r + dy) * ow..][..ow];
                        for (xx, &v) in src[y * w..][..w].iter().enumerate() {
                            drow[xx * r + dx] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[bn, c, oh, ow]), out).expect("shuffle")
}
