//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] records one forward computation; [`Graph::backward`] replays
//! it in reverse, accumulating gradients for every node. The op set is
//! exactly what the models here need: 1-D convolutions and their transpose,
//! batch norm, dense layers, LeakyReLU, softmax cross-entropy, and the
//! cosine/softmax/matmul chain used for memory addressing.
//!
//! Convolution uses the cross-correlation convention. All math is `f64`.

use crate::nn::tensor::Tensor;
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;
const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    backward: Option<BackFn>,
}

/// Gradients keyed by node, produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node. Nodes the loss does not
    /// depend on report a zero gradient.
    pub fn get(&self, id: NodeId, shape_of: &Tensor) -> Tensor {
        match &self.by_node[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape_of.shape()),
        }
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }
}

/// Records one forward pass and differentiates it once.
pub struct Graph {
    nodes: Vec<Node>,
    freed: bool,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            freed: false,
            check_finite: false,
        }
    }

    /// Enable NaN/Inf detection: every op output is scanned and the first
    /// non-finite value aborts the forward pass.
    pub fn with_finite_checks() -> Self {
        Self {
            nodes: Vec::new(),
            freed: false,
            check_finite: true,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, backward: Option<BackFn>, op: &str) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf node: an input or parameter value. Gradients accumulate here.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss node. Consumes the tape: a second
    /// call on the same graph is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.freed {
            return Err(Error::GraphFreed);
        }
        self.freed = true;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward root must be a scalar node".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            {
                let node = &self.nodes[id];
                if let Some(back) = &node.backward {
                    let parent_values: Vec<&Tensor> =
                        node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                    let contribs = back(&grad_out, &parent_values, &node.value);
                    debug_assert_eq!(contribs.len(), node.parents.len());
                    let parents = node.parents.clone();
                    for (parent, contrib) in parents.into_iter().zip(contribs) {
                        match &mut grads[parent.0] {
                            Some(acc) => acc.add_assign(&contrib),
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
            }
            grads[id] = Some(grad_out);
        }
        Ok(Gradients { by_node: grads })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
            "add",
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("sub: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.map(|v| -v)])),
            "sub",
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, parents, _| {
                let (a, b) = (parents[0], parents[1]);
                let ga = Tensor::new(
                    a.shape().to_vec(),
                    g.data().iter().zip(b.data()).map(|(g, b)| g * b).collect(),
                )
                .expect("mul backward shape");
                let gb = Tensor::new(
                    b.shape().to_vec(),
                    g.data().iter().zip(a.data()).map(|(g, a)| g * a).collect(),
                )
                .expect("mul backward shape");
                vec![ga, gb]
            })),
            "mul",
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = self.value(a).map(|v| v * c);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g.map(|v| v * c)])),
            "scale",
        )
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::abs);
        self.push(
            out,
            vec![a],
            Some(Box::new(|g, parents, _| {
                let x = parents[0];
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Tensor::new(x.shape().to_vec(), data).expect("abs backward shape")]
            })),
            "abs",
        )
    }

    /// Natural log with the argument clamped at `1e-12`; below the floor the
    /// gradient is zero, so a saturated discriminator cannot explode.
    pub fn ln_clamped(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| v.max(LOG_FLOOR).ln());
        self.push(
            out,
            vec![a],
            Some(Box::new(|g, parents, _| {
                let x = parents[0];
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x > LOG_FLOOR { g / x } else { 0.0 })
                    .collect();
                vec![Tensor::new(x.shape().to_vec(), data).expect("ln backward shape")]
            })),
            "ln_clamped",
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            out,
            vec![a],
            Some(Box::new(|g, _, out| {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                vec![Tensor::new(out.shape().to_vec(), data).expect("sigmoid backward shape")]
            })),
            "sigmoid",
        )
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Config(format!("leaky_relu slope {slope} outside (0,1)")));
        }
        let out = self.value(a).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, parents, _| {
                let x = parents[0];
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x >= 0.0 { *g } else { slope * g })
                    .collect();
                vec![Tensor::new(x.shape().to_vec(), data).expect("leaky_relu backward shape")]
            })),
            "leaky_relu",
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).sum();
        self.push(
            Tensor::scalar(total),
            vec![a],
            Some(Box::new(|g, parents, _| {
                let x = parents[0];
                vec![Tensor::full(x.shape(), g.item())]
            })),
            "sum_all",
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).reshaped(shape)?;
        let back_shape = self.value(a).shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![g.reshaped(&back_shape).expect("reshape backward shape")]
            })),
            "reshape",
        )
    }

    /// `(B, C, L)` to `(B, C*L)`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("flatten expects rank 3, got {s:?}")));
        }
        let (b, rest) = (s[0], s[1] * s[2]);
        self.reshape(a, &[b, rest])
    }

    // ---- linear algebra ----

    /// Affine map: `x (B,Fi) · wᵀ (Fi,Fo) + b` with `w` stored `(Fo,Fi)`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || tb.shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "dense: x {:?}, w {:?}, b {:?}",
                xs,
                ws,
                tb.shape()
            )));
        }
        let (bsz, fi, fo) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[bsz, fo]);
        {
            let o = out.data_mut();
            for bi in 0..bsz {
                for oi in 0..fo {
                    let mut acc = tb.data()[oi];
                    let xrow = &tx.data()[bi * fi..(bi + 1) * fi];
                    let wrow = &tw.data()[oi * fi..(oi + 1) * fi];
                    for i in 0..fi {
                        acc += wrow[i] * xrow[i];
                    }
                    o[bi * fo + oi] = acc;
                }
            }
        }
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |g, parents, _| {
                let (x, w) = (parents[0], parents[1]);
                let mut gx = Tensor::zeros(&[bsz, fi]);
                let mut gw = Tensor::zeros(&[fo, fi]);
                let mut gb = Tensor::zeros(&[fo]);
                for bi in 0..bsz {
                    for oi in 0..fo {
                        let go = g.data()[bi * fo + oi];
                        if go == 0.0 {
                            continue;
                        }
                        gb.data_mut()[oi] += go;
                        let wrow = &w.data()[oi * fi..(oi + 1) * fi];
                        let xrow = &x.data()[bi * fi..(bi + 1) * fi];
                        let gxrow = &mut gx.data_mut()[bi * fi..(bi + 1) * fi];
                        for i in 0..fi {
                            gxrow[i] += go * wrow[i];
                        }
                        let gwrow = &mut gw.data_mut()[oi * fi..(oi + 1) * fi];
                        for i in 0..fi {
                            gwrow[i] += go * xrow[i];
                        }
                    }
                }
                vec![gx, gw, gb]
            })),
            "dense",
        )
    }

    /// `a (B,K) · m (K,D)`, the memory-retrieval product.
    pub fn matmul(&mut self, a: NodeId, m: NodeId) -> Result<NodeId> {
        let (ta, tm) = (self.value(a), self.value(m));
        let (sa, sm) = (ta.shape(), tm.shape());
        if sa.len() != 2 || sm.len() != 2 || sa[1] != sm[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} x {sm:?}")));
        }
        let (bsz, k, d) = (sa[0], sa[1], sm[1]);
        let mut out = Tensor::zeros(&[bsz, d]);
        for bi in 0..bsz {
            for ki in 0..k {
                let av = ta.data()[bi * k + ki];
                if av == 0.0 {
                    continue;
                }
                let mrow = &tm.data()[ki * d..(ki + 1) * d];
                let orow = &mut out.data_mut()[bi * d..(bi + 1) * d];
                for di in 0..d {
                    orow[di] += av * mrow[di];
                }
            }
        }
        self.push(
            out,
            vec![a, m],
            Some(Box::new(move |g, parents, _| {
                let (a, m) = (parents[0], parents[1]);
                let mut ga = Tensor::zeros(&[bsz, k]);
                let mut gm = Tensor::zeros(&[k, d]);
                for bi in 0..bsz {
                    let grow = &g.data()[bi * d..(bi + 1) * d];
                    for ki in 0..k {
                        let mrow = &m.data()[ki * d..(ki + 1) * d];
                        let mut acc = 0.0;
                        for di in 0..d {
                            acc += grow[di] * mrow[di];
                        }
                        ga.data_mut()[bi * k + ki] = acc;
                        let av = a.data()[bi * k + ki];
                        let gmrow = &mut gm.data_mut()[ki * d..(ki + 1) * d];
                        for di in 0..d {
                            gmrow[di] += av * grow[di];
                        }
                    }
                }
                vec![ga, gm]
            })),
            "matmul",
        )
    }

    /// Row-wise softmax over `(B, K)`.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("softmax_rows expects rank 2, got {s:?}")));
        }
        let (bsz, k) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[bsz, k]);
        for bi in 0..bsz {
            let row = &ta.data()[bi * k..(bi + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out.data_mut()[bi * k..(bi + 1) * k];
            let mut z = 0.0;
            for i in 0..k {
                let e = (row[i] - max).exp();
                orow[i] = e;
                z += e;
            }
            for v in orow.iter_mut() {
                *v /= z;
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, out| {
                let mut gx = Tensor::zeros(&[bsz, k]);
                for bi in 0..bsz {
                    let p = &out.data()[bi * k..(bi + 1) * k];
                    let grow = &g.data()[bi * k..(bi + 1) * k];
                    let dot: f64 = p.iter().zip(grow).map(|(p, g)| p * g).sum();
                    let gxrow = &mut gx.data_mut()[bi * k..(bi + 1) * k];
                    for i in 0..k {
                        gxrow[i] = p[i] * (grow[i] - dot);
                    }
                }
                vec![gx]
            })),
            "softmax_rows",
        )
    }

    /// Cosine similarity of every latent row against every memory row:
    /// `z (B,D), m (K,D)` to `(B,K)`. Rows with near-zero norm yield 0 with
    /// zero gradient (the zero-latent guard).
    pub fn cosine_rows(&mut self, z: NodeId, m: NodeId) -> Result<NodeId> {
        let (tz, tm) = (self.value(z), self.value(m));
        let (sz, sm) = (tz.shape(), tm.shape());
        if sz.len() != 2 || sm.len() != 2 || sz[1] != sm[1] {
            return Err(Error::Shape(format!("cosine_rows: {sz:?} vs {sm:?}")));
        }
        let (bsz, d, k) = (sz[0], sz[1], sm[0]);
        let eps = 1e-12;
        let znorm: Vec<f64> = (0..bsz)
            .map(|b| tz.data()[b * d..(b + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mnorm: Vec<f64> = (0..k)
            .map(|i| tm.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out = Tensor::zeros(&[bsz, k]);
        for bi in 0..bsz {
            if znorm[bi] < eps {
                continue;
            }
            let zrow = &tz.data()[bi * d..(bi + 1) * d];
            for ki in 0..k {
                if mnorm[ki] < eps {
                    continue;
                }
                let mrow = &tm.data()[ki * d..(ki + 1) * d];
                let mut dot = 0.0;
                for i in 0..d {
                    dot += zrow[i] * mrow[i];
                }
                out.data_mut()[bi * k + ki] = dot / (znorm[bi] * mnorm[ki]);
            }
        }
        self.push(
            out,
            vec![z, m],
            Some(Box::new(move |g, parents, out| {
                let (z, m) = (parents[0], parents[1]);
                let mut gz = Tensor::zeros(&[bsz, d]);
                let mut gm = Tensor::zeros(&[k, d]);
                let znorm: Vec<f64> = (0..bsz)
                    .map(|b| z.data()[b * d..(b + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                let mnorm: Vec<f64> = (0..k)
                    .map(|i| m.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                for bi in 0..bsz {
                    if znorm[bi] < eps {
                        continue;
                    }
                    let zrow = &z.data()[bi * d..(bi + 1) * d];
                    for ki in 0..k {
                        if mnorm[ki] < eps {
                            continue;
                        }
                        let go = g.data()[bi * k + ki];
                        if go == 0.0 {
                            continue;
                        }
                        let c = out.data()[bi * k + ki];
                        let mrow = &m.data()[ki * d..(ki + 1) * d];
                        let inv = 1.0 / (znorm[bi] * mnorm[ki]);
                        let gzrow = &mut gz.data_mut()[bi * d..(bi + 1) * d];
                        for i in 0..d {
                            gzrow[i] += go * (mrow[i] * inv - c * zrow[i] / (znorm[bi] * znorm[bi]));
                        }
                        let gmrow = &mut gm.data_mut()[ki * d..(ki + 1) * d];
                        for i in 0..d {
                            gmrow[i] += go * (zrow[i] * inv - c * mrow[i] / (mnorm[ki] * mnorm[ki]));
                        }
                    }
                }
                vec![gz, gm]
            })),
            "cosine_rows",
        )
    }

    // ---- convolutions ----

    /// 1-D cross-correlation: `x (B,Ci,L) * w (Co,Ci,K) + b` with the output
    /// length `⌊(L + 2p − K)/s⌋ + 1`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || tb.shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "conv1d: x {:?}, w {:?}, b {:?}",
                xs,
                ws,
                tb.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        let (bsz, ci, l) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        let num = l as i64 + 2 * padding as i64 - k as i64;
        if num < 0 {
            return Err(Error::Shape(format!(
                "conv1d output length would be non-positive (L={l}, k={k}, pad={padding})"
            )));
        }
        let lo = (num / stride as i64) as usize + 1;
        let mut out = Tensor::zeros(&[bsz, co, lo]);
        conv1d_forward(tx.data(), tw.data(), tb.data(), out.data_mut(), bsz, ci, l, co, k, lo, stride, padding);
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |g, parents, _| {
                let (x, w) = (parents[0], parents[1]);
                let mut gx = Tensor::zeros(&[bsz, ci, l]);
                let mut gw = Tensor::zeros(&[co, ci, k]);
                let mut gb = Tensor::zeros(&[co]);
                conv1d_backward(
                    x.data(),
                    w.data(),
                    g.data(),
                    gx.data_mut(),
                    gw.data_mut(),
                    gb.data_mut(),
                    bsz,
                    ci,
                    l,
                    co,
                    k,
                    lo,
                    stride,
                    padding,
                );
                vec![gx, gw, gb]
            })),
            "conv1d",
        )
    }

    /// Transposed 1-D convolution, the adjoint of [`Graph::conv1d`] under a
    /// shared weight tensor: `x (B,Ci,L) * w (Ci,Co,K) + b`, output length
    /// `(L − 1)·s − 2p + K`.
    pub fn tconv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] || tb.shape() != [ws[1]] {
            return Err(Error::Shape(format!(
                "tconv1d: x {:?}, w {:?}, b {:?}",
                xs,
                ws,
                tb.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("tconv1d stride must be positive".into()));
        }
        let (bsz, ci, l) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[1], ws[2]);
        let lo_signed = (l as i64 - 1) * stride as i64 - 2 * padding as i64 + k as i64;
        if lo_signed <= 0 {
            return Err(Error::Shape(format!(
                "tconv1d output length would be non-positive (L={l}, k={k}, stride={stride}, pad={padding})"
            )));
        }
        let lo = lo_signed as usize;
        let mut out = Tensor::zeros(&[bsz, co, lo]);
        tconv1d_forward(tx.data(), tw.data(), tb.data(), out.data_mut(), bsz, ci, l, co, k, lo, stride, padding);
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |g, parents, _| {
                let (x, w) = (parents[0], parents[1]);
                let mut gx = Tensor::zeros(&[bsz, ci, l]);
                let mut gw = Tensor::zeros(&[ci, co, k]);
                let mut gb = Tensor::zeros(&[co]);
                tconv1d_backward(
                    x.data(),
                    w.data(),
                    g.data(),
                    gx.data_mut(),
                    gw.data_mut(),
                    gb.data_mut(),
                    bsz,
                    ci,
                    l,
                    co,
                    k,
                    lo,
                    stride,
                    padding,
                );
                vec![gx, gw, gb]
            })),
            "tconv1d",
        )
    }

    // ---- batch norm ----

    /// Train-mode batch norm over `(B, C, L)`: per-channel statistics across
    /// batch and length, biased variance, epsilon `1e-5`.
    pub fn batchnorm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = tx.shape();
        if s.len() != 3 || tg.shape() != [s[1]] || tb.shape() != [s[1]] {
            return Err(Error::Shape(format!(
                "batchnorm: x {:?}, gamma {:?}, beta {:?}",
                s,
                tg.shape(),
                tb.shape()
            )));
        }
        let (bsz, c, l) = (s[0], s[1], s[2]);
        let (mean, var) = channel_stats(tx.data(), bsz, c, l);
        let mut out = Tensor::zeros(&[bsz, c, l]);
        for bi in 0..bsz {
            for cc in 0..c {
                let istd = 1.0 / (var[cc] + BN_EPS).sqrt();
                let (ga, be) = (tg.data()[cc], tb.data()[cc]);
                let base = (bi * c + cc) * l;
                for li in 0..l {
                    out.data_mut()[base + li] = (tx.data()[base + li] - mean[cc]) * istd * ga + be;
                }
            }
        }
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g, parents, _| {
                let (x, gamma) = (parents[0], parents[1]);
                let (mean, var) = channel_stats(x.data(), bsz, c, l);
                let n = (bsz * l) as f64;
                let mut gx = Tensor::zeros(&[bsz, c, l]);
                let mut gg = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for cc in 0..c {
                    let istd = 1.0 / (var[cc] + BN_EPS).sqrt();
                    let ga = gamma.data()[cc];
                    // channel-wide reductions
                    let mut sum_g = 0.0;
                    let mut sum_g_xhat = 0.0;
                    for bi in 0..bsz {
                        let base = (bi * c + cc) * l;
                        for li in 0..l {
                            let go = g.data()[base + li];
                            let xhat = (x.data()[base + li] - mean[cc]) * istd;
                            sum_g += go;
                            sum_g_xhat += go * xhat;
                        }
                    }
                    gb.data_mut()[cc] = sum_g;
                    gg.data_mut()[cc] = sum_g_xhat;
                    // dL/dx = (γ·istd/N)·(N·g − Σg − x̂·Σ(g·x̂))
                    let coeff = ga * istd / n;
                    for bi in 0..bsz {
                        let base = (bi * c + cc) * l;
                        for li in 0..l {
                            let go = g.data()[base + li];
                            let xhat = (x.data()[base + li] - mean[cc]) * istd;
                            gx.data_mut()[base + li] = coeff * (n * go - sum_g - xhat * sum_g_xhat);
                        }
                    }
                }
                vec![gx, gg, gb]
            })),
            "batchnorm_train",
        )
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = tx.shape();
        if s.len() != 3 || tg.shape() != [s[1]] || tb.shape() != [s[1]] {
            return Err(Error::Shape(format!(
                "batchnorm_eval: x {:?}, gamma {:?}, beta {:?}",
                s,
                tg.shape(),
                tb.shape()
            )));
        }
        let (bsz, c, l) = (s[0], s[1], s[2]);
        let rm = running_mean.data().to_vec();
        let rv = running_var.data().to_vec();
        let mut out = Tensor::zeros(&[bsz, c, l]);
        for bi in 0..bsz {
            for cc in 0..c {
                let istd = 1.0 / (rv[cc] + BN_EPS).sqrt();
                let (ga, be) = (tg.data()[cc], tb.data()[cc]);
                let base = (bi * c + cc) * l;
                for li in 0..l {
                    out.data_mut()[base + li] = (tx.data()[base + li] - rm[cc]) * istd * ga + be;
                }
            }
        }
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g, parents, _| {
                let (x, gamma) = (parents[0], parents[1]);
                let mut gx = Tensor::zeros(&[bsz, c, l]);
                let mut gg = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for cc in 0..c {
                    let istd = 1.0 / (rv[cc] + BN_EPS).sqrt();
                    let ga = gamma.data()[cc];
                    for bi in 0..bsz {
                        let base = (bi * c + cc) * l;
                        for li in 0..l {
                            let go = g.data()[base + li];
                            let xhat = (x.data()[base + li] - rm[cc]) * istd;
                            gx.data_mut()[base + li] = go * ga * istd;
                            gg.data_mut()[cc] += go * xhat;
                            gb.data_mut()[cc] += go;
                        }
                    }
                }
                vec![gx, gg, gb]
            })),
            "batchnorm_eval",
        )
    }

    // ---- classification loss ----

    /// Mean softmax cross-entropy over a batch, numerically stabilized by
    /// max subtraction. Returns the scalar loss node plus the (detached)
    /// probability matrix.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<(NodeId, Tensor)> {
        let tl = self.value(logits);
        let s = tl.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: logits {:?} vs {} targets",
                s,
                targets.len()
            )));
        }
        let (bsz, c) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Invalid(format!("target class {bad} out of range for {c} logits")));
        }
        let mut probs = Tensor::zeros(&[bsz, c]);
        let mut loss = 0.0;
        for bi in 0..bsz {
            let row = &tl.data()[bi * c..(bi + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let prow = &mut probs.data_mut()[bi * c..(bi + 1) * c];
            for i in 0..c {
                let e = (row[i] - max).exp();
                prow[i] = e;
                z += e;
            }
            for v in prow.iter_mut() {
                *v /= z;
            }
            loss += -(prow[targets[bi]].max(LOG_FLOOR)).ln();
        }
        loss /= bsz as f64;
        let probs_for_back = probs.clone();
        let targets = targets.to_vec();
        let node = self.push(
            Tensor::scalar(loss),
            vec![logits],
            Some(Box::new(move |g, _, _| {
                let scale = g.item() / bsz as f64;
                let mut gx = probs_for_back.clone();
                for bi in 0..bsz {
                    gx.data_mut()[bi * c + targets[bi]] -= 1.0;
                }
                for v in gx.data_mut() {
                    *v *= scale;
                }
                vec![gx]
            })),
            "softmax_cross_entropy",
        )?;
        Ok((node, probs))
    }

    // ---- composite helpers ----

    /// Mean over the batch of per-row squared L2 distance: `mean_b Σ_f (a−b)²`.
    /// Rows are whatever trails the leading batch axis.
    pub fn mean_sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bsz = self.value(a).shape()[0];
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let total = self.sum_all(sq)?;
        self.scale(total, 1.0 / bsz as f64)
    }

    /// Mean over the batch of per-row L1 norm.
    pub fn mean_l1(&mut self, a: NodeId) -> Result<NodeId> {
        let bsz = self.value(a).shape()[0];
        let m = self.abs(a)?;
        let total = self.sum_all(m)?;
        self.scale(total, 1.0 / bsz as f64)
    }

    /// Mean of a rank-2 `(B,1)` or rank-1 tensor as a scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        let total = self.sum_all(a)?;
        self.scale(total, 1.0 / n as f64)
    }
}

/// Cosine similarity between two plain vectors with the zero-norm guard.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

fn channel_stats(x: &[f64], bsz: usize, c: usize, l: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (bsz * l) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for cc in 0..c {
        let mut sum = 0.0;
        for bi in 0..bsz {
            let base = (bi * c + cc) * l;
            for li in 0..l {
                sum += x[base + li];
            }
        }
        mean[cc] = sum / n;
    }
    for cc in 0..c {
        let mut sum = 0.0;
        for bi in 0..bsz {
            let base = (bi * c + cc) * l;
            for li in 0..l {
                let d = x[base + li] - mean[cc];
                sum += d * d;
            }
        }
        var[cc] = sum / n;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    out: &mut [f64],
    bsz: usize,
    ci: usize,
    l: usize,
    co: usize,
    k: usize,
    lo: usize,
    stride: usize,
    padding: usize,
) {
    for bi in 0..bsz {
        for oc in 0..co {
            let orow = &mut out[(bi * co + oc) * lo..(bi * co + oc + 1) * lo];
            orow.fill(bias[oc]);
            for ic in 0..ci {
                let xrow = &x[(bi * ci + ic) * l..(bi * ci + ic + 1) * l];
                let wrow = &w[(oc * ci + ic) * k..(oc * ci + ic + 1) * k];
                for kk in 0..k {
                    let wv = wrow[kk];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo_min, lo_max) = valid_out_range(l, lo, stride, padding, kk);
                    let off = kk as i64 - padding as i64;
                    for oi in lo_min..=lo_max {
                        let li = (oi as i64 * stride as i64 + off) as usize;
                        orow[oi] += wv * xrow[li];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
    bsz: usize,
    ci: usize,
    l: usize,
    co: usize,
    k: usize,
    lo: usize,
    stride: usize,
    padding: usize,
) {
    for bi in 0..bsz {
        for oc in 0..co {
            let grow = &g[(bi * co + oc) * lo..(bi * co + oc + 1) * lo];
            gb[oc] += grow.iter().sum::<f64>();
            for ic in 0..ci {
                let xrow = &x[(bi * ci + ic) * l..(bi * ci + ic + 1) * l];
                let gxrow = &mut gx[(bi * ci + ic) * l..(bi * ci + ic + 1) * l];
                let wrow = &w[(oc * ci + ic) * k..(oc * ci + ic + 1) * k];
                let gwrow = &mut gw[(oc * ci + ic) * k..(oc * ci + ic + 1) * k];
                for kk in 0..k {
                    let (lo_min, lo_max) = valid_out_range(l, lo, stride, padding, kk);
                    let off = kk as i64 - padding as i64;
                    let wv = wrow[kk];
                    let mut acc = 0.0;
                    for oi in lo_min..=lo_max {
                        let li = (oi as i64 * stride as i64 + off) as usize;
                        let go = grow[oi];
                        acc += go * xrow[li];
                        gxrow[li] += wv * go;
                    }
                    gwrow[kk] += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tconv1d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    out: &mut [f64],
    bsz: usize,
    ci: usize,
    l: usize,
    co: usize,
    k: usize,
    lo: usize,
    stride: usize,
    padding: usize,
) {
    for bi in 0..bsz {
        for oc in 0..co {
            out[(bi * co + oc) * lo..(bi * co + oc + 1) * lo].fill(bias[oc]);
        }
        for ic in 0..ci {
            let xrow = &x[(bi * ci + ic) * l..(bi * ci + ic + 1) * l];
            for oc in 0..co {
                let orow = &mut out[(bi * co + oc) * lo..(bi * co + oc + 1) * lo];
                let wrow = &w[(ic * co + oc) * k..(ic * co + oc + 1) * k];
                for kk in 0..k {
                    let wv = wrow[kk];
                    if wv == 0.0 {
                        continue;
                    }
                    let (li_min, li_max) = valid_in_range(l, lo, stride, padding, kk);
                    let off = kk as i64 - padding as i64;
                    for li in li_min..=li_max {
                        let oi = (li as i64 * stride as i64 + off) as usize;
                        orow[oi] += wv * xrow[li];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tconv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
    bsz: usize,
    ci: usize,
    l: usize,
    co: usize,
    k: usize,
    lo: usize,
    stride: usize,
    padding: usize,
) {
    for bi in 0..bsz {
        for oc in 0..co {
            let grow = &g[(bi * co + oc) * lo..(bi * co + oc + 1) * lo];
            gb[oc] += grow.iter().sum::<f64>();
        }
        for ic in 0..ci {
            let xrow = &x[(bi * ci + ic) * l..(bi * ci + ic + 1) * l];
            let gxrow = &mut gx[(bi * ci + ic) * l..(bi * ci + ic + 1) * l];
            for oc in 0..co {
                let grow = &g[(bi * co + oc) * lo..(bi * co + oc + 1) * lo];
                let wrow = &w[(ic * co + oc) * k..(ic * co + oc + 1) * k];
                let gwrow = &mut gw[(ic * co + oc) * k..(ic * co + oc + 1) * k];
                for kk in 0..k {
                    let (li_min, li_max) = valid_in_range(l, lo, stride, padding, kk);
                    let off = kk as i64 - padding as i64;
                    let wv = wrow[kk];
                    let mut acc = 0.0;
                    for li in li_min..=li_max {
                        let oi = (li as i64 * stride as i64 + off) as usize;
                        let go = grow[oi];
                        acc += go * xrow[li];
                        gxrow[li] += wv * go;
                    }
                    gwrow[kk] += acc;
                }
            }
        }
    }
}

/// For conv: output positions `oi` whose tap `kk` reads inside `[0, l)`.
/// Returns an empty range as `(1, 0)` when nothing is valid.
fn valid_out_range(l: usize, lo: usize, stride: usize, padding: usize, kk: usize) -> (usize, usize) {
    let off = kk as i64 - padding as i64;
    // need 0 <= oi*stride + off <= l-1
    let lo_min = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi = l as i64 - 1 - off;
    if hi < 0 || lo_min >= lo {
        return (1, 0);
    }
    let lo_max = ((hi / stride as i64) as usize).min(lo - 1);
    if lo_max < lo_min {
        (1, 0)
    } else {
        (lo_min, lo_max)
    }
}

/// For tconv: input positions `li` whose scatter target `li*s + kk − p`
/// lands inside `[0, lo)`.
fn valid_in_range(l: usize, lo: usize, stride: usize, padding: usize, kk: usize) -> (usize, usize) {
    let off = kk as i64 - padding as i64;
    let li_min = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi = lo as i64 - 1 - off;
    if hi < 0 || li_min >= l {
        return (1, 0);
    }
    let li_max = ((hi / stride as i64) as usize).min(l - 1);
    if li_max < li_min {
        (1, 0)
    } else {
        (li_min, li_max)
    }
}
