//! Recording graph for reverse-mode differentiation.
//!
//! Operations evaluate eagerly and append a node to the tape. Node ids grow
//! monotonically, so the tape is topologically ordered by construction and a
//! single reverse sweep visits every node exactly once. Gradients accumulate
//! additively across fan-out.

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

/// Identity of a value inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative in terms of input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    /// [n, d] + [d], broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// [m, n] + [m], broadcast over columns.
    AddColVec(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        dilation: usize,
    },
    Conv1d {
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
    },
    Activation {
        input: NodeId,
        kind: Activation,
    },
    InstanceNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// Softmax over axis 0 of a [B, H, W] tensor.
    SoftmaxAxis0(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
        count: usize,
    },
    Sum(NodeId),
    Permute3 {
        input: NodeId,
        perm: [usize; 3],
    },
    Reshape(NodeId),
    /// channels at (i, j) = concat(t_i, t_j, e[i][j]); t tracked, e constant.
    PairConcat {
        t: NodeId,
        edge: Option<NodeId>,
    },
    /// Cross aggregation: out(i,j) = norm * (Wmix·rowsum_i + Hmix·colsum_j).
    EdgeToEdge {
        input: NodeId,
        w_mix: NodeId,
        h_mix: NodeId,
        normalize: bool,
    },
    /// m[v] = (1/L) * sum_{w != v} reshape(mats[v,w]) · h[w].
    EdgeMessage {
        mats: NodeId,
        h: NodeId,
        pair_mask: Option<Vec<bool>>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Recorded differentiation graph (one forward pass, one backward sweep).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass, if one ran. Zero-filled for leaves
    /// that no path reaches.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor {
        std::mem::take(&mut self.nodes[id.0].value)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v * c);
        self.push(value, Op::MulScalar(a, c))
    }

    /// [n, d] + [d] broadcast across rows.
    pub fn add_row_vec(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "add_row_vec",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, d) = (sa[0], sa[1]);
        let mut data = self.nodes[a.0].value.data().to_vec();
        let bv = self.nodes[b.0].value.data();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += bv[j];
            }
        }
        let value = Tensor::from_vec(&sa, data)?;
        Ok(self.push(value, Op::AddRowVec(a, b)))
    }

    /// [m, n] + [m] broadcast across columns.
    pub fn add_col_vec(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[0] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "add_col_vec",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let mut data = self.nodes[a.0].value.data().to_vec();
        let bv = self.nodes[b.0].value.data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv[i];
            }
        }
        let value = Tensor::from_vec(&sa, data)?;
        Ok(self.push(value, Op::AddColVec(a, b)))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    // ---- convolutions -----------------------------------------------------

    /// 3x3 cross-correlation over [C_in, H, W] with zero padding equal to the
    /// dilation, preserving the spatial extent.
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, dilation: usize) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        if si.len() != 3 {
            return Err(AdError::BadShape {
                op: "conv2d",
                expected: "[C_in, H, W] input".into(),
                got: si,
            });
        }
        if sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(AdError::BadShape {
                op: "conv2d",
                expected: "[C_out, C_in, 3, 3] kernels".into(),
                got: sk,
            });
        }
        if sk[1] != si[0] {
            return Err(AdError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        assert!(dilation >= 1, "conv2d dilation must be positive");
        let (ci, h, w) = (si[0], si[1], si[2]);
        let co = sk[0];
        let iv = self.nodes[input.0].value.data();
        let kv = self.nodes[kernels.0].value.data();
        let mut out = vec![0.0; co * h * w];
        conv2d_forward(iv, kv, &mut out, ci, co, h, w, dilation);
        let value = Tensor::from_vec(&[co, h, w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                dilation,
            },
        ))
    }

    /// Window-3 1D convolution along the sequence: [L, D] x [C_out, D, 3]
    /// -> [L, C_out], zero padded at the ends.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        if si.len() != 2 || sk.len() != 3 || sk[2] != 3 || sk[1] != si[1] {
            return Err(AdError::ShapeMismatch {
                op: "conv1d",
                lhs: si,
                rhs: sk,
            });
        }
        let (l, d) = (si[0], si[1]);
        let co = sk[0];
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(AdError::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![co],
                });
            }
        }
        let iv = self.nodes[input.0].value.data();
        let kv = self.nodes[kernels.0].value.data();
        let mut out = vec![0.0; l * co];
        for c in 0..co {
            for i in 0..l {
                let mut acc = 0.0;
                for (t, off) in [-1isize, 0, 1].iter().enumerate() {
                    let src = i as isize + off;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let irow = &iv[src as usize * d..(src as usize + 1) * d];
                    let krow = &kv[(c * d) * 3 + t..];
                    // kernels laid out [C_out, D, 3]: element (c, f, t)
                    for f in 0..d {
                        acc += irow[f] * krow[f * 3];
                    }
                }
                out[i * co + c] = acc;
            }
        }
        if let Some(b) = bias {
            let bv = self.nodes[b.0].value.data();
            for i in 0..l {
                for c in 0..co {
                    out[i * co + c] += bv[c];
                }
            }
        }
        let value = Tensor::from_vec(&[l, co], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernels,
                bias,
            },
        ))
    }

    // ---- nonlinearities and normalization ----------------------------------

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> NodeId {
        let value = self.nodes[input.0].value.map(|v| kind.apply(v));
        self.push(value, Op::Activation { input, kind })
    }

    /// Per-channel normalization of [C, H, W] over the spatial extent with
    /// that tensor's own statistics, then affine scale/shift.
    pub fn instance_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let si = self.shape(input).to_vec();
        if si.len() != 3 {
            return Err(AdError::BadShape {
                op: "instance_norm",
                expected: "[C, H, W] input".into(),
                got: si,
            });
        }
        let c = si[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(AdError::ShapeMismatch {
                op: "instance_norm",
                lhs: si,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let spatial = si[1] * si[2];
        let iv = self.nodes[input.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; c * spatial];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * spatial];
        for ch in 0..c {
            let x = &iv[ch * spatial..(ch + 1) * spatial];
            let mean = x.iter().sum::<f64>() / spatial as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / spatial as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[ch] = is;
            for (k, &v) in x.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat[ch * spatial + k] = xh;
                out[ch * spatial + k] = gv[ch] * xh + bv[ch];
            }
        }
        let value = Tensor::from_vec(&si, out)?;
        let xhat = Tensor::from_vec(&si, xhat)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over the first axis of a [B, H, W] tensor.
    pub fn softmax_axis0(&mut self, input: NodeId) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 {
            return Err(AdError::BadShape {
                op: "softmax_axis0",
                expected: "[B, H, W] input".into(),
                got: si,
            });
        }
        let (b, h, w) = (si[0], si[1], si[2]);
        let spatial = h * w;
        let iv = self.nodes[input.0].value.data();
        let mut out = vec![0.0; b * spatial];
        for p in 0..spatial {
            let mut max = f64::NEG_INFINITY;
            for k in 0..b {
                max = max.max(iv[k * spatial + p]);
            }
            let mut denom = 0.0;
            for k in 0..b {
                let e = (iv[k * spatial + p] - max).exp();
                out[k * spatial + p] = e;
                denom += e;
            }
            for k in 0..b {
                out[k * spatial + p] /= denom;
            }
        }
        let value = Tensor::from_vec(&si, out)?;
        Ok(self.push(value, Op::SoftmaxAxis0(input)))
    }

    /// Mean over unmasked positions of -log softmax(logits)[target].
    /// `logits` is [P, B]; targets and mask have length P.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(AdError::BadShape {
                op: "softmax_cross_entropy",
                expected: "[P, B] logits".into(),
                got: sl,
            });
        }
        let (p, b) = (sl[0], sl[1]);
        if targets.len() != p || mask.len() != p {
            return Err(AdError::BadShape {
                op: "softmax_cross_entropy",
                expected: format!("{p} targets and mask entries"),
                got: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AdError::EmptyLoss);
        }
        let lv = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0; p * b];
        let mut loss = 0.0;
        for i in 0..p {
            if !mask[i] {
                continue;
            }
            if targets[i] >= b {
                return Err(AdError::LabelOutOfRange {
                    label: targets[i],
                    classes: b,
                    position: i,
                });
            }
            let row = &lv[i * b..(i + 1) * b];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..b {
                let e = (row[j] - max).exp();
                probs[i * b + j] = e;
                denom += e;
            }
            for j in 0..b {
                probs[i * b + j] /= denom;
            }
            loss += denom.ln() + max - row[targets[i]];
        }
        loss /= count as f64;
        let probs = Tensor::from_vec(&[p, b], probs)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    // ---- reductions and shape ---------------------------------------------

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total = self.nodes[input.0].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(input))
    }

    pub fn permute3(&mut self, input: NodeId, perm: [usize; 3]) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 {
            return Err(AdError::BadShape {
                op: "permute3",
                expected: "[A, B, C] input".into(),
                got: si,
            });
        }
        let out_shape = [si[perm[0]], si[perm[1]], si[perm[2]]];
        let value = permute3_data(&self.nodes[input.0].value, perm, &out_shape);
        Ok(self.push(value, Op::Permute3 { input, perm }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[input.0].value.reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    // ---- structured model ops ----------------------------------------------

    /// Pairwise map from per-node channels: out[(i,j)] = concat(t_i, t_j, e[i][j]).
    /// `t` is [L, d]; `edge`, when present, is an [L, L, K] leaf.
    pub fn pair_concat(&mut self, t: NodeId, edge: Option<NodeId>) -> Result<NodeId> {
        let st = self.shape(t).to_vec();
        if st.len() != 2 {
            return Err(AdError::BadShape {
                op: "pair_concat",
                expected: "[L, d] node channels".into(),
                got: st,
            });
        }
        let (l, d) = (st[0], st[1]);
        let k = match edge {
            Some(e) => {
                let se = self.shape(e).to_vec();
                if se.len() != 3 || se[0] != l || se[1] != l {
                    return Err(AdError::ShapeMismatch {
                        op: "pair_concat",
                        lhs: st,
                        rhs: se,
                    });
                }
                se[2]
            }
            None => 0,
        };
        let channels = 2 * d + k;
        let tv = self.nodes[t.0].value.data();
        let mut out = vec![0.0; channels * l * l];
        for c in 0..d {
            for i in 0..l {
                let ti = tv[i * d + c];
                let base = (c * l + i) * l;
                for j in 0..l {
                    out[base + j] = ti;
                }
            }
        }
        for c in 0..d {
            for i in 0..l {
                let base = ((d + c) * l + i) * l;
                for j in 0..l {
                    out[base + j] = tv[j * d + c];
                }
            }
        }
        if let Some(e) = edge {
            let ev = self.nodes[e.0].value.data();
            for c in 0..k {
                for i in 0..l {
                    let base = ((2 * d + c) * l + i) * l;
                    for j in 0..l {
                        out[base + j] = ev[(i * l + j) * k + c];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[channels, l, l], out)?;
        Ok(self.push(value, Op::PairConcat { t, edge }))
    }

    /// Linear part of the edge-to-edge convolution: aggregate row i and
    /// column j of every input channel, then mix channels.
    /// out[co,i,j] = norm * (sum_ci w[co,ci]*rowsum[ci,i] + h[co,ci]*colsum[ci,j]),
    /// norm = 1/L when `normalize` is set.
    pub fn edge_to_edge(
        &mut self,
        input: NodeId,
        w_mix: NodeId,
        h_mix: NodeId,
        normalize: bool,
    ) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 || si[1] != si[2] {
            return Err(AdError::BadShape {
                op: "edge_to_edge",
                expected: "[C_in, L, L] input".into(),
                got: si,
            });
        }
        let (ci, l) = (si[0], si[1]);
        let sw = self.shape(w_mix).to_vec();
        let sh = self.shape(h_mix).to_vec();
        if sw.len() != 2 || sw[1] != ci || sh != sw {
            return Err(AdError::ShapeMismatch {
                op: "edge_to_edge",
                lhs: sw,
                rhs: sh,
            });
        }
        let co = sw[0];
        let iv = self.nodes[input.0].value.data();
        let wv = self.nodes[w_mix.0].value.data();
        let hv = self.nodes[h_mix.0].value.data();
        let norm = if normalize { 1.0 / l as f64 } else { 1.0 };

        let mut rowsum = vec![0.0; ci * l];
        let mut colsum = vec![0.0; ci * l];
        for c in 0..ci {
            for i in 0..l {
                let row = &iv[(c * l + i) * l..(c * l + i + 1) * l];
                let mut s = 0.0;
                for (j, v) in row.iter().enumerate() {
                    s += v;
                    colsum[c * l + j] += v;
                }
                rowsum[c * l + i] = s;
            }
        }
        // wr[co,i], hc[co,j]
        let mut wr = vec![0.0; co * l];
        let mut hc = vec![0.0; co * l];
        for o in 0..co {
            for c in 0..ci {
                let (wco, hco) = (wv[o * ci + c], hv[o * ci + c]);
                for i in 0..l {
                    wr[o * l + i] += wco * rowsum[c * l + i];
                    hc[o * l + i] += hco * colsum[c * l + i];
                }
            }
        }
        let mut out = vec![0.0; co * l * l];
        for o in 0..co {
            for i in 0..l {
                let wri = wr[o * l + i];
                let base = (o * l + i) * l;
                for j in 0..l {
                    out[base + j] = norm * (wri + hc[o * l + j]);
                }
            }
        }
        let value = Tensor::from_vec(&[co, l, l], out)?;
        Ok(self.push(
            value,
            Op::EdgeToEdge {
                input,
                w_mix,
                h_mix,
                normalize,
            },
        ))
    }

    /// Edge-conditioned message aggregation over all ordered pairs (v, w),
    /// w != v: m[v] = (1/L) * sum_w mat(v,w) · h[w], where `mats` is
    /// [L, L, d*d] and each mat(v,w) is read row-major as [d, d].
    pub fn edge_message(
        &mut self,
        mats: NodeId,
        h: NodeId,
        pair_mask: Option<Vec<bool>>,
    ) -> Result<NodeId> {
        let sm = self.shape(mats).to_vec();
        let sh = self.shape(h).to_vec();
        if sh.len() != 2 {
            return Err(AdError::BadShape {
                op: "edge_message",
                expected: "[L, d] hidden states".into(),
                got: sh,
            });
        }
        let (l, d) = (sh[0], sh[1]);
        if sm.len() != 3 || sm[0] != l || sm[1] != l || sm[2] != d * d {
            return Err(AdError::ShapeMismatch {
                op: "edge_message",
                lhs: sm,
                rhs: sh,
            });
        }
        if let Some(mask) = &pair_mask {
            if mask.len() != l * l {
                return Err(AdError::BadShape {
                    op: "edge_message",
                    expected: format!("{} pair mask entries", l * l),
                    got: vec![mask.len()],
                });
            }
        }
        let mv = self.nodes[mats.0].value.data();
        let hv = self.nodes[h.0].value.data();
        let inv_l = 1.0 / l as f64;
        let mut out = vec![0.0; l * d];
        for v in 0..l {
            let m_out = &mut out[v * d..(v + 1) * d];
            for w in 0..l {
                if w == v {
                    continue;
                }
                if let Some(mask) = &pair_mask {
                    if !mask[v * l + w] {
                        continue;
                    }
                }
                let mat = &mv[(v * l + w) * d * d..(v * l + w + 1) * d * d];
                let hw = &hv[w * d..(w + 1) * d];
                for a in 0..d {
                    let row = &mat[a * d..(a + 1) * d];
                    let mut acc = 0.0;
                    for b in 0..d {
                        acc += row[b] * hw[b];
                    }
                    m_out[a] += acc;
                }
            }
            for a in m_out.iter_mut() {
                *a *= inv_l;
            }
        }
        let value = Tensor::from_vec(&[l, d], out)?;
        Ok(self.push(
            value,
            Op::EdgeMessage {
                mats,
                h,
                pair_mask,
            },
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Populate gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(AdError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|node| Tensor::zeros(node.value.shape()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for id in (0..n).rev() {
            let g_out = std::mem::take(&mut grads[id]);
            self.accumulate(id, &g_out, &mut grads);
            self.nodes[id].grad = Some(g_out);
        }
        Ok(())
    }

    fn accumulate(&self, id: usize, g: &Tensor, grads: &mut [Tensor]) {
        let gv = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                axpy(grads[a.0].data_mut(), gv, 1.0);
                axpy(grads[b.0].data_mut(), gv, 1.0);
            }
            Op::Sub(a, b) => {
                axpy(grads[a.0].data_mut(), gv, 1.0);
                axpy(grads[b.0].data_mut(), gv, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let da = grads[a.0].data_mut();
                    for i in 0..gv.len() {
                        da[i] += gv[i] * bv[i];
                    }
                }
                let av = self.nodes[a.0].value.data();
                let db = grads[b.0].data_mut();
                for i in 0..gv.len() {
                    db[i] += gv[i] * av[i];
                }
            }
            Op::AddScalar(a) => axpy(grads[a.0].data_mut(), gv, 1.0),
            Op::MulScalar(a, c) => axpy(grads[a.0].data_mut(), gv, *c),
            Op::AddRowVec(a, b) => {
                axpy(grads[a.0].data_mut(), gv, 1.0);
                let d = self.nodes[b.0].value.numel();
                let db = grads[b.0].data_mut();
                for (i, v) in gv.iter().enumerate() {
                    db[i % d] += v;
                }
            }
            Op::AddColVec(a, b) => {
                axpy(grads[a.0].data_mut(), gv, 1.0);
                let m = self.nodes[b.0].value.numel();
                let n = gv.len() / m;
                let db = grads[b.0].data_mut();
                for i in 0..m {
                    db[i] += gv[i * n..(i + 1) * n].iter().sum::<f64>();
                }
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                {
                    // dA += g · B^T
                    let bv = self.nodes[b.0].value.data();
                    let da = grads[a.0].data_mut();
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &gv[i * n..(i + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                {
                    // dB += A^T · g
                    let av = self.nodes[a.0].value.data();
                    let db = grads[b.0].data_mut();
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &gv[i * n..(i + 1) * n];
                            let brow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += aip * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels,
                dilation,
            } => {
                let si = self.nodes[input.0].value.shape();
                let sk = self.nodes[kernels.0].value.shape();
                let (ci, h, w) = (si[0], si[1], si[2]);
                let co = sk[0];
                {
                    let kv = self.nodes[kernels.0].value.data();
                    let di = grads[input.0].data_mut();
                    conv2d_backward_input(gv, kv, di, ci, co, h, w, *dilation);
                }
                {
                    let iv = self.nodes[input.0].value.data();
                    let dk = grads[kernels.0].data_mut();
                    conv2d_backward_kernels(gv, iv, dk, ci, co, h, w, *dilation);
                }
            }
            Op::Conv1d {
                input,
                kernels,
                bias,
            } => {
                let si = self.nodes[input.0].value.shape();
                let sk = self.nodes[kernels.0].value.shape();
                let (l, d) = (si[0], si[1]);
                let co = sk[0];
                {
                    let kv = self.nodes[kernels.0].value.data();
                    let di = grads[input.0].data_mut();
                    for c in 0..co {
                        for i in 0..l {
                            let gval = gv[i * co + c];
                            if gval == 0.0 {
                                continue;
                            }
                            for (t, off) in [-1isize, 0, 1].iter().enumerate() {
                                let src = i as isize + off;
                                if src < 0 || src >= l as isize {
                                    continue;
                                }
                                let drow = &mut di[src as usize * d..(src as usize + 1) * d];
                                for f in 0..d {
                                    drow[f] += gval * kv[(c * d + f) * 3 + t];
                                }
                            }
                        }
                    }
                }
                {
                    let iv = self.nodes[input.0].value.data();
                    let dk = grads[kernels.0].data_mut();
                    for c in 0..co {
                        for i in 0..l {
                            let gval = gv[i * co + c];
                            if gval == 0.0 {
                                continue;
                            }
                            for (t, off) in [-1isize, 0, 1].iter().enumerate() {
                                let src = i as isize + off;
                                if src < 0 || src >= l as isize {
                                    continue;
                                }
                                let irow = &iv[src as usize * d..(src as usize + 1) * d];
                                for f in 0..d {
                                    dk[(c * d + f) * 3 + t] += gval * irow[f];
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let db = grads[b.0].data_mut();
                    for i in 0..l {
                        for c in 0..co {
                            db[c] += gv[i * co + c];
                        }
                    }
                }
            }
            Op::Activation { input, kind } => {
                let xv = self.nodes[input.0].value.data();
                let yv = self.nodes[id].value.data();
                let dx = grads[input.0].data_mut();
                for i in 0..gv.len() {
                    dx[i] += gv[i] * kind.derivative(xv[i], yv[i]);
                }
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let si = self.nodes[input.0].value.shape();
                let c = si[0];
                let spatial = si[1] * si[2];
                let xh = xhat.data();
                let gammav = self.nodes[gamma.0].value.data();
                {
                    let mut sums_beta = vec![0.0; c];
                    let mut sums_gamma = vec![0.0; c];
                    for ch in 0..c {
                        for k in 0..spatial {
                            let idx = ch * spatial + k;
                            sums_beta[ch] += gv[idx];
                            sums_gamma[ch] += gv[idx] * xh[idx];
                        }
                    }
                    axpy(grads[beta.0].data_mut(), &sums_beta, 1.0);
                    axpy(grads[gamma.0].data_mut(), &sums_gamma, 1.0);
                }
                let dx = grads[input.0].data_mut();
                for ch in 0..c {
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for k in 0..spatial {
                        let idx = ch * spatial + k;
                        let gs = gv[idx] * gammav[ch];
                        mean_g += gs;
                        mean_gx += gs * xh[idx];
                    }
                    mean_g /= spatial as f64;
                    mean_gx /= spatial as f64;
                    for k in 0..spatial {
                        let idx = ch * spatial + k;
                        let gs = gv[idx] * gammav[ch];
                        dx[idx] += inv_std[ch] * (gs - mean_g - xh[idx] * mean_gx);
                    }
                }
            }
            Op::SoftmaxAxis0(input) => {
                let pv = self.nodes[id].value.data();
                let si = self.nodes[input.0].value.shape();
                let (b, spatial) = (si[0], si[1] * si[2]);
                let dx = grads[input.0].data_mut();
                for p in 0..spatial {
                    let mut dot = 0.0;
                    for k in 0..b {
                        dot += gv[k * spatial + p] * pv[k * spatial + p];
                    }
                    for k in 0..b {
                        let idx = k * spatial + p;
                        dx[idx] += pv[idx] * (gv[idx] - dot);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let scale = gv[0] / *count as f64;
                let sb = self.nodes[logits.0].value.shape()[1];
                let pv = probs.data();
                let dl = grads[logits.0].data_mut();
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..sb {
                        let delta = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * sb + j] += (pv[i * sb + j] - delta) * scale;
                    }
                }
            }
            Op::Sum(input) => {
                let di = grads[input.0].data_mut();
                let g0 = gv[0];
                for v in di.iter_mut() {
                    *v += g0;
                }
            }
            Op::Permute3 { input, perm } => {
                // scatter g back through the inverse permutation
                let si = self.nodes[input.0].value.shape();
                let so = self.nodes[id].value.shape();
                let di = grads[input.0].data_mut();
                let strides_in = [si[1] * si[2], si[2], 1];
                for a in 0..so[0] {
                    for b in 0..so[1] {
                        for c in 0..so[2] {
                            let out_idx = (a * so[1] + b) * so[2] + c;
                            let coords = [a, b, c];
                            let mut in_idx = 0;
                            for (axis, &p) in perm.iter().enumerate() {
                                in_idx += coords[axis] * strides_in[p];
                            }
                            di[in_idx] += gv[out_idx];
                        }
                    }
                }
            }
            Op::Reshape(input) => axpy(grads[input.0].data_mut(), gv, 1.0),
            Op::PairConcat { t, edge } => {
                let st = self.nodes[t.0].value.shape();
                let (l, d) = (st[0], st[1]);
                {
                    let dt = grads[t.0].data_mut();
                    for c in 0..d {
                        for i in 0..l {
                            let base1 = (c * l + i) * l;
                            let mut acc = 0.0;
                            for j in 0..l {
                                acc += gv[base1 + j];
                            }
                            // block 2: out[d+c, i, j] = t[j, c]
                            let base2 = ((d + c) * l) * l + i;
                            for jrow in 0..l {
                                acc += gv[base2 + jrow * l];
                            }
                            dt[i * d + c] += acc;
                        }
                    }
                }
                if let Some(e) = edge {
                    let k = self.nodes[e.0].value.shape()[2];
                    let de = grads[e.0].data_mut();
                    for c in 0..k {
                        for i in 0..l {
                            let base = ((2 * d + c) * l + i) * l;
                            for j in 0..l {
                                de[(i * l + j) * k + c] += gv[base + j];
                            }
                        }
                    }
                }
            }
            Op::EdgeToEdge {
                input,
                w_mix,
                h_mix,
                normalize,
            } => {
                let si = self.nodes[input.0].value.shape();
                let (ci, l) = (si[0], si[1]);
                let co = self.nodes[w_mix.0].value.shape()[0];
                let norm = if *normalize { 1.0 / l as f64 } else { 1.0 };
                // g row/col sums per output channel
                let mut g_row = vec![0.0; co * l];
                let mut g_col = vec![0.0; co * l];
                for o in 0..co {
                    for i in 0..l {
                        let base = (o * l + i) * l;
                        let mut s = 0.0;
                        for j in 0..l {
                            let v = gv[base + j];
                            s += v;
                            g_col[o * l + j] += v;
                        }
                        g_row[o * l + i] = s;
                    }
                }
                // recompute input row/col sums
                let iv = self.nodes[input.0].value.data();
                let mut rowsum = vec![0.0; ci * l];
                let mut colsum = vec![0.0; ci * l];
                for c in 0..ci {
                    for i in 0..l {
                        let row = &iv[(c * l + i) * l..(c * l + i + 1) * l];
                        let mut s = 0.0;
                        for (j, v) in row.iter().enumerate() {
                            s += v;
                            colsum[c * l + j] += v;
                        }
                        rowsum[c * l + i] = s;
                    }
                }
                {
                    let dw = grads[w_mix.0].data_mut();
                    for o in 0..co {
                        for c in 0..ci {
                            let mut acc = 0.0;
                            for i in 0..l {
                                acc += g_row[o * l + i] * rowsum[c * l + i];
                            }
                            dw[o * ci + c] += norm * acc;
                        }
                    }
                }
                {
                    let dh = grads[h_mix.0].data_mut();
                    for o in 0..co {
                        for c in 0..ci {
                            let mut acc = 0.0;
                            for j in 0..l {
                                acc += g_col[o * l + j] * colsum[c * l + j];
                            }
                            dh[o * ci + c] += norm * acc;
                        }
                    }
                }
                {
                    let wv = self.nodes[w_mix.0].value.data();
                    let hv = self.nodes[h_mix.0].value.data();
                    let di = grads[input.0].data_mut();
                    // d rowsum[c,i] and d colsum[c,j], then broadcast
                    for c in 0..ci {
                        for i in 0..l {
                            let mut dr = 0.0;
                            let mut dc = 0.0;
                            for o in 0..co {
                                dr += wv[o * ci + c] * g_row[o * l + i];
                                dc += hv[o * ci + c] * g_col[o * l + i];
                            }
                            dr *= norm;
                            dc *= norm;
                            // rowsum[c,i] feeds every (i, j); colsum[c,i] every (j, i)
                            let base = (c * l + i) * l;
                            for j in 0..l {
                                di[base + j] += dr;
                            }
                            let col_base = c * l * l + i;
                            for j in 0..l {
                                di[col_base + j * l] += dc;
                            }
                        }
                    }
                }
            }
            Op::EdgeMessage {
                mats,
                h,
                pair_mask,
            } => {
                let sh = self.nodes[h.0].value.shape();
                let (l, d) = (sh[0], sh[1]);
                let inv_l = 1.0 / l as f64;
                let hv = self.nodes[h.0].value.data().to_vec();
                {
                    let dm = grads[mats.0].data_mut();
                    for v in 0..l {
                        let gvv = &gv[v * d..(v + 1) * d];
                        for w in 0..l {
                            if w == v {
                                continue;
                            }
                            if let Some(mask) = pair_mask {
                                if !mask[v * l + w] {
                                    continue;
                                }
                            }
                            let hw = &hv[w * d..(w + 1) * d];
                            let mat = &mut dm[(v * l + w) * d * d..(v * l + w + 1) * d * d];
                            for a in 0..d {
                                let ga = gvv[a] * inv_l;
                                if ga == 0.0 {
                                    continue;
                                }
                                let row = &mut mat[a * d..(a + 1) * d];
                                for b in 0..d {
                                    row[b] += ga * hw[b];
                                }
                            }
                        }
                    }
                }
                {
                    let mv = self.nodes[mats.0].value.data();
                    let dh = grads[h.0].data_mut();
                    for v in 0..l {
                        let gvv = &gv[v * d..(v + 1) * d];
                        for w in 0..l {
                            if w == v {
                                continue;
                            }
                            if let Some(mask) = pair_mask {
                                if !mask[v * l + w] {
                                    continue;
                                }
                            }
                            let mat = &mv[(v * l + w) * d * d..(v * l + w + 1) * d * d];
                            let dhw = &mut dh[w * d..(w + 1) * d];
                            for a in 0..d {
                                let ga = gvv[a] * inv_l;
                                if ga == 0.0 {
                                    continue;
                                }
                                let row = &mat[a * d..(a + 1) * d];
                                for b in 0..d {
                                    dhw[b] += ga * row[b];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for i in 0..dst.len() {
        dst[i] += scale * src[i];
    }
}

fn permute3_data(input: &Tensor, perm: [usize; 3], out_shape: &[usize; 3]) -> Tensor {
    let si = input.shape();
    let strides_in = [si[1] * si[2], si[2], 1];
    let iv = input.data();
    let mut out = vec![0.0; iv.len()];
    let mut idx = 0;
    for a in 0..out_shape[0] {
        for b in 0..out_shape[1] {
            for c in 0..out_shape[2] {
                let coords = [a, b, c];
                let mut in_idx = 0;
                for (axis, &p) in perm.iter().enumerate() {
                    in_idx += coords[axis] * strides_in[p];
                }
                out[idx] = iv[in_idx];
                idx += 1;
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("permute preserves element count")
}

fn conv2d_forward(
    input: &[f64],
    kernels: &[f64],
    out: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    dilation: usize,
) {
    let dil = dilation as isize;
    for o in 0..co {
        let out_ch = &mut out[o * h * w..(o + 1) * h * w];
        for c in 0..ci {
            let in_ch = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..3usize {
                let dy = dil * (ky as isize - 1);
                let y0 = 0.max(-dy) as usize;
                let y1 = (h as isize).min(h as isize - dy) as usize;
                for kx in 0..3usize {
                    let dx = dil * (kx as isize - 1);
                    let x0 = 0.max(-dx) as usize;
                    let x1 = (w as isize).min(w as isize - dx) as usize;
                    let weight = kernels[((o * ci + c) * 3 + ky) * 3 + kx];
                    if weight == 0.0 || x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let dst_row = y * w;
                        for x in x0..x1 {
                            out_ch[dst_row + x] +=
                                weight * in_ch[src_row + (x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input(
    g: &[f64],
    kernels: &[f64],
    d_input: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    dilation: usize,
) {
    let dil = dilation as isize;
    for o in 0..co {
        let g_ch = &g[o * h * w..(o + 1) * h * w];
        for c in 0..ci {
            let d_ch = &mut d_input[c * h * w..(c + 1) * h * w];
            for ky in 0..3usize {
                let dy = dil * (ky as isize - 1);
                let y0 = 0.max(-dy) as usize;
                let y1 = (h as isize).min(h as isize - dy) as usize;
                for kx in 0..3usize {
                    let dx = dil * (kx as isize - 1);
                    let x0 = 0.max(-dx) as usize;
                    let x1 = (w as isize).min(w as isize - dx) as usize;
                    let weight = kernels[((o * ci + c) * 3 + ky) * 3 + kx];
                    if weight == 0.0 || x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let g_row = y * w;
                        for x in x0..x1 {
                            d_ch[src_row + (x as isize + dx) as usize] += weight * g_ch[g_row + x];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernels(
    g: &[f64],
    input: &[f64],
    d_kernels: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    dilation: usize,
) {
    let dil = dilation as isize;
    for o in 0..co {
        let g_ch = &g[o * h * w..(o + 1) * h * w];
        for c in 0..ci {
            let in_ch = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..3usize {
                let dy = dil * (ky as isize - 1);
                let y0 = 0.max(-dy) as usize;
                let y1 = (h as isize).min(h as isize - dy) as usize;
                for kx in 0..3usize {
                    let dx = dil * (kx as isize - 1);
                    let x0 = 0.max(-dx) as usize;
                    let x1 = (w as isize).min(w as isize - dx) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let g_row = y * w;
                        for x in x0..x1 {
                            acc += g_ch[g_row + x] * in_ch[src_row + (x as isize + dx) as usize];
                        }
                    }
                    d_kernels[((o * ci + c) * 3 + ky) * 3 + kx] += acc;
                }
            }
        }
    }
}

/// Gate parameters for one gated recurrent update, all [d, d] weights and
/// [d] biases. Weights left-multiply as `x · W`.
#[derive(Clone, Copy)]
pub struct GruParams {
    pub w_update: NodeId,
    pub u_update: NodeId,
    pub b_update: NodeId,
    pub w_reset: NodeId,
    pub u_reset: NodeId,
    pub b_reset: NodeId,
    pub w_cand: NodeId,
    pub u_cand: NodeId,
    pub b_cand: NodeId,
}

/// Gated recurrent update applied row-wise to [n, d] states:
/// z = sigma(m·Wz + h·Uz + bz), r = sigma(m·Wr + h·Ur + br),
/// n = tanh(m·Wn + r o (h·Un) + bn), h' = (1 - z) o n + z o h.
pub fn gru_cell(g: &mut Graph, h: NodeId, m: NodeId, params: &GruParams) -> Result<NodeId> {
    if g.value(h).shape() != g.value(m).shape() {
        return Err(AdError::ShapeMismatch {
            op: "gru_cell",
            lhs: g.value(h).shape().to_vec(),
            rhs: g.value(m).shape().to_vec(),
        });
    }
    let zm = g.matmul(m, params.w_update)?;
    let zh = g.matmul(h, params.u_update)?;
    let z_pre = g.add(zm, zh)?;
    let z_pre = g.add_row_vec(z_pre, params.b_update)?;
    let z = g.activation(z_pre, Activation::Sigmoid);

    let rm = g.matmul(m, params.w_reset)?;
    let rh = g.matmul(h, params.u_reset)?;
    let r_pre = g.add(rm, rh)?;
    let r_pre = g.add_row_vec(r_pre, params.b_reset)?;
    let r = g.activation(r_pre, Activation::Sigmoid);

    let nm = g.matmul(m, params.w_cand)?;
    let nh = g.matmul(h, params.u_cand)?;
    let gated = g.mul(r, nh)?;
    let n_pre = g.add(nm, gated)?;
    let n_pre = g.add_row_vec(n_pre, params.b_cand)?;
    let cand = g.activation(n_pre, Activation::Tanh);

    let zn = g.mul(z, cand)?;
    let zh_keep = g.mul(z, h)?;
    let blended = g.sub(cand, zn)?;
    g.add(blended, zh_keep)
}
