//! Minimal reverse-mode autodiff over dynamic-shape f64 tensors.
//!
//! A [`Tape`] records one computation graph. Parameter leaves are bound to a
//! [`ParamStore`] index; [`Tape::backward`] walks the graph in reverse and
//! returns the accumulated parameter gradients. Several backward passes may
//! be run on one tape (the stage-one trainer updates the discriminator and
//! then keeps building nodes for the encoder step).

use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn};

use super::kernels;
use super::params::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Abs(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Clamp(NodeId, f64, f64),
    MeanAll(NodeId),
    SumAll(NodeId),
    RowMean(NodeId),
    RowBroadcastMul(NodeId, NodeId),
    RowBroadcastAdd(NodeId, NodeId),
    ConcatAxis1(Vec<NodeId>),
    SliceAxis1(NodeId, usize, usize),
    Reshape(NodeId),
    PermuteAxis0(NodeId, Vec<usize>),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<u32>,
    },
    UpsampleNearest2x(NodeId),
    GlobalAvgPool(NodeId),
    AdaIn {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mu: ndarray::Array2<f64>,
        sigma: ndarray::Array2<f64>,
    },
    KlStdNormal {
        mu: NodeId,
        logvar: NodeId,
    },
    Detach(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Non-parameter leaf that still wants a gradient (used by tests probing
    /// input sensitivities).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf bound to `store[id]`. Each call snapshots the current
    /// value; gradients from every use of the parameter are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[node.0].param = Some(id);
        node
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        let needs = self.ng(a);
        self.push(v, Op::Scale(a, s), needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        let needs = self.ng(a);
        self.push(v, Op::AddScalar(a, s), needs)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let needs = self.ng(a);
        self.push(v, Op::Abs(a), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let needs = self.ng(a);
        self.push(v, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(stable_sigmoid);
        let needs = self.ng(a);
        self.push(v, Op::Sigmoid(a), needs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let needs = self.ng(a);
        self.push(v, Op::Exp(a), needs)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let needs = self.ng(a);
        self.push(v, Op::Ln(a), needs)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let needs = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let m = self.nodes[a.0].value.mean().unwrap();
        let needs = self.ng(a);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), m),
            Op::MeanAll(a),
            needs,
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        let needs = self.ng(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), needs)
    }

    /// `[N,D] -> [1,D]` mean over the batch axis.
    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let m = v.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let needs = self.ng(a);
        self.push(m.into_dyn(), Op::RowMean(a), needs)
    }

    /// `a [N,D] * b [1,D]` with `b` broadcast over rows.
    pub fn row_broadcast_mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = (&av * &bv).into_dyn();
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::RowBroadcastMul(a, b), needs)
    }

    /// `a [N,D] + b [1,D]` with `b` broadcast over rows.
    pub fn row_broadcast_add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = (&av + &bv).into_dyn();
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::RowBroadcastAdd(a, b), needs)
    }

    /// Concatenate along axis 1 (channels for 4-D maps, features for 2-D).
    pub fn concat_axis1(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        let needs = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatAxis1(parts.to_vec()), needs)
    }

    pub fn slice_axis1(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(1), ndarray::Slice::from(start..end))
            .to_owned();
        let needs = self.ng(a);
        self.push(v, Op::SliceAxis1(a, start, end), needs)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let needs = self.ng(a);
        self.push(v, Op::Reshape(a), needs)
    }

    /// `out[i] = a[perm[i]]` along axis 0.
    pub fn permute_axis0(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        let src = &self.nodes[a.0].value;
        let v = src.select(Axis(0), perm);
        let needs = self.ng(a);
        self.push(v, Op::PermuteAxis0(a, perm.to_vec()), needs)
    }

    /// `x [N,I] * w [O,I]^T + b [O] -> [N,O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = &self.nodes[b.0].value;
        let mut v = xv.dot(&wv.t());
        for mut row in v.rows_mut() {
            for (o, bo) in row.iter_mut().zip(bv.iter()) {
                *o += bo;
            }
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let v = kernels::conv2d_forward(&xv, &wv, &bv, stride, pad);
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    pub fn maxpool2d(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (v, argmax) = kernels::maxpool_forward(&xv, kernel, stride, pad);
        let needs = self.ng(x);
        self.push(v.into_dyn(), Op::MaxPool2d { x, argmax }, needs)
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let v = kernels::upsample_nearest2x(&xv);
        let needs = self.ng(x);
        self.push(v.into_dyn(), Op::UpsampleNearest2x(x), needs)
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, _, _) = xv.dim();
        let mut v = ndarray::Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                v[[ni, ci]] = xv.index_axis(Axis(0), ni).index_axis(Axis(0), ci).mean().unwrap();
            }
        }
        let needs = self.ng(x);
        self.push(v.into_dyn(), Op::GlobalAvgPool(x), needs)
    }

    /// Renormalize each (sample, channel) plane of `x` to the mean/std given
    /// by `beta`/`gamma` (`[N,C]` each). Population statistics with `eps`
    /// added under the square root.
    pub fn adain(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[beta.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert_eq!(gv.dim(), (n, c), "adain gamma shape");
        assert_eq!(bv.dim(), (n, c), "adain beta shape");
        let m = (h * w) as f64;
        let mut mu = ndarray::Array2::<f64>::zeros((n, c));
        let mut sigma = ndarray::Array2::<f64>::zeros((n, c));
        let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let plane = xv.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                let mean = plane.sum() / m;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let sd = (var + eps).sqrt();
                mu[[ni, ci]] = mean;
                sigma[[ni, ci]] = sd;
                let g = gv[[ni, ci]];
                let b = bv[[ni, ci]];
                let mut o = out.index_axis_mut(Axis(0), ni);
                let mut o = o.index_axis_mut(Axis(0), ci);
                o.assign(&plane.mapv(|v| g * (v - mean) / sd + b));
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out.into_dyn(),
            Op::AdaIn { x, gamma, beta, mu, sigma },
            needs,
        )
    }

    /// Closed-form KL(N(mu, diag(exp(logvar))) || N(0, I)) summed over the
    /// feature axis and averaged over rows.
    pub fn kl_std_normal(&mut self, mu: NodeId, logvar: NodeId) -> NodeId {
        let mv = self.nodes[mu.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let lv = self.nodes[logvar.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let n = mv.nrows() as f64;
        let mut total = 0.0;
        for (m, l) in mv.iter().zip(lv.iter()) {
            total += 0.5 * (m * m + l.exp() - 1.0 - l);
        }
        let needs = self.ng(mu) || self.ng(logvar);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total / n),
            Op::KlStdNormal { mu, logvar },
            needs,
        )
    }

    /// Copy of `a` through which no gradient flows.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::Detach(a), false)
    }

    /// Mean absolute difference, `mean(|a - b|)`.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// Reverse pass from the scalar `loss` node; returns parameter gradients.
    pub fn backward(&mut self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Some(pid) = self.nodes[i].param {
                out.accumulate(pid, &g);
            }
            self.step_backward(i, &g, &mut grads);
        }
        out
    }

    fn step_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let send = |id: NodeId, contrib: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.mapv(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                send(*a, g * &self.nodes[b.0].value, grads);
                send(*b, g * &self.nodes[a.0].value, grads);
            }
            Op::Scale(a, s) => send(*a, g.mapv(|x| x * s), grads),
            Op::AddScalar(a, _) => send(*a, g.clone(), grads),
            Op::Abs(a) => {
                let sign = self.nodes[a.0].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                send(*a, g * &sign, grads);
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                send(*a, g * &mask, grads);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                send(*a, g * &(y * &y.mapv(|v| 1.0 - v)), grads);
            }
            Op::Exp(a) => send(*a, g * &node.value, grads),
            Op::Ln(a) => send(*a, g / &self.nodes[a.0].value, grads),
            Op::Clamp(a, lo, hi) => {
                let mask = self.nodes[a.0]
                    .value
                    .mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                send(*a, g * &mask, grads);
            }
            Op::MeanAll(a) => {
                let src = &self.nodes[a.0].value;
                let scale = g.iter().next().unwrap() / src.len() as f64;
                send(*a, ArrayD::from_elem(src.raw_dim(), scale), grads);
            }
            Op::SumAll(a) => {
                let src = &self.nodes[a.0].value;
                let scale = *g.iter().next().unwrap();
                send(*a, ArrayD::from_elem(src.raw_dim(), scale), grads);
            }
            Op::RowMean(a) => {
                let src = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let n = src.nrows();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = ndarray::Array2::<f64>::zeros(src.raw_dim());
                for mut row in da.rows_mut() {
                    row.assign(&gv.index_axis(Axis(0), 0).mapv(|x| x / n as f64));
                }
                send(*a, da.into_dyn(), grads);
            }
            Op::RowBroadcastMul(a, b) => {
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                send(*a, (&gv * &bv).into_dyn(), grads);
                let db = (&gv * &av).sum_axis(Axis(0)).insert_axis(Axis(0));
                send(*b, db.into_dyn(), grads);
            }
            Op::RowBroadcastAdd(a, b) => {
                send(*a, g.clone(), grads);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let db = gv.sum_axis(Axis(0)).insert_axis(Axis(0));
                send(*b, db.into_dyn(), grads);
            }
            Op::ConcatAxis1(parts) => {
                let mut offset = 0usize;
                for p in parts {
                    let width = self.nodes[p.0].value.shape()[1];
                    let piece = g
                        .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + width))
                        .to_owned();
                    send(*p, piece, grads);
                    offset += width;
                }
            }
            Op::SliceAxis1(a, start, end) => {
                let mut da = ArrayD::<f64>::zeros(self.nodes[a.0].value.raw_dim());
                da.slice_axis_mut(Axis(1), ndarray::Slice::from(*start..*end))
                    .assign(g);
                send(*a, da, grads);
            }
            Op::Reshape(a) => {
                let da = g
                    .clone()
                    .into_shape_with_order(self.nodes[a.0].value.raw_dim())
                    .unwrap();
                send(*a, da, grads);
            }
            Op::PermuteAxis0(a, perm) => {
                let mut da = ArrayD::<f64>::zeros(self.nodes[a.0].value.raw_dim());
                for (dst, &src) in perm.iter().enumerate() {
                    let mut slot = da.index_axis_mut(Axis(0), src);
                    let gi = g.index_axis(Axis(0), dst);
                    slot += &gi;
                }
                send(*a, da, grads);
            }
            Op::Linear { x, w, b } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.nodes[x.0].needs_grad {
                    send(*x, gv.dot(&wv).into_dyn(), grads);
                }
                if self.nodes[w.0].needs_grad {
                    send(*w, gv.t().dot(&xv).into_dyn(), grads);
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, gv.sum_axis(Axis(0)).into_dyn(), grads);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dw, db) = kernels::conv2d_backward(
                    &xv,
                    &wv,
                    &gv,
                    *stride,
                    *pad,
                    self.nodes[x.0].needs_grad,
                    self.nodes[w.0].needs_grad,
                );
                if let Some(dx) = dx {
                    send(*x, dx.into_dyn(), grads);
                }
                if let Some(dw) = dw {
                    send(*w, dw.into_dyn(), grads);
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, db.into_dyn(), grads);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let dim = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap().dim();
                let dx = kernels::maxpool_backward(&gv, argmax, dim);
                send(*x, dx.into_dyn(), grads);
            }
            Op::UpsampleNearest2x(x) => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let dx = kernels::upsample_nearest2x_backward(&gv);
                send(*x, dx.into_dyn(), grads);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = xv.dim();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                let m = (h * w) as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        let val = gv[[ni, ci]] / m;
                        dx.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .fill(val);
                    }
                }
                send(*x, dx.into_dyn(), grads);
            }
            Op::AdaIn { x, gamma, beta, mu, sigma } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let gout = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = xv.dim();
                let m = (h * w) as f64;
                let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                let mut dgamma = ndarray::Array2::<f64>::zeros((n, c));
                let mut dbeta = ndarray::Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let mean = mu[[ni, ci]];
                        let sd = sigma[[ni, ci]];
                        let gam = gv[[ni, ci]];
                        let plane = xv.index_axis(Axis(0), ni);
                        let plane = plane.index_axis(Axis(0), ci);
                        let gplane = gout.index_axis(Axis(0), ni);
                        let gplane = gplane.index_axis(Axis(0), ci);
                        let khat = plane.mapv(|v| (v - mean) / sd);
                        dbeta[[ni, ci]] = gplane.sum();
                        dgamma[[ni, ci]] = (&gplane * &khat).sum();
                        // d/dk of gamma * (k - mean)/sd, through mean and sd
                        let dkhat = gplane.mapv(|v| v * gam);
                        let mean_dkhat = dkhat.sum() / m;
                        let mean_dkhat_khat = (&dkhat * &khat).sum() / m;
                        let mut target = dx.index_axis_mut(Axis(0), ni);
                        let mut target = target.index_axis_mut(Axis(0), ci);
                        target.assign(
                            &((&dkhat - mean_dkhat - &khat.mapv(|v| v * mean_dkhat_khat))
                                / sd),
                        );
                    }
                }
                send(*x, dx.into_dyn(), grads);
                send(*gamma, dgamma.into_dyn(), grads);
                send(*beta, dbeta.into_dyn(), grads);
            }
            Op::KlStdNormal { mu, logvar } => {
                let mv = self.nodes[mu.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let lv = self.nodes[logvar.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let n = mv.nrows() as f64;
                let scale = g.iter().next().unwrap() / n;
                send(*mu, mv.mapv(|m| scale * m).into_dyn(), grads);
                send(
                    *logvar,
                    lv.mapv(|l| scale * 0.5 * (l.exp() - 1.0)).into_dyn(),
                    grads,
                );
            }
        }
    }
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
