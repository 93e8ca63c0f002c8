use crate::kernels::{self, ConvGeom};
use crate::{GraphError, ParamId, ParamStore, Real, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Clamp(Var, T, T),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    WeightedMean(Var, Rc<ArrayD<T>>),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm(Var, Rc<Vec<T>>),
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMulT(Var, Var),
    MulChannel(Var, Var),
    Softmax(Var, usize),
    Stack(Vec<Var>, usize),
    Concat(Vec<Var>, usize),
    Select(Var, usize, usize),
    Gather(Var, Rc<Vec<(usize, usize, usize)>>),
    L2NormalizeRows(Var, T),
    CrossEntropyRows(Var, Rc<Vec<usize>>),
}

struct Node<T: Real> {
    value: Rc<ArrayD<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
///
/// All methods take `&self`; handles are plain indices so expressions can be
/// nested freely. A graph built with [`Graph::inference`] registers
/// parameters as constants and records nothing that needs a gradient.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &ArrayD<impl Real>, b: &ArrayD<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GraphError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank(op: &'static str, a: &ArrayD<impl Real>, expected: usize) -> Result<()> {
    if a.ndim() != expected {
        return Err(GraphError::Rank {
            op,
            expected,
            got: a.shape().to_vec(),
        });
    }
    Ok(())
}

fn scalar<T: Real>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A graph whose parameters are frozen constants.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn any_rg(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Shared handle to a recorded value.
    pub fn value(&self, v: Var) -> Rc<ArrayD<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        *val.iter().next().expect("empty tensor")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input that is not a stored parameter (used by gradient
    /// checks on activations).
    pub fn input(&self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, self.grad_enabled)
    }

    /// Snapshot of a stored parameter.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.get(id).clone();
        if self.grad_enabled {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    /// Copy of `v` cut from the graph: the result is a constant.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.push(value, Op::Leaf, false)
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, &va, &vb)?;
        let mut out = (*va).clone();
        out.zip_mut_with(&vb, |x, &y| *x = f(*x, y));
        Ok(self.push(out, mk(a, b), self.any_rg(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).mapv(f);
        self.push(out, op, self.rg(a))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(scalar(s), Op::Sum(a), self.rg(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / T::from_f64_lossy(v.len().max(1) as f64);
        self.push(scalar(m), Op::Mean(a), self.rg(a))
    }

    /// `mean(a ⊙ w)` with a constant weight broadcast against `a`.
    pub fn weighted_mean(&self, a: Var, w: ArrayD<T>) -> Result<Var> {
        let va = self.value(a);
        let wb = w
            .broadcast(va.raw_dim())
            .ok_or_else(|| GraphError::ShapeMismatch {
                op: "weighted_mean",
                lhs: va.shape().to_vec(),
                rhs: w.shape().to_vec(),
            })?
            .to_owned();
        let mut acc = T::zero();
        ndarray::Zip::from(&*va).and(&wb).for_each(|&x, &y| acc += x * y);
        let m = acc / T::from_f64_lossy(va.len().max(1) as f64);
        Ok(self.push(scalar(m), Op::WeightedMean(a, Rc::new(wb)), self.rg(a)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.len() != shape.iter().product::<usize>() {
            return Err(GraphError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("element count checked");
        Ok(self.push(out, Op::Reshape(a), self.rg(a)))
    }

    /// Zero-padded 2-D convolution of `[N, Ci, H, W]` with `[Co, Ci, kh, kw]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(vx.shape(), vw.shape(), stride, pad)?;
        let vb = b.map(|b| self.value(b));
        if let Some(vb) = &vb {
            if vb.shape() != [geom.co] {
                return Err(GraphError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![geom.co],
                    rhs: vb.shape().to_vec(),
                });
            }
        }
        let out = kernels::conv2d_forward(&geom, &vx, &vw, vb.as_deref());
        let mut deps = vec![x, w];
        deps.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, self.any_rg(&deps)))
    }

    /// Normalises every `(sample, channel)` plane to zero mean, unit variance.
    pub fn instance_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        rank("instance_norm", &vx, 4)?;
        let (y, inv) = kernels::instance_norm_forward(&vx, eps);
        Ok(self.push(y, Op::InstanceNorm(x, Rc::new(inv)), self.rg(x)))
    }

    pub fn upsample_nearest2x(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        rank("upsample_nearest2x", &vx, 4)?;
        let out = kernels::upsample_nearest2x(&vx);
        Ok(self.push(out, Op::Upsample2x(x), self.rg(x)))
    }

    /// `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        rank("global_avg_pool", &vx, 4)?;
        let out = vx
            .mean_axis(Axis(3))
            .and_then(|m| m.mean_axis(Axis(2)))
            .ok_or_else(|| GraphError::Invalid {
                op: "global_avg_pool",
                msg: "empty spatial grid".into(),
            })?;
        Ok(self.push(out, Op::GlobalAvgPool(x), self.rg(x)))
    }

    /// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        rank("linear input", &vx, 2)?;
        rank("linear weight", &vw, 2)?;
        if vx.shape()[1] != vw.shape()[1] {
            return Err(GraphError::ShapeMismatch {
                op: "linear",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<T>::zeros((x2.nrows(), w2.nrows()));
        general_mat_mul(T::one(), &x2, &w2.t(), T::zero(), &mut out);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [w2.nrows()] {
                return Err(GraphError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![w2.nrows()],
                    rhs: vb.shape().to_vec(),
                });
            }
            let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out += &b1;
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        Ok(self.push(out.into_dyn(), Op::Linear { x, w, b }, self.any_rg(&deps)))
    }

    /// `a · bᵀ` for `a: [P, D]`, `b: [Q, D]`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        rank("matmul_t", &va, 2)?;
        rank("matmul_t", &vb, 2)?;
        if va.shape()[1] != vb.shape()[1] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul_t",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<T>::zeros((a2.nrows(), b2.nrows()));
        general_mat_mul(T::one(), &a2, &b2.t(), T::zero(), &mut out);
        Ok(self.push(out.into_dyn(), Op::MatMulT(a, b), self.any_rg(&[a, b])))
    }

    /// Scales every channel plane of `x: [N, C, H, W]` by `gate: [N, C]`.
    pub fn mul_channel(&self, x: Var, gate: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gate));
        rank("mul_channel", &vx, 4)?;
        if vg.shape() != &vx.shape()[..2] {
            return Err(GraphError::ShapeMismatch {
                op: "mul_channel",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let g4 = vg
            .view()
            .into_shape_with_order(IxDyn(&[vx.shape()[0], vx.shape()[1], 1, 1]))
            .map_err(|e| GraphError::Invalid {
                op: "mul_channel",
                msg: e.to_string(),
            })?;
        let out = &*vx * &g4;
        Ok(self.push(out, Op::MulChannel(x, gate), self.any_rg(&[x, gate])))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() {
            return Err(GraphError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for {:?}", vx.shape()),
            });
        }
        let mut out = (*vx).clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let m = lane.iter().copied().fold(T::neg_infinity(), T::max);
            lane.mapv_inplace(|v| (v - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        Ok(self.push(out, Op::Softmax(x, axis), self.rg(x)))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let first = vals.first().ok_or_else(|| GraphError::Invalid {
            op: "stack",
            msg: "no inputs".into(),
        })?;
        for v in &vals[1..] {
            same_shape("stack", first, v)?;
        }
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::stack(Axis(axis), &views).map_err(|e| GraphError::Invalid {
            op: "stack",
            msg: e.to_string(),
        })?;
        Ok(self.push(out, Op::Stack(xs.to_vec(), axis), self.any_rg(xs)))
    }

    /// Joins tensors along an existing axis.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).map_err(|e| GraphError::Invalid {
            op: "concat",
            msg: e.to_string(),
        })?;
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), self.any_rg(xs)))
    }

    /// Slice at `index` along `axis`, dropping the axis.
    pub fn select(&self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() || index >= vx.shape()[axis] {
            return Err(GraphError::Invalid {
                op: "select",
                msg: format!("index {index} on axis {axis} of {:?}", vx.shape()),
            });
        }
        let out = vx.index_axis(Axis(axis), index).to_owned();
        Ok(self.push(out, Op::Select(x, axis, index), self.rg(x)))
    }

    /// Channel vectors of `x: [N, C, H, W]` at `(n, h, w)` positions → `[P, C]`.
    pub fn gather_positions(&self, x: Var, positions: &[(usize, usize, usize)]) -> Result<Var> {
        let vx = self.value(x);
        rank("gather_positions", &vx, 4)?;
        let sh = vx.shape();
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        let c = sh[1];
        let mut out = Array2::<T>::zeros((positions.len(), c));
        for (row, &(n, h, w)) in positions.iter().enumerate() {
            if n >= sh[0] || h >= sh[2] || w >= sh[3] {
                return Err(GraphError::Invalid {
                    op: "gather_positions",
                    msg: format!("position {:?} outside grid {:?}", (n, h, w), sh),
                });
            }
            for ch in 0..c {
                out[[row, ch]] = x4[[n, ch, h, w]];
            }
        }
        Ok(self.push(
            out.into_dyn(),
            Op::Gather(x, Rc::new(positions.to_vec())),
            self.rg(x),
        ))
    }

    /// Rows divided by their Euclidean norm (floored at `eps`).
    pub fn l2_normalize_rows(&self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        rank("l2_normalize_rows", &vx, 2)?;
        let eps = T::from_f64_lossy(eps);
        let mut out = (*vx).clone();
        for mut row in out.lanes_mut(Axis(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            row.mapv_inplace(|v| v / n);
        }
        Ok(self.push(out, Op::L2NormalizeRows(x, eps), self.rg(x)))
    }

    /// Per-row softmax cross-entropy of `logits: [P, Q]` against class
    /// indices; returns `[P]`.
    pub fn cross_entropy_rows(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        rank("cross_entropy_rows", &vl, 2)?;
        let (p, q) = (vl.shape()[0], vl.shape()[1]);
        if targets.len() != p || targets.iter().any(|&t| t >= q) {
            return Err(GraphError::Invalid {
                op: "cross_entropy_rows",
                msg: format!("{} targets for {p}x{q} logits", targets.len()),
            });
        }
        let l2 = vl.view().into_dimensionality::<Ix2>().unwrap();
        let out = Array1::from_shape_fn(p, |i| {
            let row = l2.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            lse - row[targets[i]]
        });
        Ok(self.push(
            out.into_dyn(),
            Op::CrossEntropyRows(logits, Rc::new(targets.to_vec())),
            self.rg(logits),
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let rv = &nodes[root.0].value;
        if rv.len() != 1 {
            return Err(GraphError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(ArrayD::from_elem(rv.raw_dim(), T::one()));
        let mut params: BTreeMap<ParamId, ArrayD<T>> = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let leaf = matches!(node.op, Op::Leaf | Op::Param(_));
            backprop_node(&nodes, node, &dy, &mut grads, &mut params);
            if leaf {
                grads[i] = Some(dy);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn acc<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<ArrayD<T>>],
    v: Var,
    delta: ArrayD<T>,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    dy: &ArrayD<T>,
    grads: &mut [Option<ArrayD<T>>],
    params: &mut BTreeMap<ParamId, ArrayD<T>>,
) {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Param(id) => match params.get_mut(id) {
            Some(g) => *g += dy,
            None => {
                params.insert(*id, dy.clone());
            }
        },
        Op::Add(a, b) => {
            acc(nodes, grads, *a, dy.clone());
            acc(nodes, grads, *b, dy.clone());
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, dy.clone());
            acc(nodes, grads, *b, dy.mapv(|v| -v));
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                acc(nodes, grads, *a, dy * &**val(*b));
            }
            if rg(*b) {
                acc(nodes, grads, *b, dy * &**val(*a));
            }
        }
        Op::Scale(a, c) => acc(nodes, grads, *a, dy.mapv(|v| v * *c)),
        Op::AddScalar(a) | Op::Reshape(a) => {
            let d = dy
                .clone()
                .into_shape_with_order(val(*a).raw_dim())
                .expect("reshape backward");
            acc(nodes, grads, *a, d)
        }
        Op::Relu(a) => {
            let mut d = dy.clone();
            d.zip_mut_with(&**val(*a), |g, &x| {
                if x <= T::zero() {
                    *g = T::zero()
                }
            });
            acc(nodes, grads, *a, d)
        }
        Op::LeakyRelu(a, s) => {
            let mut d = dy.clone();
            d.zip_mut_with(&**val(*a), |g, &x| {
                if x <= T::zero() {
                    *g *= *s
                }
            });
            acc(nodes, grads, *a, d)
        }
        Op::Sigmoid(a) => {
            let mut d = dy.clone();
            d.zip_mut_with(&**y, |g, &s| *g = *g * s * (T::one() - s));
            acc(nodes, grads, *a, d)
        }
        Op::Clamp(a, lo, hi) => {
            let mut d = dy.clone();
            d.zip_mut_with(&**val(*a), |g, &x| {
                if x <= *lo || x >= *hi {
                    *g = T::zero()
                }
            });
            acc(nodes, grads, *a, d)
        }
        Op::Abs(a) => {
            let mut d = dy.clone();
            d.zip_mut_with(&**val(*a), |g, &x| {
                *g = if x > T::zero() {
                    *g
                } else if x < T::zero() {
                    -*g
                } else {
                    T::zero()
                }
            });
            acc(nodes, grads, *a, d)
        }
        Op::Square(a) => {
            let mut d = dy.clone();
            d.zip_mut_with(&**val(*a), |g, &x| *g *= x + x );
            acc(nodes, grads, *a, d)
        }
        Op::Sum(a) => {
            let g = *dy.iter().next().unwrap();
            acc(nodes, grads, *a, ArrayD::from_elem(val(*a).raw_dim(), g))
        }
        Op::Mean(a) => {
            let va = val(*a);
            let g = *dy.iter().next().unwrap() / T::from_f64_lossy(va.len().max(1) as f64);
            acc(nodes, grads, *a, ArrayD::from_elem(va.raw_dim(), g))
        }
        Op::WeightedMean(a, w) => {
            let va = val(*a);
            let g = *dy.iter().next().unwrap() / T::from_f64_lossy(va.len().max(1) as f64);
            acc(nodes, grads, *a, w.mapv(|v| v * g))
        }
        Op::Conv2d { x, w, b, geom } => {
            let need_dx = rg(*x);
            let need_dw = rg(*w);
            let (dx, dw, db) =
                kernels::conv2d_backward(geom, val(*x), val(*w), dy, need_dx, need_dw);
            if let Some(dx) = dx {
                acc(nodes, grads, *x, dx);
            }
            if need_dw {
                acc(nodes, grads, *w, dw);
            }
            if let Some(b) = b {
                acc(nodes, grads, *b, db);
            }
        }
        Op::InstanceNorm(x, inv) => {
            acc(nodes, grads, *x, kernels::instance_norm_backward(y, inv, dy))
        }
        Op::Upsample2x(x) => acc(nodes, grads, *x, kernels::upsample_nearest2x_backward(dy)),
        Op::GlobalAvgPool(x) => {
            let vx = val(*x);
            let sh = vx.shape();
            let area = T::from_f64_lossy((sh[2] * sh[3]) as f64);
            let d2 = dy.view().into_dimensionality::<Ix2>().unwrap();
            let d = ndarray::Array4::from_shape_fn((sh[0], sh[1], sh[2], sh[3]), |(n, c, _, _)| {
                d2[[n, c]] / area
            });
            acc(nodes, grads, *x, d.into_dyn())
        }
        Op::Linear { x, w, b } => {
            let d2 = dy.view().into_dimensionality::<Ix2>().unwrap();
            if rg(*x) {
                let w2 = val(*w).view().into_dimensionality::<Ix2>().unwrap();
                acc(nodes, grads, *x, d2.dot(&w2).into_dyn());
            }
            if rg(*w) {
                let x2 = val(*x).view().into_dimensionality::<Ix2>().unwrap();
                acc(nodes, grads, *w, d2.t().dot(&x2).into_dyn());
            }
            if let Some(b) = b {
                acc(nodes, grads, *b, d2.sum_axis(Axis(0)).into_dyn());
            }
        }
        Op::MatMulT(a, b) => {
            let d2 = dy.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = val(*a).view().into_dimensionality::<Ix2>().unwrap();
            let b2 = val(*b).view().into_dimensionality::<Ix2>().unwrap();
            if rg(*a) {
                acc(nodes, grads, *a, d2.dot(&b2).into_dyn());
            }
            if rg(*b) {
                acc(nodes, grads, *b, d2.t().dot(&a2).into_dyn());
            }
        }
        Op::MulChannel(x, gate) => {
            let vx = val(*x);
            let vg = val(*gate);
            let sh = vx.shape().to_vec();
            if rg(*x) {
                let g4 = vg
                    .view()
                    .into_shape_with_order(IxDyn(&[sh[0], sh[1], 1, 1]))
                    .unwrap();
                acc(nodes, grads, *x, dy * &g4);
            }
            if rg(*gate) {
                let prod = dy * &**vx;
                let d = prod
                    .sum_axis(Axis(3))
                    .sum_axis(Axis(2));
                acc(nodes, grads, *gate, d);
            }
        }
        Op::Softmax(x, axis) => {
            let mut d = dy * &**y;
            let s = d.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
            let sb = s.broadcast(y.raw_dim()).unwrap().to_owned();
            d.zip_mut_with(&(&**y * &sb), |g, &v| *g -= v);
            acc(nodes, grads, *x, d)
        }
        Op::Stack(xs, axis) => {
            for (i, &v) in xs.iter().enumerate() {
                if rg(v) {
                    acc(nodes, grads, v, dy.index_axis(Axis(*axis), i).to_owned());
                }
            }
        }
        Op::Concat(xs, axis) => {
            let mut start = 0;
            for &v in xs {
                let len = val(v).shape()[*axis];
                if rg(v) {
                    let part = dy
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    acc(nodes, grads, v, part);
                }
                start += len;
            }
        }
        Op::Select(x, axis, index) => {
            let mut d = ArrayD::zeros(val(*x).raw_dim());
            d.index_axis_mut(Axis(*axis), *index).assign(dy);
            acc(nodes, grads, *x, d)
        }
        Op::Gather(x, positions) => {
            let mut d = ndarray::Array4::<T>::zeros(
                val(*x)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .raw_dim(),
            );
            let d2 = dy.view().into_dimensionality::<Ix2>().unwrap();
            for (row, &(n, h, w)) in positions.iter().enumerate() {
                for ch in 0..d2.ncols() {
                    d[[n, ch, h, w]] += d2[[row, ch]];
                }
            }
            acc(nodes, grads, *x, d.into_dyn())
        }
        Op::L2NormalizeRows(x, eps) => {
            let vx = val(*x);
            let mut d = dy.clone();
            for ((mut drow, yrow), xrow) in d
                .lanes_mut(Axis(1))
                .into_iter()
                .zip(y.lanes(Axis(1)))
                .zip(vx.lanes(Axis(1)))
            {
                let n = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                if n <= *eps {
                    drow.mapv_inplace(|g| g / *eps);
                    continue;
                }
                let dot = drow.iter().zip(yrow.iter()).map(|(&g, &v)| g * v).sum::<T>();
                for (g, &v) in drow.iter_mut().zip(yrow.iter()) {
                    *g = (*g - v * dot) / n;
                }
            }
            acc(nodes, grads, *x, d)
        }
        Op::CrossEntropyRows(logits, targets) => {
            let vl = val(*logits);
            let mut d = (**vl).clone();
            for (i, mut row) in d.lanes_mut(Axis(1)).into_iter().enumerate() {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                row.mapv_inplace(|v| (v - m).exp());
                let s = row.sum();
                let gi = dy[[i]];
                row.mapv_inplace(|v| v / s * gi);
                row[targets[i]] -= gi;
            }
            acc(nodes, grads, *logits, d)
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real> {
    nodes: Vec<Option<ArrayD<T>>>,
    params: BTreeMap<ParamId, ArrayD<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to a leaf created by
    /// [`Graph::input`] or [`Graph::param`]. `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Summed gradient over every snapshot of a parameter.
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ArrayD<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }
}
