use std::collections::{BTreeSet, HashMap};
use std::fmt;

use super::kernels::{self, col2im, gemm, im2col, ConvGeom};
use super::{Group, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation defined outside the engine.
///
/// The caller computes the forward value itself and hands it to
/// [`Graph::custom`] together with the op; the op only has to produce
/// input gradients from the output gradient.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one entry per input. Entries for inputs whose `needs` flag is
    /// false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Abs(Var),
    Ln(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Reshape(Var),
    StraightThrough(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    Gdn {
        x: Var,
        beta: Var,
        gamma: Var,
        inverse: bool,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Ln(..) => "ln",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Reshape(..) => "reshape",
            Op::StraightThrough(..) => "round_ste",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::Gdn { inverse: false, .. } => "gdn",
            Op::Gdn { inverse: true, .. } => "igdn",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Ln(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::LeakyRelu(a, _)
            | Op::Reshape(a)
            | Op::StraightThrough(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Gdn { x, beta, gamma, .. } => vec![*x, *beta, *gamma],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Tape of operations in creation (hence topological) order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    /// When set, only parameters of these groups are bound as trainable.
    trainable: Option<BTreeSet<Group>>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph in which only parameters of `groups` track gradients; all
    /// other parameters are bound as constants.
    pub fn with_trainable(groups: impl IntoIterator<Item = Group>) -> Self {
        Self {
            trainable: Some(groups.into_iter().collect()),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the operation that produced `v`, e.g. `"conv2d"` or the
    /// [`CustomOp::name`] of a custom node.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Direct inputs of `v`.
    pub fn op_inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// All nodes produced by the operation called `name`, in creation order.
    pub fn nodes_of(&self, name: &str) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.name() == name)
            .map(Var)
            .collect()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false, None)
    }

    /// A gradient-tracking leaf that is not a named parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true, None)
    }

    /// Binds parameter `name`. Binding the same name twice returns the same
    /// node, so shared weights accumulate gradient across uses.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = params.get(name)?;
        let trainable = self
            .trainable
            .as_ref()
            .is_none_or(|groups| groups.contains(&p.group));
        let v = self.push_node(p.value.clone(), Op::Leaf, trainable, Some(name.to_string()));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite(&format!("{} (node {})", op.name(), self.nodes.len()))?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad, None))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, 0.0)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    /// Rounds half away from zero; the backward pass treats it as identity.
    pub fn round_ste(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::round);
        self.push(v, Op::StraightThrough(a))
    }

    /// Cross-correlation of `x` (`N x C x H x W`) with `w` (`O x C x k x k`)
    /// plus per-channel bias `b` (`O`).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, k, k2) = self.value(w).dims4().map_err(|_| {
            Error::shape(format!("conv2d weight must be [out, in, k, k], got {:?}", self.shape(w)))
        })?;
        if wc != c || k != k2 {
            return Err(Error::shape(format!(
                "conv2d: input channels (axis 1) {c} vs weight {:?}",
                self.shape(w)
            )));
        }
        if self.shape(b) != [o] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?}, expected [{o}]",
                self.shape(b)
            )));
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, padding).ok_or_else(|| {
            Error::shape(format!(
                "conv2d: spatial axes (2, 3) of size {h}x{wd} too small for kernel {k} with padding {padding}"
            ))
        })?;
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let plane = geom.col_cols();
        let mut out = vec![0.0; n * o * plane];
        let mut cols = vec![0.0; geom.col_rows() * plane];
        for i in 0..n {
            let xi = &xt.data()[i * c * h * wd..(i + 1) * c * h * wd];
            im2col(xi, &geom, &mut cols);
            let oi = &mut out[i * o * plane..(i + 1) * o * plane];
            for (ch, row) in oi.chunks_mut(plane).enumerate() {
                row.fill(bt.data()[ch]);
            }
            gemm(false, false, o, plane, geom.col_rows(), 1.0, wt.data(), &cols, 1.0, oi);
        }
        let value = Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], out);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        )
    }

    /// Transposed convolution with weight `w` (`C_in x C_out x k x k`).
    /// Output size per axis is `(in - 1) * stride - 2 * padding + k + output_padding`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        self.conv2d_transpose_hw(x, w, b, stride, padding, (output_padding, output_padding))
    }

    /// [`Graph::conv2d_transpose`] with separate output padding for the
    /// height and width axes.
    pub fn conv2d_transpose_hw(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        output_padding: (usize, usize),
    ) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (wci, co, k, k2) = self.value(w).dims4().map_err(|_| {
            Error::shape(format!(
                "conv2d_transpose weight must be [in, out, k, k], got {:?}",
                self.shape(w)
            ))
        })?;
        if wci != ci || k != k2 {
            return Err(Error::shape(format!(
                "conv2d_transpose: input channels (axis 1) {ci} vs weight {:?}",
                self.shape(w)
            )));
        }
        if self.shape(b) != [co] {
            return Err(Error::shape(format!(
                "conv2d_transpose: bias shape {:?}, expected [{co}]",
                self.shape(b)
            )));
        }
        let (op_h, op_w) = output_padding;
        if stride == 0 || op_h >= stride || op_w >= stride {
            return Err(Error::shape(format!(
                "conv2d_transpose: output_padding {output_padding:?} must be smaller than stride {stride}"
            )));
        }
        let out_h = ((h - 1) * stride + k + op_h)
            .checked_sub(2 * padding)
            .ok_or_else(|| Error::shape("conv2d_transpose: padding exceeds output size"))?;
        let out_w = ((wd - 1) * stride + k + op_w)
            .checked_sub(2 * padding)
            .ok_or_else(|| Error::shape("conv2d_transpose: padding exceeds output size"))?;
        let geom = transpose_geom(co, out_h, out_w, k, stride, padding, h, wd)?;
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let pin = h * wd;
        let pout = out_h * out_w;
        let mut out = vec![0.0; n * co * pout];
        let mut cols = vec![0.0; geom.col_rows() * pin];
        for i in 0..n {
            let xi = &xt.data()[i * ci * pin..(i + 1) * ci * pin];
            gemm(true, false, geom.col_rows(), pin, ci, 1.0, wt.data(), xi, 0.0, &mut cols);
            let oi = &mut out[i * co * pout..(i + 1) * co * pout];
            col2im(&cols, &geom, oi);
            for (ch, row) in oi.chunks_mut(pout).enumerate() {
                let bias = bt.data()[ch];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::from_parts(vec![n, co, out_h, out_w], out);
        self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        )
    }

    /// Generalized divisive normalization over channels at each site:
    /// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`, or the product for
    /// the inverse transform.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(beta) != [c] || self.shape(gamma) != [c, c] {
            return Err(Error::shape(format!(
                "gdn: beta {:?} / gamma {:?} do not match {c} channels",
                self.shape(beta),
                self.shape(gamma)
            )));
        }
        if let Some(i) = self.value(beta).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::Parameterization(format!(
                "gdn beta[{i}] = {} is not positive",
                self.value(beta).data()[i]
            )));
        }
        if let Some(i) = self.value(gamma).data().iter().position(|&v| v < 0.0) {
            return Err(Error::Parameterization(format!(
                "gdn gamma element {i} = {} is negative",
                self.value(gamma).data()[i]
            )));
        }
        let p = if inverse { 0.5 } else { -0.5 };
        let plane = h * w;
        let (xt, bt, gt) = (self.value(x), self.value(beta), self.value(gamma));
        let mut out = vec![0.0; n * c * plane];
        let mut norm = vec![0.0; c * plane];
        for i in 0..n {
            let xi = &xt.data()[i * c * plane..(i + 1) * c * plane];
            gdn_norm(xi, bt.data(), gt.data(), c, plane, &mut norm);
            let oi = &mut out[i * c * plane..(i + 1) * c * plane];
            for ((o, &xv), &nv) in oi.iter_mut().zip(xi).zip(&norm) {
                *o = xv * nv.powf(p);
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(
            value,
            Op::Gdn {
                x,
                beta,
                gamma,
                inverse,
            },
        )
    }

    /// Records a fused op whose forward `value` was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Every node reachable from the
    /// loss is visited once, in reverse creation order; gradients of nodes
    /// consumed more than once are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &g)?;
            for (input, grad) in contributions {
                grad.check_finite(&format!(
                    "gradient of {} (node {idx}) w.r.t. node {}",
                    node.op.name(),
                    input.0
                ))?;
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and stores the gradient of every bound,
    /// trainable parameter into `params`. Parameters that the loss does not
    /// reach receive a zero gradient.
    pub fn backward_into(&self, loss: Var, params: &mut ParameterSet) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (name, &v) in &self.bound {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let p = params.get_mut(name)?;
            p.grad = Some(
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape())),
            );
        }
        Ok(grads)
    }

    /// Names of parameters bound with gradient tracking.
    pub fn trainable_params(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .nodes
            .iter()
            .filter(|n| n.requires_grad)
            .filter_map(|n| n.param.as_deref())
            .collect();
        names.sort_unstable();
        names
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        let unary = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let x = self.value(a);
            Tensor::from_parts(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                    .collect(),
            )
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let t = zip_with(g, self.value(*b), |gv, bv| gv * bv);
                    out.push((*a, t));
                }
                if self.needs(*b) {
                    let t = zip_with(g, self.value(*a), |gv, av| gv * av);
                    out.push((*b, t));
                }
            }
            Op::Scale(a, k) => out.push((*a, g.map(|v| v * k))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::Sum(a) => {
                let gv = g.data()[0];
                out.push((*a, Tensor::full(self.shape(*a), gv)));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                out.push((*a, Tensor::full(self.shape(*a), g.data()[0] / n)));
            }
            Op::Square(a) => out.push((*a, unary(*a, &|x, _, gv| 2.0 * x * gv))),
            Op::Abs(a) => out.push((
                *a,
                unary(*a, &|x, _, gv| match x.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => gv,
                    Some(std::cmp::Ordering::Less) => -gv,
                    _ => 0.0,
                }),
            )),
            Op::Ln(a) => out.push((*a, unary(*a, &|x, _, gv| gv / x))),
            Op::Sigmoid(a) => out.push((*a, unary(*a, &|_, y, gv| gv * y * (1.0 - y)))),
            Op::Softplus(a) => out.push((*a, unary(*a, &|x, _, gv| gv * kernels::sigmoid(x)))),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                out.push((*a, unary(*a, &|x, _, gv| if x > 0.0 { gv } else { s * gv })));
            }
            Op::Reshape(a) | Op::StraightThrough(a) => {
                out.push((*a, g.clone().reshape(self.shape(*a))?));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => out.extend(self.conv2d_backward(*x, *w, *b, *stride, *padding, g)),
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            } => out.extend(self.conv2d_transpose_backward(*x, *w, *b, *stride, *padding, g)?),
            Op::Gdn {
                x,
                beta,
                gamma,
                inverse,
            } => out.extend(self.gdn_backward(*x, *beta, *gamma, *inverse, g)),
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let grads = op.backward(&values, &node.value, g, &needs)?;
                for ((&v, grad), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (true, Some(grad)) = (need, grad) {
                        if grad.shape() != self.shape(v) {
                            return Err(Error::shape(format!(
                                "{} returned gradient of shape {:?} for input of shape {:?}",
                                op.name(),
                                grad.shape(),
                                self.shape(v)
                            )));
                        }
                        out.push((v, grad));
                    }
                }
            }
        }
        Ok(out)
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        g: &Tensor,
    ) -> Vec<(Var, Tensor)> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, c, h, wd) = xt.dims4().expect("checked in forward");
        let (o, _, k, _) = wt.dims4().expect("checked in forward");
        let geom = ConvGeom::new(c, h, wd, k, stride, padding).expect("checked in forward");
        let plane = geom.col_cols();
        let rows = geom.col_rows();
        let (need_x, need_w, need_b) = (self.needs(x), self.needs(w), self.needs(b));
        let mut dx = need_x.then(|| vec![0.0; xt.numel()]);
        let mut dw = need_w.then(|| vec![0.0; wt.numel()]);
        let mut db = need_b.then(|| vec![0.0; o]);
        let mut cols = vec![0.0; rows * plane];
        for i in 0..n {
            let gi = &g.data()[i * o * plane..(i + 1) * o * plane];
            if let Some(dw) = dw.as_mut() {
                im2col(&xt.data()[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut cols);
                gemm(false, true, o, rows, plane, 1.0, gi, &cols, 1.0, dw);
            }
            if let Some(db) = db.as_mut() {
                for (ch, row) in gi.chunks(plane).enumerate() {
                    db[ch] += row.iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(true, false, rows, plane, o, 1.0, wt.data(), gi, 0.0, &mut cols);
                col2im(&cols, &geom, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
            }
        }
        let mut out = Vec::new();
        if let Some(dx) = dx {
            out.push((x, Tensor::from_parts(xt.shape().to_vec(), dx)));
        }
        if let Some(dw) = dw {
            out.push((w, Tensor::from_parts(wt.shape().to_vec(), dw)));
        }
        if let Some(db) = db {
            out.push((b, Tensor::from_parts(vec![o], db)));
        }
        out
    }

    fn conv2d_transpose_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        g: &Tensor,
    ) -> Result<Vec<(Var, Tensor)>> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, ci, h, wd) = xt.dims4()?;
        let (_, co, k, _) = wt.dims4()?;
        let (_, _, out_h, out_w) = g.dims4()?;
        let geom = transpose_geom(co, out_h, out_w, k, stride, padding, h, wd)?;
        let pin = h * wd;
        let pout = out_h * out_w;
        let rows = geom.col_rows();
        let (need_x, need_w, need_b) = (self.needs(x), self.needs(w), self.needs(b));
        let mut dx = need_x.then(|| vec![0.0; xt.numel()]);
        let mut dw = need_w.then(|| vec![0.0; wt.numel()]);
        let mut db = need_b.then(|| vec![0.0; co]);
        let mut cols = vec![0.0; rows * pin];
        for i in 0..n {
            let gi = &g.data()[i * co * pout..(i + 1) * co * pout];
            if let Some(db) = db.as_mut() {
                for (ch, row) in gi.chunks(pout).enumerate() {
                    db[ch] += row.iter().sum::<f64>();
                }
            }
            if dx.is_none() && dw.is_none() {
                continue;
            }
            im2col(gi, &geom, &mut cols);
            if let Some(dx) = dx.as_mut() {
                gemm(false, false, ci, pin, rows, 1.0, wt.data(), &cols, 0.0, &mut dx[i * ci * pin..(i + 1) * ci * pin]);
            }
            if let Some(dw) = dw.as_mut() {
                let xi = &xt.data()[i * ci * pin..(i + 1) * ci * pin];
                gemm(false, true, ci, rows, pin, 1.0, xi, &cols, 1.0, dw);
            }
        }
        let mut out = Vec::new();
        if let Some(dx) = dx {
            out.push((x, Tensor::from_parts(xt.shape().to_vec(), dx)));
        }
        if let Some(dw) = dw {
            out.push((w, Tensor::from_parts(wt.shape().to_vec(), dw)));
        }
        if let Some(db) = db {
            out.push((b, Tensor::from_parts(vec![co], db)));
        }
        Ok(out)
    }

    fn gdn_backward(&self, x: Var, beta: Var, gamma: Var, inverse: bool, g: &Tensor) -> Vec<(Var, Tensor)> {
        let (xt, bt, gt) = (self.value(x), self.value(beta), self.value(gamma));
        let (n, c, h, w) = xt.dims4().expect("checked in forward");
        let plane = h * w;
        let p = if inverse { 0.5 } else { -0.5 };
        let (need_x, need_b, need_g) = (self.needs(x), self.needs(beta), self.needs(gamma));
        let mut dx = need_x.then(|| vec![0.0; xt.numel()]);
        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c * c];
        let mut norm = vec![0.0; c * plane];
        let mut t = vec![0.0; c * plane];
        let mut sq = vec![0.0; c * plane];
        let mut back = vec![0.0; c * plane];
        for i in 0..n {
            let range = i * c * plane..(i + 1) * c * plane;
            let xi = &xt.data()[range.clone()];
            let gi = &g.data()[range.clone()];
            gdn_norm(xi, bt.data(), gt.data(), c, plane, &mut norm);
            // t = g * x * p * norm^(p-1): the gradient w.r.t. the normalizer.
            for j in 0..c * plane {
                t[j] = gi[j] * xi[j] * p * norm[j].powf(p - 1.0);
                sq[j] = xi[j] * xi[j];
            }
            if need_b {
                for (ch, row) in t.chunks(plane).enumerate() {
                    dbeta[ch] += row.iter().sum::<f64>();
                }
            }
            if need_g {
                gemm(false, true, c, c, plane, 1.0, &t, &sq, 1.0, &mut dgamma);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(true, false, c, plane, c, 1.0, gt.data(), &t, 0.0, &mut back);
                let dxi = &mut dx[range];
                for j in 0..c * plane {
                    dxi[j] = gi[j] * norm[j].powf(p) + 2.0 * xi[j] * back[j];
                }
            }
        }
        let mut out = Vec::new();
        if let Some(dx) = dx {
            out.push((x, Tensor::from_parts(xt.shape().to_vec(), dx)));
        }
        if need_b {
            out.push((beta, Tensor::from_parts(vec![c], dbeta)));
        }
        if need_g {
            out.push((gamma, Tensor::from_parts(vec![c, c], dgamma)));
        }
        out
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// `norm = beta + gamma * x^2` per site, for one `C x P` image.
fn gdn_norm(x: &[f64], beta: &[f64], gamma: &[f64], c: usize, plane: usize, norm: &mut [f64]) {
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    for (ch, row) in norm.chunks_mut(plane).enumerate() {
        row.fill(beta[ch]);
    }
    gemm(false, false, c, plane, c, 1.0, gamma, &sq, 1.0, norm);
}

/// Geometry of the forward convolution whose adjoint is the transposed
/// convolution producing an `out_h x out_w` map from an `in_h x in_w` one.
#[allow(clippy::too_many_arguments)]
fn transpose_geom(
    out_channels: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    in_h: usize,
    in_w: usize,
) -> Result<ConvGeom> {
    let geom = ConvGeom::new(out_channels, out_h, out_w, k, stride, padding)
        .filter(|g| g.out_h == in_h && g.out_w == in_w)
        .ok_or_else(|| {
            Error::shape(format!(
                "conv2d_transpose: {in_h}x{in_w} input inconsistent with {out_h}x{out_w} output (k={k}, stride={stride}, padding={padding})"
            ))
        })?;
    Ok(geom)
}
