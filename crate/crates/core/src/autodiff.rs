//! Reverse-mode differentiation over the operations the model needs.
//!
//! A [`Tape`] records every primitive application together with its output
//! value. [`Tape::backward`] walks the records in reverse and accumulates
//! gradients for registered parameters. Tapes are single-use and owned by
//! one thread; batch items use separate tapes whose gradients are summed.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, TransposeGeometry};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradient per parameter, iterated in id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<T>) {
        match self.map.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.map.insert(id, g);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, visiting ids in order.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (id, g) in other.map {
            self.insert(id, g);
        }
    }

    pub fn scale(&mut self, k: T) {
        self.map.values_mut().for_each(|g| g.scale_assign(k));
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.sum_sq().as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.first_nonfinite().is_none())
    }
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var, T),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    LeakyRelu(Var, T),
    Sum(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: TransposeGeometry,
    },
    WeightNorm {
        v: Var,
        g: Var,
    },
    Gate {
        pre: Var,
        channels: usize,
    },
    SliceChannels {
        x: Var,
        start: usize,
        len: usize,
    },
    /// `out[i] = x[index[i]]`, zero where the index is `None`.
    Gather {
        x: Var,
        index: Arc<Vec<Option<usize>>>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sum(_) => "sum",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::WeightNorm { .. } => "weight_norm",
            Op::Gate { .. } => "gate",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Gather { .. } => "gather",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param(_))
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    first_nonfinite: Option<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            first_nonfinite: None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.first_nonfinite.is_none() && value.first_nonfinite().is_some() {
            self.first_nonfinite = Some(self.nodes.len());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Total recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Recorded operations, excluding inputs and parameters.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.op.is_leaf()).count()
    }

    /// Fails with the id of the first node whose value is not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            None => Ok(()),
            Some(node) => Err(Error::NonFiniteNode {
                node,
                op: self.nodes[node].op.name(),
            }),
        }
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn offset(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::Offset(a, k), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::ln);
        let ng = self.ng(a);
        self.push(v, Op::Log(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| kernels::leaky_relu(x, slope));
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Var {
        let v = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        )
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: TransposeGeometry) -> Var {
        let v = kernels::conv_transpose2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        self.push(
            v,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        )
    }

    pub fn weight_norm(&mut self, v: Var, g: Var) -> Var {
        let w = kernels::weight_norm(self.value(v), self.value(g).data());
        let ng = self.ng(v) || self.ng(g);
        self.push(w, Op::WeightNorm { v, g }, ng)
    }

    /// `tanh(first half) · sigmoid(second half)` over channel halves of a
    /// `[2c, h, w]` value.
    pub fn gate(&mut self, pre: Var) -> Var {
        let (c2, h, w) = self.value(pre).dims3();
        assert!(c2 % 2 == 0, "gate needs an even channel count");
        let channels = c2 / 2;
        let v = Tensor::from_vec(&[channels, h, w], kernels::gate(self.value(pre).data(), channels));
        let ng = self.ng(pre);
        self.push(v, Op::Gate { pre, channels }, ng)
    }

    /// Channels `start..start + len` of a `[c, h, w]` value.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(start + len <= c, "channel slice out of range");
        let n = h * w;
        let v = Tensor::from_vec(&[len, h, w], self.value(x).data()[start * n..(start + len) * n].to_vec());
        let ng = self.ng(x);
        self.push(v, Op::SliceChannels { x, start, len }, ng)
    }

    /// Index gather producing a tensor of `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<Option<usize>>>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let data = index
            .iter()
            .map(|i| i.map_or(T::zero(), |k| src[k]))
            .collect::<Vec<_>>();
        let v = Tensor::from_vec(shape, data);
        let ng = self.ng(x);
        self.push(v, Op::Gather { x, index }, ng)
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// contributed to it.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, d: Tensor<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&d),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.insert(*id, g),
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(*a, g.zip_map(vb, |x, y| x * y));
                    acc(*b, g.zip_map(va, |x, y| x * y));
                }
                Op::Scale(a, k) => acc(*a, g.map(|x| x * *k)),
                Op::Offset(a, _) => acc(*a, g),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x / y)),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, t| x * (T::one() - t * t))),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, s| x * s * (T::one() - s))),
                Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * (y + y))),
                Op::LeakyRelu(a, slope) => acc(
                    *a,
                    g.zip_map(self.value(*a), |x, y| if y >= T::zero() { x } else { x * *slope }),
                ),
                Op::Sum(a) => {
                    let s = g.item();
                    acc(*a, Tensor::full(self.value(*a).shape(), s));
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_input = self.nodes[input.0].needs_grad;
                    let cg = kernels::conv2d_backward(self.value(*input), self.value(*weight), &g, geom, need_input);
                    if let Some(b) = bias {
                        acc(*b, Tensor::from_vec(&[cg.bias.len()], cg.bias));
                    }
                    acc(*weight, cg.weight);
                    if let Some(gi) = cg.input {
                        acc(*input, gi);
                    }
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let cg = kernels::conv_transpose2d_backward(self.value(*input), self.value(*weight), &g, geom);
                    if let Some(b) = bias {
                        acc(*b, Tensor::from_vec(&[cg.bias.len()], cg.bias));
                    }
                    acc(*weight, cg.weight);
                    if let Some(gi) = cg.input {
                        acc(*input, gi);
                    }
                }
                Op::WeightNorm { v, g: gv } => {
                    let (dv, dg) = kernels::weight_norm_backward(self.value(*v), self.value(*gv).data(), &g);
                    acc(*gv, Tensor::from_vec(self.value(*gv).shape(), dg));
                    acc(*v, dv);
                }
                Op::Gate { pre, channels } => {
                    let d = kernels::gate_backward(self.value(*pre).data(), g.data(), *channels);
                    acc(*pre, Tensor::from_vec(self.value(*pre).shape(), d));
                }
                Op::SliceChannels { x, start, len } => {
                    let xs = self.value(*x);
                    let (_, h, w) = xs.dims3();
                    let n = h * w;
                    let mut d = Tensor::zeros(xs.shape());
                    d.data_mut()[start * n..(start + len) * n].copy_from_slice(g.data());
                    acc(*x, d);
                }
                Op::Gather { x, index } => {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    let dd = d.data_mut();
                    for (i, k) in index.iter().enumerate() {
                        if let Some(k) = k {
                            dd[*k] += g.data()[i];
                        }
                    }
                    acc(*x, d);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_of_three() {
        let mut ps = ParamStore::new();
        let p = ps.add("p", Tensor::scalar(3.0f64));
        let mut tape = Tape::new();
        let v = tape.param(&ps, p);
        let sq = tape.square(v);
        let loss = tape.sum(sq);
        assert_eq!(tape.value(loss).item(), 9.0);
        assert_eq!(tape.op_count(), 2);
        let g = tape.backward(loss);
        assert_eq!(g.get(p).unwrap().item(), 6.0);
    }

    #[test]
    fn nonfinite_forward_names_node() {
        let mut ps = ParamStore::new();
        let p = ps.add("p", Tensor::scalar(-1.0f64));
        let mut tape = Tape::new();
        let v = tape.param(&ps, p);
        let e = tape.exp(v);
        let l = tape.log(v);
        tape.add(e, l);
        match tape.check_finite() {
            Err(Error::NonFiniteNode { node, op }) => assert_eq!((node, op), (2, "log")),
            other => panic!("unexpected {other:?}"),
        }
    }

    type Build = fn(&mut Tape<f64>, &[Var]) -> Var;

    /// Central-difference check of one primitive graph.
    fn check(shapes: &[&[usize]], build: Build, seed: u64, positive: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = Tensor::from_fn(s, |_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if positive {
                        v.abs() + 0.5
                    } else {
                        v
                    }
                });
                ps.add(format!("p{i}"), t)
            })
            .collect();
        let eval = |ps: &ParamStore<f64>| -> (f64, Gradients<f64>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ids.iter().map(|&i| tape.param(ps, i)).collect();
            let out = build(&mut tape, &vars);
            // weight the output so every element matters differently
            let n = tape.value(out).numel();
            let wts = tape.input(Tensor::from_fn(tape.value(out).shape(), |i| 0.3 + (i as f64 * 0.7).sin()));
            let prod = tape.mul(out, wts);
            let loss = tape.sum(prod);
            assert!(n > 0);
            (tape.value(loss).item(), tape.backward(loss))
        };
        let (_, grads) = eval(&ps);
        let eps = 1e-5;
        for &id in &ids {
            let g = grads.get(id).unwrap().clone();
            for k in 0..ps.get(id).numel() {
                let orig = ps.get(id).data()[k];
                ps.get_mut(id).data_mut()[k] = orig + eps;
                let (fp, _) = eval(&ps);
                ps.get_mut(id).data_mut()[k] = orig - eps;
                let (fm, _) = eval(&ps);
                ps.get_mut(id).data_mut()[k] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let an = g.data()[k];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-6, "param {id:?}[{k}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn elementwise_primitive_gradients() {
        check(&[&[5], &[5]], |t, v| t.add(v[0], v[1]), 1, false);
        check(&[&[5], &[5]], |t, v| t.sub(v[0], v[1]), 2, false);
        check(&[&[5], &[5]], |t, v| t.mul(v[0], v[1]), 3, false);
        check(&[&[5]], |t, v| t.scale(v[0], -1.7), 4, false);
        check(&[&[5]], |t, v| t.offset(v[0], 0.4), 5, false);
        check(&[&[5]], |t, v| t.exp(v[0]), 6, false);
        check(&[&[5]], |t, v| t.log(v[0]), 7, true);
        check(&[&[5]], |t, v| t.tanh(v[0]), 8, false);
        check(&[&[5]], |t, v| t.sigmoid(v[0]), 9, false);
        check(&[&[5]], |t, v| t.square(v[0]), 10, false);
        check(&[&[7]], |t, v| t.leaky_relu(v[0], 0.4), 11, false);
        check(&[&[2, 3]], |t, v| t.sum(v[0]), 12, false);
    }

    #[test]
    fn structural_primitive_gradients() {
        check(&[&[4, 2, 3]], |t, v| t.gate(v[0]), 13, false);
        check(&[&[3, 2, 2]], |t, v| t.slice_channels(v[0], 1, 2), 14, false);
        check(
            &[&[2, 3]],
            |t, v| t.gather(v[0], Arc::new(vec![None, Some(5), Some(0), Some(5), Some(2)]), &[5]),
            15,
            false,
        );
        check(&[&[3, 2, 1, 1], &[3]], |t, v| t.weight_norm(v[0], v[1]), 16, false);
    }

    #[test]
    fn convolution_gradients() {
        check(
            &[&[2, 4, 5], &[3, 2, 3, 3], &[3]],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::height_causal(3, 3, 2, 1)),
            17,
            false,
        );
        check(
            &[&[2, 3, 4], &[3, 2, 1, 1], &[3]],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::pointwise()),
            18,
            false,
        );
        check(
            &[&[1, 3, 2], &[1, 1, 3, 4], &[1]],
            |t, v| {
                let g = TransposeGeometry {
                    kh: 3,
                    kw: 4,
                    stride_h: 1,
                    stride_w: 2,
                    pad_h: 1,
                    pad_w: 1,
                };
                t.conv_transpose2d(v[0], v[1], Some(v[2]), g)
            },
            19,
            false,
        );
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let mut ps = ParamStore::new();
        let p = ps.add("p", Tensor::from_vec(&[3], vec![0.2f64, -0.5, 1.1]));
        let grad_of = |a: f64, b: f64| {
            let mut t = Tape::new();
            let v = t.param(&ps, p);
            let e = t.exp(v);
            let l1 = t.sum(e);
            let s = t.tanh(v);
            let l2 = t.sum(s);
            let l1 = t.scale(l1, a);
            let l2 = t.scale(l2, b);
            let loss = t.add(l1, l2);
            t.backward(loss).get(p).unwrap().clone()
        };
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        let g = grad_of(2.5, -0.75);
        for i in 0..3 {
            let expected = 2.5 * g1.data()[i] - 0.75 * g2.data()[i];
            assert!((g.data()[i] - expected).abs() < 1e-14);
        }
    }
}
