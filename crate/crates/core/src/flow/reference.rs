//! Sequential reference transforms used as oracles for the grid flow.
//!
//! Nothing here shares code with the grid implementation: the 1-D network
//! below is written with plain index loops so that agreement between the
//! two is meaningful.

use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::network::ConvNet;
use crate::tensor::Scalar;

/// Fully autoregressive inverse: `z_t = σ_t · x_t + μ_t` where
/// `(μ_t, log σ_t) = f(t, x[..t])`. Returns `(z, Σ log σ)`.
pub fn af_reference_inverse<T: Scalar>(x: &[T], f: impl Fn(usize, &[T]) -> (T, T)) -> (Vec<T>, T) {
    let mut logdet = T::zero();
    let z = (0..x.len())
        .map(|t| {
            let (mu, ls) = f(t, &x[..t]);
            logdet += ls;
            ls.exp() * x[t] + mu
        })
        .collect();
    (z, logdet)
}

/// Sequential sampling direction of the same transform.
pub fn af_reference_forward<T: Scalar>(z: &[T], f: impl Fn(usize, &[T]) -> (T, T)) -> Vec<T> {
    let mut x: Vec<T> = Vec::with_capacity(z.len());
    for t in 0..z.len() {
        let (mu, ls) = f(t, &x[..t]);
        x.push((z[t] - mu) / ls.exp());
    }
    x
}

/// Two-group coupling: `z_a = x_a`, `z_b = σ_b(x_a) · x_b + μ_b(x_a)`.
/// `f` maps `x_a` to `(μ_b, log σ_b)`.
pub fn bipartite_reference<T: Scalar>(
    xa: &[T],
    xb: &[T],
    f: impl Fn(&[T]) -> (Vec<T>, Vec<T>),
) -> (Vec<T>, Vec<T>, T) {
    let (mu, ls) = f(xa);
    let zb = xb
        .iter()
        .zip(mu.iter().zip(&ls))
        .map(|(&x, (&m, &l))| l.exp() * x + m)
        .collect();
    (xa.to_vec(), zb, ls.iter().copied().sum())
}

pub fn bipartite_reference_inverse<T: Scalar>(
    za: &[T],
    zb: &[T],
    f: impl Fn(&[T]) -> (Vec<T>, Vec<T>),
) -> (Vec<T>, Vec<T>) {
    let (mu, ls) = f(za);
    let xb = zb
        .iter()
        .zip(mu.iter().zip(&ls))
        .map(|(&z, (&m, &l))| (z - m) / l.exp())
        .collect();
    (za.to_vec(), xb)
}

struct Dense<T> {
    /// `[out][in]`
    w: Vec<Vec<T>>,
    b: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn from_weights(weight: &[T], bias: &[T], cin: usize) -> Self {
        Self {
            w: weight.chunks(cin).map(<[T]>::to_vec).collect(),
            b: bias.to_vec(),
        }
    }

    fn apply(&self, h: &[Vec<T>], t: usize) -> Vec<T> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, &b)| {
                let mut acc = b;
                for (c, &wv) in row.iter().enumerate() {
                    acc += wv * h[c][t];
                }
                acc
            })
            .collect()
    }
}

struct Layer1d<T> {
    /// `(offset, [out][in])` pairs: output `t` reads input `t + offset`.
    taps: Vec<(isize, Vec<Vec<T>>)>,
    bias: Vec<T>,
    residual: Option<Dense<T>>,
    skip: Dense<T>,
}

/// Gated residual network over a 1-D sequence, evaluated with loops.
pub struct Wavenet1d<T> {
    channels: usize,
    start: Dense<T>,
    layers: Vec<Layer1d<T>>,
    output: Dense<T>,
}

impl<T: Scalar> Wavenet1d<T> {
    /// Reads the network along the height axis. Requires a width filter of
    /// size 1 so that each grid column is an independent causal sequence.
    pub fn along_height(net: &ConvNet<T>) -> Result<Self> {
        let (kh, kw) = net.kernel();
        if kw != 1 {
            return Err(Error::InvalidArgument(format!("width filter must be 1, got {kw}")));
        }
        Self::build(net, |l| {
            let d = l.dilation_h as isize;
            (0..kh)
                .map(|a| (a as isize * d - ((kh - 1) as isize) * d, a, 0))
                .collect()
        })
    }

    /// Reads the network along the width axis. Requires a height filter of
    /// size 1 so that rows do not interact inside the network.
    pub fn along_width(net: &ConvNet<T>) -> Result<Self> {
        let (kh, kw) = net.kernel();
        if kh != 1 {
            return Err(Error::InvalidArgument(format!("height filter must be 1, got {kh}")));
        }
        Self::build(net, |l| {
            let d = l.dilation_w as isize;
            let half = ((kw - 1) / 2) as isize;
            (0..kw).map(|b| ((b as isize - half) * d, 0, b)).collect()
        })
    }

    fn build(
        net: &ConvNet<T>,
        taps_of: impl Fn(&crate::network::ConvLayer<T>) -> Vec<(isize, usize, usize)>,
    ) -> Result<Self> {
        if net.cond_channels().is_some() {
            return Err(Error::InvalidArgument("reference network takes no conditioner".into()));
        }
        let c = net.residual_channels();
        let (kh, kw) = net.kernel();
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let f = l.filter.data();
                let taps = taps_of(l)
                    .into_iter()
                    .map(|(off, a, b)| {
                        let m = (0..2 * c)
                            .map(|o| (0..c).map(|ci| f[((o * c + ci) * kh + a) * kw + b]).collect())
                            .collect();
                        (off, m)
                    })
                    .collect();
                Layer1d {
                    taps,
                    bias: l.bias.clone(),
                    residual: l
                        .residual
                        .as_ref()
                        .map(|p| Dense::from_weights(p.weight.data(), &p.bias, c)),
                    skip: Dense::from_weights(l.skip.weight.data(), &l.skip.bias, c),
                }
            })
            .collect();
        Ok(Self {
            channels: c,
            start: Dense::from_weights(net.start.weight.data(), &net.start.bias, 1),
            layers,
            output: Dense::from_weights(net.output.weight.data(), &net.output.bias, c),
        })
    }

    /// Evaluates on an input sequence; returns `(μ, log σ)` per position.
    pub fn eval(&self, input: &[T]) -> (Vec<T>, Vec<T>) {
        let n = input.len();
        let c = self.channels;
        let x = vec![input.to_vec()];
        let mut hidden: Vec<Vec<T>> = vec![vec![T::zero(); n]; c];
        for t in 0..n {
            for (ch, v) in self.start.apply(&x, t).into_iter().enumerate() {
                hidden[ch][t] = v;
            }
        }
        let mut skip: Vec<Vec<T>> = vec![vec![T::zero(); n]; c];
        for layer in &self.layers {
            let mut gated: Vec<Vec<T>> = vec![vec![T::zero(); n]; c];
            for t in 0..n {
                let mut pre = layer.bias.clone();
                for (off, m) in &layer.taps {
                    let s = t as isize + off;
                    if s < 0 || s >= n as isize {
                        continue;
                    }
                    for (o, row) in m.iter().enumerate() {
                        for (ci, &wv) in row.iter().enumerate() {
                            pre[o] += wv * hidden[ci][s as usize];
                        }
                    }
                }
                for ch in 0..c {
                    gated[ch][t] = pre[ch].tanh() * sigmoid(pre[c + ch]);
                }
            }
            for t in 0..n {
                if let Some(res) = &layer.residual {
                    for (ch, v) in res.apply(&gated, t).into_iter().enumerate() {
                        hidden[ch][t] += v;
                    }
                }
                for (ch, v) in layer.skip.apply(&gated, t).into_iter().enumerate() {
                    skip[ch][t] += v;
                }
            }
        }
        let mut mu = vec![T::zero(); n];
        let mut ls = vec![T::zero(); n];
        for t in 0..n {
            let o = self.output.apply(&skip, t);
            mu[t] = o[0];
            ls[t] = o[1];
        }
        (mu, ls)
    }

    /// `(μ_t, log σ_t)` from the prefix `x[..t]`, feeding the network the
    /// sequence shifted right by one.
    pub fn causal_step(&self, t: usize, prefix: &[T]) -> (T, T) {
        let mut seq = Vec::with_capacity(t + 1);
        seq.push(T::zero());
        seq.extend_from_slice(&prefix[..t]);
        let (mu, ls) = self.eval(&seq);
        (mu[t], ls[t])
    }
}
