//! Dilated 2-D convolutional network producing per-element shift and
//! log-scale grids.
//!
//! Causality along height comes from two things: the input grid is shifted
//! down one row before entering the network, and every dilated convolution
//! pads only on top. Output row `i` therefore sees input rows `< i` and
//! nothing else.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::signal::WaveGrid;
use crate::tensor::{Scalar, Tensor};

/// Width dilation cycle `[1, 2, 4, …, 128]`, repeated if there are more
/// than eight layers.
pub fn width_dilations(n_layers: usize) -> Vec<usize> {
    (0..n_layers).map(|l| 1 << (l % 8)).collect()
}

/// `r = (k − 1) · Σd + 1`.
pub fn receptive_field(k: usize, dilations: &[usize]) -> Result<usize> {
    if dilations.is_empty() {
        return Err(Error::InvalidArgument("empty dilation list".into()));
    }
    if k == 0 || dilations.contains(&0) {
        return Err(Error::InvalidArgument(
            "filter size and dilations must be positive".into(),
        ));
    }
    Ok((k - 1) * dilations.iter().sum::<usize>() + 1)
}

/// Height dilations for the standard eight-layer, `k = 3` stack.
pub fn default_dilations(h: usize) -> Result<Vec<usize>> {
    dilation_cycle(h, 8, 3)
}

/// Smallest cycle `[1, 2, …, 2^s]` (repeated to `n_layers`) whose receptive
/// field covers `h`, with `s` capped at 7.
pub fn dilation_cycle(h: usize, n_layers: usize, k: usize) -> Result<Vec<usize>> {
    if h < 1 {
        return Err(Error::InvalidArgument("height must be at least 1".into()));
    }
    if n_layers == 0 {
        return Err(Error::InvalidArgument("need at least one layer".into()));
    }
    let cycle = |s: u32| -> Vec<usize> {
        (0..n_layers).map(|l| 1usize << (l as u32 % (s + 1))).collect()
    };
    if k < 2 {
        return Ok(vec![1; n_layers]);
    }
    for s in 0..=7 {
        let d = cycle(s);
        if receptive_field(k, &d)? >= h {
            return Ok(d);
        }
    }
    Ok(cycle(7))
}

#[derive(Clone, Debug, PartialEq)]
pub enum DilationCheck {
    Ok,
    /// Receptive field is smaller than the height; rows beyond it are
    /// modelled as conditionally independent. Training is still allowed.
    Warning {
        required_sum: f64,
        actual_sum: usize,
        deficit: f64,
    },
}

impl DilationCheck {
    pub fn is_ok(&self) -> bool {
        matches!(self, DilationCheck::Ok)
    }
}

impl fmt::Display for DilationCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DilationCheck::Ok => write!(f, "ok"),
            DilationCheck::Warning {
                required_sum,
                actual_sum,
                deficit,
            } => write!(
                f,
                "dilation sum {actual_sum} is below the required {required_sum:.1} (deficit {deficit:.1}); \
                 receptive field does not cover the height"
            ),
        }
    }
}

/// Checks `Σd ≥ (h − 1) / (k − 1)`.
pub fn validate_dilations(h: usize, k: usize, dilations: &[usize]) -> DilationCheck {
    let actual_sum: usize = dilations.iter().sum();
    let required_sum = if k >= 2 {
        (h as f64 - 1.0) / (k as f64 - 1.0)
    } else if h <= 1 {
        0.0
    } else {
        f64::INFINITY
    };
    if actual_sum as f64 >= required_sum {
        DilationCheck::Ok
    } else {
        DilationCheck::Warning {
            required_sum,
            actual_sum,
            deficit: required_sum - actual_sum as f64,
        }
    }
}

/// 1×1 convolution, weight `[out, in, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointwise<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Pointwise<T> {
    pub fn zeros(cout: usize, cin: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, 1, 1]),
            bias: vec![T::zero(); cout],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        kernels::pointwise(x, self.in_channels(), &self.weight, Some(&self.bias))
    }

    fn cast<U: Scalar>(&self) -> Pointwise<U> {
        Pointwise {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&b| U::of(b.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `[2C, C, kh, kw]`
    pub filter: Tensor<T>,
    pub bias: Vec<T>,
    pub dilation_h: usize,
    pub dilation_w: usize,
    /// Conditioner channels → `2C`, added to the gate pre-activations.
    pub cond_projection: Option<Pointwise<T>>,
    /// `C → C`; absent on the last layer, whose residual output is unused.
    pub residual: Option<Pointwise<T>>,
    pub skip: Pointwise<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn geometry(&self) -> ConvGeometry {
        let s = self.filter.shape();
        ConvGeometry::height_causal(s[2], s[3], self.dilation_h, self.dilation_w)
    }
}

/// Materialized network weights for one flow.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet<T> {
    /// `1 → C`
    pub start: Pointwise<T>,
    pub layers: Vec<ConvLayer<T>>,
    /// `C → 2`: channel 0 is the shift, channel 1 the log-scale.
    pub output: Pointwise<T>,
}

/// Shape description used to build networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetShape {
    pub residual_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub dilations_h: Vec<usize>,
    pub dilations_w: Vec<usize>,
    /// Conditioner input channels, if conditioned.
    pub cond_channels: Option<usize>,
}

impl NetShape {
    /// Eight-layer 3×3 network with default dilations for height `h`.
    pub fn standard(h: usize, residual_channels: usize, cond_channels: Option<usize>) -> Result<Self> {
        Ok(Self {
            residual_channels,
            kernel_h: 3,
            kernel_w: 3,
            dilations_h: default_dilations(h)?,
            dilations_w: width_dilations(8),
            cond_channels,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.dilations_h.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.residual_channels == 0 {
            return Err(Error::InvalidConfig("residual channels must be positive".into()));
        }
        if self.dilations_h.is_empty() || self.dilations_h.len() != self.dilations_w.len() {
            return Err(Error::InvalidConfig(format!(
                "height and width dilation lists must be non-empty and equal length ({} vs {})",
                self.dilations_h.len(),
                self.dilations_w.len()
            )));
        }
        if self.dilations_h.contains(&0) || self.dilations_w.contains(&0) {
            return Err(Error::InvalidConfig("dilations must be positive".into()));
        }
        for (name, k) in [("height", self.kernel_h), ("width", self.kernel_w)] {
            if k != 1 && k != 3 {
                return Err(Error::InvalidConfig(format!("{name} kernel must be 1 or 3, got {k}")));
            }
        }
        Ok(())
    }
}

fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::of(z * std)
    })
}

impl<T: Scalar> ConvNet<T> {
    /// Random filters `~ N(0, std²)`, zero biases, zero output projection
    /// (so the flow starts as the identity).
    pub fn init<R: Rng + ?Sized>(shape: &NetShape, std: f64, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let c = shape.residual_channels;
        let n = shape.n_layers();
        let pw = |cout: usize, cin: usize, rng: &mut R| Pointwise {
            weight: normal(&[cout, cin, 1, 1], std, rng),
            bias: vec![T::zero(); cout],
        };
        let start = pw(c, 1, rng);
        let layers = (0..n)
            .map(|l| ConvLayer {
                filter: normal(&[2 * c, c, shape.kernel_h, shape.kernel_w], std, rng),
                bias: vec![T::zero(); 2 * c],
                dilation_h: shape.dilations_h[l],
                dilation_w: shape.dilations_w[l],
                cond_projection: shape.cond_channels.map(|m| pw(2 * c, m, rng)),
                residual: (l + 1 < n).then(|| pw(c, c, rng)),
                skip: pw(c, c, rng),
            })
            .collect();
        Ok(Self {
            start,
            layers,
            output: Pointwise::zeros(2, c),
        })
    }

    /// Like [`ConvNet::init`] but with a random output projection and, if
    /// `with_bias`, random biases everywhere. Used to exercise non-trivial
    /// flows in tests and verification.
    pub fn random<R: Rng + ?Sized>(shape: &NetShape, std: f64, with_bias: bool, rng: &mut R) -> Result<Self> {
        let mut net = Self::init(shape, std, rng)?;
        net.output.weight = normal(net.output.weight.shape(), std, rng);
        if with_bias {
            let mut rb = |b: &mut Vec<T>| {
                for v in b.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = T::of(z * std);
                }
            };
            rb(&mut net.start.bias);
            for l in &mut net.layers {
                rb(&mut l.bias);
                if let Some(p) = &mut l.cond_projection {
                    rb(&mut p.bias);
                }
                if let Some(p) = &mut l.residual {
                    rb(&mut p.bias);
                }
                rb(&mut l.skip.bias);
            }
            rb(&mut net.output.bias);
        }
        Ok(net)
    }

    pub fn residual_channels(&self) -> usize {
        self.start.out_channels()
    }

    pub fn cond_channels(&self) -> Option<usize> {
        self.layers
            .first()
            .and_then(|l| l.cond_projection.as_ref())
            .map(Pointwise::in_channels)
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.layers[0].filter.shape();
        (s[2], s[3])
    }

    pub fn dilations_h(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.dilation_h).collect()
    }

    pub fn dilations_w(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.dilation_w).collect()
    }

    /// Height receptive field in rows of the shifted input.
    pub fn receptive_field(&self) -> usize {
        receptive_field(self.kernel().0, &self.dilations_h()).unwrap_or(1)
    }

    pub fn cast<U: Scalar>(&self) -> ConvNet<U> {
        ConvNet {
            start: self.start.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    filter: l.filter.cast(),
                    bias: l.bias.iter().map(|&b| U::of(b.as_f64())).collect(),
                    dilation_h: l.dilation_h,
                    dilation_w: l.dilation_w,
                    cond_projection: l.cond_projection.as_ref().map(Pointwise::cast),
                    residual: l.residual.as_ref().map(Pointwise::cast),
                    skip: l.skip.cast(),
                })
                .collect(),
            output: self.output.cast(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        let pw = |p: &Pointwise<T>| p.weight.numel() + p.bias.len();
        pw(&self.start)
            + pw(&self.output)
            + self
                .layers
                .iter()
                .map(|l| {
                    l.filter.numel()
                        + l.bias.len()
                        + l.cond_projection.as_ref().map_or(0, pw)
                        + l.residual.as_ref().map_or(0, pw)
                        + pw(&l.skip)
                })
                .sum::<usize>()
    }
}

/// Moves every row down by one and fills row 0 with zeros.
pub fn shift_down<T: Scalar>(x: &WaveGrid<T>) -> WaveGrid<T> {
    let (h, w) = (x.h(), x.w());
    let mut out = vec![T::zero(); h * w];
    if h > 1 {
        out[w..].copy_from_slice(&x.values()[..(h - 1) * w]);
    }
    WaveGrid::from_vec(h, w, out)
}

pub(crate) fn check_cond<T: Scalar>(
    net: &ConvNet<T>,
    cond: Option<&Tensor<T>>,
    h: usize,
    w: usize,
) -> Result<()> {
    match (net.cond_channels(), cond) {
        (None, None) => Ok(()),
        (Some(m), Some(c)) => {
            if c.shape() != [m, h, w] {
                return Err(Error::ShapeMismatch {
                    context: "conditioner grid".into(),
                    expected: vec![m, h, w],
                    found: c.shape().to_vec(),
                });
            }
            Ok(())
        }
        (Some(m), None) => Err(Error::ShapeMismatch {
            context: "network expects a conditioner".into(),
            expected: vec![m, h, w],
            found: vec![],
        }),
        (None, Some(c)) => Err(Error::ShapeMismatch {
            context: "network takes no conditioner".into(),
            expected: vec![],
            found: c.shape().to_vec(),
        }),
    }
}

/// Runs the network on an already shifted grid. Returns `(mu, log_sigma)`.
pub fn net_forward<T: Scalar>(
    x_shifted: &WaveGrid<T>,
    cond: Option<&Tensor<T>>,
    net: &ConvNet<T>,
) -> Result<(WaveGrid<T>, WaveGrid<T>)> {
    net_forward_traced(x_shifted, cond, net, None)
}

/// [`net_forward`] that also records the `[C, h, w]` input of every layer.
pub fn net_forward_traced<T: Scalar>(
    x_shifted: &WaveGrid<T>,
    cond: Option<&Tensor<T>>,
    net: &ConvNet<T>,
    mut layer_inputs: Option<&mut Vec<Tensor<T>>>,
) -> Result<(WaveGrid<T>, WaveGrid<T>)> {
    let (h, w) = (x_shifted.h(), x_shifted.w());
    check_cond(net, cond, h, w)?;
    let c = net.residual_channels();
    let n = h * w;

    let mut hidden = Tensor::from_vec(&[c, h, w], net.start.apply(x_shifted.values()));
    let mut skip: Option<Vec<T>> = None;
    for layer in &net.layers {
        if let Some(trace) = layer_inputs.as_deref_mut() {
            trace.push(hidden.clone());
        }
        let mut pre = kernels::conv2d(&hidden, &layer.filter, Some(&layer.bias), &layer.geometry());
        if let (Some(p), Some(cg)) = (&layer.cond_projection, cond) {
            let cp = p.apply(cg.data());
            for (a, b) in pre.data_mut().iter_mut().zip(&cp) {
                *a += *b;
            }
        }
        let gated = kernels::gate(pre.data(), c);
        if let Some(res) = &layer.residual {
            let r = res.apply(&gated);
            for (a, b) in hidden.data_mut().iter_mut().zip(&r) {
                *a += *b;
            }
        }
        let s = layer.skip.apply(&gated);
        match &mut skip {
            None => skip = Some(s),
            Some(acc) => acc.iter_mut().zip(&s).for_each(|(a, b)| *a += *b),
        }
    }
    let skip = skip.unwrap_or_else(|| vec![T::zero(); c * n]);
    let out = net.output.apply(&skip);
    let mu = WaveGrid::from_vec(h, w, out[..n].to_vec());
    let log_sigma = WaveGrid::from_vec(h, w, out[n..].to_vec());
    Ok((mu, log_sigma))
}
