//! Trainable parameterization of a flow stack.
//!
//! Convolution weights are stored as weight-normalized pairs `(v, g)` and
//! materialized into plain weights for inference. The output projection of
//! each flow is a plain weight so it can start at exactly zero.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::conditioner::{Upsampler, UPSAMPLE_GEOMETRY, UPSAMPLE_SLOPE};
use crate::error::{Error, Result};
use crate::flow::{FlowLayer, FlowStack, HALF_LOG_2PI};
use crate::io::config::ModelConfig;
use crate::kernels::{self, ConvGeometry};
use crate::network::{ConvLayer, ConvNet, Pointwise};
use crate::signal::{Permutation, WaveGrid};
use crate::tensor::{Scalar, Tensor};

/// Ids of a weight-normalized convolution: direction, magnitude, bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WnIds {
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub conv: WnIds,
    pub cond: Option<WnIds>,
    pub res: Option<WnIds>,
    pub skip: WnIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowIds {
    pub start: WnIds,
    pub layers: Vec<LayerIds>,
    pub end_w: ParamId,
    pub end_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct WaveFlowModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    flows: Vec<FlowIds>,
    upsampler: Option<[WnIds; 2]>,
    permutations: Vec<Permutation>,
}

/// Scalars of one taped likelihood evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TapedLoss {
    /// `−loglik / dims`
    pub loss: Var,
    /// Total log-likelihood in nats.
    pub loglik: Var,
    pub dims: usize,
}

fn slice_norms<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let rows = w.shape()[0];
    let per = w.numel() / rows;
    Tensor::from_vec(
        &[rows],
        w.data().chunks(per).map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt()).collect(),
    )
}

fn add_wn<T: Scalar>(ps: &mut ParamStore<T>, name: &str, w: &Tensor<T>, bias: &[T]) -> WnIds {
    WnIds {
        v: ps.add(format!("{name}.v"), w.clone()),
        g: ps.add(format!("{name}.g"), slice_norms(w)),
        b: ps.add(format!("{name}.b"), Tensor::from_vec(&[bias.len()], bias.to_vec())),
    }
}

fn shift_index(h: usize, w: usize) -> Arc<Vec<Option<usize>>> {
    Arc::new((0..h * w).map(|k| (k >= w).then(|| k - w)).collect())
}

/// Output row `r` takes input row `src[r]`, for every channel.
fn row_index(c: usize, h: usize, w: usize, src: &[usize]) -> Arc<Vec<Option<usize>>> {
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for &s in src {
            for j in 0..w {
                idx.push(Some((ch * h + s) * w + j));
            }
        }
    }
    Arc::new(idx)
}

impl<T: Scalar> WaveFlowModel<T> {
    /// Random initialization from a seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = config.net_shape()?;
        let nets = (0..config.n_flows)
            .map(|_| ConvNet::init(&shape, config.init_std, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let upsampler = config.mel.as_ref().map(|_| Upsampler::nearest());
        let flows = nets
            .into_iter()
            .zip(config.permutations())
            .map(|(net, permutation)| FlowLayer { net, permutation })
            .collect();
        let stack = FlowStack::new(config.h, flows, upsampler)?;
        Self::from_stack(config, &stack)
    }

    /// Parameterizes existing weights; each magnitude starts at the norm of
    /// its slice so the materialized weights reproduce the input.
    pub fn from_stack(config: &ModelConfig, stack: &FlowStack<T>) -> Result<Self> {
        config.validate()?;
        if stack.n_flows() != config.n_flows || stack.h != config.h {
            return Err(Error::InvalidConfig("stack does not match the config".into()));
        }
        let mut ps = ParamStore::new();
        let upsampler = stack.upsampler.as_ref().map(|up| {
            [0, 1].map(|i| add_wn(&mut ps, &format!("upsampler.{i}"), &up.weights[i], &[up.biases[i]]))
        });
        let mut flows = Vec::new();
        for (k, f) in stack.flows.iter().enumerate() {
            let net = &f.net;
            let p = format!("flow{k}");
            let start = add_wn(&mut ps, &format!("{p}.start"), &net.start.weight, &net.start.bias);
            let layers = net
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| {
                    let q = format!("{p}.layer{l}");
                    LayerIds {
                        conv: add_wn(&mut ps, &format!("{q}.conv"), &layer.filter, &layer.bias),
                        cond: layer
                            .cond_projection
                            .as_ref()
                            .map(|c| add_wn(&mut ps, &format!("{q}.cond"), &c.weight, &c.bias)),
                        res: layer
                            .residual
                            .as_ref()
                            .map(|c| add_wn(&mut ps, &format!("{q}.res"), &c.weight, &c.bias)),
                        skip: add_wn(&mut ps, &format!("{q}.skip"), &layer.skip.weight, &layer.skip.bias),
                    }
                })
                .collect();
            let end_w = ps.add(format!("{p}.end.w"), net.output.weight.clone());
            let end_b = ps.add(
                format!("{p}.end.b"),
                Tensor::from_vec(&[net.output.bias.len()], net.output.bias.clone()),
            );
            flows.push(FlowIds {
                start,
                layers,
                end_w,
                end_b,
            });
        }
        Ok(Self {
            config: config.clone(),
            params: ps,
            flows,
            upsampler,
            permutations: stack.permutations(),
        })
    }

    pub fn permutations(&self) -> &[Permutation] {
        &self.permutations
    }

    pub fn flow_ids(&self) -> &[FlowIds] {
        &self.flows
    }

    /// Trainable scalars, weight-normalized tensors counted as `v` plus `g`.
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn wn(&self, ids: &WnIds) -> (Tensor<T>, Vec<T>) {
        let w = kernels::weight_norm(self.params.get(ids.v), self.params.get(ids.g).data());
        (w, self.params.get(ids.b).data().to_vec())
    }

    fn pw(&self, ids: &WnIds) -> Pointwise<T> {
        let (weight, bias) = self.wn(ids);
        Pointwise { weight, bias }
    }

    /// Plain weights for inference.
    pub fn materialize(&self) -> Result<FlowStack<T>> {
        let dh = self.config.dilations_h()?;
        let dw = self.config.dilations_w();
        let flows = self
            .flows
            .iter()
            .zip(&self.permutations)
            .map(|(f, perm)| {
                let layers = f
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(l, ids)| {
                        let (filter, bias) = self.wn(&ids.conv);
                        ConvLayer {
                            filter,
                            bias,
                            dilation_h: dh[l],
                            dilation_w: dw[l],
                            cond_projection: ids.cond.as_ref().map(|c| self.pw(c)),
                            residual: ids.res.as_ref().map(|c| self.pw(c)),
                            skip: self.pw(&ids.skip),
                        }
                    })
                    .collect();
                FlowLayer {
                    net: ConvNet {
                        start: self.pw(&f.start),
                        layers,
                        output: Pointwise {
                            weight: self.params.get(f.end_w).clone(),
                            bias: self.params.get(f.end_b).data().to_vec(),
                        },
                    },
                    permutation: perm.clone(),
                }
            })
            .collect();
        let upsampler = self.upsampler.as_ref().map(|ids| {
            let (w0, b0) = self.wn(&ids[0]);
            let (w1, b1) = self.wn(&ids[1]);
            Upsampler {
                weights: [w0, w1],
                biases: [b0[0], b1[0]],
            }
        });
        FlowStack::new(self.config.h, flows, upsampler)
    }

    pub fn cast<U: Scalar>(&self) -> WaveFlowModel<U> {
        WaveFlowModel {
            config: self.config.clone(),
            params: self.params.cast(),
            flows: self.flows.clone(),
            upsampler: self.upsampler,
            permutations: self.permutations.clone(),
        }
    }

    fn wn_var(&self, tape: &mut Tape<T>, ids: &WnIds) -> (Var, Var) {
        let v = tape.param(&self.params, ids.v);
        let g = tape.param(&self.params, ids.g);
        let b = tape.param(&self.params, ids.b);
        (tape.weight_norm(v, g), b)
    }

    fn conv_wn(&self, tape: &mut Tape<T>, x: Var, ids: &WnIds, geom: ConvGeometry) -> Var {
        let (w, b) = self.wn_var(tape, ids);
        tape.conv2d(x, w, Some(b), geom)
    }

    /// Records the network of flow `k` on an unshifted input; returns
    /// `(μ, log σ)` as `[1, h, w]` values.
    fn record_net(&self, tape: &mut Tape<T>, k: usize, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let (_, h, w) = tape.value(x).dims3();
        let f = &self.flows[k];
        let dh = self.config.dilations_h()?;
        let dw = self.config.dilations_w();
        let shifted = tape.gather(x, shift_index(h, w), &[1, h, w]);
        let mut hidden = self.conv_wn(tape, shifted, &f.start, ConvGeometry::pointwise());
        let mut skip: Option<Var> = None;
        for (l, ids) in f.layers.iter().enumerate() {
            let geom = ConvGeometry::height_causal(self.config.kernel_h, self.config.kernel_w, dh[l], dw[l]);
            let mut pre = self.conv_wn(tape, hidden, &ids.conv, geom);
            if let (Some(cids), Some(c)) = (&ids.cond, cond) {
                let cp = self.conv_wn(tape, c, cids, ConvGeometry::pointwise());
                pre = tape.add(pre, cp);
            }
            let gated = tape.gate(pre);
            if let Some(rids) = &ids.res {
                let r = self.conv_wn(tape, gated, rids, ConvGeometry::pointwise());
                hidden = tape.add(hidden, r);
            }
            let s = self.conv_wn(tape, gated, &ids.skip, ConvGeometry::pointwise());
            skip = Some(match skip {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        let skip = skip.expect("at least one layer");
        let ew = tape.param(&self.params, f.end_w);
        let eb = tape.param(&self.params, f.end_b);
        let out = tape.conv2d(skip, ew, Some(eb), ConvGeometry::pointwise());
        Ok((tape.slice_channels(out, 0, 1), tape.slice_channels(out, 1, 1)))
    }

    /// Records the upsampler and the per-flow conditioner grids.
    fn record_conditioner(&self, tape: &mut Tape<T>, mel: &Tensor<T>, h: usize, w: usize) -> Result<Vec<Var>> {
        let ids = self
            .upsampler
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model is unconditioned but a mel was given".into()))?;
        let (m, frames) = match mel.shape() {
            [m, t] => (*m, *t),
            s => {
                return Err(Error::ShapeMismatch {
                    context: "mel input".into(),
                    expected: vec![0, 0],
                    found: s.to_vec(),
                })
            }
        };
        let mut cur = tape.input(mel.clone().reshape(&[1, m, frames]));
        for wn in ids {
            let (wt, b) = self.wn_var(tape, wn);
            let up = tape.conv_transpose2d(cur, wt, Some(b), UPSAMPLE_GEOMETRY);
            cur = tape.leaky_relu(up, T::of(UPSAMPLE_SLOPE));
        }
        let len = tape.value(cur).shape()[2];
        if len < h * w {
            return Err(Error::ConditionerTooShort {
                available: len,
                required: h * w,
            });
        }
        let mut cumulative = Permutation::identity(h);
        let mut grids = Vec::with_capacity(self.flows.len());
        for p in &self.permutations {
            let src = cumulative.source_rows();
            let mut idx = Vec::with_capacity(m * h * w);
            for c in 0..m {
                for &s in &src {
                    for j in 0..w {
                        idx.push(Some(c * len + j * h + s));
                    }
                }
            }
            grids.push(tape.gather(cur, Arc::new(idx), &[m, h, w]));
            cumulative = cumulative.then(p);
        }
        Ok(grids)
    }

    /// Records `−log p(x) / dims` for one squeezed grid.
    pub fn record_loss(&self, tape: &mut Tape<T>, x: &WaveGrid<T>, mel: Option<&Tensor<T>>) -> Result<TapedLoss> {
        let (h, w) = (x.h(), x.w());
        if h != self.config.h {
            return Err(Error::ShapeMismatch {
                context: "grid height".into(),
                expected: vec![self.config.h],
                found: vec![h],
            });
        }
        let conds = match (mel, self.upsampler.is_some()) {
            (Some(m), _) => Some(self.record_conditioner(tape, m, h, w)?),
            (None, false) => None,
            (None, true) => {
                return Err(Error::InvalidArgument("model is conditioned and needs a mel".into()));
            }
        };
        let n = h * w;
        let mut cur = tape.input(x.as_tensor().clone());
        let mut total: Option<Var> = None;
        for k in 0..self.flows.len() {
            let cond = conds.as_ref().map(|c| c[k]);
            let (mu, log_sigma) = self.record_net(tape, k, cur, cond)?;
            let sigma = tape.exp(log_sigma);
            let scaled = tape.mul(sigma, cur);
            let z = tape.add(scaled, mu);
            let ld = tape.sum(log_sigma);
            total = Some(match total {
                None => ld,
                Some(t) => tape.add(t, ld),
            });
            let src = self.permutations[k].source_rows();
            cur = tape.gather(z, row_index(1, h, w, &src), &[1, h, w]);
        }
        let sq = tape.square(cur);
        let sq = tape.sum(sq);
        let base = tape.scale(sq, T::of(-0.5));
        let base = tape.offset(base, T::of(-(n as f64) * HALF_LOG_2PI));
        let loglik = tape.add(total.expect("at least one flow"), base);
        let loss = tape.scale(loglik, T::of(-1.0 / n as f64));
        tape.check_finite()?;
        Ok(TapedLoss { loss, loglik, dims: n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioner::MelConfig;
    use crate::flow::stack_inverse_grid;
    use crate::network::NetShape;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::unconditioned(4, 2, 2, 3);
        c.dilations_h = Some(vec![1, 2]);
        c.dilations_w = Some(vec![1, 2]);
        c
    }

    fn random_stack(c: &ModelConfig, seed: u64) -> FlowStack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape: NetShape = c.net_shape().unwrap();
        let flows = c
            .permutations()
            .into_iter()
            .map(|p| FlowLayer {
                net: ConvNet::random(&shape, 0.3, true, &mut rng).unwrap(),
                permutation: p,
            })
            .collect();
        let up = c.mel.as_ref().map(|_| Upsampler::init(0.1, &mut rng));
        FlowStack::new(c.h, flows, up).unwrap()
    }

    #[test]
    fn identity_model_on_zeros_has_loss_half_log_two_pi() {
        let m = WaveFlowModel::<f64>::init(&cfg(), 0).unwrap();
        let mut tape = Tape::new();
        let l = m.record_loss(&mut tape, &WaveGrid::zeros(4, 8), None).unwrap();
        assert!((tape.value(l.loss).item() - 0.9189385332046727).abs() < 1e-15);
    }

    #[test]
    fn taped_loss_matches_plain_likelihood() {
        let c = cfg();
        let stack = random_stack(&c, 1);
        let m = WaveFlowModel::from_stack(&c, &stack).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = WaveGrid::from_vec(4, 8, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut tape = Tape::new();
        let l = m.record_loss(&mut tape, &x, None).unwrap();
        let plain = m.materialize().unwrap();
        let conds = vec![None; 2];
        let (_, r) = stack_inverse_grid(&x, &conds, &plain).unwrap();
        assert!((tape.value(l.loglik).item() - r.total_loglik).abs() < 1e-12);
    }

    #[test]
    fn conditioned_taped_loss_matches_plain_likelihood() {
        let mut c = cfg();
        c.mel = Some(MelConfig {
            n_mels: 3,
            ..MelConfig::default()
        });
        let stack = random_stack(&c, 4);
        let m = WaveFlowModel::from_stack(&c, &stack).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = WaveGrid::from_vec(4, 64, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mel = Tensor::from_fn(&[3, 1], |i| -1.0 + i as f64);
        let mut tape = Tape::new();
        let l = m.record_loss(&mut tape, &x, Some(&mel)).unwrap();
        let plain = m.materialize().unwrap();
        let features = plain.upsampler.as_ref().unwrap().forward(&mel).unwrap();
        let conds = crate::conditioner::build_conditioner_grid(&features, 4, 64, &plain.permutations())
            .unwrap()
            .into_iter()
            .map(Some)
            .collect::<Vec<_>>();
        let (_, r) = stack_inverse_grid(&x, &conds, &plain).unwrap();
        assert!((tape.value(l.loglik).item() - r.total_loglik).abs() < 1e-10);
    }

    #[test]
    fn materialize_reproduces_the_source_weights() {
        let c = cfg();
        let stack = random_stack(&c, 3);
        let back = WaveFlowModel::from_stack(&c, &stack).unwrap().materialize().unwrap();
        for (a, b) in stack.flows.iter().zip(&back.flows) {
            for (la, lb) in a.net.layers.iter().zip(&b.net.layers) {
                assert!(la.filter.max_abs_diff(&lb.filter) < 1e-14);
            }
            assert_eq!(a.net.output, b.net.output);
        }
    }

    #[test]
    fn one_by_one_conv_arithmetic() {
        // 80 → 64 pointwise projection: 80·64 weights and 64 biases
        let p = Pointwise::<f32>::zeros(64, 80);
        assert_eq!(p.weight.numel() + p.bias.len(), 5184);
    }
}
