//! Executable network built from a [`NetworkPlan`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::plan::{plan_network, LayerKind, LayerPlan, NetworkPlan};
use super::spec::NetSpec;
use crate::error::{shape_err, Result};
use crate::local_relation::{
    lr_backward, lr_forward_optimized, lr_forward_train, ForwardCache, GeoGrads, GeoParams, LocalRelationConfig,
    LocalRelationParams,
};
use crate::ops::{
    argmax_rows, batchnorm_bwd, batchnorm_fwd, channel_transform_bwd, channel_transform_fwd, conv2d_bwd, conv2d_fwd,
    fc_bwd, fc_fwd, global_avgpool_bwd, global_avgpool_fwd, maxpool3x3s2_bwd, maxpool3x3s2_fwd, relu_bwd, relu_fwd,
    softmax_xent_bwd, softmax_xent_fwd, subsample, subsample_bwd, BatchNormState, BnCache, BnMode, ChannelTransform,
    Conv2d,
};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    Conv(Conv2d<T>),
    Ct { ct: ChannelTransform<T>, stride: usize },
    Bn(BatchNormState<T>),
    Relu,
    MaxPool,
    Lr { cfg: LocalRelationConfig, params: LocalRelationParams<T> },
    GlobalAvgPool,
    Linear(ChannelTransform<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedLayer<T = f32> {
    pub name: String,
    pub layer: Layer<T>,
}

/// A learnable tensor as seen by optimizers and checkpoints.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    /// Whether weight decay applies.
    pub decay: bool,
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    pub decay: bool,
}

enum Cache<T> {
    Input(Tensor<T>),
    Ct { x: Tensor<T>, input_shape: Shape },
    Bn(BnCache<T>),
    MaxPool { argmax: Vec<usize>, input_shape: Shape },
    Pool(Shape),
    Lr(Box<ForwardCache<T>>),
}

fn lr_param_list<T>(p: &LocalRelationParams<T>) -> Vec<(&'static str, &Tensor<T>, bool)> {
    let mut v = vec![("theta_q", &p.theta_q.weight, true), ("theta_k", &p.theta_k.weight, true)];
    match &p.geo {
        GeoParams::Network { first, second } => {
            v.push(("geo.first.weight", &first.weight, false));
            v.push(("geo.first.bias", first.bias.as_ref().expect("prior bias"), false));
            v.push(("geo.second.weight", &second.weight, false));
            v.push(("geo.second.bias", second.bias.as_ref().expect("prior bias"), false));
        }
        GeoParams::Direct(t) => v.push(("geo.table", t, false)),
        GeoParams::Off => {}
    }
    if let Some(o) = &p.theta_out {
        v.push(("theta_out", &o.weight, true));
    }
    v
}

fn lr_param_list_mut<T>(p: &mut LocalRelationParams<T>) -> Vec<(&'static str, &mut Tensor<T>, bool)> {
    let mut v = vec![("theta_q", &mut p.theta_q.weight, true), ("theta_k", &mut p.theta_k.weight, true)];
    match &mut p.geo {
        GeoParams::Network { first, second } => {
            v.push(("geo.first.weight", &mut first.weight, false));
            v.push(("geo.first.bias", first.bias.as_mut().expect("prior bias"), false));
            v.push(("geo.second.weight", &mut second.weight, false));
            v.push(("geo.second.bias", second.bias.as_mut().expect("prior bias"), false));
        }
        GeoParams::Direct(t) => v.push(("geo.table", t, false)),
        GeoParams::Off => {}
    }
    if let Some(o) = &mut p.theta_out {
        v.push(("theta_out", &mut o.weight, true));
    }
    v
}

impl<T: Element> Layer<T> {
    pub fn init<R: Rng + ?Sized>(kind: &LayerKind, rng: &mut R) -> Result<Self> {
        Ok(match *kind {
            LayerKind::Conv { in_channels, out_channels, kernel, stride } => {
                Self::Conv(Conv2d::init_he(out_channels, in_channels, kernel, stride, rng))
            }
            LayerKind::ChannelTransform { in_channels, out_channels, stride } => Self::Ct {
                ct: ChannelTransform::init_gaussian(out_channels, in_channels, false, 2f64.sqrt(), rng),
                stride,
            },
            LayerKind::BatchNorm { channels } => Self::Bn(BatchNormState::new(channels)),
            LayerKind::Relu => Self::Relu,
            LayerKind::MaxPool => Self::MaxPool,
            LayerKind::LocalRelation(cfg) => Self::Lr { cfg, params: LocalRelationParams::init(&cfg, rng)? },
            LayerKind::GlobalAvgPool => Self::GlobalAvgPool,
            LayerKind::Linear { in_features, out_features } => {
                Self::Linear(ChannelTransform::init_gaussian(out_features, in_features, true, 1.0, rng))
            }
        })
    }

    /// `(suffix, tensor, decay)` in canonical order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>, bool)> {
        match self {
            Self::Conv(c) => vec![("weight", &c.weight, true)],
            Self::Ct { ct, .. } => vec![("weight", &ct.weight, true)],
            Self::Bn(b) => vec![("gamma", &b.gamma, false), ("beta", &b.beta, false)],
            Self::Lr { params, .. } => lr_param_list(params),
            Self::Linear(l) => vec![("weight", &l.weight, true), ("bias", l.bias.as_ref().expect("fc bias"), false)],
            Self::Relu | Self::MaxPool | Self::GlobalAvgPool => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>, bool)> {
        match self {
            Self::Conv(c) => vec![("weight", &mut c.weight, true)],
            Self::Ct { ct, .. } => vec![("weight", &mut ct.weight, true)],
            Self::Bn(b) => vec![("gamma", &mut b.gamma, false), ("beta", &mut b.beta, false)],
            Self::Lr { params, .. } => lr_param_list_mut(params),
            Self::Linear(l) => {
                let ChannelTransform { weight, bias } = l;
                vec![("weight", weight, true), ("bias", bias.as_mut().expect("fc bias"), false)]
            }
            Self::Relu | Self::MaxPool | Self::GlobalAvgPool => vec![],
        }
    }

    /// Non-learned state saved in checkpoints.
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Self::Bn(b) => vec![("running_mean", &b.running_mean), ("running_var", &b.running_var)],
            _ => vec![],
        }
    }

    /// Parameters then buffers, mutably.
    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Self::Bn(BatchNormState { gamma, beta, running_mean, running_var, .. }) => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
            other => other.params_mut().into_iter().map(|(s, t, _)| (s, t)).collect(),
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(match self {
            Self::Conv(c) => conv2d_fwd(x, c)?,
            Self::Ct { ct, stride } => channel_transform_fwd(&subsample(x, *stride), ct)?,
            Self::Bn(b) => batchnorm_fwd(x, b, BnMode::Eval)?.0,
            Self::Relu => relu_fwd(x),
            Self::MaxPool => maxpool3x3s2_fwd(x).0,
            Self::Lr { cfg, params } => lr_forward_optimized(x, params, cfg)?,
            Self::GlobalAvgPool => global_avgpool_fwd(x),
            Self::Linear(l) => fc_fwd(x, l)?,
        })
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        Ok(match self {
            Self::Conv(c) => (conv2d_fwd(x, c)?, Cache::Input(x.clone())),
            Self::Ct { ct, stride } => {
                let xs = subsample(x, *stride);
                (channel_transform_fwd(&xs, ct)?, Cache::Ct { x: xs, input_shape: x.shape() })
            }
            Self::Bn(b) => {
                let (y, cache) = batchnorm_fwd(x, b, BnMode::Train)?;
                let s = x.shape();
                b.update_running(&cache, s.n * s.plane());
                (y, Cache::Bn(cache))
            }
            Self::Relu => (relu_fwd(x), Cache::Input(x.clone())),
            Self::MaxPool => {
                let (y, argmax) = maxpool3x3s2_fwd(x);
                (y, Cache::MaxPool { argmax, input_shape: x.shape() })
            }
            Self::Lr { cfg, params } => {
                let (y, cache) = lr_forward_train(x, params, cfg)?;
                (y, Cache::Lr(Box::new(cache)))
            }
            Self::GlobalAvgPool => (global_avgpool_fwd(x), Cache::Pool(x.shape())),
            Self::Linear(l) => (fc_fwd(x, l)?, Cache::Input(x.clone())),
        })
    }

    /// Returns `grad_x` and parameter gradients in [`Layer::params`] order.
    fn backward(&self, cache: &Cache<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        Ok(match (self, cache) {
            (Self::Conv(c), Cache::Input(x)) => {
                let (gx, gw) = conv2d_bwd(x, c, g)?;
                (gx, vec![gw])
            }
            (Self::Ct { ct, stride }, Cache::Ct { x, input_shape }) => {
                let r = channel_transform_bwd(x, ct, g)?;
                let gx = if *stride == 1 { r.grad_x } else { subsample_bwd(&r.grad_x, *input_shape, *stride) };
                (gx, vec![r.grad_weight])
            }
            (Self::Bn(b), Cache::Bn(c)) => {
                let (gx, gg, gb) = batchnorm_bwd(g, c, b)?;
                (gx, vec![gg, gb])
            }
            (Self::Relu, Cache::Input(x)) => (relu_bwd(x, g)?, vec![]),
            (Self::MaxPool, Cache::MaxPool { argmax, input_shape }) => {
                (maxpool3x3s2_bwd(g, argmax, *input_shape)?, vec![])
            }
            (Self::Lr { cfg, params }, Cache::Lr(c)) => {
                let r = lr_backward(g, c, params, cfg)?;
                let mut v = vec![r.theta_q, r.theta_k];
                match r.geo {
                    GeoGrads::Network { first_weight, first_bias, second_weight, second_bias } => {
                        v.extend([first_weight, first_bias, second_weight, second_bias])
                    }
                    GeoGrads::Direct(t) => v.push(t),
                    GeoGrads::Off => {}
                }
                v.extend(r.theta_out);
                (r.grad_x, v)
            }
            (Self::GlobalAvgPool, Cache::Pool(s)) => (global_avgpool_bwd(g, *s)?, vec![]),
            (Self::Linear(l), Cache::Input(x)) => {
                let r = fc_bwd(x, l, g)?;
                (r.grad_x, vec![r.grad_weight, r.grad_bias.expect("fc bias grad")])
            }
            _ => return shape_err("layer cache does not match layer kind"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f32> {
    pub name: String,
    pub branch: Vec<NamedLayer<T>>,
    pub shortcut: Vec<NamedLayer<T>>,
}

struct BlockCache<T> {
    branch: Vec<Cache<T>>,
    shortcut: Vec<Cache<T>>,
    sum: Tensor<T>,
}

/// Saved activations from [`NetworkInstance::forward_train`].
pub struct NetCache<T> {
    stem: Vec<Cache<T>>,
    blocks: Vec<BlockCache<T>>,
    head: Vec<Cache<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInstance<T = f32> {
    pub plan: NetworkPlan,
    pub stem: Vec<NamedLayer<T>>,
    pub blocks: Vec<Block<T>>,
    pub head: Vec<NamedLayer<T>>,
}

/// Loss, accuracy count and gradients of one batch.
pub struct BatchGrads<T> {
    pub loss: T,
    pub correct: usize,
    pub grads: Vec<Tensor<T>>,
}

fn init_layers<T: Element, R: Rng + ?Sized>(plans: &[LayerPlan], rng: &mut R) -> Result<Vec<NamedLayer<T>>> {
    plans.iter().map(|p| Ok(NamedLayer { name: p.name.clone(), layer: Layer::init(&p.kind, rng)? })).collect()
}

fn run_train<T: Element>(layers: &mut [NamedLayer<T>], x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for l in layers {
        let (y, c) = l.layer.forward_train(&cur)?;
        caches.push(c);
        cur = y;
    }
    Ok((cur, caches))
}

fn run_eval<T: Element>(layers: &[NamedLayer<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut cur = x.clone();
    for l in layers {
        cur = l.layer.forward_eval(&cur)?;
    }
    Ok(cur)
}

/// Back-propagates through a chain; parameter grads come back in forward layer order.
fn run_backward<T: Element>(
    layers: &[NamedLayer<T>],
    caches: &[Cache<T>],
    g: Tensor<T>,
) -> Result<(Tensor<T>, Vec<Vec<Tensor<T>>>)> {
    let mut per_layer = vec![Vec::new(); layers.len()];
    let mut cur = g;
    for (i, (l, c)) in layers.iter().zip(caches).enumerate().rev() {
        let (gx, gp) = l.layer.backward(c, &cur)?;
        per_layer[i] = gp;
        cur = gx;
    }
    Ok((cur, per_layer))
}

impl<T: Element> NetworkInstance<T> {
    /// Plans and initializes `spec`; identical `(spec, seed)` give identical parameters.
    pub fn build(spec: &NetSpec, seed: u64) -> Result<Self> {
        let plan = plan_network(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_plan(plan, &mut rng)
    }

    pub fn from_plan<R: Rng + ?Sized>(plan: NetworkPlan, rng: &mut R) -> Result<Self> {
        let stem = init_layers(&plan.stem, rng)?;
        let blocks = plan
            .blocks
            .iter()
            .map(|b| {
                Ok(Block { name: b.name.clone(), branch: init_layers(&b.branch, rng)?, shortcut: init_layers(&b.shortcut, rng)? })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = init_layers(&plan.head, rng)?;
        Ok(Self { plan, stem, blocks, head })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.plan.spec
    }

    /// All layers in execution order.
    pub fn layers(&self) -> Vec<&NamedLayer<T>> {
        let mut v: Vec<&NamedLayer<T>> = self.stem.iter().collect();
        for b in &self.blocks {
            v.extend(&b.branch);
            v.extend(&b.shortcut);
        }
        v.extend(&self.head);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut NamedLayer<T>> {
        let mut v: Vec<&mut NamedLayer<T>> = self.stem.iter_mut().collect();
        for b in &mut self.blocks {
            v.extend(&mut b.branch);
            v.extend(&mut b.shortcut);
        }
        v.extend(&mut self.head);
        v
    }

    pub fn find_layer(&self, name: &str) -> Option<&NamedLayer<T>> {
        self.layers().into_iter().find(|l| l.name == name)
    }

    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                l.layer.params().into_iter().map(move |(s, t, decay)| ParamRef { name: format!("{}.{s}", l.name), tensor: t, decay })
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| {
                let name = l.name.clone();
                l.layer
                    .params_mut()
                    .into_iter()
                    .map(move |(s, t, decay)| ParamMut { name: format!("{name}.{s}"), tensor: t, decay })
            })
            .collect()
    }

    /// Parameters and buffers of every layer, as `(name, tensor)`.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for l in self.layers() {
            v.extend(l.layer.params().into_iter().map(|(s, t, _)| (format!("{}.{s}", l.name), t)));
            v.extend(l.layer.buffers().into_iter().map(|(s, t)| (format!("{}.{s}", l.name), t)));
        }
        v
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| {
                let name = l.name.clone();
                l.layer.state_mut().into_iter().map(move |(s, t)| (format!("{name}.{s}"), t))
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let [h, w] = self.plan.spec.input_resolution;
        if s.c != 3 || s.h != h || s.w != w {
            return shape_err(format!("network expects Nx3x{h}x{w} input, got {s}"));
        }
        Ok(())
    }

    /// Inference: batch norm uses running statistics, LR layers use the optimized kernel.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = run_eval(&self.stem, x)?;
        for b in &self.blocks {
            let mut y = run_eval(&b.branch, &cur)?;
            let s = if b.shortcut.is_empty() { cur } else { run_eval(&b.shortcut, &cur)? };
            y.add_assign(&s)?;
            cur = relu_fwd(&y);
        }
        run_eval(&self.head, &cur)
    }

    /// Training forward: batch statistics (running averages updated) and saved activations.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, NetCache<T>)> {
        self.check_input(x)?;
        let (mut cur, stem) = run_train(&mut self.stem, x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (mut y, branch) = run_train(&mut b.branch, &cur)?;
            let (s, shortcut) = if b.shortcut.is_empty() { (cur, Vec::new()) } else { run_train(&mut b.shortcut, &cur)? };
            y.add_assign(&s)?;
            cur = relu_fwd(&y);
            blocks.push(BlockCache { branch, shortcut, sum: y });
        }
        let (logits, head) = run_train(&mut self.head, &cur)?;
        Ok((logits, NetCache { stem, blocks, head }))
    }

    /// Gradients of all parameters, in [`NetworkInstance::params`] order, plus `grad_x`.
    pub fn backward(&self, cache: &NetCache<T>, grad_logits: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (mut g, head) = run_backward(&self.head, &cache.head, grad_logits.clone())?;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let gsum = relu_bwd(&c.sum, &g)?;
            let (mut gx, gb) = run_backward(&b.branch, &c.branch, gsum.clone())?;
            let (gs, gsc) = if b.shortcut.is_empty() { (gsum, Vec::new()) } else { run_backward(&b.shortcut, &c.shortcut, gsum)? };
            gx.add_assign(&gs)?;
            g = gx;
            block_grads.push((gb, gsc));
        }
        let (gx, stem) = run_backward(&self.stem, &cache.stem, g)?;
        let mut out: Vec<Tensor<T>> = stem.into_iter().flatten().collect();
        for (gb, gsc) in block_grads.into_iter().rev() {
            out.extend(gb.into_iter().flatten());
            out.extend(gsc.into_iter().flatten());
        }
        out.extend(head.into_iter().flatten());
        Ok((gx, out))
    }

    /// Mean cross-entropy, correct count and parameter gradients for one batch.
    pub fn batch_grads(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<BatchGrads<T>> {
        let (logits, cache) = self.forward_train(x)?;
        let loss = softmax_xent_fwd(&logits, labels)?;
        let correct = argmax_rows(&logits).iter().zip(labels).filter(|(p, l)| p == l).count();
        let g = softmax_xent_bwd(&logits, labels)?;
        let (_, grads) = self.backward(&cache, &g)?;
        Ok(BatchGrads { loss, correct, grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::network_cost;
    use crate::model::spec::{BlockKind, Preset, StemKind};

    pub(crate) fn tiny(block: BlockKind, stem: StemKind) -> NetSpec {
        let mut s = Preset::Lr26.spec().small_image(3);
        s.block = block;
        s.stem = stem;
        s.stage_blocks = [1, 1, 1, 1];
        s.stage_out_channels = [8, 16, 16, 16];
        s.inner_channels = Some([4, 4, 8, 8]);
        s.stem_channels = 4;
        s.input_resolution = [8, 8];
        s.lr.kernel = 3;
        s.lr.channels_per_group = 2;
        s.lr.geo_hidden = 4;
        s
    }

    #[test]
    fn param_count_matches_cost_report() {
        for (b, st) in [
            (BlockKind::BottleneckLr, StemKind::LrStem),
            (BlockKind::BasicLr, StemKind::LrStem),
            (BlockKind::BottleneckConv, StemKind::Conv7x7),
            (BlockKind::BasicConv, StemKind::Conv7x7),
        ] {
            let net = NetworkInstance::<f32>::build(&tiny(b, st), 1).unwrap();
            assert_eq!(net.num_params() as u64, network_cost(&net.plan).total_params, "{b:?}");
        }
    }

    #[test]
    fn forward_shapes() {
        let mut net = NetworkInstance::<f32>::build(&tiny(BlockKind::BottleneckLr, StemKind::LrStem), 2).unwrap();
        let x = Tensor::randn(Shape::new(2, 3, 8, 8), 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.forward_eval(&x).unwrap().shape(), Shape::new(2, 3, 1, 1));
        let (y, cache) = net.forward_train(&x).unwrap();
        let (gx, grads) = net.backward(&cache, &y).unwrap();
        assert_eq!(gx.shape(), x.shape());
        let params = net.params();
        assert_eq!(grads.len(), params.len());
        for (g, p) in grads.iter().zip(&params) {
            assert_eq!(g.shape(), p.tensor.shape(), "{}", p.name);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let s = tiny(BlockKind::BasicLr, StemKind::LrStem);
        let a = NetworkInstance::<f32>::build(&s, 9).unwrap();
        let b = NetworkInstance::<f32>::build(&s, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, NetworkInstance::<f32>::build(&s, 10).unwrap());
    }

    #[test]
    fn state_names_unique() {
        let net = NetworkInstance::<f32>::build(&tiny(BlockKind::BottleneckLr, StemKind::LrStem), 0).unwrap();
        let mut names: Vec<String> = net.state().into_iter().map(|(n, _)| n).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
