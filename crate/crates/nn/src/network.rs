//! DPN and U-Net built from conv-ReLU-BN blocks, with a flat parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::ops::{self, BnCache, TAPS};
use crate::real::Real;
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Dpn,
    Unet,
}

impl NetworkKind {
    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::Dpn => "dpn",
            NetworkKind::Unet => "unet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub in_channels: usize,
    pub out_classes: usize,
    #[serde(default = "default_dpn_filters")]
    pub dpn_filters: usize,
    #[serde(default = "default_unet_base")]
    pub unet_base_filters: usize,
    /// Resolution levels: 1, 1/2, .., 1/2^(levels-1).
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// Weight of the old value in the running batch-norm statistics.
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

fn default_dpn_filters() -> usize {
    32
}
fn default_unet_base() -> usize {
    16
}
fn default_levels() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.25
}
fn default_momentum() -> f64 {
    0.9
}

impl NetworkSpec {
    pub fn new(kind: NetworkKind, in_channels: usize, out_classes: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_classes,
            dpn_filters: default_dpn_filters(),
            unet_base_filters: default_unet_base(),
            levels: default_levels(),
            dropout_rate: default_dropout(),
            bn_momentum: default_momentum(),
        }
    }

    pub fn dpn(in_channels: usize, out_classes: usize) -> Self {
        Self::new(NetworkKind::Dpn, in_channels, out_classes)
    }

    pub fn unet(in_channels: usize, out_classes: usize) -> Self {
        Self::new(NetworkKind::Unet, in_channels, out_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::InvalidSpec(m.to_string()));
        if self.out_classes < 2 {
            return bad("out_classes must be >= 2");
        }
        if self.in_channels == 0 || self.dpn_filters == 0 || self.unet_base_filters == 0 {
            return bad("channel and filter counts must be >= 1");
        }
        if self.levels == 0 || self.levels > 6 {
            return bad("levels must be in 1..=6");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must be in [0, 1]");
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_input(&self, channels: usize, dims: [usize; 3]) -> Result<()> {
        if channels != self.in_channels {
            return Err(NnError::ChannelMismatch { expected: self.in_channels, got: channels });
        }
        let f = self.divisor();
        if dims.iter().any(|d| d % f != 0) {
            return Err(NnError::NotDivisible { dims, factor: f });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Slot {
    start: usize,
    len: usize,
}

impl Slot {
    fn of<'a, T>(&self, v: &'a [T]) -> &'a [T] {
        &v[self.start..self.start + self.len]
    }

    fn of_mut<'a, T>(&self, v: &'a mut [T]) -> &'a mut [T] {
        &mut v[self.start..self.start + self.len]
    }
}

fn accumulate<T: Real>(slot: Slot, grads: &mut [T], g: &[T]) {
    for (a, &b) in slot.of_mut(grads).iter_mut().zip(g) {
        *a += b;
    }
}

#[derive(Clone, Debug)]
struct Conv3Layer {
    cout: usize,
    w: Slot,
    b: Slot,
}

#[derive(Clone, Debug)]
struct Conv1Layer {
    cout: usize,
    w: Slot,
    b: Slot,
}

#[derive(Clone, Debug)]
struct BnLayer {
    gamma: Slot,
    beta: Slot,
    mean: Slot,
    var: Slot,
}

/// Conv 3x3x3, ReLU, batch norm.
#[derive(Clone, Debug)]
struct Block {
    conv: Conv3Layer,
    bn: BnLayer,
}

enum Init {
    He { slot: Slot, fan_in: usize },
    Const { slot: Slot, value: f64 },
}

#[derive(Default)]
struct Builder {
    params: usize,
    buffers: usize,
    init: Vec<Init>,
    buffer_init: Vec<(Slot, f64)>,
}

impl Builder {
    fn param(&mut self, len: usize) -> Slot {
        let s = Slot { start: self.params, len };
        self.params += len;
        s
    }

    fn buffer(&mut self, len: usize, value: f64) -> Slot {
        let s = Slot { start: self.buffers, len };
        self.buffers += len;
        self.buffer_init.push((s, value));
        s
    }

    fn block(&mut self, cin: usize, cout: usize) -> Block {
        let w = self.param(cout * cin * TAPS);
        let b = self.param(cout);
        self.init.push(Init::He { slot: w, fan_in: cin * TAPS });
        self.init.push(Init::Const { slot: b, value: 0.0 });
        let gamma = self.param(cout);
        let beta = self.param(cout);
        self.init.push(Init::Const { slot: gamma, value: 1.0 });
        self.init.push(Init::Const { slot: beta, value: 0.0 });
        let mean = self.buffer(cout, 0.0);
        let var = self.buffer(cout, 1.0);
        Block { conv: Conv3Layer { cout, w, b }, bn: BnLayer { gamma, beta, mean, var } }
    }

    fn stage(&mut self, cin: usize, cout: usize, blocks: usize) -> Vec<Block> {
        (0..blocks).map(|i| self.block(if i == 0 { cin } else { cout }, cout)).collect()
    }

    fn head(&mut self, cin: usize, cout: usize) -> Conv1Layer {
        let w = self.param(cout * cin);
        let b = self.param(cout);
        self.init.push(Init::He { slot: w, fan_in: cin });
        self.init.push(Init::Const { slot: b, value: 0.0 });
        Conv1Layer { cout, w, b }
    }

    fn finish<T: Real>(self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); self.params];
        for init in &self.init {
            match *init {
                Init::He { slot, fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for p in slot.of_mut(&mut params) {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        // round through f32 so both precisions start from the same values
                        *p = T::of((z * std) as f32 as f64);
                    }
                }
                Init::Const { slot, value } => slot.of_mut(&mut params).iter_mut().for_each(|p| *p = T::of(value)),
            }
        }
        let mut buffers = vec![T::zero(); self.buffers];
        for (slot, value) in &self.buffer_init {
            slot.of_mut(&mut buffers).iter_mut().for_each(|p| *p = T::of(*value));
        }
        ParamStore::new(params, buffers)
    }
}

/// Flat parameters, gradients, non-trainable buffers (running statistics) and
/// optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<T>,
    pub grads: Vec<T>,
    pub buffers: Vec<T>,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new(params: Vec<T>, buffers: Vec<T>) -> Self {
        let n = params.len();
        Self { params, grads: vec![T::zero(); n], buffers, first_moment: vec![T::zero(); n], second_moment: vec![T::zero(); n], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Clears optimizer moments and the step counter.
    pub fn reset_moments(&mut self) {
        self.first_moment.iter_mut().for_each(|g| *g = T::zero());
        self.second_moment.iter_mut().for_each(|g| *g = T::zero());
        self.step = 0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Batch statistics, running-statistic updates, and dropout masks drawn
    /// from `seed`.
    Train { seed: u64 },
}

#[derive(Clone, Debug)]
enum Arch {
    Dpn { levels: Vec<Vec<Block>>, head: Conv1Layer },
    Unet { encoder: Vec<Vec<Block>>, decoder: Vec<Vec<Block>>, head: Conv1Layer },
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub store: ParamStore<T>,
    arch: Arch,
}

struct BlockTape<T> {
    input: FeatureMap<T>,
    act: FeatureMap<T>,
    bn: BnCache<T>,
}

/// Everything the backward pass needs from one training forward pass.
pub struct Tape<T> {
    probs: FeatureMap<T>,
    head_input: FeatureMap<T>,
    stages: Vec<Vec<BlockTape<T>>>,
    masks: Vec<Option<Vec<T>>>,
    /// Dims of each level, finest first.
    level_dims: Vec<[usize; 3]>,
    input_dims: [usize; 3],
}

impl<T> Tape<T> {
    pub fn probs(&self) -> &FeatureMap<T> {
        &self.probs
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Real> Network<T> {
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder::default();
        let arch = match spec.kind {
            NetworkKind::Dpn => {
                let f = spec.dpn_filters;
                let levels = (0..spec.levels)
                    .map(|l| b.stage(if l == 0 { spec.in_channels } else { spec.in_channels + f }, f, 3))
                    .collect();
                let head = b.head(f, spec.out_classes);
                Arch::Dpn { levels, head }
            }
            NetworkKind::Unet => {
                let ch = |l: usize| spec.unet_base_filters << l;
                let encoder = (0..spec.levels).map(|l| b.stage(if l == 0 { spec.in_channels } else { ch(l - 1) }, ch(l), 2)).collect();
                let decoder = (0..spec.levels.saturating_sub(1)).map(|l| b.stage(ch(l + 1) + ch(l), ch(l), 2)).collect();
                let head = b.head(ch(0), spec.out_classes);
                Arch::Unet { encoder, decoder, head }
            }
        };
        Ok(Self { spec, store: b.finish(seed), arch })
    }

    /// Rebuilds a network from stored parameter and buffer values.
    pub fn from_parts(spec: NetworkSpec, params: Vec<T>, buffers: Vec<T>) -> Result<Self> {
        let mut net = Self::build(spec, 0)?;
        if params.len() != net.param_count() || buffers.len() != net.buffer_count() {
            return Err(NnError::SpecMismatch(format!(
                "{} params / {} buffers stored, architecture has {} / {}",
                params.len(),
                buffers.len(),
                net.param_count(),
                net.buffer_count()
            )));
        }
        net.store = ParamStore::new(params, buffers);
        Ok(net)
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.store.params.len()
    }

    pub fn buffer_count(&self) -> usize {
        self.store.buffers.len()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.to_f64().unwrap())).collect::<Vec<U>>();
        let mut store = ParamStore::new(conv(&self.store.params), conv(&self.store.buffers));
        store.first_moment = conv(&self.store.first_moment);
        store.second_moment = conv(&self.store.second_moment);
        store.step = self.store.step;
        Network { spec: self.spec, store, arch: self.arch.clone() }
    }

    fn block_eval(&self, blk: &Block, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let p = &self.store.params;
        let mut y = ops::conv3_forward(x, blk.conv.w.of(p), blk.conv.b.of(p), blk.conv.cout)?;
        ops::relu_inplace(&mut y);
        let bu = &self.store.buffers;
        Ok(ops::batchnorm_eval(&y, blk.bn.gamma.of(p), blk.bn.beta.of(p), blk.bn.mean.of(bu), blk.bn.var.of(bu)))
    }

    fn block_train(&mut self, blk: &Block, x: FeatureMap<T>) -> Result<(FeatureMap<T>, BlockTape<T>)> {
        let p = &self.store.params;
        let mut act = ops::conv3_forward(&x, blk.conv.w.of(p), blk.conv.b.of(p), blk.conv.cout)?;
        ops::relu_inplace(&mut act);
        let (y, bn) = ops::batchnorm_train(&act, blk.bn.gamma.of(p), blk.bn.beta.of(p));
        let m = self.spec.bn_momentum;
        for (c, (mean, var)) in bn.batch_mean.iter().zip(&bn.batch_var).enumerate() {
            let rm = &mut self.store.buffers[blk.bn.mean.start + c];
            *rm = T::of(m * rm.to_f64().unwrap() + (1.0 - m) * mean);
            let rv = &mut self.store.buffers[blk.bn.var.start + c];
            *rv = T::of(m * rv.to_f64().unwrap() + (1.0 - m) * var);
        }
        Ok((y, BlockTape { input: x, act, bn }))
    }

    fn block_backward(&mut self, blk: &Block, tape: &BlockTape<T>, dy: &FeatureMap<T>, need_dx: bool) -> Result<Option<FeatureMap<T>>> {
        let (mut d, dgamma, dbeta) = ops::batchnorm_backward(&tape.bn, blk.bn.gamma.of(&self.store.params), dy);
        accumulate(blk.bn.gamma, &mut self.store.grads, &dgamma);
        accumulate(blk.bn.beta, &mut self.store.grads, &dbeta);
        ops::relu_backward(&tape.act, &mut d);
        let g = ops::conv3_backward(&tape.input, blk.conv.w.of(&self.store.params), blk.conv.cout, &d, need_dx)?;
        accumulate(blk.conv.w, &mut self.store.grads, &g.dw);
        accumulate(blk.conv.b, &mut self.store.grads, &g.db);
        Ok(g.dx)
    }

    fn stage_eval(&self, blocks: &[Block], mut x: FeatureMap<T>) -> Result<FeatureMap<T>> {
        for blk in blocks {
            x = self.block_eval(blk, &x)?;
        }
        Ok(x)
    }

    fn stage_train(&mut self, blocks: &[Block], mut x: FeatureMap<T>) -> Result<(FeatureMap<T>, Vec<BlockTape<T>>)> {
        let mut tapes = Vec::with_capacity(blocks.len());
        for blk in blocks {
            let (y, t) = self.block_train(blk, x)?;
            tapes.push(t);
            x = y;
        }
        Ok((x, tapes))
    }

    fn stage_backward(&mut self, blocks: &[Block], tapes: &[BlockTape<T>], mut dy: FeatureMap<T>, need_dx: bool) -> Result<Option<FeatureMap<T>>> {
        for (i, (blk, tape)) in blocks.iter().zip(tapes).enumerate().rev() {
            match self.block_backward(blk, tape, &dy, need_dx || i > 0)? {
                Some(dx) => dy = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(dy))
    }

    fn head_forward(&self, head: &Conv1Layer, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let p = &self.store.params;
        Ok(ops::softmax(&ops::conv1_forward(x, head.w.of(p), head.b.of(p), head.cout)?))
    }

    fn dropout(&self, x: &mut FeatureMap<T>, mode: Mode, level: usize) -> Result<Option<Vec<T>>> {
        match mode {
            Mode::Train { seed } if self.spec.dropout_rate > 0.0 => {
                let mask = ops::dropout_mask(x.data.len(), self.spec.dropout_rate, mix_seed(seed, level as u64))?;
                ops::apply_mask(x, &mask);
                Ok(Some(mask))
            }
            _ => Ok(None),
        }
    }

    /// Class probabilities in eval mode.
    pub fn predict(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.spec.check_input(x.channels, x.dims)?;
        let arch = &self.arch;
        match arch {
            Arch::Dpn { levels, head } => {
                let n = levels.len();
                let mut h: Option<FeatureMap<T>> = None;
                for (l, blocks) in levels.iter().enumerate() {
                    let inp = ops::downsample(x, 1 << (n - 1 - l))?;
                    let z = match h {
                        None => inp,
                        Some(prev) => ops::concat(&inp, &ops::upsample(&prev, 2))?,
                    };
                    h = Some(self.stage_eval(blocks, z)?);
                }
                self.head_forward(head, h.as_ref().expect("at least one level"))
            }
            Arch::Unet { encoder, decoder, head } => {
                let mut skips = Vec::with_capacity(encoder.len());
                for (l, blocks) in encoder.iter().enumerate() {
                    let inp = if l == 0 { x.clone() } else { ops::downsample(skips.last().expect("previous level"), 2)? };
                    skips.push(self.stage_eval(blocks, inp)?);
                }
                let mut d = skips.pop().expect("at least one level");
                for l in (0..decoder.len()).rev() {
                    let z = ops::concat(&ops::upsample(&d, 2), &skips[l])?;
                    d = self.stage_eval(&decoder[l], z)?;
                }
                self.head_forward(head, &d)
            }
        }
    }

    /// Training-mode forward pass. Updates running batch-norm statistics.
    pub fn forward_train(&mut self, x: &FeatureMap<T>, seed: u64) -> Result<Tape<T>> {
        self.spec.check_input(x.channels, x.dims)?;
        let mode = Mode::Train { seed };
        let arch = self.arch.clone();
        match &arch {
            Arch::Dpn { levels, head } => {
                let n = levels.len();
                let mut stages = Vec::with_capacity(n);
                let mut masks = Vec::with_capacity(n);
                let mut level_dims = vec![[0; 3]; n];
                let mut h: Option<FeatureMap<T>> = None;
                for (l, blocks) in levels.iter().enumerate() {
                    let inp = ops::downsample(x, 1 << (n - 1 - l))?;
                    level_dims[n - 1 - l] = inp.dims;
                    let z = match h.take() {
                        None => inp,
                        Some(prev) => ops::concat(&inp, &ops::upsample(&prev, 2))?,
                    };
                    let (mut y, tapes) = self.stage_train(blocks, z)?;
                    stages.push(tapes);
                    masks.push(if l + 1 < n { self.dropout(&mut y, mode, l)? } else { None });
                    h = Some(y);
                }
                let head_input = h.expect("at least one level");
                let probs = self.head_forward(head, &head_input)?;
                Ok(Tape { probs, head_input, stages, masks, level_dims, input_dims: x.dims })
            }
            Arch::Unet { encoder, decoder, head } => {
                let n = encoder.len();
                let mut stages = Vec::with_capacity(2 * n);
                let mut skips: Vec<FeatureMap<T>> = Vec::with_capacity(n);
                let mut level_dims = Vec::with_capacity(n);
                for (l, blocks) in encoder.iter().enumerate() {
                    let inp = if l == 0 { x.clone() } else { ops::downsample(skips.last().expect("previous level"), 2)? };
                    level_dims.push(inp.dims);
                    let (y, tapes) = self.stage_train(blocks, inp)?;
                    stages.push(tapes);
                    skips.push(y);
                }
                let mut masks = Vec::with_capacity(n);
                let mut d = skips.pop().expect("at least one level");
                masks.push(if n > 1 { self.dropout(&mut d, mode, n - 1)? } else { None });
                for l in (0..decoder.len()).rev() {
                    let z = ops::concat(&ops::upsample(&d, 2), &skips[l])?;
                    let (mut y, tapes) = self.stage_train(&decoder[l], z)?;
                    stages.push(tapes);
                    masks.push(if l > 0 { self.dropout(&mut y, mode, l)? } else { None });
                    d = y;
                }
                let probs = self.head_forward(head, &d)?;
                Ok(Tape { probs, head_input: d, stages, masks, level_dims, input_dims: x.dims })
            }
        }
    }

    /// Accumulates parameter gradients for `dprobs` (the loss gradient with
    /// respect to the output probabilities). Returns the input gradient when
    /// asked for.
    pub fn backward(&mut self, tape: &Tape<T>, dprobs: &FeatureMap<T>, need_input_grad: bool) -> Result<Option<FeatureMap<T>>> {
        if !dprobs.same_shape(&tape.probs) {
            return Err(NnError::ShapeMismatch("output gradient".into()));
        }
        let dlogits = ops::softmax_backward(&tape.probs, dprobs);
        let arch = self.arch.clone();
        let head = match &arch {
            Arch::Dpn { head, .. } | Arch::Unet { head, .. } => head,
        };
        let g = ops::conv1_backward(&tape.head_input, head.w.of(&self.store.params), head.cout, &dlogits, true)?;
        accumulate(head.w, &mut self.store.grads, &g.dw);
        accumulate(head.b, &mut self.store.grads, &g.db);
        let mut dh = g.dx.expect("requested");
        let in_ch = self.spec.in_channels;
        match &arch {
            Arch::Dpn { levels, .. } => {
                let n = levels.len();
                let mut dx: Option<FeatureMap<T>> = None;
                for l in (0..n).rev() {
                    if let Some(mask) = &tape.masks[l] {
                        ops::apply_mask(&mut dh, mask);
                    }
                    let need = l > 0 || need_input_grad;
                    let Some(dz) = self.stage_backward(&levels[l], &tape.stages[l], dh, need)? else {
                        return Ok(None);
                    };
                    let (dinp, dup) = if l > 0 {
                        let (a, b) = ops::split(&dz, in_ch);
                        (a, Some(b))
                    } else {
                        (dz, None)
                    };
                    if need_input_grad {
                        let g = ops::downsample_backward(&dinp, tape.input_dims, 1 << (n - 1 - l));
                        dx = Some(match dx {
                            None => g,
                            Some(mut acc) => {
                                acc.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a += b);
                                acc
                            }
                        });
                    }
                    match dup {
                        Some(du) => dh = ops::upsample_backward(&du, tape.level_dims[n - l], 2),
                        None => break,
                    }
                }
                Ok(dx)
            }
            Arch::Unet { encoder, decoder, .. } => {
                let n = encoder.len();
                let base = self.spec.unet_base_filters;
                let ch = |l: usize| base << l;
                let mut dskip: Vec<Option<FeatureMap<T>>> = vec![None; n];
                // decoder stages were recorded after the encoder, coarsest first
                for l in 0..decoder.len() {
                    if let Some(mask) = &tape.masks[decoder.len() - l] {
                        ops::apply_mask(&mut dh, mask);
                    }
                    let tape_idx = n + (decoder.len() - 1 - l);
                    let dz = self.stage_backward(&decoder[l], &tape.stages[tape_idx], dh, true)?.expect("requested");
                    let (du, ds) = ops::split(&dz, ch(l + 1));
                    add_into(&mut dskip[l], ds);
                    dh = ops::upsample_backward(&du, tape.level_dims[l + 1], 2);
                }
                if let Some(mask) = &tape.masks[0] {
                    ops::apply_mask(&mut dh, mask);
                }
                add_into(&mut dskip[n - 1], dh);
                let mut dx = None;
                for l in (0..n).rev() {
                    let g = dskip[l].take().expect("every level receives a gradient");
                    let need = l > 0 || need_input_grad;
                    let Some(dinp) = self.stage_backward(&encoder[l], &tape.stages[l], g, need)? else {
                        break;
                    };
                    if l > 0 {
                        add_into(&mut dskip[l - 1], ops::downsample_backward(&dinp, tape.level_dims[l - 1], 2));
                    } else {
                        dx = Some(dinp);
                    }
                }
                Ok(dx)
            }
        }
    }
}

fn add_into<T: Real>(slot: &mut Option<FeatureMap<T>>, g: FeatureMap<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a += b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_counts() {
        let dpn = Network::<f32>::build(NetworkSpec::dpn(3, 3), 0).unwrap();
        let unet = Network::<f32>::build(NetworkSpec::unet(3, 3), 0).unwrap();
        assert_eq!(dpn.param_count(), 315_747);
        assert_eq!(unet.param_count(), 1_461_891);
        assert!((dpn.param_count() as f64) <= 0.25 * unet.param_count() as f64);
    }

    #[test]
    fn forward_preserves_shape_and_normalizes() {
        for kind in [NetworkKind::Dpn, NetworkKind::Unet] {
            let spec = NetworkSpec { dpn_filters: 4, unet_base_filters: 2, ..NetworkSpec::new(kind, 2, 3) };
            let mut net = Network::<f32>::build(spec, 1).unwrap();
            let x = FeatureMap::new(2, [16; 3], (0..2 * 4096).map(|i| ((i * 7919) % 97) as f32 / 97.0).collect()).unwrap();
            let p = net.predict(&x).unwrap();
            assert_eq!((p.channels, p.dims), (3, [16; 3]));
            for v in 0..p.voxels() {
                let s: f32 = (0..3).map(|c| p.at(c, v)).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            assert_eq!(p, net.predict(&x).unwrap());
            let a = net.clone().forward_train(&x, 5).unwrap().probs;
            let b = net.forward_train(&x, 5).unwrap().probs;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn input_shape_errors() {
        let net = Network::<f32>::build(NetworkSpec { dpn_filters: 2, ..NetworkSpec::dpn(2, 3) }, 0).unwrap();
        let x = FeatureMap::<f32>::zeros(2, [12, 16, 16]);
        assert!(matches!(net.predict(&x), Err(NnError::NotDivisible { factor: 8, .. })));
        let x = FeatureMap::<f32>::zeros(3, [16; 3]);
        assert!(matches!(net.predict(&x), Err(NnError::ChannelMismatch { .. })));
        assert!(Network::<f32>::build(NetworkSpec::dpn(2, 1), 0).is_err());
    }
}
