//! Layers with hand-derived backward passes, the three-head model, He
//! initialization, freeze flags, and the checkpoint format.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::GRADE_CAP;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv3x3 { in_ch: usize, out_ch: usize, stride: usize },
    Relu,
    /// Rectifier with a small negative-side slope; keeps gradients alive
    /// in narrow stacks where plain rectification can kill whole channels.
    LeakyRelu { slope: f64 },
    GlobalAvgPool,
    Dropout { p: f64 },
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv3x3 { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S: Scalar> {
    pub spec: LayerSpec,
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He initialization: weights ~ N(0, 2/fan_in), biases zero.
pub fn he_init<S: Scalar>(spec: &LayerSpec, seed: u64) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w_shape, fan_in, b_len) = match spec {
        LayerSpec::Dense { input, output } => (vec![*output, *input], *input, *output),
        LayerSpec::Conv3x3 { in_ch, out_ch, .. } => {
            (vec![*out_ch, *in_ch, 3, 3], in_ch * 9, *out_ch)
        }
        other => {
            return Err(Error::Config(format!(
                "layer {other:?} has no trainable parameters"
            )))
        }
    };
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = w_shape.iter().product();
    let data = (0..n).map(|_| S::of_f64(std * gaussian(&mut rng))).collect();
    Ok((
        Tensor::from_vec(&w_shape, data),
        Tensor::zeros(&[b_len]),
    ))
}

impl<S: Scalar> Layer<S> {
    pub fn new(spec: LayerSpec, seed: u64) -> Result<Self> {
        let (weight, bias) = if spec.has_params() {
            let (w, b) = he_init(&spec, seed)?;
            (Some(w), Some(b))
        } else {
            (None, None)
        };
        Ok(Layer { spec, weight, bias })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer state captured by forward for use in backward.
#[derive(Debug)]
pub enum LayerCache<S: Scalar> {
    Input(Tensor<S>),
    /// Per-element multipliers: 0 or 1/(1-p) for dropout, 0/1 for relu.
    Mask(Vec<S>),
    Shape(Vec<usize>),
    None,
}

fn shape_err(layer: usize, expected: String, got: &[usize]) -> Error {
    Error::ShapeMismatch {
        layer,
        expected,
        got: format!("{got:?}"),
    }
}

fn forward_layer<S: Scalar>(
    layer: &Layer<S>,
    index: usize,
    input: Tensor<S>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, LayerCache<S>)> {
    match &layer.spec {
        LayerSpec::Dense { input: fin, output: fout } => {
            if input.shape().len() != 2 || input.shape()[1] != *fin {
                return Err(shape_err(index, format!("[N, {fin}]"), input.shape()));
            }
            let n = input.shape()[0];
            let w = layer.weight.as_ref().unwrap();
            let b = layer.bias.as_ref().unwrap();
            let mut out = Tensor::zeros(&[n, *fout]);
            for s in 0..n {
                for o in 0..*fout {
                    let mut acc = b.data()[o];
                    for i in 0..*fin {
                        acc += w.data()[o * fin + i] * input.data()[s * fin + i];
                    }
                    out.data_mut()[s * fout + o] = acc;
                }
            }
            Ok((out, LayerCache::Input(input)))
        }
        LayerSpec::Conv3x3 { in_ch, out_ch, stride } => {
            if input.shape().len() != 4 || input.shape()[1] != *in_ch {
                return Err(shape_err(index, format!("[N, {in_ch}, H, W]"), input.shape()));
            }
            let (n, h, w_in) = (input.shape()[0], input.shape()[2], input.shape()[3]);
            let (oh, ow) = ((h - 1) / stride + 1, (w_in - 1) / stride + 1);
            let wt = layer.weight.as_ref().unwrap();
            let b = layer.bias.as_ref().unwrap();
            let mut out = Tensor::zeros(&[n, *out_ch, oh, ow]);
            for s in 0..n {
                for co in 0..*out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b.data()[co];
                            for ci in 0..*in_ch {
                                for ky in 0..3 {
                                    let iy = (oy * stride + ky) as i64 - 1;
                                    if !(0..h as i64).contains(&iy) {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = (ox * stride + kx) as i64 - 1;
                                        if !(0..w_in as i64).contains(&ix) {
                                            continue;
                                        }
                                        acc += wt.data()[((co * in_ch + ci) * 3 + ky) * 3 + kx]
                                            * input.data()
                                                [input.idx4(s, ci, iy as usize, ix as usize)];
                                    }
                                }
                            }
                            let idx = out.idx4(s, co, oy, ox);
                            out.data_mut()[idx] = acc;
                        }
                    }
                }
            }
            Ok((out, LayerCache::Input(input)))
        }
        LayerSpec::Relu => {
            let mut out = input;
            let mask = out
                .data_mut()
                .iter_mut()
                .map(|v| {
                    if *v > S::zero() {
                        S::one()
                    } else {
                        *v = S::zero();
                        S::zero()
                    }
                })
                .collect();
            Ok((out, LayerCache::Mask(mask)))
        }
        LayerSpec::LeakyRelu { slope } => {
            let a = S::of_f64(*slope);
            let mut out = input;
            let mask = out
                .data_mut()
                .iter_mut()
                .map(|v| {
                    if *v > S::zero() {
                        S::one()
                    } else {
                        *v = *v * a;
                        a
                    }
                })
                .collect();
            Ok((out, LayerCache::Mask(mask)))
        }
        LayerSpec::GlobalAvgPool => {
            if input.shape().len() != 4 {
                return Err(shape_err(index, "[N, C, H, W]".to_string(), input.shape()));
            }
            let (n, c, h, w) = (
                input.shape()[0],
                input.shape()[1],
                input.shape()[2],
                input.shape()[3],
            );
            let inv = S::of_f64(1.0 / (h * w) as f64);
            let mut out = Tensor::zeros(&[n, c]);
            for s in 0..n {
                for ch in 0..c {
                    let mut acc = S::zero();
                    for y in 0..h {
                        for x in 0..w {
                            acc += input.data()[input.idx4(s, ch, y, x)];
                        }
                    }
                    out.data_mut()[s * c + ch] = acc * inv;
                }
            }
            Ok((out, LayerCache::Shape(input.shape().to_vec())))
        }
        LayerSpec::Dropout { p } => {
            if mode == Mode::Eval || *p == 0.0 {
                return Ok((input, LayerCache::None));
            }
            let keep_scale = S::of_f64(1.0 / (1.0 - p));
            let mut out = input;
            let mask: Vec<S> = out
                .data_mut()
                .iter_mut()
                .map(|v| {
                    if rng.gen_range(0.0..1.0) < *p {
                        *v = S::zero();
                        S::zero()
                    } else {
                        *v *= keep_scale;
                        keep_scale
                    }
                })
                .collect();
            Ok((out, LayerCache::Mask(mask)))
        }
        LayerSpec::Flatten => {
            let n = input.shape()[0];
            let rest: usize = input.shape()[1..].iter().product();
            let shape = input.shape().to_vec();
            Ok((input.reshaped(&[n, rest]), LayerCache::Shape(shape)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerGrad<S: Scalar> {
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

fn backward_layer<S: Scalar>(
    layer: &Layer<S>,
    cache: &LayerCache<S>,
    d_out: Tensor<S>,
) -> Result<(Tensor<S>, LayerGrad<S>)> {
    match (&layer.spec, cache) {
        (LayerSpec::Dense { input: fin, output: fout }, LayerCache::Input(x)) => {
            let n = x.shape()[0];
            let w = layer.weight.as_ref().unwrap();
            let mut dw = Tensor::zeros(&[*fout, *fin]);
            let mut db = Tensor::zeros(&[*fout]);
            let mut dx = Tensor::zeros(x.shape());
            for s in 0..n {
                for o in 0..*fout {
                    let g = d_out.data()[s * fout + o];
                    db.data_mut()[o] += g;
                    for i in 0..*fin {
                        dw.data_mut()[o * fin + i] += g * x.data()[s * fin + i];
                        dx.data_mut()[s * fin + i] += g * w.data()[o * fin + i];
                    }
                }
            }
            Ok((dx, LayerGrad { weight: Some(dw), bias: Some(db) }))
        }
        (LayerSpec::Conv3x3 { in_ch, out_ch, stride }, LayerCache::Input(x)) => {
            let (n, h, w_in) = (x.shape()[0], x.shape()[2], x.shape()[3]);
            let (oh, ow) = (d_out.shape()[2], d_out.shape()[3]);
            let wt = layer.weight.as_ref().unwrap();
            let mut dw = Tensor::zeros(&[*out_ch, *in_ch, 3, 3]);
            let mut db = Tensor::zeros(&[*out_ch]);
            let mut dx = Tensor::zeros(x.shape());
            for s in 0..n {
                for co in 0..*out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = d_out.data()[d_out.idx4(s, co, oy, ox)];
                            db.data_mut()[co] += g;
                            for ci in 0..*in_ch {
                                for ky in 0..3 {
                                    let iy = (oy * stride + ky) as i64 - 1;
                                    if !(0..h as i64).contains(&iy) {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = (ox * stride + kx) as i64 - 1;
                                        if !(0..w_in as i64).contains(&ix) {
                                            continue;
                                        }
                                        let wi = ((co * in_ch + ci) * 3 + ky) * 3 + kx;
                                        let xi = x.idx4(s, ci, iy as usize, ix as usize);
                                        dw.data_mut()[wi] += g * x.data()[xi];
                                        dx.data_mut()[xi] += g * wt.data()[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok((dx, LayerGrad { weight: Some(dw), bias: Some(db) }))
        }
        (LayerSpec::Relu, LayerCache::Mask(mask))
        | (LayerSpec::LeakyRelu { .. }, LayerCache::Mask(mask))
        | (LayerSpec::Dropout { .. }, LayerCache::Mask(mask)) => {
            let mut dx = d_out;
            for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                *d *= *m;
            }
            Ok((dx, LayerGrad { weight: None, bias: None }))
        }
        (LayerSpec::Dropout { .. }, LayerCache::None) => {
            Ok((d_out, LayerGrad { weight: None, bias: None }))
        }
        (LayerSpec::GlobalAvgPool, LayerCache::Shape(shape)) => {
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let inv = S::of_f64(1.0 / (h * w) as f64);
            let mut dx = Tensor::zeros(shape);
            for s in 0..n {
                for ch in 0..c {
                    let g = d_out.data()[s * c + ch] * inv;
                    for y in 0..h {
                        for x in 0..w {
                            let idx = dx.idx4(s, ch, y, x);
                            dx.data_mut()[idx] = g;
                        }
                    }
                }
            }
            Ok((dx, LayerGrad { weight: None, bias: None }))
        }
        (LayerSpec::Flatten, LayerCache::Shape(shape)) => {
            Ok((d_out.reshaped(shape), LayerGrad { weight: None, bias: None }))
        }
        _ => Err(Error::Protocol("stale or missing layer cache".into())),
    }
}

pub fn forward_stack<S: Scalar>(
    layers: &[Layer<S>],
    input: Tensor<S>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, Vec<LayerCache<S>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut x = input;
    for (i, layer) in layers.iter().enumerate() {
        let (out, cache) = forward_layer(layer, i, x, mode, rng)?;
        caches.push(cache);
        x = out;
    }
    Ok((x, caches))
}

/// Backward through a stack. Returns the input gradient and, when
/// `collect_grads`, per-layer parameter gradients.
pub fn backward_stack<S: Scalar>(
    layers: &[Layer<S>],
    caches: &[LayerCache<S>],
    d_out: Tensor<S>,
    collect_grads: bool,
) -> Result<(Tensor<S>, Option<Vec<LayerGrad<S>>>)> {
    if caches.len() != layers.len() {
        return Err(Error::Protocol("stale or missing stack cache".into()));
    }
    let mut grads: Vec<LayerGrad<S>> = Vec::with_capacity(layers.len());
    let mut d = d_out;
    for (layer, cache) in layers.iter().zip(caches).rev() {
        let (dx, g) = backward_layer(layer, cache, d)?;
        d = dx;
        grads.push(g);
    }
    grads.reverse();
    Ok((d, collect_grads.then_some(grads)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockId {
    Encoder,
    ClsHead,
    RegHead,
    OrdHead,
    Fusion,
}

impl BlockId {
    pub fn parse(name: &str) -> Result<BlockId> {
        match name {
            "encoder" => Ok(BlockId::Encoder),
            "cls" | "cls_head" => Ok(BlockId::ClsHead),
            "reg" | "reg_head" => Ok(BlockId::RegHead),
            "ord" | "ord_head" => Ok(BlockId::OrdHead),
            "fusion" => Ok(BlockId::Fusion),
            other => Err(Error::UnknownBlock(other.into())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub cls: bool,
    pub reg: bool,
    pub ord: bool,
    pub fusion: bool,
}

/// Shared encoder, three task heads, and the linear fusion block.
#[derive(Clone, Debug, PartialEq)]
pub struct ThreeHeadModel<S: Scalar> {
    pub encoder: Vec<Layer<S>>,
    pub cls_head: Vec<Layer<S>>,
    pub reg_head: Vec<Layer<S>>,
    pub ord_head: Vec<Layer<S>>,
    pub fusion_w: [S; 3],
    pub fusion_b: S,
    pub freeze: FreezeFlags,
}

pub const N_CLASSES: usize = 5;

fn head_stack<S: Scalar>(feature_dim: usize, outputs: usize, seed: u64) -> Result<Vec<Layer<S>>> {
    Ok(vec![
        Layer::new(LayerSpec::Dropout { p: 0.3 }, seed)?,
        Layer::new(LayerSpec::Dense { input: feature_dim, output: outputs }, seed)?,
    ])
}

impl<S: Scalar> ThreeHeadModel<S> {
    /// Desk-scale default: two stride-2 convs, GAP, a 32-wide dense feature
    /// layer, then dropout+dense heads of widths 5/1/5.
    pub fn new_default(seed: u64) -> Result<Self> {
        let act = LayerSpec::LeakyRelu { slope: 0.1 };
        let encoder = vec![
            Layer::new(LayerSpec::Conv3x3 { in_ch: 3, out_ch: 8, stride: 2 }, seed)?,
            Layer::new(act, seed)?,
            Layer::new(LayerSpec::Conv3x3 { in_ch: 8, out_ch: 16, stride: 2 }, seed.wrapping_add(1))?,
            Layer::new(act, seed)?,
            Layer::new(LayerSpec::GlobalAvgPool, seed)?,
            Layer::new(LayerSpec::Dense { input: 16, output: 32 }, seed.wrapping_add(2))?,
            Layer::new(act, seed)?,
        ];
        Ok(ThreeHeadModel {
            encoder,
            cls_head: head_stack(32, N_CLASSES, seed.wrapping_add(3))?,
            reg_head: head_stack(32, 1, seed.wrapping_add(4))?,
            ord_head: head_stack(32, N_CLASSES, seed.wrapping_add(5))?,
            fusion_w: [S::of_f64(1.0 / 3.0); 3],
            fusion_b: S::zero(),
            freeze: FreezeFlags { fusion: true, ..FreezeFlags::default() },
        })
    }

    pub fn set_frozen(&mut self, block: BlockId, frozen: bool) {
        match block {
            BlockId::Encoder => self.freeze.encoder = frozen,
            BlockId::ClsHead => self.freeze.cls = frozen,
            BlockId::RegHead => self.freeze.reg = frozen,
            BlockId::OrdHead => self.freeze.ord = frozen,
            BlockId::Fusion => self.freeze.fusion = frozen,
        }
    }

    pub fn is_frozen(&self, block: BlockId) -> bool {
        match block {
            BlockId::Encoder => self.freeze.encoder,
            BlockId::ClsHead => self.freeze.cls,
            BlockId::RegHead => self.freeze.reg,
            BlockId::OrdHead => self.freeze.ord,
            BlockId::Fusion => self.freeze.fusion,
        }
    }

    /// Keeps the encoder and fusion bit-identical, re-initializes all three
    /// head blocks.
    pub fn reinit_heads(&mut self, seed: u64) -> Result<()> {
        for (offset, head) in [
            (0u64, &mut self.cls_head),
            (100, &mut self.reg_head),
            (200, &mut self.ord_head),
        ] {
            for (i, layer) in head.iter_mut().enumerate() {
                if layer.spec.has_params() {
                    let (w, b) = he_init(&layer.spec, seed.wrapping_add(offset + i as u64))?;
                    layer.weight = Some(w);
                    layer.bias = Some(b);
                }
            }
        }
        Ok(())
    }

    pub fn block_layers(&self, block: BlockId) -> &[Layer<S>] {
        match block {
            BlockId::Encoder => &self.encoder,
            BlockId::ClsHead => &self.cls_head,
            BlockId::RegHead => &self.reg_head,
            BlockId::OrdHead => &self.ord_head,
            BlockId::Fusion => &[],
        }
    }

    pub fn block_layers_mut(&mut self, block: BlockId) -> &mut Vec<Layer<S>> {
        match block {
            BlockId::Encoder => &mut self.encoder,
            BlockId::ClsHead => &mut self.cls_head,
            BlockId::RegHead => &mut self.reg_head,
            BlockId::OrdHead => &mut self.ord_head,
            BlockId::Fusion => unreachable!("fusion has no layer stack"),
        }
    }

    pub fn convert<T: Scalar>(&self) -> ThreeHeadModel<T> {
        let conv_stack = |layers: &[Layer<S>]| -> Vec<Layer<T>> {
            layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    weight: l.weight.as_ref().map(|t| t.convert()),
                    bias: l.bias.as_ref().map(|t| t.convert()),
                })
                .collect()
        };
        ThreeHeadModel {
            encoder: conv_stack(&self.encoder),
            cls_head: conv_stack(&self.cls_head),
            reg_head: conv_stack(&self.reg_head),
            ord_head: conv_stack(&self.ord_head),
            fusion_w: self.fusion_w.map(|v| T::of_f64(v.as_f64())),
            fusion_b: T::of_f64(self.fusion_b.as_f64()),
            freeze: self.freeze,
        }
    }
}

/// Per-sample head outputs after activation.
#[derive(Clone, Debug)]
pub struct HeadOutputs<S: Scalar> {
    pub cls_probs: [S; N_CLASSES],
    pub cls_scalar: S,
    pub reg_scalar: S,
    pub ord_sigmoids: [S; N_CLASSES],
    pub ord_scalar: S,
    pub fused: S,
}

#[derive(Debug)]
pub struct ForwardCache<S: Scalar> {
    pub encoder_caches: Vec<LayerCache<S>>,
    pub cls_caches: Vec<LayerCache<S>>,
    pub reg_caches: Vec<LayerCache<S>>,
    pub ord_caches: Vec<LayerCache<S>>,
    pub cls_raw: Tensor<S>,
    pub reg_raw: Tensor<S>,
    pub ord_raw: Tensor<S>,
}

pub fn softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn head_outputs_from_raw<S: Scalar>(
    fusion_w: &[S; 3],
    fusion_b: S,
    cls_raw: &[S],
    reg_raw: S,
    ord_raw: &[S],
) -> HeadOutputs<S> {
    let probs_v = softmax_row(cls_raw);
    let mut cls_probs = [S::zero(); N_CLASSES];
    cls_probs.copy_from_slice(&probs_v);
    let cls_scalar = cls_probs
        .iter()
        .enumerate()
        .map(|(i, &p)| S::of_f64(i as f64) * p)
        .fold(S::zero(), |a, b| a + b);
    let mut ord_sigmoids = [S::zero(); N_CLASSES];
    for (o, &r) in ord_sigmoids.iter_mut().zip(ord_raw) {
        *o = sigmoid(r);
    }
    let ord_sum: S = ord_sigmoids.iter().cloned().sum();
    let ord_scalar = (ord_sum - S::one()).max(S::zero()).min(S::of_f64(4.0));
    let reg_clamped = reg_raw.max(S::zero()).min(S::of_f64(GRADE_CAP));
    let fused = fusion_w[0] * cls_scalar + fusion_w[1] * reg_clamped + fusion_w[2] * ord_scalar
        + fusion_b;
    HeadOutputs {
        cls_probs,
        cls_scalar,
        reg_scalar: reg_raw,
        ord_sigmoids,
        ord_scalar,
        fused,
    }
}

pub fn forward<S: Scalar>(
    model: &ThreeHeadModel<S>,
    batch: Tensor<S>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<HeadOutputs<S>>, ForwardCache<S>)> {
    let (features, encoder_caches) = forward_stack(&model.encoder, batch, mode, rng)?;
    let (cls_raw, cls_caches) = forward_stack(&model.cls_head, features.clone(), mode, rng)?;
    let (reg_raw, reg_caches) = forward_stack(&model.reg_head, features.clone(), mode, rng)?;
    let (ord_raw, ord_caches) = forward_stack(&model.ord_head, features, mode, rng)?;

    let n = cls_raw.shape()[0];
    let mut outputs = Vec::with_capacity(n);
    for s in 0..n {
        let cls_row = &cls_raw.data()[s * N_CLASSES..(s + 1) * N_CLASSES];
        let ord_row = &ord_raw.data()[s * N_CLASSES..(s + 1) * N_CLASSES];
        outputs.push(head_outputs_from_raw(
            &model.fusion_w,
            model.fusion_b,
            cls_row,
            reg_raw.data()[s],
            ord_row,
        ));
    }
    Ok((
        outputs,
        ForwardCache {
            encoder_caches,
            cls_caches,
            reg_caches,
            ord_caches,
            cls_raw,
            reg_raw,
            ord_raw,
        },
    ))
}

/// Parameter gradients per block; frozen blocks yield `None`.
pub struct ModelGrads<S: Scalar> {
    pub encoder: Option<Vec<LayerGrad<S>>>,
    pub cls: Option<Vec<LayerGrad<S>>>,
    pub reg: Option<Vec<LayerGrad<S>>>,
    pub ord: Option<Vec<LayerGrad<S>>>,
}

/// Backward from raw-score gradients of the three heads.
pub fn backward<S: Scalar>(
    model: &ThreeHeadModel<S>,
    cache: &ForwardCache<S>,
    d_cls_raw: Tensor<S>,
    d_reg_raw: Tensor<S>,
    d_ord_raw: Tensor<S>,
) -> Result<ModelGrads<S>> {
    let need_encoder = !model.freeze.encoder;
    let mut d_features: Option<Tensor<S>> = None;
    let mut add_feature_grad = |g: Tensor<S>| match &mut d_features {
        None => d_features = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    };

    let mut grads = ModelGrads { encoder: None, cls: None, reg: None, ord: None };
    for (frozen, head, caches, d_raw, slot) in [
        (model.freeze.cls, &model.cls_head, &cache.cls_caches, d_cls_raw, 0usize),
        (model.freeze.reg, &model.reg_head, &cache.reg_caches, d_reg_raw, 1),
        (model.freeze.ord, &model.ord_head, &cache.ord_caches, d_ord_raw, 2),
    ] {
        if frozen && !need_encoder {
            continue;
        }
        let (d_in, head_grads) = backward_stack(head, caches, d_raw, !frozen)?;
        if need_encoder {
            add_feature_grad(d_in);
        }
        match slot {
            0 => grads.cls = head_grads,
            1 => grads.reg = head_grads,
            _ => grads.ord = head_grads,
        }
    }

    if need_encoder {
        let d_feat = d_features.ok_or_else(|| Error::Protocol("no head gradients".into()))?;
        let (_, enc_grads) = backward_stack(&model.encoder, &cache.encoder_caches, d_feat, true)?;
        grads.encoder = enc_grads;
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, version, dtype, freeze flags, fusion params,
// then the four layer stacks with raw little-endian tensor payloads.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"OGRD";
const FORMAT_VERSION: u32 = 1;

fn write_tensor<S: Scalar>(out: &mut Vec<u8>, t: &Tensor<S>) {
    out.write_u8(t.shape().len() as u8).unwrap();
    for &d in t.shape() {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_tensor<S: Scalar>(r: &mut &[u8]) -> Result<Tensor<S>> {
    let bad = |msg: &str| Error::Checkpoint { path: "<buffer>".into(), msg: msg.into() };
    let ndim = r.read_u8().map_err(|_| bad("truncated tensor header"))? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u32::<LittleEndian>().map_err(|_| bad("truncated shape"))? as usize);
    }
    let n: usize = shape.iter().product();
    let width = S::DTYPE.byte_width();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf[..width]).map_err(|_| bad("truncated payload"))?;
        data.push(S::read_le(&buf[..width]));
    }
    Ok(Tensor::from_vec(&shape, data))
}

fn write_spec(out: &mut Vec<u8>, spec: &LayerSpec) {
    match spec {
        LayerSpec::Dense { input, output } => {
            out.write_u8(0).unwrap();
            out.write_u32::<LittleEndian>(*input as u32).unwrap();
            out.write_u32::<LittleEndian>(*output as u32).unwrap();
        }
        LayerSpec::Conv3x3 { in_ch, out_ch, stride } => {
            out.write_u8(1).unwrap();
            out.write_u32::<LittleEndian>(*in_ch as u32).unwrap();
            out.write_u32::<LittleEndian>(*out_ch as u32).unwrap();
            out.write_u32::<LittleEndian>(*stride as u32).unwrap();
        }
        LayerSpec::Relu => out.write_u8(2).unwrap(),
        LayerSpec::GlobalAvgPool => out.write_u8(3).unwrap(),
        LayerSpec::Dropout { p } => {
            out.write_u8(4).unwrap();
            out.write_f64::<LittleEndian>(*p).unwrap();
        }
        LayerSpec::Flatten => out.write_u8(5).unwrap(),
        LayerSpec::LeakyRelu { slope } => {
            out.write_u8(6).unwrap();
            out.write_f64::<LittleEndian>(*slope).unwrap();
        }
    }
}

fn read_spec(r: &mut &[u8]) -> Result<LayerSpec> {
    let bad = |msg: &str| Error::Checkpoint { path: "<buffer>".into(), msg: msg.into() };
    let tag = r.read_u8().map_err(|_| bad("truncated spec"))?;
    Ok(match tag {
        0 => LayerSpec::Dense {
            input: r.read_u32::<LittleEndian>().map_err(|_| bad("spec"))? as usize,
            output: r.read_u32::<LittleEndian>().map_err(|_| bad("spec"))? as usize,
        },
        1 => LayerSpec::Conv3x3 {
            in_ch: r.read_u32::<LittleEndian>().map_err(|_| bad("spec"))? as usize,
            out_ch: r.read_u32::<LittleEndian>().map_err(|_| bad("spec"))? as usize,
            stride: r.read_u32::<LittleEndian>().map_err(|_| bad("spec"))? as usize,
        },
        2 => LayerSpec::Relu,
        3 => LayerSpec::GlobalAvgPool,
        4 => LayerSpec::Dropout {
            p: r.read_f64::<LittleEndian>().map_err(|_| bad("spec"))?,
        },
        5 => LayerSpec::Flatten,
        6 => LayerSpec::LeakyRelu {
            slope: r.read_f64::<LittleEndian>().map_err(|_| bad("spec"))?,
        },
        _ => return Err(bad("unknown layer tag")),
    })
}

pub fn serialize_model<S: Scalar>(model: &ThreeHeadModel<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.write_u8(S::DTYPE.tag()).unwrap();
    let flags = (model.freeze.encoder as u8)
        | ((model.freeze.cls as u8) << 1)
        | ((model.freeze.reg as u8) << 2)
        | ((model.freeze.ord as u8) << 3)
        | ((model.freeze.fusion as u8) << 4);
    out.write_u8(flags).unwrap();
    for w in model.fusion_w {
        w.write_le(&mut out);
    }
    model.fusion_b.write_le(&mut out);
    for block in [&model.encoder, &model.cls_head, &model.reg_head, &model.ord_head] {
        out.write_u32::<LittleEndian>(block.len() as u32).unwrap();
        for layer in block {
            write_spec(&mut out, &layer.spec);
            out.write_u8(layer.weight.is_some() as u8).unwrap();
            if let Some(w) = &layer.weight {
                write_tensor(&mut out, w);
            }
            out.write_u8(layer.bias.is_some() as u8).unwrap();
            if let Some(b) = &layer.bias {
                write_tensor(&mut out, b);
            }
        }
    }
    out
}

pub fn deserialize_model<S: Scalar>(bytes: &[u8]) -> Result<ThreeHeadModel<S>> {
    let bad = |msg: String| Error::Checkpoint { path: "<buffer>".into(), msg };
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated version".into()))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let dtype_tag = r.read_u8().map_err(|_| bad("truncated dtype".into()))?;
    let dtype = Dtype::from_tag(dtype_tag).ok_or_else(|| bad("unknown dtype".into()))?;
    if dtype != S::DTYPE {
        return Err(bad(format!(
            "dtype mismatch: checkpoint is {dtype:?}, loader expects {:?}",
            S::DTYPE
        )));
    }
    let flags = r.read_u8().map_err(|_| bad("truncated flags".into()))?;
    let width = S::DTYPE.byte_width();
    let read_scalar = |r: &mut &[u8]| -> Result<S> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf[..width])
            .map_err(|_| bad("truncated fusion params".into()))?;
        Ok(S::read_le(&buf[..width]))
    };
    let fusion_w = [read_scalar(&mut r)?, read_scalar(&mut r)?, read_scalar(&mut r)?];
    let fusion_b = read_scalar(&mut r)?;

    let mut blocks: Vec<Vec<Layer<S>>> = Vec::with_capacity(4);
    for _ in 0..4 {
        let count = r
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated block".into()))? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let spec = read_spec(&mut r)?;
            let has_w = r.read_u8().map_err(|_| bad("truncated layer".into()))? != 0;
            let weight = has_w.then(|| read_tensor(&mut r)).transpose()?;
            let has_b = r.read_u8().map_err(|_| bad("truncated layer".into()))? != 0;
            let bias = has_b.then(|| read_tensor(&mut r)).transpose()?;
            layers.push(Layer { spec, weight, bias });
        }
        blocks.push(layers);
    }
    let ord_head = blocks.pop().unwrap();
    let reg_head = blocks.pop().unwrap();
    let cls_head = blocks.pop().unwrap();
    let encoder = blocks.pop().unwrap();
    Ok(ThreeHeadModel {
        encoder,
        cls_head,
        reg_head,
        ord_head,
        fusion_w,
        fusion_b,
        freeze: FreezeFlags {
            encoder: flags & 1 != 0,
            cls: flags & 2 != 0,
            reg: flags & 4 != 0,
            ord: flags & 8 != 0,
            fusion: flags & 16 != 0,
        },
    })
}

pub fn save_checkpoint<S: Scalar>(model: &ThreeHeadModel<S>, path: &Path) -> Result<()> {
    fs::write(path, serialize_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ThreeHeadModel<S>> {
    let bytes = fs::read(path).map_err(|_| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: "missing checkpoint".into(),
    })?;
    deserialize_model(&bytes).map_err(|e| match e {
        Error::Checkpoint { msg, .. } => Error::Checkpoint { path: path.to_path_buf(), msg },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(n: usize, shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        let mut full = vec![n];
        full.extend_from_slice(shape);
        let len: usize = full.iter().product();
        Tensor::from_vec(&full, (0..len).map(|_| r.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn he_init_variance_and_bias() {
        let (w, b) = he_init::<f64>(&LayerSpec::Dense { input: 100, output: 100 }, 5).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        let n = w.len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 0.02).abs() < 0.002, "var {var}");
    }

    #[test]
    fn he_init_deterministic_per_seed() {
        let spec = LayerSpec::Dense { input: 10, output: 4 };
        let (w1, _) = he_init::<f64>(&spec, 1).unwrap();
        let (w2, _) = he_init::<f64>(&spec, 1).unwrap();
        let (w3, _) = he_init::<f64>(&spec, 2).unwrap();
        assert_eq!(w1, w2);
        assert_ne!(w1, w3);
    }

    #[test]
    fn he_init_rejects_non_parametric() {
        assert!(he_init::<f64>(&LayerSpec::Relu, 0).is_err());
    }

    #[test]
    fn zero_weight_model_gives_uniform_probs() {
        let mut model = ThreeHeadModel::<f64>::new_default(3).unwrap();
        for block in [BlockId::Encoder, BlockId::ClsHead, BlockId::RegHead, BlockId::OrdHead] {
            for layer in model.block_layers_mut(block) {
                if let Some(w) = &mut layer.weight {
                    w.data_mut().fill(0.0);
                }
            }
        }
        let batch = random_batch(2, &[3, 16, 16], 7);
        let (outs, _) = forward(&model, batch, Mode::Eval, &mut rng(0)).unwrap();
        for o in &outs {
            for &p in &o.cls_probs {
                assert!((p - 0.2).abs() < 1e-12);
            }
            assert!((o.cls_scalar - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = ThreeHeadModel::<f64>::new_default(11).unwrap();
        let batch = random_batch(3, &[3, 16, 16], 1);
        let (a, _) = forward(&model, batch.clone(), Mode::Eval, &mut rng(1)).unwrap();
        let (b, _) = forward(&model, batch, Mode::Eval, &mut rng(99)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.fused, y.fused);
            assert_eq!(x.cls_probs, y.cls_probs);
        }
    }

    #[test]
    fn softmax_probs_sum_to_one() {
        let model = ThreeHeadModel::<f64>::new_default(21).unwrap();
        for seed in 0..5 {
            let batch = random_batch(4, &[3, 16, 16], seed);
            let (outs, _) = forward(&model, batch, Mode::Eval, &mut rng(0)).unwrap();
            for o in &outs {
                let sum: f64 = o.cls_probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(o.ord_sigmoids.iter().all(|&s| s > 0.0 && s < 1.0));
                assert!((0.0..=4.0).contains(&o.cls_scalar));
            }
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let model = ThreeHeadModel::<f64>::new_default(0).unwrap();
        let bad = random_batch(1, &[4, 16, 16], 0);
        let err = forward(&model, bad, Mode::Eval, &mut rng(0)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { layer: 0, .. }));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_param_gradients() {
        let model = ThreeHeadModel::<f64>::new_default(5).unwrap();
        let batch = random_batch(2, &[3, 16, 16], 3);
        let (_, cache) = forward(&model, batch, Mode::Eval, &mut rng(0)).unwrap();
        let grads = backward(
            &model,
            &cache,
            Tensor::zeros(&[2, 5]),
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[2, 5]),
        )
        .unwrap();
        for block in [&grads.encoder, &grads.cls, &grads.reg, &grads.ord] {
            for g in block.as_ref().unwrap() {
                if let Some(w) = &g.weight {
                    assert!(w.data().iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn frozen_encoder_yields_no_encoder_grads() {
        let mut model = ThreeHeadModel::<f64>::new_default(5).unwrap();
        let batch = random_batch(2, &[3, 16, 16], 3);

        let d_cls = random_batch(2, &[5], 10);
        let d_reg = random_batch(2, &[1], 11);
        let d_ord = random_batch(2, &[5], 12);

        let (_, cache) = forward(&model, batch.clone(), Mode::Eval, &mut rng(0)).unwrap();
        let unfrozen = backward(&model, &cache, d_cls.clone(), d_reg.clone(), d_ord.clone())
            .unwrap();
        model.set_frozen(BlockId::Encoder, true);
        let (_, cache) = forward(&model, batch, Mode::Eval, &mut rng(0)).unwrap();
        let frozen = backward(&model, &cache, d_cls, d_reg, d_ord).unwrap();

        assert!(frozen.encoder.is_none());
        assert!(unfrozen.encoder.is_some());
        // Head gradients unchanged by the encoder freeze.
        for (a, b) in frozen.cls.unwrap().iter().zip(unfrozen.cls.unwrap()) {
            assert_eq!(a.weight, b.weight);
        }
    }

    #[test]
    fn reinit_heads_keeps_encoder_and_fusion() {
        let mut model = ThreeHeadModel::<f64>::new_default(8).unwrap();
        let encoder_before = model.encoder.clone();
        let heads_before = model.cls_head.clone();
        model.reinit_heads(999).unwrap();
        assert_eq!(model.encoder, encoder_before);
        assert_ne!(model.cls_head, heads_before);
        assert_eq!(model.fusion_w, [1.0 / 3.0; 3]);
        assert_eq!(model.fusion_b, 0.0);
    }

    #[test]
    fn dropout_rate_and_rescale() {
        let p = 0.3;
        let layer = Layer::<f64>::new(LayerSpec::Dropout { p }, 0).unwrap();
        let n = 20_000;
        let mut input = Tensor::zeros(&[1, n]);
        input.data_mut().fill(1.0);
        let (out, _) = forward_layer(&layer, 0, input.clone(), Mode::Train, &mut rng(4)).unwrap();
        let zeroed = out.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((zeroed - n as f64 * p).abs() <= 3.0 * sigma);
        for &v in out.data() {
            assert!(v == 0.0 || (v - 1.0 / (1.0 - p)).abs() < 1e-12);
        }
        // Eval mode is identity.
        let (eval_out, _) = forward_layer(&layer, 0, input, Mode::Eval, &mut rng(4)).unwrap();
        assert!(eval_out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let mut model = ThreeHeadModel::<f64>::new_default(13).unwrap();
        model.set_frozen(BlockId::Encoder, true);
        model.fusion_w = [0.2, 0.5, 0.3];
        model.fusion_b = -0.01;
        let bytes = serialize_model(&model);
        let back: ThreeHeadModel<f64> = deserialize_model(&bytes).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn checkpoint_dtype_mismatch_rejected() {
        let model = ThreeHeadModel::<f32>::new_default(13).unwrap();
        let bytes = serialize_model(&model);
        assert!(deserialize_model::<f64>(&bytes).is_err());
    }

    #[test]
    fn f32_model_forward_works() {
        let model = ThreeHeadModel::<f32>::new_default(2).unwrap();
        let batch = random_batch(1, &[3, 16, 16], 0).convert::<f32>();
        let (outs, _) = forward(&model, batch, Mode::Eval, &mut rng(0)).unwrap();
        let sum: f32 = outs[0].cls_probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }

    // Central finite differences over every parameter of a small model,
    // against a scalar loss of the three raw outputs.
    #[test]
    fn gradients_match_finite_differences() {
        let mut model = ThreeHeadModel::<f64>::new_default(77).unwrap();
        // Drop the dropout layers so the loss is deterministic.
        for block in [BlockId::ClsHead, BlockId::RegHead, BlockId::OrdHead] {
            model.block_layers_mut(block).remove(0);
        }
        let batch = random_batch(2, &[3, 8, 8], 42);

        // Loss: sum of squares of all raw outputs (smooth, exercises every path).
        let loss = |m: &ThreeHeadModel<f64>| -> f64 {
            let (_, cache) = forward(m, batch.clone(), Mode::Eval, &mut rng(0)).unwrap();
            let sq = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
            0.5 * (sq(&cache.cls_raw) + sq(&cache.reg_raw) + sq(&cache.ord_raw))
        };

        let (_, cache) = forward(&model, batch.clone(), Mode::Eval, &mut rng(0)).unwrap();
        let grads = backward(
            &model,
            &cache,
            cache.cls_raw.clone(),
            cache.reg_raw.clone(),
            cache.ord_raw.clone(),
        )
        .unwrap();

        let blocks = [
            (BlockId::Encoder, grads.encoder.as_ref().unwrap()),
            (BlockId::ClsHead, grads.cls.as_ref().unwrap()),
            (BlockId::RegHead, grads.reg.as_ref().unwrap()),
            (BlockId::OrdHead, grads.ord.as_ref().unwrap()),
        ];
        let eps = 1e-5;
        for (block, block_grads) in blocks {
            for (li, lg) in block_grads.iter().enumerate() {
                for (which, grad) in [(0, &lg.weight), (1, &lg.bias)] {
                    let Some(grad) = grad else { continue };
                    // Probe a subset of indices to keep runtime bounded.
                    let stride = (grad.len() / 25).max(1);
                    for pi in (0..grad.len()).step_by(stride) {
                        let mut probe = model.clone();
                        {
                            let layer = &mut probe.block_layers_mut(block)[li];
                            let t = if which == 0 {
                                layer.weight.as_mut().unwrap()
                            } else {
                                layer.bias.as_mut().unwrap()
                            };
                            t.data_mut()[pi] += eps;
                        }
                        let up = loss(&probe);
                        {
                            let layer = &mut probe.block_layers_mut(block)[li];
                            let t = if which == 0 {
                                layer.weight.as_mut().unwrap()
                            } else {
                                layer.bias.as_mut().unwrap()
                            };
                            t.data_mut()[pi] -= 2.0 * eps;
                        }
                        let down = loss(&probe);
                        let fd = (up - down) / (2.0 * eps);
                        let an = grad.data()[pi];
                        let denom = fd.abs().max(an.abs()).max(1e-8);
                        assert!(
                            ((fd - an) / denom).abs() < 1e-4,
                            "{block:?} layer {li} param {pi}: fd {fd} vs {an}"
                        );
                    }
                }
            }
        }
    }
}
