//! Pre-norm transformer encoder that classifies square grayscale glyphs.
//!
//! The image is cut into non-overlapping patches, each patch is projected to
//! `d_model`, learned positional embeddings are added, and `n_layers`
//! encoder blocks follow. Tokens are mean-pooled into the classifier head.
//! Each block has six matrices that can host an adapter: the four attention
//! projections and both feed-forward matrices.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapter::DynLoraAdapter;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Gradients, Graph, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphTransformerConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_classes: usize,
}

impl Default for GlyphTransformerConfig {
    fn default() -> Self {
        Self {
            image_side: 48,
            patch_side: 8,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            n_classes: 10,
        }
    }
}

impl GlyphTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.patch_side == 0 || c.image_side == 0 || c.image_side % c.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {} must be a positive multiple of patch side {}",
                c.image_side, c.patch_side
            )));
        }
        if c.n_heads == 0 || c.d_model == 0 || c.d_model % c.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                c.d_model, c.n_heads
            )));
        }
        if c.d_ff == 0 || c.n_classes < 2 {
            return Err(Error::Config("d_ff must be positive and n_classes >= 2".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }
}

/// Adaptable matrix inside an encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Query,
    Key,
    Value,
    Output,
    FfIn,
    FfOut,
}

impl Slot {
    pub const ALL: [Slot; 6] = [Slot::Query, Slot::Key, Slot::Value, Slot::Output, Slot::FfIn, Slot::FfOut];

    pub fn is_attention(self) -> bool {
        matches!(self, Slot::Query | Slot::Key | Slot::Value | Slot::Output)
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Query => "wq",
            Slot::Key => "wk",
            Slot::Value => "wv",
            Slot::Output => "wo",
            Slot::FfIn => "ff1",
            Slot::FfOut => "ff2",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Which matrices receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterTargets {
    pub attention: bool,
    pub mlp: bool,
}

impl Default for AdapterTargets {
    fn default() -> Self {
        Self {
            attention: true,
            mlp: true,
        }
    }
}

impl AdapterTargets {
    pub fn includes(&self, slot: Slot) -> bool {
        if slot.is_attention() {
            self.attention
        } else {
            self.mlp
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormId {
    Attn(usize),
    Mlp(usize),
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LoraPart {
    A,
    B,
    W,
}

/// Stable identifier of every tensor in the model. Its `Display` form is the
/// tensor's checkpoint name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    PatchProj,
    PosEmbed,
    NormGamma(NormId),
    NormBeta(NormId),
    Weight(usize, Slot),
    Lora(usize, Slot, LoraPart),
    HeadWeight,
    HeadBias,
}

impl ParamKey {
    pub fn is_lora(self) -> bool {
        matches!(self, ParamKey::Lora(..))
    }

    pub fn is_head(self) -> bool {
        matches!(self, ParamKey::HeadWeight | ParamKey::HeadBias)
    }

    pub fn is_backbone(self) -> bool {
        !self.is_lora() && !self.is_head()
    }
}

fn norm_prefix(id: NormId) -> String {
    match id {
        NormId::Attn(l) => format!("layer.{l}.ln1"),
        NormId::Mlp(l) => format!("layer.{l}.ln2"),
        NormId::Final => "ln_f".to_string(),
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamKey::PatchProj => write!(f, "patch_proj.weight"),
            ParamKey::PosEmbed => write!(f, "pos_embed"),
            ParamKey::NormGamma(id) => write!(f, "{}.gamma", norm_prefix(id)),
            ParamKey::NormBeta(id) => write!(f, "{}.beta", norm_prefix(id)),
            ParamKey::Weight(l, s) => write!(f, "layer.{l}.{}.weight", s.name()),
            ParamKey::Lora(l, s, p) => {
                let part = match p {
                    LoraPart::A => "a",
                    LoraPart::B => "b",
                    LoraPart::W => "w",
                };
                write!(f, "layer.{l}.{}.lora.{part}", s.name())
            }
            ParamKey::HeadWeight => write!(f, "head.weight"),
            ParamKey::HeadBias => write!(f, "head.bias"),
        }
    }
}

/// Adapter id used in reports and checkpoints, e.g. `1.wq`.
pub fn layer_id(layer: usize, slot: Slot) -> String {
    format!("{layer}.{}", slot.name())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Linear<T> {
    Plain(Tensor<T>),
    Adapted(DynLoraAdapter<T>),
}

impl<T: Real> Linear<T> {
    /// The backbone weight (the frozen base when adapted).
    pub fn weight(&self) -> &Tensor<T> {
        match self {
            Linear::Plain(w) => w,
            Linear::Adapted(ad) => ad.base(),
        }
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        match self {
            Linear::Plain(w) => w,
            Linear::Adapted(ad) => ad.base_mut(),
        }
    }

    pub fn adapter(&self) -> Option<&DynLoraAdapter<T>> {
        match self {
            Linear::Adapted(ad) => Some(ad),
            Linear::Plain(_) => None,
        }
    }

    pub fn adapter_mut(&mut self) -> Option<&mut DynLoraAdapter<T>> {
        match self {
            Linear::Adapted(ad) => Some(ad),
            Linear::Plain(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> NormParams<T> {
    fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![d], T::one()),
            beta: Tensor::zeros(vec![d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: NormParams<T>,
    pub norm2: NormParams<T>,
    linears: Vec<Linear<T>>,
}

impl<T: Real> Block<T> {
    pub fn linear(&self, slot: Slot) -> &Linear<T> {
        &self.linears[slot.index()]
    }

    pub fn linear_mut(&mut self, slot: Slot) -> &mut Linear<T> {
        &mut self.linears[slot.index()]
    }
}

/// Classifier head `logits = pooled · Wᵀ + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Head<T> {
    pub fn init(n_classes: usize, d_model: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!("a head needs at least 2 classes, got {n_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        Ok(Self {
            weight: normal_tensor(vec![n_classes, d_model], &mut rng),
            bias: Tensor::zeros(vec![n_classes]),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.weight.set_requires_grad(on);
        self.bias.set_requires_grad(on);
    }
}

fn normal_tensor<T: Real>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, INIT_STD).expect("positive std");
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape by construction")
}

/// Splits a row-major `side×side` image into row-major non-overlapping
/// `patch×patch` patches, each flattened row-major.
pub fn patchify<T: Copy>(image: &[T], side: usize, patch: usize) -> Result<Vec<T>> {
    if image.len() != side * side || patch == 0 || side % patch != 0 {
        return Err(Error::dim("patchify", &[image.len()], &[side, patch]));
    }
    let per = side / patch;
    let mut out = Vec::with_capacity(image.len());
    for pr in 0..per {
        for pc in 0..per {
            for y in 0..patch {
                let row = (pr * patch + y) * side + pc * patch;
                out.extend_from_slice(&image[row..row + patch]);
            }
        }
    }
    Ok(out)
}

/// Output of [`GlyphTransformer::forward`]: the logits node plus the graph
/// handle of every trainable tensor that fed it.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub bindings: Vec<(ParamKey, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphTransformer<T> {
    config: GlyphTransformerConfig,
    pub patch_proj: Tensor<T>,
    pub pos_embed: Tensor<T>,
    blocks: Vec<Block<T>>,
    pub final_norm: NormParams<T>,
    head: Head<T>,
}

impl<T: Real> GlyphTransformer<T> {
    /// Draws every matrix from `N(0, 0.02²)`; norms start at `γ = 1, β = 0`.
    pub fn init(config: GlyphTransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let patch_proj = normal_tensor(vec![d, config.patch_dim()], &mut rng);
        let pos_embed = normal_tensor(vec![config.n_patches(), d], &mut rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let linears = Slot::ALL
                .iter()
                .map(|&s| {
                    let shape = match s {
                        Slot::FfIn => vec![config.d_ff, d],
                        Slot::FfOut => vec![d, config.d_ff],
                        _ => vec![d, d],
                    };
                    Linear::Plain(normal_tensor(shape, &mut rng))
                })
                .collect();
            blocks.push(Block {
                norm1: NormParams::new(d),
                norm2: NormParams::new(d),
                linears,
            });
        }
        let head = Head::init(config.n_classes, d, rng_next(&mut rng))?;
        Ok(Self {
            config,
            patch_proj,
            pos_embed,
            blocks,
            final_norm: NormParams::new(d),
            head,
        })
    }

    /// Assembles a model from explicit parts (checkpoint loading).
    pub fn from_parts(
        config: GlyphTransformerConfig,
        patch_proj: Tensor<T>,
        pos_embed: Tensor<T>,
        blocks: Vec<(NormParams<T>, NormParams<T>, Vec<Linear<T>>)>,
        final_norm: NormParams<T>,
        head: Head<T>,
    ) -> Result<Self> {
        config.validate()?;
        let blocks = blocks
            .into_iter()
            .map(|(norm1, norm2, linears)| {
                if linears.len() != Slot::ALL.len() {
                    return Err(Error::Config("block needs six linear layers".into()));
                }
                Ok(Block { norm1, norm2, linears })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut config = config;
        config.n_classes = head.n_classes();
        let model = Self {
            config,
            patch_proj,
            pos_embed,
            blocks,
            final_norm,
            head,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let d = c.d_model;
        let expect = |t: &Tensor<T>, shape: &[usize], what: &'static str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::dim(what, t.shape(), shape));
            }
            Ok(())
        };
        expect(&self.patch_proj, &[d, c.patch_dim()], "patch_proj")?;
        expect(&self.pos_embed, &[c.n_patches(), d], "pos_embed")?;
        if self.blocks.len() != c.n_layers {
            return Err(Error::Config("layer count does not match config".into()));
        }
        for b in &self.blocks {
            for n in [&b.norm1, &b.norm2] {
                expect(&n.gamma, &[d], "norm")?;
                expect(&n.beta, &[d], "norm")?;
            }
            for s in Slot::ALL {
                let shape = match s {
                    Slot::FfIn => [c.d_ff, d],
                    Slot::FfOut => [d, c.d_ff],
                    _ => [d, d],
                };
                expect(b.linear(s).weight(), &shape, "linear")?;
            }
        }
        expect(&self.head.weight, &[self.head.n_classes(), d], "head")?;
        expect(&self.head.bias, &[self.head.n_classes()], "head")?;
        Ok(())
    }

    pub fn config(&self) -> &GlyphTransformerConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }

    pub fn head(&self) -> &Head<T> {
        &self.head
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    /// Swaps in a different head; returns the previous one.
    pub fn replace_head(&mut self, head: Head<T>) -> Result<Head<T>> {
        if head.weight.shape() != [head.n_classes(), self.config.d_model] {
            return Err(Error::dim("head", head.weight.shape(), &[self.config.d_model]));
        }
        self.config.n_classes = head.n_classes();
        Ok(std::mem::replace(&mut self.head, head))
    }

    /// Reinitializes only the classifier head for `n_classes` classes.
    /// The new head is trainable.
    pub fn reset_head(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        let mut head = Head::init(n_classes, self.config.d_model, seed)?;
        head.set_trainable(true);
        self.replace_head(head)?;
        Ok(())
    }

    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        if n_classes != self.n_classes() {
            return Err(Error::Config(format!(
                "data has {n_classes} classes but the head predicts {}",
                self.n_classes()
            )));
        }
        Ok(())
    }

    /// Attaches a fresh adapter to every targeted matrix.
    pub fn attach_adapters(&mut self, targets: AdapterTargets, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        for (l, block) in self.blocks.iter_mut().enumerate() {
            for s in Slot::ALL {
                if !targets.includes(s) {
                    continue;
                }
                let lin = block.linear_mut(s);
                if let Linear::Adapted(_) = lin {
                    return Err(Error::Contract(format!("layer {} already has an adapter", layer_id(l, s))));
                }
                let sub_seed = seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((l * Slot::ALL.len() + s.index()) as u64 + 1);
                let Linear::Plain(w) = std::mem::replace(lin, Linear::Plain(Tensor::zeros(vec![0]))) else {
                    unreachable!()
                };
                *lin = Linear::Adapted(DynLoraAdapter::init(w, rank, alpha, sub_seed)?);
            }
        }
        Ok(())
    }

    /// Folds every adapter into its base weight and removes it.
    pub fn merge_adapters(&mut self) {
        for block in &mut self.blocks {
            for lin in block.linears.iter_mut() {
                if let Linear::Adapted(ad) = lin {
                    *lin = Linear::Plain(ad.merge());
                }
            }
        }
    }

    /// Removes all adapters without merging, returning them by location.
    pub fn detach_adapters(&mut self) -> Vec<(usize, Slot, DynLoraAdapter<T>)> {
        let mut out = Vec::new();
        for (l, block) in self.blocks.iter_mut().enumerate() {
            for s in Slot::ALL {
                let lin = block.linear_mut(s);
                if let Linear::Adapted(ad) = lin {
                    let base = ad.base().clone();
                    if let Linear::Adapted(ad) = std::mem::replace(lin, Linear::Plain(base)) {
                        out.push((l, s, ad));
                    }
                }
            }
        }
        out
    }

    /// Reinstalls detached adapters. The current backbone weight is kept as
    /// each adapter's base.
    pub fn install_adapters(&mut self, adapters: Vec<(usize, Slot, DynLoraAdapter<T>)>) -> Result<()> {
        for (l, s, mut ad) in adapters {
            let block = self
                .blocks
                .get_mut(l)
                .ok_or_else(|| Error::Config(format!("no layer {l}")))?;
            let lin = block.linear_mut(s);
            let Linear::Plain(w) = lin else {
                return Err(Error::Contract(format!("layer {} already has an adapter", layer_id(l, s))));
            };
            if w.shape() != ad.base().shape() {
                return Err(Error::dim("install_adapters", w.shape(), ad.base().shape()));
            }
            *ad.base_mut() = w.clone().with_requires_grad(false);
            *lin = Linear::Adapted(ad);
        }
        Ok(())
    }

    pub fn adapters(&self) -> impl Iterator<Item = (usize, Slot, &DynLoraAdapter<T>)> {
        self.blocks.iter().enumerate().flat_map(|(l, b)| {
            Slot::ALL
                .iter()
                .filter_map(move |&s| b.linear(s).adapter().map(|ad| (l, s, ad)))
        })
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = (usize, Slot, &mut DynLoraAdapter<T>)> {
        self.blocks.iter_mut().enumerate().flat_map(|(l, b)| {
            b.linears
                .iter_mut()
                .zip(Slot::ALL)
                .filter_map(move |(lin, s)| lin.adapter_mut().map(|ad| (l, s, ad)))
        })
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters().next().is_some()
    }

    /// Sum of active ranks over all adapters.
    pub fn total_active_rank(&self) -> usize {
        self.adapters().map(|(_, _, ad)| ad.active_rank()).sum()
    }

    /// Calls `f` on every tensor, in checkpoint order.
    pub fn visit(&self, mut f: impl FnMut(ParamKey, &Tensor<T>)) {
        f(ParamKey::PatchProj, &self.patch_proj);
        f(ParamKey::PosEmbed, &self.pos_embed);
        for (l, b) in self.blocks.iter().enumerate() {
            f(ParamKey::NormGamma(NormId::Attn(l)), &b.norm1.gamma);
            f(ParamKey::NormBeta(NormId::Attn(l)), &b.norm1.beta);
            f(ParamKey::NormGamma(NormId::Mlp(l)), &b.norm2.gamma);
            f(ParamKey::NormBeta(NormId::Mlp(l)), &b.norm2.beta);
            for s in Slot::ALL {
                let lin = b.linear(s);
                f(ParamKey::Weight(l, s), lin.weight());
                if let Some(ad) = lin.adapter() {
                    f(ParamKey::Lora(l, s, LoraPart::A), ad.a());
                    f(ParamKey::Lora(l, s, LoraPart::B), ad.b());
                    f(ParamKey::Lora(l, s, LoraPart::W), ad.w());
                }
            }
        }
        f(ParamKey::NormGamma(NormId::Final), &self.final_norm.gamma);
        f(ParamKey::NormBeta(NormId::Final), &self.final_norm.beta);
        f(ParamKey::HeadWeight, &self.head.weight);
        f(ParamKey::HeadBias, &self.head.bias);
    }

    /// Mutable counterpart of [`GlyphTransformer::visit`], same order.
    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(ParamKey, &'a mut Tensor<T>)) {
        f(ParamKey::PatchProj, &mut self.patch_proj);
        f(ParamKey::PosEmbed, &mut self.pos_embed);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(ParamKey::NormGamma(NormId::Attn(l)), &mut b.norm1.gamma);
            f(ParamKey::NormBeta(NormId::Attn(l)), &mut b.norm1.beta);
            f(ParamKey::NormGamma(NormId::Mlp(l)), &mut b.norm2.gamma);
            f(ParamKey::NormBeta(NormId::Mlp(l)), &mut b.norm2.beta);
            for (lin, s) in b.linears.iter_mut().zip(Slot::ALL) {
                match lin {
                    Linear::Plain(w) => f(ParamKey::Weight(l, s), w),
                    Linear::Adapted(ad) => {
                        let (base, a, b, w) = ad.parts_mut();
                        f(ParamKey::Weight(l, s), base);
                        f(ParamKey::Lora(l, s, LoraPart::A), a);
                        f(ParamKey::Lora(l, s, LoraPart::B), b);
                        f(ParamKey::Lora(l, s, LoraPart::W), w);
                    }
                }
            }
        }
        f(ParamKey::NormGamma(NormId::Final), &mut self.final_norm.gamma);
        f(ParamKey::NormBeta(NormId::Final), &mut self.final_norm.beta);
        f(ParamKey::HeadWeight, &mut self.head.weight);
        f(ParamKey::HeadBias, &mut self.head.bias);
    }

    pub fn tensor(&self, key: ParamKey) -> Option<&Tensor<T>> {
        let b = |l: usize| self.blocks.get(l);
        match key {
            ParamKey::PatchProj => Some(&self.patch_proj),
            ParamKey::PosEmbed => Some(&self.pos_embed),
            ParamKey::NormGamma(NormId::Attn(l)) => b(l).map(|b| &b.norm1.gamma),
            ParamKey::NormBeta(NormId::Attn(l)) => b(l).map(|b| &b.norm1.beta),
            ParamKey::NormGamma(NormId::Mlp(l)) => b(l).map(|b| &b.norm2.gamma),
            ParamKey::NormBeta(NormId::Mlp(l)) => b(l).map(|b| &b.norm2.beta),
            ParamKey::NormGamma(NormId::Final) => Some(&self.final_norm.gamma),
            ParamKey::NormBeta(NormId::Final) => Some(&self.final_norm.beta),
            ParamKey::Weight(l, s) => b(l).map(|b| b.linear(s).weight()),
            ParamKey::Lora(l, s, p) => b(l).and_then(|b| b.linear(s).adapter()).map(|ad| match p {
                LoraPart::A => ad.a(),
                LoraPart::B => ad.b(),
                LoraPart::W => ad.w(),
            }),
            ParamKey::HeadWeight => Some(&self.head.weight),
            ParamKey::HeadBias => Some(&self.head.bias),
        }
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        match key {
            ParamKey::PatchProj => Some(&mut self.patch_proj),
            ParamKey::PosEmbed => Some(&mut self.pos_embed),
            ParamKey::NormGamma(NormId::Attn(l)) => self.blocks.get_mut(l).map(|b| &mut b.norm1.gamma),
            ParamKey::NormBeta(NormId::Attn(l)) => self.blocks.get_mut(l).map(|b| &mut b.norm1.beta),
            ParamKey::NormGamma(NormId::Mlp(l)) => self.blocks.get_mut(l).map(|b| &mut b.norm2.gamma),
            ParamKey::NormBeta(NormId::Mlp(l)) => self.blocks.get_mut(l).map(|b| &mut b.norm2.beta),
            ParamKey::NormGamma(NormId::Final) => Some(&mut self.final_norm.gamma),
            ParamKey::NormBeta(NormId::Final) => Some(&mut self.final_norm.beta),
            ParamKey::Weight(l, s) => self.blocks.get_mut(l).map(|b| b.linear_mut(s).weight_mut()),
            ParamKey::Lora(l, s, p) => self
                .blocks
                .get_mut(l)
                .and_then(|b| b.linear_mut(s).adapter_mut())
                .map(|ad| match p {
                    LoraPart::A => ad.a_mut(),
                    LoraPart::B => ad.b_mut(),
                    LoraPart::W => ad.w_mut(),
                }),
            ParamKey::HeadWeight => Some(&mut self.head.weight),
            ParamKey::HeadBias => Some(&mut self.head.bias),
        }
    }

    /// Turns gradient tracking on or off for every backbone tensor (not the
    /// head, not adapter parts). Adapter bases stay frozen regardless.
    pub fn set_backbone_trainable(&mut self, on: bool) {
        self.visit_mut(|k, t| {
            if k.is_backbone() {
                t.set_requires_grad(on);
            }
        });
        for (_, _, ad) in self.adapters_mut() {
            ad.base_mut().set_requires_grad(false);
        }
    }

    pub fn set_head_trainable(&mut self, on: bool) {
        self.head.set_trainable(on);
    }

    /// Number of scalars in backbone tensors (head and adapters excluded).
    pub fn backbone_param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|k, t| {
            if k.is_backbone() {
                n += t.numel();
            }
        });
        n
    }

    /// Number of scalars in all tensors that currently require gradients.
    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| {
            if t.requires_grad() {
                n += t.numel();
            }
        });
        n
    }

    /// Number of trainable scalars living in adapters.
    pub fn adapter_param_count(&self) -> usize {
        self.adapters().map(|(_, _, ad)| ad.trainable_count()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(|_, t| t.zero_grad());
    }

    /// Every tensor that currently requires gradients.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.visit_mut(|_, t| {
            if t.requires_grad() {
                out.push(t);
            }
        });
        out
    }

    /// Builds the `[batch·n_patches, patch_dim]` token matrix from `batch`
    /// concatenated row-major images.
    pub fn tokens(&self, pixels: &[T], batch: usize) -> Result<Tensor<T>> {
        let c = &self.config;
        if batch == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if pixels.len() != batch * c.pixels() {
            return Err(Error::dim("tokens", &[pixels.len()], &[batch, c.image_side, c.image_side]));
        }
        let mut out = Vec::with_capacity(pixels.len());
        for img in pixels.chunks(c.pixels()) {
            out.extend(patchify(img, c.image_side, c.patch_side)?);
        }
        Tensor::new(vec![batch * c.n_patches(), c.patch_dim()], out)
    }

    fn bind(&self, g: &mut Graph<T>, key: ParamKey, t: &Tensor<T>, bindings: &mut Vec<(ParamKey, Var)>) -> Var {
        let v = g.leaf(t);
        if t.requires_grad() {
            bindings.push((key, v));
        }
        v
    }

    fn linear(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: usize,
        slot: Slot,
        bindings: &mut Vec<(ParamKey, Var)>,
    ) -> Result<Var> {
        match self.blocks[layer].linear(slot) {
            Linear::Plain(w) => {
                let wv = self.bind(g, ParamKey::Weight(layer, slot), w, bindings);
                g.matmul_nt(x, wv)
            }
            Linear::Adapted(ad) => {
                let (y, vars) = ad.forward(g, x)?;
                if ad.a().requires_grad() {
                    bindings.push((ParamKey::Lora(layer, slot, LoraPart::A), vars.a));
                }
                if ad.b().requires_grad() {
                    bindings.push((ParamKey::Lora(layer, slot, LoraPart::B), vars.b));
                }
                if ad.w().requires_grad() {
                    bindings.push((ParamKey::Lora(layer, slot, LoraPart::W), vars.w));
                }
                Ok(y)
            }
        }
    }

    fn norm(
        &self,
        g: &mut Graph<T>,
        x: Var,
        id: NormId,
        p: &NormParams<T>,
        bindings: &mut Vec<(ParamKey, Var)>,
    ) -> Result<Var> {
        let gm = self.bind(g, ParamKey::NormGamma(id), &p.gamma, bindings);
        let bt = self.bind(g, ParamKey::NormBeta(id), &p.beta, bindings);
        g.layernorm(x, gm, bt, NORM_EPS)
    }

    /// Records the forward pass for `batch` images on `g`.
    pub fn forward(&self, g: &mut Graph<T>, pixels: &[T], batch: usize) -> Result<Forward> {
        let c = self.config;
        let tokens = self.tokens(pixels, batch)?;
        let mut bindings = Vec::new();
        let x = g.leaf(&tokens);
        let proj = self.bind(g, ParamKey::PatchProj, &self.patch_proj, &mut bindings);
        let mut h = g.matmul_nt(x, proj)?;
        let pos = self.bind(g, ParamKey::PosEmbed, &self.pos_embed, &mut bindings);
        h = g.add_tiled(h, pos)?;
        let dh = c.d_model / c.n_heads;
        let attn_scale = T::from_f64(1.0 / (dh as f64).sqrt());
        for l in 0..c.n_layers {
            let block = &self.blocks[l];
            let n1 = self.norm(g, h, NormId::Attn(l), &block.norm1, &mut bindings)?;
            let q = self.linear(g, n1, l, Slot::Query, &mut bindings)?;
            let k = self.linear(g, n1, l, Slot::Key, &mut bindings)?;
            let v = self.linear(g, n1, l, Slot::Value, &mut bindings)?;
            let qh = g.split_heads(q, batch, c.n_heads)?;
            let kh = g.split_heads(k, batch, c.n_heads)?;
            let vh = g.split_heads(v, batch, c.n_heads)?;
            let scores = g.batch_matmul(qh, kh, true)?;
            let scores = g.mul_scalar(scores, attn_scale);
            let probs = g.softmax(scores)?;
            let ctx = g.batch_matmul(probs, vh, false)?;
            let ctx = g.merge_heads(ctx, batch, c.n_heads)?;
            let o = self.linear(g, ctx, l, Slot::Output, &mut bindings)?;
            h = g.add(h, o)?;

            let n2 = self.norm(g, h, NormId::Mlp(l), &block.norm2, &mut bindings)?;
            let f = self.linear(g, n2, l, Slot::FfIn, &mut bindings)?;
            let f = g.gelu(f);
            let f = self.linear(g, f, l, Slot::FfOut, &mut bindings)?;
            h = g.add(h, f)?;
        }
        let hn = self.norm(g, h, NormId::Final, &self.final_norm, &mut bindings)?;
        let pooled = g.mean_groups(hn, batch)?;
        let hw = self.bind(g, ParamKey::HeadWeight, &self.head.weight, &mut bindings);
        let hb = self.bind(g, ParamKey::HeadBias, &self.head.bias, &mut bindings);
        let logits = g.matmul_nt(pooled, hw)?;
        let logits = g.add_row(logits, hb)?;
        Ok(Forward { logits, bindings })
    }

    /// Logits for `batch` images without keeping the graph.
    pub fn logits(&self, pixels: &[T], batch: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let fw = self.forward(&mut g, pixels, batch)?;
        Ok(g.to_tensor(fw.logits))
    }

    /// Adds the gradients from one backward pass into the bound tensors.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, bindings: &[(ParamKey, Var)]) -> Result<()> {
        for &(key, var) in bindings {
            let t = self
                .tensor_mut(key)
                .ok_or_else(|| Error::Contract(format!("no tensor for {key}")))?;
            grads.accumulate_into(var, t)?;
        }
        Ok(())
    }
}

fn rng_next(rng: &mut ChaCha8Rng) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}
