//! The full network: patch (or token) embedding, `L` CRATE-α layers, and a
//! linear classification head.
//!
//! Parameters live in a flat list ordered by [`ModelConfig::param_specs`];
//! that one ordering drives initialization, parameter counting, the
//! optimizer state and the checkpoint layout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{
    layer_on, split_attention, BlockVariant, LayerNodes, LayerNormVars, LayerRates, LayerVars, MssaVars, ScaleMode,
    SparseHyper, StepVar,
};
use crate::numerics::{Matrix, Rng, Scalar, Tape, Var};
use crate::srr::{self, RateParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeName {
    Tiny,
    Small,
    Base,
    Large,
    Huge,
    Custom,
}

impl SizeName {
    pub const PRESETS: [SizeName; 5] = [
        SizeName::Tiny,
        SizeName::Small,
        SizeName::Base,
        SizeName::Large,
        SizeName::Huge,
    ];

    /// `(depth, width, heads)` for the named sizes.
    pub fn dims(self) -> Option<(usize, usize, usize)> {
        match self {
            SizeName::Tiny => Some((12, 192, 3)),
            SizeName::Small => Some((12, 576, 12)),
            SizeName::Base => Some((12, 768, 12)),
            SizeName::Large => Some((24, 1024, 16)),
            SizeName::Huge => Some((32, 1280, 16)),
            SizeName::Custom => None,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tiny" => Some(SizeName::Tiny),
            "small" => Some(SizeName::Small),
            "base" => Some(SizeName::Base),
            "large" => Some(SizeName::Large),
            "huge" => Some(SizeName::Huge),
            _ => None,
        }
    }
}

impl fmt::Display for SizeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SizeName::Tiny => "tiny",
            SizeName::Small => "small",
            SizeName::Base => "base",
            SizeName::Large => "large",
            SizeName::Huge => "huge",
            SizeName::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// What the pre-processing layer consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// `channels × side × side` images cut into `patch × patch` patches.
    Image {
        image_side: usize,
        channels: usize,
        patch: usize,
    },
    /// Pre-tokenized samples: `dim × count` matrices.
    Tokens { dim: usize, count: usize },
}

impl InputSpec {
    /// Length of one raw token fed to the embedding.
    pub fn token_dim(&self) -> usize {
        match *self {
            InputSpec::Image { channels, patch, .. } => channels * patch * patch,
            InputSpec::Tokens { dim, .. } => dim,
        }
    }

    /// Raw tokens per sample (before the class token).
    pub fn token_count(&self) -> usize {
        match *self {
            InputSpec::Image { image_side, patch, .. } => {
                let g = image_side / patch.max(1);
                g * g
            }
            InputSpec::Tokens { count, .. } => count,
        }
    }

    /// Side of the patch grid, for image inputs.
    pub fn grid_side(&self) -> Option<usize> {
        match *self {
            InputSpec::Image { image_side, patch, .. } => Some(image_side / patch.max(1)),
            InputSpec::Tokens { .. } => None,
        }
    }

    /// Values per raw sample.
    pub fn sample_len(&self) -> usize {
        match *self {
            InputSpec::Image {
                image_side, channels, ..
            } => channels * image_side * image_side,
            InputSpec::Tokens { dim, count } => dim * count,
        }
    }
}

/// How the MSSA step factor is produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepMode {
    /// One trained scalar per layer, initialized to 1.
    Learned,
    /// The literal `κ p / (N ε²)`.
    Literal { kappa: f64, epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub size_name: SizeName,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub overcompleteness: usize,
    pub input: InputSpec,
    pub num_classes: usize,
    pub variant: BlockVariant,
    pub use_out_proj: bool,
    pub use_cls_token: bool,
    /// Per-token standardization with learned affine before each block.
    pub normalize: bool,
    pub scale_mode: ScaleMode,
    pub step_mode: StepMode,
    pub sparse: SparseHyper,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(SizeName::Tiny)
    }
}

/// Role of a parameter tensor; decides its initializer, whether weight
/// decay applies, and where it is counted in the breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    PatchWeight,
    PatchBias,
    PosEmbed,
    ClsToken,
    NormGamma,
    NormBeta,
    Bases,
    OutProj,
    Step,
    Dictionary,
    DecoderDictionary,
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    /// Weight decay applies to matrices only.
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamKind::PatchWeight
                | ParamKind::PosEmbed
                | ParamKind::Bases
                | ParamKind::OutProj
                | ParamKind::Dictionary
                | ParamKind::DecoderDictionary
                | ParamKind::HeadWeight
        )
    }

    pub fn group(self) -> &'static str {
        match self {
            ParamKind::PatchWeight | ParamKind::PatchBias => "patch_embed",
            ParamKind::PosEmbed => "pos_embed",
            ParamKind::ClsToken => "cls_token",
            ParamKind::NormGamma | ParamKind::NormBeta => "normalization",
            ParamKind::Bases | ParamKind::OutProj | ParamKind::Step => "attention",
            ParamKind::Dictionary | ParamKind::DecoderDictionary => "sparse_coding",
            ParamKind::HeadWeight | ParamKind::HeadBias => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Parameter count split by block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub groups: Vec<(&'static str, usize)>,
    pub total: usize,
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, count) in &self.groups {
            writeln!(f, "{name:<16}{count:>14}")?;
        }
        write!(f, "{:<16}{:>14}", "total", self.total)
    }
}

impl ModelConfig {
    /// Named size with the ImageNet-style pipeline: 224² RGB input, patch 16,
    /// 1000 classes, C = 4, residual ODL blocks, output projection on.
    pub fn preset(size: SizeName) -> Self {
        let (depth, width, heads) = size.dims().unwrap_or((2, 16, 4));
        Self {
            size_name: size,
            depth,
            width,
            heads,
            overcompleteness: 4,
            input: InputSpec::Image {
                image_side: 224,
                channels: 3,
                patch: 16,
            },
            num_classes: 1000,
            variant: BlockVariant::ResidualOdl,
            use_out_proj: true,
            use_cls_token: true,
            normalize: true,
            scale_mode: ScaleMode::SqrtP,
            step_mode: StepMode::Learned,
            sparse: SparseHyper::default(),
        }
    }

    pub fn with_variant(mut self, variant: BlockVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    /// Tokens per sample entering the layers (class token included).
    pub fn tokens_per_sample(&self) -> usize {
        self.input.token_count() + usize::from(self.use_cls_token)
    }

    /// Atoms in the sparse coding dictionary.
    pub fn atoms(&self) -> usize {
        if self.variant.is_overcomplete() {
            self.overcompleteness * self.width
        } else {
            self.width
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.overcompleteness == 0 {
            return bad("overcompleteness must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.sparse.steps == 0 {
            return bad("sparse.steps must be at least 1".into());
        }
        if !(self.sparse.eta > 0.0) || !(self.sparse.lambda >= 0.0) {
            return bad(format!(
                "sparse.eta {} must be > 0 and sparse.lambda {} >= 0",
                self.sparse.eta, self.sparse.lambda
            ));
        }
        if let StepMode::Literal { kappa, epsilon } = self.step_mode {
            if !(kappa > 0.0 && epsilon > 0.0) {
                return bad(format!("step_mode kappa {kappa} and epsilon {epsilon} must be > 0"));
            }
        }
        match self.input {
            InputSpec::Image {
                image_side,
                channels,
                patch,
            } => {
                if patch == 0 || channels == 0 || image_side == 0 || image_side % patch != 0 {
                    return bad(format!(
                        "image side {image_side} must be a positive multiple of patch {patch}"
                    ));
                }
            }
            InputSpec::Tokens { dim, count } => {
                if dim == 0 || count == 0 {
                    return bad("token input needs positive dim and count".into());
                }
            }
        }
        Ok(())
    }

    /// Every learnable tensor, in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.width;
        let mut specs = Vec::new();
        let mut push =
            |name: String, rows: usize, cols: usize, kind: ParamKind| specs.push(ParamSpec { name, rows, cols, kind });
        push(
            "patch_embed.weight".into(),
            self.input.token_dim(),
            d,
            ParamKind::PatchWeight,
        );
        push("patch_embed.bias".into(), d, 1, ParamKind::PatchBias);
        push("pos_embed".into(), d, self.tokens_per_sample(), ParamKind::PosEmbed);
        if self.use_cls_token {
            push("cls_token".into(), d, 1, ParamKind::ClsToken);
        }
        for l in 0..self.depth {
            let p = format!("layers.{l}");
            if self.normalize {
                push(format!("{p}.norm1.gamma"), d, 1, ParamKind::NormGamma);
                push(format!("{p}.norm1.beta"), d, 1, ParamKind::NormBeta);
            }
            push(format!("{p}.attn.bases"), d, d, ParamKind::Bases);
            if self.use_out_proj {
                push(format!("{p}.attn.out_proj"), d, d, ParamKind::OutProj);
            }
            if self.step_mode == StepMode::Learned {
                push(format!("{p}.attn.step"), 1, 1, ParamKind::Step);
            }
            if self.normalize {
                push(format!("{p}.norm2.gamma"), d, 1, ParamKind::NormGamma);
                push(format!("{p}.norm2.beta"), d, 1, ParamKind::NormBeta);
            }
            push(format!("{p}.sparse.dict"), d, self.atoms(), ParamKind::Dictionary);
            if self.variant.is_decoupled() {
                push(
                    format!("{p}.sparse.decoder"),
                    d,
                    self.atoms(),
                    ParamKind::DecoderDictionary,
                );
            }
        }
        push("head.weight".into(), d, self.num_classes, ParamKind::HeadWeight);
        push("head.bias".into(), self.num_classes, 1, ParamKind::HeadBias);
        specs
    }

    pub fn breakdown(&self) -> ParamBreakdown {
        let mut groups: Vec<(&'static str, usize)> = Vec::new();
        for spec in self.param_specs() {
            let g = spec.kind.group();
            match groups.iter_mut().find(|(name, _)| *name == g) {
                Some((_, n)) => *n += spec.numel(),
                None => groups.push((g, spec.numel())),
            }
        }
        let total = groups.iter().map(|(_, n)| n).sum();
        ParamBreakdown { groups, total }
    }
}

/// Exact number of learnable scalars.
pub fn paramcount(config: &ModelConfig) -> usize {
    config.param_specs().iter().map(ParamSpec::numel).sum()
}

/// Position of each tensor in the flat parameter list.
#[derive(Clone, Debug)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    pos: usize,
    cls: Option<usize>,
    layers: Vec<LayerLayout>,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Debug, Default)]
struct LayerLayout {
    norm1: Option<(usize, usize)>,
    bases: usize,
    out_proj: Option<usize>,
    step: Option<usize>,
    norm2: Option<(usize, usize)>,
    dict: usize,
    decoder: Option<usize>,
}

impl Layout {
    fn new(specs: &[ParamSpec], depth: usize) -> Self {
        let idx = |name: &str| specs.iter().position(|s| s.name == name);
        let req = |name: &str| idx(name).expect("parameter present by construction");
        let layers = (0..depth)
            .map(|l| {
                let p = format!("layers.{l}");
                let pair = |n: &str| idx(&format!("{p}.{n}.gamma")).map(|g| (g, req(&format!("{p}.{n}.beta"))));
                LayerLayout {
                    norm1: pair("norm1"),
                    bases: req(&format!("{p}.attn.bases")),
                    out_proj: idx(&format!("{p}.attn.out_proj")),
                    step: idx(&format!("{p}.attn.step")),
                    norm2: pair("norm2"),
                    dict: req(&format!("{p}.sparse.dict")),
                    decoder: idx(&format!("{p}.sparse.decoder")),
                }
            })
            .collect();
        Self {
            patch_w: req("patch_embed.weight"),
            patch_b: req("patch_embed.bias"),
            pos: req("pos_embed"),
            cls: idx("cls_token"),
            layers,
            head_w: req("head.weight"),
            head_b: req("head.bias"),
        }
    }
}

/// All learnable tensors of one model.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Matrix<T>>,
    layout: Layout,
}

/// A batch of raw samples, flattened sample after sample.
#[derive(Clone, Debug)]
pub struct InputBatch<T> {
    pub data: Vec<T>,
    pub batch: usize,
}

impl<T: Scalar> InputBatch<T> {
    pub fn new(data: Vec<T>, batch: usize) -> Self {
        Self { data, batch }
    }

    pub fn from_tokens(samples: &[Matrix<T>]) -> Self {
        let mut data = Vec::new();
        for s in samples {
            data.extend_from_slice(s.as_slice());
        }
        Self {
            data,
            batch: samples.len(),
        }
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.data.len() / self.batch.max(1);
        &self.data[b * n..(b + 1) * n]
    }
}

/// Flattens one `channels × side × side` image into a `(channels·patch²) × N`
/// matrix: column `gy·g + gx` is the patch at grid cell `(gy, gx)`, rows are
/// channel-major then row-major within the patch.
pub fn patch_matrix<T: Scalar>(image: &[T], channels: usize, side: usize, patch: usize) -> Result<Matrix<T>> {
    if patch == 0 || side % patch != 0 {
        return shape_err("patchify", format!("side {side} not divisible by patch {patch}"));
    }
    if image.len() != channels * side * side {
        return shape_err(
            "patchify",
            format!("{} pixels for {channels}x{side}x{side}", image.len()),
        );
    }
    let g = side / patch;
    let rows = channels * patch * patch;
    let mut out = Matrix::zeros(rows, g * g);
    for gy in 0..g {
        for gx in 0..g {
            let col = gy * g + gx;
            for c in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        out[(c * patch * patch + py * patch + px, col)] = image[(c * side + y) * side + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Raw token matrix for a batch: `token_dim × (batch · raw tokens)`.
pub fn raw_tokens<T: Scalar>(input: &InputSpec, batch: &InputBatch<T>) -> Result<Matrix<T>> {
    let per = input.sample_len();
    if batch.batch == 0 || batch.data.len() != per * batch.batch {
        return shape_err(
            "raw_tokens",
            format!("{} values for {} samples of {per}", batch.data.len(), batch.batch),
        );
    }
    let parts = (0..batch.batch)
        .map(|b| {
            let s = batch.sample(b);
            match *input {
                InputSpec::Image {
                    image_side,
                    channels,
                    patch,
                } => patch_matrix(s, channels, image_side, patch),
                InputSpec::Tokens { dim, count } => Matrix::new(dim, count, s.to_vec()),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::hstack(&parts)
}

/// Per-layer measurements from a diagnostic forward pass.
#[derive(Clone, Debug)]
pub struct LayerDiagnostics<T> {
    /// Rates of the MSSA input per sample.
    pub rates: Vec<LayerRates>,
    /// Attention maps indexed `[head][sample]`, each `N×N`.
    pub attention: Vec<Vec<Matrix<T>>>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerDiagnostics<T>>,
    /// `num_classes × batch`
    pub logits: Matrix<T>,
}

/// Graph handles from one recorded forward pass.
pub struct Graph {
    pub params: Vec<Var>,
    pub tokens: Var,
    pub layers: Vec<LayerNodes>,
    pub features: Var,
    pub logits: Var,
}

impl<T: Scalar> ModelState<T> {
    /// Fresh parameters. Embeddings and bases are truncated normal (std
    /// 0.02), dictionaries Gaussian scaled by `1/√atoms`, the head is zero.
    /// Each tensor draws from its own stream of `rng`.
    pub fn init(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = rng.split(i as u64 + 1);
                match s.kind {
                    ParamKind::PatchWeight
                    | ParamKind::PosEmbed
                    | ParamKind::ClsToken
                    | ParamKind::Bases
                    | ParamKind::OutProj => r.trunc_normal_matrix(s.rows, s.cols, 0.02),
                    ParamKind::Dictionary | ParamKind::DecoderDictionary => {
                        r.normal_matrix(s.rows, s.cols, 1.0 / (s.cols as f64).sqrt())
                    }
                    ParamKind::NormGamma | ParamKind::Step => Matrix::filled(s.rows, s.cols, T::one()),
                    ParamKind::NormBeta | ParamKind::PatchBias | ParamKind::HeadWeight | ParamKind::HeadBias => {
                        Matrix::zeros(s.rows, s.cols)
                    }
                }
            })
            .collect();
        Ok(Self::assemble(config.clone(), specs, params))
    }

    fn assemble(config: ModelConfig, specs: Vec<ParamSpec>, params: Vec<Matrix<T>>) -> Self {
        let layout = Layout::new(&specs, config.depth);
        Self {
            config,
            specs,
            params,
            layout,
        }
    }

    /// Rebuilds a state from named tensors (any order); every expected tensor
    /// must be present with the expected shape.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Matrix<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let mut params = Vec::with_capacity(specs.len());
        for s in &specs {
            let pos = named
                .iter()
                .position(|(n, _)| *n == s.name)
                .ok_or_else(|| Error::Format(format!("missing tensor {}", s.name)))?;
            let (_, m) = named.swap_remove(pos);
            if m.shape() != (s.rows, s.cols) {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {}x{}",
                    s.name,
                    m.shape(),
                    s.rows,
                    s.cols
                )));
            }
            params.push(m);
        }
        Ok(Self::assemble(config.clone(), specs, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Matrix::is_finite)
    }

    /// Per-head bases of layer `l` as separate `d×p` matrices.
    pub fn layer_heads(&self, l: usize) -> Vec<Matrix<T>> {
        let u = &self.params[self.layout.layers[l].bases];
        let p = self.config.head_dim();
        (0..self.config.heads)
            .map(|k| u.col_range(k * p, (k + 1) * p).expect("head in range"))
            .collect()
    }

    /// Records the forward pass for `batch`. Parameters become trainable
    /// leaves when `trainable` is set, constants otherwise.
    pub fn build(&self, tape: &mut Tape<T>, batch: &InputBatch<T>, trainable: bool) -> Result<Graph> {
        let cfg = &self.config;
        let raw = raw_tokens(&cfg.input, batch)?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|m| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        let lay = &self.layout;
        let raw = tape.constant(raw);
        let embedded = tape.t_matmul(params[lay.patch_w], raw)?;
        let embedded = tape.add_col(embedded, params[lay.patch_b])?;
        let tokens = tape.assemble_tokens(embedded, lay.cls.map(|i| params[i]), params[lay.pos], batch.batch)?;
        let seg = cfg.tokens_per_sample();
        let mut z = tokens;
        let mut layers = Vec::with_capacity(cfg.depth);
        for ll in &lay.layers {
            let step = match (cfg.step_mode, ll.step) {
                (StepMode::Learned, Some(i)) => StepVar::Learned(params[i]),
                (StepMode::Literal { kappa, epsilon }, _) => {
                    StepVar::Const(T::of(kappa * cfg.head_dim() as f64 / (seg as f64 * epsilon * epsilon)))
                }
                (StepMode::Learned, None) => unreachable!("learned step has a parameter"),
            };
            let norm = |pair: Option<(usize, usize)>| {
                pair.map(|(g, b)| LayerNormVars {
                    gamma: params[g],
                    beta: params[b],
                })
            };
            let vars = LayerVars {
                mssa: MssaVars {
                    u: params[ll.bases],
                    heads: cfg.heads,
                    step,
                    out_proj: ll.out_proj.map(|i| params[i]),
                    scale_mode: cfg.scale_mode,
                },
                d: params[ll.dict],
                dhat: ll.decoder.map(|i| params[i]),
                norm1: norm(ll.norm1),
                norm2: norm(ll.norm2),
            };
            let nodes = layer_on(tape, z, &vars, cfg.variant, &cfg.sparse, seg)?;
            z = nodes.out;
            layers.push(nodes);
        }
        let features = if cfg.use_cls_token {
            tape.select_cols(z, (0..batch.batch).map(|b| b * seg).collect())?
        } else {
            tape.segment_mean(z, seg)?
        };
        let logits = tape.t_matmul(params[lay.head_w], features)?;
        let logits = tape.add_col(logits, params[lay.head_b])?;
        Ok(Graph {
            params,
            tokens,
            layers,
            features,
            logits,
        })
    }

    /// Token matrix entering the first layer for a single sample.
    pub fn embed(&self, sample: &[T]) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let g = self.build_embedding_only(&mut tape, sample)?;
        Ok(tape.value(g).clone())
    }

    fn build_embedding_only(&self, tape: &mut Tape<T>, sample: &[T]) -> Result<Var> {
        let lay = &self.layout;
        let raw = raw_tokens(&self.config.input, &InputBatch::new(sample.to_vec(), 1))?;
        let raw = tape.constant(raw);
        let w = tape.constant(self.params[lay.patch_w].clone());
        let b = tape.constant(self.params[lay.patch_b].clone());
        let pos = tape.constant(self.params[lay.pos].clone());
        let cls = lay.cls.map(|i| tape.constant(self.params[i].clone()));
        let e = tape.t_matmul(w, raw)?;
        let e = tape.add_col(e, b)?;
        tape.assemble_tokens(e, cls, pos, 1)
    }

    /// Forward pass; with `diagnostics`, also per-layer rates and attention.
    pub fn forward(&self, batch: &InputBatch<T>, diagnostics: Option<&RateParams>) -> Result<ForwardTrace<T>> {
        let mut tape = Tape::new();
        let graph = self.build(&mut tape, batch, false)?;
        let mut layers = Vec::new();
        if let Some(params) = diagnostics {
            layers = self.layer_diagnostics(&tape, &graph, batch.batch, params)?;
        }
        Ok(ForwardTrace {
            layers,
            logits: tape.value(graph.logits).clone(),
        })
    }

    fn layer_diagnostics(
        &self,
        tape: &Tape<T>,
        graph: &Graph,
        batch: usize,
        params: &RateParams,
    ) -> Result<Vec<LayerDiagnostics<T>>> {
        let seg = self.config.tokens_per_sample();
        graph
            .layers
            .iter()
            .enumerate()
            .map(|(l, nodes)| {
                let heads = self.layer_heads(l);
                let input = tape.value(nodes.mssa_input);
                let rates = (0..batch)
                    .map(|b| {
                        let z = input.col_range(b * seg, (b + 1) * seg)?;
                        crate::layers::layer_rates(&z, &heads, params)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LayerDiagnostics {
                    rates,
                    attention: split_attention(tape.value(nodes.attention), self.config.heads)?,
                })
            })
            .collect()
    }

    /// Mean label-smoothed cross-entropy, logits, and the gradient of every
    /// parameter (aligned with [`ModelState::params`]).
    pub fn loss_and_grads(
        &self,
        batch: &InputBatch<T>,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<(T, Matrix<T>, Vec<Matrix<T>>)> {
        let mut tape = Tape::new();
        let graph = self.build(&mut tape, batch, true)?;
        let loss = tape.smoothed_cross_entropy(graph.logits, labels, T::of(smoothing))?;
        let mut grads = tape.backward(loss)?;
        let g = graph.params.iter().map(|&v| grads.take(v)).collect();
        Ok((tape.value(loss).item(), tape.value(graph.logits).clone(), g))
    }

    /// Loss only, without recording gradients.
    pub fn loss(&self, batch: &InputBatch<T>, labels: &[usize], smoothing: f64) -> Result<T> {
        let mut tape = Tape::new();
        let graph = self.build(&mut tape, batch, false)?;
        let loss = tape.smoothed_cross_entropy(graph.logits, labels, T::of(smoothing))?;
        Ok(tape.value(loss).item())
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(|m| m.cast()).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Mean `R^c` of each layer's MSSA input over the samples of a trace.
pub fn mean_rc_per_layer<T>(trace: &ForwardTrace<T>) -> Vec<f64> {
    trace
        .layers
        .iter()
        .map(|l| l.rates.iter().map(|r| r.rc).sum::<f64>() / l.rates.len().max(1) as f64)
        .collect()
}

/// Rate report for arbitrary features against one layer's bases.
pub fn srr_report<T: Scalar>(z: &Matrix<T>, heads: &[Matrix<T>], params: &RateParams) -> Result<srr::SrrReport> {
    srr::srr_objective(
        &z.cast::<f64>(),
        &heads.iter().map(|h| h.cast()).collect::<Vec<_>>(),
        params,
    )
}
