//! One CRATE-α layer: the MSSA compression block followed by a sparse
//! coding block (vanilla ISTA, ISTA-OC, decoupled ODL, or residual ODL).
//!
//! Every block is written once, as a builder on a [`Tape`]. The matrix-level
//! functions ([`mssa`], [`ista_oc`], [`odl`], ...) record onto a throwaway
//! tape with constant leaves and read the value back, so training and the
//! equation-level tests share one implementation.
//!
//! Token matrices are `d × (batch·N)`: samples are consecutive column
//! segments of length `N`, and attention never crosses a segment boundary.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Matrix, Scalar, Tape, Var};
use crate::srr::{self, RateParams};

/// Sparse coding block, ordered along the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// Complete `d×d` dictionary, one ISTA step.
    VanillaIsta,
    /// Modification 1: overcomplete dictionary, unrolled prox steps, decode with `D`.
    OvercompleteIsta,
    /// Modification 2: decode with a separate dictionary `D̂`.
    DecoupledOdl,
    /// Modification 3: decoupled ODL plus a residual connection.
    ResidualOdl,
}

impl BlockVariant {
    pub const LADDER: [BlockVariant; 4] = [
        BlockVariant::VanillaIsta,
        BlockVariant::OvercompleteIsta,
        BlockVariant::DecoupledOdl,
        BlockVariant::ResidualOdl,
    ];

    pub fn is_overcomplete(self) -> bool {
        self != BlockVariant::VanillaIsta
    }

    pub fn is_decoupled(self) -> bool {
        matches!(self, BlockVariant::DecoupledOdl | BlockVariant::ResidualOdl)
    }

    pub fn is_residual(self) -> bool {
        self == BlockVariant::ResidualOdl
    }

    /// Short name used on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            BlockVariant::VanillaIsta => "vanilla",
            BlockVariant::OvercompleteIsta => "oc",
            BlockVariant::DecoupledOdl => "ocd",
            BlockVariant::ResidualOdl => "ocdr",
        }
    }

    pub fn from_short_name(name: &str) -> Option<Self> {
        Self::LADDER.into_iter().find(|v| v.short_name() == name)
    }
}

/// Temperature applied to the attention similarities before the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// No temperature: `softmax(VᵀV)`.
    Unscaled,
    /// `softmax(VᵀV / √p)`.
    #[default]
    SqrtP,
}

impl ScaleMode {
    fn factor(self, p: usize) -> f64 {
        match self {
            ScaleMode::Unscaled => 1.0,
            ScaleMode::SqrtP => 1.0 / (p as f64).sqrt(),
        }
    }
}

/// Leading step factor of the MSSA output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepScale<T> {
    /// `κ p / (N ε²)` with `N` the tokens per sample.
    Literal { kappa: f64, epsilon: f64 },
    /// A single trained scalar.
    Learned(T),
}

/// Per-head bases `U_1..U_K` stored side by side as one `d × (K·p)` matrix.
#[derive(Clone, Debug)]
pub struct SubspaceBases<T> {
    pub u: Matrix<T>,
    pub heads: usize,
    pub step: StepScale<T>,
    pub out_proj: Option<Matrix<T>>,
    pub scale_mode: ScaleMode,
}

impl<T: Scalar> SubspaceBases<T> {
    /// Literal-equation bases: step `κp/(Nε²)`, no temperature, no output map.
    pub fn literal(heads: &[Matrix<T>], kappa: f64, epsilon: f64) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Config("at least one head is required".into()));
        }
        let (d, p) = heads[0].shape();
        if heads.iter().any(|u| u.shape() != (d, p)) {
            return shape_err("SubspaceBases", "heads must share one shape");
        }
        if !(kappa > 0.0) || !(epsilon > 0.0) {
            return Err(Error::Parameter {
                name: "kappa/epsilon",
                detail: format!("kappa={kappa}, epsilon={epsilon} must be > 0"),
            });
        }
        Ok(Self {
            u: Matrix::hstack(heads)?,
            heads: heads.len(),
            step: StepScale::Literal { kappa, epsilon },
            out_proj: None,
            scale_mode: ScaleMode::Unscaled,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.u.cols() / self.heads
    }

    pub fn head(&self, k: usize) -> Matrix<T> {
        let p = self.head_dim();
        self.u.col_range(k * p, (k + 1) * p).expect("head index in range")
    }

    pub fn head_list(&self) -> Vec<Matrix<T>> {
        (0..self.heads).map(|k| self.head(k)).collect()
    }
}

/// Unrolled proximal step settings shared by every sparse coding variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseHyper {
    pub eta: f64,
    pub lambda: f64,
    pub steps: usize,
}

impl Default for SparseHyper {
    fn default() -> Self {
        Self {
            eta: 0.1,
            lambda: 0.1,
            steps: 2,
        }
    }
}

/// Encoder dictionary `D` (`d × Cd`) and optional decoder `D̂`.
#[derive(Clone, Debug)]
pub struct DictionaryPair<T> {
    pub d: Matrix<T>,
    pub dhat: Option<Matrix<T>>,
    pub hyper: SparseHyper,
}

impl<T: Scalar> DictionaryPair<T> {
    pub fn overcompleteness(&self) -> usize {
        self.d.cols() / self.d.rows().max(1)
    }
}

/// Intermediate values of one layer on one sample.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    pub zhalf: Matrix<T>,
    pub codes: Option<Matrix<T>>,
    /// `K` column-stochastic `N×N` attention maps.
    pub attention: Vec<Matrix<T>>,
    pub rates: Option<LayerRates>,
}

/// Rate diagnostics of a layer's input, as seen by its own bases.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerRates {
    pub r: f64,
    pub rc: f64,
    pub l1: f64,
    pub srr: f64,
    pub l0_fraction: f64,
}

// ---------------------------------------------------------------------------
// Tape builders

/// Step factor as it appears on the tape.
#[derive(Clone, Copy, Debug)]
pub enum StepVar<T> {
    Const(T),
    Learned(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct MssaVars<T> {
    pub u: Var,
    pub heads: usize,
    pub step: StepVar<T>,
    pub out_proj: Option<Var>,
    pub scale_mode: ScaleMode,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars<T> {
    pub mssa: MssaVars<T>,
    pub d: Var,
    pub dhat: Option<Var>,
    pub norm1: Option<LayerNormVars>,
    pub norm2: Option<LayerNormVars>,
}

/// Nodes produced by [`layer_on`].
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    /// What the bases see: the layer input, normalized when norms are on.
    pub mssa_input: Var,
    pub attention: Var,
    pub zhalf: Var,
    pub codes: Option<Var>,
    pub out: Var,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn step_const<T: Scalar>(step: StepScale<T>, p: usize, seg: usize) -> StepVar<T> {
    match step {
        StepScale::Literal { kappa, epsilon } => {
            StepVar::Const(T::of(kappa * p as f64 / (seg as f64 * epsilon * epsilon)))
        }
        StepScale::Learned(s) => StepVar::Const(s),
    }
}

/// MSSA on a batched token matrix. Returns the block output and the
/// attention node (`N × (K·batch·N)`, column-stochastic blocks).
pub fn mssa_on<T: Scalar>(tape: &mut Tape<T>, z: Var, vars: &MssaVars<T>, seg: usize) -> Result<(Var, Var)> {
    let (d, _) = tape.shape(z);
    let (ud, kp) = tape.shape(vars.u);
    if ud != d || vars.heads == 0 || kp % vars.heads != 0 {
        return shape_err(
            "mssa",
            format!("bases {ud}x{kp} with {} heads for width {d}", vars.heads),
        );
    }
    let p = kp / vars.heads;
    let v = tape.t_matmul(vars.u, z)?;
    let gram = tape.head_gram(v, vars.heads, seg, T::of(vars.scale_mode.factor(p)))?;
    let attn = tape.softmax_cols(gram);
    let mixed = tape.head_mix(v, attn, vars.heads, seg)?;
    let lifted = tape.matmul(vars.u, mixed)?;
    let scaled = match vars.step {
        StepVar::Const(s) => tape.scale(lifted, s),
        StepVar::Learned(s) => tape.scale_by(lifted, s)?,
    };
    let out = match vars.out_proj {
        Some(w) => tape.matmul(w, scaled)?,
        None => scaled,
    };
    Ok((out, attn))
}

/// `ReLU(Z + η Dᵀ(Z − D Z) − ηλ)` with a square dictionary.
pub fn vanilla_ista_on<T: Scalar>(tape: &mut Tape<T>, z: Var, d: Var, eta: f64, lambda: f64) -> Result<Var> {
    let (dr, dc) = tape.shape(d);
    if dr != dc || dr != tape.shape(z).0 {
        return shape_err(
            "vanilla_ista",
            format!("dictionary {dr}x{dc} for width {}", tape.shape(z).0),
        );
    }
    let dz = tape.matmul(d, z)?;
    let resid = tape.sub(z, dz)?;
    let back = tape.t_matmul(d, resid)?;
    let step = tape.scale(back, T::of(eta));
    let pre = tape.add(z, step)?;
    let pre = tape.shift(pre, T::of(-eta * lambda));
    Ok(tape.relu(pre))
}

/// `ReLU(A − η Dᵀ(D A − Z) − ηλ)`; `None` stands for `A = 0`.
pub fn prox_step_on<T: Scalar>(
    tape: &mut Tape<T>,
    a: Option<Var>,
    d: Var,
    z: Var,
    eta: f64,
    lambda: f64,
) -> Result<Var> {
    let (dr, dc) = tape.shape(d);
    let (zr, zc) = tape.shape(z);
    if dr != zr {
        return shape_err("prox_step", format!("dictionary {dr}x{dc} against tokens {zr}x{zc}"));
    }
    if let Some(a) = a {
        if tape.shape(a) != (dc, zc) {
            return shape_err("prox_step", format!("codes {:?}, expected {dc}x{zc}", tape.shape(a)));
        }
    }
    // With A = 0 the step reduces to ReLU(η Dᵀ Z − ηλ).
    let pre = match a {
        Some(a) => {
            let da = tape.matmul(d, a)?;
            let resid = tape.sub(da, z)?;
            let back = tape.t_matmul(d, resid)?;
            let step = tape.scale(back, T::of(eta));
            tape.sub(a, step)?
        }
        None => {
            let back = tape.t_matmul(d, z)?;
            tape.scale(back, T::of(eta))
        }
    };
    let pre = tape.shift(pre, T::of(-eta * lambda));
    Ok(tape.relu(pre))
}

/// `steps` prox iterations from `A₀ = 0`.
pub fn ista_oc_on<T: Scalar>(tape: &mut Tape<T>, z: Var, d: Var, hyper: &SparseHyper) -> Result<Var> {
    if hyper.steps == 0 {
        return Err(Error::Config("sparse coding needs at least one prox step".into()));
    }
    let mut a = prox_step_on(tape, None, d, z, hyper.eta, hyper.lambda)?;
    for _ in 1..hyper.steps {
        a = prox_step_on(tape, Some(a), d, z, hyper.eta, hyper.lambda)?;
    }
    Ok(a)
}

/// ODL-family block on input `x`. `residual` is the stream added back for
/// [`BlockVariant::ResidualOdl`] (equal to `x` when no normalization precedes
/// the block). Returns `(output, codes)`.
pub fn odl_on<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    residual: Var,
    d: Var,
    dhat: Option<Var>,
    variant: BlockVariant,
    hyper: &SparseHyper,
) -> Result<(Var, Var)> {
    if variant == BlockVariant::VanillaIsta {
        return Err(Error::Config("odl is not defined for the vanilla ISTA block".into()));
    }
    let decoder = if variant.is_decoupled() {
        dhat.ok_or_else(|| Error::Config(format!("{variant:?} needs a decoupled dictionary")))?
    } else {
        d
    };
    if tape.shape(decoder) != tape.shape(d) {
        return shape_err(
            "odl",
            format!("decoder {:?} vs encoder {:?}", tape.shape(decoder), tape.shape(d)),
        );
    }
    let codes = ista_oc_on(tape, x, d, hyper)?;
    let decoded = tape.matmul(decoder, codes)?;
    let out = if variant.is_residual() {
        tape.add(residual, decoded)?
    } else {
        decoded
    };
    Ok((out, codes))
}

/// Full layer: `Z½ = Z + MSSA(norm₁(Z))`, then the sparse block on
/// `norm₂(Z½)`. Norms are skipped when absent.
pub fn layer_on<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    vars: &LayerVars<T>,
    variant: BlockVariant,
    hyper: &SparseHyper,
    seg: usize,
) -> Result<LayerNodes> {
    let eps = T::of(LAYER_NORM_EPS);
    let mssa_input = match vars.norm1 {
        Some(n) => tape.layer_norm_cols(z, n.gamma, n.beta, eps)?,
        None => z,
    };
    let (m, attention) = mssa_on(tape, mssa_input, &vars.mssa, seg)?;
    let zhalf = tape.add(z, m)?;
    let x = match vars.norm2 {
        Some(n) => tape.layer_norm_cols(zhalf, n.gamma, n.beta, eps)?,
        None => zhalf,
    };
    let (out, codes) = match variant {
        BlockVariant::VanillaIsta => (vanilla_ista_on(tape, x, vars.d, hyper.eta, hyper.lambda)?, None),
        _ => {
            let (o, c) = odl_on(tape, x, zhalf, vars.d, vars.dhat, variant, hyper)?;
            (o, Some(c))
        }
    };
    Ok(LayerNodes {
        mssa_input,
        attention,
        zhalf,
        codes,
        out,
    })
}

/// Splits an attention node value into per-head, per-sample `N×N` maps,
/// indexed `[head][sample]`.
pub fn split_attention<T: Scalar>(attn: &Matrix<T>, heads: usize) -> Result<Vec<Vec<Matrix<T>>>> {
    let seg = attn.rows();
    if seg == 0 || attn.cols() % (seg * heads) != 0 {
        return shape_err("split_attention", format!("{:?} with {heads} heads", attn.shape()));
    }
    let batch = attn.cols() / (seg * heads);
    (0..heads)
        .map(|k| {
            (0..batch)
                .map(|b| {
                    let start = (k * batch + b) * seg;
                    attn.col_range(start, start + seg)
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Matrix-level API (single sample, no normalization)

fn bases_on<T: Scalar>(tape: &mut Tape<T>, bases: &SubspaceBases<T>, seg: usize) -> MssaVars<T> {
    let u = tape.constant(bases.u.clone());
    let out_proj = bases.out_proj.as_ref().map(|w| tape.constant(w.clone()));
    MssaVars {
        u,
        heads: bases.heads,
        step: step_const(bases.step, bases.head_dim(), seg),
        out_proj,
        scale_mode: bases.scale_mode,
    }
}

/// `MSSA(Z | U)` for one sample `Z` (`d × N`).
pub fn mssa<T: Scalar>(z: &Matrix<T>, bases: &SubspaceBases<T>) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let vars = bases_on(&mut tape, bases, z.cols());
    let (out, _) = mssa_on(&mut tape, zv, &vars, z.cols())?;
    Ok(tape.value(out).clone())
}

pub fn vanilla_ista<T: Scalar>(zhalf: &Matrix<T>, d: &Matrix<T>, eta: f64, lambda: f64) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let z = tape.constant(zhalf.clone());
    let dv = tape.constant(d.clone());
    let out = vanilla_ista_on(&mut tape, z, dv, eta, lambda)?;
    Ok(tape.value(out).clone())
}

pub fn prox_step<T: Scalar>(a: &Matrix<T>, d: &Matrix<T>, z: &Matrix<T>, eta: f64, lambda: f64) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let dv = tape.constant(d.clone());
    let zv = tape.constant(z.clone());
    let out = prox_step_on(&mut tape, Some(av), dv, zv, eta, lambda)?;
    Ok(tape.value(out).clone())
}

/// Sparse codes `A_steps` (`Cd × N`, entrywise ≥ 0).
pub fn ista_oc<T: Scalar>(zhalf: &Matrix<T>, dict: &DictionaryPair<T>) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let z = tape.constant(zhalf.clone());
    let d = tape.constant(dict.d.clone());
    let a = ista_oc_on(&mut tape, z, d, &dict.hyper)?;
    Ok(tape.value(a).clone())
}

pub fn odl<T: Scalar>(zhalf: &Matrix<T>, dict: &DictionaryPair<T>, variant: BlockVariant) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let z = tape.constant(zhalf.clone());
    let d = tape.constant(dict.d.clone());
    let dhat = dict.dhat.as_ref().map(|m| tape.constant(m.clone()));
    let (out, _) = odl_on(&mut tape, z, z, d, dhat, variant, &dict.hyper)?;
    Ok(tape.value(out).clone())
}

/// One layer on one sample, following the equations literally (no
/// normalization). Rates are measured on `Z` when `diagnostics` is set.
pub fn crate_alpha_layer<T: Scalar>(
    z: &Matrix<T>,
    bases: &SubspaceBases<T>,
    dict: &DictionaryPair<T>,
    variant: BlockVariant,
    diagnostics: Option<&RateParams>,
) -> Result<(Matrix<T>, LayerTrace<T>)> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let mssa = bases_on(&mut tape, bases, z.cols());
    let d = tape.constant(dict.d.clone());
    let dhat = dict.dhat.as_ref().map(|m| tape.constant(m.clone()));
    let vars = LayerVars {
        mssa,
        d,
        dhat,
        norm1: None,
        norm2: None,
    };
    let nodes = layer_on(&mut tape, zv, &vars, variant, &dict.hyper, z.cols())?;
    let attention = split_attention(tape.value(nodes.attention), bases.heads)?
        .into_iter()
        .map(|mut per_sample| per_sample.remove(0))
        .collect();
    let rates = diagnostics.map(|p| layer_rates(z, &bases.head_list(), p)).transpose()?;
    let trace = LayerTrace {
        zhalf: tape.value(nodes.zhalf).clone(),
        codes: nodes.codes.map(|c| tape.value(c).clone()),
        attention,
        rates,
    };
    Ok((tape.value(nodes.out).clone(), trace))
}

/// Rates of one sample against per-head bases, computed in f64.
pub fn layer_rates<T: Scalar>(z: &Matrix<T>, heads: &[Matrix<T>], params: &RateParams) -> Result<LayerRates> {
    let z64: Matrix<f64> = z.cast();
    let h64: Vec<Matrix<f64>> = heads.iter().map(|u| u.cast()).collect();
    let rep = srr::srr_objective(&z64, &h64, params)?;
    Ok(LayerRates {
        r: rep.r,
        rc: rep.rc,
        l1: rep.l1,
        srr: rep.srr,
        l0_fraction: rep.l0_fraction(),
    })
}

/// Cosine similarity between `MSSA(Z)` and `−∇R^c(Z)`. Reported only; the
/// two coincide only approximately.
pub fn mssa_gradient_alignment(z: &Matrix<f64>, bases: &SubspaceBases<f64>, epsilon: f64) -> Result<f64> {
    let m = mssa(z, bases)?;
    let g = srr::grad_rate_rc(z, &bases.head_list(), epsilon)?;
    let denom = m.frobenius() * g.frobenius();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(-m.hadamard(&g)?.sum() / denom)
}
