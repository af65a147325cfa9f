//! Observation-space mixer, auxiliary penalties, and the full objective.
//!
//! `ModelState` bundles everything that is optimized: the source matrix, the
//! mixer, every branch, and the controller gaps. `total_objective` builds the
//! whole loss on one graph so a single backward pass yields gradients for all
//! four parameter groups at once.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{
    compute_controller, entropy_penalty, gap_penalty, log_scales, ControllerKnobs,
    ControllerOutput, ControllerParams, ENTROPY_EPS,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::patching::PatchSpec;
use crate::strformer::{structural_loss, ArchConfig, BranchParams, BranchVars, MaskPlan};

/// Guard used everywhere a standard deviation appears in a denominator.
pub const EPS_STD: f64 = 1e-8;

/// Mixer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Affine,
    Mlp,
}

/// Time-shared observation-space mixer weights.
#[derive(Debug, Clone)]
pub enum MixerWeights {
    /// y = A s + b with A of shape [m, K].
    Affine { weight: Tensor, bias: Tensor },
    /// y = W2 gelu(W1 s + b1) + b2, row-wise.
    Mlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
}

#[derive(Debug, Clone)]
pub struct Mixer {
    pub standardize_input: bool,
    pub weights: MixerWeights,
}

impl Mixer {
    pub fn init(
        kind: MixerKind,
        k: usize,
        m: usize,
        hidden: usize,
        standardize_input: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weights = match kind {
            MixerKind::Affine => MixerWeights::Affine {
                weight: Tensor::xavier_uniform(&[m, k], k, m, rng).with_grad(),
                bias: Tensor::zeros(&[m]).with_grad(),
            },
            MixerKind::Mlp => MixerWeights::Mlp {
                w1: Tensor::xavier_uniform(&[k, hidden], k, hidden, rng).with_grad(),
                b1: Tensor::zeros(&[hidden]).with_grad(),
                w2: Tensor::xavier_uniform(&[hidden, m], hidden, m, rng).with_grad(),
                b2: Tensor::zeros(&[m]).with_grad(),
            },
        };
        Mixer {
            standardize_input,
            weights,
        }
    }

    pub fn kind(&self) -> MixerKind {
        match self.weights {
            MixerWeights::Affine { .. } => MixerKind::Affine,
            MixerWeights::Mlp { .. } => MixerKind::Mlp,
        }
    }

    pub fn input_width(&self) -> usize {
        match &self.weights {
            MixerWeights::Affine { weight, .. } => weight.shape()[1],
            MixerWeights::Mlp { w1, .. } => w1.shape()[0],
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        match &self.weights {
            MixerWeights::Affine { weight, bias } => {
                f("mixer.weight".into(), weight);
                f("mixer.bias".into(), bias);
            }
            MixerWeights::Mlp { w1, b1, w2, b2 } => {
                f("mixer.w1".into(), w1);
                f("mixer.b1".into(), b1);
                f("mixer.w2".into(), w2);
                f("mixer.b2".into(), b2);
            }
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Tensor)) {
        match &mut self.weights {
            MixerWeights::Affine { weight, bias } => {
                f("mixer.weight".into(), weight);
                f("mixer.bias".into(), bias);
            }
            MixerWeights::Mlp { w1, b1, w2, b2 } => {
                f("mixer.w1".into(), w1);
                f("mixer.b1".into(), b1);
                f("mixer.w2".into(), w2);
                f("mixer.b2".into(), b2);
            }
        }
    }
}

/// Graph-bound mixer.
pub enum MixerVars {
    Affine { weight: Var, bias: Var },
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
}

impl MixerVars {
    pub fn bind(graph: &Graph, mixer: &Mixer, sink: &mut Vec<Var>) -> Result<Self> {
        let mut leaf = |t: &Tensor| -> Result<Var> {
            let v = graph.leaf(t.clone())?;
            sink.push(v.clone());
            Ok(v)
        };
        Ok(match &mixer.weights {
            MixerWeights::Affine { weight, bias } => MixerVars::Affine {
                weight: leaf(weight)?,
                bias: leaf(bias)?,
            },
            MixerWeights::Mlp { w1, b1, w2, b2 } => MixerVars::Mlp {
                w1: leaf(w1)?,
                b1: leaf(b1)?,
                w2: leaf(w2)?,
                b2: leaf(b2)?,
            },
        })
    }
}

/// Decoder input map: identity by default, column standardization when on.
pub fn decoder_input(sources: &Var, standardize: bool) -> Result<Var> {
    if !standardize {
        return Ok(sources.clone());
    }
    let centered = center_columns(sources)?;
    let std = centered
        .square()?
        .transpose()?
        .row_mean()?
        .sqrt()?
        .transpose()?; // [1,K]
    centered.div(&std.add_scalar(EPS_STD)?)
}

/// Subtract per-column means of a [T, K] variable.
fn center_columns(sources: &Var) -> Result<Var> {
    let mu = sources.transpose()?.row_mean()?.transpose()?; // [1,K]
    sources.sub(&mu)
}

/// Row-wise application of the mixer: [T, K] -> [T, m].
pub fn mix(s_tilde: &Var, mixer: &MixerVars) -> Result<Var> {
    match mixer {
        MixerVars::Affine { weight, bias } => s_tilde.matmul(&weight.transpose()?)?.add(bias),
        MixerVars::Mlp { w1, b1, w2, b2 } => s_tilde
            .matmul(w1)?
            .add(b1)?
            .gelu()?
            .matmul(w2)?
            .add(b2),
    }
}

/// Quadratic reconstruction term ||Y - Yhat||_F^2 / (2 nu_y).
pub fn reconstruction_loss(y: &Var, y_hat: &Var, nu_y: f64) -> Result<Var> {
    if !(nu_y > 0.0) {
        return Err(Error::Config(format!(
            "reconstruction coefficient nu_y must be positive, got {nu_y}"
        )));
    }
    if y.shape() != y_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "sub",
            node: 0,
            details: format!("{:?} vs {:?}", y.shape(), y_hat.shape()),
        });
    }
    y.sub(y_hat)?.sq_norm()?.scale(1.0 / (2.0 * nu_y))
}

/// Source separation penalty ||Z^T Z / T - I||_F^2 on centered, standardized
/// columns.
pub fn separation_penalty(graph: &Graph, sources: &Var) -> Result<Var> {
    let t = sources.shape()[0];
    let k = sources.shape()[1];
    if t < 2 {
        return Err(Error::Config("separation penalty needs at least two samples".into()));
    }
    let centered = center_columns(sources)?;
    let std = centered
        .square()?
        .transpose()?
        .row_mean()?
        .sqrt()?
        .transpose()?; // [1,K]
    let z = centered.div(&std.add_scalar(EPS_STD)?)?;
    let c = z.transpose()?.matmul(&z)?.scale(1.0 / t as f64)?;
    let mut eye = Tensor::zeros(&[k, k]);
    for i in 0..k {
        eye.data_mut()[i * k + i] = 1.0;
    }
    let eye = graph.constant(eye)?;
    c.sub(&eye)?.sq_norm()
}

/// Smoothness penalty ||D_o S||_F^2 / ((T - o) K) with forward differences.
pub fn smoothness_penalty(sources: &Var, order: usize) -> Result<Var> {
    let t = sources.shape()[0];
    let k = sources.shape()[1];
    if order != 1 && order != 2 {
        return Err(Error::Config(format!(
            "difference order must be 1 or 2, got {order}"
        )));
    }
    if t <= order {
        return Err(Error::Config(format!(
            "smoothness penalty needs T > o, got T = {t}, o = {order}"
        )));
    }
    let rows = |from: usize| -> Vec<usize> { (from..from + t - order).collect() };
    let diff = if order == 1 {
        sources.gather_rows(&rows(1))?.sub(&sources.gather_rows(&rows(0))?)?
    } else {
        sources
            .gather_rows(&rows(2))?
            .sub(&sources.gather_rows(&rows(1))?.scale(2.0)?)?
            .add(&sources.gather_rows(&rows(0))?)?
    };
    diff.sq_norm()?.scale(1.0 / ((t - order) * k) as f64)
}

/// Objective weights. A weight of exactly zero removes its term from the
/// active objective (it is not even evaluated).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectiveWeights {
    pub nu_y: f64,
    pub lambda_str: f64,
    pub lambda_sep: f64,
    pub lambda_smooth: f64,
    pub lambda_ent: f64,
    pub lambda_gap: f64,
    /// Forward-difference order of the smoothness penalty (1 or 2).
    pub diff_order: usize,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            nu_y: 1e-2,
            lambda_str: 1.0,
            lambda_sep: 0.1,
            lambda_smooth: 1e-3,
            lambda_ent: 1e-2,
            lambda_gap: 1.0,
            diff_order: 1,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu_y > 0.0) {
            return Err(Error::Config("nu_y must be positive".into()));
        }
        for (name, v) in [
            ("lambda_str", self.lambda_str),
            ("lambda_sep", self.lambda_sep),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_ent", self.lambda_ent),
            ("lambda_gap", self.lambda_gap),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.diff_order != 1 && self.diff_order != 2 {
            return Err(Error::Config("diff_order must be 1 or 2".into()));
        }
        Ok(())
    }
}

/// The six loss components (str unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub str_: f64,
    pub sep: f64,
    pub smooth: f64,
    pub ent: f64,
    pub gap: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("str", self.str_),
            ("sep", self.sep),
            ("smooth", self.smooth),
            ("ent", self.ent),
            ("gap", self.gap),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Structural configuration of a model, enough to rebuild its shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub k: usize,
    /// Candidate patch sizes before degenerate-scale filtering.
    pub patch_sizes: Vec<usize>,
    pub stride_ratio: f64,
    pub mask_ratio: f64,
    pub arch: ArchConfig,
    pub mixer: MixerKind,
    pub mixer_hidden: usize,
    pub standardize_decoder_input: bool,
    pub controller: ControllerKnobs,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            patch_sizes: vec![4, 8, 16, 32],
            stride_ratio: 0.5,
            mask_ratio: 0.3,
            arch: ArchConfig::default(),
            mixer: MixerKind::Affine,
            mixer_hidden: 16,
            standardize_decoder_input: false,
        controller: ControllerKnobs::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("source count K must be at least 1".into()));
        }
        if self.patch_sizes.is_empty() {
            return Err(Error::Config("patch size candidate set must not be empty".into()));
        }
        if !(self.stride_ratio > 0.0 && self.stride_ratio <= 1.0) {
            return Err(Error::Config("stride ratio must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("mask ratio must lie in [0, 1]".into()));
        }
        if self.mixer == MixerKind::Mlp && self.mixer_hidden == 0 {
            return Err(Error::Config("mlp mixer hidden width must be positive".into()));
        }
        self.arch.validate()?;
        self.controller.validate()
    }

    /// Patch specs that survive the trajectory length, in ascending size.
    pub fn usable_specs(&self, t: usize) -> Result<Vec<PatchSpec>> {
        let mut sizes: Vec<usize> = self
            .patch_sizes
            .iter()
            .copied()
            .filter(|&p| p <= t)
            .collect();
        sizes.sort_unstable();
        sizes.dedup();
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least two usable patch scales for T = {t}, candidates {:?}",
                self.patch_sizes
            )));
        }
        sizes
            .into_iter()
            .map(|p| PatchSpec::new(p, self.stride_ratio))
            .collect()
    }
}

/// Everything the optimizer touches: sources, mixer, branches, controller.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    /// Latent source matrix S, [T, K].
    pub sources: Tensor,
    pub mixer: Mixer,
    /// branches[k][r], one per (source, active scale) pair.
    pub branches: Vec<Vec<BranchParams>>,
    pub controller: ControllerParams,
    /// Active patch scales (degenerate ones dropped).
    pub specs: Vec<PatchSpec>,
}

impl ModelState {
    /// Fresh model for a [T, m] observation shape.
    pub fn init(t: usize, m: usize, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let specs = config.usable_specs(t)?;
        let sources = Tensor::randn(&[t, config.k], 0.1, rng).with_grad();
        let mixer = Mixer::init(
            config.mixer,
            config.k,
            m,
            config.mixer_hidden,
            config.standardize_decoder_input,
            rng,
        );
        let branches = (0..config.k)
            .map(|_| {
                specs
                    .iter()
                    .map(|sp| BranchParams::init(sp.patch_size, &config.arch, rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let controller = ControllerParams::new(config.k, config.controller.clone())?;
        Ok(ModelState {
            config: config.clone(),
            sources,
            mixer,
            branches,
            controller,
            specs,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.config.k
    }

    pub fn sequence_len(&self) -> usize {
        self.sources.shape()[0]
    }

    pub fn patch_sizes(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.patch_size).collect()
    }

    /// Visit every trainable tensor in canonical order:
    /// sources, mixer, branches (source-major), controller gaps.
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        f("s".into(), &self.sources);
        self.mixer.for_each(f);
        for (k, row) in self.branches.iter().enumerate() {
            for (r, b) in row.iter().enumerate() {
                b.for_each(&mut |name, t| f(format!("branch.{k}.{r}.{name}"), t));
            }
        }
        f("eta".into(), &self.controller.raw_gaps);
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Tensor)) {
        f("s".into(), &mut self.sources);
        self.mixer.for_each_mut(f);
        for (k, row) in self.branches.iter_mut().enumerate() {
            for (r, b) in row.iter_mut().enumerate() {
                b.for_each_mut(&mut |name, t| f(format!("branch.{k}.{r}.{name}"), t));
            }
        }
        f("eta".into(), &mut self.controller.raw_gaps);
    }

    pub fn param_names_and_sizes(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name, t.numel())));
        out
    }
}

/// Graph-bound model: structured mirrors plus the flat leaf list in
/// `ModelState::for_each` order.
pub struct ModelBinding {
    pub sources: Var,
    pub mixer: MixerVars,
    pub branches: Vec<Vec<BranchVars>>,
    pub eta: Var,
    pub flat: Vec<Var>,
}

impl ModelBinding {
    pub fn bind(graph: &Graph, model: &ModelState) -> Result<Self> {
        let mut flat = Vec::new();
        let sources = graph.leaf(model.sources.clone())?;
        flat.push(sources.clone());
        let mixer = MixerVars::bind(graph, &model.mixer, &mut flat)?;
        let mut branches = Vec::with_capacity(model.branches.len());
        for row in &model.branches {
            let mut bound = Vec::with_capacity(row.len());
            for b in row {
                bound.push(BranchVars::bind(graph, b, &mut flat)?);
            }
            branches.push(bound);
        }
        let eta = graph.leaf(model.controller.raw_gaps.clone())?;
        flat.push(eta.clone());
        Ok(ModelBinding {
            sources,
            mixer,
            branches,
            eta,
            flat,
        })
    }
}

/// Everything produced by one objective evaluation.
pub struct ObjectiveEval {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Per-branch aggregates sum_r pi_{k,r} l_{k,r}.
    pub branch_str: Vec<f64>,
    pub controller: ControllerOutput,
    pub binding: ModelBinding,
}

/// Build the full objective on `graph`.
///
/// Terms with weight exactly zero are removed: they are not evaluated, and
/// parameters appearing only in them receive zero gradient.
pub fn total_objective(
    graph: &Graph,
    y: &Tensor,
    model: &ModelState,
    weights: &ObjectiveWeights,
    masks: &MaskPlan,
) -> Result<ObjectiveEval> {
    weights.validate()?;
    let binding = ModelBinding::bind(graph, model)?;
    let y_var = graph.constant(y.clone())?;

    let s_tilde = decoder_input(&binding.sources, model.mixer.standardize_input)?;
    let y_hat = mix(&s_tilde, &binding.mixer)?;
    let rec = reconstruction_loss(&y_var, &y_hat, weights.nu_y)?;

    let patch_sizes = model.patch_sizes();
    let ctrl = compute_controller(
        graph,
        &binding.eta,
        &model.controller.knobs,
        &patch_sizes,
    )?;
    let controller = ctrl.snapshot();

    let mut total = rec.clone();
    let mut breakdown = LossBreakdown {
        rec: rec.scalar_value(),
        str_: 0.0,
        sep: 0.0,
        smooth: 0.0,
        ent: 0.0,
        gap: 0.0,
        total: 0.0,
    };
    let mut branch_str = vec![0.0; model.num_sources()];

    if weights.lambda_str != 0.0 {
        let ev = structural_loss(
            graph,
            &binding.sources,
            &binding.branches,
            &ctrl.pi,
            &ctrl.alpha,
            &model.specs,
            masks,
        )?;
        breakdown.str_ = ev.total.scalar_value();
        for (k, b) in ev.branch_totals.iter().enumerate() {
            branch_str[k] = b.scalar_value();
        }
        total = total.add(&ev.total.scale(weights.lambda_str)?)?;
    }
    if weights.lambda_sep != 0.0 {
        let sep = separation_penalty(graph, &binding.sources)?;
        breakdown.sep = sep.scalar_value();
        total = total.add(&sep.scale(weights.lambda_sep)?)?;
    }
    if weights.lambda_smooth != 0.0 {
        let smooth = smoothness_penalty(&binding.sources, weights.diff_order)?;
        breakdown.smooth = smooth.scalar_value();
        total = total.add(&smooth.scale(weights.lambda_smooth)?)?;
    }
    if weights.lambda_ent != 0.0 {
        let ent = entropy_penalty(&ctrl.pi, ENTROPY_EPS)?;
        breakdown.ent = ent.scalar_value();
        total = total.add(&ent.scale(weights.lambda_ent)?)?;
    }
    if weights.lambda_gap != 0.0 {
        let delta_c = model
            .controller
            .knobs
            .center_gap(&log_scales(&patch_sizes), model.num_sources());
        let gap = gap_penalty(&ctrl.centers, delta_c)?;
        breakdown.gap = gap.scalar_value();
        total = total.add(&gap.scale(weights.lambda_gap)?)?;
    }
    breakdown.total = total.scalar_value();

    Ok(ObjectiveEval {
        total,
        breakdown,
        branch_str,
        controller,
        binding,
    })
}

/// Deterministic mask plan for one step seed, sized for this model.
pub fn step_masks(model: &ModelState, step_seed: u64) -> Result<MaskPlan> {
    MaskPlan::sample(
        model.sequence_len(),
        model.num_sources(),
        &model.specs,
        model.config.mask_ratio,
        step_seed,
    )
}
