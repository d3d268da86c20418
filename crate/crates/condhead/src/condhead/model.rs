//! Conditioned head models and the two comparison baselines.

use serde::{Deserialize, Serialize};

use super::arch::{BoxHeadArch, LightBoxArch, LightMaskArch, MaskHeadArch, Mlp, MlpVars};
use super::{CondHeadConfig, SemanticEmbedding};
use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::geometry::BoxDelta;
use crate::seeds;

/// Model families compared by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "agnostic")]
    Agnostic,
    #[serde(rename = "classwise")]
    ClassWise,
    #[serde(rename = "condhead")]
    CondHead,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Agnostic => "agnostic",
            Variant::ClassWise => "classwise",
            Variant::CondHead => "condhead",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agnostic" => Ok(Variant::Agnostic),
            "classwise" => Ok(Variant::ClassWise),
            "condhead" => Ok(Variant::CondHead),
            other => Err(Error::Config(format!("unknown model variant '{other}'"))),
        }
    }
}

/// Input dimensions shared by every head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub mask_channels: usize,
    pub grid: usize,
    pub embed_dim: usize,
}

/// H parallel expert parameter sets plus the small net that generates their
/// aggregation weights from a semantic embedding.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub experts: Vec<Tensor>,
    pub weight_gen: Mlp,
}

impl ExpertBank {
    pub fn new(experts: Vec<Tensor>, weight_gen: Mlp) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::Config("expert bank needs at least one expert".into()));
        }
        let len = experts[0].len();
        if experts.iter().any(|e| e.len() != len) {
            return Err(Error::Config("experts must share one parameter layout".into()));
        }
        if weight_gen.out_dim() != experts.len() {
            return Err(Error::Config(format!(
                "weight generator emits {} logits for {} experts",
                weight_gen.out_dim(),
                experts.len()
            )));
        }
        Ok(ExpertBank { experts, weight_gen })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn param_len(&self) -> usize {
        self.experts[0].len()
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (h, e) in self.experts.iter().enumerate() {
            f(format!("{prefix}.expert.{h}"), e);
        }
        self.weight_gen.visit(&format!("{prefix}.weight_gen"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (h, e) in self.experts.iter_mut().enumerate() {
            f(format!("{prefix}.expert.{h}"), e);
        }
        self.weight_gen.visit_mut(&format!("{prefix}.weight_gen"), f);
    }
}

/// Hypernetwork that emits the full flat parameter vector of a light head.
#[derive(Clone, Debug)]
pub struct GeneratedHead {
    pub generator: Mlp,
    pub param_len: usize,
}

impl GeneratedHead {
    pub fn new(generator: Mlp, param_len: usize) -> Result<Self> {
        if generator.out_dim() != param_len {
            return Err(Error::Config(format!(
                "parameter generator emits {} values for a {}-parameter head",
                generator.out_dim(),
                param_len
            )));
        }
        Ok(GeneratedHead { generator, param_len })
    }
}

/// Temperature-normalized aggregation weights for one embedding.
pub fn generate_weights(bank: &ExpertBank, s: &SemanticEmbedding, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
    }
    if s.dim() != bank.weight_gen.in_dim() {
        return Err(dim_err("generate_weights", &[s.dim()], &[bank.weight_gen.in_dim()]));
    }
    let logits = bank.weight_gen.apply_plain(s.vector())?;
    let mut w = vec![0.0; logits.len()];
    kernels::softmax_temp(&logits, tau, &mut w);
    Tensor::new(vec![w.len()], w)
}

/// Convex combination of the bank's expert parameters.
pub fn aggregate_parameters(bank: &ExpertBank, w: &Tensor) -> Result<Tensor> {
    if w.shape() != [bank.n_experts()] {
        return Err(dim_err("aggregate_parameters", w.shape(), &[bank.n_experts()]));
    }
    let items: Vec<&[f64]> = bank.experts.iter().map(Tensor::data).collect();
    let mut out = vec![0.0; bank.param_len()];
    kernels::weighted_sum(w.data(), &items, &mut out);
    Tensor::new(vec![out.len()], out)
}

/// Full light-head parameter vector generated from an embedding.
pub fn generate_parameters(gen: &GeneratedHead, s: &SemanticEmbedding) -> Result<Tensor> {
    if s.dim() != gen.generator.in_dim() {
        return Err(dim_err("generate_parameters", &[s.dim()], &[gen.generator.in_dim()]));
    }
    let theta = gen.generator.apply_plain(s.vector())?;
    Tensor::new(vec![gen.param_len], theta)
}

// ── CondHead ─────────────────────────────────────────────────────────

/// The full conditioned model: expert banks and parameter generators for
/// both tasks, with separate weight generators per task.
#[derive(Clone, Debug)]
pub struct CondHeadModel {
    pub cfg: CondHeadConfig,
    pub dims: ModelDims,
    pub box_arch: BoxHeadArch,
    pub mask_arch: MaskHeadArch,
    pub light_box: LightBoxArch,
    pub light_mask: LightMaskArch,
    pub box_bank: ExpertBank,
    pub mask_bank: ExpertBank,
    pub box_gen: GeneratedHead,
    pub mask_gen: GeneratedHead,
}

/// Tape handles for every trainable tensor of a [`CondHeadModel`].
pub struct CondHeadVars {
    pub box_experts: Vec<Var>,
    pub box_wg: MlpVars,
    pub box_gen: MlpVars,
    pub mask_experts: Vec<Var>,
    pub mask_wg: MlpVars,
    pub mask_gen: MlpVars,
}

/// Per-category conditioning outputs on a tape.
pub struct CondVars {
    pub box_weights: Var,
    pub mask_weights: Var,
    pub box_theta: Var,
    pub mask_theta: Var,
    pub box_light: Var,
    pub mask_light: Var,
}

/// Per-category conditioning outputs for frozen inference.
#[derive(Clone, Debug)]
pub struct Conditioned {
    pub box_weights: Tensor,
    pub mask_weights: Tensor,
    pub box_theta: Tensor,
    pub mask_theta: Tensor,
    pub box_light: Tensor,
    pub mask_light: Tensor,
}

impl CondHeadModel {
    pub fn init(cfg: &CondHeadConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if dims.embed_dim != cfg.embed_dim {
            return Err(Error::Config(format!(
                "embedding dim mismatch: model {} vs data {}",
                cfg.embed_dim, dims.embed_dim
            )));
        }
        let box_arch = BoxHeadArch {
            feat_dim: dims.feat_dim,
            hidden: cfg.fc_hidden,
        };
        let mask_arch = MaskHeadArch {
            channels: dims.mask_channels,
            hidden: cfg.conv_hidden,
            grid: dims.grid,
        };
        let light_box = LightBoxArch {
            feat_dim: dims.feat_dim,
        };
        let light_mask = LightMaskArch {
            channels: dims.mask_channels,
            grid: dims.grid,
        };
        let mut rng = seeds::rng(seed, seeds::STREAM_INIT, 0);
        let box_experts = (0..cfg.experts).map(|_| box_arch.init(&mut rng)).collect();
        let box_wg = Mlp::init(&mut rng, cfg.embed_dim, cfg.gen_hidden, cfg.experts);
        let box_pg = Mlp::init(&mut rng, cfg.embed_dim, cfg.gen_hidden, light_box.param_len());
        let mask_experts = (0..cfg.experts).map(|_| mask_arch.init(&mut rng)).collect();
        let mask_wg = Mlp::init(&mut rng, cfg.embed_dim, cfg.gen_hidden, cfg.experts);
        let mask_pg = Mlp::init(&mut rng, cfg.embed_dim, cfg.gen_hidden, light_mask.param_len());
        Ok(CondHeadModel {
            cfg: cfg.clone(),
            dims,
            box_arch,
            mask_arch,
            light_box,
            light_mask,
            box_bank: ExpertBank::new(box_experts, box_wg)?,
            mask_bank: ExpertBank::new(mask_experts, mask_wg)?,
            box_gen: GeneratedHead::new(box_pg, light_box.param_len())?,
            mask_gen: GeneratedHead::new(mask_pg, light_mask.param_len())?,
        })
    }

    pub fn leaf_on_tape(&self, tape: &mut Tape) -> CondHeadVars {
        CondHeadVars {
            box_experts: self.box_bank.experts.iter().map(|e| tape.leaf(e.clone())).collect(),
            box_wg: self.box_bank.weight_gen.leaf(tape),
            box_gen: self.box_gen.generator.leaf(tape),
            mask_experts: self.mask_bank.experts.iter().map(|e| tape.leaf(e.clone())).collect(),
            mask_wg: self.mask_bank.weight_gen.leaf(tape),
            mask_gen: self.mask_gen.generator.leaf(tape),
        }
    }

    /// Run the conditioning stage on a tape: aggregation weights, aggregated
    /// parameters, and generated light-head parameters for both tasks.
    pub fn condition_on_tape(
        &self,
        tape: &mut Tape,
        vars: &CondHeadVars,
        s: &SemanticEmbedding,
        tau: f64,
    ) -> Result<CondVars> {
        self.check_embedding(s)?;
        let e = s.dim();
        let sv = tape.constant(Tensor::new(vec![1, e], s.vector().to_vec())?);

        let logits = Mlp::apply_on_tape(tape, vars.box_wg, sv)?;
        let logits = tape.reshape(logits, vec![self.cfg.experts])?;
        let box_weights = tape.softmax_temp(logits, tau)?;
        let box_theta = tape.weighted_sum(box_weights, &vars.box_experts)?;

        let logits = Mlp::apply_on_tape(tape, vars.mask_wg, sv)?;
        let logits = tape.reshape(logits, vec![self.cfg.experts])?;
        let mask_weights = tape.softmax_temp(logits, tau)?;
        let mask_theta = tape.weighted_sum(mask_weights, &vars.mask_experts)?;

        let box_light = Mlp::apply_on_tape(tape, vars.box_gen, sv)?;
        let box_light = tape.reshape(box_light, vec![self.light_box.param_len()])?;
        let mask_light = Mlp::apply_on_tape(tape, vars.mask_gen, sv)?;
        let mask_light = tape.reshape(mask_light, vec![self.light_mask.param_len()])?;

        Ok(CondVars {
            box_weights,
            mask_weights,
            box_theta,
            mask_theta,
            box_light,
            mask_light,
        })
    }

    /// Blended box forward on a tape. `feats` is [n, feat_dim]; the blend
    /// endpoints skip the unused branch entirely so they reproduce the pure
    /// branch bit-for-bit.
    pub fn forward_box_on_tape(&self, tape: &mut Tape, cond: &CondVars, feats: Var) -> Result<Var> {
        let lambda = self.cfg.lambda;
        if lambda == 1.0 {
            return self.box_arch.apply_on_tape(tape, cond.box_theta, feats);
        }
        if lambda == 0.0 {
            return self.light_box.apply_on_tape(tape, cond.box_light, feats);
        }
        let agg = self.box_arch.apply_on_tape(tape, cond.box_theta, feats)?;
        let lit = self.light_box.apply_on_tape(tape, cond.box_light, feats)?;
        let a = tape.scale(agg, lambda)?;
        let b = tape.scale(lit, 1.0 - lambda)?;
        tape.add(a, b)
    }

    /// Blended mask forward on a tape. `v` is [channels, S, S].
    pub fn forward_mask_on_tape(&self, tape: &mut Tape, cond: &CondVars, v: Var) -> Result<Var> {
        let mu = self.cfg.mu;
        if mu == 1.0 {
            return self.mask_arch.apply_on_tape(tape, cond.mask_theta, v);
        }
        if mu == 0.0 {
            return self.light_mask.apply_on_tape(tape, cond.mask_light, v);
        }
        let agg = self.mask_arch.apply_on_tape(tape, cond.mask_theta, v)?;
        let lit = self.light_mask.apply_on_tape(tape, cond.mask_light, v)?;
        let a = tape.scale(agg, mu)?;
        let b = tape.scale(lit, 1.0 - mu)?;
        tape.add(a, b)
    }

    /// Frozen conditioning (once per category, then reused for every ROI of
    /// that category).
    pub fn condition(&self, s: &SemanticEmbedding, tau: f64) -> Result<Conditioned> {
        self.check_embedding(s)?;
        let box_weights = generate_weights(&self.box_bank, s, tau)?;
        let mask_weights = generate_weights(&self.mask_bank, s, tau)?;
        let box_theta = aggregate_parameters(&self.box_bank, &box_weights)?;
        let mask_theta = aggregate_parameters(&self.mask_bank, &mask_weights)?;
        let box_light = generate_parameters(&self.box_gen, s)?;
        let mask_light = generate_parameters(&self.mask_gen, s)?;
        Ok(Conditioned {
            box_weights,
            mask_weights,
            box_theta,
            mask_theta,
            box_light,
            mask_light,
        })
    }

    /// Frozen blended box prediction for a feature batch [n, feat_dim].
    pub fn predict_box(&self, cond: &Conditioned, feats: &Tensor) -> Result<Tensor> {
        let lambda = self.cfg.lambda;
        if lambda == 1.0 {
            return self.box_arch.apply_plain(&cond.box_theta, feats);
        }
        if lambda == 0.0 {
            return self.light_box.apply_plain(&cond.box_light, feats);
        }
        let agg = self.box_arch.apply_plain(&cond.box_theta, feats)?;
        let lit = self.light_box.apply_plain(&cond.box_light, feats)?;
        blend(&agg, &lit, lambda)
    }

    /// Frozen blended mask logits for one sample [channels, S, S] → [S, S].
    pub fn predict_mask(&self, cond: &Conditioned, v: &Tensor) -> Result<Tensor> {
        let mu = self.cfg.mu;
        if mu == 1.0 {
            return self.mask_arch.apply_plain(&cond.mask_theta, v);
        }
        if mu == 0.0 {
            return self.light_mask.apply_plain(&cond.mask_light, v);
        }
        let agg = self.mask_arch.apply_plain(&cond.mask_theta, v)?;
        let lit = self.light_mask.apply_plain(&cond.mask_light, v)?;
        blend(&agg, &lit, mu)
    }

    /// Single-sample blended box prediction from a 1-d feature vector.
    pub fn forward_box(&self, s: &SemanticEmbedding, feat: &[f64], tau: f64) -> Result<BoxDelta> {
        let cond = self.condition(s, tau)?;
        let feats = Tensor::new(vec![1, feat.len()], feat.to_vec())?;
        let out = self.predict_box(&cond, &feats)?;
        Ok(BoxDelta::from_slice(out.data()))
    }

    /// Single-sample blended mask logits.
    pub fn forward_mask(&self, s: &SemanticEmbedding, v: &Tensor, tau: f64) -> Result<Tensor> {
        let cond = self.condition(s, tau)?;
        self.predict_mask(&cond, v)
    }

    fn check_embedding(&self, s: &SemanticEmbedding) -> Result<()> {
        if s.dim() != self.cfg.embed_dim {
            return Err(dim_err("embedding", &[s.dim()], &[self.cfg.embed_dim]));
        }
        Ok(())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.box_bank.visit("box_bank", f);
        self.box_gen.generator.visit("box_gen", f);
        self.mask_bank.visit("mask_bank", f);
        self.mask_gen.generator.visit("mask_gen", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.box_bank.visit_mut("box_bank", f);
        self.box_gen.generator.visit_mut("box_gen", f);
        self.mask_bank.visit_mut("mask_bank", f);
        self.mask_gen.generator.visit_mut("mask_gen", f);
    }
}

fn blend(a: &Tensor, b: &Tensor, w: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(dim_err("blend", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| w * x + (1.0 - w) * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

// ── class-agnostic baseline ──────────────────────────────────────────

/// Single static head pair shared by every category.
#[derive(Clone, Debug)]
pub struct AgnosticModel {
    pub dims: ModelDims,
    pub box_arch: BoxHeadArch,
    pub mask_arch: MaskHeadArch,
    pub box_theta: Tensor,
    pub mask_theta: Tensor,
}

/// Tape handles for an [`AgnosticModel`].
pub struct AgnosticVars {
    pub box_theta: Var,
    pub mask_theta: Var,
}

impl AgnosticModel {
    pub fn init(cfg: &CondHeadConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let box_arch = BoxHeadArch {
            feat_dim: dims.feat_dim,
            hidden: cfg.fc_hidden,
        };
        let mask_arch = MaskHeadArch {
            channels: dims.mask_channels,
            hidden: cfg.conv_hidden,
            grid: dims.grid,
        };
        let mut rng = seeds::rng(seed, seeds::STREAM_INIT, 1);
        Ok(AgnosticModel {
            dims,
            box_arch,
            mask_arch,
            box_theta: box_arch.init(&mut rng),
            mask_theta: mask_arch.init(&mut rng),
        })
    }

    pub fn leaf_on_tape(&self, tape: &mut Tape) -> AgnosticVars {
        AgnosticVars {
            box_theta: tape.leaf(self.box_theta.clone()),
            mask_theta: tape.leaf(self.mask_theta.clone()),
        }
    }

    pub fn predict_box(&self, feats: &Tensor) -> Result<Tensor> {
        self.box_arch.apply_plain(&self.box_theta, feats)
    }

    pub fn predict_mask(&self, v: &Tensor) -> Result<Tensor> {
        self.mask_arch.apply_plain(&self.mask_theta, v)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("box_head".into(), &self.box_theta);
        f("mask_head".into(), &self.mask_theta);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("box_head".into(), &mut self.box_theta);
        f("mask_head".into(), &mut self.mask_theta);
    }
}

// ── naive class-wise transfer baseline ───────────────────────────────

/// One independently trained head pair for a single base category.
#[derive(Clone, Debug)]
pub struct ClassWiseHead {
    pub category: u32,
    pub embedding: Vec<f64>,
    pub box_theta: Tensor,
    pub mask_theta: Tensor,
}

/// Per-base-category heads routed by embedding cosine similarity.
#[derive(Clone, Debug)]
pub struct ClassWiseModel {
    pub dims: ModelDims,
    pub box_arch: BoxHeadArch,
    pub mask_arch: MaskHeadArch,
    /// Sorted by ascending category id; ties in routing resolve to the
    /// lowest id.
    pub heads: Vec<ClassWiseHead>,
}

impl ClassWiseModel {
    pub fn new(
        cfg: &CondHeadConfig,
        dims: ModelDims,
        mut heads: Vec<ClassWiseHead>,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Config("class-wise model needs at least one head".into()));
        }
        heads.sort_by_key(|h| h.category);
        Ok(ClassWiseModel {
            dims,
            box_arch: BoxHeadArch {
                feat_dim: dims.feat_dim,
                hidden: cfg.fc_hidden,
            },
            mask_arch: MaskHeadArch {
                channels: dims.mask_channels,
                hidden: cfg.conv_hidden,
                grid: dims.grid,
            },
            heads,
        })
    }

    /// Route a target embedding to the base head with the highest cosine
    /// similarity; ties break toward the lowest category id.
    pub fn select(&self, s: &SemanticEmbedding) -> Result<&ClassWiseHead> {
        if self.heads.is_empty() {
            return Err(Error::Config("no class-wise heads available".into()));
        }
        let mut best = &self.heads[0];
        let mut best_cos = kernels::cosine(s.vector(), &self.heads[0].embedding);
        for head in &self.heads[1..] {
            let c = kernels::cosine(s.vector(), &head.embedding);
            if c > best_cos {
                best = head;
                best_cos = c;
            }
        }
        Ok(best)
    }

    pub fn predict_box(&self, s: &SemanticEmbedding, feats: &Tensor) -> Result<Tensor> {
        let head = self.select(s)?;
        self.box_arch.apply_plain(&head.box_theta, feats)
    }

    pub fn predict_mask(&self, s: &SemanticEmbedding, v: &Tensor) -> Result<Tensor> {
        let head = self.select(s)?;
        self.mask_arch.apply_plain(&head.mask_theta, v)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for h in &self.heads {
            f(format!("cat{}.box_head", h.category), &h.box_theta);
            f(format!("cat{}.mask_head", h.category), &h.mask_theta);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for h in &mut self.heads {
            f(format!("cat{}.box_head", h.category), &mut h.box_theta);
            f(format!("cat{}.mask_head", h.category), &mut h.mask_theta);
        }
    }
}

/// Single-sample class-wise transfer: route by cosine, then evaluate the
/// selected base head.
pub fn classwise_transfer(
    model: &ClassWiseModel,
    s: &SemanticEmbedding,
    feat: &[f64],
) -> Result<BoxDelta> {
    let feats = Tensor::new(vec![1, feat.len()], feat.to_vec())?;
    let out = model.predict_box(s, &feats)?;
    Ok(BoxDelta::from_slice(out.data()))
}

// ── variant dispatch ─────────────────────────────────────────────────

/// A trained (or initialized) model of any variant.
#[derive(Clone, Debug)]
pub enum Model {
    Agnostic(AgnosticModel),
    ClassWise(ClassWiseModel),
    CondHead(CondHeadModel),
}

impl Model {
    pub fn variant(&self) -> Variant {
        match self {
            Model::Agnostic(_) => Variant::Agnostic,
            Model::ClassWise(_) => Variant::ClassWise,
            Model::CondHead(_) => Variant::CondHead,
        }
    }

    pub fn dims(&self) -> ModelDims {
        match self {
            Model::Agnostic(m) => m.dims,
            Model::ClassWise(m) => m.dims,
            Model::CondHead(m) => m.dims,
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            Model::Agnostic(m) => m.visit_params(f),
            Model::ClassWise(m) => m.visit_params(f),
            Model::CondHead(m) => m.visit_params(f),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Model::Agnostic(m) => m.visit_params_mut(f),
            Model::ClassWise(m) => m.visit_params_mut(f),
            Model::CondHead(m) => m.visit_params_mut(f),
        }
    }

    pub fn as_condhead(&self) -> Result<&CondHeadModel> {
        match self {
            Model::CondHead(m) => Ok(m),
            other => Err(Error::Config(format!(
                "operation requires a condhead model, got {}",
                other.variant()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            feat_dim: 5,
            mask_channels: 3,
            grid: 7,
            embed_dim: 6,
        }
    }

    fn tiny_cfg() -> CondHeadConfig {
        CondHeadConfig {
            experts: 3,
            embed_dim: 6,
            fc_hidden: 8,
            conv_hidden: 4,
            gen_hidden: 8,
            ..CondHeadConfig::default()
        }
    }

    fn rand_embedding(rng: &mut ChaCha8Rng, dim: usize, cat: u32) -> SemanticEmbedding {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SemanticEmbedding::new(cat, v).unwrap()
    }

    #[test]
    fn zeroed_final_layer_yields_uniform_weights() {
        let mut model = CondHeadModel::init(&tiny_cfg(), tiny_dims(), 7).unwrap();
        let h = model.cfg.experts;
        model.box_bank.weight_gen.w2 = Tensor::zeros(vec![model.cfg.gen_hidden, h]).with_grad();
        model.box_bank.weight_gen.b2 = Tensor::zeros(vec![h]).with_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = rand_embedding(&mut rng, 6, 0);
        let w = generate_weights(&model.box_bank, &s, 1.0).unwrap();
        for &v in w.data() {
            assert_eq!(v, 1.0 / h as f64);
        }
    }

    #[test]
    fn single_expert_weights_are_exactly_one() {
        let cfg = CondHeadConfig {
            experts: 1,
            ..tiny_cfg()
        };
        let model = CondHeadModel::init(&cfg, tiny_dims(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = rand_embedding(&mut rng, 6, 0);
        let w = generate_weights(&model.box_bank, &s, 5.0).unwrap();
        assert_eq!(w.data(), &[1.0]);
        let theta = aggregate_parameters(&model.box_bank, &w).unwrap();
        assert_eq!(theta.data(), model.box_bank.experts[0].data());
    }

    #[test]
    fn hand_evaluated_tiny_weight_generator() {
        // E=2, hidden=2, H=2 with hand-set parameters; oracle is scalar
        // evaluation of the two-layer net followed by the softmax formula.
        let w1 = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let b1 = Tensor::from_vec(vec![0.1, -0.2]);
        let w2 = Tensor::new(vec![2, 2], vec![0.3, 0.7, -0.4, 0.2]).unwrap();
        let b2 = Tensor::from_vec(vec![0.0, 0.5]);
        let gen = Mlp {
            w1: w1.clone(),
            b1: b1.clone(),
            w2: w2.clone(),
            b2: b2.clone(),
        };
        let experts = vec![Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![2.0])];
        let bank = ExpertBank::new(experts, gen).unwrap();
        let s = SemanticEmbedding::new(0, vec![1.0, 0.0]).unwrap();

        // hand evaluation with s = (1, 0)
        let h1 = (1.0_f64 * 1.0 + 0.0 * 0.5 + 0.1).max(0.0); // 1.1
        let h2 = (1.0_f64 * -1.0 + 0.0 * 2.0 - 0.2).max(0.0); // 0.0
        let z1 = h1 * 0.3 + h2 * -0.4; // 0.33
        let z2 = h1 * 0.7 + h2 * 0.2 + 0.5; // 1.27
        let tau = 2.0;
        let e1 = ((z1 - z2.max(z1)) / tau).exp();
        let e2 = ((z2 - z2.max(z1)) / tau).exp();
        let expect = [e1 / (e1 + e2), e2 / (e1 + e2)];

        let w = generate_weights(&bank, &s, tau).unwrap();
        assert!((w.data()[0] - expect[0]).abs() < 1e-15);
        assert!((w.data()[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn aggregation_midpoint_and_convex_hull() {
        let gen = Mlp::init(&mut ChaCha8Rng::seed_from_u64(3), 4, 4, 2);
        let bank = ExpertBank::new(
            vec![Tensor::zeros(vec![6]), Tensor::from_vec(vec![1.0; 6])],
            gen,
        )
        .unwrap();
        let w = Tensor::from_vec(vec![0.5, 0.5]);
        let theta = aggregate_parameters(&bank, &w).unwrap();
        assert!(theta.data().iter().all(|&v| v == 0.5));

        // fuzz: aggregated coordinates stay inside the expert envelope
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let experts: Vec<Tensor> = (0..4)
                .map(|_| {
                    Tensor::from_vec((0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
                })
                .collect();
            let gen = Mlp::init(&mut rng, 4, 4, 4);
            let bank = ExpertBank::new(experts.clone(), gen).unwrap();
            let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut wv = vec![0.0; 4];
            kernels::softmax_temp(&logits, 1.0, &mut wv);
            let w = Tensor::from_vec(wv);
            let theta = aggregate_parameters(&bank, &w).unwrap();
            for i in 0..5 {
                let lo = experts.iter().map(|e| e.data()[i]).fold(f64::MAX, f64::min);
                let hi = experts.iter().map(|e| e.data()[i]).fold(f64::MIN, f64::max);
                assert!(theta.data()[i] >= lo - 1e-12 && theta.data()[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn generated_parameters_deterministic_and_zeroable() {
        let mut model = CondHeadModel::init(&tiny_cfg(), tiny_dims(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = rand_embedding(&mut rng, 6, 1);
        let a = generate_parameters(&model.box_gen, &s).unwrap();
        let b = generate_parameters(&model.box_gen, &s).unwrap();
        assert_eq!(a.data(), b.data());

        let p = model.box_gen.param_len;
        model.box_gen.generator.w2 = Tensor::zeros(vec![model.cfg.gen_hidden, p]).with_grad();
        model.box_gen.generator.b2 = Tensor::zeros(vec![p]).with_grad();
        let z = generate_parameters(&model.box_gen, &s).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let feats = Tensor::new(vec![1, 5], vec![1.0; 5]).unwrap();
        let out = model.light_box.apply_plain(&z, &feats).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blend_endpoints_reproduce_pure_branches_bitwise() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = rand_embedding(&mut rng, 6, 2);
        let feats = Tensor::new(vec![2, 5], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let v = Tensor::new(
            vec![3, 7, 7],
            (0..147).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        for (lambda, mu) in [(1.0, 1.0), (0.0, 0.0)] {
            let cfg = CondHeadConfig {
                lambda,
                mu,
                ..tiny_cfg()
            };
            let model = CondHeadModel::init(&cfg, dims, 9).unwrap();
            let cond = model.condition(&s, 1.0).unwrap();
            let blended = model.predict_box(&cond, &feats).unwrap();
            let pure = if lambda == 1.0 {
                model.box_arch.apply_plain(&cond.box_theta, &feats).unwrap()
            } else {
                model.light_box.apply_plain(&cond.box_light, &feats).unwrap()
            };
            assert_eq!(blended.data(), pure.data());

            let blended = model.predict_mask(&cond, &v).unwrap();
            let pure = if mu == 1.0 {
                model.mask_arch.apply_plain(&cond.mask_theta, &v).unwrap()
            } else {
                model.light_mask.apply_plain(&cond.mask_light, &v).unwrap()
            };
            assert_eq!(blended.data(), pure.data());
        }

        // interior blend equals the elementwise combination of the branches
        let model = CondHeadModel::init(&tiny_cfg(), dims, 9).unwrap();
        let cond = model.condition(&s, 1.0).unwrap();
        let agg = model.box_arch.apply_plain(&cond.box_theta, &feats).unwrap();
        let lit = model.light_box.apply_plain(&cond.box_light, &feats).unwrap();
        let blended = model.predict_box(&cond, &feats).unwrap();
        for i in 0..blended.len() {
            let expect = 0.6 * agg.data()[i] + 0.4 * lit.data()[i];
            assert_eq!(blended.data()[i], expect);
        }
    }

    #[test]
    fn agnostic_is_category_free_and_matches_single_expert_condhead() {
        let dims = tiny_dims();
        let cfg = CondHeadConfig {
            experts: 1,
            lambda: 1.0,
            mu: 1.0,
            ..tiny_cfg()
        };
        let agnostic = AgnosticModel::init(&cfg, dims, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let feats = Tensor::new(vec![1, 5], (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();

        // zero parameters → zero deltas
        let mut zeroed = agnostic.clone();
        zeroed.box_theta = Tensor::zeros(vec![zeroed.box_arch.param_len()]);
        assert!(zeroed.predict_box(&feats).unwrap().data().iter().all(|&v| v == 0.0));

        // output independent of the category
        let y = agnostic.predict_box(&feats).unwrap();

        // copy the agnostic parameters into a one-expert bank: identical output
        let mut ch = CondHeadModel::init(&cfg, dims, 13).unwrap();
        ch.box_bank.experts[0] = agnostic.box_theta.clone();
        ch.mask_bank.experts[0] = agnostic.mask_theta.clone();
        for cat in 0..3 {
            let s = rand_embedding(&mut rng, 6, cat);
            let cond = ch.condition(&s, 1.0).unwrap();
            let z = ch.predict_box(&cond, &feats).unwrap();
            assert_eq!(z.data(), y.data());
        }
    }

    #[test]
    fn classwise_routing_follows_cosine() {
        let dims = tiny_dims();
        let cfg = tiny_cfg();
        let arch = BoxHeadArch {
            feat_dim: 5,
            hidden: 8,
        };
        let march = MaskHeadArch {
            channels: 3,
            hidden: 4,
            grid: 7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mk_head = |cat: u32, emb: Vec<f64>, rng: &mut ChaCha8Rng| ClassWiseHead {
            category: cat,
            embedding: SemanticEmbedding::new(cat, emb).unwrap().vector().to_vec(),
            box_theta: arch.init(rng),
            mask_theta: march.init(rng),
        };
        let e0 = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let e1 = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let e2 = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let model = ClassWiseModel::new(
            &cfg,
            dims,
            vec![
                mk_head(0, e0.clone(), &mut rng),
                mk_head(1, e1, &mut rng),
                mk_head(2, e2, &mut rng),
            ],
        )
        .unwrap();

        // exact match → cosine 1
        let s = SemanticEmbedding::new(9, e0).unwrap();
        assert_eq!(model.select(&s).unwrap().category, 0);

        // orthogonal to all but one
        let s = SemanticEmbedding::new(9, vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(model.select(&s).unwrap().category, 2);

        // known angles: closest to e1 by dot-product oracle
        let q = vec![0.3, 0.9, 0.2, 0.0, 0.0, 0.0];
        let s = SemanticEmbedding::new(9, q.clone()).unwrap();
        let cosines: Vec<f64> = model
            .heads
            .iter()
            .map(|h| kernels::cosine(&q, &h.embedding))
            .collect();
        let argmax = cosines
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0 as u32;
        assert_eq!(model.select(&s).unwrap().category, argmax);

        // invariance to positive rescaling of the target embedding
        let scaled = SemanticEmbedding::new(9, q.iter().map(|&v| 37.0 * v).collect()).unwrap();
        assert_eq!(
            model.select(&scaled).unwrap().category,
            model.select(&s).unwrap().category
        );
    }

    #[test]
    fn expert_permutation_equivariance_is_bit_exact() {
        let dims = tiny_dims();
        let cfg = tiny_cfg();
        let model = CondHeadModel::init(&cfg, dims, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let s = rand_embedding(&mut rng, 6, 5);
        let feats = Tensor::new(vec![2, 5], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let cond = model.condition(&s, 1.3).unwrap();
        let base = model.predict_box(&cond, &feats).unwrap();

        // permute experts and the matching output columns of the box weight
        // generator's final layer
        let perm = [2usize, 0, 1];
        let mut permuted = model.clone();
        permuted.box_bank.experts = perm
            .iter()
            .map(|&i| model.box_bank.experts[i].clone())
            .collect();
        let h = cfg.experts;
        let hidden = cfg.gen_hidden;
        let old_w2 = model.box_bank.weight_gen.w2.data();
        let old_b2 = model.box_bank.weight_gen.b2.data();
        let mut new_w2 = vec![0.0; hidden * h];
        let mut new_b2 = vec![0.0; h];
        for (new_col, &old_col) in perm.iter().enumerate() {
            for r in 0..hidden {
                new_w2[r * h + new_col] = old_w2[r * h + old_col];
            }
            new_b2[new_col] = old_b2[old_col];
        }
        permuted.box_bank.weight_gen.w2 = Tensor::new(vec![hidden, h], new_w2).unwrap().with_grad();
        permuted.box_bank.weight_gen.b2 = Tensor::from_vec(new_b2).with_grad();

        let cond_p = permuted.condition(&s, 1.3).unwrap();
        let out = permuted.predict_box(&cond_p, &feats).unwrap();
        assert_eq!(out.data(), base.data());
        assert_eq!(cond_p.box_theta.data(), cond.box_theta.data());
    }

    #[test]
    fn extreme_temperature_matches_uniform_aggregate() {
        let dims = tiny_dims();
        let model = CondHeadModel::init(&tiny_cfg(), dims, 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let s = rand_embedding(&mut rng, 6, 3);
        let feats = Tensor::new(vec![1, 5], (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let hot = model.condition(&s, 1e6).unwrap();
        let out_hot = model.predict_box(&hot, &feats).unwrap();

        let h = model.cfg.experts;
        let uniform = Tensor::from_vec(vec![1.0 / h as f64; h]);
        let theta = aggregate_parameters(&model.box_bank, &uniform).unwrap();
        let agg = model.box_arch.apply_plain(&theta, &feats).unwrap();
        let light = model
            .light_box
            .apply_plain(&model.condition(&s, 1.0).unwrap().box_light, &feats)
            .unwrap();
        let expect = blend(&agg, &light, model.cfg.lambda).unwrap();
        for (a, b) in out_hot.data().iter().zip(expect.data().iter()) {
            let err = (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs());
            assert!(err < 1e-6, "τ→∞ mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn tape_forward_matches_frozen_forward_bitwise() {
        let dims = tiny_dims();
        let model = CondHeadModel::init(&tiny_cfg(), dims, 25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let s = rand_embedding(&mut rng, 6, 4);
        let feats = Tensor::new(vec![3, 5], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let v = Tensor::new(
            vec![3, 7, 7],
            (0..147).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        let frozen = model.condition(&s, 2.5).unwrap();
        let plain_box = model.predict_box(&frozen, &feats).unwrap();
        let plain_mask = model.predict_mask(&frozen, &v).unwrap();

        let mut tape = Tape::new();
        let vars = model.leaf_on_tape(&mut tape);
        let cond = model.condition_on_tape(&mut tape, &vars, &s, 2.5).unwrap();
        let fv = tape.constant(feats);
        let vv = tape.constant(v);
        let tape_box = model.forward_box_on_tape(&mut tape, &cond, fv).unwrap();
        let tape_mask = model.forward_mask_on_tape(&mut tape, &cond, vv).unwrap();
        assert_eq!(tape.value(tape_box).data(), plain_box.data());
        assert_eq!(tape.value(tape_mask).data(), plain_mask.data());
    }
}
