//! Equivalent-model rescaling of paired weight matrices.
//!
//! Each transform multiplies one side of a product by `α` and the other by
//! `1/α`, so the product (and with it the model output) is unchanged while
//! the norms of the two sides are balanced. Tensor-wise variants use one
//! factor per matrix. Channel-wise variants use one factor per paired
//! channel: column `c` of `W_q` with column `c` of `W_k`, and column `j` of
//! `W_v` with row `j` of `W_o`. Under grouped-query attention one key/value
//! channel is shared by `g` query-side channels, so the whole group shares a
//! single factor and the shared channel's norm is matched to the sum of the
//! `g` paired norms.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionLayout, AttentionWeights, LoraPair, ModelError};
use crate::tensor::{l1_norm, l2_norm, matmul, Matrix, TensorError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("plan role {role} does not apply to {target}")]
    RoleMismatch { role: Role, target: &'static str },
    #[error("plan for {role} has {found} channel factors, tensor has {expected} channels")]
    FactorLength { role: Role, expected: usize, found: usize },
    #[error("factor {value} for {role} is not finite and positive")]
    InvalidFactor { role: Role, value: f64 },
    #[error("factors for {left}/{right} multiply to {product}, expected 1")]
    UnpairedFactors { left: Role, right: Role, product: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TransformError>;

/// Norm used to measure the balance of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    L1,
    L2,
}

impl NormKind {
    pub fn of(self, m: &Matrix) -> std::result::Result<f64, TensorError> {
        match self {
            NormKind::L1 => l1_norm(m),
            NormKind::L2 => l2_norm(m),
        }
    }

    fn of_iter(self, values: impl Iterator<Item = f64>) -> f64 {
        match self {
            NormKind::L1 => values.map(f64::abs).sum(),
            NormKind::L2 => values.map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

/// Which tensor a factor applies to. `O` factors scale rows, all others
/// scale columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Q,
    K,
    V,
    O,
    LoraA,
    LoraB,
    First,
    Second,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::LoraA => "lora_a",
            Role::LoraB => "lora_b",
            Role::First => "first",
            Role::Second => "second",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    QkTensor,
    QkChannel,
    VoTensor,
    VoChannel,
    GqaTensor,
    GqaChannel,
    Lora,
    LinearPair,
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Tensor(f64),
    Channel(Vec<f64>),
}

impl Factor {
    pub fn is_identity(&self) -> bool {
        match self {
            Factor::Tensor(a) => *a == 1.0,
            Factor::Channel(v) => v.iter().all(|&a| a == 1.0),
        }
    }

    /// Largest `|log α|` across the factor's entries.
    pub fn max_log_deviation(&self) -> f64 {
        match self {
            Factor::Tensor(a) => a.ln().abs(),
            Factor::Channel(v) => v.iter().fold(0.0, |m, a| m.max(a.ln().abs())),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            Factor::Tensor(a) => std::slice::from_ref(a),
            Factor::Channel(v) => v,
        }
    }

    fn at(&self, i: usize) -> f64 {
        match self {
            Factor::Tensor(a) => *a,
            Factor::Channel(v) => v[i],
        }
    }
}

/// Recorded factors of one rescaling, replayable with [`Rescale::apply_plan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePlan {
    pub strategy: Strategy,
    pub norm: NormKind,
    pub factors: BTreeMap<Role, Factor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Query heads per shared key/value head, for channel pairing checks.
    #[serde(default = "one")]
    pub group_factor: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
}

fn one() -> usize {
    1
}

impl ScalePlan {
    pub fn new(strategy: Strategy, norm: NormKind) -> Self {
        Self {
            strategy,
            norm,
            factors: BTreeMap::new(),
            warnings: Vec::new(),
            group_factor: 1,
            head_dim: None,
        }
    }

    fn tensor_pair(strategy: Strategy, norm: NormKind, left: Role, right: Role, alpha: f64) -> Self {
        let mut plan = Self::new(strategy, norm);
        plan.factors.insert(left, Factor::Tensor(alpha));
        plan.factors.insert(right, Factor::Tensor(1.0 / alpha));
        plan
    }

    pub fn factor(&self, role: Role) -> Option<&Factor> {
        self.factors.get(&role)
    }

    /// Tensor-wise factor for `role`, if the plan has one.
    pub fn scalar(&self, role: Role) -> Option<f64> {
        match self.factors.get(&role) {
            Some(Factor::Tensor(a)) => Some(*a),
            _ => None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.factors.values().all(Factor::is_identity)
    }

    pub fn has_warnings(&self) -> bool {
        !self.warnings.is_empty()
    }

    /// Largest `|log α|` over all factors; 0 for an identity plan.
    pub fn max_log_deviation(&self) -> f64 {
        self.factors.values().fold(0.0, |m, f| m.max(f.max_log_deviation()))
    }

    /// Folds `next` (applied after `self`) into one plan.
    pub fn then(&self, next: &ScalePlan) -> ScalePlan {
        let mut out = self.clone();
        out.strategy = if self.factors.is_empty() { next.strategy } else { Strategy::Composite };
        out.head_dim = out.head_dim.or(next.head_dim);
        out.group_factor = out.group_factor.max(next.group_factor);
        for (role, f) in &next.factors {
            let merged = match out.factors.remove(role) {
                None => f.clone(),
                Some(Factor::Tensor(a)) => match f {
                    Factor::Tensor(b) => Factor::Tensor(a * b),
                    Factor::Channel(v) => Factor::Channel(v.iter().map(|b| a * b).collect()),
                },
                Some(Factor::Channel(u)) => {
                    Factor::Channel(u.iter().enumerate().map(|(i, a)| a * f.at(i)).collect())
                }
            };
            out.factors.insert(*role, merged);
        }
        out.warnings.extend(next.warnings.iter().cloned());
        out
    }

    /// Checks positivity and that paired factors cancel within `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        for (role, f) in &self.factors {
            if let Some(&bad) = f.values().iter().find(|a| !(a.is_finite() && **a > 0.0)) {
                return Err(TransformError::InvalidFactor { role: *role, value: bad });
            }
        }
        let pairs = [
            (Role::Q, Role::K),
            (Role::V, Role::O),
            (Role::LoraA, Role::LoraB),
            (Role::First, Role::Second),
        ];
        for (l, r) in pairs {
            match (self.factors.get(&l), self.factors.get(&r)) {
                (None, None) => {}
                (Some(a), Some(b)) => self.check_pair(l, a, r, b, tol)?,
                _ => {
                    return Err(TransformError::UnpairedFactors {
                        left: l,
                        right: r,
                        product: f64::NAN,
                    })
                }
            }
        }
        Ok(())
    }

    fn check_pair(&self, l: Role, a: &Factor, r: Role, b: &Factor, tol: f64) -> Result<()> {
        let bad = |product: f64| TransformError::UnpairedFactors { left: l, right: r, product };
        let products: Vec<f64> = match (a, b) {
            (Factor::Tensor(x), Factor::Tensor(y)) => vec![x * y],
            _ => {
                // Query-side channel i of head h pairs with shared channel
                // (h / g)·head_dim + i on the key/value side.
                let hd = self.head_dim.ok_or_else(|| bad(f64::NAN))?;
                let g = self.group_factor.max(1);
                let (wide, narrow) = match l {
                    Role::Q => (a, b),
                    _ => (b, a),
                };
                let n = match wide {
                    Factor::Channel(v) => v.len(),
                    Factor::Tensor(_) => match narrow {
                        Factor::Channel(v) => v.len() * g,
                        Factor::Tensor(_) => unreachable!(),
                    },
                };
                (0..n)
                    .map(|c| {
                        let (head, i) = (c / hd, c % hd);
                        wide.at(c) * narrow.at((head / g) * hd + i)
                    })
                    .collect()
            }
        };
        match products.into_iter().find(|p| (p - 1.0).abs() > tol) {
            Some(p) => Err(bad(p)),
            None => Ok(()),
        }
    }
}

/// Per-column norms of `m`.
fn column_norms(m: &Matrix, norm: NormKind) -> Vec<f64> {
    (0..m.cols()).map(|c| norm.of_iter(m.column(c))).collect()
}

fn row_norms(m: &Matrix, norm: NormKind) -> Vec<f64> {
    (0..m.rows()).map(|r| norm.of_iter(m.row(r).iter().copied())).collect()
}

const UNIT_SNAP: f64 = 8.0 * f64::EPSILON;

/// Factor `α` on the left side such that `α·left == ratio·right/α`, or
/// `None` when either side is zero.
fn balance_factor(left: f64, right: f64, ratio: f64) -> Option<f64> {
    if left > 0.0 && right > 0.0 && left.is_finite() && right.is_finite() {
        let alpha = (ratio * right / left).sqrt();
        // Summation-order noise on already balanced pairs snaps to exactly 1.
        Some(if (alpha - 1.0).abs() <= UNIT_SNAP { 1.0 } else { alpha })
    } else {
        None
    }
}

fn scale_columns(m: &Matrix, f: &Factor) -> Matrix {
    match f {
        Factor::Tensor(a) if *a == 1.0 => m.clone(),
        Factor::Tensor(a) => m.scale(*a),
        Factor::Channel(v) => {
            let mut out = m.clone();
            for (c, &a) in v.iter().enumerate() {
                if a != 1.0 {
                    out.scale_column(c, a);
                }
            }
            out
        }
    }
}

fn scale_rows(m: &Matrix, f: &Factor) -> Matrix {
    match f {
        Factor::Tensor(_) => scale_columns(m, f),
        Factor::Channel(v) => {
            let mut out = m.clone();
            for (r, &a) in v.iter().enumerate() {
                if a != 1.0 {
                    out.scale_row(r, a);
                }
            }
            out
        }
    }
}

fn check_len(role: Role, f: &Factor, expected: usize) -> Result<()> {
    match f {
        Factor::Channel(v) if v.len() != expected => Err(TransformError::FactorLength {
            role,
            expected,
            found: v.len(),
        }),
        _ => Ok(()),
    }
}

/// Rescaler parameterized by the balancing norm (L1 by default).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Balancer {
    pub norm: NormKind,
}

impl Balancer {
    pub fn new(norm: NormKind) -> Self {
        Self { norm }
    }

    fn tensor_plan(
        &self,
        strategy: Strategy,
        (left_role, left): (Role, &Matrix),
        (right_role, right): (Role, &Matrix),
        ratio: f64,
    ) -> Result<ScalePlan> {
        let nl = self.norm.of(left)?;
        let nr = self.norm.of(right)?;
        Ok(match balance_factor(nl, nr, ratio) {
            Some(alpha) => ScalePlan::tensor_pair(strategy, self.norm, left_role, right_role, alpha),
            None => {
                let mut plan = ScalePlan::tensor_pair(strategy, self.norm, left_role, right_role, 1.0);
                plan.warnings.push(format!(
                    "zero-norm pair skipped: |{left_role}| = {nl}, |{right_role}| = {nr}"
                ));
                plan
            }
        })
    }

    pub fn qk_tensor_plan(&self, w_q: &Matrix, w_k: &Matrix) -> Result<ScalePlan> {
        self.tensor_plan(Strategy::QkTensor, (Role::Q, w_q), (Role::K, w_k), 1.0)
    }

    pub fn vo_tensor_plan(&self, w_v: &Matrix, w_o: &Matrix) -> Result<ScalePlan> {
        self.tensor_plan(Strategy::VoTensor, (Role::V, w_v), (Role::O, w_o), 1.0)
    }

    /// Group-averaged target `|W_q| == g·|W_k|`.
    pub fn gqa_tensor_plan(&self, w_q: &Matrix, w_k: &Matrix, g: usize) -> Result<ScalePlan> {
        if g == 0 {
            return Err(ModelError::Layout("group factor must be at least 1".into()).into());
        }
        let mut plan = self.tensor_plan(Strategy::GqaTensor, (Role::Q, w_q), (Role::K, w_k), g as f64)?;
        plan.group_factor = g;
        Ok(plan)
    }

    pub fn lora_plan(&self, p: &LoraPair) -> Result<ScalePlan> {
        self.tensor_plan(Strategy::Lora, (Role::LoraA, &p.a), (Role::LoraB, &p.b), 1.0)
    }

    pub fn linear_pair_plan(&self, first: &Matrix, second: &Matrix) -> Result<ScalePlan> {
        self.tensor_plan(Strategy::LinearPair, (Role::First, first), (Role::Second, second), 1.0)
    }

    /// Channel plan pairing query-side channels (columns of `wide`, or rows
    /// when `wide_rows`) with shared channels (columns of `narrow`).
    #[allow(clippy::too_many_arguments)]
    fn channel_plan(
        &self,
        strategy: Strategy,
        (narrow_role, narrow): (Role, &Matrix),
        (wide_role, wide, wide_rows): (Role, &Matrix, bool),
        layout: &AttentionLayout,
    ) -> Result<ScalePlan> {
        layout.validate()?;
        let hd = layout.head_dim;
        let g = layout.group_factor();
        if narrow.cols() != layout.kv_width() {
            return Err(ModelError::TensorShape {
                tensor: "shared projection",
                expected: (narrow.rows(), layout.kv_width()),
                found: narrow.shape(),
            }
            .into());
        }
        let wide_count = if wide_rows { wide.rows() } else { wide.cols() };
        if wide_count != layout.q_width() {
            return Err(ModelError::TensorShape {
                tensor: "query-side projection",
                expected: if wide_rows {
                    (layout.q_width(), wide.cols())
                } else {
                    (wide.rows(), layout.q_width())
                },
                found: wide.shape(),
            }
            .into());
        }
        let narrow_norms = column_norms(narrow, self.norm);
        let wide_norms = if wide_rows {
            row_norms(wide, self.norm)
        } else {
            column_norms(wide, self.norm)
        };

        let mut narrow_f = vec![1.0; narrow_norms.len()];
        let mut wide_f = vec![1.0; wide_norms.len()];
        let mut warnings = Vec::new();
        for kv in 0..layout.n_kv_heads {
            for i in 0..hd {
                let shared = kv * hd + i;
                let members: Vec<usize> = (0..g).map(|j| (kv * g + j) * hd + i).collect();
                let group_norm: f64 = members.iter().map(|&c| wide_norms[c]).sum();
                // Shared side scaled by β, each member by 1/β, so that
                // β·|shared| == Σ|member| / β.
                match balance_factor(narrow_norms[shared], group_norm, 1.0) {
                    Some(beta) => {
                        narrow_f[shared] = beta;
                        for c in members {
                            wide_f[c] = 1.0 / beta;
                        }
                    }
                    None => warnings.push(format!(
                        "zero-norm channel {i} of kv head {kv} skipped: |{narrow_role}| = {}, sum |{wide_role}| = {group_norm}",
                        narrow_norms[shared]
                    )),
                }
            }
        }
        let mut plan = ScalePlan::new(strategy, self.norm);
        plan.factors.insert(narrow_role, Factor::Channel(narrow_f));
        plan.factors.insert(wide_role, Factor::Channel(wide_f));
        plan.warnings = warnings;
        plan.group_factor = g;
        plan.head_dim = Some(hd);
        Ok(plan)
    }

    pub fn qk_channel_plan(&self, w_q: &Matrix, w_k: &Matrix, layout: &AttentionLayout) -> Result<ScalePlan> {
        let strategy = if layout.group_factor() > 1 {
            Strategy::GqaChannel
        } else {
            Strategy::QkChannel
        };
        self.channel_plan(strategy, (Role::K, w_k), (Role::Q, w_q, false), layout)
    }

    pub fn vo_channel_plan(&self, w_v: &Matrix, w_o: &Matrix, layout: &AttentionLayout) -> Result<ScalePlan> {
        self.channel_plan(Strategy::VoChannel, (Role::V, w_v), (Role::O, w_o, true), layout)
    }

    pub fn qk_tensor_scale(&self, w_q: &Matrix, w_k: &Matrix) -> Result<(Matrix, Matrix, ScalePlan)> {
        let plan = self.qk_tensor_plan(w_q, w_k)?;
        Ok((scale_columns(w_q, &plan.factors[&Role::Q]), scale_columns(w_k, &plan.factors[&Role::K]), plan))
    }

    pub fn vo_tensor_scale(&self, w_v: &Matrix, w_o: &Matrix) -> Result<(Matrix, Matrix, ScalePlan)> {
        let plan = self.vo_tensor_plan(w_v, w_o)?;
        Ok((scale_columns(w_v, &plan.factors[&Role::V]), scale_rows(w_o, &plan.factors[&Role::O]), plan))
    }

    pub fn gqa_tensor_scale(&self, w_q: &Matrix, w_k: &Matrix, g: usize) -> Result<(Matrix, Matrix, ScalePlan)> {
        let plan = self.gqa_tensor_plan(w_q, w_k, g)?;
        Ok((scale_columns(w_q, &plan.factors[&Role::Q]), scale_columns(w_k, &plan.factors[&Role::K]), plan))
    }

    pub fn qk_channel_scale(
        &self,
        w_q: &Matrix,
        w_k: &Matrix,
        layout: &AttentionLayout,
    ) -> Result<(Matrix, Matrix, ScalePlan)> {
        let plan = self.qk_channel_plan(w_q, w_k, layout)?;
        Ok((scale_columns(w_q, &plan.factors[&Role::Q]), scale_columns(w_k, &plan.factors[&Role::K]), plan))
    }

    pub fn vo_channel_scale(
        &self,
        w_v: &Matrix,
        w_o: &Matrix,
        layout: &AttentionLayout,
    ) -> Result<(Matrix, Matrix, ScalePlan)> {
        let plan = self.vo_channel_plan(w_v, w_o, layout)?;
        Ok((scale_columns(w_v, &plan.factors[&Role::V]), scale_rows(w_o, &plan.factors[&Role::O]), plan))
    }

    pub fn lora_scale(&self, p: &LoraPair) -> Result<(LoraPair, ScalePlan)> {
        let plan = self.lora_plan(p)?;
        Ok((p.apply_plan(&plan)?, plan))
    }

    pub fn linear_pair_scale(
        &self,
        first: &Matrix,
        second: &Matrix,
        _activation: Activation,
    ) -> Result<(Matrix, Matrix, ScalePlan)> {
        // Every `Activation` is positively homogeneous, so any α > 0 is valid.
        let plan = self.linear_pair_plan(first, second)?;
        Ok((
            scale_columns(first, &plan.factors[&Role::First]),
            scale_columns(second, &plan.factors[&Role::Second]),
            plan,
        ))
    }

    /// Plans one strategy for a whole attention block. `QkTensor` uses the
    /// group-averaged target when the layout has `g > 1`.
    pub fn attention_plan(
        &self,
        w: &AttentionWeights,
        layout: &AttentionLayout,
        strategy: Strategy,
    ) -> Result<ScalePlan> {
        w.check(layout)?;
        let g = layout.group_factor();
        match strategy {
            Strategy::GqaTensor => self.gqa_tensor_plan(&w.w_q, &w.w_k, g),
            Strategy::QkTensor if g > 1 => self.gqa_tensor_plan(&w.w_q, &w.w_k, g),
            Strategy::QkTensor => self.qk_tensor_plan(&w.w_q, &w.w_k),
            Strategy::QkChannel | Strategy::GqaChannel => self.qk_channel_plan(&w.w_q, &w.w_k, layout),
            Strategy::VoTensor => self.vo_tensor_plan(&w.w_v, &w.w_o),
            Strategy::VoChannel => self.vo_channel_plan(&w.w_v, &w.w_o, layout),
            Strategy::Lora | Strategy::LinearPair | Strategy::Composite => Err(TransformError::RoleMismatch {
                role: Role::First,
                target: "attention weights",
            }),
        }
    }

    pub fn transform_attention(
        &self,
        w: &AttentionWeights,
        layout: &AttentionLayout,
        strategy: Strategy,
    ) -> Result<(AttentionWeights, ScalePlan)> {
        let plan = self.attention_plan(w, layout, strategy)?;
        Ok((w.apply_plan(&plan)?, plan))
    }
}

pub fn qk_tensor_scale(w_q: &Matrix, w_k: &Matrix) -> Result<(Matrix, Matrix, ScalePlan)> {
    Balancer::default().qk_tensor_scale(w_q, w_k)
}

pub fn vo_tensor_scale(w_v: &Matrix, w_o: &Matrix) -> Result<(Matrix, Matrix, ScalePlan)> {
    Balancer::default().vo_tensor_scale(w_v, w_o)
}

pub fn gqa_tensor_scale(w_q: &Matrix, w_k: &Matrix, g: usize) -> Result<(Matrix, Matrix, ScalePlan)> {
    Balancer::default().gqa_tensor_scale(w_q, w_k, g)
}

pub fn qk_channel_scale(w_q: &Matrix, w_k: &Matrix, layout: &AttentionLayout) -> Result<(Matrix, Matrix, ScalePlan)> {
    Balancer::default().qk_channel_scale(w_q, w_k, layout)
}

pub fn vo_channel_scale(w_v: &Matrix, w_o: &Matrix, layout: &AttentionLayout) -> Result<(Matrix, Matrix, ScalePlan)> {
    Balancer::default().vo_channel_scale(w_v, w_o, layout)
}

pub fn lora_scale(p: &LoraPair) -> Result<(LoraPair, ScalePlan)> {
    Balancer::default().lora_scale(p)
}

pub fn linear_pair_scale(
    first: &Matrix,
    second: &Matrix,
    activation: Activation,
) -> Result<(Matrix, Matrix, ScalePlan)> {
    Balancer::default().linear_pair_scale(first, second, activation)
}

/// Positively homogeneous activations: `act(αz) == α·act(z)` for `α > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(slope) => {
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            }
        }
    }
}

/// Two consecutive linear layers `act(x·first)·second`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPair {
    pub first: Matrix,
    pub second: Matrix,
    pub activation: Activation,
}

impl LinearPair {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let hidden = matmul(x, &self.first)?.map(|z| self.activation.apply(z));
        Ok(matmul(&hidden, &self.second)?)
    }
}

/// Replays a recorded [`ScalePlan`] on a weight set.
pub trait Rescale: Sized {
    fn apply_plan(&self, plan: &ScalePlan) -> Result<Self>;
}

impl Rescale for AttentionWeights {
    fn apply_plan(&self, plan: &ScalePlan) -> Result<Self> {
        plan.check(1e-9)?;
        let mut out = self.clone();
        for (role, f) in &plan.factors {
            match role {
                Role::Q => {
                    check_len(*role, f, self.w_q.cols())?;
                    out.w_q = scale_columns(&self.w_q, f);
                    out.b_q = self.b_q.as_ref().map(|b| scale_columns(b, f));
                }
                Role::K => {
                    check_len(*role, f, self.w_k.cols())?;
                    out.w_k = scale_columns(&self.w_k, f);
                    out.b_k = self.b_k.as_ref().map(|b| scale_columns(b, f));
                }
                Role::V => {
                    check_len(*role, f, self.w_v.cols())?;
                    out.w_v = scale_columns(&self.w_v, f);
                    out.b_v = self.b_v.as_ref().map(|b| scale_columns(b, f));
                }
                // The output bias sits after W_o and is unaffected.
                Role::O => {
                    check_len(*role, f, self.w_o.rows())?;
                    out.w_o = scale_rows(&self.w_o, f);
                }
                other => {
                    return Err(TransformError::RoleMismatch {
                        role: *other,
                        target: "attention weights",
                    })
                }
            }
        }
        Ok(out)
    }
}

impl Rescale for LoraPair {
    fn apply_plan(&self, plan: &ScalePlan) -> Result<Self> {
        plan.check(1e-9)?;
        let mut out = self.clone();
        for (role, f) in &plan.factors {
            match role {
                Role::LoraA => {
                    check_len(*role, f, self.a.cols())?;
                    out.a = scale_columns(&self.a, f);
                }
                Role::LoraB => {
                    check_len(*role, f, self.b.rows())?;
                    out.b = scale_rows(&self.b, f);
                }
                other => {
                    return Err(TransformError::RoleMismatch {
                        role: *other,
                        target: "lora pair",
                    })
                }
            }
        }
        Ok(out)
    }
}

impl Rescale for LinearPair {
    fn apply_plan(&self, plan: &ScalePlan) -> Result<Self> {
        plan.check(1e-9)?;
        let mut out = self.clone();
        for (role, f) in &plan.factors {
            match role {
                Role::First => {
                    check_len(*role, f, self.first.cols())?;
                    out.first = scale_columns(&self.first, f);
                }
                Role::Second => {
                    check_len(*role, f, self.second.rows())?;
                    out.second = scale_rows(&self.second, f);
                }
                other => {
                    return Err(TransformError::RoleMismatch {
                        role: *other,
                        target: "linear pair",
                    })
                }
            }
        }
        Ok(out)
    }
}
