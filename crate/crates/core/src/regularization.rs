//! Penalties on PTU weights: l1, l2 and group Lasso.

use ptu_tensor::graph::group_norms;
use ptu_tensor::{Graph, GroupAxis, Tensor, Var};

use crate::error::{config, Result};
use crate::ptu::PtuParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// One group per slice along the leading axis (an output filter).
    FilterWise,
    /// One group per slice along the second axis (an input channel).
    ChannelWise,
    Both,
}

impl Grouping {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "filter_wise" => Ok(Grouping::FilterWise),
            "channel_wise" => Ok(Grouping::ChannelWise),
            "both" => Ok(Grouping::Both),
            other => config(format!(
                "unknown grouping `{other}` (filter_wise, channel_wise, both)"
            )),
        }
    }

    fn axes(self) -> &'static [GroupAxis] {
        match self {
            Grouping::FilterWise => &[GroupAxis::Leading],
            Grouping::ChannelWise => &[GroupAxis::Second],
            Grouping::Both => &[GroupAxis::Leading, GroupAxis::Second],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Grouping::FilterWise => "filter_wise",
            Grouping::ChannelWise => "channel_wise",
            Grouping::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyConfig {
    pub lambda_l1: f32,
    pub lambda_l2: f32,
    pub lambda_group: f32,
    pub grouping: Grouping,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            lambda_l1: 0.0,
            lambda_l2: 0.0,
            lambda_group: 0.0,
            grouping: Grouping::FilterWise,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("reg.l1", self.lambda_l1),
            ("reg.l2", self.lambda_l2),
            ("reg.group", self.lambda_group),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.lambda_l1 == 0.0 && self.lambda_l2 == 0.0 && self.lambda_group == 0.0
    }
}

pub fn l1_penalty(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| (v as f64).abs()).sum()
}

pub fn l2_penalty(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| (v as f64) * (v as f64)).sum()
}

pub fn group_lasso_penalty(t: &Tensor, grouping: Grouping) -> Result<f64> {
    if t.rank() < 2 {
        return config(format!(
            "group Lasso needs a tensor of rank ≥ 2, got shape {:?}",
            t.shape()
        ));
    }
    let t64 = t.cast::<f64>();
    let mut total = 0.0;
    for &axis in grouping.axes() {
        total += group_norms(&t64, axis)?.iter().sum::<f64>();
    }
    Ok(total)
}

/// Number of groups along the leading axis whose norm exceeds `threshold`.
pub fn active_groups(t: &Tensor, axis: GroupAxis, threshold: f64) -> Result<usize> {
    Ok(group_norms(&t.cast::<f64>(), axis)?
        .iter()
        .filter(|&&n| n > threshold)
        .count())
}

/// `λ₁ Σ l1 + λ₂ Σ l2 + λ_g Σ group` over `weights`, on the tape.
pub fn penalty_graph(g: &mut Graph, weights: &[Var], cfg: &PenaltyConfig) -> Result<Option<Var>> {
    cfg.validate()?;
    let mut terms = Vec::new();
    for &w in weights {
        if cfg.lambda_l1 > 0.0 {
            let p = g.abs_sum(w);
            terms.push(g.scale_shift(p, cfg.lambda_l1, 0.0));
        }
        if cfg.lambda_l2 > 0.0 {
            let p = g.square_sum(w);
            terms.push(g.scale_shift(p, cfg.lambda_l2, 0.0));
        }
        if cfg.lambda_group > 0.0 {
            if g.shape(w).len() < 2 {
                return config(format!("group Lasso needs rank ≥ 2, got {:?}", g.shape(w)));
            }
            for &axis in cfg.grouping.axes() {
                let p = g.group_norm_sum(w, axis)?;
                terms.push(g.scale_shift(p, cfg.lambda_group, 0.0));
            }
        }
    }
    let mut it = terms.into_iter();
    let Some(mut total) = it.next() else {
        return Ok(None);
    };
    for t in it {
        total = g.add(total, t)?;
    }
    Ok(Some(total))
}

/// `data_loss` plus the configured penalties on every PTU weight tensor.
/// With every λ zero the data loss node itself is returned.
pub fn total_regularized_loss(
    g: &mut Graph,
    data_loss: Var,
    ptu_weights: &[Var],
    cfg: &PenaltyConfig,
) -> Result<Var> {
    match penalty_graph(g, ptu_weights, cfg)? {
        Some(p) => Ok(g.add(data_loss, p)?),
        None => Ok(data_loss),
    }
}

/// Eager counterpart of [`total_regularized_loss`].
pub fn total_regularized_loss_value(
    data_loss: f64,
    ptus: &[PtuParams],
    cfg: &PenaltyConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mut total = data_loss;
    for t in ptus.iter().flat_map(|p| p.tensors()) {
        if cfg.lambda_l1 > 0.0 {
            total += cfg.lambda_l1 as f64 * l1_penalty(t);
        }
        if cfg.lambda_l2 > 0.0 {
            total += cfg.lambda_l2 as f64 * l2_penalty(t);
        }
        if cfg.lambda_group > 0.0 {
            total += cfg.lambda_group as f64 * group_lasso_penalty(t, cfg.grouping)?;
        }
    }
    Ok(total)
}
