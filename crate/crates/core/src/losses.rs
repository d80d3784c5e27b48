//! Training objectives. Every function builds on the autodiff tape so the same
//! code yields values for logging and gradients for optimization.
//!
//! All L1 terms are means over every element of the full frame.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::{dilate_mask, ShadowMask};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Weights of the generator-side terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gan: f64,
    pub iden: f64,
    pub rem: f64,
    pub full: f64,
    pub area: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gan: 1.0,
            iden: 5.0,
            rem: 1.0,
            full: 1.0,
            area: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.gan, self.iden, self.rem, self.full, self.area]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "weights.{name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

const TERM_NAMES: [&str; 5] = ["gan", "iden", "rem", "full", "area"];

/// Unweighted loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub gan: f64,
    pub iden: f64,
    pub rem: f64,
    pub full: f64,
    pub area: f64,
    pub dis: f64,
}

/// Per-step record written to the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan: f64,
    pub iden: f64,
    pub rem: f64,
    pub full: f64,
    pub area: f64,
    /// Weighted sum of the five generator-side terms.
    pub total: f64,
    /// Discriminator objective; not part of `total`.
    pub dis: f64,
}

/// Combine the terms with `weights`. Fails on the first non-finite term.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossBreakdown> {
    let values = [terms.gan, terms.iden, terms.rem, terms.full, terms.area, terms.dis];
    let names = ["gan", "iden", "rem", "full", "area", "dis"];
    for (name, v) in names.into_iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::Diverged { term: name, value: v });
        }
    }
    let total = weights
        .as_array()
        .iter()
        .zip(&values[..5])
        .map(|(w, v)| w * v)
        .sum::<f64>();
    if !total.is_finite() {
        return Err(Error::Diverged { term: "total", value: total });
    }
    Ok(LossBreakdown {
        gan: terms.gan,
        iden: terms.iden,
        rem: terms.rem,
        full: terms.full,
        area: terms.area,
        total,
        dis: terms.dis,
    })
}

/// Weighted sum on the tape, in the order gan, iden, rem, full, area.
pub fn weighted_sum<'t, T: Scalar>(terms: [Var<'t, T>; 5], weights: &LossWeights) -> Var<'t, T> {
    let w = weights.as_array();
    let mut acc = terms[0].scale(T::of(w[0]));
    for (t, &wi) in terms.iter().zip(&w).skip(1) {
        acc = acc.add(t.scale(T::of(wi)));
    }
    acc
}

/// Least-squares generator objective: ½·mean((s − 1)²).
pub fn loss_gen<'t, T: Scalar>(score_fake: Var<'t, T>) -> Var<'t, T> {
    score_fake.add_scalar(-T::one()).square().mean().scale(T::of(0.5))
}

/// Least-squares discriminator objective: ½·mean(f²) + ½·mean((r − 1)²).
pub fn loss_dis<'t, T: Scalar>(score_fake: Var<'t, T>, score_real: Var<'t, T>) -> Var<'t, T> {
    let half = T::of(0.5);
    score_fake
        .square()
        .mean()
        .scale(half)
        .add(score_real.add_scalar(-T::one()).square().mean().scale(half))
}

fn l1<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    a.sub(b).abs().mean()
}

/// The generator applied to a real shadow region should return it unchanged.
pub fn loss_identity<'t, T: Scalar>(generated: Var<'t, T>, shadow_region: Var<'t, T>) -> Var<'t, T> {
    l1(generated, shadow_region)
}

/// Removing the pseudo shadow should give back the original lit region.
pub fn loss_removal<'t, T: Scalar>(removed: Var<'t, T>, lit_region: Var<'t, T>) -> Var<'t, T> {
    l1(removed, lit_region)
}

/// The refined image should match the input image.
pub fn loss_full<'t, T: Scalar>(refined: Var<'t, T>, input: Var<'t, T>) -> Var<'t, T> {
    l1(refined, input)
}

/// L1 between refined and input weighted by the mask dilated with a `tau`×`tau`
/// square, normalized by the full pixel count.
pub fn loss_area<'t, T: Scalar>(refined: Var<'t, T>, input: Var<'t, T>, mask: &ShadowMask, tau: usize) -> Var<'t, T> {
    loss_area_weighted(refined, input, &dilate_mask(mask, tau))
}

/// [`loss_area`] with the dilated mask already computed.
pub fn loss_area_weighted<'t, T: Scalar>(refined: Var<'t, T>, input: Var<'t, T>, dilated: &ShadowMask) -> Var<'t, T> {
    refined.sub(input).abs().mul_mask(&dilated.to_tensor()).mean()
}
