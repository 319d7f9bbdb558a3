//! Loss terms of the dual adversarial auto-encoder objective.
//!
//! Every term is built on a [`Graph`] so it can be differentiated. Batch
//! reductions are means over samples, sums over features.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::distributions::PriorBatch;
use crate::error::{Error, Result};
use crate::networks::{DataMode, Mode, ModelState, Session};

/// Lower clamp for probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the latent-code reconstruction through the dual path.
    pub lambda1: f64,
    /// Weight of the conditional-entropy part of the clustering term.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.1, lambda2: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::config(format!("weights.lambda1 = {} must be >= 0", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::config(format!("weights.lambda2 = {} must be >= 0", self.lambda2)));
        }
        Ok(())
    }
}

/// Per-batch loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon_x: f64,
    pub recon_c: f64,
    pub adv_enc: f64,
    pub adv_critic: f64,
    pub cr: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `recon_x + lambda1·recon_c + adv_enc (+ cr)`, in the same evaluation
    /// order the graph uses.
    pub fn recombine(&self, weights: &LossWeights, include_cr: bool) -> f64 {
        let base = self.recon_x + weights.lambda1 * self.recon_c + self.adv_enc;
        if include_cr {
            base + self.cr
        } else {
            base
        }
    }
}

fn log_prob(g: &mut Graph, p: Var) -> Result<Var> {
    let c = g.clamp(p, PROB_FLOOR, 1.0)?;
    g.log(c)
}

fn per_sample_mean(g: &mut Graph, per_element: Var) -> Result<Var> {
    let rows = g.value(per_element).rows() as f64;
    let s = g.sum(per_element)?;
    g.scale(s, 1.0 / rows)
}

/// Negative log-likelihood of `x` under the decoder output `x_hat`,
/// averaged over features and samples: Bernoulli cross-entropy in pixel
/// mode, `½(x − x̂)²` in feature mode.
pub fn recon_x_loss(g: &mut Graph, x: Var, x_hat: Var, mode: DataMode) -> Result<Var> {
    if g.value(x).shape() != g.value(x_hat).shape() {
        return Err(Error::shape(format!(
            "recon_x: {:?} vs {:?}",
            g.value(x).shape(),
            g.value(x_hat).shape()
        )));
    }
    match mode {
        DataMode::Pixel => {
            let lp = log_prob(g, x_hat)?;
            let not_p = g.neg(x_hat)?;
            let not_p = g.add_scalar(not_p, 1.0)?;
            let lq = log_prob(g, not_p)?;
            let not_x = g.neg(x)?;
            let not_x = g.add_scalar(not_x, 1.0)?;
            let a = g.mul(x, lp)?;
            let b = g.mul(not_x, lq)?;
            let ll = g.add(a, b)?;
            let nll = g.neg(ll)?;
            g.mean(nll)
        }
        DataMode::Feature => {
            let d = g.sub(x, x_hat)?;
            let sq = g.mul(d, d)?;
            let half = g.scale(sq, 0.5)?;
            g.mean(half)
        }
    }
}

/// `−log q(c|x̂)` for prior codes `c = [y, h]`: cross-entropy on the
/// category plus a unit-variance Gaussian term `½‖h − ĥ‖²` on the style.
pub fn recon_c_loss(g: &mut Graph, y_true: Var, h_true: Option<Var>, y_hat: Var, h_hat: Option<Var>) -> Result<Var> {
    if g.value(y_true).shape() != g.value(y_hat).shape() {
        return Err(Error::shape("recon_c: category shapes differ"));
    }
    let lp = log_prob(g, y_hat)?;
    let prod = g.mul(y_true, lp)?;
    let ce_elems = g.neg(prod)?;
    let ce = per_sample_mean(g, ce_elems)?;
    match (h_true, h_hat) {
        (None, None) => Ok(ce),
        (Some(h), Some(h_hat)) => {
            if g.value(h).shape() != g.value(h_hat).shape() {
                return Err(Error::shape("recon_c: style shapes differ"));
            }
            let d = g.sub(h, h_hat)?;
            let sq = g.mul(d, d)?;
            let half = g.scale(sq, 0.5)?;
            let style = per_sample_mean(g, half)?;
            g.add(ce, style)
        }
        _ => Err(Error::shape("recon_c: style present on only one side")),
    }
}

/// Row entropies `−Σ_k p ln p` of an `n×K` probability tensor, as `n×1`.
pub fn row_entropy(g: &mut Graph, p: Var) -> Result<Var> {
    let lp = log_prob(g, p)?;
    let plp = g.mul(p, lp)?;
    let s = g.sum_axis(plp, 1)?;
    g.neg(s)
}

/// Clustering regularizer `−H[q(y)] + λ2·E_x H[q(y|x)]` with `q(y)`
/// estimated by the batch mean of `q(y|x)`.
pub fn cr_loss(g: &mut Graph, y_probs: Var, lambda2: f64) -> Result<Var> {
    let (n, _) = g.value(y_probs).dims2()?;
    if n == 0 {
        return Err(Error::shape("cr_loss of an empty batch"));
    }
    let marginal = g.mean_axis(y_probs, 0)?;
    let h_marg = row_entropy(g, marginal)?;
    let h_marg = g.sum(h_marg)?;
    let h_cond = row_entropy(g, y_probs)?;
    let h_cond = g.mean(h_cond)?;
    let neg_marg = g.neg(h_marg)?;
    let cond = g.scale(h_cond, lambda2)?;
    g.add(neg_marg, cond)
}

/// Critic loss `−(E[D(prior)] − E[D(posterior)])`, minimized by the critic.
pub fn wgan_critic_loss(g: &mut Graph, score_prior: Var, score_posterior: Var) -> Result<Var> {
    let p = g.mean(score_prior)?;
    let q = g.mean(score_posterior)?;
    let gap = g.sub(p, q)?;
    g.neg(gap)
}

/// Encoder side of the Wasserstein objective: `−E[D(posterior)]`.
pub fn wgan_encoder_loss(g: &mut Graph, score_posterior: Var) -> Result<Var> {
    let q = g.mean(score_posterior)?;
    g.neg(q)
}

/// Clamps every critic parameter into `[−c, c]`.
pub fn clip_weights(state: &mut ModelState, c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::config(format!("clip constant {c} must be positive")));
    }
    for t in state.critic_params_mut() {
        for w in t.data_mut() {
            *w = w.clamp(-c, c);
        }
    }
    Ok(())
}

/// Graph handles of the generator-side objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub recon_x: Var,
    pub recon_c: Var,
    pub adv_enc: Var,
    pub cr: Var,
    pub total: Var,
}

impl ObjectiveVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            recon_x: g.value(self.recon_x).item(),
            recon_c: g.value(self.recon_c).item(),
            adv_enc: g.value(self.adv_enc).item(),
            adv_critic: 0.0,
            cr: g.value(self.cr).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Records the full encoder/decoder objective on `session`:
///
/// * data path: `x → Q → (y, h, z) → P → x̂`, scored by `recon_x`;
/// * dual path: prior `(y, h, z) → P → x̃ → Q → (ŷ, ĥ)`, scored by `recon_c`;
/// * adversarial term on the encoded `(h, z)` (critic parameters should be
///   bound as constants);
/// * clustering term on the encoded `q(y|x)`, left out of `total` when
///   `include_cr` is false.
///
/// Only the data-path pass records batch-norm statistics.
pub fn record_objective(
    s: &mut Session<'_>,
    x: Var,
    prior: &PriorBatch,
    weights: &LossWeights,
    include_cr: bool,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<ObjectiveVars> {
    let data_mode = s.state().spec.data_mode;
    let enc = s.encode(x, mode, rng, true)?;
    let x_hat = s.decode(enc.y_probs, enc.h, enc.z, mode, rng, true)?;
    let recon_x = recon_x_loss(&mut s.graph, x, x_hat, data_mode)?;

    let y_p = s.graph.constant(prior.y.clone());
    let h_p = prior.h.as_ref().map(|t| s.graph.constant(t.clone()));
    let z_p = prior.z.as_ref().map(|t| s.graph.constant(t.clone()));
    let x_fake = s.decode(y_p, h_p, z_p, mode, rng, false)?;
    let re = s.encode(x_fake, mode, rng, false)?;
    let recon_c = recon_c_loss(&mut s.graph, y_p, h_p, re.y_probs, re.h)?;

    let critic_in = s.critic_input(enc.y_probs, enc.h, enc.z)?;
    let scores = s.discriminate(critic_in, mode, rng)?;
    let adv_enc = wgan_encoder_loss(&mut s.graph, scores)?;

    let cr = cr_loss(&mut s.graph, enc.y_probs, weights.lambda2)?;

    let g = &mut s.graph;
    let weighted_c = g.scale(recon_c, weights.lambda1)?;
    let mut total = g.add(recon_x, weighted_c)?;
    total = g.add(total, adv_enc)?;
    if include_cr {
        total = g.add(total, cr)?;
    }
    Ok(ObjectiveVars { recon_x, recon_c, adv_enc, cr, total })
}

/// Records the critic objective: prior draws against encoded data.
pub fn record_critic_objective(
    s: &mut Session<'_>,
    x: Var,
    prior: &PriorBatch,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let enc = s.encode(x, mode, rng, false)?;
    let y_p = s.graph.constant(prior.y.clone());
    let h_p = prior.h.as_ref().map(|t| s.graph.constant(t.clone()));
    let z_p = prior.z.as_ref().map(|t| s.graph.constant(t.clone()));
    let prior_in = s.critic_input(y_p, h_p, z_p)?;
    let post_in = s.critic_input(enc.y_probs, enc.h, enc.z)?;
    let score_prior = s.discriminate(prior_in, mode, rng)?;
    let score_post = s.discriminate(post_in, mode, rng)?;
    wgan_critic_loss(&mut s.graph, score_prior, score_post)
}

/// Evaluates the generator-side objective on one batch without updating
/// anything. Prior draws come from `rng`.
pub fn total_encoder_decoder_loss(
    state: &ModelState,
    batch: &crate::tensor::Tensor,
    weights: &LossWeights,
    include_cr: bool,
    rng: &mut dyn RngCore,
) -> Result<LossBreakdown> {
    let prior = PriorBatch::sample(&state.spec.prior, batch.rows(), rng)?;
    let mut s = Session::new(state, crate::networks::Trainable::Nothing);
    let x = s.graph.constant(batch.clone());
    let vars = record_objective(&mut s, x, &prior, weights, include_cr, Mode::Train, rng)?;
    Ok(vars.breakdown(&s.graph))
}
