use rand::seq::SliceRandom;
use rand::Rng;

use super::{RolloutBatch, TrainConfig, ValueNorm};
use crate::error::{Error, Result};
use crate::model::SteerModel;
use crate::tensor::{clip_grad_norm, Adam, Graph, Tensor, Var};

/// Handles for the pieces of one minibatch loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub objective: Var,
    pub value_loss: Var,
    pub entropy: Var,
    pub ratio: Var,
    pub values: Var,
}

/// Mean/std normalisation per agent column of `adv[r][i]`.
pub fn normalize_advantages(adv: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let rows = adv.len();
    if rows == 0 {
        return Vec::new();
    }
    let n = adv[0].len();
    let mut out = vec![vec![0.0; n]; rows];
    for i in 0..n {
        let mean = adv.iter().map(|a| a[i]).sum::<f64>() / rows as f64;
        let var = adv.iter().map(|a| (a[i] - mean).powi(2)).sum::<f64>() / rows as f64;
        let std = var.sqrt().max(1e-8);
        for (o, a) in out.iter_mut().zip(adv) {
            o[i] = (a[i] - mean) / std;
        }
    }
    out
}

/// Records the clipped surrogate loss for rows `idx` of a sealed batch.
/// With `norm`, value targets and old values are compared in normalised units.
pub fn ppo_loss(
    g: &mut Graph,
    model: &SteerModel,
    batch: &RolloutBatch,
    idx: &[usize],
    cfg: &TrainConfig,
    norm: Option<&ValueNorm>,
) -> Result<LossVars> {
    if !batch.is_sealed() {
        return Err(Error::Contract("advantages must be computed before the update".into()));
    }
    let obs: Vec<_> = idx.iter().map(|&r| batch.obs[r].clone()).collect();
    let actions: Vec<_> = idx.iter().map(|&r| batch.actions[r].clone()).collect();
    let ev = model.evaluate_graph(g, &obs, &actions)?;
    let rows = idx.len() * batch.n_agents;
    let column = |src: &[Vec<f64>]| -> Vec<f64> {
        idx.iter()
            .flat_map(|&r| {
                src[r]
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| norm.map_or(v, |vn| vn.normalize(i, v)))
            })
            .collect()
    };
    let adv: Vec<Vec<f64>> = idx.iter().map(|&r| batch.advantages[r].clone()).collect();
    let adv: Vec<f64> = normalize_advantages(&adv).into_iter().flatten().collect();
    let old_lp: Vec<f64> = idx.iter().flat_map(|&r| batch.log_probs[r].iter().copied()).collect();
    let old_v = column(&batch.values);
    let ret = column(&batch.returns);
    let konst = |g: &mut Graph, v: Vec<f64>| -> Result<Var> { Ok(g.constant(Tensor::new(vec![rows, 1], v)?)) };

    let old_lp = konst(g, old_lp)?;
    let adv_v = konst(g, adv)?;
    let diff = g.sub(ev.log_prob, old_lp)?;
    let ratio = g.exp(diff);
    let s1 = g.mul(ratio, adv_v)?;
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);
    let clipped = g.clamp(ratio, vec![lo; rows], vec![hi; rows])?;
    let s2 = g.mul(clipped, adv_v)?;
    let surrogate = g.minimum(s1, s2)?;
    let surrogate = g.mean(surrogate);
    let entropy = g.mean(ev.entropy);
    let bonus = g.scale(entropy, cfg.entropy_coef);
    let objective = g.add(surrogate, bonus)?;

    let ret_v = konst(g, ret)?;
    let err = g.sub(ev.value, ret_v)?;
    let unclipped = g.square(err);
    let vlo: Vec<f64> = old_v.iter().map(|v| v - cfg.value_clip).collect();
    let vhi: Vec<f64> = old_v.iter().map(|v| v + cfg.value_clip).collect();
    let vclip = g.clamp(ev.value, vlo, vhi)?;
    let cerr = g.sub(vclip, ret_v)?;
    let csq = g.square(cerr);
    let vmax = g.maximum(unclipped, csq)?;
    let value_loss = g.mean(vmax);

    let neg = g.scale(objective, -1.0);
    let half = g.scale(value_loss, 0.5);
    let total = g.add(neg, half)?;
    Ok(LossVars {
        total,
        objective,
        value_loss,
        entropy,
        ratio,
        values: ev.value,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinibatchStats {
    pub epoch: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    /// Largest `|ratio - 1|` in the minibatch.
    pub max_ratio_deviation: f64,
}

/// Averages over all minibatches of one update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: Vec<MinibatchStats>,
}

/// Epochs of shuffled minibatch steps on one sealed batch.
pub fn ppo_update<R: Rng>(
    model: &mut SteerModel,
    adam: &mut Adam,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
    norm: Option<&ValueNorm>,
    rng: &mut R,
) -> Result<UpdateReport> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mb_size = batch.len().div_ceil(cfg.minibatches);
    let mut report = UpdateReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb_size) {
            let mut g = Graph::new(model.store());
            let lv = ppo_loss(&mut g, model, batch, idx, cfg, norm)?;
            let total = g.value(lv.total).data()[0];
            let objective = g.value(lv.objective).data()[0];
            let value_loss = g.value(lv.value_loss).data()[0];
            let entropy = g.value(lv.entropy).data()[0];
            let ratios = g.value(lv.ratio).data();
            let clipped = ratios.iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count();
            let max_dev = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
            let clip_fraction = clipped as f64 / ratios.len() as f64;
            let values_finite = g.value(lv.values).is_finite();
            if !(total.is_finite() && values_finite) {
                return Err(Error::NonFinite(format!(
                    "loss {total} at epoch {epoch} (value predictions finite: {values_finite}): objective {objective}, value loss {value_loss}, \
                     entropy {entropy}, max |ratio-1| {max_dev}, rows {idx:?}"
                )));
            }
            let grads = g.backward(lv.total)?;
            let store = model.store_mut();
            store.accumulate(&grads);
            let grad_norm = clip_grad_norm(store, cfg.max_grad_norm);
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm {grad_norm} at epoch {epoch}")));
            }
            adam.step(store)?;
            report.minibatches.push(MinibatchStats {
                epoch,
                policy_loss: -objective,
                value_loss,
                entropy,
                clip_fraction,
                grad_norm,
                max_ratio_deviation: max_dev,
            });
        }
    }
    let k = report.minibatches.len().max(1) as f64;
    let avg = |f: fn(&MinibatchStats) -> f64| report.minibatches.iter().map(f).sum::<f64>() / k;
    report.policy_loss = avg(|m| m.policy_loss);
    report.value_loss = avg(|m| m.value_loss);
    report.entropy = avg(|m| m.entropy);
    report.clip_fraction = avg(|m| m.clip_fraction);
    report.grad_norm = avg(|m| m.grad_norm);
    Ok(report)
}
