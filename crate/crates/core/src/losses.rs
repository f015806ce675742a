//! Paired feature distances between an unlearned-side batch (differentiated)
//! and a constant target-side batch.
//!
//! For sample `j` the raw distances are
//! `l2_j = mse(F_u, F_t)`, `per_j = mean_l mse(P_l(x_u), P_l(x_t))` and
//! `id_j = 1 - <e(x_u), e(x_t)>`. Callers weight them with per-sample
//! coefficients, which are also the upstream gradients of each distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ParamGrads, Sequential, Trace};
use crate::nets::{latent_batch, Embedder, GeneratorBundle, LatentCode, Perceptual};
use crate::tensor::{Real, Tensor};

/// Weights of the three local-loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermWeights {
    pub l2: f64,
    pub per: f64,
    pub id: f64,
}

impl TermWeights {
    pub const ZERO: TermWeights = TermWeights {
        l2: 0.0,
        per: 0.0,
        id: 0.0,
    };

    pub fn scaled(self, s: f64) -> Self {
        TermWeights {
            l2: self.l2 * s,
            per: self.per * s,
            id: self.id * s,
        }
    }

    pub fn combine(self, l2: f64, per: f64, id: f64) -> f64 {
        self.l2 * l2 + self.per * per + self.id * id
    }
}

/// Raw per-sample distances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairTerms {
    pub l2: Vec<f64>,
    pub per: Vec<f64>,
    pub id: Vec<f64>,
}

impl PairTerms {
    pub fn weighted(&self, j: usize, w: TermWeights) -> f64 {
        w.combine(self.l2[j], self.per[j], self.id[j])
    }
}

/// Constant side of a comparison: `G_s` features, renders and their critics' outputs.
pub struct TargetSide<T> {
    pub features: Tensor<T>,
    pub taps: Vec<Tensor<T>>,
    pub embed: Option<Tensor<T>>,
}

fn taps_of<T: Real>(trace: &Trace<T>) -> Vec<Tensor<T>> {
    Perceptual::<T>::TAPS.iter().map(|&i| trace.acts[i].clone()).collect()
}

pub fn target_side<T: Real>(
    g_s: &GeneratorBundle<T>,
    percep: &Perceptual<T>,
    embedder: Option<&Embedder<T>>,
    ws: &[LatentCode],
) -> Result<TargetSide<T>> {
    let features = g_s.synth_batch(ws)?;
    let images = g_s.render_forward(&features)?;
    let taps = taps_of(&percep.trace(images.clone()));
    let embed = embedder.map(|e| e.embed_batch(&images));
    Ok(TargetSide { features, taps, embed })
}

fn row_sq_dist<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    let l = a.sample_len();
    a.data()
        .chunks(l)
        .zip(b.data().chunks(l))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| {
                    let d = (*p - *q).f64();
                    d * d
                })
                .sum::<f64>()
                / l as f64
        })
        .collect()
}

/// `coef[j] * d/da mean((a_j - b_j)^2)`
fn row_sq_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, coef: &[f64]) -> Tensor<T> {
    let l = a.sample_len();
    let mut g = Tensor::zeros(a.shape());
    for (j, ((gr, x), y)) in g
        .data_mut()
        .chunks_mut(l)
        .zip(a.data().chunks(l))
        .zip(b.data().chunks(l))
        .enumerate()
    {
        let c = T::of(2.0 * coef[j] / l as f64);
        for ((o, p), q) in gr.iter_mut().zip(x).zip(y) {
            *o = c * (*p - *q);
        }
    }
    g
}

/// Mean over perceptual taps of the per-layer mean squared difference.
pub fn percdist_from_taps<T: Real>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Vec<f64> {
    let n = a[0].batch();
    let mut out = vec![0.0; n];
    for (ta, tb) in a.iter().zip(b) {
        for (o, d) in out.iter_mut().zip(row_sq_dist(ta, tb)) {
            *o += d / a.len() as f64;
        }
    }
    out
}

/// Perceptual distance of two image batches, one value per sample.
pub fn percdist<T: Real>(percep: &Perceptual<T>, a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    let ta = taps_of(&percep.trace(a.clone()));
    let tb = taps_of(&percep.trace(b.clone()));
    percdist_from_taps(&ta, &tb)
}

/// Gradient of `sum_j coef[j] * percdist_j` w.r.t. the traced input images.
pub fn percdist_backward<T: Real>(
    percep: &Perceptual<T>,
    trace: &Trace<T>,
    targets: &[Tensor<T>],
    coef: &[f64],
) -> Tensor<T> {
    let taps = Perceptual::<T>::TAPS;
    let per_layer: Vec<f64> = coef.iter().map(|c| c / taps.len() as f64).collect();
    let seeds = taps
        .iter()
        .zip(targets)
        .map(|(&i, t)| (i, row_sq_grad(&trace.acts[i], t, &per_layer)))
        .collect();
    percep.net().backward(trace, seeds, None, true).expect("input gradient requested")
}

fn dot_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    let l = a.sample_len();
    a.data()
        .chunks(l)
        .zip(b.data().chunks(l))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (*p * *q).f64()).sum())
        .collect()
}

/// Evaluates the paired distances for `G_u` at `ws`. With `coefs` given,
/// also returns `d/d(synth params) sum_j coefs[j] . (l2_j, per_j, id_j)`;
/// gradients pass through the frozen renderer, perceptual net and embedder
/// without touching their parameters.
pub fn pair_terms<T: Real>(
    g_u: &GeneratorBundle<T>,
    percep: &Perceptual<T>,
    embedder: Option<&Embedder<T>>,
    ws: &[LatentCode],
    target: &TargetSide<T>,
    coefs: Option<&[TermWeights]>,
) -> Result<(PairTerms, Option<ParamGrads<T>>)> {
    if ws.is_empty() {
        return Err(Error::Empty("latent batch"));
    }
    let n = ws.len();
    let wt = latent_batch::<T>(ws, g_u.config.w_dim)?;
    let synth_trace = g_u.synthesis.forward_traced(wt);
    let fu = synth_trace.output().clone();
    if fu.shape() != target.features.shape() {
        return Err(Error::ShapeMismatch {
            array: "synthesis features".into(),
            expected: target.features.shape().to_vec(),
            found: fu.shape().to_vec(),
        });
    }
    let render_trace = g_u.renderer.forward_traced(fu.clone());
    let xu = render_trace.output().clone();
    let percep_trace = percep.trace(xu.clone());
    let mut terms = PairTerms {
        l2: row_sq_dist(&fu, &target.features),
        per: percdist_from_taps(&taps_of(&percep_trace), &target.taps),
        id: vec![0.0; n],
    };
    let embed_trace = match (embedder, &target.embed) {
        (Some(e), Some(et)) => {
            let tr = e.trace(xu.clone());
            terms.id = dot_rows(tr.output(), et).into_iter().map(|c| 1.0 - c).collect();
            Some((e, tr, et))
        }
        _ => None,
    };
    let Some(coefs) = coefs else {
        return Ok((terms, None));
    };
    assert_eq!(coefs.len(), n, "one coefficient set per sample");
    let per_c: Vec<f64> = coefs.iter().map(|c| c.per).collect();
    let mut dx = percdist_backward(percep, &percep_trace, &target.taps, &per_c);
    if let Some((e, tr, et)) = &embed_trace {
        if coefs.iter().any(|c| c.id != 0.0) {
            let neg: Vec<f64> = coefs.iter().map(|c| -c.id).collect();
            let de = dot_backward(&e.net, tr, et, &neg, None).expect("input gradient");
            dx.add_assign(&de);
        }
    }
    let mut df = g_u
        .renderer
        .backward(&render_trace, vec![(g_u.renderer.layers.len(), dx)], None, true)
        .expect("input gradient");
    let l2_c: Vec<f64> = coefs.iter().map(|c| c.l2).collect();
    df.add_assign(&row_sq_grad(&fu, &target.features, &l2_c));
    let mut grads = g_u.synthesis.zero_grads();
    g_u.synthesis
        .backward(&synth_trace, vec![(g_u.synthesis.layers.len(), df)], Some(&mut grads), false);
    Ok((terms, Some(grads)))
}

/// Mean squared reconstruction error per sample plus its gradient seed.
pub fn mse_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    row_sq_dist(a, b)
}

pub fn mse_rows_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, coef: &[f64]) -> Tensor<T> {
    row_sq_grad(a, b, coef)
}

/// Gradient of `sum_j coef[j] * <y_j, t_j>` w.r.t. a traced network's input,
/// accumulating parameter gradients if requested.
pub fn dot_backward<T: Real>(
    net: &Sequential<T>,
    trace: &Trace<T>,
    targets: &Tensor<T>,
    coef: &[f64],
    grads: Option<&mut ParamGrads<T>>,
) -> Option<Tensor<T>> {
    let l = targets.sample_len();
    let mut seed = Tensor::zeros(targets.shape());
    for (j, (s, t)) in seed.data_mut().chunks_mut(l).zip(targets.data().chunks(l)).enumerate() {
        let c = T::of(coef[j]);
        for (o, v) in s.iter_mut().zip(t) {
            *o = c * *v;
        }
    }
    net.backward(trace, vec![(net.layers.len(), seed)], grads, true)
}
