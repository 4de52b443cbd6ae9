//! Training objectives: pixel cross-entropy, the multi-anchor soft-alignment
//! loss (harmonic mean of squared anchor distances) with its analytic
//! gradient, pseudo-label supervision, the combined semi-supervised
//! objective, and the adversarial warm-up losses.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::anchors::{squared_distance, AnchorSet};
use crate::error::{Error, Result};
use crate::features::{category_pool, image_vector, pool_backward, ImageVector, LabelKind};
use crate::nn::{
    backward_from_logits, discriminator_backward, encoder_backward, forward_classifier,
    forward_discriminator, forward_encoder, softmax_backward, summary_backward, ModelParams,
    ProbMap,
};

/// Squared distances below this are clamped before entering the harmonic mean.
pub const DIST_EPS: f64 = 1e-12;

/// Per-iteration loss breakdown. `total` is exactly the weighted sum of the
/// parts under the weights in force.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub seg_source: f64,
    pub seg_active: f64,
    pub dis_t: f64,
    pub pseudo: f64,
    pub adversarial: f64,
    pub total: f64,
    pub counts: LossCounts,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossCounts {
    pub source: usize,
    pub active: usize,
    pub unlabeled: usize,
    /// Target samples contributing to the soft-alignment term.
    pub dis_samples: usize,
    /// Anchor distances clamped at `DIST_EPS` (feature coincided with an anchor).
    pub dis_clamped: usize,
}

/// Per-term weights of the combined objective; all default to 1 (a plain sum).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub dis: f64,
    pub pseudo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg: 1.0,
            dis: 1.0,
            pseudo: 1.0,
        }
    }
}

/// Pixel-averaged cross entropy: -(1/HW) sum_i log p_{i, y_i}, with the
/// gradient at the logits (p - y)/HW.
pub fn ce_loss(prob: &ProbMap, labels: &Array1<u16>) -> Result<(f64, Array2<f64>)> {
    let hw = prob.num_pixels();
    let c = prob.num_classes();
    if labels.len() != hw {
        return Err(Error::Dimension(format!(
            "labels have {} pixels, prob map has {hw}",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = prob.0.clone();
    for (i, &l) in labels.iter().enumerate() {
        let y = l as usize;
        if y >= c {
            return Err(Error::Dimension(format!("label {y} out of range [0, {c})")));
        }
        loss -= prob.0[(i, y)].ln();
        grad[(i, y)] -= 1.0;
    }
    let n = hw as f64;
    grad.mapv_inplace(|g| g / n);
    Ok((loss / n, grad))
}

/// Result of the soft-alignment loss at one image vector.
#[derive(Debug, Clone)]
pub struct SoftAlign {
    pub loss: f64,
    /// dL/dv, same length as the image vector.
    pub grad: Array1<f64>,
    /// Some distance hit the `DIST_EPS` clamp (vector coincided with an anchor).
    pub clamped: bool,
}

/// Harmonic mean of the squared distances to all anchors:
/// L = V / sum_v 1/d_v^2, with dL/dv = (L^2/V) * sum_v 2 (v - A_v) / d_v^4.
pub fn soft_align_loss(v: ArrayView1<f64>, anchors: &AnchorSet) -> Result<SoftAlign> {
    if v.len() != anchors.dim() {
        return Err(Error::Dimension(format!(
            "vector dim {} != anchor dim {}",
            v.len(),
            anchors.dim()
        )));
    }
    let k = anchors.k() as f64;
    let mut clamped = false;
    let mut inv_sum = 0.0;
    let mut d2s = Vec::with_capacity(anchors.k());
    for a in anchors.anchors.rows() {
        let mut d2 = squared_distance(v, a);
        if d2 < DIST_EPS {
            d2 = DIST_EPS;
            clamped = true;
        }
        inv_sum += 1.0 / d2;
        d2s.push(d2);
    }
    let loss = k / inv_sum;
    let scale = loss * loss / k;
    let mut grad = Array1::zeros(v.len());
    for (a, &d2) in anchors.anchors.rows().into_iter().zip(d2s.iter()) {
        let w = 2.0 * scale / (d2 * d2);
        for (g, (&x, &ax)) in grad.iter_mut().zip(v.iter().zip(a.iter())) {
            *g += w * (x - ax);
        }
    }
    Ok(SoftAlign { loss, grad, clamped })
}

/// Per-pixel argmax with ties broken toward the lowest class index.
pub fn pseudo_labels(prob: &ProbMap) -> Array1<u16> {
    let c = prob.num_classes();
    Array1::from_shape_fn(prob.num_pixels(), |i| {
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..c {
            let p = prob.0[(i, j)];
            if p > best.1 {
                best = (j, p);
            }
        }
        best.0 as u16
    })
}

/// Argmax labels plus a confidence mask (max probability >= threshold).
pub fn pseudo_labels_thresholded(prob: &ProbMap, threshold: f64) -> (Array1<u16>, Array1<bool>) {
    let labels = pseudo_labels(prob);
    let mask = Array1::from_shape_fn(prob.num_pixels(), |i| {
        prob.0[(i, labels[i] as usize)] >= threshold
    });
    (labels, mask)
}

/// Cross entropy against a frozen pseudo-label map. With a mask, excluded
/// pixels contribute zero loss and zero gradient; normalization stays 1/HW.
pub fn pseudo_loss(
    prob: &ProbMap,
    pseudo: &Array1<u16>,
    mask: Option<&Array1<bool>>,
) -> Result<(f64, Array2<f64>)> {
    match mask {
        None => ce_loss(prob, pseudo),
        Some(mask) => {
            if mask.len() != prob.num_pixels() {
                return Err(Error::Dimension("pseudo mask size mismatch".into()));
            }
            let hw = prob.num_pixels() as f64;
            let mut loss = 0.0;
            let mut grad = Array2::zeros(prob.0.dim());
            for (i, (&l, &keep)) in pseudo.iter().zip(mask.iter()).enumerate() {
                if !keep {
                    continue;
                }
                let y = l as usize;
                loss -= prob.0[(i, y)].ln();
                for j in 0..prob.num_classes() {
                    grad[(i, j)] = prob.0[(i, j)] / hw;
                }
                grad[(i, y)] -= 1.0 / hw;
            }
            Ok((loss / hw, grad))
        }
    }
}

/// Role of a sample inside a semi-supervised batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchRole {
    Source,
    ActiveTarget,
    UnlabeledTarget,
}

/// One batch member: raw pixels plus the label map governing it (ground truth
/// for source/active, the frozen pseudo map for unlabeled targets).
pub struct BatchSample<'a> {
    pub id: u64,
    pub role: BatchRole,
    pub pixels: &'a Array2<f64>,
    pub labels: &'a Array1<u16>,
    /// Confidence mask for pseudo supervision; `None` keeps every pixel.
    pub pseudo_mask: Option<&'a Array1<bool>>,
}

/// Term toggles for the combined objective (the ablation ladder flips these).
#[derive(Debug, Clone, Copy)]
pub struct SemiFlags {
    pub use_dis: bool,
    pub use_pseudo: bool,
}

/// Output of one combined-loss evaluation.
pub struct SemiLoss {
    pub report: LossReport,
    pub grads: ModelParams,
    /// Freshly pooled image vectors of every target sample in the batch,
    /// keyed by sample id (consumed by the EMA anchor update).
    pub target_vectors: Vec<(u64, ImageVector)>,
}

/// The combined semi-supervised objective over one batch: seg (mean CE over
/// source plus mean CE over active targets), the soft-alignment term averaged
/// over all target samples, and the pseudo term over unlabeled targets,
/// summed under `weights`. Anchors are constants with respect to the model.
pub fn combined_semi_loss(
    params: &ModelParams,
    batch: &[BatchSample<'_>],
    target_anchors: Option<&AnchorSet>,
    weights: LossWeights,
    flags: SemiFlags,
) -> Result<SemiLoss> {
    let num_classes = params.dims.num_classes;
    let mut grads = params.zeros_like();
    let mut report = LossReport::default();
    let mut target_vectors = Vec::new();

    let n_source = batch.iter().filter(|s| s.role == BatchRole::Source).count();
    let n_active = batch
        .iter()
        .filter(|s| s.role == BatchRole::ActiveTarget)
        .count();
    let n_unlabeled = batch
        .iter()
        .filter(|s| s.role == BatchRole::UnlabeledTarget)
        .count();
    let n_targets = n_active + n_unlabeled;
    report.counts.source = n_source;
    report.counts.active = n_active;
    report.counts.unlabeled = n_unlabeled;

    let use_dis = flags.use_dis && target_anchors.is_some() && n_targets > 0;

    for sample in batch {
        let cache = forward_encoder(params, sample.pixels)?;
        let latent = cache.latent();
        let prob = forward_classifier(params, &latent)?;

        match sample.role {
            BatchRole::Source => {
                let (l, g) = ce_loss(&prob, sample.labels)?;
                report.seg_source += l / n_source as f64;
                let g = g.mapv(|x| x * weights.seg / n_source as f64);
                backward_from_logits(params, &cache, &g, &mut grads)?;
            }
            BatchRole::ActiveTarget => {
                let (l, g) = ce_loss(&prob, sample.labels)?;
                report.seg_active += l / n_active as f64;
                let g = g.mapv(|x| x * weights.seg / n_active as f64);
                backward_from_logits(params, &cache, &g, &mut grads)?;
            }
            BatchRole::UnlabeledTarget => {
                if flags.use_pseudo {
                    let (l, g) = pseudo_loss(&prob, sample.labels, sample.pseudo_mask)?;
                    report.pseudo += l / n_unlabeled as f64;
                    let g = g.mapv(|x| x * weights.pseudo / n_unlabeled as f64);
                    backward_from_logits(params, &cache, &g, &mut grads)?;
                }
            }
        }

        if sample.role != BatchRole::Source {
            let kind = match sample.role {
                BatchRole::ActiveTarget => LabelKind::GroundTruth,
                _ => LabelKind::Pseudo,
            };
            let pools = category_pool(&latent, sample.labels, num_classes)?;
            let vector = image_vector(&pools, kind);
            if use_dis {
                let anchors = target_anchors.unwrap();
                let sa = soft_align_loss(vector.values.view(), anchors)?;
                report.dis_t += sa.loss / n_targets as f64;
                report.counts.dis_samples += 1;
                report.counts.dis_clamped += sa.clamped as usize;
                let up = sa.grad.mapv(|x| x * weights.dis / n_targets as f64);
                let grad_latent =
                    pool_backward(&up, sample.labels, &pools.counts, latent.dim_lat())?;
                encoder_backward(params, &cache, &grad_latent, &mut grads)?;
            }
            target_vectors.push((sample.id, vector));
        }
    }

    report.total = weights.seg * report.seg_source
        + weights.seg * report.seg_active
        + weights.dis * report.dis_t
        + weights.pseudo * report.pseudo;
    Ok(SemiLoss {
        report,
        grads,
        target_vectors,
    })
}

/// Generator-side warm-up objective and its gradients: source cross entropy
/// plus the weighted fooling term (target outputs scored against the source
/// label) flowing through the frozen discriminator into encoder and
/// classifier. The report's `adversarial` field holds the unweighted fooling
/// term; `total` applies `adv_weight`.
pub struct WarmupGenLoss {
    pub report: LossReport,
    pub grads: ModelParams,
}

pub fn warmup_generator_loss(
    params: &ModelParams,
    source: &[(&Array2<f64>, &Array1<u16>)],
    target: &[&Array2<f64>],
    adv_weight: f64,
) -> Result<WarmupGenLoss> {
    if source.is_empty() {
        return Err(Error::Usage("warm-up generator batch has no source samples".into()));
    }
    let mut grads = params.zeros_like();
    let mut report = LossReport::default();
    report.counts.source = source.len();
    report.counts.unlabeled = target.len();

    for (pixels, labels) in source {
        let cache = forward_encoder(params, pixels)?;
        let prob = forward_classifier(params, &cache.latent())?;
        let (l, g) = ce_loss(&prob, labels)?;
        report.seg_source += l / source.len() as f64;
        let g = g.mapv(|x| x / source.len() as f64);
        backward_from_logits(params, &cache, &g, &mut grads)?;
    }

    for pixels in target {
        let cache = forward_encoder(params, pixels)?;
        let prob = forward_classifier(params, &cache.latent())?;
        let disc = forward_discriminator(params, &prob)?;
        // fooling term: -ln d, pretending the target is source
        report.adversarial += -disc.output.ln() / target.len() as f64;
        if adv_weight != 0.0 {
            let d_logit = (disc.output - 1.0) * adv_weight / target.len() as f64;
            let grad_summary = discriminator_backward(params, &disc, d_logit, None)?;
            let grad_prob = summary_backward(&prob, &grad_summary);
            let grad_logits = softmax_backward(&prob, &grad_prob);
            backward_from_logits(params, &cache, &grad_logits, &mut grads)?;
        }
    }

    report.total = report.seg_source + adv_weight * report.adversarial;
    Ok(WarmupGenLoss { report, grads })
}

/// Discriminator-side warm-up objective: binary cross entropy labeling source
/// probability maps 1 and target maps 0, averaged over the batch. Probability
/// maps are constants here (the generator is frozen for this step); only
/// discriminator gradients are produced.
pub fn warmup_discriminator_loss(
    params: &ModelParams,
    source_probs: &[ProbMap],
    target_probs: &[ProbMap],
) -> Result<(f64, ModelParams)> {
    let n = source_probs.len() + target_probs.len();
    if n == 0 {
        return Err(Error::Usage("discriminator batch is empty".into()));
    }
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for prob in source_probs {
        let disc = forward_discriminator(params, prob)?;
        loss += -disc.output.ln() / n as f64;
        let d_logit = (disc.output - 1.0) / n as f64;
        discriminator_backward(params, &disc, d_logit, Some(&mut grads))?;
    }
    for prob in target_probs {
        let disc = forward_discriminator(params, prob)?;
        loss += -(1.0 - disc.output).ln() / n as f64;
        let d_logit = disc.output / n as f64;
        discriminator_backward(params, &disc, d_logit, Some(&mut grads))?;
    }
    Ok((loss, grads))
}
