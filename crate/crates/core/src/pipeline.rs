//! End-to-end orchestration: adversarial warm-up, anchor construction and
//! active selection (stage 1), the semi-supervised adaptation loop (stage 2),
//! evaluation, the ablation ladder, and the parameter sweeps.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::anchors::{ema_update, kmeans, AnchorSet};
use crate::config::{Config, Variant};
use crate::data::{generate, generate_eval, mix64, Dataset, Domain};
use crate::error::{Error, Result};
use crate::features::{pooled_image_vector, ImageVector, LabelKind};
use crate::losses::{
    combined_semi_loss, pseudo_labels, pseudo_labels_thresholded, warmup_discriminator_loss,
    warmup_generator_loss, BatchRole, BatchSample, LossReport, SemiFlags,
};
use crate::nn::{
    forward_classifier, forward_discriminator, forward_encoder, poly_lr, sgd_step, ModelParams,
    ProbMap,
};
use crate::selection::{
    apply_direction, build_report, score_adversarial, score_entropy, score_multi_anchor,
    score_multi_anchor_masked, select_by_score, select_random, SelectionReport, SelectionResult,
    Strategy,
};

/// Derive an independent RNG seed for one phase of a run.
fn derive(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(mix64(seed, 0x7061), |acc, b| mix64(acc, b as u64))
}

// --- datasets ---------------------------------------------------------------

/// The three splits one experiment runs on.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub source: Dataset,
    pub target: Dataset,
    pub eval: Dataset,
    /// Scene ids that exist only in the target domain (generator truth).
    pub exclusive_scenes: Vec<u32>,
}

impl DataBundle {
    pub fn from_config(config: &Config) -> Result<DataBundle> {
        let spec = config.domain_spec()?;
        let (source, target) = generate(&spec)?;
        let eval = generate_eval(&spec, config.data.n_eval, mix64(spec.seed, 0xe7a1))?;
        let exclusive_scenes = spec
            .scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.exclusive)
            .map(|(i, _)| i as u32)
            .collect();
        Ok(DataBundle {
            source,
            target,
            eval,
            exclusive_scenes,
        })
    }
}

// --- batch cycling ------------------------------------------------------------

/// Endless shuffled walk over a fixed id pool; reshuffles when exhausted.
struct Cycler {
    pool: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(pool: Vec<usize>, seed: u64) -> Cycler {
        let mut c = Cycler {
            pool,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        for i in (1..self.pool.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.pool.swap(i, j);
        }
        self.pos = 0;
    }

    fn next_n(&mut self, n: usize) -> Vec<usize> {
        if self.pool.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.pos == self.pool.len() {
                self.shuffle();
            }
            out.push(self.pool[self.pos]);
            self.pos += 1;
        }
        out
    }
}

// --- training log -------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub phase: String,
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub report: LossReport,
    /// Discriminator BCE for warm-up iterations.
    pub disc_loss: Option<f64>,
    /// Total L2 anchor movement this iteration (EMA phases).
    pub anchor_drift: Option<f64>,
}

pub fn write_train_log(log: &[TrainLogEntry], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in log {
        let line = serde_json::to_string(entry).expect("log serialize");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

// --- warm-up -------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct WarmupOutput {
    pub params: ModelParams,
    /// Image vectors of every source sample under the frozen post-warm-up
    /// encoder and ground-truth labels, keyed by sample id.
    pub source_vectors: Vec<(u64, ImageVector)>,
    pub log: Vec<TrainLogEntry>,
}

/// Adversarial warm-up (alternating generator/discriminator steps, 1:1).
/// With `adv_weight = 0` this degenerates to source-only training and the
/// discriminator is left at init.
pub fn run_warmup(
    config: &Config,
    source: &Dataset,
    target: &Dataset,
    seed: u64,
) -> Result<WarmupOutput> {
    let dims = config.model_dims()?;
    let mut params = ModelParams::init(&dims, derive(seed, "init"));
    let mut log = Vec::new();

    let epochs = config.train.warmup_epochs;
    let b = config.train.batch_source;
    let iters_per_epoch = source.len().div_ceil(b).max(1);
    let total_steps = (epochs * iters_per_epoch).max(1);
    let mut src_cycler = Cycler::new((0..source.len()).collect(), derive(seed, "warmup-src"));
    let mut tgt_cycler = Cycler::new((0..target.len()).collect(), derive(seed, "warmup-tgt"));
    let adversarial = config.train.adv_weight != 0.0;

    let mut step = 0usize;
    for epoch in 0..epochs {
        for iter in 0..iters_per_epoch {
            let lr = poly_lr(step, total_steps, config.train.base_lr, config.train.power);
            let src_idx = src_cycler.next_n(b);
            let tgt_idx = tgt_cycler.next_n(b);

            let src_batch: Vec<(&Array2<f64>, &Array1<u16>)> = src_idx
                .iter()
                .map(|&i| {
                    let s = &source.samples[i];
                    (&s.pixels, s.labels.as_ref().expect("source labels"))
                })
                .collect();
            let tgt_batch: Vec<&Array2<f64>> =
                tgt_idx.iter().map(|&i| &target.samples[i].pixels).collect();

            let gen = warmup_generator_loss(&params, &src_batch, &tgt_batch, config.train.adv_weight)?;
            if !gen.report.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "warm-up diverged at epoch {epoch} iter {iter}: loss {}",
                    gen.report.total
                )));
            }
            sgd_step(&mut params, &gen.grads, lr)?;

            let mut disc_loss = None;
            if adversarial {
                let src_probs: Vec<ProbMap> = src_idx
                    .iter()
                    .map(|&i| forward_probs(&params, &source.samples[i].pixels))
                    .collect::<Result<_>>()?;
                let tgt_probs: Vec<ProbMap> = tgt_idx
                    .iter()
                    .map(|&i| forward_probs(&params, &target.samples[i].pixels))
                    .collect::<Result<_>>()?;
                let (dl, dgrads) = warmup_discriminator_loss(&params, &src_probs, &tgt_probs)?;
                if !dl.is_finite() {
                    return Err(Error::Numeric(format!(
                        "discriminator loss diverged at epoch {epoch} iter {iter}"
                    )));
                }
                sgd_step(&mut params, &dgrads, lr)?;
                disc_loss = Some(dl);
            }

            log.push(TrainLogEntry {
                phase: "warmup".into(),
                epoch,
                iter,
                lr,
                report: gen.report,
                disc_loss,
                anchor_drift: None,
            });
            step += 1;
        }
    }

    // Image vectors of every source sample under the frozen encoder.
    let source_vectors = source
        .samples
        .iter()
        .map(|s| {
            let cache = forward_encoder(&params, &s.pixels)?;
            let v = pooled_image_vector(
                &cache.latent(),
                s.labels.as_ref().expect("source labels"),
                source.num_classes,
                LabelKind::GroundTruth,
            )?;
            Ok((s.id, v))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(WarmupOutput {
        params,
        source_vectors,
        log,
    })
}

fn forward_probs(params: &ModelParams, pixels: &Array2<f64>) -> Result<ProbMap> {
    let cache = forward_encoder(params, pixels)?;
    forward_classifier(params, &cache.latent())
}

// --- stage 1: anchors + active selection ---------------------------------------

/// All per-sample scores, computed in one pass so every strategy can select
/// from the same pool.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreEntry {
    pub id: u64,
    pub scene: u32,
    pub multi_anchor: f64,
    pub entropy: f64,
    pub adversarial: f64,
    pub aada: f64,
}

pub fn score_targets(
    config: &Config,
    params: &ModelParams,
    source_anchors: &AnchorSet,
    target: &Dataset,
) -> Result<Vec<ScoreEntry>> {
    target
        .samples
        .iter()
        .map(|s| {
            let cache = forward_encoder(params, &s.pixels)?;
            let latent = cache.latent();
            let prob = forward_classifier(params, &latent)?;
            let predicted = pseudo_labels(&prob);
            let vector =
                pooled_image_vector(&latent, &predicted, target.num_classes, LabelKind::Predicted)?;
            let anchor_dist = if config.select.masked_distance {
                score_multi_anchor_masked(&vector, source_anchors)
            } else {
                score_multi_anchor(&vector, source_anchors)
            };
            let e_ent = score_entropy(&prob);
            let e_adv = score_adversarial(forward_discriminator(params, &prob)?.output);
            Ok(ScoreEntry {
                id: s.id,
                scene: s.scene,
                multi_anchor: apply_direction(anchor_dist, config.select.nearest_first),
                entropy: e_ent,
                adversarial: e_adv,
                aada: e_ent * e_adv,
            })
        })
        .collect()
}

pub fn select_with_strategy(
    scores: &[ScoreEntry],
    strategy: Strategy,
    budget: f64,
    seed: u64,
) -> Result<SelectionResult> {
    match strategy {
        Strategy::Random => {
            let ids: Vec<u64> = scores.iter().map(|e| e.id).collect();
            select_random(&ids, budget, derive(seed, "random-sel"))
        }
        _ => {
            let pairs: Vec<(u64, f64)> = scores
                .iter()
                .map(|e| {
                    let s = match strategy {
                        Strategy::MultiAnchor => e.multi_anchor,
                        Strategy::Entropy => e.entropy,
                        Strategy::Adversarial => e.adversarial,
                        Strategy::Aada => e.aada,
                        Strategy::Random => unreachable!(),
                    };
                    (e.id, s)
                })
                .collect();
            select_by_score(strategy, &pairs, budget)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub source_anchors: AnchorSet,
    pub scores: Vec<ScoreEntry>,
    pub selection: SelectionResult,
}

/// K-means over the source image vectors, anchor-distance scoring of every
/// target sample, and the budgeted pick.
pub fn run_stage1(
    config: &Config,
    warmup: &WarmupOutput,
    target: &Dataset,
    seed: u64,
) -> Result<Stage1Output> {
    let dim = warmup
        .source_vectors
        .first()
        .map(|(_, v)| v.len())
        .ok_or_else(|| Error::Usage("no source vectors; run warm-up first".into()))?;
    let mut mat = Array2::zeros((warmup.source_vectors.len(), dim));
    for (i, (_, v)) in warmup.source_vectors.iter().enumerate() {
        mat.row_mut(i).assign(&v.values);
    }
    let km = kmeans(
        &mat,
        config.anchors.k_source,
        Domain::Source,
        derive(seed, "kmeans-src"),
        config.anchors.kmeans_max_iter,
        config.anchors.kmeans_tol,
    )?;
    let scores = score_targets(config, &warmup.params, &km.anchors, target)?;
    let selection = select_with_strategy(&scores, config.select.strategy, config.select.budget, seed)?;
    Ok(Stage1Output {
        source_anchors: km.anchors,
        scores,
        selection,
    })
}

pub fn selection_report(stage1: &Stage1Output, target: &Dataset) -> SelectionReport {
    let scene_of = |id: u64| {
        target
            .samples
            .iter()
            .find(|s| s.id == id)
            .map(|s| s.scene)
            .unwrap_or(u32::MAX)
    };
    build_report(&stage1.selection, scene_of)
}

// --- stage 2: semi-supervised adaptation ----------------------------------------

/// Per-anchor EMA bookkeeping for drift diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct AnchorStats {
    pub update_counts: Vec<usize>,
    /// Max Euclidean distance ||v - A|| seen at update time, per anchor.
    pub max_update_distance: Vec<f64>,
    /// Total Euclidean movement of each anchor over the whole loop.
    pub total_movement: Vec<f64>,
}

#[derive(Debug)]
pub struct Stage2Output {
    pub params: ModelParams,
    pub log: Vec<TrainLogEntry>,
    pub target_anchors: Option<AnchorSet>,
    pub initial_target_anchors: Option<AnchorSet>,
    pub anchor_stats: Option<AnchorStats>,
}

/// Stage 2 under a ladder variant: a supervised fine-tune on source + active
/// samples (step 1), target anchor and pseudo-label computation (step 2), and
/// the semi-supervised loop (step 3) whose terms the variant toggles.
pub fn run_stage2(
    config: &Config,
    warm_params: &ModelParams,
    source: &Dataset,
    target: &Dataset,
    labeled_ids: &[u64],
    variant: Variant,
    seed: u64,
) -> Result<Stage2Output> {
    let mut params = warm_params.clone();
    let mut log = Vec::new();
    let num_classes = target.num_classes;

    let labeled_idx: Vec<usize> = target
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| labeled_ids.contains(&s.id))
        .map(|(i, _)| i)
        .collect();
    let unlabeled_idx: Vec<usize> = target
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| !labeled_ids.contains(&s.id))
        .map(|(i, _)| i)
        .collect();
    if labeled_idx.len() + unlabeled_idx.len() != target.len() {
        return Err(Error::Usage("labeled ids are not a subset of the target pool".into()));
    }

    let total_epochs = config.train.stage2_epochs;
    let step1_epochs =
        ((config.train.step1_fraction * total_epochs as f64).round() as usize).min(total_epochs);
    let iters_per_epoch = source.len().div_ceil(config.train.batch_source).max(1);
    let total_steps = (total_epochs * iters_per_epoch).max(1);

    let mut src_cycler = Cycler::new((0..source.len()).collect(), derive(seed, "s2-src"));
    let mut act_cycler = Cycler::new(labeled_idx.clone(), derive(seed, "s2-act"));
    let mut unl_cycler = Cycler::new(unlabeled_idx.clone(), derive(seed, "s2-unl"));

    let needs_unlabeled = variant.uses_soft_align() || variant.uses_pseudo();
    let flags = SemiFlags {
        use_dis: variant.uses_soft_align(),
        use_pseudo: variant.uses_pseudo(),
    };
    let weights = config.loss_weights();

    // step-2 state, created between the phases
    let mut anchors: Option<AnchorSet> = None;
    let mut initial_anchors: Option<AnchorSet> = None;
    let mut anchor_stats: Option<AnchorStats> = None;
    let mut pseudo_maps: BTreeMap<usize, (Array1<u16>, Option<Array1<bool>>)> = BTreeMap::new();

    let mut step = 0usize;
    for epoch in 0..total_epochs {
        let in_step3 = epoch >= step1_epochs;

        if in_step3 && epoch == step1_epochs {
            // step 2: pseudo labels for unlabeled targets, anchors by K-means.
            if needs_unlabeled {
                pseudo_maps = compute_pseudo_maps(config, &params, target, &unlabeled_idx)?;
            }
            if variant.uses_soft_align() {
                let vectors =
                    target_vectors_all(&params, target, labeled_ids, &pseudo_maps, num_classes)?;
                let mut mat = Array2::zeros((vectors.len(), vectors[0].1.len()));
                for (i, (_, v)) in vectors.iter().enumerate() {
                    mat.row_mut(i).assign(&v.values);
                }
                let km = kmeans(
                    &mat,
                    config.anchors.v_target.min(vectors.len()),
                    Domain::Target,
                    derive(seed, "kmeans-tgt"),
                    config.anchors.kmeans_max_iter,
                    config.anchors.kmeans_tol,
                )?;
                anchor_stats = Some(AnchorStats {
                    update_counts: vec![0; km.anchors.k()],
                    max_update_distance: vec![0.0; km.anchors.k()],
                    total_movement: vec![0.0; km.anchors.k()],
                });
                initial_anchors = Some(km.anchors.clone());
                anchors = Some(km.anchors);
            }
        }

        if in_step3
            && config.loss.pseudo_refresh_epochs > 0
            && epoch > step1_epochs
            && (epoch - step1_epochs) % config.loss.pseudo_refresh_epochs == 0
            && needs_unlabeled
        {
            pseudo_maps = compute_pseudo_maps(config, &params, target, &unlabeled_idx)?;
        }

        for iter in 0..iters_per_epoch {
            let lr = poly_lr(step, total_steps, config.train.base_lr, config.train.power);
            let src_idx = src_cycler.next_n(config.train.batch_source);
            let act_idx = act_cycler.next_n(config.train.batch_active);
            let unl_idx = if in_step3 && needs_unlabeled {
                unl_cycler.next_n(config.train.batch_unlabeled)
            } else {
                Vec::new()
            };

            let mut batch: Vec<BatchSample<'_>> = Vec::new();
            for &i in &src_idx {
                let s = &source.samples[i];
                batch.push(BatchSample {
                    id: s.id,
                    role: BatchRole::Source,
                    pixels: &s.pixels,
                    labels: s.labels.as_ref().expect("source labels"),
                    pseudo_mask: None,
                });
            }
            for &i in &act_idx {
                let s = &target.samples[i];
                batch.push(BatchSample {
                    id: s.id,
                    role: BatchRole::ActiveTarget,
                    pixels: &s.pixels,
                    labels: s.labels.as_ref().expect("oracle labels for active sample"),
                    pseudo_mask: None,
                });
            }
            for &i in &unl_idx {
                let s = &target.samples[i];
                let (labels, mask) = pseudo_maps
                    .get(&i)
                    .ok_or_else(|| Error::Usage(format!("missing pseudo map for target {}", s.id)))?;
                batch.push(BatchSample {
                    id: s.id,
                    role: BatchRole::UnlabeledTarget,
                    pixels: &s.pixels,
                    labels,
                    pseudo_mask: mask.as_ref(),
                });
            }

            let step3_anchors = if in_step3 { anchors.as_ref() } else { None };
            let out = combined_semi_loss(&params, &batch, step3_anchors, weights, flags)?;
            if !out.report.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "stage-2 loss diverged at epoch {epoch} iter {iter}: {}",
                    out.report.total
                )));
            }
            sgd_step(&mut params, &out.grads, lr)?;

            let mut drift = None;
            if in_step3 && variant.uses_ema() {
                if let (Some(anch), Some(stats)) = (anchors.as_mut(), anchor_stats.as_mut()) {
                    let before = anch.anchors.clone();
                    let mut vectors = out.target_vectors;
                    vectors.sort_by_key(|(id, _)| *id);
                    for (_, v) in &vectors {
                        let (idx, d2) =
                            crate::anchors::nearest_anchor(v.values.view(), anch);
                        ema_update(anch, v.values.view(), config.anchors.alpha)?;
                        stats.update_counts[idx] += 1;
                        let d = d2.sqrt();
                        if d > stats.max_update_distance[idx] {
                            stats.max_update_distance[idx] = d;
                        }
                    }
                    let mut total = 0.0;
                    for k in 0..anch.k() {
                        let moved: f64 = before
                            .row(k)
                            .iter()
                            .zip(anch.anchors.row(k).iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        stats.total_movement[k] += moved;
                        total += moved;
                    }
                    drift = Some(total);
                }
            }

            log.push(TrainLogEntry {
                phase: if in_step3 { "step3" } else { "step1" }.into(),
                epoch,
                iter,
                lr,
                report: out.report,
                disc_loss: None,
                anchor_drift: drift,
            });
            step += 1;
        }
    }

    Ok(Stage2Output {
        params,
        log,
        target_anchors: anchors,
        initial_target_anchors: initial_anchors,
        anchor_stats,
    })
}

fn compute_pseudo_maps(
    config: &Config,
    params: &ModelParams,
    target: &Dataset,
    unlabeled_idx: &[usize],
) -> Result<BTreeMap<usize, (Array1<u16>, Option<Array1<bool>>)>> {
    let mut out = BTreeMap::new();
    for &i in unlabeled_idx {
        let prob = forward_probs(params, &target.samples[i].pixels)?;
        let entry = if config.loss.pseudo_threshold > 0.0 {
            let (labels, mask) = pseudo_labels_thresholded(&prob, config.loss.pseudo_threshold);
            (labels, Some(mask))
        } else {
            (pseudo_labels(&prob), None)
        };
        out.insert(i, entry);
    }
    Ok(out)
}

/// Image vectors of every target sample: ground-truth maps for actively
/// labeled samples, frozen pseudo maps otherwise.
fn target_vectors_all(
    params: &ModelParams,
    target: &Dataset,
    labeled_ids: &[u64],
    pseudo_maps: &BTreeMap<usize, (Array1<u16>, Option<Array1<bool>>)>,
    num_classes: usize,
) -> Result<Vec<(u64, ImageVector)>> {
    target
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cache = forward_encoder(params, &s.pixels)?;
            let v = if labeled_ids.contains(&s.id) {
                pooled_image_vector(
                    &cache.latent(),
                    s.labels.as_ref().expect("oracle labels"),
                    num_classes,
                    LabelKind::GroundTruth,
                )?
            } else {
                let map = match pseudo_maps.get(&i) {
                    Some((labels, _)) => labels.clone(),
                    None => pseudo_labels(&forward_classifier(params, &cache.latent())?),
                };
                pooled_image_vector(&cache.latent(), &map, num_classes, LabelKind::Pseudo)?
            };
            Ok((s.id, v))
        })
        .collect()
}

// --- evaluation -----------------------------------------------------------------

/// Per-class IoU with confusion counts. Classes absent from both prediction
/// and ground truth across the whole set are excluded from the mean and
/// listed in `excluded_classes`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// confusion[gt][pred]
    pub confusion: Vec<Vec<u64>>,
    pub excluded_classes: Vec<usize>,
}

pub fn evaluate(params: &ModelParams, eval: &Dataset) -> Result<Metrics> {
    let c = eval.num_classes;
    let mut confusion = vec![vec![0u64; c]; c];
    for s in &eval.samples {
        let prob = forward_probs(params, &s.pixels)?;
        let pred = pseudo_labels(&prob);
        let labels = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("eval sample {} has no labels", s.id)))?;
        for (&gt, &p) in labels.iter().zip(pred.iter()) {
            confusion[gt as usize][p as usize] += 1;
        }
    }
    Ok(metrics_from_confusion(confusion))
}

pub fn metrics_from_confusion(confusion: Vec<Vec<u64>>) -> Metrics {
    let c = confusion.len();
    let mut per_class = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    for k in 0..c {
        let tp = confusion[k][k];
        let fp: u64 = (0..c).map(|g| confusion[g][k]).sum::<u64>() - tp;
        let fn_: u64 = confusion[k].iter().sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        if denom == 0 {
            excluded.push(k);
            per_class.push(None);
        } else {
            per_class.push(Some(tp as f64 / denom as f64));
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Metrics {
        per_class_iou: per_class,
        miou,
        confusion,
        excluded_classes: excluded,
    }
}

// --- full experiment --------------------------------------------------------------

#[derive(Debug)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Metrics,
    pub params: ModelParams,
    pub selection: Option<SelectionResult>,
}

/// Run one (variant, seed) cell end to end. `warmup` and `stage1` may be
/// reused across cells of the same seed; pass `None` to compute them here.
pub fn run_experiment(
    config: &Config,
    bundle: &DataBundle,
    variant: Variant,
    seed: u64,
    warmup: Option<&WarmupOutput>,
    stage1: Option<&Stage1Output>,
) -> Result<ExperimentResult> {
    let owned_warmup;
    let warmup = match warmup {
        Some(w) => w,
        None => {
            owned_warmup = run_warmup(config, &bundle.source, &bundle.target, seed)?;
            &owned_warmup
        }
    };

    if variant == Variant::M0 {
        let metrics = evaluate(&warmup.params, &bundle.eval)?;
        return Ok(ExperimentResult {
            variant,
            seed,
            metrics,
            params: warmup.params.clone(),
            selection: None,
        });
    }

    let (labeled_ids, selection) = if variant == Variant::Mu {
        (bundle.target.samples.iter().map(|s| s.id).collect::<Vec<_>>(), None)
    } else {
        let owned_stage1;
        let stage1 = match stage1 {
            Some(s) => s,
            None => {
                owned_stage1 = run_stage1(config, warmup, &bundle.target, seed)?;
                &owned_stage1
            }
        };
        (stage1.selection.selected.clone(), Some(stage1.selection.clone()))
    };

    let stage2 = run_stage2(
        config,
        &warmup.params,
        &bundle.source,
        &bundle.target,
        &labeled_ids,
        variant,
        seed,
    )?;
    let metrics = evaluate(&stage2.params, &bundle.eval)?;
    Ok(ExperimentResult {
        variant,
        seed,
        metrics,
        params: stage2.params,
        selection,
    })
}

// --- ablation ladder -----------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Median mIoU per variant, ladder order.
    pub medians: Vec<(Variant, f64)>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The full ladder over every seed in `config.exp.seeds`; warm-up and
/// selection are shared across variants within a seed (they are pure
/// functions of config and seed).
pub fn run_ablation(config: &Config) -> Result<AblationTable> {
    run_ablation_with_variants(config, &Variant::LADDER)
}

pub fn run_ablation_with_variants(config: &Config, variants: &[Variant]) -> Result<AblationTable> {
    let bundle = DataBundle::from_config(config)?;
    let seeds = config.exp.seeds.clone();

    let per_seed: Vec<Vec<AblationRow>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<AblationRow>> {
            let warmup = run_warmup(config, &bundle.source, &bundle.target, seed)?;
            let needs_selection = variants
                .iter()
                .any(|v| v.uses_active() && *v != Variant::Mu);
            let stage1 = if needs_selection {
                Some(run_stage1(config, &warmup, &bundle.target, seed)?)
            } else {
                None
            };
            variants
                .iter()
                .map(|&variant| {
                    let res = run_experiment(
                        config,
                        &bundle,
                        variant,
                        seed,
                        Some(&warmup),
                        stage1.as_ref(),
                    )?;
                    Ok(AblationRow {
                        variant,
                        seed,
                        miou: res.metrics.miou,
                        per_class_iou: res.metrics.per_class_iou,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    // variant-major, seed-minor ordering
    let mut rows = Vec::new();
    for (vi, &variant) in variants.iter().enumerate() {
        debug_assert!(per_seed.iter().all(|r| r[vi].variant == variant));
        for rows_of_seed in &per_seed {
            rows.push(rows_of_seed[vi].clone());
        }
    }
    let medians = variants
        .iter()
        .map(|&v| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| r.miou)
                .collect();
            (v, median(&vals))
        })
        .collect();
    Ok(AblationTable { rows, medians })
}

pub fn write_ablation_csv(table: &AblationTable, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let c = table.rows.first().map(|r| r.per_class_iou.len()).unwrap_or(0);
    write!(w, "variant,seed,miou")?;
    for i in 0..c {
        write!(w, ",iou_{i}")?;
    }
    writeln!(w)?;
    for row in &table.rows {
        write!(w, "{},{},{}", row.variant.name(), row.seed, row.miou)?;
        for iou in &row.per_class_iou {
            match iou {
                Some(v) => write!(w, ",{v}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_ablation_summary(table: &AblationTable, path: &Path) -> Result<()> {
    let summary: BTreeMap<&str, f64> = table
        .medians
        .iter()
        .map(|(v, m)| (v.name(), *m))
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&summary).expect("summary")).map_err(Into::into)
}

// --- sweeps ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    /// Sweep key: anchor count, budget, or strategy name.
    pub key: String,
    pub seed: u64,
    pub miou: f64,
    /// Share of selected samples from target-exclusive scenes.
    pub exclusive_capture: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub sweep: String,
    pub rows: Vec<SweepRow>,
    /// key -> median mIoU
    pub medians: Vec<(String, f64)>,
}

fn summarize(sweep: &str, rows: Vec<SweepRow>, keys: &[String]) -> SweepTable {
    let medians = keys
        .iter()
        .map(|k| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| &r.key == k)
                .map(|r| r.miou)
                .collect();
            (k.clone(), median(&vals))
        })
        .collect();
    SweepTable {
        sweep: sweep.into(),
        rows,
        medians,
    }
}

fn exclusive_capture(selection: &SelectionResult, target: &Dataset, exclusive: &[u32]) -> f64 {
    if selection.selected.is_empty() {
        return 0.0;
    }
    let hits = selection
        .selected
        .iter()
        .filter(|id| {
            target
                .samples
                .iter()
                .find(|s| s.id == **id)
                .map(|s| exclusive.contains(&s.scene))
                .unwrap_or(false)
        })
        .count();
    hits as f64 / selection.selected.len() as f64
}

/// Anchor-count sweep: the source curve varies K under the selection-isolating
/// protocol (variant m1); the target curve varies V under the full method
/// (variant m4). Rows carry keys "source:<k>" and "target:<v>".
pub fn run_anchor_sweep(config: &Config) -> Result<SweepTable> {
    let bundle = DataBundle::from_config(config)?;
    let seeds = config.exp.sweep_seeds.clone();
    let grid = config.exp.sweep_k.clone();

    let warmups: Vec<(u64, WarmupOutput)> = seeds
        .par_iter()
        .map(|&seed| Ok((seed, run_warmup(config, &bundle.source, &bundle.target, seed)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut cells: Vec<(String, u64, Config, Variant)> = Vec::new();
    for &k in &grid {
        let mut c = config.clone();
        c.anchors.k_source = k;
        for &seed in &seeds {
            cells.push((format!("source:{k}"), seed, c.clone(), Variant::M1));
        }
    }
    for &v in &grid {
        let mut c = config.clone();
        c.anchors.v_target = v;
        for &seed in &seeds {
            cells.push((format!("target:{v}"), seed, c.clone(), Variant::M4));
        }
    }

    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|(key, seed, cell_config, variant)| -> Result<SweepRow> {
            let warmup = &warmups.iter().find(|(s, _)| s == seed).unwrap().1;
            let stage1 = run_stage1(cell_config, warmup, &bundle.target, *seed)?;
            let res = run_experiment(
                cell_config,
                &bundle,
                *variant,
                *seed,
                Some(warmup),
                Some(&stage1),
            )?;
            Ok(SweepRow {
                key: key.clone(),
                seed: *seed,
                miou: res.metrics.miou,
                exclusive_capture: Some(exclusive_capture(
                    &stage1.selection,
                    &bundle.target,
                    &bundle.exclusive_scenes,
                )),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let keys: Vec<String> = grid
        .iter()
        .map(|k| format!("source:{k}"))
        .chain(grid.iter().map(|v| format!("target:{v}")))
        .collect();
    Ok(summarize("anchors", rows, &keys))
}

/// Budget sweep under the selection-isolating protocol (variant m1); budget
/// 1.0 labels the whole target pool.
pub fn run_budget_sweep(config: &Config) -> Result<SweepTable> {
    let bundle = DataBundle::from_config(config)?;
    let seeds = config.exp.sweep_seeds.clone();
    let grid = config.exp.sweep_budgets.clone();

    let warmups: Vec<(u64, WarmupOutput)> = seeds
        .par_iter()
        .map(|&seed| Ok((seed, run_warmup(config, &bundle.source, &bundle.target, seed)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut cells: Vec<(f64, u64)> = Vec::new();
    for &b in &grid {
        for &seed in &seeds {
            cells.push((b, seed));
        }
    }
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(budget, seed)| -> Result<SweepRow> {
            let mut c = config.clone();
            c.select.budget = budget;
            let warmup = &warmups.iter().find(|(s, _)| *s == seed).unwrap().1;
            let stage1 = run_stage1(&c, warmup, &bundle.target, seed)?;
            let res = run_experiment(&c, &bundle, Variant::M1, seed, Some(warmup), Some(&stage1))?;
            Ok(SweepRow {
                key: format!("{budget}"),
                seed,
                miou: res.metrics.miou,
                exclusive_capture: Some(exclusive_capture(
                    &stage1.selection,
                    &bundle.target,
                    &bundle.exclusive_scenes,
                )),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<String> = grid.iter().map(|b| format!("{b}")).collect();
    Ok(summarize("budget", rows, &keys))
}

/// Strategy comparison under the selection-isolating protocol (variant m1):
/// identical pools and budgets, different rankings.
pub fn run_strategy_sweep(config: &Config) -> Result<SweepTable> {
    let bundle = DataBundle::from_config(config)?;
    let seeds = config.exp.sweep_seeds.clone();

    let prep: Vec<(u64, WarmupOutput, Vec<ScoreEntry>)> = seeds
        .par_iter()
        .map(|&seed| {
            let warmup = run_warmup(config, &bundle.source, &bundle.target, seed)?;
            let stage1 = run_stage1(config, &warmup, &bundle.target, seed)?;
            Ok((seed, warmup, stage1.scores))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells: Vec<(Strategy, u64)> = Vec::new();
    for &strategy in &Strategy::ALL {
        for &seed in &seeds {
            cells.push((strategy, seed));
        }
    }
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(strategy, seed)| -> Result<SweepRow> {
            let (_, warmup, scores) = prep.iter().find(|(s, _, _)| *s == seed).unwrap();
            let selection =
                select_with_strategy(scores, strategy, config.select.budget, seed)?;
            let stage2 = run_stage2(
                config,
                &warmup.params,
                &bundle.source,
                &bundle.target,
                &selection.selected,
                Variant::M1,
                seed,
            )?;
            let metrics = evaluate(&stage2.params, &bundle.eval)?;
            Ok(SweepRow {
                key: strategy.name().to_string(),
                seed,
                miou: metrics.miou,
                exclusive_capture: Some(exclusive_capture(
                    &selection,
                    &bundle.target,
                    &bundle.exclusive_scenes,
                )),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<String> = Strategy::ALL.iter().map(|s| s.name().to_string()).collect();
    Ok(summarize("strategy", rows, &keys))
}

pub fn write_sweep_csv(table: &SweepTable, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "key,seed,miou,exclusive_capture")?;
    for row in &table.rows {
        write!(w, "{},{},{}", row.key, row.seed, row.miou)?;
        match row.exclusive_capture {
            Some(v) => writeln!(w, ",{v}")?,
            None => writeln!(w, ",")?,
        }
    }
    Ok(())
}

pub fn write_sweep_summary(table: &SweepTable, path: &Path) -> Result<()> {
    let summary: Vec<serde_json::Value> = table
        .medians
        .iter()
        .map(|(k, m)| serde_json::json!({"key": k, "median_miou": m}))
        .collect();
    let doc = serde_json::json!({"sweep": table.sweep, "medians": summary});
    std::fs::write(path, serde_json::to_string_pretty(&doc).expect("summary")).map_err(Into::into)
}

/// Fraction of the target pool that belongs to exclusive scenes (the base
/// rate a random selection captures in expectation).
pub fn exclusive_base_rate(bundle: &DataBundle) -> f64 {
    let n = bundle.target.len();
    if n == 0 {
        return 0.0;
    }
    let hits = bundle
        .target
        .samples
        .iter()
        .filter(|s| bundle.exclusive_scenes.contains(&s.scene))
        .count();
    hits as f64 / n as f64
}

pub fn exclusive_capture_of(
    selection: &SelectionResult,
    bundle: &DataBundle,
) -> f64 {
    exclusive_capture(selection, &bundle.target, &bundle.exclusive_scenes)
}
