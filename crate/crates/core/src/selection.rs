//! Active-sample scoring and budgeted selection. The anchor-distance score
//! ranks target samples by how far their image-level feature vector sits from
//! the nearest source anchor; entropy-, adversarial-, and combined-score
//! baselines plus uniform random selection are provided for comparison.

use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::anchors::{nearest_anchor, squared_distance, AnchorSet};
use crate::error::{Error, Result};
use crate::features::ImageVector;
use crate::nn::ProbMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MultiAnchor,
    Random,
    Entropy,
    Adversarial,
    Aada,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::MultiAnchor,
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Adversarial,
        Strategy::Aada,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::MultiAnchor => "multi_anchor",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Adversarial => "adversarial",
            Strategy::Aada => "aada",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Strategy> {
        match s {
            "multi_anchor" => Ok(Strategy::MultiAnchor),
            "random" => Ok(Strategy::Random),
            "entropy" => Ok(Strategy::Entropy),
            "adversarial" => Ok(Strategy::Adversarial),
            "aada" => Ok(Strategy::Aada),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected multi_anchor|random|entropy|adversarial|aada)"
            ))),
        }
    }
}

/// Scored, ranked target ids with the chosen budget subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub budget: f64,
    /// (id, score) for every pool member, in ranked order (selection order for
    /// the random strategy).
    pub scores: Vec<(u64, f64)>,
    /// Ids granted labels, ranked best-first; size = ceil(budget * N_t).
    pub selected: Vec<u64>,
}

impl SelectionResult {
    pub fn is_selected(&self, id: u64) -> bool {
        self.selected.contains(&id)
    }
}

/// Squared distance from `v` to its nearest source anchor. Selection ranks
/// this score descending (farthest-first); samples sitting on an anchor score
/// zero and are selected last.
pub fn score_multi_anchor(v: &ImageVector, source_anchors: &AnchorSet) -> f64 {
    nearest_anchor(v.values.view(), source_anchors).1
}

/// Masked variant: compares only the blocks of categories present in `v`.
pub fn score_multi_anchor_masked(v: &ImageVector, source_anchors: &AnchorSet) -> f64 {
    let c = v.presence.len();
    let d_lat = v.values.len() / c;
    let mut best = f64::INFINITY;
    for anchor in source_anchors.anchors.rows() {
        let mut d = 0.0;
        for (cat, &present) in v.presence.iter().enumerate() {
            if !present {
                continue;
            }
            let lo = cat * d_lat;
            let hi = lo + d_lat;
            d += squared_distance(
                v.values.slice(ndarray::s![lo..hi]),
                anchor.slice(ndarray::s![lo..hi]),
            );
        }
        if d < best {
            best = d;
        }
    }
    best
}

/// Normalized prediction-map entropy: -(1/ln C) * sum over pixels and classes
/// of p ln p, with p ln p = 0 at p = 0. A uniform map scores H*W.
pub fn score_entropy(prob: &ProbMap) -> f64 {
    let c = prob.num_classes() as f64;
    let mut total = 0.0;
    for &p in prob.0.iter() {
        if p > 0.0 {
            total += p * p.ln();
        }
    }
    -total / c.ln()
}

/// Diversity score from the warm-up discriminator output d = f_D: (1 - d)/d,
/// monotone decreasing in d. `d` is clamped away from {0, 1}.
pub fn score_adversarial(d: f64) -> f64 {
    let d = d.clamp(1e-6, 1.0 - 1e-6);
    (1.0 - d) / d
}

/// Uncertainty-times-diversity score: entropy * adversarial.
pub fn score_aada(e_ent: f64, e_adv: f64) -> f64 {
    e_ent * e_adv
}

fn budget_size(budget: f64, n: usize) -> usize {
    (budget * n as f64).ceil() as usize
}

/// Rank scored ids descending (ties by ascending id) and keep the top
/// ceil(budget * N_t).
pub fn select_by_score(
    strategy: Strategy,
    scores: &[(u64, f64)],
    budget: f64,
) -> Result<SelectionResult> {
    validate_budget(budget, scores.len())?;
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = budget_size(budget, ranked.len());
    Ok(SelectionResult {
        strategy,
        budget,
        selected: ranked.iter().take(k).map(|(id, _)| *id).collect(),
        scores: ranked,
    })
}

/// Uniform sample without replacement from the pool.
pub fn select_random(ids: &[u64], budget: f64, seed: u64) -> Result<SelectionResult> {
    validate_budget(budget, ids.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = ids.to_vec();
    let k = budget_size(budget, pool.len());
    let mut selected = Vec::with_capacity(k);
    for _ in 0..k {
        let i = rng.gen_range(0..pool.len());
        selected.push(pool.swap_remove(i));
    }
    Ok(SelectionResult {
        strategy: Strategy::Random,
        budget,
        scores: selected
            .iter()
            .map(|&id| (id, 1.0))
            .chain(pool.iter().map(|&id| (id, 0.0)))
            .collect(),
        selected,
    })
}

fn validate_budget(budget: f64, pool: usize) -> Result<()> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::validation(
            "budget",
            format!("must be in (0, 1], got {budget}"),
        ));
    }
    if pool == 0 {
        return Err(Error::validation("pool", "selection pool is empty"));
    }
    Ok(())
}

/// Per-sample entries of the selection report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportEntry {
    pub id: u64,
    pub score: f64,
    pub scene: u32,
    pub selected: bool,
}

/// JSON report emitted by the `select` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub strategy: Strategy,
    pub budget: f64,
    pub pool_size: usize,
    pub selected: Vec<u64>,
    /// scene id -> (count in pool, count among selected)
    pub scene_composition: Vec<SceneShare>,
    pub entries: Vec<ReportEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneShare {
    pub scene: u32,
    pub pool: usize,
    pub selected: usize,
}

pub fn build_report(
    result: &SelectionResult,
    scene_of: impl Fn(u64) -> u32,
) -> SelectionReport {
    let mut shares: Vec<SceneShare> = Vec::new();
    let mut entries = Vec::with_capacity(result.scores.len());
    for &(id, score) in &result.scores {
        let scene = scene_of(id);
        let selected = result.is_selected(id);
        let share = match shares.iter_mut().find(|s| s.scene == scene) {
            Some(s) => s,
            None => {
                shares.push(SceneShare {
                    scene,
                    pool: 0,
                    selected: 0,
                });
                shares.last_mut().unwrap()
            }
        };
        share.pool += 1;
        share.selected += selected as usize;
        entries.push(ReportEntry {
            id,
            score,
            scene,
            selected,
        });
    }
    shares.sort_by_key(|s| s.scene);
    SelectionReport {
        strategy: result.strategy,
        budget: result.budget,
        pool_size: result.scores.len(),
        selected: result.selected.clone(),
        scene_composition: shares,
        entries,
    }
}

pub fn save_report(report: &SelectionReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serialize");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<SelectionReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad selection report: {e}")))
}

/// Distance used when ranking with `nearest_first` (the flag exposing the
/// opposite ordering): simply negate so the smallest distance ranks first.
pub fn apply_direction(score: f64, nearest_first: bool) -> f64 {
    if nearest_first {
        -score
    } else {
        score
    }
}

pub fn squared_l2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    squared_distance(a, b)
}
