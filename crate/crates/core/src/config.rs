//! Flat key=value experiment configuration: explicit defaults for every key,
//! `#` comments, CLI overrides on top of file values, and a canonical
//! rendering whose hash names the run directory. Re-parsing the rendered
//! effective config reproduces the configuration exactly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{centroid_trap_benchmark, default_benchmark, DomainSpec, SceneSpec, Shift};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::ModelDims;
use crate::selection::Strategy;

/// Ablation ladder variants plus the fully supervised upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    M0,
    M1,
    M2,
    M3,
    M4,
    Mu,
}

impl Variant {
    pub const LADDER: [Variant; 6] = [
        Variant::M0,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::Mu,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::M0 => "m0",
            Variant::M1 => "m1",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
            Variant::M4 => "m4",
            Variant::Mu => "mu",
        }
    }

    /// A: train with actively selected target samples.
    pub fn uses_active(&self) -> bool {
        !matches!(self, Variant::M0)
    }
    /// B: multi-anchor soft-alignment loss.
    pub fn uses_soft_align(&self) -> bool {
        matches!(self, Variant::M2 | Variant::M3 | Variant::M4)
    }
    /// C: EMA updates of the target anchors.
    pub fn uses_ema(&self) -> bool {
        matches!(self, Variant::M3 | Variant::M4)
    }
    /// D: pseudo-label loss on unlabeled targets.
    pub fn uses_pseudo(&self) -> bool {
        matches!(self, Variant::M4)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "m0" => Ok(Variant::M0),
            "m1" => Ok(Variant::M1),
            "m2" => Ok(Variant::M2),
            "m3" => Ok(Variant::M3),
            "m4" => Ok(Variant::M4),
            "mu" => Ok(Variant::Mu),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected m0|m1|m2|m3|m4|mu)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// `default`, `centroid_trap`, or `custom` (scene table read from keys).
    pub preset: String,
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    /// Custom-preset geometry; presets carry their own.
    pub height: usize,
    pub width: usize,
    pub d_in: usize,
    pub num_classes: usize,
    pub shift_rotate: f64,
    pub shift_scale: f64,
    pub shift_translate: Vec<f64>,
    pub scenes: Vec<SceneSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub d_lat: usize,
    pub disc_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub warmup_epochs: usize,
    pub adv_weight: f64,
    pub stage2_epochs: usize,
    /// Fraction of stage-2 epochs spent on the supervised fine-tune before
    /// anchors and pseudo labels are computed.
    pub step1_fraction: f64,
    pub batch_source: usize,
    pub batch_active: usize,
    pub batch_unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub k_source: usize,
    pub v_target: usize,
    pub alpha: f64,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectConfig {
    pub strategy: Strategy,
    pub budget: f64,
    /// Rank nearest-first instead of the default farthest-first.
    pub nearest_first: bool,
    /// Compare only present-category blocks in the anchor distance.
    pub masked_distance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub w_seg: f64,
    pub w_dis: f64,
    pub w_pseudo: f64,
    /// Pseudo-label confidence threshold; 0 keeps every pixel.
    pub pseudo_threshold: f64,
    /// Recompute pseudo labels every E loop epochs; 0 freezes them.
    pub pseudo_refresh_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpConfig {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub sweep_seeds: Vec<u64>,
    pub sweep_k: Vec<usize>,
    pub sweep_budgets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub anchors: AnchorConfig,
    pub select: SelectConfig,
    pub loss: LossConfig,
    pub exp: ExpConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: DataConfig {
                preset: "default".into(),
                seed: 7,
                n_source: 400,
                n_target: 400,
                n_eval: 200,
                height: 8,
                width: 8,
                d_in: 4,
                num_classes: 4,
                shift_rotate: 0.0,
                shift_scale: 1.0,
                shift_translate: vec![0.0; 4],
                scenes: vec![],
            },
            model: ModelConfig {
                encoder_hidden: vec![16],
                d_lat: 8,
                disc_hidden: vec![8],
            },
            train: TrainConfig {
                base_lr: 0.1,
                power: 0.9,
                warmup_epochs: 20,
                adv_weight: 0.01,
                stage2_epochs: 50,
                step1_fraction: 0.2,
                batch_source: 8,
                batch_active: 4,
                batch_unlabeled: 8,
            },
            anchors: AnchorConfig {
                k_source: 10,
                v_target: 10,
                alpha: 0.999,
                kmeans_max_iter: 100,
                kmeans_tol: 1e-9,
            },
            select: SelectConfig {
                strategy: Strategy::MultiAnchor,
                budget: 0.05,
                nearest_first: false,
                masked_distance: false,
            },
            loss: LossConfig {
                w_seg: 1.0,
                w_dis: 1.0,
                w_pseudo: 1.0,
                pseudo_threshold: 0.0,
                pseudo_refresh_epochs: 0,
            },
            exp: ExpConfig {
                variant: Variant::M4,
                seeds: vec![1, 2, 3, 4, 5],
                sweep_seeds: vec![1, 2, 3],
                sweep_k: vec![1, 5, 10, 20, 50],
                sweep_budgets: vec![0.01, 0.02, 0.05, 0.10, 0.20, 1.00],
            },
        }
    }
}

impl Config {
    /// Parse a key=value file and apply CLI overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
        let mut map = match path {
            Some(p) => parse_kv(&std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config `{}`: {e}", p.display()))
            })?)?,
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        Config::from_map(map)
    }

    pub fn from_str_cfg(text: &str) -> Result<Config> {
        Config::from_map(parse_kv(text)?)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Config> {
        let mut kv = KeyMap::new(map);
        let def = Config::default();

        let preset: String = kv.take("data.preset", def.data.preset.clone())?;
        let custom = preset == "custom";
        if !custom && !matches!(preset.as_str(), "default" | "centroid_trap") {
            return Err(Error::validation(
                "data.preset",
                format!("unknown preset `{preset}` (expected default|centroid_trap|custom)"),
            ));
        }
        let d_in = kv.take("data.d_in", def.data.d_in)?;
        let data = DataConfig {
            seed: kv.take("data.seed", def.data.seed)?,
            n_source: kv.take("data.n_source", def.data.n_source)?,
            n_target: kv.take("data.n_target", def.data.n_target)?,
            n_eval: kv.take("data.n_eval", def.data.n_eval)?,
            height: kv.take("data.height", def.data.height)?,
            width: kv.take("data.width", def.data.width)?,
            d_in,
            num_classes: kv.take("data.num_classes", def.data.num_classes)?,
            shift_rotate: kv.take("data.shift.rotate", 0.0)?,
            shift_scale: kv.take("data.shift.scale", 1.0)?,
            shift_translate: kv.take_list("data.shift.translate", vec![0.0; d_in])?,
            scenes: if custom { kv.take_scenes()? } else { Vec::new() },
            preset,
        };
        if !custom {
            if let Some(key) = kv.first_unused_with_prefix("data.scene.") {
                return Err(Error::validation(
                    key,
                    "scene keys require data.preset = custom",
                ));
            }
        }

        let model = ModelConfig {
            encoder_hidden: kv.take_list("model.hidden", def.model.encoder_hidden.clone())?,
            d_lat: kv.take("model.d_lat", def.model.d_lat)?,
            disc_hidden: kv.take_list("model.disc_hidden", def.model.disc_hidden.clone())?,
        };
        let train = TrainConfig {
            base_lr: kv.take("train.base_lr", def.train.base_lr)?,
            power: kv.take("train.power", def.train.power)?,
            warmup_epochs: kv.take("train.warmup_epochs", def.train.warmup_epochs)?,
            adv_weight: kv.take("train.adv_weight", def.train.adv_weight)?,
            stage2_epochs: kv.take("train.stage2_epochs", def.train.stage2_epochs)?,
            step1_fraction: kv.take("train.step1_fraction", def.train.step1_fraction)?,
            batch_source: kv.take("train.batch_source", def.train.batch_source)?,
            batch_active: kv.take("train.batch_active", def.train.batch_active)?,
            batch_unlabeled: kv.take("train.batch_unlabeled", def.train.batch_unlabeled)?,
        };
        let anchors = AnchorConfig {
            k_source: kv.take("anchors.k_source", def.anchors.k_source)?,
            v_target: kv.take("anchors.v_target", def.anchors.v_target)?,
            alpha: kv.take("anchors.alpha", def.anchors.alpha)?,
            kmeans_max_iter: kv.take("anchors.kmeans_max_iter", def.anchors.kmeans_max_iter)?,
            kmeans_tol: kv.take("anchors.kmeans_tol", def.anchors.kmeans_tol)?,
        };
        let select = SelectConfig {
            strategy: kv.take("select.strategy", def.select.strategy)?,
            budget: kv.take("select.budget", def.select.budget)?,
            nearest_first: kv.take("select.nearest_first", def.select.nearest_first)?,
            masked_distance: kv.take("select.masked_distance", def.select.masked_distance)?,
        };
        let loss = LossConfig {
            w_seg: kv.take("loss.w_seg", def.loss.w_seg)?,
            w_dis: kv.take("loss.w_dis", def.loss.w_dis)?,
            w_pseudo: kv.take("loss.w_pseudo", def.loss.w_pseudo)?,
            pseudo_threshold: kv.take("loss.pseudo_threshold", def.loss.pseudo_threshold)?,
            pseudo_refresh_epochs: kv.take(
                "loss.pseudo_refresh_epochs",
                def.loss.pseudo_refresh_epochs,
            )?,
        };
        let exp = ExpConfig {
            variant: kv.take("exp.variant", def.exp.variant)?,
            seeds: kv.take_list("exp.seeds", def.exp.seeds.clone())?,
            sweep_seeds: kv.take_list("exp.sweep_seeds", def.exp.sweep_seeds.clone())?,
            sweep_k: kv.take_list("exp.sweep_k", def.exp.sweep_k.clone())?,
            sweep_budgets: kv.take_list("exp.sweep_budgets", def.exp.sweep_budgets.clone())?,
        };
        kv.finish()?;

        let config = Config {
            data,
            model,
            train,
            anchors,
            select,
            loss,
            exp,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.exp.seeds.is_empty() {
            return Err(Error::validation("exp.seeds", "need at least one seed"));
        }
        if !(self.select.budget > 0.0 && self.select.budget <= 1.0) {
            return Err(Error::validation(
                "select.budget",
                format!("must be in (0, 1], got {}", self.select.budget),
            ));
        }
        if !(0.0..1.0).contains(&self.anchors.alpha) {
            return Err(Error::validation(
                "anchors.alpha",
                format!("must be in [0, 1), got {}", self.anchors.alpha),
            ));
        }
        if !(0.0..=1.0).contains(&self.train.step1_fraction) {
            return Err(Error::validation(
                "train.step1_fraction",
                "must be in [0, 1]",
            ));
        }
        if self.train.batch_source == 0 {
            return Err(Error::validation("train.batch_source", "must be >= 1"));
        }
        self.domain_spec()?.validate()
    }

    /// Resolve the generator spec for this configuration.
    pub fn domain_spec(&self) -> Result<DomainSpec> {
        let mut spec = match self.data.preset.as_str() {
            "default" => default_benchmark(self.data.seed),
            "centroid_trap" => centroid_trap_benchmark(self.data.seed),
            "custom" => DomainSpec {
                num_classes: self.data.num_classes,
                height: self.data.height,
                width: self.data.width,
                d_in: self.data.d_in,
                n_source: 0,
                n_target: 0,
                seed: 0,
                shift: Shift {
                    rotate: self.data.shift_rotate,
                    scale: self.data.shift_scale,
                    translate: self.data.shift_translate.clone(),
                },
                scenes: self.data.scenes.clone(),
            },
            other => {
                return Err(Error::validation(
                    "data.preset",
                    format!("unknown preset `{other}`"),
                ))
            }
        };
        spec.seed = self.data.seed;
        spec.n_source = self.data.n_source;
        spec.n_target = self.data.n_target;
        Ok(spec)
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        let spec = self.domain_spec()?;
        Ok(ModelDims {
            d_in: spec.d_in,
            encoder_hidden: self.model.encoder_hidden.clone(),
            d_lat: self.model.d_lat,
            num_classes: spec.num_classes,
            disc_hidden: self.model.disc_hidden.clone(),
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            seg: self.loss.w_seg,
            dis: self.loss.w_dis,
            pseudo: self.loss.w_pseudo,
        }
    }

    /// Canonical key=value rendering (sorted keys, resolved values).
    /// `Config::from_str_cfg(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("data.preset".into(), self.data.preset.clone()),
            ("data.seed".into(), self.data.seed.to_string()),
            ("data.n_source".into(), self.data.n_source.to_string()),
            ("data.n_target".into(), self.data.n_target.to_string()),
            ("data.n_eval".into(), self.data.n_eval.to_string()),
            ("model.hidden".into(), join(&self.model.encoder_hidden)),
            ("model.d_lat".into(), self.model.d_lat.to_string()),
            ("model.disc_hidden".into(), join(&self.model.disc_hidden)),
            ("train.base_lr".into(), self.train.base_lr.to_string()),
            ("train.power".into(), self.train.power.to_string()),
            (
                "train.warmup_epochs".into(),
                self.train.warmup_epochs.to_string(),
            ),
            ("train.adv_weight".into(), self.train.adv_weight.to_string()),
            (
                "train.stage2_epochs".into(),
                self.train.stage2_epochs.to_string(),
            ),
            (
                "train.step1_fraction".into(),
                self.train.step1_fraction.to_string(),
            ),
            (
                "train.batch_source".into(),
                self.train.batch_source.to_string(),
            ),
            (
                "train.batch_active".into(),
                self.train.batch_active.to_string(),
            ),
            (
                "train.batch_unlabeled".into(),
                self.train.batch_unlabeled.to_string(),
            ),
            ("anchors.k_source".into(), self.anchors.k_source.to_string()),
            ("anchors.v_target".into(), self.anchors.v_target.to_string()),
            ("anchors.alpha".into(), self.anchors.alpha.to_string()),
            (
                "anchors.kmeans_max_iter".into(),
                self.anchors.kmeans_max_iter.to_string(),
            ),
            (
                "anchors.kmeans_tol".into(),
                self.anchors.kmeans_tol.to_string(),
            ),
            (
                "select.strategy".into(),
                self.select.strategy.name().to_string(),
            ),
            ("select.budget".into(), self.select.budget.to_string()),
            (
                "select.nearest_first".into(),
                self.select.nearest_first.to_string(),
            ),
            (
                "select.masked_distance".into(),
                self.select.masked_distance.to_string(),
            ),
            ("loss.w_seg".into(), self.loss.w_seg.to_string()),
            ("loss.w_dis".into(), self.loss.w_dis.to_string()),
            ("loss.w_pseudo".into(), self.loss.w_pseudo.to_string()),
            (
                "loss.pseudo_threshold".into(),
                self.loss.pseudo_threshold.to_string(),
            ),
            (
                "loss.pseudo_refresh_epochs".into(),
                self.loss.pseudo_refresh_epochs.to_string(),
            ),
            ("exp.variant".into(), self.exp.variant.name().to_string()),
            ("exp.seeds".into(), join(&self.exp.seeds)),
            ("exp.sweep_seeds".into(), join(&self.exp.sweep_seeds)),
            ("exp.sweep_k".into(), join(&self.exp.sweep_k)),
            ("exp.sweep_budgets".into(), join(&self.exp.sweep_budgets)),
        ];
        if self.data.preset == "custom" {
            pairs.push(("data.height".into(), self.data.height.to_string()));
            pairs.push(("data.width".into(), self.data.width.to_string()));
            pairs.push(("data.d_in".into(), self.data.d_in.to_string()));
            pairs.push((
                "data.num_classes".into(),
                self.data.num_classes.to_string(),
            ));
            pairs.push(("data.shift.rotate".into(), self.data.shift_rotate.to_string()));
            pairs.push(("data.shift.scale".into(), self.data.shift_scale.to_string()));
            pairs.push((
                "data.shift.translate".into(),
                join(&self.data.shift_translate),
            ));
            for (i, s) in self.data.scenes.iter().enumerate() {
                pairs.push((format!("data.scene.{i}.categories"), join(&s.categories)));
                pairs.push((format!("data.scene.{i}.weights"), join(&s.band_weights)));
                pairs.push((format!("data.scene.{i}.sigmas"), join(&s.sigmas)));
                pairs.push((
                    format!("data.scene.{i}.offset_jitter"),
                    s.offset_jitter.to_string(),
                ));
                pairs.push((
                    format!("data.scene.{i}.appearance_jitter"),
                    s.appearance_jitter.to_string(),
                ));
                pairs.push((
                    format!("data.scene.{i}.pool_weight"),
                    s.pool_weight.to_string(),
                ));
                pairs.push((format!("data.scene.{i}.exclusive"), s.exclusive.to_string()));
                for (j, m) in s.means.iter().enumerate() {
                    pairs.push((format!("data.scene.{i}.mean.{j}"), join(m)));
                }
            }
        }
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

struct KeyMap {
    map: BTreeMap<String, String>,
}

impl KeyMap {
    fn new(map: BTreeMap<String, String>) -> Self {
        KeyMap { map }
    }

    fn take<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| Error::validation(key, format!("cannot parse `{raw}`: {e}"))),
        }
    }

    fn take_list<T>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some(raw) => raw
                .split(',')
                .map(|part| {
                    let part = part.trim();
                    part.parse::<T>()
                        .map_err(|e| Error::validation(key, format!("cannot parse `{part}`: {e}")))
                })
                .collect(),
        }
    }

    fn take_scenes(&mut self) -> Result<Vec<SceneSpec>> {
        let mut scenes = Vec::new();
        for i in 0.. {
            let prefix = format!("data.scene.{i}.");
            if !self.map.keys().any(|k| k.starts_with(&prefix)) {
                break;
            }
            let categories: Vec<usize> =
                self.take_list(&format!("data.scene.{i}.categories"), vec![])?;
            let band_weights: Vec<f64> = self.take_list(
                &format!("data.scene.{i}.weights"),
                vec![1.0; categories.len()],
            )?;
            let sigmas: Vec<f64> = self.take_list(
                &format!("data.scene.{i}.sigmas"),
                vec![0.0; categories.len()],
            )?;
            let offset_jitter: f64 = self.take(&format!("data.scene.{i}.offset_jitter"), 0.0)?;
            let appearance_jitter: f64 =
                self.take(&format!("data.scene.{i}.appearance_jitter"), 0.0)?;
            let pool_weight: f64 = self.take(&format!("data.scene.{i}.pool_weight"), 1.0)?;
            let exclusive: bool = self.take(&format!("data.scene.{i}.exclusive"), false)?;
            let mut means = Vec::with_capacity(categories.len());
            for j in 0..categories.len() {
                let mean: Vec<f64> = self.take_list(&format!("data.scene.{i}.mean.{j}"), vec![])?;
                means.push(mean);
            }
            scenes.push(SceneSpec {
                categories,
                band_weights,
                means,
                sigmas,
                offset_jitter,
                appearance_jitter,
                pool_weight,
                exclusive,
            });
        }
        Ok(scenes)
    }

    fn first_unused_with_prefix(&self, prefix: &str) -> Option<String> {
        self.map.keys().find(|k| k.starts_with(prefix)).cloned()
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::validation(key.clone(), "unknown configuration key"));
        }
        Ok(())
    }
}
