//! Synthetic paired source/target domains. Every sample is a small pixel grid
//! whose per-pixel feature vectors are drawn from scene- and
//! category-conditional Gaussians; the target domain applies an affine shift
//! to the category means and may contain scenes absent from the source.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn default_pool_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// One "image": a flattened H x W grid of input feature vectors with optional
/// per-pixel category labels. `scene` is generator truth, held out from
/// training and used only to evaluate selection coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub domain: Domain,
    /// HW x d_in, row index = r * W + c.
    pub pixels: Array2<f64>,
    /// HW category ids in [0, C); present for all source samples.
    pub labels: Option<Array1<u16>>,
    pub scene: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub d_in: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One mixture mode ("scene"): which categories appear, how the grid is split
/// among them, and the per-category Gaussian in input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Categories present in this scene, in band order.
    pub categories: Vec<usize>,
    /// Relative widths of the vertical bands, one per category above.
    pub band_weights: Vec<f64>,
    /// Per-category mean vectors (d_in each), aligned with `categories`.
    pub means: Vec<Vec<f64>>,
    /// Per-category isotropic standard deviations, aligned with `categories`.
    pub sigmas: Vec<f64>,
    /// Std of a per-sample displacement in the first two dims, shared by all
    /// pixels of the sample (intra-scene diversity). Zero disables it.
    #[serde(default)]
    pub offset_jitter: f64,
    /// Std of a per-sample displacement in the appearance dims (2..d_in),
    /// shared by all pixels of the sample. Zero disables it.
    #[serde(default)]
    pub appearance_jitter: f64,
    /// Relative share of the sample pool assigned to this scene.
    #[serde(default = "default_pool_weight")]
    pub pool_weight: f64,
    /// Present only in the target domain.
    pub exclusive: bool,
}

/// Affine transform applied to target-domain category means: rotation by
/// `rotate` radians in the plane of the first two input dims, then uniform
/// `scale`, then `translate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub rotate: f64,
    pub scale: f64,
    pub translate: Vec<f64>,
}

impl Shift {
    pub fn identity(d_in: usize) -> Shift {
        Shift {
            rotate: 0.0,
            scale: 1.0,
            translate: vec![0.0; d_in],
        }
    }

    fn apply(&self, mean: &[f64]) -> Vec<f64> {
        let mut out = mean.to_vec();
        if out.len() >= 2 {
            let (c, s) = (self.rotate.cos(), self.rotate.sin());
            let (x, y) = (out[0], out[1]);
            out[0] = c * x - s * y;
            out[1] = s * x + c * y;
        }
        for (o, t) in out.iter_mut().zip(self.translate.iter()) {
            *o = *o * self.scale + t;
        }
        out
    }
}

/// Full generator specification for one paired source/target benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub d_in: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub seed: u64,
    pub shift: Shift,
    pub scenes: Vec<SceneSpec>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::validation("num_classes", "must be at least 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("height/width", "grid dims must be positive"));
        }
        if self.d_in == 0 {
            return Err(Error::validation("d_in", "must be at least 1"));
        }
        if self.scenes.is_empty() {
            return Err(Error::validation("scenes", "at least one scene required"));
        }
        if self.shift.translate.len() != self.d_in {
            return Err(Error::validation(
                "shift.translate",
                format!("length {} != d_in {}", self.shift.translate.len(), self.d_in),
            ));
        }
        if self.scenes.iter().all(|s| s.exclusive) {
            return Err(Error::validation(
                "scenes",
                "at least one shared (non-exclusive) scene required",
            ));
        }
        for (i, scene) in self.scenes.iter().enumerate() {
            let field = |f: &str| format!("scenes[{i}].{f}");
            if scene.categories.is_empty() {
                return Err(Error::validation(field("categories"), "must be non-empty"));
            }
            if let Some(&c) = scene.categories.iter().find(|&&c| c >= self.num_classes) {
                return Err(Error::validation(
                    field("categories"),
                    format!("category {c} out of range [0, {})", self.num_classes),
                ));
            }
            if scene.band_weights.len() != scene.categories.len() {
                return Err(Error::validation(
                    field("band_weights"),
                    "length must match categories",
                ));
            }
            if scene.band_weights.iter().any(|&w| !(w > 0.0)) {
                return Err(Error::validation(field("band_weights"), "weights must be > 0"));
            }
            if scene.means.len() != scene.categories.len() {
                return Err(Error::validation(field("means"), "length must match categories"));
            }
            if let Some(m) = scene.means.iter().find(|m| m.len() != self.d_in) {
                return Err(Error::validation(
                    field("means"),
                    format!("mean has {} dims, expected d_in {}", m.len(), self.d_in),
                ));
            }
            if scene.sigmas.len() != scene.categories.len() {
                return Err(Error::validation(field("sigmas"), "length must match categories"));
            }
            if scene.sigmas.iter().any(|&s| s < 0.0) {
                return Err(Error::validation(field("sigmas"), "sigma must be >= 0"));
            }
            if scene.offset_jitter < 0.0 {
                return Err(Error::validation(field("offset_jitter"), "must be >= 0"));
            }
            if scene.appearance_jitter < 0.0 {
                return Err(Error::validation(field("appearance_jitter"), "must be >= 0"));
            }
            if !(scene.pool_weight > 0.0) {
                return Err(Error::validation(field("pool_weight"), "must be > 0"));
            }
        }
        Ok(())
    }

    fn shared_scene_ids(&self) -> Vec<usize> {
        (0..self.scenes.len()).filter(|&i| !self.scenes[i].exclusive).collect()
    }
}

/// Split `width` columns into contiguous bands proportional to `weights`;
/// every band gets at least one column (width permitting, left to right).
fn band_edges(width: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let n = weights.len();
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(0);
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        let remaining_bands = n - i - 1;
        let mut e = ((acc / total) * width as f64).round() as usize;
        let prev = *edges.last().unwrap();
        e = e.max(prev + 1).min(width - remaining_bands);
        edges.push(e);
    }
    *edges.last_mut().unwrap() = width;
    edges
}

/// Deterministic per-sample RNG stream derived from (dataset seed, sample id),
/// so per-sample generation is order-independent.
fn sample_rng(seed: u64, domain: Domain, id: u64) -> ChaCha8Rng {
    let tag = match domain {
        Domain::Source => 0x5345u64,
        Domain::Target => 0x5441u64,
    };
    ChaCha8Rng::seed_from_u64(mix64(seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15), id))
}

/// splitmix64-style mixing of two words.
pub(crate) fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stratified scene assignment: per-scene counts follow the pool weights
/// (largest-remainder rounding, minimum one sample per scene when the count
/// permits), then the sequence is shuffled. Every allowed scene is therefore
/// represented whenever count >= |allowed|.
fn assign_scenes(
    count: usize,
    allowed: &[usize],
    weights: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quota: Vec<f64> = weights.iter().map(|w| w / total * count as f64).collect();
    let mut counts: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    if count >= allowed.len() {
        for c in counts.iter_mut() {
            if *c == 0 {
                *c = 1;
            }
        }
    }
    // distribute the remainder by largest fractional part (ties by index)
    while counts.iter().sum::<usize>() < count {
        let mut best = 0usize;
        let mut best_gap = f64::NEG_INFINITY;
        for (i, (&q, &c)) in quota.iter().zip(counts.iter()).enumerate() {
            let gap = q - c as f64;
            if gap > best_gap {
                best_gap = gap;
                best = i;
            }
        }
        counts[best] += 1;
    }
    while counts.iter().sum::<usize>() > count {
        let mut best = 0usize;
        let mut best_gap = f64::INFINITY;
        for (i, (&q, &c)) in quota.iter().zip(counts.iter()).enumerate() {
            if c <= 1 && count >= allowed.len() {
                continue;
            }
            let gap = q - c as f64;
            if gap < best_gap && c > 0 {
                best_gap = gap;
                best = i;
            }
        }
        counts[best] -= 1;
    }
    let mut out = Vec::with_capacity(count);
    for (i, &scene) in allowed.iter().enumerate() {
        out.extend(std::iter::repeat(scene).take(counts[i]));
    }
    for i in (1..out.len()).rev() {
        let j = rng.gen_range(0..=i);
        out.swap(i, j);
    }
    out
}

fn generate_sample(spec: &DomainSpec, domain: Domain, id: u64, scene_id: usize) -> Sample {
    let scene = &spec.scenes[scene_id];
    let hw = spec.height * spec.width;
    let mut pixels = Array2::zeros((hw, spec.d_in));
    let mut labels = Array1::zeros(hw);
    let edges = band_edges(spec.width, &scene.band_weights);
    let mut rng = sample_rng(spec.seed, domain, id);
    let mut means: Vec<Vec<f64>> = scene
        .means
        .iter()
        .map(|m| match domain {
            Domain::Source => m.clone(),
            Domain::Target => spec.shift.apply(m),
        })
        .collect();
    if scene.offset_jitter > 0.0 {
        let jitter = Normal::new(0.0, scene.offset_jitter).unwrap();
        let dx = jitter.sample(&mut rng);
        let dy = jitter.sample(&mut rng);
        for m in &mut means {
            m[0] += dx;
            if m.len() > 1 {
                m[1] += dy;
            }
        }
    }
    if scene.appearance_jitter > 0.0 && spec.d_in > 2 {
        let jitter = Normal::new(0.0, scene.appearance_jitter).unwrap();
        let disp: Vec<f64> = (2..spec.d_in).map(|_| jitter.sample(&mut rng)).collect();
        for m in &mut means {
            for (d, dv) in disp.iter().enumerate() {
                m[2 + d] += dv;
            }
        }
    }
    for r in 0..spec.height {
        for c in 0..spec.width {
            let band = edges.windows(2).position(|e| c >= e[0] && c < e[1]).unwrap();
            let pix = r * spec.width + c;
            labels[pix] = scene.categories[band] as u16;
            let sigma = scene.sigmas[band];
            for d in 0..spec.d_in {
                let noise = if sigma > 0.0 {
                    Normal::new(0.0, sigma).unwrap().sample(&mut rng)
                } else {
                    0.0
                };
                pixels[(pix, d)] = means[band][d] + noise;
            }
        }
    }
    Sample {
        id,
        domain,
        pixels,
        labels: Some(labels),
        scene: scene_id as u32,
    }
}

/// Generate the paired datasets. Deterministic for a fixed spec; source
/// samples only draw from shared scenes, the target additionally covers the
/// exclusive ones.
pub fn generate(spec: &DomainSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let shared = spec.shared_scene_ids();
    let all: Vec<usize> = (0..spec.scenes.len()).collect();
    let weights_shared: Vec<f64> = shared.iter().map(|&i| spec.scenes[i].pool_weight).collect();
    let weights_all: Vec<f64> = all.iter().map(|&i| spec.scenes[i].pool_weight).collect();

    let mut rng_s = ChaCha8Rng::seed_from_u64(mix64(spec.seed, 0x51));
    let scene_s = assign_scenes(spec.n_source, &shared, &weights_shared, &mut rng_s);
    let mut rng_t = ChaCha8Rng::seed_from_u64(mix64(spec.seed, 0x52));
    let scene_t = assign_scenes(spec.n_target, &all, &weights_all, &mut rng_t);

    let source = Dataset {
        domain: Domain::Source,
        height: spec.height,
        width: spec.width,
        d_in: spec.d_in,
        num_classes: spec.num_classes,
        seed: spec.seed,
        samples: scene_s
            .iter()
            .enumerate()
            .map(|(i, &s)| generate_sample(spec, Domain::Source, i as u64, s))
            .collect(),
    };
    let target = Dataset {
        domain: Domain::Target,
        height: spec.height,
        width: spec.width,
        d_in: spec.d_in,
        num_classes: spec.num_classes,
        seed: spec.seed,
        samples: scene_t
            .iter()
            .enumerate()
            .map(|(i, &s)| generate_sample(spec, Domain::Target, i as u64, s))
            .collect(),
    };
    Ok((source, target))
}

/// Generate an evaluation split: target-domain statistics, fresh seed.
pub fn generate_eval(spec: &DomainSpec, n_eval: usize, eval_seed: u64) -> Result<Dataset> {
    let mut eval_spec = spec.clone();
    eval_spec.seed = eval_seed;
    eval_spec.n_target = n_eval;
    eval_spec.n_source = 1; // unused
    let (_, eval) = generate(&eval_spec)?;
    Ok(eval)
}

// --- dataset file format ----------------------------------------------------
//
// magic "AADATA01" | domain u8 | n u64 | h u32 | w u32 | d_in u32 | C u32 |
// seed u64 | per sample: id u64 | scene u32 | has_labels u8 |
// pixels f64[h*w*d_in] | labels u16[h*w] (if has_labels)

const DATA_MAGIC: &[u8; 8] = b"AADATA01";

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DATA_MAGIC)?;
    w.write_u8(match dataset.domain {
        Domain::Source => 0,
        Domain::Target => 1,
    })?;
    w.write_u64::<LittleEndian>(dataset.samples.len() as u64)?;
    w.write_u32::<LittleEndian>(dataset.height as u32)?;
    w.write_u32::<LittleEndian>(dataset.width as u32)?;
    w.write_u32::<LittleEndian>(dataset.d_in as u32)?;
    w.write_u32::<LittleEndian>(dataset.num_classes as u32)?;
    w.write_u64::<LittleEndian>(dataset.seed)?;
    for s in &dataset.samples {
        if s.pixels.dim() != (dataset.num_pixels(), dataset.d_in) {
            return Err(Error::Dimension(format!(
                "sample {} pixel grid {:?} does not match dataset dims",
                s.id,
                s.pixels.dim()
            )));
        }
        w.write_u64::<LittleEndian>(s.id)?;
        w.write_u32::<LittleEndian>(s.scene)?;
        w.write_u8(s.labels.is_some() as u8)?;
        for v in s.pixels.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
        if let Some(labels) = &s.labels {
            for l in labels.iter() {
                w.write_u16::<LittleEndian>(*l)?;
            }
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("dataset file truncated before magic".into()))?;
    if &magic != DATA_MAGIC {
        return Err(Error::Format(format!(
            "bad dataset magic {:?}; expected {:?}",
            magic, DATA_MAGIC
        )));
    }
    let domain = match r.read_u8()? {
        0 => Domain::Source,
        1 => Domain::Target,
        d => return Err(Error::Format(format!("unknown domain tag {d}"))),
    };
    let n = r.read_u64::<LittleEndian>()? as usize;
    let height = r.read_u32::<LittleEndian>()? as usize;
    let width = r.read_u32::<LittleEndian>()? as usize;
    let d_in = r.read_u32::<LittleEndian>()? as usize;
    let num_classes = r.read_u32::<LittleEndian>()? as usize;
    let seed = r.read_u64::<LittleEndian>()?;
    let hw = height * width;
    let truncated = |_| Error::Format("dataset file truncated mid-sample".into());
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let scene = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let has_labels = r.read_u8().map_err(truncated)? != 0;
        let mut pixels = Array2::zeros((hw, d_in));
        for v in pixels.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(truncated)?;
        }
        let labels = if has_labels {
            let mut l = Array1::zeros(hw);
            for v in l.iter_mut() {
                *v = r.read_u16::<LittleEndian>().map_err(truncated)?;
            }
            Some(l)
        } else {
            None
        };
        samples.push(Sample {
            id,
            domain,
            pixels,
            labels,
            scene,
        });
    }
    Ok(Dataset {
        domain,
        height,
        width,
        d_in,
        num_classes,
        seed,
        samples,
    })
}

// --- benchmark presets -------------------------------------------------------

/// Mean vector for one (scene, category) cell: the scene offset occupies the
/// first two dims, category appearance a ring position in dims 2..4, and a
/// scene "style" coordinate fills dim 4. `angle_steps` is measured in units
/// of one full category step, so fractional values land between the canonical
/// ring positions.
fn ring_mean(
    offset: (f64, f64),
    angle_steps: f64,
    num_classes: usize,
    radius: f64,
    style: f64,
) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * angle_steps / num_classes as f64;
    vec![offset.0, offset.1, radius * angle.cos(), radius * angle.sin(), style]
}

struct SceneShape {
    offset: (f64, f64),
    /// Appearance angle offset in category steps (0 = canonical ring).
    angle_shift: f64,
    radius: f64,
    style: f64,
    sigma: f64,
    offset_jitter: f64,
    appearance_jitter: f64,
    pool_weight: f64,
    exclusive: bool,
}

fn scene(shape: SceneShape, num_classes: usize) -> SceneSpec {
    let cats: Vec<usize> = (0..num_classes).collect();
    SceneSpec {
        band_weights: vec![1.0; num_classes],
        means: cats
            .iter()
            .map(|&k| {
                ring_mean(
                    shape.offset,
                    k as f64 + shape.angle_shift,
                    num_classes,
                    shape.radius,
                    shape.style,
                )
            })
            .collect(),
        sigmas: vec![shape.sigma; num_classes],
        offset_jitter: shape.offset_jitter,
        appearance_jitter: shape.appearance_jitter,
        pool_weight: shape.pool_weight,
        categories: cats,
        exclusive: shape.exclusive,
    }
}

/// Default desk-scale benchmark: 3 shared scenes on the canonical appearance
/// ring plus 2 target-exclusive scenes living in feature regions the source
/// never occupies (off-ring angles, one at larger radius, wider noise), so a
/// source-only model has no basis for labeling them while a handful of
/// annotations pins them down.
pub fn default_benchmark(seed: u64) -> DomainSpec {
    let c = 4;
    let mk = |offset,
              angle_shift,
              radius,
              style,
              sigma,
              offset_jitter,
              appearance_jitter,
              pool_weight,
              exclusive| {
        scene(
            SceneShape {
                offset,
                angle_shift,
                radius,
                style,
                sigma,
                offset_jitter,
                appearance_jitter,
                pool_weight,
                exclusive,
            },
            c,
        )
    };
    DomainSpec {
        num_classes: c,
        height: 8,
        width: 8,
        d_in: 5,
        n_source: 400,
        n_target: 400,
        seed,
        shift: Shift {
            rotate: 0.02,
            scale: 1.01,
            translate: vec![0.03, -0.02, 0.01, 0.0, 0.0],
        },
        scenes: vec![
            mk((0.0, 0.0), 0.0, 1.6, 0.0, 0.25, 0.5, 0.0, 1.0, false),
            mk((2.2, 0.0), 0.0, 1.6, 0.0, 0.25, 0.5, 0.0, 1.0, false),
            mk((0.0, 2.2), 0.0, 1.6, 0.0, 0.25, 0.5, 0.0, 1.0, false),
            // Exclusive pair: rare in the pool, same offset, same off-ring
            // positions, opposite style signs carrying conflicting
            // position-to-class maps. Appearance jitter makes single samples
            // unrepresentative, so each scene needs several annotations.
            mk((3.5, 3.5), 0.5, 1.6, 1.2, 0.25, 0.8, 0.35, 0.3, true),
            mk((3.5, 3.5), 1.5, 1.6, -1.2, 0.25, 0.8, 0.35, 0.3, true),
        ],
    }
}

/// Benchmark engineered so the global centroid of the source scenes falls
/// near the exclusive scene: under a single anchor every shared sample looks
/// "far" while the trap scene looks close and gets skipped; per-mode anchors
/// expose it as far from every mode.
pub fn centroid_trap_benchmark(seed: u64) -> DomainSpec {
    let c = 4;
    let mk = |offset,
              angle_shift,
              radius,
              style,
              sigma,
              offset_jitter,
              appearance_jitter,
              pool_weight,
              exclusive| {
        scene(
            SceneShape {
                offset,
                angle_shift,
                radius,
                style,
                sigma,
                offset_jitter,
                appearance_jitter,
                pool_weight,
                exclusive,
            },
            c,
        )
    };
    DomainSpec {
        num_classes: c,
        height: 8,
        width: 8,
        d_in: 5,
        n_source: 400,
        n_target: 400,
        seed,
        shift: Shift {
            rotate: 0.1,
            scale: 1.0,
            translate: vec![0.1, 0.1, 0.0, 0.0, 0.0],
        },
        scenes: vec![
            // Source modes at the corners of a triangle in offset space.
            mk((0.0, 0.0), 0.0, 1.2, 0.0, 0.25, 0.3, 0.0, 1.0, false),
            mk((4.0, 0.0), 0.0, 1.2, 0.0, 0.25, 0.3, 0.0, 1.0, false),
            mk((0.0, 4.0), 0.0, 1.2, 0.0, 0.25, 0.3, 0.0, 1.0, false),
            // Trap: sits at the triangle centroid with novel appearance.
            mk((1.33, 1.33), 0.5, 1.2, 0.8, 0.4, 0.3, 0.2, 1.0, true),
        ],
    }
}
