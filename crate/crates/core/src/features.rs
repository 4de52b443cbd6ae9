//! Image-level feature vectors: per-category masked mean pooling of encoder
//! outputs, concatenated across categories in a fixed order. Categories with
//! no pixels under the governing label map contribute an all-zero block and a
//! false presence bit.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::LatentMap;

/// Which label map governed the pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    GroundTruth,
    Predicted,
    Pseudo,
}

/// Per-category mean latent vectors with member counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPools {
    /// C x d_lat; row c is the mean latent over pixels labeled c (zero when absent).
    pub means: Array2<f64>,
    pub counts: Vec<usize>,
}

/// Length C*d_lat concatenation of the per-category means.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVector {
    pub values: Array1<f64>,
    pub presence: Vec<bool>,
    pub label_kind: LabelKind,
}

impl ImageVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean latent vector per category under `label_map`.
pub fn category_pool(
    latent: &LatentMap,
    label_map: &Array1<u16>,
    num_classes: usize,
) -> Result<CategoryPools> {
    if label_map.len() != latent.num_pixels() {
        return Err(Error::Dimension(format!(
            "label map has {} pixels, latent has {}",
            label_map.len(),
            latent.num_pixels()
        )));
    }
    if let Some(&l) = label_map.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::Dimension(format!(
            "label {l} out of range [0, {num_classes})"
        )));
    }
    let d_lat = latent.dim_lat();
    let mut means = Array2::zeros((num_classes, d_lat));
    let mut counts = vec![0usize; num_classes];
    for (pix, &l) in label_map.iter().enumerate() {
        let c = l as usize;
        counts[c] += 1;
        for d in 0..d_lat {
            means[(c, d)] += latent.0[(pix, d)];
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            for d in 0..d_lat {
                means[(c, d)] /= n as f64;
            }
        }
    }
    Ok(CategoryPools { means, counts })
}

/// Concatenate the category means in order 0..C-1.
pub fn image_vector(pools: &CategoryPools, label_kind: LabelKind) -> ImageVector {
    let (c, d_lat) = pools.means.dim();
    let mut values = Array1::zeros(c * d_lat);
    for cat in 0..c {
        for d in 0..d_lat {
            values[cat * d_lat + d] = pools.means[(cat, d)];
        }
    }
    ImageVector {
        values,
        presence: pools.counts.iter().map(|&n| n > 0).collect(),
        label_kind,
    }
}

/// Pool then concatenate in one call.
pub fn pooled_image_vector(
    latent: &LatentMap,
    label_map: &Array1<u16>,
    num_classes: usize,
    label_kind: LabelKind,
) -> Result<ImageVector> {
    Ok(image_vector(&category_pool(latent, label_map, num_classes)?, label_kind))
}

/// Adjoint of the pooling: the gradient at pixel i labeled c is the c-th
/// upstream block divided by that category's pixel count.
pub fn pool_backward(
    upstream: &Array1<f64>,
    label_map: &Array1<u16>,
    counts: &[usize],
    d_lat: usize,
) -> Result<Array2<f64>> {
    if upstream.len() != counts.len() * d_lat {
        return Err(Error::Dimension(format!(
            "upstream length {} != C*d_lat = {}",
            upstream.len(),
            counts.len() * d_lat
        )));
    }
    let mut grad = Array2::zeros((label_map.len(), d_lat));
    for (pix, &l) in label_map.iter().enumerate() {
        let c = l as usize;
        let n = counts[c];
        if n == 0 {
            continue;
        }
        for d in 0..d_lat {
            grad[(pix, d)] = upstream[c * d_lat + d] / n as f64;
        }
    }
    Ok(grad)
}

/// One row of the feature dump.
#[derive(Debug, Clone, Serialize)]
pub struct FeatureRow {
    pub id: u64,
    pub domain: String,
    pub scene: u32,
    pub label_kind: LabelKind,
    pub presence: Vec<bool>,
    pub values: Vec<f64>,
}

/// Write ImageVectors to a CSV for external visualization.
pub fn dump_features(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = rows.first().map(|r| r.values.len()).unwrap_or(0);
    let c = rows.first().map(|r| r.presence.len()).unwrap_or(0);
    write!(w, "id,domain,scene,label_kind")?;
    for i in 0..c {
        write!(w, ",present_{i}")?;
    }
    for i in 0..dim {
        write!(w, ",v{i}")?;
    }
    writeln!(w)?;
    for r in rows {
        let kind = match r.label_kind {
            LabelKind::GroundTruth => "ground_truth",
            LabelKind::Predicted => "predicted",
            LabelKind::Pseudo => "pseudo",
        };
        write!(w, "{},{},{},{}", r.id, r.domain, r.scene, kind)?;
        for &p in &r.presence {
            write!(w, ",{}", p as u8)?;
        }
        for &v in &r.values {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
