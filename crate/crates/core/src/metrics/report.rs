//! The full evaluation: backbone features, distribution distances and contact
//! statistics for a set of generated pairs against reference data.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backbone::{pair_clouds, FeatureBackbone};
use super::contact::{contact_stats, proximity_ratio, DepthAggregate, PROXIMITY};
use super::stats::{diversity, fhid, khid, precision_recall};
use crate::data::Dataset;
use crate::hand::{HandParam, KinematicModel, Side};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Rows per KHID subset; capped by the smaller set.
    pub khid_subset: usize,
    pub khid_subsets: usize,
    pub diversity_pairs: usize,
    pub k: usize,
    pub depth: DepthAggregate,
    pub proximity: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            khid_subset: 1000,
            khid_subsets: 100,
            diversity_pairs: 300,
            k: 3,
            depth: DepthAggregate::Mean,
            proximity: PROXIMITY,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub fhid: f64,
    pub khid: f64,
    pub diversity: f64,
    pub precision: f64,
    pub recall: f64,
    pub pen_vol_mm3: f64,
    pub pen_vol_cm3: f64,
    pub pen_dist_cm: f64,
    pub prox_ratio: f64,
    pub n_generated: usize,
    pub n_reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub metrics: GroupMetrics,
    pub feature_dim: usize,
    pub backbone_checksum: String,
    pub config: EvalConfig,
    /// Present for object-conditional evaluation; the top-level metrics are
    /// then the mean over categories.
    pub per_category: Option<BTreeMap<String, GroupMetrics>>,
}

/// Mean penetration volume, depth and proximity over the generated pairs.
pub fn contact_summary(
    model: &KinematicModel,
    pairs: &[(HandParam, HandParam)],
    depth: DepthAggregate,
    tau: f64,
) -> Result<(f64, f64, f64)> {
    let stats = pairs
        .par_iter()
        .map(|(l, r)| {
            let left = model.forward_kinematics(l, Side::Left)?;
            let right = model.forward_kinematics(r, Side::Right)?;
            contact_stats(&right, &left, depth)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = stats.len().max(1) as f64;
    let vol = stats.iter().map(|s| s.pen_vol_mm3).sum::<f64>() / n;
    let dist = stats.iter().map(|s| s.pen_dist_cm).sum::<f64>() / n;
    Ok((vol, dist, proximity_ratio(&stats, tau)))
}

fn group_metrics(
    model: &KinematicModel,
    gen_pairs: &[(HandParam, HandParam)],
    gen: &DMatrix<f64>,
    reference: &DMatrix<f64>,
    cfg: &EvalConfig,
) -> Result<GroupMetrics> {
    let (n, m) = (gen.nrows(), reference.nrows());
    if n <= cfg.k || m <= cfg.k {
        return Err(Error::InvalidArgument(format!(
            "need more than k={} generated and reference pairs, got {n} and {m}",
            cfg.k
        )));
    }
    let subset = cfg.khid_subset.min(n).min(m);
    let (precision, recall) = precision_recall(reference, gen, cfg.k)?;
    let (pen_vol_mm3, pen_dist_cm, prox_ratio) = contact_summary(model, gen_pairs, cfg.depth, cfg.proximity)?;
    Ok(GroupMetrics {
        fhid: fhid(gen, reference)?,
        khid: khid(gen, reference, subset, cfg.khid_subsets, cfg.seed)?,
        diversity: diversity(gen, cfg.diversity_pairs, cfg.seed)?,
        precision,
        recall,
        pen_vol_mm3,
        pen_vol_cm3: pen_vol_mm3 * 1e-3,
        pen_dist_cm,
        prox_ratio,
        n_generated: n,
        n_reference: m,
    })
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx.iter())
}

fn mean_of(groups: &BTreeMap<String, GroupMetrics>) -> GroupMetrics {
    let k = groups.len() as f64;
    let avg = |f: fn(&GroupMetrics) -> f64| groups.values().map(f).sum::<f64>() / k;
    GroupMetrics {
        fhid: avg(|g| g.fhid),
        khid: avg(|g| g.khid),
        diversity: avg(|g| g.diversity),
        precision: avg(|g| g.precision),
        recall: avg(|g| g.recall),
        pen_vol_mm3: avg(|g| g.pen_vol_mm3),
        pen_vol_cm3: avg(|g| g.pen_vol_cm3),
        pen_dist_cm: avg(|g| g.pen_dist_cm),
        prox_ratio: avg(|g| g.prox_ratio),
        n_generated: groups.values().map(|g| g.n_generated).sum(),
        n_reference: groups.values().map(|g| g.n_reference).sum(),
    }
}

/// Scores `generated` against `reference`. With `categories` (one label per
/// generated pair) and an object dataset, metrics are computed per category.
pub fn evaluate(
    model: &KinematicModel,
    backbone: &FeatureBackbone,
    backbone_checksum: &str,
    generated: &[(HandParam, HandParam)],
    categories: Option<&[String]>,
    reference: &Dataset,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ref_pairs: Vec<_> = reference.samples.iter().map(|s| (s.left, s.right)).collect();
    let gen_feat = backbone.features(&pair_clouds(model, &backbone.cfg, generated)?);
    let ref_feat = backbone.features(&pair_clouds(model, &backbone.cfg, &ref_pairs)?);
    info!("features: {} generated, {} reference", gen_feat.nrows(), ref_feat.nrows());

    let (metrics, per_category) = match categories {
        None => (group_metrics(model, generated, &gen_feat, &ref_feat, cfg)?, None),
        Some(cats) => {
            if cats.len() != generated.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} categories for {} generated pairs",
                    cats.len(),
                    generated.len()
                )));
            }
            let mut gen_idx: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, c) in cats.iter().enumerate() {
                gen_idx.entry(c.clone()).or_default().push(i);
            }
            let mut ref_idx: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, s) in reference.samples.iter().enumerate() {
                let o = s.object.as_ref().ok_or(Error::MissingObject)?;
                ref_idx.entry(o.category.clone()).or_default().push(i);
            }
            let mut groups = BTreeMap::new();
            for (cat, gi) in &gen_idx {
                let ri = ref_idx
                    .get(cat)
                    .ok_or_else(|| Error::InvalidArgument(format!("no reference pairs for category {cat:?}")))?;
                let pairs: Vec<_> = gi.iter().map(|&i| generated[i]).collect();
                let g = group_metrics(model, &pairs, &rows(&gen_feat, gi), &rows(&ref_feat, ri), cfg)?;
                groups.insert(cat.clone(), g);
            }
            (mean_of(&groups), Some(groups))
        }
    };
    Ok(MetricReport {
        metrics,
        feature_dim: backbone.feature_dim(),
        backbone_checksum: backbone_checksum.into(),
        config: cfg.clone(),
        per_category,
    })
}

/// One CSV row per category (or a single `all` row).
pub fn write_category_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut out = String::from(
        "category,fhid,khid,diversity,precision,recall,pen_vol_mm3,pen_vol_cm3,pen_dist_cm,prox_ratio,n_generated,n_reference\n",
    );
    let mut row = |name: &str, g: &GroupMetrics| {
        out.push_str(&format!(
            "{name},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{}\n",
            g.fhid,
            g.khid,
            g.diversity,
            g.precision,
            g.recall,
            g.pen_vol_mm3,
            g.pen_vol_cm3,
            g.pen_dist_cm,
            g.prox_ratio,
            g.n_generated,
            g.n_reference
        ));
    };
    match &report.per_category {
        Some(groups) => groups.iter().for_each(|(c, g)| row(c, g)),
        None => row("all", &report.metrics),
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
