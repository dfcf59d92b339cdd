//! Two-hand datasets: records, on-disk format, splits and the synthetic
//! generator.

pub mod synthetic;

use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::hand::{HandParam, HAND_DIM};
use crate::io::{f32_bytes, f64_from_bytes, read_json, sha256_hex, write_json};
use crate::rng::{self, Domain};
use crate::{Error, Result};

pub use synthetic::{generate_synthetic, ModeSpec, SyntheticSpec};

pub const OBJECT_POINTS: usize = 512;
pub const RECORD_LAYOUT: &str = "x_l[64]|x_r[64]";
pub const PARAMS_FILE: &str = "params.f32";
pub const OBJECTS_FILE: &str = "objects.f32";
pub const CATEGORIES_FILE: &str = "categories.json";
pub const MODES_FILE: &str = "modes.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCloud {
    pub points: Vec<Vector3<f64>>,
    pub category: String,
}

/// One interacting pair. `left` is stored in the mirrored convention: its
/// mesh is the reflection of the right-hand mesh of `left.mirror()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoHandSample {
    pub left: HandParam,
    pub right: HandParam,
    pub object: Option<ObjectCloud>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<TwoHandSample>,
    /// Ground-truth generating mode per sample, when known.
    pub modes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: String,
    pub count: usize,
    pub layout: String,
    pub units: String,
    pub object: bool,
    pub object_points: usize,
    pub checksum: String,
    #[serde(default)]
    pub objects_checksum: Option<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_objects(&self) -> bool {
        self.samples.first().is_some_and(|s| s.object.is_some())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            modes: self.modes.as_ref().map(|m| indices.iter().map(|&i| m[i]).collect()),
        }
    }
}

/// Rows of `[x_l | x_r]` as little-endian `f32`.
pub fn params_blob(pairs: &[(HandParam, HandParam)]) -> Vec<u8> {
    let flat: Vec<f64> = pairs.iter().flat_map(|(l, r)| l.0.iter().chain(r.0.iter()).copied()).collect();
    f32_bytes(&flat)
}

pub fn parse_params_blob(bytes: &[u8], count: usize) -> Result<Vec<(HandParam, HandParam)>> {
    if bytes.len() != count * 2 * HAND_DIM * 4 {
        return Err(Error::LayoutMismatch(format!(
            "params blob holds {} bytes, {count} records need {}",
            bytes.len(),
            count * 2 * HAND_DIM * 4
        )));
    }
    let values = f64_from_bytes(bytes);
    Ok(values
        .chunks(2 * HAND_DIM)
        .map(|r| (HandParam::from_slice(&r[..HAND_DIM]).unwrap(), HandParam::from_slice(&r[HAND_DIM..]).unwrap()))
        .collect())
}

pub fn save_dataset(dir: &Path, data: &Dataset, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pairs: Vec<_> = data.samples.iter().map(|s| (s.left, s.right)).collect();
    let params = params_blob(&pairs);
    let path = dir.join(PARAMS_FILE);
    std::fs::write(&path, &params).map_err(|e| Error::io(&path, e))?;
    let object = data.has_objects();
    let mut objects_checksum = None;
    if object {
        let mut flat = Vec::with_capacity(data.len() * OBJECT_POINTS * 3);
        let mut cats = Vec::with_capacity(data.len());
        for s in &data.samples {
            let o = s.object.as_ref().ok_or(Error::MissingObject)?;
            if o.points.len() != OBJECT_POINTS {
                return Err(Error::LayoutMismatch(format!("object clouds must have {OBJECT_POINTS} points")));
            }
            flat.extend(o.points.iter().flat_map(|p| [p.x, p.y, p.z]));
            cats.push(o.category.clone());
        }
        let bytes = f32_bytes(&flat);
        objects_checksum = Some(sha256_hex(&bytes));
        let path = dir.join(OBJECTS_FILE);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join(CATEGORIES_FILE), &cats)?;
    }
    if let Some(modes) = &data.modes {
        write_json(&dir.join(MODES_FILE), modes)?;
    }
    let manifest = DatasetManifest {
        format: "twohand-dataset".into(),
        version: crate::VERSION.into(),
        count: data.len(),
        layout: RECORD_LAYOUT.into(),
        units: "m".into(),
        object,
        object_points: if object { OBJECT_POINTS } else { 0 },
        checksum: sha256_hex(&params),
        objects_checksum,
        extra,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

fn verified_blob(path: &Path, expected: &str) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            actual,
        });
    }
    Ok(bytes)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.units != "m" {
        return Err(Error::UnitMismatch(manifest.units));
    }
    if manifest.layout != RECORD_LAYOUT {
        return Err(Error::LayoutMismatch(format!("unknown record layout {:?}", manifest.layout)));
    }
    let path = dir.join(PARAMS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    // size first, so truncation reads as a layout problem
    let pairs = parse_params_blob(&bytes, manifest.count)?;
    let actual = sha256_hex(&bytes);
    if actual != manifest.checksum {
        return Err(Error::ChecksumMismatch {
            path,
            expected: manifest.checksum,
            actual,
        });
    }
    let mut objects: Vec<Option<ObjectCloud>> = vec![None; manifest.count];
    if manifest.object {
        let n = manifest.object_points;
        let opath = dir.join(OBJECTS_FILE);
        let expected = manifest.objects_checksum.clone().unwrap_or_default();
        let raw = std::fs::read(&opath).map_err(|e| Error::io(&opath, e))?;
        if raw.len() != manifest.count * n * 12 {
            return Err(Error::LayoutMismatch(format!("{} has the wrong size", opath.display())));
        }
        let bytes = verified_blob(&opath, &expected)?;
        let cats: Vec<String> = read_json(&dir.join(CATEGORIES_FILE))?;
        if cats.len() != manifest.count {
            return Err(Error::LayoutMismatch("category count differs from record count".into()));
        }
        let values = f64_from_bytes(&bytes);
        for (i, (chunk, cat)) in values.chunks(n * 3).zip(cats).enumerate() {
            objects[i] = Some(ObjectCloud {
                points: chunk.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
                category: cat,
            });
        }
    }
    let modes_path = dir.join(MODES_FILE);
    let modes: Option<Vec<usize>> = if modes_path.exists() { Some(read_json(&modes_path)?) } else { None };
    Ok(Dataset {
        samples: pairs
            .into_iter()
            .zip(objects)
            .map(|((left, right), object)| TwoHandSample { left, right, object })
            .collect(),
        modes,
    })
}

/// Disjoint, exhaustive, seeded train/val/test index sets.
pub fn split(count: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng::stream(seed, Domain::Split, 0));
    let n_train = (fractions[0] * count as f64).round() as usize;
    let n_val = ((fractions[1] * count as f64).round() as usize).min(count - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok([idx, val, test])
}

#[cfg(test)]
mod tests;
