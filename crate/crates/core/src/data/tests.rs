use super::*;
use crate::hand::{KinematicModel, Side};
use crate::sampler::penetration_set;

#[test]
fn single_mode_without_jitter_is_constant() {
    let mut spec = SyntheticSpec::toy(1, 20, 3);
    spec.curl_sigma = 0.0;
    spec.theta_sigma = 0.0;
    spec.modes[0].cone_deg = 0.0;
    spec.modes[0].translation_sigma = 0.0;
    spec.max_penetration = None;
    let data = generate_synthetic(&spec).unwrap();
    assert!(data.samples.iter().all(|s| s == &data.samples[0]));
}

#[test]
fn zero_threshold_emits_only_clear_pairs() {
    let mut spec = SyntheticSpec::toy(2, 40, 8);
    spec.max_penetration = Some(0.0);
    let data = generate_synthetic(&spec).unwrap();
    let model = KinematicModel::builtin();
    for s in &data.samples {
        let a = model.forward_kinematics(&s.right, Side::Right).unwrap().mesh;
        let b = model.forward_kinematics(&s.left, Side::Left).unwrap().mesh;
        // brute-force nearest vertex with lowest-index ties
        let mut any = false;
        for v in &a.vertices {
            let mut best = 0;
            for j in 1..b.vertices.len() {
                if (v - b.vertices[j]).norm_squared() < (v - b.vertices[best]).norm_squared() {
                    best = j;
                }
            }
            any |= -b.normals[best].dot(&(v - b.vertices[best])) > 0.0;
        }
        assert!(!any);
        assert!(penetration_set(&a, &b).is_empty());
    }
}

#[test]
fn infeasible_spec_stalls() {
    let mut spec = SyntheticSpec::toy(1, 1, 0);
    spec.modes[0].translation = [0.0, 0.0, 0.0];
    spec.modes[0].rotation = [0.0, 0.0, 0.0];
    spec.max_penetration = Some(0.0);
    assert!(matches!(generate_synthetic(&spec), Err(Error::RejectionStall(1000))));
}

#[test]
fn round_trip_is_bit_exact_and_seeded() {
    let mut spec = SyntheticSpec::toy(2, 1000, 1);
    spec.max_penetration = None;
    let data = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data, serde_json::Value::Null).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), data);
    let again = generate_synthetic(&spec).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    save_dataset(dir2.path(), &again, serde_json::Value::Null).unwrap();
    for f in [PARAMS_FILE, MANIFEST_FILE, MODES_FILE] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap());
    }
}

#[test]
fn objects_round_trip() {
    let mut spec = SyntheticSpec::toy(2, 10, 4);
    spec.objects = true;
    spec.max_penetration = None;
    let data = generate_synthetic(&spec).unwrap();
    assert!(data.has_objects());
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data, serde_json::Value::Null).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), data);
}

#[test]
fn corrupt_files_are_rejected() {
    let mut spec = SyntheticSpec::toy(2, 10, 4);
    spec.max_penetration = None;
    let data = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data, serde_json::Value::Null).unwrap();
    let params = dir.path().join(PARAMS_FILE);
    let bytes = std::fs::read(&params).unwrap();
    std::fs::write(&params, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::LayoutMismatch(_))));
    let mut flipped = bytes.clone();
    flipped[10] ^= 0x40;
    std::fs::write(&params, &flipped).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::ChecksumMismatch { .. })));
    std::fs::write(&params, &bytes).unwrap();
    let manifest = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).unwrap().replace("\"units\": \"m\"", "\"units\": \"mm\"");
    std::fs::write(&manifest, text).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::UnitMismatch(_))));
}

#[test]
fn split_sizes_and_coverage() {
    let [a, b, c] = split(100, [0.7, 0.15, 0.15], 5).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (70, 15, 15));
    let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
    all.sort();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(split(100, [0.7, 0.15, 0.15], 5).unwrap(), [a, b, c]);
    assert!(split(10, [0.5, 0.2, 0.2], 0).is_err());
}

