use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

fn entry(id: u64, ev: Vec<f32>) -> DbEntry {
    DbEntry {
        sample_id: id,
        pose: Pose::planar(id as f64, 0.0),
        modality: Modality::Image,
        ev,
    }
}

fn random_entries(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<DbEntry> {
    (0..n)
        .map(|i| {
            entry(
                i as u64 * 3 + 1,
                (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            )
        })
        .collect()
}

/// Independent linear scan: sort every entry by `(distance, id)`.
fn oracle(entries: &[DbEntry], q: &[f64], k: usize) -> Vec<u64> {
    let mut all: Vec<(f64, u64)> = entries
        .iter()
        .map(|e| {
            let d: f64 =
                e.ev.iter()
                    .zip(q)
                    .map(|(&a, b)| (a as f64 - b).powi(2))
                    .sum();
            (d, e.sample_id)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, id)| id).collect()
}

#[test]
fn single_entry_index() {
    let idx = build_index(vec![entry(7, vec![0.5, -0.5])]).unwrap();
    let r = idx.knn_query(&[10.0, 10.0], 3).unwrap();
    assert_eq!(r.ids(), vec![7]);
    assert_eq!(idx.node_count(), 1);
}

#[test]
fn duplicates_tie_by_sample_id() {
    let idx = build_index(vec![
        entry(9, vec![1.0, 1.0]),
        entry(2, vec![1.0, 1.0]),
        entry(5, vec![0.0, 0.0]),
    ])
    .unwrap();
    let r = idx.knn_query(&[1.0, 1.0], 2).unwrap();
    assert_eq!(r.ids(), vec![2, 9]);
    assert_eq!(r.hits[0].distance, 0.0);
    let all = idx.knn_query(&[1.0, 1.0], 10).unwrap();
    assert_eq!(all.ids(), vec![2, 9, 5]);
    assert!(all.hits.windows(2).all(|w| w[0].distance <= w[1].distance));
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(matches!(build_index(vec![]), Err(Error::Empty(_))));
    assert!(build_index(vec![entry(1, vec![0.0]), entry(2, vec![0.0, 1.0])]).is_err());
    let idx = build_index(vec![entry(1, vec![0.0, 0.0])]).unwrap();
    assert!(idx.knn_query(&[0.0, 0.0], 0).is_err());
    assert!(idx.knn_query(&[0.0], 1).is_err());
}

#[test]
fn kd_tree_matches_linear_scan() {
    for (seed, dim) in [(0u64, 8usize), (1, 128)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = random_entries(&mut rng, 1000, dim);
        let idx = build_index(entries.clone()).unwrap();
        assert_eq!(idx.len(), 1000);
        for _ in 0..100 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = idx.knn_query(&q, 25).unwrap();
            assert_eq!(r.ids(), oracle(&entries, &q, 25));
            assert_eq!(
                r,
                QueryResult {
                    visited: r.visited,
                    ..idx.brute_force_query(&q, 25).unwrap()
                }
            );
        }
    }
}

#[test]
fn stored_vector_is_its_own_nearest_neighbor() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let entries = random_entries(&mut rng, 200, 16);
    let idx = build_index(entries.clone()).unwrap();
    for e in entries.iter().step_by(17) {
        let r = idx.knn_query(&e.ev_f64(), 1).unwrap();
        assert_eq!(r.hits[0].sample_id, e.sample_id);
        assert_eq!(r.hits[0].distance, 0.0);
    }
}

#[test]
fn clustered_queries_visit_few_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 8;
    let centers: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let c = &centers[rng.random_range(0..centers.len())];
        c.iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + 0.1 * z
            })
            .collect()
    };
    let entries: Vec<DbEntry> = (0..10_000)
        .map(|i| entry(i, sample(&mut rng).into_iter().map(|v| v as f32).collect()))
        .collect();
    let idx = build_index(entries).unwrap();
    let mut visits: Vec<usize> = (0..200)
        .map(|_| idx.knn_query(&sample(&mut rng), 1).unwrap().visited)
        .collect();
    visits.sort();
    let median = visits[visits.len() / 2] as f64 / idx.node_count() as f64;
    assert!(median < 0.3, "median visit fraction {median}");
}

#[test]
fn evdb_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut entries = random_entries(&mut rng, 30, 12);
    entries[3].modality = Modality::Cloud;
    entries[4].pose = Pose::new(1.5, -2.25, 0.5, 3.0, -0.1, 0.2, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("db.evdb");
    write_evdb(&path, &entries).unwrap();
    let back = read_evdb(&path).unwrap();
    assert_eq!(back, entries);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"EVDB\x01");
    assert_eq!(encode_evdb(&back).unwrap(), bytes);
    assert_eq!(bytes.len(), 13 + 30 * (8 + 48 + 1 + 4 * 12));
}

#[test]
fn evdb_errors_name_the_file() {
    let bytes = encode_evdb(&[entry(1, vec![1.0, 2.0])]).unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'X';
    let err = decode_evdb(&bad, Path::new("dir/db.evdb"))
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("dir/db.evdb") && err.contains("magic"),
        "{err}"
    );
    let err = decode_evdb(&bytes[..bytes.len() - 1], Path::new("t.evdb")).unwrap_err();
    assert!(err.to_string().contains("t.evdb"));
    let mut tag = bytes;
    tag[13 + 56] = 9;
    assert!(decode_evdb(&tag, Path::new("m.evdb")).is_err());
    assert!(encode_evdb(&[entry(1, vec![1.0]), entry(2, vec![1.0, 2.0])]).is_err());
}

#[test]
fn cross_modal_query_finds_itself() {
    use crate::encoders::init_params;
    use crate::synthbench::{generate_runs, generate_world, RunSpec};
    let world = generate_world(3, 12).unwrap();
    let runs = generate_runs(&world, &RunSpec::defaults(2)).unwrap();
    let enc = EncoderConfig::default();
    let params = init_params(&enc, 1).unwrap();
    let db = &runs[0].samples;
    for m in Modality::ALL {
        let r = cross_modal_query(db, &db[5], m, m, &params, &enc, 3).unwrap();
        assert_eq!(r.hits[0].sample_id, 5);
        assert!(r.hits.iter().all(|h| h.modality == m));
    }
    let r = cross_modal_query(
        db,
        &db[5],
        Modality::Cloud,
        Modality::Image,
        &params,
        &enc,
        100,
    )
    .unwrap();
    assert_eq!(r.hits.len(), 12);
    let mut bare = db[5].clone();
    bare.image = None;
    assert!(cross_modal_query(
        db,
        &bare,
        Modality::Cloud,
        Modality::Image,
        &params,
        &enc,
        1
    )
    .is_err());
}

proptest! {
    #[test]
    fn exact_on_tie_heavy_grids(
        pts in prop::collection::vec(prop::collection::vec(-2i8..3, 3), 1..60),
        q in prop::collection::vec(-3i8..4, 3),
        k in 1usize..70,
    ) {
        let entries: Vec<DbEntry> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| entry((i as u64 * 7919) % 101, p.iter().map(|&v| v as f32).collect()))
            .collect();
        let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        let idx = build_index(entries.clone()).unwrap();
        prop_assert_eq!(idx.knn_query(&q, k).unwrap().ids(), oracle(&entries, &q, k));
    }
}
