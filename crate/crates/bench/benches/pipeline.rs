use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossloc_core::datamodel::Pose;
use crossloc_core::diffcore::{forward, forward_backward, Tensor};
use crossloc_core::encoders::{
    embed_cloud, embed_image, init_params, netvlad, EncoderConfig, Modality,
};
use crossloc_core::retrieval::{build_index, DbEntry};
use crossloc_core::synthbench::{generate_runs, generate_world, RunSpec};

fn random_entries(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<DbEntry> {
    (0..n)
        .map(|i| DbEntry {
            sample_id: i as u64,
            pose: Pose::planar(i as f64, 0.0),
            modality: Modality::Image,
            ev: (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        })
        .collect()
}

fn knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn_top25");
    for dim in [8usize, 128] {
        let mut rng = ChaCha8Rng::seed_from_u64(dim as u64);
        let index = build_index(random_entries(&mut rng, 1000, dim)).unwrap();
        let queries: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        group.bench_with_input(BenchmarkId::new("kdtree", dim), &queries, |b, qs| {
            b.iter(|| {
                for q in qs {
                    std::hint::black_box(index.knn_query(q, 25).unwrap());
                }
            })
        });
        group.bench_with_input(BenchmarkId::new("linear", dim), &queries, |b, qs| {
            b.iter(|| {
                for q in qs {
                    std::hint::black_box(index.brute_force_query(q, 25).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn embedding(c: &mut Criterion) {
    let world = generate_world(1, 8).unwrap();
    let runs = generate_runs(&world, &RunSpec::defaults(2)).unwrap();
    let sample = &runs[0].samples[0];
    let (img, pc) = (sample.image().unwrap(), sample.submap().unwrap());
    let mut group = c.benchmark_group("embed");
    for (name, enc) in [
        ("netvlad", EncoderConfig::default()),
        ("mlp", EncoderConfig::synthbench()),
    ] {
        let params = init_params(&enc, 0).unwrap();
        group.bench_function(BenchmarkId::new("image", name), |b| {
            b.iter(|| embed_image(img, &params, &enc).unwrap())
        });
        group.bench_function(BenchmarkId::new("cloud", name), |b| {
            b.iter(|| embed_cloud(pc, &params, &enc).unwrap())
        });
    }
    group.finish();
}

fn netvlad_head(c: &mut Criterion) {
    let enc = EncoderConfig::default();
    let params = init_params(&enc, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cells = enc.image_cells();
    let feats = Tensor::new(
        vec![cells, enc.dim],
        (0..cells * enc.dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let prefix = Modality::Image.prefix();
    let mut group = c.benchmark_group("netvlad");
    group.bench_function("forward", |b| {
        b.iter(|| {
            forward(&params, |g| {
                let x = g.input(feats.clone());
                netvlad(g, prefix, x)
            })
            .unwrap()
        })
    });
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            forward_backward(&params, |g| {
                let x = g.input(feats.clone());
                let v = netvlad(g, prefix, x)?;
                Ok(g.sum(v))
            })
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, knn, embedding, netvlad_head);
criterion_main!(benches);
