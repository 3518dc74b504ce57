use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regnet::pipeline::{
    augment, load_cifar, parse_records, serialize_records, synthetic, write_cifar_dir, AugDraw,
    BatchPlan, Dataset, Example, Normalization, Variant, IMAGE_BYTES, SIDE,
};
use regnet::Error;

fn random_bytes(records: usize, variant: Variant, seed: u64) -> Vec<u8> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..records {
        match variant {
            Variant::C10 => out.push(r.random_range(0..10u8)),
            Variant::C100 => {
                out.push(r.random_range(0..20u8));
                out.push(r.random_range(0..100u8));
            }
        }
        out.extend((0..IMAGE_BYTES).map(|_| r.random::<u8>()));
    }
    out
}

#[test]
fn ingestion_is_lossless() {
    for v in [Variant::C10, Variant::C100] {
        let bytes = random_bytes(7, v, 1);
        let ex = parse_records(&bytes, v, Path::new("x.bin")).unwrap();
        assert_eq!(ex.len(), 7);
        assert_eq!(serialize_records(&ex, v), bytes);
    }
}

#[test]
fn truncated_file_reports_path_and_offset() {
    let mut bytes = random_bytes(3, Variant::C10, 2);
    bytes.truncate(bytes.len() - 5);
    match parse_records(&bytes, Variant::C10, Path::new("data_batch_1.bin")) {
        Err(Error::Ingest { path, offset, .. }) => {
            assert_eq!(path, Path::new("data_batch_1.bin"));
            assert_eq!(offset, 2 * 3073);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn out_of_range_label_is_rejected() {
    let mut bytes = random_bytes(2, Variant::C10, 3);
    bytes[3073] = 10;
    match parse_records(&bytes, Variant::C10, Path::new("b")) {
        Err(Error::Ingest { offset, reason, .. }) => {
            assert_eq!(offset, 3073);
            assert!(reason.contains("label 10"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_directory_is_a_user_error() {
    let e = load_cifar(Path::new("/nonexistent/cifar"), Variant::C10).unwrap_err();
    assert!(e.is_user_error());
    assert!(e.to_string().contains("not found"), "{e}");
}

#[test]
fn directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = synthetic(10, 23, 4);
    write_cifar_dir(
        dir.path(),
        Variant::C10,
        &d.examples[..20],
        &d.examples[20..],
    )
    .unwrap();
    let (train, test) = load_cifar(dir.path(), Variant::C10).unwrap();
    assert_eq!(train.examples, d.examples[..20]);
    assert_eq!(test.examples, d.examples[20..]);
}

fn ramp() -> Example {
    Example {
        pixels: (0..IMAGE_BYTES).map(|i| (i % 251) as u8 + 1).collect(),
        label: 3,
        coarse: None,
    }
}

#[test]
fn corner_crop_shifts_and_zero_fills() {
    let ex = ramp();
    let px = |e: &Example, c: usize, y: usize, x: usize| e.pixels[(c * SIDE + y) * SIDE + x];
    // Offset (0, 0) in the padded image: output (y, x) reads source (y - 4, x - 4).
    let a = augment(
        &ex,
        AugDraw {
            dy: 0,
            dx: 0,
            flip: false,
        },
    );
    // Offset (8, 8): output (y, x) reads source (y + 4, x + 4).
    let b = augment(
        &ex,
        AugDraw {
            dy: 8,
            dx: 8,
            flip: false,
        },
    );
    for c in 0..3 {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let want_a = if y >= 4 && x >= 4 {
                    px(&ex, c, y - 4, x - 4)
                } else {
                    0
                };
                assert_eq!(px(&a, c, y, x), want_a);
                let want_b = if y + 4 < SIDE && x + 4 < SIDE {
                    px(&ex, c, y + 4, x + 4)
                } else {
                    0
                };
                assert_eq!(px(&b, c, y, x), want_b);
            }
        }
    }
    assert_eq!(augment(&ex, AugDraw::IDENTITY), ex);
}

#[test]
fn flip_mirrors_columns() {
    let ex = ramp();
    let f = augment(
        &ex,
        AugDraw {
            dy: 4,
            dx: 4,
            flip: true,
        },
    );
    for c in 0..3 {
        for y in 0..SIDE {
            for x in 0..SIDE {
                assert_eq!(
                    f.pixels[(c * SIDE + y) * SIDE + x],
                    ex.pixels[(c * SIDE + y) * SIDE + SIDE - 1 - x]
                );
            }
        }
    }
    assert_eq!(
        augment(
            &f,
            AugDraw {
                dy: 4,
                dx: 4,
                flip: true
            }
        ),
        ex
    );
}

#[test]
fn normalized_training_set_has_zero_mean() {
    let d = synthetic(10, 200, 5);
    let norm = Normalization::measure(&d);
    let plan = BatchPlan::eval(64, norm);
    let mut sum = [0.0f64; 3];
    let mut count = 0.0;
    for b in plan.batches::<f64>(&d, 0) {
        let s = b.images.shape();
        for n in 0..s.n {
            for (c, acc) in sum.iter_mut().enumerate() {
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        *acc += b.images.at(n, c, y, x);
                    }
                }
            }
        }
        count += (s.n * SIDE * SIDE) as f64;
    }
    for s in sum {
        assert!((s / count).abs() < 1e-2);
    }
    assert_eq!(Normalization::from_csv(&norm.to_csv()).unwrap(), norm);
}

#[test]
fn batches_cover_every_index_once_and_reproduce() {
    let d = synthetic(10, 37, 6);
    let plan = BatchPlan::train(9, 8, Normalization::IDENTITY);
    for epoch in 0..3 {
        let mut seen = HashSet::new();
        let mut sizes = Vec::new();
        for b in plan.batches::<f32>(&d, epoch) {
            sizes.push(b.labels.len());
            for (&i, &l) in b.indices.iter().zip(&b.labels) {
                assert!(seen.insert(i));
                assert_eq!(d.examples[i].label, l);
            }
        }
        assert_eq!(seen.len(), 37);
        assert_eq!(sizes, [8, 8, 8, 8, 5]);
        assert_eq!(plan.schedule(37, epoch), plan.schedule(37, epoch));
    }
    assert_ne!(plan.schedule(37, 0).0, plan.schedule(37, 1).0);
    let direct = plan.batch::<f32>(&d, 2, 3).unwrap();
    let walked = plan.batches::<f32>(&d, 2).nth(3).unwrap();
    assert_eq!(direct.images, walked.images);
}

#[test]
fn subset_is_seed_pinned() {
    let d = synthetic(10, 100, 7);
    let a: Dataset = d.subset(30, 1);
    assert_eq!(a, d.subset(30, 1));
    assert_ne!(a, d.subset(30, 2));
    assert_eq!(a.len(), 30);
}
