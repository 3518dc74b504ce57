mod common;

use common::{direct_conv, materialized_rows, max_rel, rng};
use proptest::prelude::*;
use regnet::arch::{count, diff_reports, ArchSpec, Family, Network};
use regnet::blocks::SeGate;
use regnet::conv::conv2d_forward;
use regnet::convrnn::{init_state, CellKind, ConvCell, FactorizedConv};
use regnet::params::ParamStore;
use regnet::pipeline::{
    augment, parse_records, serialize_records, AugDraw, BatchPlan, Normalization, Variant,
};
use regnet::tape::{Mode, Tape};
use regnet::trainer::{lr_at, LrSchedule};
use regnet::Tensor;

fn cell_kind() -> impl Strategy<Value = CellKind> {
    prop_oneof![
        Just(CellKind::Vanilla),
        Just(CellKind::Gru),
        Just(CellKind::Lstm)
    ]
}

fn cifar_spec() -> impl Strategy<Value = ArchSpec> {
    (
        prop_oneof![
            Just(Family::ResNet),
            Just(Family::RegNet),
            Just(Family::SeResNet),
            Just(Family::SeRegNet)
        ],
        cell_kind(),
        1usize..4,
        prop_oneof![Just(10usize), Just(100usize)],
        prop::collection::vec(any::<bool>(), 3),
    )
        .prop_map(|(family, cell, n, classes, mask)| {
            let spec = ArchSpec::cifar(family, Some(cell), n, classes);
            if family.is_regulated() && mask.iter().any(|&m| m) {
                let stages: Vec<usize> = (0..3).filter(|&i| mask[i]).collect();
                spec.with_regulated(&stages)
            } else {
                spec
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3,
        groups in prop_oneof![Just(1usize), Just(2), Just(4)],
        cin_g in 1usize..3,
        cout_g in 1usize..3,
        h in 3usize..9,
        w in 3usize..9,
        (k, pad) in prop_oneof![Just((1usize, 0usize)), Just((3, 1)), Just((3, 0)), Just((5, 2))],
        stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn([n, groups * cin_g, h, w], &mut r);
        let wt = Tensor::<f64>::randn([groups * cout_g, cin_g, k, k], &mut r);
        let b = Tensor::<f64>::randn([groups * cout_g, 1, 1, 1], &mut r);
        let got = conv2d_forward(&x, &wt, Some(&b), stride, pad, groups).unwrap();
        let want = direct_conv(&x, &wt, Some(&b), stride, pad, groups);
        prop_assert!(max_rel(&got, &want) < 1e-6);
    }

    #[test]
    fn factorized_conv_and_cells_keep_shape(
        kind in cell_kind(),
        width in 1usize..9,
        h in 1usize..7,
        w in 1usize..7,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let fc = FactorizedConv::new(&mut store, "f", width, false, &mut r).unwrap();
        prop_assert_eq!(store.num_scalars(), 11 * width);
        let cell = ConvCell::new(&mut store, "cell", kind, width, &mut r).unwrap();
        let x = Tensor::<f64>::randn([2, width, h, w], &mut r);
        let xx = Tensor::<f64>::randn([2, 2 * width, h, w], &mut r);
        let mut tape = Tape::new(&mut store, Mode::Train);
        let xv = tape.input(xx).unwrap();
        let y = fc.forward(&mut tape, xv).unwrap();
        prop_assert_eq!(tape.shape(y), x.shape());
        let xv = tape.input(x.clone()).unwrap();
        let mut state = init_state(&mut tape, kind, 2, width, h, w).unwrap();
        for t in 1..=3 {
            let (out, next) = cell.step(&mut tape, xv, &state).unwrap();
            prop_assert_eq!(tape.shape(out), x.shape());
            prop_assert_eq!(tape.shape(next.h), x.shape());
            prop_assert_eq!(next.c.is_some(), kind == CellKind::Lstm);
            prop_assert_eq!(next.step, t);
            state = next;
        }
    }

    #[test]
    fn factorized_mac_ratio_is_eighteen_n_over_eleven(width in 1usize..4096) {
        let dense = FactorizedConv::dense_macs_per_pixel(width);
        let fact = FactorizedConv::macs_per_pixel(width);
        prop_assert_eq!(11 * dense, 18 * width * fact);
    }

    #[test]
    fn se_keeps_shape_and_gates_in_unit_interval(
        groups in 1usize..5,
        reduction in prop_oneof![Just(1usize), Just(2), Just(4)],
        side in 1usize..5,
        seed in any::<u64>(),
    ) {
        let c = groups * reduction * 2;
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let se = SeGate::new(&mut store, "se", c, reduction, &mut r).unwrap();
        let x = Tensor::<f64>::randn([2, c, side, side], &mut r);
        let mut tape = Tape::new(&mut store, Mode::Train);
        let xv = tape.input(x.clone()).unwrap();
        let s = se.gate(&mut tape, xv).unwrap();
        prop_assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let y = se.forward(&mut tape, xv).unwrap();
        prop_assert_eq!(tape.shape(y), x.shape());
    }

    #[test]
    fn analytic_count_equals_materialized(spec in cifar_spec()) {
        let report = count(&spec).unwrap();
        let net = Network::<f64>::build(&spec, 0).unwrap();
        let rows = materialized_rows(&net.store);
        prop_assert_eq!(report.total_params(), rows.values().sum::<i64>());
        prop_assert_eq!(report.total_params(), report.rows.iter().map(|r| r.params).sum::<i64>());
        let zero = diff_reports(&report, &report);
        prop_assert!(zero.rows.iter().all(|r| r.params == 0 && r.macs == 0));
    }

    #[test]
    fn regulator_strictly_adds_params(spec in cifar_spec()) {
        prop_assume!(spec.family.is_regulated());
        let mut plain = spec.clone();
        plain.family = spec.family.baseline();
        plain.cell = None;
        plain.regulated_stages = vec![false; 3];
        prop_assert!(count(&spec).unwrap().total_params() > count(&plain).unwrap().total_params());
    }

    #[test]
    fn config_text_round_trips(spec in cifar_spec()) {
        let back = ArchSpec::from_config(&spec.to_config()).unwrap();
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn augmentation_keeps_label_and_size(
        pixels in prop::collection::vec(any::<u8>(), 3072),
        label in 0usize..100,
        dy in 0usize..9,
        dx in 0usize..9,
        flip in any::<bool>(),
    ) {
        let ex = regnet::pipeline::Example { pixels, label, coarse: Some(3) };
        let out = augment(&ex, AugDraw { dy, dx, flip });
        prop_assert_eq!(out.label, label);
        prop_assert_eq!(out.coarse, Some(3));
        prop_assert_eq!(out.pixels.len(), 3072);
        prop_assert_eq!(out.image::<f32>().shape(), ex.image::<f32>().shape());
    }

    #[test]
    fn records_round_trip(raw in prop::collection::vec(any::<u8>(), 1..4), classes in prop_oneof![Just(Variant::C10), Just(Variant::C100)]) {
        let rec = classes.record_len();
        let mut bytes = Vec::new();
        for (i, &b) in raw.iter().enumerate() {
            let mut r: Vec<u8> = (0..rec).map(|j| (j as u8).wrapping_mul(b).wrapping_add(i as u8)).collect();
            let labels = classes.label_bytes();
            for v in &mut r[..labels] {
                *v %= classes.classes() as u8;
            }
            bytes.extend(r);
        }
        let ex = parse_records(&bytes, classes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(serialize_records(&ex, classes), bytes);
    }

    #[test]
    fn each_epoch_covers_every_index_once(
        n in 1usize..300,
        batch in 1usize..70,
        seed in any::<u64>(),
        epoch in 0usize..5,
    ) {
        let plan = BatchPlan::train(seed, batch, Normalization::IDENTITY);
        let (order, draws) = plan.schedule(n, epoch);
        prop_assert_eq!(draws.len(), n);
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(plan.schedule(n, epoch), (order, draws));
        prop_assert_eq!(plan.num_batches(n), n.div_ceil(batch));
    }

    #[test]
    fn step_schedule_is_non_increasing(
        decay in prop::collection::btree_set(0usize..200, 0..4),
        initial in 1e-4f64..1.0,
        factor in 0.01f64..1.0,
    ) {
        let s = LrSchedule { initial, decay_epochs: decay.into_iter().collect(), factor };
        prop_assert!(s.validate().is_ok());
        let lrs: Vec<f64> = (0..210).map(|e| lr_at(e, &s)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(lrs[0], if s.decay_epochs.first() == Some(&0) { initial * factor } else { initial });
    }
}
