use kino_core::checks::random_scan_inputs;
use kino_core::cost::{clip_flops, flops_forward, training_compute, ArchSpec, ViewSpec};
use kino_core::kpe::{context_offsets, from_grid, to_grid};
use kino_core::ks4::{combine, scan_parallel, scan_sequential};
use kino_core::pks4::{make_trajectories, reassemble_perm};
use kino_core::synth::{generate_dataset, SyntheticVideoSpec, TaskMode};
use kino_core::train::cross_entropy_smoothed;
use kino_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seq(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_round_trip(b in 1usize..3, t in 1usize..4, hp in 1usize..4, wp in 1usize..4, c in 1usize..5) {
        let x = Tensor::new([b, t, hp * wp, c], seq(b * t * hp * wp * c)).unwrap();
        let g = to_grid(&x, hp, wp).unwrap();
        prop_assert_eq!(g.dims(), (b, t, c, hp, wp));
        let back = from_grid(&g).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn grid_places_token_by_row(hp in 1usize..4, wp in 1usize..4, c in 1usize..3) {
        let x = Tensor::new([1, 1, hp * wp, c], seq(hp * wp * c)).unwrap();
        let g = to_grid(&x, hp, wp).unwrap();
        for n in 0..hp * wp {
            for ch in 0..c {
                prop_assert_eq!(g.data().at(&[0, 0, ch, n / wp, n % wp]), x.at(&[0, 0, n, ch]));
            }
        }
    }

    #[test]
    fn offsets_are_symmetric(k in 0usize..12) {
        let o = context_offsets(k);
        prop_assert_eq!(o.len(), 2 * (k / 2));
        prop_assert!(!o.contains(&0));
        for &d in &o {
            prop_assert!(o.contains(&-d));
        }
    }

    #[test]
    fn trajectories_round_trip(b in 1usize..3, t in 1usize..5, n in 1usize..6, c in 1usize..4) {
        let x = Tensor::new([b, t, n, c], seq(b * t * n * c)).unwrap();
        let tr = make_trajectories(&x).unwrap();
        prop_assert_eq!(tr.shape(), &[b * n, t, c]);
        prop_assert_eq!(tr.at(&[b * n - 1, t - 1, 0]), x.at(&[b - 1, t - 1, n - 1, 0]));
        let back = reassemble_perm(&tr, b).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn combine_is_associative(p in prop::array::uniform6(-2.0f64..2.0)) {
        let (a, b, c) = ((p[0], p[1]), (p[2], p[3]), (p[4], p[5]));
        let l = combine(combine(a, b), c);
        let r = combine(a, combine(b, c));
        prop_assert!((l.0 - r.0).abs() < 1e-12 && (l.1 - r.1).abs() < 1e-12);
    }

    #[test]
    fn scan_modes_agree(seed in 0u64..1000, lanes in 1usize..3, t in 1usize..40, c in 1usize..5, s in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, d) = random_scan_inputs::<f64>(lanes, t, c, s, &mut rng).unwrap();
        let a = scan_sequential(&inputs, &d).unwrap();
        let b = scan_parallel(&inputs, &d).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn flops_scale_with_views(frames in 1usize..40, clips in 1usize..4, crops in 1usize..4) {
        let arch = ArchSpec::vit_b16();
        let one = flops_forward(&arch, &ViewSpec::new(frames, 1, 1).unwrap()).unwrap();
        let many = flops_forward(&arch, &ViewSpec::new(frames, clips, crops).unwrap()).unwrap();
        let k = (clips * crops) as f64;
        prop_assert!((many.total_gflops - k * one.total_gflops).abs() < 1e-9 * many.total_gflops);
        let more = clip_flops(&arch.vit, frames + 1).total();
        prop_assert!(more > clip_flops(&arch.vit, frames).total());
    }

    #[test]
    fn view_spec_round_trip(f in 1usize..64, c in 1usize..5, s in 1usize..5) {
        let v = ViewSpec::new(f, c, s).unwrap();
        let parsed: ViewSpec = v.to_string().parse().unwrap();
        prop_assert_eq!(parsed, v);
    }

    #[test]
    fn compute_is_bilinear(e in 1u64..40, n in 1u64..400_000, g in 1.0f64..10_000.0) {
        let base = training_compute(e, n, g);
        prop_assert!((training_compute(2 * e, n, g) - 2.0 * base).abs() <= 1e-12 * base);
        prop_assert!((training_compute(e, n, 3.0 * g) - 3.0 * base).abs() <= 1e-12 * base);
    }

    #[test]
    fn cross_entropy_is_non_negative(
        logits in prop::collection::vec(-20.0f64..20.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
        smoothing in 0.0f64..0.5,
    ) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([3, 4], logits).unwrap());
        let l = cross_entropy_smoothed(x, &labels, smoothing).unwrap().item().unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn datasets_are_balanced_and_bounded(seed in 0u64..10_000, per_class in 1usize..4, motion in any::<bool>()) {
        let mode = if motion { TaskMode::Motion } else { TaskMode::Appearance };
        let spec = SyntheticVideoSpec { seed, ..Default::default() };
        let ds = generate_dataset(&spec, mode, 4 * per_class).unwrap();
        let mut counts = vec![0usize; ds.num_classes()];
        for s in &ds.samples {
            counts[s.label] += 1;
            prop_assert!(s.pixels.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
        prop_assert!(counts.iter().all(|&c| c == per_class));
        let again = generate_dataset(&spec, mode, 4 * per_class).unwrap();
        for (a, b) in ds.samples.iter().zip(&again.samples) {
            prop_assert_eq!(a.pixels.data(), b.pixels.data());
        }
    }
}
