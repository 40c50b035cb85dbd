mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgl_core::data::{LabelSplit, SplitScheme};
use sgl_core::metrics::{
    ood_from_predictions, random_set_accuracy, test_sample_accuracy, test_set_accuracy,
    Classifier,
};
use sgl_core::oracle::{output_set, project_to_seen, refinement_check, seen_label_check};
use sgl_core::viz::{blue_area_fraction, rasterize, result_panel, Bounds, BLUE, ORANGE, WHITE};
use sgl_core::Tensor;

use common::{lookup_classifier, uniform_points};

fn scheme() -> impl Strategy<Value = SplitScheme> {
    prop_oneof![
        Just(SplitScheme::Diagonal),
        Just(SplitScheme::Tile),
        Just(SplitScheme::OneLabel),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_the_grid(scheme in scheme(), c1 in 2usize..12, c2 in 2usize..12) {
        let c2 = if scheme == SplitScheme::Diagonal { c1 } else { c2 };
        let s = LabelSplit::new(scheme, c1, c2).unwrap();
        prop_assert!(s.train_combos.is_disjoint(&s.test_combos));
        prop_assert_eq!(s.train_combos.len() + s.test_combos.len(), c1 * c2);
        prop_assert!(!s.test_combos.is_empty());
        prop_assert!(s.factors_seen_in_training());
    }

    #[test]
    fn new_classes_split_halves(c in 2usize..20) {
        let s = LabelSplit::new(SplitScheme::NewClasses, c, 0).unwrap();
        prop_assert_eq!(s.train_combos.len(), c / 2);
        prop_assert!(s.test_combos.iter().all(|t| t[0] >= c / 2));
    }

    #[test]
    fn projection_is_refined_idempotent_and_seen_only(
        seed in any::<u64>(),
        cells in 2usize..8,
        n_train in 1usize..40,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = lookup_classifier(seed, cells, [4, 4]);
        let x_train = uniform_points(n_train, 2, &mut rng);
        let probes = uniform_points(500, 2, &mut rng);
        let f = project_to_seen(&g, &x_train).unwrap();
        prop_assert_eq!(refinement_check(&f, &g, &probes).unwrap(), None);

        let ff = project_to_seen(&f, &x_train).unwrap();
        prop_assert_eq!(ff.predict(&probes).unwrap(), f.predict(&probes).unwrap());

        let y_train = output_set(&g, &x_train).unwrap();
        prop_assert_eq!(seen_label_check(&f, &probes, &y_train).unwrap(), 0);
    }

    #[test]
    fn sample_accuracy_ignores_order(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = lookup_classifier(seed ^ 1, 3, [3, 3]);
        let x = uniform_points(n, 2, &mut rng);
        let truths: Vec<Vec<usize>> = (0..n).map(|i| vec![i % 3, (i / 3) % 3]).collect();
        let before = test_sample_accuracy(&g, &x, &truths).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let xs = x.select_rows(&order).unwrap();
        let ts: Vec<Vec<usize>> = order.iter().map(|&i| truths[i].clone()).collect();
        prop_assert_eq!(test_sample_accuracy(&g, &xs, &ts).unwrap(), before);

        let test: BTreeSet<Vec<usize>> = [vec![0, 1], vec![2, 2]].into();
        prop_assert_eq!(test_set_accuracy(&g, &xs, &test).unwrap(), test_set_accuracy(&g, &x, &test).unwrap());
        let preds = g.predict(&x).unwrap();
        let shuffled: Vec<Vec<usize>> = order.iter().map(|&i| preds[i].clone()).collect();
        prop_assert_eq!(ood_from_predictions(&preds, &test, 2), ood_from_predictions(&shuffled, &test, 2));
    }

    #[test]
    fn result_panel_covers_every_cell(seed in any::<u64>(), w in 2usize..40, h in 2usize..40) {
        let g = lookup_classifier(seed, 4, [2, 2]);
        let raster = rasterize(&g, Bounds::new(-0.5, 0.5, -0.5, 0.5).unwrap(), w, h).unwrap();
        let panel = result_panel(&raster, &[1, 1]).unwrap();
        prop_assert_eq!(panel.count(BLUE) + panel.count(WHITE) + panel.count(ORANGE), w * h);
        let blue = blue_area_fraction(&raster, &[1, 1]).unwrap();
        prop_assert!((blue - panel.count(BLUE) as f64 / (w * h) as f64).abs() < 1e-12);
    }

    #[test]
    fn blue_fraction_zero_when_combo_never_predicted(seed in any::<u64>(), w in 2usize..30) {
        let g = lookup_classifier(seed, 5, [2, 2]);
        let clamp = sgl_core::oracle::ClassifierHandle::from_fn("no-new", move |x| {
            let p = g.predict(&Tensor::from_rows(&[x])).unwrap().remove(0);
            if p == [1, 1] { vec![0, 0] } else { p }
        });
        let raster = rasterize(&clamp, Bounds::new(-1.0, 1.0, -1.0, 1.0).unwrap(), w, w).unwrap();
        prop_assert_eq!(blue_area_fraction(&raster, &[1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn projected_outputs_never_hit_test_combos(seed in any::<u64>(), n_train in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = lookup_classifier(seed, 6, [5, 5]);
        let x_train = uniform_points(n_train, 3, &mut rng);
        let f = project_to_seen(&g, &x_train).unwrap();
        let seen = output_set(&g, &x_train).unwrap();
        let test: BTreeSet<Vec<usize>> = (0..5)
            .flat_map(|a| (0..5).map(move |b| vec![a, b]))
            .filter(|c| !seen.contains(c))
            .collect();
        prop_assume!(!test.is_empty());
        let probes = uniform_points(300, 3, &mut rng);
        prop_assert_eq!(test_set_accuracy(&f, &probes, &test).unwrap(), 0.0);
        prop_assert_eq!(random_set_accuracy(&f, &[3], &test, 300, &mut rng).unwrap(), 0.0);
    }
}
