use proptest::prelude::*;

use segens_core::aggregate::{greedy_match, hungarian_match, DistanceMatrix};
use segens_core::metrics::{aurc, auroc, ece, CalibSample, ScoreRecord};

fn min_cost(d: &DistanceMatrix) -> f64 {
    fn rec(d: &DistanceMatrix, row: usize, used: &mut [bool]) -> f64 {
        if row == d.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for b in 0..d.len() {
            if !used[b] {
                used[b] = true;
                best = best.min(d.get(row, b) + rec(d, row + 1, used));
                used[b] = false;
            }
        }
        best
    }
    rec(d, 0, &mut vec![false; d.len()])
}

fn matrix() -> impl Strategy<Value = DistanceMatrix> {
    (1usize..=6).prop_flat_map(|n| {
        prop::collection::vec(0.0f64..1.0, n * n).prop_map(move |v| DistanceMatrix::new(n, v).unwrap())
    })
}

fn scored(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-5.0f64..5.0, n),
        prop::collection::vec(0.0f64..1.0, n),
    )
}

proptest! {
    #[test]
    fn hungarian_is_optimal(d in matrix()) {
        let h = hungarian_match(&d);
        let g = greedy_match(&d);
        let best = min_cost(&d);
        prop_assert!((h.cost(&d) - best).abs() < 1e-9);
        prop_assert!(g.cost(&d) >= best - 1e-9);
    }

    #[test]
    fn aurc_ignores_monotone_confidence_transforms((conf, risk) in (2usize..60).prop_flat_map(scored)) {
        let records = |f: &dyn Fn(f64) -> f64| -> Vec<ScoreRecord> {
            conf.iter().zip(&risk).enumerate().map(|(i, (&c, &r))| ScoreRecord::new(format!("{i:03}"), f(c), r)).collect()
        };
        let a = aurc(&records(&|c| c)).unwrap();
        let b = aurc(&records(&|c| 3.0 * c.exp() + 1.0)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auroc_complements(scores in prop::collection::vec(-3i32..3, 2..80), flips in prop::collection::vec(any::<bool>(), 80)) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let labels: Vec<bool> = flips[..scores.len()].to_vec();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auroc(&scores, &labels).unwrap();
        let inverted: Vec<bool> = labels.iter().map(|l| !l).collect();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((a + auroc(&scores, &inverted).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((a + auroc(&negated, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ece_is_bounded(samples in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200), bins in 1usize..30) {
        let v = ece(samples.into_iter().map(|(confidence, correct)| CalibSample { confidence, correct }), bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

mod panoptic {
    use std::collections::BTreeSet;

    use proptest::prelude::*;
    use segens_core::fuse::{panoptic_inference, PanopticParams};
    use segens_core::synth::{gen_scene, perturb_sample, Noise, SceneConfig};
    use segens_core::VOID;

    fn segments(ids: &[u32]) -> usize {
        ids.iter()
            .filter(|&&id| id != VOID as u32)
            .collect::<BTreeSet<_>>()
            .len()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        // Holds on synthetic scenes; with heavily overlapping queries a dropped
        // query can resurface once a stronger competitor falls below the threshold.
        #[test]
        fn raising_score_thresh_never_adds_segments(seed in 0u64..1000, sigma in 0.0f32..1.5, lo in 0.05f64..0.9, step in 0.0f64..0.5) {
            let config = SceneConfig::default();
            let ideal = gen_scene(seed, &config).unwrap().ideal_sample();
            let noise = Noise { logit_sigma: sigma, jitter: 0, shuffle: true };
            let (sample, _) = perturb_sample(&ideal, seed, &noise);
            let params = |t: f64| PanopticParams { score_thresh: t, ..PanopticParams::with_things(config.things.iter().copied()) };
            let hi = (lo + step).min(0.99);
            let low = segments(panoptic_inference(&sample, &params(lo)).unwrap().ids());
            let high = segments(panoptic_inference(&sample, &params(hi)).unwrap().ids());
            prop_assert!(high <= low, "{high} > {low} at {lo} -> {hi}");
        }
    }
}
