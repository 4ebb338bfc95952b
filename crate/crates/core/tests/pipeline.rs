use mvtta::evaluation::{single_view_accuracy, sweep};
use mvtta::prediction_store::softmax;
use mvtta::stage1::fit;
use mvtta::stage2::{infer_all, Threshold};
use mvtta::synthetic::{generate, predict, train, ModelConfig, SynthConfig};
use mvtta::uncertainty::entropy;
use mvtta::{Manifest, MetricConfig, MetricKind};

fn run(seed: u64) -> (SynthConfig, Manifest, Manifest) {
    let cfg = SynthConfig { seed, ..SynthConfig::default() };
    let (train_set, test_set) = generate(&cfg).unwrap();
    let (model, _) = train(&train_set, &ModelConfig { seed, ..ModelConfig::default() }).unwrap();
    let train_m = predict(&model, &train_set, 0, seed).unwrap();
    let test_m = predict(&model, &test_set, 0, seed).unwrap();
    (cfg, train_m, test_m)
}

#[test]
fn planted_view_has_lowest_mean_entropy() {
    for seed in 0..4 {
        let (cfg, train_m, _) = run(seed);
        let planted = cfg.planted();
        for c in 0..cfg.num_classes {
            let records: Vec<_> = train_m.records.iter().filter(|r| r.true_class == Some(c)).collect();
            let mean = |view: &str| {
                records
                    .iter()
                    .map(|r| entropy(&softmax(&r.views[view].logits).unwrap()).unwrap().value)
                    .sum::<f64>()
                    / records.len() as f64
            };
            let best = &train_m.view_set.augmentation_views[planted[c]];
            for view in train_m.view_set.iter().filter(|v| *v != best) {
                assert!(
                    mean(best) < mean(view),
                    "seed {seed} class {c}: planted {best} {} vs {view} {}",
                    mean(best),
                    mean(view)
                );
            }
        }
    }
}

#[test]
fn closed_gate_reduces_to_single_view() {
    let (_, train_m, test_m) = run(1);
    let sv = single_view_accuracy(&test_m).unwrap();
    let n = test_m.records.len() as f64;
    for kind in [MetricKind::Entropy, MetricKind::Nll, MetricKind::Brier, MetricKind::Odin, MetricKind::GradNorm] {
        let cfg = MetricConfig::new(kind);
        let (_, table) = fit(&train_m, &cfg).unwrap();
        let result = sweep(&test_m, &table, &cfg, 11).unwrap();
        let top = *result.taus.last().unwrap();
        for tau in [top, top + 1.0, f64::MAX] {
            let (decisions, acc) = infer_all(&test_m, &table, Threshold::new(tau).unwrap(), &cfg, false).unwrap();
            assert!(decisions.iter().all(|d| !d.applied));
            assert_eq!((acc * n).round(), (sv * n).round());
            assert_eq!(acc, sv);
        }
        assert_eq!(*result.accuracies.last().unwrap(), sv);
        let (_, forced) = infer_all(&test_m, &table, Threshold::new(top).unwrap(), &cfg, true).unwrap();
        assert_eq!(result.accuracies[0], forced);
    }
}

#[test]
fn pipeline_is_deterministic() {
    let (_, a_train, a_test) = run(5);
    let (_, b_train, b_test) = run(5);
    assert_eq!(a_train, b_train);
    assert_eq!(a_test, b_test);
    let cfg = MetricConfig::new(MetricKind::Entropy);
    let (sa, ta) = fit(&a_train, &cfg).unwrap();
    let (sb, tb) = fit(&b_train, &cfg).unwrap();
    assert_eq!((sa, ta.clone()), (sb, tb));
    let ra = sweep(&a_test, &ta, &cfg, 11).unwrap();
    let rb = sweep(&b_test, &ta, &cfg, 11).unwrap();
    assert_eq!(ra, rb);
}
