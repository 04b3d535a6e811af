use criterion::{black_box, criterion_group, criterion_main, Criterion};
use landmark_core::env::{self, EnvConfig};
use landmark_core::policy;
use landmark_core::scorer::{self, EncodedTrajectory, ScorerParams, TrainConfig};
use landmark_core::search::{self, SearchConfig};
use landmark_core::trajectory::{self, CollectorSpec};
use landmark_core::{AtomIndex, WeightedRuleSet};

fn getout() -> (EnvConfig, trajectory::Dataset) {
    let cfg = EnvConfig::getout_mini();
    let collector = CollectorSpec::Scripted {
        epsilon: 0.3,
        stall_prob: 0.3,
    };
    let data = trajectory::collect(&cfg, &collector, 50, 500, 0).unwrap();
    (cfg, data)
}

fn bench_scorer(c: &mut Criterion) {
    let (cfg, data) = getout();
    let vocab = env::vocabulary(&cfg);
    let index = AtomIndex::new(&vocab);
    let params = ScorerParams::random(index.len(), 32, 0);
    let pos = EncodedTrajectory::new(&index, &data.positives[0]).unwrap();
    let neg = EncodedTrajectory::new(&index, &data.negatives[0]).unwrap();
    c.bench_function("pair_loss_grad", |b| {
        b.iter(|| scorer::pair_loss_grad(black_box(&params), &pos, &neg).unwrap())
    });
    let tc = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    c.bench_function("train_50_epochs", |b| b.iter(|| scorer::train(&data, &index, &tc).unwrap()));
}

fn bench_search(c: &mut Criterion) {
    let (cfg, data) = getout();
    let vocab = env::vocabulary(&cfg);
    let index = AtomIndex::new(&vocab);
    let tc = TrainConfig {
        threshold: 0.5,
        ..TrainConfig::default()
    };
    let trained = scorer::train(&data, &index, &tc).unwrap();
    let cands = scorer::candidates(&trained.params, &index, &data, 0.5).unwrap();
    let sc = SearchConfig::default();
    c.bench_function("search_getout", |b| {
        b.iter(|| search::search(black_box(&cands), &data, &vocab, &sc).unwrap())
    });
}

fn bench_policy(c: &mut Criterion) {
    let cfg = EnvConfig::getout_mini();
    let vocab = env::vocabulary(&cfg);
    let rules = ["coin1", "flag", "blue_key", "door"]
        .iter()
        .flat_map(|o| {
            [
                format!("move_right(X) :- on_left(X, {o})."),
                format!("move_left(X) :- on_right(X, {o})."),
            ]
        })
        .map(|t| landmark_core::parse_rule(&t, &vocab).unwrap())
        .collect::<Vec<_>>();
    let n = rules.len();
    let set = WeightedRuleSet::new(rules, vec![1.0; n], &vocab).unwrap();
    let state = env::symbolize(&env::reset(&cfg).unwrap());
    c.bench_function("action_distribution", |b| {
        b.iter(|| policy::action_distribution(black_box(&set), &state).unwrap())
    });
    c.bench_function("evaluate_100", |b| b.iter(|| policy::evaluate(&set, &cfg, 100, 0).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_scorer, bench_search, bench_policy
}
criterion_main!(benches);
