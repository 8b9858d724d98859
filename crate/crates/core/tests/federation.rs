use fedimb::config::{ExperimentConfig, Precision, RunMode};
use fedimb::experiment::{plan, train_plan, Plan};
use fedimb::federation::{
    aggregation_weights, init_params, local_train, mean_loss, run_centralized, run_federation, train_validation_split,
    Aggregation, DataView, FederationConfig, Trainer,
};
use fedimb::imbalance::{client_imbalance, global_class_imbalance, ClassHistogram};
use fedimb::losses::LossKind;

fn smoke(seed: u64) -> (ExperimentConfig, Plan) {
    let mut cfg = ExperimentConfig::smoke();
    cfg.precision = Precision::F64;
    cfg.set_seed(seed);
    let p = plan(&cfg).unwrap();
    (cfg, p)
}

fn with_trainer<R>(cfg: &ExperimentConfig, fed: &FederationConfig, p: &Plan, f: impl FnOnce(&Trainer<'_, f64>) -> R) -> R {
    let features = p.data.features_as::<f64>();
    let view = DataView::new(&features, p.data.labels(), p.data.sample_len()).unwrap();
    let tr = Trainer {
        model: &cfg.model,
        loss: &cfg.loss,
        fed,
        data: view,
        split: &p.imbalance.split,
    };
    f(&tr)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn zero_learning_rate_returns_the_broadcast() {
    let (cfg, p) = smoke(0);
    let fed = FederationConfig {
        learning_rate: 0.0,
        rounds: 1,
        ..cfg.federation.clone()
    };
    let init = init_params::<f64>(&cfg.model, &cfg.loss, 0).unwrap();
    with_trainer(&cfg, &fed, &p, |tr| {
        let shard = &p.partition.clients[0];
        let c_k = client_imbalance(&p.partition.histograms[0], 1e-6).unwrap();
        let classes = global_class_imbalance(&p.partition.histograms, 1e-6).unwrap();
        let out = local_train(tr, &init, shard, c_k, &classes, 3).unwrap();
        assert_eq!(out.params.flatten(), init.flatten());

        let run = run_federation(tr, init.clone(), &p.partition.clients, &p.partition.test).unwrap();
        assert_eq!(run.records.len(), 1);
        assert_eq!(run.params.flatten(), init.flatten());
    });
}

#[test]
fn one_epoch_lowers_the_shard_loss() {
    let mut drops = Vec::new();
    for seed in 0..5 {
        let (cfg, p) = smoke(seed);
        let init = init_params::<f64>(&cfg.model, &cfg.loss, seed).unwrap();
        with_trainer(&cfg, &cfg.federation, &p, |tr| {
            let shard = &p.partition.clients[0];
            let c_k = client_imbalance(&p.partition.histograms[0], 1e-6).unwrap();
            let classes = global_class_imbalance(&p.partition.histograms, 1e-6).unwrap();
            let before = mean_loss(tr, &init, shard, c_k, &classes).unwrap();
            let out = local_train(tr, &init, shard, c_k, &classes, seed).unwrap();
            let after = mean_loss(tr, &out.params, shard, c_k, &classes).unwrap();
            drops.push(before - after);
        });
    }
    assert!(median(drops.clone()) >= 0.0, "{drops:?}");
}

#[test]
fn centralized_equals_single_uniform_client() {
    let (mut cfg, p) = smoke(1);
    cfg.federation.rounds = 4;
    cfg.federation.aggregation = Aggregation::DaflWeighted;
    let mut pool = p.partition.clients.concat();
    pool.sort_unstable();
    let init = init_params::<f64>(&cfg.model, &cfg.loss, 1).unwrap();
    let central = with_trainer(&cfg, &cfg.federation, &p, |tr| run_centralized(tr, init.clone(), &pool).unwrap());

    let fed = FederationConfig {
        aggregation: Aggregation::Uniform,
        ..cfg.federation.clone()
    };
    let (train, val) = train_validation_split(p.data.labels(), &pool, 5, fed.seed).unwrap();
    let single = with_trainer(&cfg, &fed, &p, |tr| run_federation(tr, init.clone(), &[train], &val).unwrap());
    assert_eq!(central.records, single.records);
    assert_eq!(central.params.flatten(), single.params.flatten());
}

#[test]
fn validation_split_is_nine_to_one_per_class() {
    let (_, p) = smoke(2);
    let mut pool = p.partition.clients.concat();
    pool.sort_unstable();
    let (train, val) = train_validation_split(p.data.labels(), &pool, 5, 0).unwrap();
    assert_eq!(train.len() + val.len(), pool.len());
    let labels = p.data.labels();
    let hp = ClassHistogram::from_labels(pool.iter().map(|&i| labels[i]), 5).unwrap();
    let hv = ClassHistogram::from_labels(val.iter().map(|&i| labels[i]), 5).unwrap();
    for c in 0..5 {
        assert!((hv.counts()[c] as f64 - 0.1 * hp.counts()[c] as f64).abs() <= 1.0);
    }
}

#[test]
fn serial_and_parallel_records_match() {
    let (mut cfg, p) = smoke(3);
    cfg.federation.rounds = 5;
    cfg.federation.parallel = false;
    let a = train_plan::<f64>(&cfg, &p).unwrap();
    cfg.federation.parallel = true;
    let b = train_plan::<f64>(&cfg, &p).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.params.flatten(), b.params.flatten());
}

#[test]
fn logged_weights_and_class_coefficients_reproduce_offline() {
    let (mut cfg, p) = smoke(4);
    cfg.federation.rounds = 5;
    let out = train_plan::<f64>(&cfg, &p).unwrap();
    let classes = global_class_imbalance(&p.partition.histograms, cfg.loss.epsilon).unwrap();
    for r in &out.records {
        assert_eq!(r.weights, aggregation_weights(&r.client_coeffs, cfg.federation.epsilon).unwrap());
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(r.weights.iter().all(|&w| w >= 0.0));
        assert_eq!(r.class_coeffs, classes);
        for (k, &c) in r.selected.iter().zip(&r.client_coeffs) {
            assert_eq!(c, client_imbalance(&p.partition.histograms[*k], cfg.loss.epsilon).unwrap());
        }
    }
}

#[test]
fn partial_participation_is_seeded() {
    let (mut cfg, p) = smoke(5);
    cfg.federation.rounds = 6;
    cfg.federation.client_fraction = 0.5;
    let a = train_plan::<f64>(&cfg, &p).unwrap();
    let b = train_plan::<f64>(&cfg, &p).unwrap();
    assert_eq!(a.records, b.records);
    for r in &a.records {
        assert_eq!(r.selected.len(), 2);
        assert!(r.selected.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn centralized_accuracy_tracks_federated() {
    let mut central = Vec::new();
    let mut federated = Vec::new();
    for seed in 0..5 {
        let (mut cfg, p) = smoke(seed);
        cfg.precision = Precision::F32;
        cfg.loss.kind = LossKind::Dafl;
        federated.push(train_plan::<f32>(&cfg, &p).unwrap().records.last().unwrap().metrics.accuracy);
        cfg.mode = RunMode::Centralized;
        central.push(train_plan::<f32>(&cfg, &p).unwrap().records.last().unwrap().metrics.accuracy);
    }
    let (c, f) = (median(central), median(federated));
    assert!((c - f).abs() <= 0.05, "centralized {c} vs federated {f}");
}
