use diffcore::Graph;
use gridood::assign::{build_targets, ResponsibilityConfig};
use gridood::checkpoint::Mode;
use gridood::loss::loss_graph;
use gridood::net::{param_group, ParamGroup};
use gridood::scenes::{generate_dataset, DatasetSpec, Scene, SplitCounts};
use gridood::train::{train_from, Trainer};
use gridood::{train, Dataset, Error, Network, NetworkConfig, TrainConfig};

fn small_dataset(train: usize, val: usize) -> Dataset {
    let counts = SplitCounts {
        train,
        val,
        test_id: 2,
        test_ood: 2,
    };
    generate_dataset(&DatasetSpec::standard(3, 64, 4, counts)).unwrap()
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 9,
        mode,
        ..TrainConfig::default()
    }
}

#[test]
fn two_runs_are_bit_identical() {
    let ds = small_dataset(8, 4);
    let cfg = small_config(Mode::Yolood);
    let (a, log_a) = train(&ds, &NetworkConfig::new(64, 4), &cfg).unwrap();
    let (b, log_b) = train(&ds, &NetworkConfig::new(64, 4), &cfg).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(log_a.to_jsonl().unwrap(), log_b.to_jsonl().unwrap());
    assert_eq!(log_a.records.len(), 2);
    assert_eq!(a.meta.epoch, 2);
}

#[test]
fn single_batch_overfits() {
    let ds = small_dataset(4, 1);
    let net = Network::init(NetworkConfig::new(64, 4), 1).unwrap();
    let mut trainer = Trainer::new(net, small_config(Mode::Yolood)).unwrap();
    let batch: Vec<&Scene> = ds.train.iter().collect();
    let first = trainer.step(&batch).unwrap().total;
    let mut last = first;
    for _ in 1..50 {
        last = trainer.step(&batch).unwrap().total;
    }
    assert!(last < 0.5 * first, "initial {first}, final {last}");
}

fn group_changes(before: &Network, after: &Network) -> [bool; 3] {
    let mut changed = [false; 3];
    for ((name, a), (_, b)) in before.params.iter().zip(after.params.iter()) {
        if a.data() != b.data() {
            let g = match param_group(name) {
                ParamGroup::Backbone => 0,
                ParamGroup::GridHeads => 1,
                ParamGroup::FlatHead => 2,
            };
            changed[g] = true;
        }
    }
    changed
}

#[test]
fn only_the_active_head_moves() {
    let ds = small_dataset(8, 2);
    let init = Network::init(NetworkConfig::new(64, 4), 4).unwrap();
    let mut cfg = small_config(Mode::Yolood);
    cfg.epochs = 1;
    let (ck, _) = train_from(init.clone(), &ds.train, &ds.val, &cfg).unwrap();
    let trained = Network::from_params(ck.config, ck.params).unwrap();
    assert_eq!(group_changes(&init, &trained), [true, true, false]);

    cfg.mode = Mode::Flat;
    let (ck, _) = train_from(init.clone(), &ds.train, &ds.val, &cfg).unwrap();
    let trained = Network::from_params(ck.config, ck.params).unwrap();
    assert_eq!(group_changes(&init, &trained), [true, false, true]);
}

#[test]
fn plateau_shrinks_learning_rates_in_the_log() {
    let ds = small_dataset(4, 2);
    let cfg = TrainConfig {
        epochs: 6,
        // tiny rates keep validation AP essentially flat
        lr_backbone: 1e-12,
        lr_heads: 1e-12,
        ..small_config(Mode::Yolood)
    };
    let (_, log) = train(&ds, &NetworkConfig::new(64, 4), &cfg).unwrap();
    let lrs: Vec<f64> = log.records.iter().map(|r| r.lr_heads).collect();
    assert_eq!(lrs[0], 1e-12);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(lrs[5] < 1e-12, "{lrs:?}");
}

#[test]
fn non_finite_weights_abort_with_last_good_checkpoint() {
    let ds = small_dataset(4, 2);
    let mut net = Network::init(NetworkConfig::new(64, 4), 2).unwrap();
    net.params.get_mut("backbone.stage1.kernel").unwrap().data_mut()[0] = 1e308;
    let err = train_from(net.clone(), &ds.train, &ds.val, &small_config(Mode::Yolood)).unwrap_err();
    match err {
        Error::Diverged { epoch, last_good, .. } => {
            assert_eq!(epoch, 1);
            assert_eq!(last_good.meta.epoch, 0);
            assert_eq!(last_good.params, net.params);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn empty_splits_are_rejected() {
    let ds = small_dataset(4, 2);
    let net = Network::init(NetworkConfig::new(64, 4), 2).unwrap();
    assert!(matches!(
        train_from(net, &ds.train, &[], &small_config(Mode::Yolood)),
        Err(Error::Usage(_))
    ));
}

/// Central differences on a sample of coordinates of every parameter tensor.
#[test]
fn full_network_loss_gradient_matches_finite_differences() {
    let ds = small_dataset(1, 1);
    let scene = &ds.train[0];
    let cfg = NetworkConfig::new(64, 4);
    let mut net = Network::init(cfg.clone(), 6).unwrap();
    let targets = build_targets(scene, &cfg, &ResponsibilityConfig::new([0.5, 0.75, 1.0]).unwrap());

    let loss_of = |net: &Network| -> f64 {
        let mut g = Graph::new();
        let bound = net.bind(&mut g, false).unwrap();
        let x = g.constant(scene.image.clone()).unwrap();
        let heads = net.heads_graph(&mut g, &bound, x).unwrap();
        let l = loss_graph(&mut g, &heads, &targets).unwrap();
        g.value(l.total).item().unwrap()
    };

    let mut g = Graph::new();
    let bound = net.bind(&mut g, true).unwrap();
    let x = g.constant(scene.image.clone()).unwrap();
    let heads = net.heads_graph(&mut g, &bound, x).unwrap();
    let l = loss_graph(&mut g, &heads, &targets).unwrap();
    g.backward(l.total).unwrap();
    let grads: Vec<Vec<f64>> = bound.vars().iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    // small step: first-layer perturbations move many pre-activations across the leaky kink
    let h = 1e-6;
    let mut checked = 0;
    for p in 0..net.params.len() {
        if param_group(&net.params.names()[p]) == ParamGroup::FlatHead {
            assert!(grads[p].iter().all(|&v| v == 0.0));
            continue;
        }
        let n = grads[p].len();
        for idx in [0, n / 3, n / 2, n - 1] {
            let orig = net.params.tensors()[p].data()[idx];
            net.params.tensors_mut()[p].data_mut()[idx] = orig + h;
            let up = loss_of(&net);
            net.params.tensors_mut()[p].data_mut()[idx] = orig - h;
            let down = loss_of(&net);
            net.params.tensors_mut()[p].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[p][idx];
            let err = (numeric - analytic).abs();
            let ok = err / analytic.abs().max(numeric.abs()) < 1e-4 || err < 1e-6;
            assert!(ok, "{} [{idx}]: analytic {analytic}, numeric {numeric}", net.params.names()[p]);
            checked += 1;
        }
    }
    assert!(checked >= 80);
}
