use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splitsim::harness::{self, DataSource, ExperimentConfig};
use splitsim::leakage::smashed_leakage_score;
use splitsim::nn::OptimizerKind;
use splitsim::protocols::{ProtocolKind, Simulation};
use splitsim::split::SplitModel;
use splitsim::{data, nn};

fn small(kind: ProtocolKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "t".into();
    cfg.dataset.source = DataSource::Synthetic {
        classes: 3,
        per_class: 60,
        dim: 4,
        separation: 4.0,
    };
    cfg.dataset.per_client = 16;
    cfg.dataset.validation = 30;
    cfg.model.widths = vec![4, 6, 5, 3];
    cfg.model.cut = 2;
    cfg.protocol.kind = kind;
    cfg.protocol.clients = 4;
    cfg.protocol.batch_size = 4;
    cfg.protocol.epochs = 2;
    cfg.protocol.base_lr = 0.01;
    cfg
}

#[test]
fn single_client_learns_well_separated_blobs() {
    let mut cfg = small(ProtocolKind::Sglr);
    cfg.dataset.source = DataSource::Synthetic {
        classes: 2,
        per_class: 150,
        dim: 4,
        separation: 100.0,
    };
    cfg.dataset.per_client = 200;
    cfg.dataset.validation = 100;
    cfg.model.widths = vec![4, 6, 5, 2];
    cfg.protocol.clients = 1;
    cfg.protocol.epochs = 5;
    cfg.protocol.batch_size = 8;
    let runs = harness::run_experiment(&cfg).unwrap();
    assert_eq!(runs[0].summary.final_accuracy, Some(1.0));
}

#[test]
fn sglr_without_averaging_or_scaling_traces_psl() {
    let mut a = small(ProtocolKind::Psl);
    a.protocol.epochs = 3;
    let mut b = a.clone();
    b.protocol.kind = ProtocolKind::Sglr;
    b.protocol.active_fraction = 0.0;
    b.protocol.alpha = 0.0;
    let ra = harness::run_experiment(&a).unwrap();
    let rb = harness::run_experiment(&b).unwrap();
    for (x, y) in ra[0].records.iter().zip(&rb[0].records) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_accuracy, y.val_accuracy);
        assert_eq!(x.comm_bytes, y.comm_bytes);
    }
}

#[test]
fn sweep_covers_the_grid_and_aggregates_per_cell() {
    let mut cfg = small(ProtocolKind::Sglr);
    cfg.sweep.clients = vec![2, 4];
    cfg.sweep.active_fractions = vec![0.0, 0.5];
    cfg.seeds = vec![1, 2];
    let out = harness::sweep(&cfg).unwrap();
    assert_eq!(out.runs.len(), 8);
    assert_eq!(out.cells.len(), 4);
    for cell in &out.cells {
        let acc: Vec<f64> = out
            .runs
            .iter()
            .filter(|r| r.summary.clients == cell.clients && r.summary.active_fraction == cell.active_fraction)
            .map(|r| r.summary.final_accuracy.unwrap())
            .collect();
        assert_eq!(acc.len(), cell.runs);
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        let std = ((acc[0] - mean).powi(2) + (acc[1] - mean).powi(2)).sqrt();
        assert!((cell.mean_accuracy - mean).abs() < 1e-12);
        assert!((cell.std_accuracy - std).abs() < 1e-12);
    }
    let table = harness::sweep_table_csv(&out.cells).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().next().unwrap().contains("phi=0.5 alpha=0.5"));
}

#[test]
fn one_cell_sweep_matches_a_plain_run() {
    let mut cfg = small(ProtocolKind::Sgl);
    cfg.seeds = vec![3, 4];
    let runs = harness::run_experiment(&cfg).unwrap();
    let swept = harness::sweep(&cfg).unwrap();
    assert_eq!(swept.cells.len(), 1);
    for (a, b) in runs.iter().zip(&swept.runs) {
        assert_eq!(a.records, b.records);
    }
}

#[test]
fn degenerate_configs_run() {
    for kind in ProtocolKind::ALL {
        for (clients, phi) in [(1, 0.0), (1, 1.0), (3, 0.0), (3, 1.0)] {
            let mut cfg = small(kind);
            cfg.protocol.clients = clients;
            cfg.protocol.active_fraction = phi;
            cfg.protocol.alpha = 0.0;
            cfg.protocol.epochs = 1;
            cfg.leakage.enabled = true;
            cfg.leakage.units = 4;
            cfg.leakage.bins = 4;
            let runs = harness::run_experiment(&cfg).unwrap_or_else(|e| panic!("{kind} C={clients} φ={phi}: {e}"));
            assert_eq!(runs[0].records.len(), 1);
            assert!(runs[0].summary.leakage.is_some());
        }
    }
}

#[test]
fn metrics_have_one_line_per_epoch() {
    let mut cfg = small(ProtocolKind::Fl);
    cfg.seeds = vec![0, 1];
    cfg.protocol.epochs = 3;
    let runs = harness::run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    harness::write_run_outputs(dir.path(), &runs).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["timestamp"].is_null());
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

fn leakage_cfg(phi: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "leak".into();
    cfg.dataset.source = DataSource::Synthetic {
        classes: 4,
        per_class: 200,
        dim: 8,
        separation: 3.0,
    };
    cfg.dataset.per_client = 64;
    cfg.dataset.validation = 200;
    cfg.model.widths = vec![8, 8, 8, 4];
    cfg.model.cut = 2;
    cfg.protocol.kind = ProtocolKind::Sgl;
    cfg.protocol.clients = 8;
    cfg.protocol.active_fraction = phi;
    cfg.protocol.alpha = 0.0;
    cfg.protocol.epochs = 10;
    cfg.protocol.base_lr = 0.01;
    cfg.leakage.enabled = true;
    cfg.leakage.units = 8;
    cfg.leakage.bins = 8;
    cfg
}

// Soft: averaged over five seeds, averaging more clients' gradients should
// not make the smashed data more revealing.
#[test]
fn more_averaging_does_not_raise_mean_leakage() {
    let mean_score = |phi: f64| {
        let mut cfg = leakage_cfg(phi);
        cfg.seeds = (0..5).collect();
        let runs = harness::run_experiment(&cfg).unwrap();
        runs.iter().map(|r| r.summary.leakage.unwrap()).sum::<f64>() / runs.len() as f64
    };
    let none = mean_score(0.0);
    let all = mean_score(1.0);
    assert!(all <= none + 0.02, "φ=1 {all:.4} vs φ=0 {none:.4}");
}

// Soft: a deeper cut of the same trained model should not score higher,
// averaged over probe draws.
#[test]
fn deeper_cut_reveals_no_more_on_average() {
    let ds = data::synth_dataset(4, 200, 8, 3.0, 9).unwrap();
    let part = data::partition_iid(&ds, 4, 100, 9).unwrap();
    let shards = part.clients.iter().map(|idx| ds.subset(idx).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layers = nn::mlp(&[8, 8, 8, 8, 4], &mut rng).unwrap();
    let mut protocol = leakage_cfg(0.0).protocol;
    protocol.kind = ProtocolKind::Psl;
    protocol.clients = 4;
    protocol.optimizer = OptimizerKind::Adam;
    protocol.epochs = 5;
    let mut sim = Simulation::new(protocol, SplitModel::new(layers, 2).unwrap(), shards).unwrap();
    sim.train(None).unwrap();
    let full = sim.client_model(0);
    let inputs = ds.features.slice_rows(0, 400).unwrap();
    let mut shallow = 0.0;
    let mut deep = 0.0;
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        shallow += smashed_leakage_score(&full[..2], &inputs, 8, 8, &mut r).unwrap().score;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        deep += smashed_leakage_score(&full[..6], &inputs, 8, 8, &mut r).unwrap().score;
    }
    assert!(deep <= shallow + 0.02 * 5.0, "deep {deep:.4} vs shallow {shallow:.4}");
}
