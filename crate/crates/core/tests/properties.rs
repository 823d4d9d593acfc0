mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splitsim::comm::{total_comm, CommLedger, CostParams, Direction, Method, Payload};
use splitsim::data::{partition_iid, split_validation};
use splitsim::leakage::mutual_information;
use splitsim::nn::{self, Layer};
use splitsim::protocols::{
    accuracy, phased_schedule, sample_active_clients, split_avg, split_lr, LrScaling, PhaseSpec,
};
use splitsim::split::{self, SplitModel};
use splitsim::Tensor;

fn widths() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 3..6)
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segments_compose_to_the_full_stack(w in widths(), cut_pick in 0usize..100, seed in any::<u64>(), rows in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = nn::mlp(&w, &mut rng).unwrap();
        let cut = 1 + cut_pick % (layers.len() - 1);
        let m = SplitModel::new(layers.clone(), cut).unwrap();
        let batch = random_batch(rows, w[0], 2, &mut rng);

        let full = nn::forward(&layers, &batch.features).unwrap();
        let lower = nn::forward(m.client_segment(), &batch.features).unwrap();
        let upper = nn::forward(m.server_segment(), lower.output()).unwrap();
        prop_assert_eq!(bits(full.output()), bits(upper.output()));

        let up = Tensor::filled(full.output().shape(), 0.5);
        let g_full = nn::backward(&layers, &full, &up).unwrap();
        let g_upper = nn::backward(m.server_segment(), &upper, &up).unwrap();
        let g_lower = nn::backward(m.client_segment(), &lower, &g_upper.input).unwrap();
        prop_assert!(g_full.input.max_abs_diff(&g_lower.input) <= 1e-12);
        let chained: Vec<&Tensor> = g_lower.params.iter().chain(&g_upper.params).collect();
        for (a, b) in g_full.params.iter().zip(chained) {
            prop_assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }

    #[test]
    fn concat_conserves_rows_and_slices_match_isolated_server_runs(
        sizes in prop::collection::vec(1usize..5, 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (client, server) = model(&[4, 5, 3], 2, seed).into_segments();
        let total: usize = sizes.iter().sum();
        let deltas: Vec<f64> = sizes.iter().map(|&s| s as f64 / total as f64).collect();
        let batches: Vec<_> = sizes.iter().map(|&s| random_batch(s, 4, 3, &mut rng)).collect();
        // upload order must not matter
        let smashed: Vec<_> = batches
            .iter()
            .enumerate()
            .rev()
            .map(|(i, b)| split::client_forward(i, &client, b).unwrap().0)
            .collect();
        let concat = split::concat(smashed).unwrap();
        prop_assert_eq!(concat.effective_size(), total);
        prop_assert_eq!(concat.client_ids(), (0..sizes.len()).collect::<Vec<_>>());

        let step = split::server_gradients(&server, &concat, &deltas).unwrap();
        for (i, b) in batches.iter().enumerate() {
            let alone = isolated(&client, &server, b);
            let mut expected = alone.cut.clone();
            expected.scale(deltas[i]);
            prop_assert!(step.cut_grads[i].max_abs_diff(&expected) <= 1e-9);
        }
    }

    #[test]
    fn split_avg_assigns_mean_to_active_and_own_to_rest(
        clients in 1usize..8,
        mask in prop::collection::vec(any::<bool>(), 8),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<Tensor> = (0..clients).map(|_| random_batch(2, 3, 2, &mut rng).features).collect();
        let active: Vec<usize> = (0..clients).filter(|&i| mask[i]).collect();
        let out = split_avg(&grads, &active, true).unwrap();
        prop_assert_eq!(out.assigned.len(), clients);
        for i in 0..clients {
            if !active.contains(&i) {
                prop_assert_eq!(&out.assigned[i], &grads[i]);
            }
        }
        match out.common {
            None => prop_assert!(active.is_empty()),
            Some(common) => {
                let mut mean = Tensor::zeros(common.shape());
                for &i in &active {
                    mean.add_scaled(&grads[i], 1.0 / active.len() as f64).unwrap();
                }
                prop_assert!(common.max_abs_diff(&mean) <= 1e-12);
                for &i in &active {
                    prop_assert_eq!(&out.assigned[i], &common);
                }
            }
        }
    }

    #[test]
    fn active_sets_have_the_rounded_size_and_are_sorted(clients in 1usize..200, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let active = sample_active_clients(clients, fraction, &mut rng).unwrap();
        prop_assert_eq!(active.len(), (fraction * clients as f64).round() as usize);
        prop_assert!(active.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(active.iter().all(|&i| i < clients));
    }

    #[test]
    fn phased_schedules_switch_once(epochs in 1usize..60, p in 0.01f64..0.99) {
        let on = |spec| (0..epochs).map(|e| phased_schedule(e, epochs, spec)).collect::<Vec<bool>>();
        prop_assert!(on(PhaseSpec::Always).iter().all(|&b| b));
        prop_assert!(on(PhaseSpec::Never).iter().all(|&b| !b));
        let initial = on(PhaseSpec::Initial(p));
        let last = on(PhaseSpec::Final(p));
        // a prefix of trues, a suffix of trues
        prop_assert!(initial.windows(2).all(|w| w[0] || !w[1]));
        prop_assert!(last.windows(2).all(|w| !w[0] || w[1]));
        let count = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64;
        let target = p * epochs as f64;
        prop_assert!((count(&initial) - target).abs() < 1.0 + 1e-9);
        prop_assert!((count(&last) - target).abs() < 1.0 + 1e-9);
    }

    #[test]
    fn split_lr_leaves_clients_alone(base in 1e-5f64..1.0, clients in 1usize..500, alpha in 0.0f64..2.0, b in 1usize..64) {
        let r = split_lr(base, clients, alpha, b, LrScaling::Clients);
        prop_assert_eq!(r.client, base);
        prop_assert!((r.server / (base * (clients as f64).powf(alpha)) - 1.0).abs() < 1e-12);
        let e = split_lr(base, clients, alpha, b, LrScaling::EffectiveBatch);
        prop_assert!(e.server >= r.server);
    }

    #[test]
    fn sglr_traffic_falls_with_active_fraction(
        phi_a in 0.0f64..=1.0,
        phi_b in 0.0f64..=1.0,
        clients in 1.0f64..2000.0,
        dataset_size in 1.0f64..1e7,
        cut in 1e-4f64..1.0,
    ) {
        prop_assume!((phi_a - phi_b).abs() > 1e-9);
        let at = |phi| CostParams { active_fraction: phi, clients, dataset_size, cut_output_mb: cut, ..CostParams::reference() };
        let (lo, hi) = if phi_a < phi_b { (phi_a, phi_b) } else { (phi_b, phi_a) };
        prop_assert!(total_comm(Method::Sglr, &at(hi)).unwrap() < total_comm(Method::Sglr, &at(lo)).unwrap());
        let psl = total_comm(Method::Psl, &at(lo)).unwrap();
        prop_assert!((total_comm(Method::Sglr, &at(0.0)).unwrap() - psl - cut).abs() <= 1e-9 * psl);
    }

    #[test]
    fn ledger_totals_agree_under_every_grouping(
        entries in prop::collection::vec((0u64..5, prop::option::of(0usize..6), any::<bool>(), 0usize..3, 0usize..1000), 0..40),
    ) {
        let mut ledger = CommLedger::new();
        for &(round, client, up, kind, scalars) in &entries {
            let direction = if up { Direction::Upload } else { Direction::Download };
            let payload = [Payload::Smashed, Payload::CutGradient, Payload::ModelWeights][kind];
            ledger.record(round, client, direction, payload, scalars);
        }
        let total = ledger.total_bytes();
        let by_client: u64 = ledger.clients().iter().map(|&c| ledger.bytes_for_client(c)).sum::<u64>() + ledger.broadcast_bytes();
        let by_payload: u64 = [Payload::Smashed, Payload::CutGradient, Payload::ModelWeights]
            .iter()
            .map(|&p| ledger.bytes_for_payload(p))
            .sum();
        prop_assert_eq!(total, by_client);
        prop_assert_eq!(total, by_payload);
        prop_assert_eq!(total, 8 * entries.iter().map(|e| e.4 as u64).sum::<u64>());
    }

    #[test]
    fn mutual_information_is_symmetric_and_nonnegative(
        pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 16..200),
        bins in 2usize..16,
    ) {
        prop_assume!(pairs.len() >= bins);
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let xy = mutual_information(&x, &y, bins).unwrap().value;
        let yx = mutual_information(&y, &x, bins).unwrap().value;
        prop_assert!(xy >= 0.0);
        prop_assert_eq!(xy.to_bits(), yx.to_bits());
    }

    #[test]
    fn partitions_are_disjoint_and_weights_sum_to_one(
        clients in 1usize..10,
        per_client in 1usize..20,
        held_out in 0usize..30,
        seed in any::<u64>(),
    ) {
        let data = random_dataset(400, 2, 3, seed);
        let split = split_validation(&data, held_out, seed).unwrap();
        prop_assert_eq!(split.train.len() + split.validation.as_ref().map_or(0, |v| v.len()), data.len());
        let part = partition_iid(&split.train, clients, per_client, seed).unwrap();
        let mut all: Vec<usize> = part.clients.iter().flatten().copied().collect();
        prop_assert!(part.clients.iter().all(|c| c.len() == per_client));
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), clients * per_client);
        prop_assert!((part.deltas().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(part, partition_iid(&split.train, clients, per_client, seed).unwrap());
    }

    #[test]
    fn accuracy_ignores_a_constant_logit_shift(
        logits in prop::collection::vec(-50.0f64..50.0, 12),
        labels in prop::collection::vec(0usize..3, 4),
        shift in -1e3f64..1e3,
    ) {
        let t = Tensor::new(vec![4, 3], logits.clone()).unwrap();
        let shifted = Tensor::new(vec![4, 3], logits.iter().map(|v| v + shift).collect()).unwrap();
        // a shift can only change the argmax through a tie created by rounding
        let distinct = (0..4).all(|r| {
            let mut row = t.row(r).to_vec();
            row.sort_by(f64::total_cmp);
            row[2] - row[1] > 1e-9 * (1.0 + shift.abs())
        });
        prop_assume!(distinct);
        prop_assert_eq!(accuracy(&t, &labels).unwrap(), accuracy(&shifted, &labels).unwrap());
    }

    #[test]
    fn softmax_cross_entropy_stays_finite_for_huge_logits(
        logits in prop::collection::vec(-1e6f64..1e6, 8),
        labels in prop::collection::vec(0usize..4, 2),
    ) {
        let out = nn::loss_softmax_ce(&Tensor::new(vec![2, 4], logits).unwrap(), &labels).unwrap();
        prop_assert!(out.loss.is_finite() && out.loss >= 0.0);
        prop_assert!(out.grad.is_finite());
    }

    #[test]
    fn identical_seeds_train_identical_weights(seed in any::<u64>(), steps in 1usize..4) {
        let train = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut layers: Vec<Layer> = nn::mlp(&[3, 4, 2], &mut rng).unwrap();
            let mut opt = nn::OptimizerState::new(nn::OptimizerKind::Adam, &layers);
            for _ in 0..steps {
                let b = random_batch(4, 3, 2, &mut rng);
                splitsim::protocols::centralized_step(&mut layers, &mut opt, &b, 0.01).unwrap();
            }
            layers
        };
        prop_assert!(params_bitwise_equal(&train(), &train()));
    }
}
