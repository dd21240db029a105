//! Randomized invariants across modules.

use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trajcast::data::{
    self, BinningSpec, CovariateTable, LabelTable, LongRecord, NormStats, Split, SplitFractions,
    TensorDataset,
};
use trajcast::eval;
use trajcast::model::{self, Architecture, Batch, ModelParams, PatientInput};
use trajcast::ndiff::{ParamStore, Tape};

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60)
        .prop_flat_map(|n| {
            (
                // Few distinct levels so ties are common.
                prop::collection::vec((0u8..6).prop_map(|v| f64::from(v) / 5.0), n),
                prop::collection::vec(0u8..2, n),
            )
        })
        .prop_filter("both classes", |(_, z)| z.contains(&0) && z.contains(&1))
}

proptest! {
    #[test]
    fn trapezoid_matches_pairwise((s, z) in scores_and_labels()) {
        let a = eval::auc(&s, &z).unwrap();
        let b = eval::auc_pairwise(&s, &z).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_ignores_monotone_transforms((s, z) in scores_and_labels()) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 2.0).collect();
        prop_assert_eq!(eval::auc(&s, &z).unwrap(), eval::auc(&t, &z).unwrap());
    }

    #[test]
    fn reversing_scores_complements_auc((s, z) in scores_and_labels()) {
        let r: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let sum = eval::auc(&s, &z).unwrap() + eval::auc(&r, &z).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone((s, z) in scores_and_labels()) {
        let c = eval::roc(&s, &z).unwrap();
        prop_assert_eq!((c.points[0].fpr, c.points[0].tpr), (0.0, 0.0));
        let last = c.points.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        prop_assert!(c.points.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
    }
}

fn records_strategy() -> impl Strategy<Value = Vec<LongRecord>> {
    prop::collection::vec((0usize..3, 0usize..3, 0.0f64..6.0, -50.0f64..50.0), 1..40).prop_map(
        |rows| {
            rows.into_iter()
                .map(|(p, f, t, v)| LongRecord {
                    patient_id: format!("p{p}"),
                    feature_id: format!("f{f}"),
                    time: t,
                    value: v,
                })
                .collect()
        },
    )
}

fn tables() -> (CovariateTable, LabelTable) {
    let ids = ["p0", "p1", "p2"];
    (
        CovariateTable {
            names: vec!["age".into()],
            rows: ids
                .iter()
                .enumerate()
                .map(|(i, p)| (p.to_string(), vec![i as f64]))
                .collect(),
        },
        LabelTable {
            rows: ids
                .iter()
                .enumerate()
                .map(|(i, p)| (p.to_string(), (i % 2) as u8))
                .collect(),
        },
    )
}

proptest! {
    #[test]
    fn tensorize_ignores_record_order(records in records_strategy(), seed in any::<u64>()) {
        let (cov, lab) = tables();
        let spec = BinningSpec::new(1.0, 4).with_aggregator("f1", data::Aggregator::Sum);
        let a = data::tensorize(&records, &cov, &lab, &spec);
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = data::tensorize(&shuffled, &cov, &lab, &spec);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            // Every record fell beyond the horizon.
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn mean_cells_stay_within_raw_range(records in records_strategy()) {
        let (cov, lab) = tables();
        let spec = BinningSpec::new(1.0, 6);
        let (ds, _) = data::tensorize(&records, &cov, &lab, &spec).unwrap();
        for e in &ds.entries {
            let raw: Vec<f64> = records
                .iter()
                .filter(|r| {
                    r.patient_id == ds.patient_ids[e.i]
                        && r.feature_id == ds.feature_ids[e.j]
                        && (r.time / 1.0).floor() as usize == e.t
                })
                .map(|r| r.value)
                .collect();
            let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(e.value >= lo - 1e-9 && e.value <= hi + 1e-9);
        }
    }

    #[test]
    fn fill_rate_grows_with_distinct_cells(records in records_strategy(), extra in 0.0f64..4.0) {
        let (cov, lab) = tables();
        let spec = BinningSpec::new(1.0, 6);
        let (a, _) = data::tensorize(&records, &cov, &lab, &spec).unwrap();
        let mut more = records.clone();
        more.push(LongRecord {
            patient_id: "p2".into(),
            feature_id: records[0].feature_id.clone(),
            time: extra,
            value: 1.0,
        });
        let (b, _) = data::tensorize(&more, &cov, &lab, &spec).unwrap();
        if a.n_features == b.n_features {
            prop_assert!(data::fill_rate(&b) >= data::fill_rate(&a));
        }
    }
}

fn dataset_strategy() -> impl Strategy<Value = TensorDataset> {
    (6usize..30, 1usize..4, 1usize..5, any::<u64>()).prop_filter_map(
        "degenerate sample",
        |(n, m, t, seed)| {
            let mut cfg = trajcast::synthgen::SynthConfig::with_dims(n, m, t, 2, 2);
            cfg.p_obs = 0.5;
            cfg.seed = seed;
            cfg.obs_noise_sd = 2.0;
            trajcast::synthgen::sample_dataset(&cfg)
                .ok()
                .map(|(ds, _)| ds)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_is_reproducible_and_stratified(ds in dataset_strategy(), seed in any::<u64>()) {
        let fr = SplitFractions::new(0.6, 0.2, 0.2);
        match data::split(&ds, fr, seed) {
            Ok(a) => {
                let b = data::split(&ds, fr, seed).unwrap();
                prop_assert_eq!(&a.split, &b.split);
                let total: usize = Split::ALL.iter().map(|s| a.indices(*s).unwrap().len()).sum();
                prop_assert_eq!(total, ds.n_patients);
            }
            Err(e) => prop_assert!(matches!(e, trajcast::Error::Config(_))),
        }
    }

    #[test]
    fn normalize_is_idempotent_and_keeps_the_mask(ds in dataset_strategy()) {
        let ds = match data::split(&ds, SplitFractions::new(0.6, 0.2, 0.2), 1) {
            Ok(d) => d,
            Err(_) => return Ok(()),
        };
        let once = data::normalize(&ds, &NormStats::from_train(&ds).unwrap()).unwrap();
        let twice = data::normalize(&once, &NormStats::from_train(&once).unwrap()).unwrap();
        let cells = |d: &TensorDataset| d.entries.iter().map(|e| (e.i, e.j, e.t)).collect::<Vec<_>>();
        prop_assert_eq!(cells(&ds), cells(&once));
        prop_assert_eq!(&ds.labels, &once.labels);
        for (a, b) in once.entries.iter().zip(&twice.entries) {
            prop_assert!((a.value - b.value).abs() < 1e-12);
        }
        for (ra, rb) in once.covariates.iter().zip(&twice.covariates) {
            for (a, b) in ra.iter().zip(rb) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn entry_order_does_not_change_the_forward_pass(ds in dataset_strategy(), seed in any::<u64>()) {
        let params = ModelParams::init(
            Architecture::Generative,
            ds.n_covariates(),
            ds.n_features,
            3,
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        let mut shuffled = ds.clone();
        shuffled.entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        for i in 0..ds.n_patients.min(4) {
            let a = model::forward(&params, &PatientInput::from_dataset(&ds, i)).unwrap();
            let b = model::forward(&params, &PatientInput::from_dataset(&shuffled, i)).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn hidden_states_stay_in_the_unit_box(ds in dataset_strategy(), seed in any::<u64>()) {
        for arch in [Architecture::Generative, Architecture::Baseline] {
            let params = ModelParams::init(
                arch,
                ds.n_covariates(),
                ds.n_features,
                3,
                &mut ChaCha8Rng::seed_from_u64(seed),
            );
            let patient = PatientInput::from_dataset(&ds, 0);
            let tr = match arch {
                Architecture::Generative => model::forward(&params, &patient),
                Architecture::Baseline => model::forward_baseline(&params, &patient),
            }
            .unwrap();
            for h in tr.hidden {
                prop_assert!(h.iter().all(|v| v.abs() < 1.0));
            }
            prop_assert!(tr.prob > 0.0 && tr.prob < 1.0);
        }
    }
}

fn store_strategy() -> impl Strategy<Value = ParamStore> {
    prop::collection::vec((1usize..4, 1usize..4), 1..5).prop_flat_map(|shapes| {
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        prop::collection::vec(-10.0f64..10.0, total).prop_map(move |flat| {
            let mut store = ParamStore::new();
            let mut at = 0;
            for (k, (r, c)) in shapes.iter().enumerate() {
                let m = Array2::from_shape_vec((*r, *c), flat[at..at + r * c].to_vec()).unwrap();
                store.insert(&format!("w{k}"), m);
                at += r * c;
            }
            store
        })
    })
}

proptest! {
    #[test]
    fn flatten_then_unflatten_is_identity(store in store_strategy()) {
        let flat = store.flatten();
        prop_assert_eq!(flat.len(), store.count());
        let mut back = store.zeros_like();
        back.unflatten(&flat).unwrap();
        prop_assert_eq!(&back, &store);
        prop_assert!(back.unflatten(&flat[1..]).is_err());
        prop_assert_eq!(ParamStore::from_text(&store.to_text()).unwrap(), store);
    }

    #[test]
    fn backward_is_linear(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 6)) {
        let w = Array2::from_shape_vec((2, 3), a).unwrap();
        let x = Array2::from_shape_vec((3, 2), b).unwrap();
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let wv = tape.param(w.clone());
            let xv = tape.constant(x.clone());
            let prod = tape.matmul(wv, xv).unwrap();
            let f1 = {
                let s = tape.sigmoid(prod);
                tape.sum(s)
            };
            let f2 = {
                let t = tape.tanh(wv);
                tape.sum_squares(t)
            };
            let out = match which {
                1 => f1,
                2 => f2,
                _ => tape.add(f1, f2).unwrap(),
            };
            tape.backward(out).unwrap().get(wv).unwrap().clone()
        };
        let sum = grad_of(1) + grad_of(2);
        let joint = grad_of(0);
        for (p, q) in sum.iter().zip(joint.iter()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_from_all_patients_covers_every_entry() {
    let mut cfg = trajcast::synthgen::SynthConfig::with_dims(12, 3, 4, 2, 2);
    cfg.p_obs = 0.3;
    let (ds, _) = trajcast::synthgen::sample_dataset(&cfg).unwrap();
    let all: Vec<usize> = (0..ds.n_patients).collect();
    assert_eq!(
        Batch::from_dataset(&ds, &all).observed_cells(),
        ds.entries.len()
    );
}
