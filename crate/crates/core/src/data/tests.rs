use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::*;

fn rec(user: &str, item: &str, ts: i64) -> Interaction {
    Interaction { user: user.to_string(), item: item.to_string(), timestamp: ts }
}

fn log_from(rows: &[(&str, &[&str])]) -> InteractionLog {
    let mut records = Vec::new();
    for (u, items) in rows {
        for (t, i) in items.iter().enumerate() {
            records.push(rec(u, i, t as i64));
        }
    }
    InteractionLog::new(records)
}

fn counts(log: &InteractionLog) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
    let (u, i) = log.counts();
    (
        u.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        i.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    )
}

#[test]
fn five_core_keeps_a_fixed_point() {
    let items = ["a", "b", "c", "d", "e"];
    let rows: Vec<(String, Vec<&str>)> = (0..5).map(|u| (alloc::format!("u{u}"), items.to_vec())).collect();
    let rows: Vec<(&str, &[&str])> = rows.iter().map(|(u, i)| (u.as_str(), i.as_slice())).collect();
    let log = log_from(&rows);
    assert_eq!(five_core(&log).unwrap(), log);
}

#[test]
fn five_core_cascade_fixture() {
    // u3 holds three of the five D interactions; dropping u3 pushes D below
    // five, and removing D's remaining interactions leaves u1 and u2 with
    // exactly five each.
    let log = log_from(&[
        ("u1", &["A", "A", "A", "B", "B", "D"]),
        ("u2", &["A", "A", "B", "B", "B", "D"]),
        ("u3", &["D", "D", "D"]),
    ]);
    let out = five_core(&log).unwrap();
    let (users, items) = counts(&out);
    assert_eq!(users.into_iter().collect::<Vec<_>>(), [("u1".to_string(), 5), ("u2".to_string(), 5)]);
    assert_eq!(items.into_iter().collect::<Vec<_>>(), [("A".to_string(), 5), ("B".to_string(), 5)]);
    assert_eq!(k_core(&log, 5, CoreOrder::ItemsFirst).unwrap(), out);
}

#[test]
fn five_core_errors_on_empty() {
    assert!(matches!(five_core(&InteractionLog::default()), Err(crate::Error::Data(_))));
    let log = log_from(&[("u1", &["A", "B"])]);
    let err = five_core(&log).unwrap_err();
    assert!(err.message().contains("1 users"));
}

#[test]
fn min_core_one_is_passthrough() {
    let log = log_from(&[("u1", &["A", "B"]), ("u2", &["C"])]);
    assert_eq!(k_core(&log, 1, CoreOrder::UsersFirst).unwrap(), log);
}

#[test]
fn leave_one_out_views() {
    let log = log_from(&[("u", &["a", "b", "c", "d", "e"])]);
    let ds = build_sequences(&log).unwrap();
    let name = |i: usize| ds.items[i - 1].as_str();
    let names = |s: &[usize]| s.iter().map(|&i| name(i)).collect::<Vec<_>>();
    assert_eq!(names(ds.train_input(0)), ["a", "b", "c"]);
    let v = ds.example(0, Split::Valid).unwrap();
    assert_eq!((names(v.context), name(v.target)), (vec!["a", "b", "c"], "d"));
    let t = ds.example(0, Split::Test).unwrap();
    assert_eq!((names(t.context), name(t.target)), (vec!["a", "b", "c", "d"], "e"));
    let tr = ds.example(0, Split::Train).unwrap();
    assert_eq!((names(tr.context), name(tr.target)), (vec!["a", "b"], "c"));
}

#[test]
fn equal_timestamps_keep_file_order() {
    let log = InteractionLog::new(vec![
        rec("u", "z", 5),
        rec("u", "y", 5),
        rec("u", "x", 1),
        rec("u", "w", 5),
    ]);
    let ds = build_sequences(&log).unwrap();
    let seq: Vec<&str> = ds.sequences[0].iter().map(|&i| ds.items[i - 1].as_str()).collect();
    assert_eq!(seq, ["x", "z", "y", "w"]);
}

#[test]
fn exact_duplicates_removed_repeats_kept() {
    let log = InteractionLog::new(vec![
        rec("u", "a", 1),
        rec("u", "a", 1),
        rec("u", "a", 2),
        rec("u", "b", 3),
    ]);
    let ds = build_sequences(&log).unwrap();
    assert_eq!(ds.sequences[0], [1, 1, 2]);
}

#[test]
fn short_users_are_dropped() {
    let log = log_from(&[("short", &["a", "b"]), ("long", &["a", "b", "c"])]);
    let ds = build_sequences(&log).unwrap();
    assert_eq!(ds.users, ["long"]);
    assert_eq!(ds.dropped_users, ["short"]);
    // three interactions leave an empty training context
    assert!(ds.example(0, Split::Train).is_none());
}

#[test]
fn rebuild_is_deterministic() {
    let log = log_from(&[("b", &["x", "y", "z", "x"]), ("a", &["z", "y", "x"])]);
    assert_eq!(build_sequences(&log).unwrap(), build_sequences(&log).unwrap());
    let ds = build_sequences(&log).unwrap();
    assert_eq!(ds.users, ["a", "b"]);
    assert_eq!(ds.items, ["x", "y", "z"]);
}

#[test]
fn padding_and_truncation() {
    let long: Vec<usize> = (1..=60).collect();
    assert_eq!(pad_left(&long, 50), (11..=60).collect::<Vec<_>>());
    let row = pad_left(&[4, 5, 6], 50);
    assert_eq!(row.iter().take_while(|&&i| i == PAD).count(), 47);
    assert_eq!(&row[47..], [4, 5, 6]);
}

#[test]
fn batches_shuffle_by_seed_only() {
    let rows: Vec<(String, Vec<&str>)> =
        (0..10).map(|u| (alloc::format!("u{u:02}"), vec!["a", "b", "c", "d", "e", "f"])).collect();
    let rows: Vec<(&str, &[&str])> = rows.iter().map(|(u, i)| (u.as_str(), i.as_slice())).collect();
    let ds = build_sequences(&log_from(&rows)).unwrap();
    let users = |seed| -> Vec<usize> {
        make_batches(&ds, 5, 3, seed, Split::Train, false).unwrap().iter().flat_map(|b| b.users.clone()).collect()
    };
    assert_eq!(users(1), users(1));
    assert_ne!(users(1), users(2));
    let test: Vec<usize> =
        make_batches(&ds, 5, 3, 9, Split::Test, false).unwrap().iter().flat_map(|b| b.users.clone()).collect();
    assert_eq!(test, (0..10).collect::<Vec<_>>());
    let b = &make_batches(&ds, 5, 4, 0, Split::Test, false).unwrap()[0];
    assert_eq!(b.batch, 4);
    assert_eq!(b.lengths, [5, 5, 5, 5]);
    assert!(b.targets.iter().all(|&t| t != PAD));
    for r in 0..b.batch {
        assert_ne!(b.row(r)[b.n - 1], PAD);
    }
    let all = make_batches(&ds, 5, 100, 0, Split::Train, true).unwrap();
    assert_eq!(all[0].batch, 10 * 3);
}

#[test]
fn test_target_never_in_train_input_position() {
    let log = log_from(&[("u", &["a", "b", "a", "c", "a"])]);
    let ds = build_sequences(&log).unwrap();
    let input = ds.train_input(0);
    let seq = &ds.sequences[0];
    assert_eq!(input.len(), seq.len() - 2);
    assert!(input.len() < seq.len() - 1);
}

#[test]
fn stats_block() {
    let log = log_from(&[("u1", &["a", "b", "c", "d"]), ("u2", &["a", "b", "c"])]);
    let s = build_sequences(&log).unwrap().stats();
    assert_eq!((s.users, s.items, s.interactions), (2, 4, 7));
    assert!((s.avg_length - 3.5).abs() < 1e-12);
    assert!((s.sparsity - (1.0 - 7.0 / 8.0)).abs() < 1e-12);
}

mod synthetic {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { num_users: 60, num_items: 120, genres: 6, seed: 3, ..SynthSpec::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.log, b.log);
        let c = synth_generate(&SynthSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn zero_switch_rate_stays_in_one_genre() {
        let spec = SynthSpec {
            slow_fraction: 1.0,
            multi_fraction: 0.0,
            rapid_fraction: 0.0,
            slow_switch_rate: 0.0,
            ..small()
        };
        for u in synth_generate(&spec).unwrap().users {
            assert!(u.genres.iter().all(|&g| g == u.genres[0]));
        }
    }

    #[test]
    fn population_counts_are_exact() {
        let spec = SynthSpec { num_users: 101, slow_fraction: 0.5, multi_fraction: 0.25, rapid_fraction: 0.25, ..small() };
        let corpus = synth_generate(&spec).unwrap();
        let count = |p| corpus.users.iter().filter(|u| u.population == p).count();
        assert_eq!(
            [count(Population::SlowDrift), count(Population::MultiBand), count(Population::RapidSwitch)],
            [50, 25, 26]
        );
        assert_eq!(spec.population_counts(), [50, 25, 26]);
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            SynthSpec { genres: 0, ..small() },
            SynthSpec { slow_fraction: 0.9, ..small() },
            SynthSpec { rapid_switch_rate: 1.5, ..small() },
            SynthSpec { min_length: 10, max_length: 5, ..small() },
        ] {
            assert!(matches!(synth_generate(&bad), Err(crate::Error::Config(_))));
        }
    }

    /// Brute-force DFT amplitude of a genre-index sequence, mean over bins
    /// k >= m/2.
    fn high_band_amplitude(genres: &[usize]) -> f64 {
        let n = genres.len();
        let m = n / 2 + 1;
        let lo = m / 2;
        let mut total = 0.0;
        for k in lo..m {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &g) in genres.iter().enumerate() {
                let ang = -2.0 * core::f64::consts::PI * (k * t) as f64 / n as f64;
                re += g as f64 * libm::cos(ang);
                im += g as f64 * libm::sin(ang);
            }
            total += libm::sqrt(re * re + im * im) / libm::sqrt(n as f64);
        }
        total / (m - lo) as f64
    }

    #[test]
    fn rapid_switchers_carry_more_high_frequency_energy() {
        let corpus = synth_generate(&SynthSpec { num_users: 300, ..small() }).unwrap();
        let mean_amp = |p| {
            let v: Vec<f64> = corpus
                .users
                .iter()
                .filter(|u| u.population == p)
                .map(|u| high_band_amplitude(&u.genres))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let slow = mean_amp(Population::SlowDrift);
        let rapid = mean_amp(Population::RapidSwitch);
        assert!(rapid > slow, "rapid {rapid} <= slow {slow}");
    }

    #[test]
    fn default_corpus_survives_five_core() {
        let corpus = synth_generate(&small()).unwrap();
        let filtered = five_core(&corpus.log).unwrap();
        let ds = build_sequences(&filtered).unwrap();
        assert!(ds.num_users() > 50);
    }
}
