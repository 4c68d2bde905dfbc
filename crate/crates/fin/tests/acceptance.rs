//! End-to-end acceptance suite. Each test prints one PASS line; a failed
//! assertion marks the criterion failed.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use fin::dataio::{generate_synthetic, prepare, PrepareConfig, SyntheticSpec};
use fin::fragment::{
    attention_weights, encode_keys, encode_query, multihead_target_attention, relevance_scores,
    z_score, AttentionParams, EmbeddingSet, VocabSizes,
};
use fin::integrate::{align, channel_queries, cross, integrate_forward, integrate_query, IntegrateParams};
use fin::model::{
    auc, run_variant, score_all, train, FinConfig, FinModel, TrainOptions, Variant,
};
use fin::numeric::{grad_check, ParamStore, Tape};
use fin::store::{
    build_bundle, dedup_long_term, extract_geohash_block, extract_mealtime, extract_short_term,
    BehaviorEvent, LifelongSequence, QueryContext, SECONDS_PER_DAY,
};

fn small_spec(users: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        users,
        items: 300,
        categories: 20,
        geo_cells: 12,
        behaviors_per_user: 30,
        samples_per_user: 2,
        seed,
        ..SyntheticSpec::default()
    }
}

fn small_prepared(users: usize, seed: u64) -> fin::dataio::PreparedDataset {
    let data = generate_synthetic(&small_spec(users, seed)).unwrap();
    prepare(&data.raw, &PrepareConfig::default()).unwrap()
}

fn rand_event<R: Rng>(rng: &mut R, now: i64) -> BehaviorEvent {
    let mut e = BehaviorEvent::new(
        rng.gen_range(1..40),
        rng.gen_range(1..10),
        ["g1", "g2", "g3"][rng.gen_range(0..3)],
        rng.gen_range(0..6),
        now - rng.gen_range(1..300 * SECONDS_PER_DAY),
    );
    e.geohash_id = match e.geohash.as_str() {
        "g1" => 1,
        "g2" => 2,
        _ => 3,
    };
    e
}

fn rand_query<R: Rng>(rng: &mut R, now: i64) -> QueryContext {
    let mut q = rand_event(rng, now);
    q.timestamp = now;
    QueryContext {
        query_item: q,
        request_time: now,
        short_term_window_days: 30,
        long_term_window_days: 365,
    }
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = std::time::Instant::now();
    let data = small_prepared(12, 3);
    let cfg = FinConfig::default();
    let model = FinModel::new(cfg, &data.vocab_sizes()).unwrap();
    let sample = data.train[0].clone();
    let seq = data.sequences[sample.seq_idx].clone();

    // pick 64 random scalar coordinates across all parameters
    let mut rng = StdRng::seed_from_u64(11);
    let mut coords = Vec::new();
    for _ in 0..64 {
        let p = rng.gen_range(0..model.store.len());
        let n = model.store.value(p).data.len();
        coords.push((p, rng.gen_range(0..n)));
    }
    let mut store = model.store.clone();
    let max_rel = grad_check(
        &mut store,
        |s| {
            let mut probe = model.clone();
            probe.store = s.clone();
            let mut tape = Tape::new();
            let loss = probe.forward_loss(&mut tape, &seq, &sample)?;
            let v = tape.value(loss).data[0];
            // analytic grads for the same coordinates
            tape.backward_into(loss, s)?;
            Ok(v)
        },
        &coords,
        1e-5,
    )
    .unwrap();
    let secs = started.elapsed().as_secs_f64();
    assert!(max_rel < 1e-4, "max relative error {max_rel}");
    assert!(secs < 60.0, "took {secs}s");
    println!("ACCEPTANCE 1 gradient-correctness: PASS (max rel err {max_rel:.2e}, {secs:.1}s)");
}

#[test]
fn criterion_2_oracle_equivalence() {
    // AUC vs exhaustive pair counting on 1000 instances of size <= 12
    let mut rng = StdRng::seed_from_u64(21);
    for _ in 0..1000 {
        let n = rng.gen_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 5.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == n {
            continue;
        }
        let fast = auc(&scores, &labels).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((fast - num / den).abs() <= 1e-12, "auc {fast} vs oracle {}", num / den);
    }

    // retrieval ops vs brute-force filters on 1000 random sequences
    for _ in 0..1000 {
        let now = 400 * SECONDS_PER_DAY;
        let n = rng.gen_range(0..=50);
        let events: Vec<BehaviorEvent> = (0..n).map(|_| rand_event(&mut rng, now)).collect();
        let seq = LifelongSequence::new(7, events);
        let q = rand_query(&mut rng, now);
        let cap = rng.gen_range(1..=8);

        // brute force: newest-first events in window matching the predicate
        let brute = |pred: &dyn Fn(&BehaviorEvent) -> bool, cutoff_days: u32| {
            let cutoff = now - cutoff_days as i64 * SECONDS_PER_DAY;
            let mut v: Vec<&BehaviorEvent> = seq
                .events
                .iter()
                .filter(|e| e.timestamp < now && e.timestamp >= cutoff && pred(e))
                .collect();
            v.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then(b.item_id.cmp(&a.item_id)));
            v.truncate(cap);
            v.into_iter().cloned().collect::<Vec<_>>()
        };

        let qe = &q.query_item;
        let got = extract_geohash_block(&seq, &q, cap);
        assert_eq!(got, brute(&|e| e.geohash == qe.geohash, 365));
        let got = extract_mealtime(&seq, &q, cap);
        assert_eq!(got, brute(&|e| e.period_id == qe.period_id, 365));
        let got = extract_short_term(&seq, &q, cap);
        assert_eq!(got, brute(&|_| true, 30));
    }
    println!("ACCEPTANCE 2 oracle-equivalence: PASS");
}

#[test]
fn criterion_3_dedup_conservation() {
    let mut rng = StdRng::seed_from_u64(31);
    let now = 400 * SECONDS_PER_DAY;
    for _ in 0..1000 {
        let n = rng.gen_range(0..=60);
        let events: Vec<BehaviorEvent> = (0..n).map(|_| rand_event(&mut rng, now)).collect();
        let seq = LifelongSequence::new(1, events);
        let q = rand_query(&mut rng, now);
        let in_window = seq
            .events
            .iter()
            .filter(|e| e.timestamp < now && e.timestamp >= now - 365 * SECONDS_PER_DAY)
            .count() as u64;
        let dedup = dedup_long_term(&seq, &q, usize::MAX);
        let total: u64 = dedup.iter().map(|e| e.click_count as u64).sum();
        assert_eq!(total, in_window, "click_count sum mismatch");
        let mut ids: Vec<u32> = dedup.iter().map(|e| e.item_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), dedup.len(), "duplicate item after dedup");
    }
    println!("ACCEPTANCE 3 dedup-conservation: PASS");
}

#[test]
fn criterion_4_normalization() {
    let mut rng = StdRng::seed_from_u64(41);
    // z_score in [0, 1] on fuzzed inputs
    for _ in 0..2000 {
        let n = rng.gen_range(0..30);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..9)).collect();
        let clicks: Vec<u32> = (0..n).map(|_| rng.gen_range(1..50)).collect();
        let rel = relevance_scores(&ids, rng.gen_range(0..9));
        let z = z_score(&rel, &clicks);
        assert!((0.0..=1.0).contains(&z), "z {z}");
    }

    // attention weight vectors sum to 1 over valid positions
    let vocabs = VocabSizes {
        items: 50,
        categories: 12,
        geohashes: 6,
        periods: 8,
        users: 4,
    };
    for trial in 0..100 {
        let mut store = ParamStore::new();
        let mut prng = StdRng::seed_from_u64(trial);
        let emb = EmbeddingSet::build(&mut store, &vocabs, 4, &mut prng);
        let att = AttentionParams::build(&mut store, "t", 16, 16, 16, 4, &mut prng);
        let now = 400 * SECONDS_PER_DAY;
        let n = prng.gen_range(1..=20);
        let events: Vec<BehaviorEvent> = (0..n)
            .map(|_| {
                let mut e = rand_event(&mut prng, now);
                e.item_id = prng.gen_range(1..50);
                e.category_id = prng.gen_range(1..12);
                e.period_id = prng.gen_range(0..8);
                e
            })
            .collect();
        let mut tape = Tape::new();
        let keys = encode_keys(&mut tape, &store, &emb, &events, false)
            .unwrap()
            .unwrap();
        let q = encode_query(&mut tape, &store, &emb, &events[0]).unwrap();
        let w = attention_weights(&mut tape, &store, &att, keys, q).unwrap();
        assert_eq!(w.len(), n);
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "weights sum {sum}");
        assert!(w.iter().all(|&x| x >= 0.0));
    }
    println!("ACCEPTANCE 4 normalization: PASS");
}

#[test]
fn criterion_5_permutation_invariance() {
    let vocabs = VocabSizes {
        items: 50,
        categories: 12,
        geohashes: 6,
        periods: 8,
        users: 4,
    };
    let now = 400 * SECONDS_PER_DAY;
    for trial in 0..100 {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(500 + trial);
        let emb = EmbeddingSet::build(&mut store, &vocabs, 4, &mut rng);
        let att = AttentionParams::build(&mut store, "t", 16, 16, 16, 4, &mut rng);
        let n = rng.gen_range(2..=15);
        let events: Vec<BehaviorEvent> = (0..n)
            .map(|_| {
                let mut e = rand_event(&mut rng, now);
                e.item_id = rng.gen_range(1..50);
                e.category_id = rng.gen_range(1..12);
                e.period_id = rng.gen_range(0..8);
                e
            })
            .collect();
        let mut shuffled = events.clone();
        shuffled.shuffle(&mut rng);

        // multi-head target attention under key reordering
        let run_mha = |evs: &[BehaviorEvent]| {
            let mut tape = Tape::new();
            let keys = encode_keys(&mut tape, &store, &emb, evs, false).unwrap();
            let q = encode_query(&mut tape, &store, &emb, &events[0]).unwrap();
            let out = multihead_target_attention(&mut tape, &store, &att, keys, q).unwrap();
            tape.value(out).data.clone()
        };
        let a = run_mha(&events);
        let b = run_mha(&shuffled);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10, "mha permutation drift {x} vs {y}");
        }

        // integrate attention under reordering of the stacked blocks
        let int = {
            let mut s2 = ParamStore::new();
            let mut r2 = StdRng::seed_from_u64(900 + trial);
            let emb2 = EmbeddingSet::build(&mut s2, &vocabs, 4, &mut r2);
            let ip = IntegrateParams::build(&mut s2, 4, 16, 4, 8, false, &mut r2);
            let q = {
                let mut e = rand_event(&mut r2, now);
                e.timestamp = now;
                e
            };
            let query = QueryContext {
                query_item: q.clone(),
                request_time: now,
                short_term_window_days: 30,
                long_term_window_days: 365,
            };
            let seq = LifelongSequence::new(1, events.clone());
            let bundle = build_bundle(&seq, &query, &Default::default());
            let run = |perm_seed: Option<u64>| {
                let mut tape = Tape::new();
                let aligned = [
                    align(&mut tape, &s2, &emb2, &ip, 0, &bundle.geohash_block).unwrap(),
                    align(&mut tape, &s2, &emb2, &ip, 1, &bundle.meal_time).unwrap(),
                    align(&mut tape, &s2, &emb2, &ip, 2, &bundle.short_term).unwrap(),
                    align(&mut tape, &s2, &emb2, &ip, 3, &bundle.long_term_dedup).unwrap(),
                ];
                let (stacked, mask) = cross(&mut tape, &aligned).unwrap();
                let mut valid: Vec<usize> = mask
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &v)| if v { Some(i) } else { None })
                    .collect();
                if let Some(s) = perm_seed {
                    valid.shuffle(&mut StdRng::seed_from_u64(s));
                }
                if valid.is_empty() {
                    return None;
                }
                let keys = tape.rows(stacked, &valid).unwrap();
                let queries = channel_queries(&mut tape, &s2, &emb2, &ip, &q).unwrap();
                let qv = integrate_query(&mut tape, &s2, &ip, &queries).unwrap();
                let out = multihead_target_attention(&mut tape, &s2, &ip.mha, Some(keys), qv).unwrap();
                Some(tape.value(out).data.clone())
            };
            (run(None), run(Some(trial)))
        };
        if let (Some(a), Some(b)) = int {
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-10, "integrate permutation drift");
            }
        }
    }
    println!("ACCEPTANCE 5 permutation-invariance: PASS");
}

#[test]
fn criterion_6_ablation_ordering() {
    let spec = SyntheticSpec::default(); // 5000 users, fixed seed
    let seeds: [u64; 3] = [7, 8, 9];
    let mut means = std::collections::HashMap::new();
    let data = generate_synthetic(&spec).unwrap();
    let prepared = prepare(&data.raw, &PrepareConfig::default()).unwrap();
    let vocabs = prepared.vocab_sizes();
    let ladder = [
        Variant::AvgPoolLong,
        Variant::SimStyle,
        Variant::StenStyle,
        Variant::FnOnly,
        Variant::FullFin,
    ];
    for &seed in &seeds {
        let started = std::time::Instant::now();
        let opts = TrainOptions {
            seed,
            ..TrainOptions::default()
        };
        for variant in ladder {
            let row = run_variant(
                FinConfig::default(),
                variant,
                &vocabs,
                &prepared.sequences,
                &prepared.train,
                &prepared.test,
                &opts,
            )
            .unwrap();
            println!("  seed {seed} {} auc {:.4} ({} params, {:.0}s)", variant.name(), row.auc, row.param_count, row.train_secs);
            *means.entry(variant.name()).or_insert(0.0) += row.auc / seeds.len() as f64;
        }
        let secs = started.elapsed().as_secs_f64();
        assert!(secs <= 600.0, "seed {seed} took {secs}s (> 10 min)");
    }
    let m = |v: Variant| means[v.name()];
    println!(
        "  mean auc: full {:.4} fn {:.4} sten {:.4} sim {:.4} avg {:.4}",
        m(Variant::FullFin),
        m(Variant::FnOnly),
        m(Variant::StenStyle),
        m(Variant::SimStyle),
        m(Variant::AvgPoolLong)
    );
    assert!(m(Variant::FullFin) > m(Variant::FnOnly));
    assert!(m(Variant::FnOnly) > m(Variant::StenStyle));
    assert!(m(Variant::StenStyle) > m(Variant::SimStyle));
    assert!(m(Variant::SimStyle) > m(Variant::AvgPoolLong));
    assert!(m(Variant::FullFin) - m(Variant::SimStyle) >= 0.005);
    println!("ACCEPTANCE 6 ablation-ordering: PASS");
}

#[test]
fn criterion_7_degenerate_inputs() {
    let data = small_prepared(10, 5);
    let cfg = FinConfig::default();
    let model = FinModel::new(cfg, &data.vocab_sizes()).unwrap();

    // zero-behavior user scores without crashing
    let empty = LifelongSequence::default();
    let p = model.predict(&empty, &data.train[0]).unwrap();
    assert!(p.is_finite() && (0.0..=1.0).contains(&p));

    // empty sub-sequences from retrieval on an empty sequence
    let mut rng = StdRng::seed_from_u64(70);
    let q = rand_query(&mut rng, 400 * SECONDS_PER_DAY);
    assert!(extract_geohash_block(&empty, &q, 10).is_empty());
    assert!(extract_mealtime(&empty, &q, 10).is_empty());
    assert!(extract_short_term(&empty, &q, 10).is_empty());
    assert!(dedup_long_term(&empty, &q, 10).is_empty());

    // all-masked integrate input yields zeros
    let vocabs = VocabSizes {
        items: 50,
        categories: 12,
        geohashes: 6,
        periods: 8,
        users: 4,
    };
    let mut store = ParamStore::new();
    let emb = EmbeddingSet::build(&mut store, &vocabs, 4, &mut rng);
    let ip = IntegrateParams::build(&mut store, 4, 16, 4, 8, false, &mut rng);
    let mut tape = Tape::new();
    let bundle = build_bundle(&empty, &q, &Default::default());
    let out = integrate_forward(&mut tape, &store, &emb, &ip, &bundle, &q.query_item).unwrap();
    assert!(tape.value(out).data.iter().all(|&v| v == 0.0));

    // single-class AUC rejected
    assert!(auc(&[0.3, 0.7], &[1, 1]).is_err());
    assert!(auc(&[0.3, 0.7], &[0, 0]).is_err());
    assert!(auc(&[], &[]).is_err());

    // z_score of an empty sub-sequence is 0
    assert_eq!(z_score(&[], &[]), 0.0);

    println!("ACCEPTANCE 7 degenerate-inputs: PASS");
}

#[test]
fn criterion_8_determinism() {
    let data = small_prepared(30, 8);
    let run = || {
        let mut model = FinModel::new(FinConfig::default(), &data.vocab_sizes()).unwrap();
        let opts = TrainOptions {
            epochs: 1,
            batch_size: 16,
            ..TrainOptions::default()
        };
        let report = train(&mut model, &data.sequences, &data.train, &opts).unwrap();
        (report.step_losses, model.store)
    };
    let (losses_a, store_a) = run();
    let (losses_b, store_b) = run();
    assert_eq!(losses_a.len(), losses_b.len());
    for (a, b) in losses_a.iter().zip(&losses_b) {
        assert_eq!(a.to_bits(), b.to_bits(), "loss trace differs");
    }
    let dir = tempfile::tempdir().unwrap();
    store_a.save(dir.path().join("a.bin")).unwrap();
    store_b.save(dir.path().join("b.bin")).unwrap();
    let a = std::fs::read(dir.path().join("a.bin")).unwrap();
    let b = std::fs::read(dir.path().join("b.bin")).unwrap();
    assert_eq!(a, b, "checkpoints not bit-identical");
    println!("ACCEPTANCE 8 determinism: PASS");
}

#[test]
fn criterion_9_checkpoint_resume() {
    let data = small_prepared(30, 9);
    let opts_full = TrainOptions {
        epochs: 2,
        batch_size: 8,
        ..TrainOptions::default()
    };

    // uninterrupted run
    let mut full = FinModel::new(FinConfig::default(), &data.vocab_sizes()).unwrap();
    let report_full = train(&mut full, &data.sequences, &data.train, &opts_full).unwrap();
    assert!(report_full.step_losses.len() > 17, "need > 17 steps for the check");

    // stop mid-training (mid-epoch), checkpoint, reload, continue
    let cut = report_full.step_losses.len() as u64 - 10;
    let mut first = FinModel::new(FinConfig::default(), &data.vocab_sizes()).unwrap();
    let opts_cut = TrainOptions {
        max_steps: cut,
        ..opts_full.clone()
    };
    train(&mut first, &data.sequences, &data.train, &opts_cut).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.bin");
    first.store.save(&path).unwrap();

    let mut resumed = FinModel::new(FinConfig::default(), &data.vocab_sizes()).unwrap();
    resumed.restore(ParamStore::load(&path).unwrap()).unwrap();
    let report_resumed = train(&mut resumed, &data.sequences, &data.train, &opts_full).unwrap();

    assert_eq!(report_resumed.step_losses.len(), 10);
    for (i, (a, b)) in report_full.step_losses[cut as usize..]
        .iter()
        .zip(&report_resumed.step_losses)
        .enumerate()
    {
        assert_eq!(a.to_bits(), b.to_bits(), "resumed step {i} differs");
    }
    // final parameters bit-identical too
    let (scores_full, _) = score_all(&full, &data.sequences, &data.test).unwrap();
    let (scores_res, _) = score_all(&resumed, &data.sequences, &data.test).unwrap();
    for (a, b) in scores_full.iter().zip(&scores_res) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    println!("ACCEPTANCE 9 checkpoint-resume: PASS");
}
