use super::*;
use crate::rng::seeded;
use rand_distr::{Distribution, StandardNormal};

/// Sweep at the midpoints between consecutive distinct scores plus one point
/// below and one above the range, counting with plain loops.
fn brute_force_eer(same: &[f64], diff: &[f64]) -> f64 {
    let mut all: Vec<f64> = same.iter().chain(diff).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut cuts = vec![all[0] - 1.0];
    for w in all.windows(2) {
        cuts.push(0.5 * (w[0] + w[1]));
    }
    cuts.push(all[all.len() - 1] + 1.0);
    let mut pts = Vec::new();
    for &t in &cuts {
        let mut fp = 0usize;
        for &d in diff {
            if d >= t {
                fp += 1;
            }
        }
        let mut fn_ = 0usize;
        for &s in same {
            if s < t {
                fn_ += 1;
            }
        }
        pts.push((fp as f64 / diff.len() as f64, fn_ as f64 / same.len() as f64));
    }
    for k in 0..pts.len() {
        let g = pts[k].0 - pts[k].1;
        if g <= 0.0 {
            if g == 0.0 {
                return pts[k].0;
            }
            let gp = pts[k - 1].0 - pts[k - 1].1;
            let w = gp / (gp - g);
            return pts[k - 1].0 + w * (pts[k].0 - pts[k - 1].0);
        }
    }
    unreachable!()
}

fn gaussian_vec(rng: &mut Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>().iter().map(|&v| v as f32).collect()
}

fn table_from(groups: &[(usize, usize)], dim: usize, seed: u64) -> EmbeddingTable {
    // (files, segments per file) per singer, random vectors
    let mut rng = seeded(seed);
    let mut rows = Vec::new();
    for (s, &(files, segs)) in groups.iter().enumerate() {
        for f in 0..files {
            for seg in 0..segs {
                rows.push(EmbeddingRow {
                    clip_id: format!("s{s}/f{f}.wav"),
                    segment: seg,
                    singer_id: Some(format!("singer{s:02}")),
                    vector: gaussian_vec(&mut rng, dim),
                });
            }
        }
    }
    EmbeddingTable::new(dim, rows)
}

#[test]
fn eer_perfect_separation_is_zero() {
    let r = eer_from_scores(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
    assert_eq!(r.eer, 0.0);
}

#[test]
fn eer_small_example_matches_brute_force() {
    let same = [0.9, 0.6, 0.4];
    let diff = [0.7, 0.3, 0.2];
    let r = eer_from_scores(&same, &diff).unwrap();
    assert_eq!(r.eer, brute_force_eer(&same, &diff));
    assert!((r.eer - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn eer_random_sets_match_brute_force() {
    let mut rng = seeded(5);
    for _ in 0..100 {
        let mut same = Vec::new();
        let mut diff = Vec::new();
        for _ in 0..200 {
            // coarse grid produces ties
            let k = rng.gen_range(0..40u32);
            if rng.gen_bool(0.5) {
                same.push(f64::from(k + 4) / 40.0);
            } else {
                diff.push(f64::from(k) / 40.0);
            }
        }
        let r = eer_from_scores(&same, &diff).unwrap();
        assert_eq!(r.eer, brute_force_eer(&same, &diff));
    }
}

#[test]
fn eer_identical_distributions_is_half() {
    let mut rng = seeded(6);
    let s: Vec<f64> = (0..10000).map(|_| rng.gen()).collect();
    let d: Vec<f64> = (0..10000).map(|_| rng.gen()).collect();
    let r = eer_from_scores(&s, &d).unwrap();
    assert!((r.eer - 0.5).abs() < 0.02, "{}", r.eer);
}

#[test]
fn eer_is_rank_invariant_and_det_is_monotone() {
    let mut rng = seeded(7);
    let s: Vec<f64> = (0..300).map(|_| rng.gen_range(-0.2..1.0)).collect();
    let d: Vec<f64> = (0..300).map(|_| rng.gen_range(-1.0..0.5)).collect();
    let a = eer_from_scores(&s, &d).unwrap();
    let f = |v: &f64| (3.0 * v).exp() + 7.0;
    let b = eer_from_scores(&s.iter().map(f).collect::<Vec<_>>(), &d.iter().map(f).collect::<Vec<_>>()).unwrap();
    assert!((a.eer - b.eer).abs() < 1e-15);
    for w in a.det.windows(2) {
        assert!(w[1].false_positive_rate <= w[0].false_positive_rate);
        assert!(w[1].false_negative_rate >= w[0].false_negative_rate);
        assert!(w[1].threshold > w[0].threshold);
    }
}

#[test]
fn eer_requires_both_classes() {
    assert_eq!(eer_from_scores(&[], &[0.1]), Err(MetricsError::SingleClass("same-singer")));
    assert_eq!(eer_from_scores(&[0.1], &[]), Err(MetricsError::SingleClass("different-singer")));
}

#[test]
fn trials_are_consistent_and_balanced() {
    let table = table_from(&[(2, 3); 6], 8, 1);
    let a = sample_trials(&table, 10000, &mut seeded(2)).unwrap();
    let b = sample_trials(&table, 10000, &mut seeded(2)).unwrap();
    assert_eq!(a, b);
    for t in &a.trials {
        let (ra, rb) = (&table.rows[t.a], &table.rows[t.b]);
        assert_eq!(ra.singer_id == rb.singer_id, t.same_singer);
        assert_ne!(t.a, t.b);
        assert!((t.score - cosine(&ra.vector, &rb.vector)).abs() < 1e-12);
    }
    assert!((a.same_fraction() - 0.5).abs() < 0.02);

    let tiny = table_from(&[(1, 2), (1, 2)], 3, 3);
    let t = sample_trials(&tiny, 4, &mut seeded(1)).unwrap();
    assert_eq!(t, sample_trials(&tiny, 4, &mut seeded(1)).unwrap());
    assert!(sample_trials(&table_from(&[(1, 3)], 3, 3), 4, &mut seeded(1)).is_err());
}

#[test]
fn mnr_planted_and_farthest() {
    // recordings of two segments: q pair shares a direction, distractors are
    // orthogonal (planted) or opposite (farthest)
    let dim = 4;
    let mk = |clip: usize, seg: usize, v: Vec<f32>| EmbeddingRow {
        clip_id: format!("c{clip}"),
        segment: seg,
        singer_id: None,
        vector: v,
    };
    let mut rows = Vec::new();
    for c in 0..20 {
        let mut v = vec![0.0f32; dim];
        v[c % dim] = 1.0;
        rows.push(mk(c, 0, v.clone()));
        rows.push(mk(c, 1, v));
    }
    // directions repeat every 4 recordings, so only use distinct ones as queries
    let planted = EmbeddingTable::new(dim, rows[..8].to_vec());
    assert_eq!(mnr(&planted, 200, 7, &mut seeded(1)).unwrap(), 0.0);

    let mut rows = vec![mk(0, 0, vec![1.0, 0.0]), mk(0, 1, vec![-1.0, 0.0])];
    for c in 1..10 {
        rows.push(mk(c, 0, vec![0.0, 1.0]));
    }
    let far = EmbeddingTable::new(2, rows);
    let n = 8;
    let m = mnr(&far, 100, n, &mut seeded(2)).unwrap();
    assert!((m - (n - 1) as f64 / n as f64).abs() < 1e-12);
}

#[test]
fn mnr_random_sphere_is_half() {
    let table = table_from(&[(40, 4); 10], 16, 4);
    let m = mnr(&table, 1000, 512, &mut seeded(9)).unwrap();
    assert!((m - 0.5).abs() < 0.05, "{m}");
}

#[test]
fn mnr_checks_data_size() {
    let table = table_from(&[(2, 2)], 4, 4);
    assert!(matches!(mnr(&table, 10, 4, &mut seeded(1)), Err(MetricsError::Insufficient(_))));
}

#[test]
fn kfold_partition_arithmetic() {
    let table = table_from(&[(5, 2); 20], 4, 5);
    let folds = kfold_splits(&table, 5, &mut seeded(3)).unwrap();
    assert_eq!(folds, kfold_splits(&table, 5, &mut seeded(3)).unwrap());
    let mut tested = vec![0usize; table.len()];
    for f in &folds {
        let files: std::collections::BTreeSet<&str> = f.test.iter().map(|&i| table.rows[i].clip_id.as_str()).collect();
        assert_eq!(files.len(), 20);
        for &i in &f.test {
            tested[i] += 1;
        }
        let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..table.len()).collect::<Vec<_>>());
    }
    assert!(tested.iter().all(|&c| c == 1));
    match kfold_splits(&table_from(&[(5, 1), (3, 1)], 4, 5), 5, &mut seeded(3)) {
        Err(MetricsError::TooFewFiles { singer, files: 3, folds: 5 }) => assert_eq!(singer, "singer01"),
        other => panic!("{other:?}"),
    }
}

fn labeled(table: &EmbeddingTable, idx: &[usize]) -> Vec<(Vec<f32>, String)> {
    idx.iter()
        .map(|&i| (table.rows[i].vector.clone(), table.rows[i].singer_id.clone().unwrap()))
        .collect()
}

fn view(v: &[(Vec<f32>, String)]) -> Vec<(&[f32], &str)> {
    v.iter().map(|(x, y)| (x.as_slice(), y.as_str())).collect()
}

#[test]
fn probe_separable_clusters() {
    let mut rng = seeded(8);
    let mut rows = Vec::new();
    for s in 0..2 {
        for f in 0..10 {
            let mut v: Vec<f32> = gaussian_vec(&mut rng, 2).iter().map(|x| 0.2 * x).collect();
            v[0] += if s == 0 { 4.0 } else { -4.0 };
            rows.push(EmbeddingRow {
                clip_id: format!("{s}-{f}"),
                segment: 0,
                singer_id: Some(format!("s{s}")),
                vector: v,
            });
        }
    }
    let table = EmbeddingTable::new(2, rows);
    let report = probe_kfold(&table, 5, &ProbeConfig::default(), &mut seeded(1)).unwrap();
    assert_eq!(report.mean_accuracy, 1.0, "{report:?}");
}

#[test]
fn probe_uninformative_embeddings_are_chance() {
    // vectors are drawn independently of the 20 balanced labels
    let mut accs = Vec::new();
    for seed in 0..4 {
        let table = table_from(&[(5, 4); 20], 16, 20 + seed);
        let report = probe_kfold(&table, 5, &ProbeConfig::default(), &mut seeded(seed)).unwrap();
        accs.extend(report.fold_accuracies);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.05).abs() < 0.03, "{mean}");
}

#[test]
fn probe_unseen_test_label_is_an_error() {
    let a = [0.0f32, 1.0];
    let b = [1.0f32, 0.0];
    let train = [(&a[..], "x"), (&b[..], "y")];
    let test = [(&a[..], "z")];
    assert_eq!(
        train_linear_probe(&train, &train, &test, &ProbeConfig::default()).unwrap_err(),
        MetricsError::UnseenLabel("z".into())
    );
}

#[test]
fn probe_never_sees_test_labels() {
    let table = table_from(&[(5, 3); 6], 8, 11);
    let f = &kfold_splits(&table, 5, &mut seeded(1)).unwrap()[0];
    let (tr, va, te) = (labeled(&table, &f.train), labeled(&table, &f.val), labeled(&table, &f.test));
    let a = train_linear_probe(&view(&tr), &view(&va), &view(&te), &ProbeConfig::default()).unwrap();
    let mut permuted = te.clone();
    let labels: Vec<String> = te.iter().map(|(_, y)| y.clone()).collect();
    for (i, p) in permuted.iter_mut().enumerate() {
        p.1 = labels[(i + 3) % labels.len()].clone();
    }
    let b = train_linear_probe(&view(&tr), &view(&va), &view(&permuted), &ProbeConfig::default()).unwrap();
    assert_eq!(a.probe, b.probe);
    assert_eq!(a.best_epoch, b.best_epoch);
}
