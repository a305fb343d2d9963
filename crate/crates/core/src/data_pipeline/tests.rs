use approx::assert_relative_eq;
use proptest::prelude::*;

use super::*;

fn grid(n: usize) -> Grid2D<f64> {
    Grid2D::square(n, n).unwrap()
}

#[test]
fn single_mode_values() {
    let g = grid(16);
    let s = ic_single_mode(g, 3);
    // Cell centers never hit the origin on an even grid; evaluate the formula there instead.
    assert_eq!((std::f64::consts::PI * 0.0f64).sin() + 2.0, 2.0);
    let u0 = s.component(0);
    let (lo, hi) = u0.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(lo >= 1.0 && hi <= 3.0);
    assert!(lo < 1.0 + 1e-2 && hi > 3.0 - 1e-2);
    for k in 1..s.flat_size() {
        assert!(s.component(k).iter().all(|&v| v == 0.0));
    }
    let (x, y) = g.center(3, 7);
    assert_relative_eq!(u0[g.index(3, 7)], (std::f64::consts::PI * (x + y)).sin() + 2.0);
}

#[test]
fn single_mode_at_origin_on_odd_grid() {
    let g = grid(9);
    let s = ic_single_mode(g, 1);
    assert_eq!(g.center(4, 4), (0.0, 0.0));
    assert_eq!(s.cell(g.index(4, 4))[0], 2.0);
}

#[test]
fn multi_sine_is_positive_and_seeded() {
    let g = grid(32);
    for seed in 0..5 {
        let a = ic_multi_sine(g, 2, 10, 0, seed).unwrap();
        let b = ic_multi_sine(g, 2, 10, 0, seed).unwrap();
        assert_eq!(a.data, b.data);
        let coef = MultiSineCoefficients::sample(10, &mut stream(0, seed, tags::INITIAL_CONDITION)).unwrap();
        assert!(a.component(0).iter().all(|&v| v >= coef.c && v > 0.0));
        for k in 1..a.flat_size() {
            assert!(a.component(k).iter().all(|&v| v == 0.0));
        }
    }
    assert_ne!(ic_multi_sine(g, 2, 10, 0, 1).unwrap().data, ic_multi_sine(g, 2, 10, 0, 2).unwrap().data);
    assert_ne!(ic_multi_sine(g, 2, 10, 0, 1).unwrap().data, ic_multi_sine(g, 2, 10, 1, 1).unwrap().data);
    assert!(ic_multi_sine(g, 2, 0, 0, 1).is_err());
}

#[test]
fn multi_sine_single_mode_collapse() {
    let coef = MultiSineCoefficients::sample(1, &mut stream(3, 4, tags::INITIAL_CONDITION)).unwrap();
    assert_eq!(coef.amplitude.len(), 1);
    assert_relative_eq!(coef.offset, 1.0 + coef.c);
    let (x, y) = (0.3, -0.7);
    let expected = coef.amplitude[0] * (std::f64::consts::PI * (x + y) + coef.phase[0]).sin() + coef.offset;
    assert_relative_eq!(coef.eval(x, y), expected, max_relative = 1e-15);
}

#[test]
fn materials_within_ranges() {
    let r = MaterialRanges::default();
    for seed in 0..200 {
        let m = MaterialSample::draw(&r, 7, seed).unwrap();
        assert!((0.0..=1.0).contains(&m.sigma_a) && (1.0..=10.0).contains(&m.sigma_s));
        assert_eq!(m, MaterialSample::draw(&r, 7, seed).unwrap());
    }
    let bad = MaterialRanges { sigma_a: (1.0, 0.0), ..r };
    assert!(MaterialSample::draw(&bad, 0, 0).is_err());
}

fn field(g: Grid2D<f64>, order: usize, f: impl Fn(f64, f64, usize) -> f64) -> FieldState<f64> {
    let mut s = FieldState::zeros(g, order);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let (x, y) = g.center(i, j);
            for (k, v) in s.cell_mut(g.index(i, j)).iter_mut().enumerate() {
                *v = f(x, y, k);
            }
        }
    }
    s
}

#[test]
fn derivatives_of_constant_vanish() {
    let s = field(grid(16), 4, |_, _, k| k as f64 + 0.5);
    let d = compute_derivatives(&s, 3).unwrap();
    assert_eq!(d.width, 12);
    assert!(d.dx.iter().chain(&d.dy).all(|&v| v == 0.0));
    assert!(compute_derivatives(&s, 4).is_err());
}

#[test]
fn derivative_converges_at_second_order() {
    let pi = std::f64::consts::PI;
    let err = |n: usize| {
        let s = field(grid(n), 3, |x, _, _| (pi * x).sin());
        let d = compute_derivatives(&s, 2).unwrap();
        let g = s.grid;
        let mut worst = 0.0f64;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let (x, _) = g.center(i, j);
                let c = g.index(i, j);
                for k in 0..d.width {
                    worst = worst.max((d.dx[c * d.width + k] - pi * (pi * x).cos()).abs());
                    assert!(d.dy[c * d.width + k].abs() < 1e-12);
                }
            }
        }
        worst
    };
    let (e1, e2) = (err(32), err(64));
    assert!((e1 / e2 - 4.0).abs() < 0.05, "ratio {}", e1 / e2);
}

#[test]
fn derivatives_are_linear() {
    let g = grid(16);
    let a = field(g, 3, |x, y, k| (x * (k + 1) as f64).sin() + y * y);
    let b = field(g, 3, |x, y, k| (y - x * k as f64).cos());
    let mut sum = a.clone();
    sum.data.iter_mut().zip(&b.data).for_each(|(s, v)| *s += v);
    let (da, db, ds) = (
        compute_derivatives(&a, 2).unwrap(),
        compute_derivatives(&b, 2).unwrap(),
        compute_derivatives(&sum, 2).unwrap(),
    );
    for i in 0..ds.dx.len() {
        assert!((ds.dx[i] - da.dx[i] - db.dx[i]).abs() < 1e-12);
        assert!((ds.dy[i] - da.dy[i] - db.dy[i]).abs() < 1e-12);
    }
}

#[test]
fn samples_pick_the_right_blocks() {
    let g = grid(8);
    let order = 2;
    // Moment k varies like k·x + 10k·y, so its derivatives are (k, 10k) away from the wrap.
    let s = field(g, 3, |x, y, k| k as f64 * x + 10.0 * k as f64 * y);
    let set = samples_from_snapshot(&s, order).unwrap();
    assert_eq!(set.len(), 64);
    let c = g.index(3, 4);
    let sample = set.sample(c);
    assert_eq!(sample.u, s.cell(c)[..6].to_vec());
    let expect = |r: std::ops::Range<usize>| r.map(|k| k as f64).collect::<Vec<_>>();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(&sample.dx_prev, &expect(1..3)));
    assert!(close(&sample.dx_cur, &expect(3..6)));
    assert!(close(&sample.dx_next, &expect(6..10)));
    let tenfold: Vec<f64> = expect(6..10).iter().map(|v| 10.0 * v).collect();
    assert!(close(&sample.dy_next, &tenfold));
}

#[test]
fn score_examples() {
    let g = grid(16);
    let order = 2;
    let zero = field(g, 3, |_, _, k| if k < 6 { 1.0 } else { 0.0 });
    assert_eq!(snapshot_score(&zero, order).unwrap(), 0.0);
    let v = [0.3, -1.2, 0.5, 2.0];
    let constant = field(g, 3, |_, _, k| if k >= 6 { v[k - 6] } else { 1.0 });
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert_relative_eq!(snapshot_score(&constant, order).unwrap(), norm / 2.0, max_relative = 1e-13);
    let wavy = field(g, 3, |x, y, k| if k >= 6 { (x + k as f64).sin() * y } else { 1.0 });
    let mut doubled = wavy.clone();
    doubled.data.iter_mut().for_each(|v| *v *= 2.0);
    assert_relative_eq!(
        snapshot_score(&doubled, order).unwrap(),
        2.0 * snapshot_score(&wavy, order).unwrap(),
        max_relative = 1e-14
    );
    assert!(snapshot_score(&wavy, 3).is_err());
}

fn scored(scores: &[f64]) -> Vec<ScoredFile> {
    scores
        .iter()
        .enumerate()
        .map(|(k, &s)| ScoredFile {
            file: format!("f{k}"),
            seed: k as u64 / 11,
            time: (k % 11) as f64 / 10.0,
            score: s,
        })
        .collect()
}

fn batch_topk(files: &[ScoredFile], k: usize) -> Vec<ScoredFile> {
    let mut all = files.to_vec();
    all.sort_by(|a, b| b.rank_cmp(a));
    all.truncate(k);
    all
}

#[test]
fn topk_example() {
    let sel = streaming_topk(scored(&[5.0, 1.0, 9.0, 7.0, 3.0]), 3).unwrap();
    let kept: Vec<f64> = sel.retained().iter().map(|f| f.score).collect();
    assert_eq!(kept, vec![9.0, 7.0, 5.0]);
    assert_eq!(sel.threshold(), Some(5.0));
    let big = streaming_topk(scored(&[5.0, 1.0, 9.0]), 10).unwrap();
    assert_eq!(big.retained().len(), 3);
    assert_eq!(big.threshold(), None);
    assert!(SelectionState::new(0).is_err());
}

#[test]
fn topk_ties_prefer_earlier_files() {
    let files = scored(&[2.0, 2.0, 2.0, 1.0]);
    let sel = streaming_topk(files.clone(), 2).unwrap();
    let names: Vec<String> = sel.retained().into_iter().map(|f| f.file).collect();
    assert_eq!(names, vec!["f0".to_string(), "f1".to_string()]);
    // Arrival order does not matter for ties: later (seed, time) loses either way.
    let mut reversed = files;
    reversed.reverse();
    let sel = streaming_topk(reversed, 2).unwrap();
    let names: Vec<String> = sel.retained().into_iter().map(|f| f.file).collect();
    assert_eq!(names, vec!["f0".to_string(), "f1".to_string()]);
}

/// Final status of every offered file, replayed from the ledger.
fn replay(ledger: &[LedgerEntry]) -> std::collections::BTreeMap<String, bool> {
    let mut status = std::collections::BTreeMap::new();
    for e in ledger {
        match e.action {
            SelectionAction::Kept => assert!(status.insert(e.file.clone(), true).is_none()),
            SelectionAction::Dropped => assert!(status.insert(e.file.clone(), false).is_none()),
            SelectionAction::Evicted => assert_eq!(status.insert(e.file.clone(), false), Some(true)),
        }
    }
    status
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn streaming_equals_batch_for_distinct_scores(
        raw in prop::collection::hash_set(0u32..1_000_000, 1..60),
        k in 1usize..20,
        shuffle_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut scores: Vec<f64> = raw.into_iter().map(|v| v as f64 / 7.0).collect();
        scores.sort_by(f64::total_cmp);
        scores.shuffle(&mut stream(shuffle_seed, 0, "perm"));
        let files = scored(&scores);
        let sel = streaming_topk(files.clone(), k).unwrap();
        prop_assert_eq!(sel.retained(), batch_topk(&files, k));
        prop_assert!(sel.retained().len() <= k);
        let status = replay(sel.ledger());
        prop_assert_eq!(status.len(), files.len());
        let kept: Vec<String> = status.iter().filter(|(_, &v)| v).map(|(f, _)| f.clone()).collect();
        let mut expected: Vec<String> = sel.retained().into_iter().map(|f| f.file).collect();
        expected.sort();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn retained_scores_never_below_threshold(
        scores in prop::collection::vec(0.0f64..10.0, 1..80),
        k in 1usize..10,
    ) {
        let mut sel = SelectionState::new(k).unwrap();
        for f in scored(&scores) {
            sel.offer(f);
            prop_assert!(sel.retained().len() <= k);
            if let Some(t) = sel.threshold() {
                prop_assert!(sel.retained().iter().all(|f| f.score >= t));
            }
        }
    }
}

#[test]
fn dataset_counts_and_split() {
    let g = grid(16);
    let snaps: Vec<_> = (0..3).map(|s| ic_multi_sine(g, 4, 3, 0, s).unwrap()).collect();
    let (tr, va) = dataset_from_snapshots(&snaps, 3, 0.1, 9).unwrap();
    assert_eq!(tr.len() + va.len(), 3 * 256);
    assert_eq!(va.len(), (0.1f64 * 768.0).round() as usize);
    let (tr2, va2) = dataset_from_snapshots(&snaps, 3, 0.1, 9).unwrap();
    assert_eq!((tr, va), (tr2, va2));
}
