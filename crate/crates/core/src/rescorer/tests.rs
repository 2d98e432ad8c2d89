use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use super::*;
use crate::network::{score_sequence, LmArchitecture};

fn p() -> &'static Path {
    Path::new("mem")
}

fn w(s: &str) -> Vec<String> {
    words(s)
}

fn hyp(utt: &str, rank: u32, am: f64, text: &str) -> Hypothesis {
    Hypothesis {
        utt_id: utt.into(),
        rank,
        am_score: am,
        old_lm_score: 0.0,
        words: w(text),
    }
}

fn nbest(hs: Vec<Hypothesis>) -> NBest {
    let mut out = NBest::new();
    for h in hs {
        out.entry(h.utt_id.clone()).or_insert_with(Vec::new).push(h);
    }
    out
}

fn transcripts(pairs: &[(&str, &str)]) -> Transcripts {
    pairs.iter().map(|(u, s)| (u.to_string(), w(s))).collect()
}

#[test]
fn parses_grouped_hypotheses() {
    let text = "u1\t1\t-10\t-5\ta b\nu1\t2\t-11\t-5\ta c\nu1\t3\t-12\t-6\tb\n\
                u2\t2\t-3.5\t-1e2\tx\nu2\t1\t-3\t-1\ty z\nu2\t3\t-4\t-2\t\n";
    let nb = parse_nbest(text, p()).unwrap();
    assert_eq!(nb.len(), 2);
    assert!(nb.values().all(|l| l.len() == 3));
    assert_eq!(nb["u2"].iter().map(|h| h.rank).collect::<Vec<_>>(), [1, 2, 3]);
    assert_eq!(nb["u2"][0].words, ["y", "z"]);
    assert!(nb["u2"][2].words.is_empty());
    assert_eq!(nb["u2"][1].old_lm_score, -100.0);
}

#[test]
fn empty_hypothesis_without_trailing_tab() {
    let nb = parse_nbest("sil\t1\t-1\t-2\n", p()).unwrap();
    assert!(nb["sil"][0].words.is_empty());
}

#[test]
fn malformed_lines_name_their_line() {
    let cases = [
        ("u\t1\t-1\t-2\ta\nu\t1 -1 -2 b\n", 2),
        ("u\t1\t-1\t-2\ta\nu\t1\t-1\t-2\tb\n", 2),
        ("u\tone\t-1\t-2\ta\n", 1),
        ("u\t1\tabc\t-2\ta\n", 1),
        ("u\t1\t-1\tnan\ta\n", 1),
        ("u\t1\t-1\t-2\ta\nv\t1\t-1\t-2\ta\n\n", 3),
    ];
    for (text, line) in cases {
        match parse_nbest(text, p()) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn nbest_round_trip() {
    let text = "b\t2\t-1.25\t-3\tq r s\nb\t1\t-1\t-3.0000000000000004\t\na\t1\t0.1\t-7\tx\n";
    let nb = parse_nbest(text, p()).unwrap();
    let emitted = format_nbest(&nb);
    let again = parse_nbest(&emitted, p()).unwrap();
    assert_eq!(again, nb);
    assert_eq!(format_nbest(&again), emitted);
}

#[test]
fn transcripts_round_trip_and_errors() {
    let t = parse_transcripts("u2\tb c\nu1\ta\nu3\t\nu4\n", p()).unwrap();
    assert_eq!(t["u3"], Vec::<String>::new());
    assert_eq!(t["u4"], Vec::<String>::new());
    assert_eq!(parse_transcripts(&format_transcripts(&t), p()).unwrap(), t);
    assert!(matches!(parse_transcripts("u\ta\nu\tb\n", p()), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn without_lm_the_acoustic_best_wins() {
    let nb = nbest(vec![
        hyp("a", 1, -1.0, "x y"),
        hyp("a", 2, -2.0, "x"),
        hyp("b", 1, -5.0, "p"),
        hyp("b", 2, -5.5, "q r"),
    ]);
    let lm = |s: &[String]| -(s.len() as f64) * 3.0 - if s.first().is_some_and(|x| x == "x") { 1.0 } else { 0.0 };
    let r = rescore(&nb, &lm, &RescoreConfig { lm_weight: 0.0, word_insertion_penalty: 0.0 }).unwrap();
    assert!(r.values().all(|x| x.chosen.rank == 1));
}

#[test]
fn lm_preference_decides_equal_acoustics() {
    let nb = nbest(vec![hyp("u", 1, -4.0, "competitor"), hyp("u", 2, -4.0, "reference")]);
    let lm = |s: &[String]| if s[0] == "reference" { (0.1f64).ln() } else { (0.01f64).ln() };
    for lambda in [1e-6, 0.01, 0.5, 1.0, 20.0] {
        let r = rescore(&nb, &lm, &RescoreConfig { lm_weight: lambda, word_insertion_penalty: 0.0 }).unwrap();
        assert_eq!(r["u"].chosen.words, ["reference"], "{lambda}");
    }
}

#[test]
fn ties_go_to_lower_rank() {
    let nb = nbest(vec![hyp("u", 3, -1.0, "c"), hyp("u", 1, -1.0, "a"), hyp("u", 2, -1.0, "b")]);
    let mut nb = nb;
    nb.get_mut("u").unwrap().sort_by_key(|h| h.rank);
    let lm = |_: &[String]| -1.0;
    let r = rescore(&nb, &lm, &RescoreConfig { lm_weight: 1.0, word_insertion_penalty: 0.0 }).unwrap();
    assert_eq!(r["u"].chosen.rank, 1);
}

#[test]
fn insertion_penalty_shifts_scores_by_length() {
    let nb = nbest(vec![hyp("u", 1, -3.0, "a b"), hyp("u", 2, -2.0, "c d"), hyp("u", 3, -2.5, "e f")]);
    let lm = |s: &[String]| -(s.iter().map(String::len).sum::<usize>() as f64);
    let scores = lm_scores(&nb, &lm).unwrap();
    let base = select(&nb, &scores, &RescoreConfig { lm_weight: 0.7, word_insertion_penalty: 0.0 }).unwrap();
    for delta in [-3.0, 0.25, 10.0] {
        let moved = select(&nb, &scores, &RescoreConfig { lm_weight: 0.7, word_insertion_penalty: delta }).unwrap();
        for (a, b) in base["u"].scores.iter().zip(&moved["u"].scores) {
            assert!((b.combined - a.combined - 2.0 * delta).abs() < 1e-12);
        }
        assert_eq!(moved["u"].chosen, base["u"].chosen);
    }
}

#[test]
fn rescoring_rejects_bad_input() {
    let lm = |_: &[String]| -1.0;
    let nb = nbest(vec![hyp("u", 1, -1.0, "a")]);
    assert!(rescore(&nb, &lm, &RescoreConfig { lm_weight: -1.0, word_insertion_penalty: 0.0 }).is_err());
    let mut empty = NBest::new();
    empty.insert("u".into(), Vec::new());
    assert!(matches!(
        rescore(&empty, &lm, &RescoreConfig { lm_weight: 1.0, word_insertion_penalty: 0.0 }),
        Err(Error::Empty(_))
    ));
}

#[test]
fn score_dump_marks_choice() {
    let nb = nbest(vec![hyp("u", 1, -1.0, "a"), hyp("u", 2, -0.5, "b")]);
    let lm = |_: &[String]| -1.0;
    let r = rescore(&nb, &lm, &RescoreConfig { lm_weight: 1.0, word_insertion_penalty: 0.0 }).unwrap();
    let dump = format_score_dump(&nb, &r);
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].ends_with("\t0") && lines[2].ends_with("\t1"));
}

fn vocab() -> Vocabulary {
    Vocabulary::from_tokens(["<unk>", "<s>", "</s>", "a", "b", "c"].iter().map(|s| s.to_string()).collect()).unwrap()
}

fn model(v: &Vocabulary, seed: u64) -> LmModel<f64> {
    let mut arch = LmArchitecture::new(v.len(), 4, 5).with_dropout(0.0);
    arch.num_layers = 2;
    arch.residual_layers = vec![1, 2];
    let mut m = LmModel::new(arch, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    m.out_w.data_mut().iter_mut().for_each(|x| *x = r.random_range(-1.0..1.0));
    m.vocab_fingerprint = v.fingerprint().to_string();
    m
}

#[test]
fn model_scorer_matches_sequence_scores() {
    let v = vocab();
    let (m1, m2) = (model(&v, 1), model(&v, 2));
    let sents = [w("a b c"), w("c zzz"), vec![]];
    let refs: Vec<&[String]> = sents.iter().map(Vec::as_slice).collect();
    let single = ModelScorer::new(vec![&m1], InterpolationWeights::uniform(1), &v, 2).unwrap();
    let got = single.log_probs(&refs).unwrap();
    for (s, g) in sents.iter().zip(&got) {
        let want = score_sequence(&m1, &v.encode_words(s.iter().map(String::as_str))).unwrap().total_log_prob;
        assert!((g - want).abs() < 1e-12);
    }
    let mix = ModelScorer::new(vec![&m1, &m2], InterpolationWeights::new(vec![0.3, 0.7]).unwrap(), &v, 2).unwrap();
    let got = mix.log_probs(&refs).unwrap();
    for (s, g) in sents.iter().zip(&got) {
        let ids = v.encode_words(s.iter().map(String::as_str));
        let a = score_sequence(&m1, &ids).unwrap().token_log_probs;
        let b = score_sequence(&m2, &ids).unwrap().token_log_probs;
        let want: f64 = a.iter().zip(&b).map(|(x, y)| (0.3 * x.exp() + 0.7 * y.exp()).ln()).sum();
        assert!((g - want).abs() < 1e-12);
    }
    let mut stranger = model(&v, 3);
    stranger.vocab_fingerprint = "x".into();
    assert!(ModelScorer::new(vec![&stranger], InterpolationWeights::uniform(1), &v, 2).is_err());
}

#[test]
fn wer_examples() {
    let c = align(&w("a b c"), &w("a x c"));
    assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
    let r = wer(&transcripts(&[("u", "a x c")]), &transcripts(&[("u", "a b c")])).unwrap();
    assert!((r.wer - 1.0 / 3.0).abs() < 1e-15);
    let r = wer(&transcripts(&[("u", "a b c")]), &transcripts(&[("u", "a b")])).unwrap();
    assert_eq!(r.counts.insertions, 1);
    assert_eq!(r.wer, 0.5);
    let r = wer(&transcripts(&[("u", "")]), &transcripts(&[("u", "a b")])).unwrap();
    assert_eq!(r.counts.deletions, 2);
    assert!(wer(&transcripts(&[("v", "a")]), &transcripts(&[("u", "a")])).is_err());
}

/// Every (S, I, D) triple reachable by some alignment, by exhaustive
/// enumeration of edit scripts.
fn all_alignments(r: &[String], h: &[String]) -> BTreeSet<(usize, usize, usize)> {
    fn go(r: &[String], h: &[String], acc: (usize, usize, usize), out: &mut BTreeSet<(usize, usize, usize)>) {
        if r.is_empty() && h.is_empty() {
            out.insert(acc);
            return;
        }
        if !r.is_empty() && !h.is_empty() {
            let s = usize::from(r[0] != h[0]);
            go(&r[1..], &h[1..], (acc.0 + s, acc.1, acc.2), out);
        }
        if !h.is_empty() {
            go(r, &h[1..], (acc.0, acc.1 + 1, acc.2), out);
        }
        if !r.is_empty() {
            go(&r[1..], h, (acc.0, acc.1, acc.2 + 1), out);
        }
    }
    let mut out = BTreeSet::new();
    go(r, h, (0, 0, 0), &mut out);
    out
}

#[test]
fn alignment_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let alphabet = ["a", "b", "c"];
    for _ in 0..300 {
        let sample = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = rng.random_range(0..=6);
            (0..n).map(|_| alphabet[rng.random_range(0..3)].to_string()).collect()
        };
        let (r, h) = (sample(&mut rng), sample(&mut rng));
        let all = all_alignments(&r, &h);
        let best = all.iter().map(|(s, i, d)| s + i + d).min().unwrap();
        let c = align(&r, &h);
        assert_eq!(c.errors(), best, "{r:?} {h:?}");
        assert!(all.contains(&(c.substitutions, c.insertions, c.deletions)));
        assert_eq!(align(&h, &r).errors(), best);
    }
}

#[test]
fn tuning_picks_the_best_weight() {
    // u1 needs the LM, u2 is already right acoustically and only a heavy LM
    // weight breaks it.
    let nb = nbest(vec![
        hyp("u1", 1, -1.0, "wrong"),
        hyp("u1", 2, -2.0, "right"),
        hyp("u2", 1, -1.0, "good"),
        hyp("u2", 2, -9.0, "bad"),
    ]);
    let refs = transcripts(&[("u1", "right"), ("u2", "good")]);
    let lm = |s: &[String]| match s[0].as_str() {
        "right" => -1.0,
        "wrong" => -3.0,
        "good" => -5.0,
        _ => -1.0,
    };
    let scores = lm_scores(&nb, &lm).unwrap();
    let (lambda, best) = tune_lm_weight(&nb, &scores, &refs, &[10.0, 0.0, 1.0, 2.0], 0.0).unwrap();
    assert_eq!((lambda, best), (1.0, 0.0));
    assert!(tune_lm_weight(&nb, &scores, &refs, &[], 0.0).is_err());
}

#[test]
fn matched_pair_identical_systems() {
    let a = transcripts(&[("1", "a b"), ("2", "c"), ("3", "x y z")]);
    let refs = transcripts(&[("1", "a b"), ("2", "d"), ("3", "x z")]);
    for only in [false, true] {
        let r = matched_pair_test(&a, &a, &refs, only).unwrap();
        assert_eq!((r.z, r.p), (0.0, 1.0));
    }
}

#[test]
fn matched_pair_uniform_difference() {
    let refs: Transcripts = (0..100).map(|i| (format!("{i:03}"), w("a b"))).collect();
    let a: Transcripts = refs.keys().map(|k| (k.clone(), w("a c"))).collect();
    let r = matched_pair_test(&a, &refs, &refs, false).unwrap();
    assert!(r.p < 1e-10);
    assert_eq!(r.z, f64::INFINITY);
    assert_eq!(r.n, 100);
}

#[test]
fn matched_pair_balanced_differences() {
    let refs: Transcripts = (0..40).map(|i| (format!("{i:02}"), w("a b"))).collect();
    let mut a = refs.clone();
    let mut b = refs.clone();
    for (i, k) in refs.keys().enumerate() {
        if i % 2 == 0 {
            a.insert(k.clone(), w("a x"));
        } else {
            b.insert(k.clone(), w("a x"));
        }
    }
    let r = matched_pair_test(&a, &b, &refs, false).unwrap();
    assert!(r.z.abs() < 1e-9);
    assert!((r.p - 1.0).abs() < 1e-12);
}

#[test]
fn matched_pair_statistic_matches_normal_tail() {
    let refs: Transcripts = (0..30).map(|i| (format!("{i:02}"), w("a b c"))).collect();
    let mut a = refs.clone();
    let mut d = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in refs.keys() {
        let errs = rng.random_range(0..3usize);
        let hyp: Vec<String> = ["a", "b", "c"].iter().enumerate().map(|(i, x)| if i < errs { "z".into() } else { x.to_string() }).collect();
        a.insert(k.clone(), hyp);
        d.push(errs as f64);
    }
    let r = matched_pair_test(&a, &refs, &refs, false).unwrap();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let z = mean / (sd / n.sqrt());
    assert!((r.z - z).abs() < 1e-12);
    let tail = 2.0 * (1.0 - Normal::standard().cdf(z.abs()));
    assert!((r.p - tail).abs() < 1e-12);
}

#[test]
fn matched_pair_errors() {
    let one = transcripts(&[("1", "a")]);
    assert!(matched_pair_test(&one, &one, &one, false).is_err());
    let a = transcripts(&[("1", "a"), ("2", "b")]);
    let b = transcripts(&[("1", "a"), ("3", "b")]);
    assert!(matched_pair_test(&a, &b, &a, false).is_err());
    let refs = transcripts(&[("1", "a"), ("2", "b")]);
    let c = transcripts(&[("1", "x"), ("2", "b")]);
    // Only one segment differs once restricted.
    assert!(matched_pair_test(&c, &refs, &refs, true).is_err());
}
