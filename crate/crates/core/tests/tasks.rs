use explab::tasks::{
    edit_distance, generate_example, generate_split_example, length_ratio, strip_eos, token_error_rate, Dataset,
    Split, TaskSpec, FIRST_CONTENT,
};
use explab::{Error, EOS};
use proptest::prelude::*;

/// Full-matrix Levenshtein distance.
fn levenshtein_oracle(a: &[u32], b: &[u32]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

#[test]
fn mean_target_length_matches_closed_form() {
    let mut total_len = 0.0;
    let mut total_expected = 0.0;
    for i in 0..10_000u64 {
        let spec = TaskSpec {
            seed: i,
            noise_prob: 0.0,
            ..TaskSpec::default()
        };
        let ex = generate_example(&spec, i).unwrap();
        total_len += ex.t() as f64;
        total_expected += 4.0 * ex.prompt.len() as f64 + 1.0;
    }
    let ratio = total_len / total_expected;
    assert!((ratio - 1.0).abs() < 0.02, "ratio {ratio}");
}

#[test]
fn unit_expansion_is_a_fixed_symbol_map() {
    let spec = TaskSpec {
        expansion_min: 1,
        expansion_max: 1,
        noise_prob: 0.0,
        speech_vocab: 40,
        ..TaskSpec::default()
    };
    let mut seen = std::collections::HashMap::new();
    for i in 0..200 {
        let ex = generate_example(&spec, i).unwrap();
        assert_eq!(ex.t(), ex.prompt.len() + 1);
        assert_eq!(*ex.target.last().unwrap(), EOS);
        let mut prev = explab::SOS;
        for (&s, &tok) in ex.prompt.iter().zip(&ex.target) {
            // the variant depends on the parity of the previous token
            assert_eq!(*seen.entry((s, prev % 2)).or_insert(tok), tok);
            prev = tok;
        }
    }
}

#[test]
fn generation_is_deterministic_and_in_range() {
    let spec = TaskSpec::default();
    for split in [Split::Train, Split::Eval, Split::LongForm] {
        let (lo, hi) = spec.text_len_band(split);
        for i in 0..50 {
            let a = generate_split_example(&spec, split, i).unwrap();
            assert_eq!(a, generate_split_example(&spec, split, i).unwrap());
            assert!((lo..=hi).contains(&a.prompt.len()));
            assert!(a.prompt.iter().all(|&t| (t as usize) < spec.text_vocab));
            let (body, eos) = a.target.split_at(a.t() - 1);
            assert_eq!(eos, [EOS]);
            assert!(body.iter().all(|&t| t >= FIRST_CONTENT && (t as usize) < spec.speech_vocab));
        }
    }
    let other = TaskSpec { seed: 9, ..spec.clone() };
    let differs = (0..20).any(|i| generate_example(&spec, i).unwrap() != generate_example(&other, i).unwrap());
    assert!(differs);
}

#[test]
fn long_form_is_longer_than_eval() {
    let spec = TaskSpec::default();
    let eval = Dataset::generate(&spec, Split::Eval, 100).unwrap();
    let long = Dataset::generate(&spec, Split::LongForm, 100).unwrap();
    let mean = |d: &Dataset| d.examples.iter().map(|e| e.t()).sum::<usize>() as f64 / d.len() as f64;
    assert!(mean(&long) > 3.0 * mean(&eval));
}

#[test]
fn out_of_band_target_is_a_config_error() {
    let spec = TaskSpec {
        target_len_range: (2, 10),
        ..TaskSpec::default()
    };
    let err = (0..50).find_map(|i| generate_example(&spec, i).err()).unwrap();
    assert!(matches!(err, Error::Config { .. }));
}

#[test]
fn dataset_round_trip_and_spec_guard() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let spec = TaskSpec::default();
    let d = Dataset::generate(&spec, Split::Train, 40).unwrap();
    d.dump(&path).unwrap();
    assert_eq!(Dataset::load(&path, &spec, Split::Train).unwrap(), d);
    let other = TaskSpec { seed: 1, ..spec };
    assert!(matches!(
        Dataset::load(&path, &other, Split::Train),
        Err(Error::Artifact { .. })
    ));
}

#[test]
fn metric_edge_cases() {
    assert_eq!(token_error_rate(&[EOS], &[EOS]), 0.0);
    assert_eq!(token_error_rate(&[3, 4, EOS], &[3, 4, EOS]), 0.0);
    assert_eq!(token_error_rate(&[EOS], &[3, 4, EOS]), 1.0);
    assert_eq!(token_error_rate(&[3, 4, 5, 6], &[3, 4, EOS]), 0.5);
    assert_eq!(length_ratio(&[3, EOS, 9], &[3, 4, EOS]), 0.5);
    assert_eq!(strip_eos(&[2, EOS, 3]), &[2]);
}

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..6, 0..24)
}

proptest! {
    #[test]
    fn edit_distance_matches_oracle(a in tokens(), b in tokens()) {
        prop_assert_eq!(edit_distance(&a, &b), levenshtein_oracle(&a, &b));
    }

    #[test]
    fn edit_distance_is_a_metric(a in tokens(), b in tokens(), c in tokens()) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }

    #[test]
    fn ter_is_normalized(a in tokens(), b in tokens()) {
        let r = token_error_rate(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        let (p, g) = (strip_eos(&a), strip_eos(&b));
        if !p.is_empty() || !g.is_empty() {
            let want = levenshtein_oracle(p, g) as f64 / p.len().max(g.len()) as f64;
            prop_assert_eq!(r, want);
        }
    }
}
