use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use s3_core::diversity::edit_distance;
use s3_core::metrics::{exact_match, flops, token_f1, TrainingStage};

#[derive(Deserialize)]
struct Case {
    pred: String,
    gold: String,
    em: u8,
    f1: f64,
}

fn golden() -> Vec<Case> {
    include_str!("fixtures/em_f1_golden.jsonl").lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

// Reference normalization written out step by step.
fn ref_tokens(s: &str) -> Vec<String> {
    let mut kept = String::new();
    for c in s.chars() {
        let c = c.to_ascii_lowercase();
        if !"!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~".contains(c) {
            kept.push(c);
        }
    }
    kept.split_whitespace().filter(|w| *w != "a" && *w != "an" && *w != "the").map(String::from).collect()
}

// Common tokens found by trying every pairing greedily against a used-mask.
fn ref_f1(pred: &str, gold: &str) -> f64 {
    let p = ref_tokens(pred);
    let g = ref_tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; g.len()];
    let mut common = 0;
    for t in &p {
        for (j, u) in g.iter().enumerate() {
            if !used[j] && u == t {
                used[j] = true;
                common += 1;
                break;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let (pr, rc) = (common as f64 / p.len() as f64, common as f64 / g.len() as f64);
    2.0 * pr * rc / (pr + rc)
}

#[test]
fn golden_em_f1_cases() {
    let cases = golden();
    assert_eq!(cases.len(), 50);
    for c in &cases {
        assert_eq!(exact_match(&c.pred, &c.gold), c.em, "em {:?} vs {:?}", c.pred, c.gold);
        assert!((token_f1(&c.pred, &c.gold) - c.f1).abs() < 1e-9, "f1 {:?} vs {:?}", c.pred, c.gold);
        assert_eq!(u8::from(ref_tokens(&c.pred) == ref_tokens(&c.gold)), c.em);
        assert!((ref_f1(&c.pred, &c.gold) - c.f1).abs() < 1e-9);
    }
}

#[test]
fn word_order_and_articles() {
    assert_eq!(token_f1("great acting", "acting great"), 1.0);
    assert_eq!(exact_match("great acting", "acting great"), 0);
    assert_eq!(exact_match("The Answer.", "answer"), 1);
    assert_eq!(token_f1("the", "an"), 1.0);
}

fn dp_edit(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in t[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

#[test]
fn edit_distance_matches_dp_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let alphabet: Vec<char> = "abcdé ".chars().collect();
    let s = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(0..=20);
        (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect::<String>()
    };
    for _ in 0..1000 {
        let (a, b) = (s(&mut rng), s(&mut rng));
        assert_eq!(edit_distance(&a, &b), dp_edit(&a, &b), "{a:?} {b:?}");
    }
}

#[test]
fn flops_by_hand() {
    // 6 * params * tokens, per record then per stage.
    let r = flops(66e6, 512.0, &[TrainingStage { records: 1000.0, epochs: 2.0 }]).unwrap();
    assert_eq!(r.per_record_flops, 6.0 * 66e6 * 512.0);
    assert_eq!(r.total, 6.0 * 66e6 * 512.0 * 2000.0);
    assert!(flops(0.0, 512.0, &[]).is_err());
}
