use textrestore::degrade::DegradationSpec;
use textrestore::train::make_triplet_texts;

#[test]
fn corrupted_anchor_rate_matches_three_independent_clauses() {
    let n = 1000;
    let p = 0.3;
    let spec = DegradationSpec::noise(25.0, 0);
    let corrupted = (0..n).filter(|&s| {
        let t = make_triplet_texts(&spec, p, s as u64);
        t.anchor.text != t.positive.text
    });
    let rate = corrupted.count() as f64 / n as f64;
    let expected = 1.0 - (1.0 - p).powi(3);
    let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
    assert!((rate - expected).abs() <= 3.0 * sigma, "rate {rate}, expected {expected} ± {}", 3.0 * sigma);
}

#[test]
fn positive_and_negative_disagree_on_every_clause() {
    let t = make_triplet_texts(&DegradationSpec::noise(50.0, 1), 0.3, 9);
    let pos: Vec<&str> = t.positive.text.split(". ").collect();
    let neg: Vec<&str> = t.negative.text.split(". ").collect();
    assert_eq!(pos.len(), 3, "{}", t.positive.text);
    assert_eq!(neg.len(), 3, "{}", t.negative.text);
    assert!(pos.iter().zip(&neg).all(|(a, b)| a != b));
}

#[test]
fn zero_corruption_anchor_is_the_positive() {
    for s in 0..20 {
        let t = make_triplet_texts(&DegradationSpec::noise(15.0, 2), 0.0, s);
        assert_eq!(t.anchor.text, t.positive.text);
    }
}
