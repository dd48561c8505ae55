mod support;

#[test]
fn triplet_and_total_loss_examples_are_exact() {
    let rows = support::loss_table();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert!(r.passed, "{}", r.line());
    }
}
