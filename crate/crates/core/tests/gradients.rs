mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    let cases = common::gradient_cases();
    assert!(cases.len() >= 20);
    let bad: Vec<String> = cases
        .iter()
        .filter(|c| c.error.is_nan() || c.error >= common::FD_TOL)
        .map(|c| format!("{}: {:.3e}", c.name, c.error))
        .collect();
    assert!(bad.is_empty(), "{bad:#?}");
}
