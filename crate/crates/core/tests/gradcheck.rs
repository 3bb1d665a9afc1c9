use aspdc_core::gradcheck::{run_suite, GradCheck, SUITE};

#[test]
fn every_op_passes_over_five_seeds() {
    let seeds = [0, 1, 2, 3, 4];
    let reports = run_suite(&GradCheck::default(), &seeds, |r| eprintln!("{r}")).unwrap();
    assert_eq!(reports.len(), SUITE.len() * seeds.len());
    assert!(reports.len() >= 25);
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.to_string())
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
