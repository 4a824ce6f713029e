use topoquant::gradcheck::{relative_error, run_gradcheck, GradcheckOptions, Term};

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
    assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
}

#[test]
fn every_suite_passes_on_a_few_seeds() {
    let opts = GradcheckOptions {
        seeds: 3,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&opts, &[]);
    print!("{}", report.to_table());
    assert!(report.passed(), "{}", report.to_table());
    assert_eq!(report.terms.len(), Term::ALL.len());
}

#[test]
fn corrupted_gradient_is_caught_and_named() {
    for term in [Term::Hole, Term::Total] {
        let opts = GradcheckOptions {
            seeds: 1,
            corrupt: Some(term),
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts, &[term, Term::CrossEntropy]);
        assert_eq!(report.failed_terms(), vec![term]);
    }
}
