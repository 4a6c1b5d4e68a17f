use tempofit::gradcheck::{block_cases, grad_check, CheckOptions, DEFAULT_TOLERANCE};

#[test]
fn every_block_matches_finite_differences_on_ten_seeds() {
    let options = CheckOptions::default();
    let mut failures = Vec::new();
    for seed in 0..10 {
        for case in block_cases(seed).unwrap() {
            let report = grad_check(&case, DEFAULT_TOLERANCE, &options).unwrap();
            eprintln!("seed {seed} {:<32} {:.3e} {:?}", report.name, report.max_rel_error, report.worst());
            if !report.passed {
                failures.push(format!("seed {seed}: {} {:?}", report.name, report.worst()));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
