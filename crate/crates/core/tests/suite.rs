use nbellman::registry::{default_problem, NAMES};
use nbellman::verify::{property_suite, SuiteConfig};

#[test]
fn registry_suite_passes() {
    let problems: Vec<_> = NAMES.iter().map(|n| default_problem(n).unwrap()).collect();
    let rep = property_suite(&problems, &SuiteConfig::default());
    for r in &rep.results {
        println!("{:>14} {:<22} {} margin={:.3e} {}", r.problem, r.name, r.passed, r.margin, r.detail);
    }
    assert!(rep.passed, "failures: {:?}", rep.failures().map(|r| (&r.problem, &r.name)).collect::<Vec<_>>());
}
