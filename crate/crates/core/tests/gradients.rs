use mslora::autograd::OpKind;
use mslora::gradsuite::{run_suite, SuiteOptions};

#[test]
fn full_suite_passes() {
    let report = run_suite(&SuiteOptions::default()).unwrap();
    for r in &report.reports {
        println!(
            "{:<32} {:.3e} ({}[{}])",
            r.op, r.max_rel_error, r.worst_param, r.worst_index
        );
    }
    assert!(report.passed, "max rel error {}", report.max_rel_error());
}

#[test]
fn suite_is_deterministic() {
    let a = run_suite(&SuiteOptions {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let b = run_suite(&SuiteOptions {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn injected_fault_is_caught() {
    let report = run_suite(&SuiteOptions {
        fault: Some(OpKind::Depthwise),
        ..Default::default()
    })
    .unwrap();
    assert!(!report.passed);
    let failed: Vec<&str> = report.failures().map(|r| r.op.as_str()).collect();
    assert!(failed.contains(&"conv_depthwise_k3"));
    assert!(failed.contains(&"module_enhanced"));
    assert!(!failed.contains(&"gelu"));
}
