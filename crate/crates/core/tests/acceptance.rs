//! Acceptance suite: one line per criterion, then a single assertion so every
//! criterion is reported even when an early one fails.

use std::io::Write;

use harnack_lab::experiments::acceptance;

#[test]
fn acceptance_criteria() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let outcomes = acceptance::run(only.as_deref()).expect("valid criterion ids");
    let mut failed = Vec::new();
    // written to the raw handle so the lines survive test output capture
    let mut out = std::io::stdout().lock();
    writeln!(out).unwrap();
    for o in &outcomes {
        writeln!(
            out,
            "[{}] criterion {:>2} {:<30} {:>8.2}s  {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.title,
            o.runtime_s,
            o.summary
        )
        .unwrap();
        if !o.pass {
            failed.push(o.id);
        }
    }
    drop(out);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
