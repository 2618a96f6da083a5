//! Acceptance runner: one PASS / FAIL / SKIP line per criterion.
//!
//! The reinforcement-learning criteria train 16 agents and take hours on one
//! core, so they only run when `PPRL_ACCEPTANCE_RL=1`. Finished runs are
//! reused from `PPRL_RL_RUNS` (default `target/acceptance-runs`) when their
//! stored configuration matches.

#[path = "../suites/mod.rs"]
mod suites;

mod learning;

use std::process::ExitCode;
use std::time::Instant;

use suites::Outcome;

enum Status {
    Done(Outcome),
    Skipped(String),
}

fn report(name: &str, started: Instant, status: Status) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match status {
        Status::Done(o) => {
            println!("{} {name}: {} [{secs:.1}s]", if o.passed { "PASS" } else { "FAIL" }, o.detail);
            o.passed
        }
        Status::Skipped(why) => {
            println!("SKIP {name}: {why}");
            true
        }
    }
}

fn main() -> ExitCode {
    let rl = std::env::var("PPRL_ACCEPTANCE_RL").is_ok_and(|v| v == "1");
    let mut ok = true;

    let t = Instant::now();
    ok &= report("kernel oracles", t, Status::Done(suites::kernels::run(1000, 1)));

    let t = Instant::now();
    ok &= report("gradient suite", t, Status::Done(suites::gradients::run(100, 2)));

    let t = Instant::now();
    ok &= report("mask properties", t, Status::Done(suites::masks::run(500, 3)));

    let t = Instant::now();
    ok &= report("padding invariance", t, Status::Done(suites::masks::run_padding_invariance(500, 4)));

    let t = Instant::now();
    ok &= report("gradient routing", t, Status::Done(suites::routing::run(20, 5)));

    let t = Instant::now();
    ok &= report("reconstruction learning", t, Status::Done(learning::reconstruction()));

    let t = Instant::now();
    ok &= report("determinism and resume", t, Status::Done(learning::determinism_and_resume()));

    if rl {
        let runs = learning::rl_runs();
        let t = Instant::now();
        ok &= report("rl learning", t, Status::Done(learning::rl_learning(&runs)));
        let t = Instant::now();
        ok &= report("aux benefit", t, Status::Done(learning::aux_benefit(&runs)));
    } else {
        let why = "set PPRL_ACCEPTANCE_RL=1 to train the 16 agents (several hours on one core)";
        report("rl learning", Instant::now(), Status::Skipped(why.into()));
        report("aux benefit", Instant::now(), Status::Skipped(why.into()));
    }

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
