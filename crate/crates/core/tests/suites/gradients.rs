//! Central finite-difference checks of every differentiable building block.
//!
//! Each case builds a scalar `sum(output * R)` with a fixed random `R`,
//! compares the analytic gradient against `(f(x+h) - f(x-h)) / 2h` on a
//! random subset of coordinates, and skips coordinates where the one-sided
//! slopes disagree (a kink of max-pooling or a nearest-neighbour switch).

use std::rc::Rc;

use pprl::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use pprl::losses::{aux_loss_graph, PatchTargets};
use pprl::nn::{LayerNorm, Linear};
use pprl::rng::{seeded, StdRng};
use pprl::sac::Actor;
use pprl::tokenizer::{PatchEmbedder, TokenizerWidths};
use pprl::transformer::SequencePool;
use rand::Rng;

use super::Outcome;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
const COORDS_PER_CASE: usize = 12;

type Build<'a> = dyn Fn(&mut Graph, &ParamStore) -> Var + 'a;

/// Worst relative error over the checked coordinates of one case.
#[derive(Clone, Copy, Debug, Default)]
pub struct CaseReport {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn eval(store: &ParamStore, build: &Build) -> f64 {
    let mut g = Graph::new();
    let out = build(&mut g, store);
    g.value(out).item()
}

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn check_case(store: &mut ParamStore, ids: &[ParamId], build: &Build, rng: &mut StdRng) -> CaseReport {
    let mut g = Graph::new();
    let out = build(&mut g, store);
    let grads = g.backward(out).expect("scalar output");
    let f0 = g.value(out).item();
    let mut report = CaseReport::default();
    for _ in 0..COORDS_PER_CASE {
        let id = ids[rng.random_range(0..ids.len())];
        let len = store.get(id).len();
        let j = rng.random_range(0..len);
        let analytic = grads.param(id).map_or(0.0, |g| g[j]);
        let x = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = x + STEP;
        let fp = eval(store, build);
        store.get_mut(id).data_mut()[j] = x - STEP;
        let fm = eval(store, build);
        store.get_mut(id).data_mut()[j] = x;
        let central = (fp - fm) / (2.0 * STEP);
        let (fwd, bwd) = ((fp - f0) / STEP, (f0 - fm) / STEP);
        if (fwd - bwd).abs() > 1e-2 * central.abs().max(1.0) {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        report.max_rel = report.max_rel.max(rel_err(analytic, central));
    }
    report
}

fn random_tensor(rng: &mut StdRng, shape: Vec<usize>, scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `sum(x * r)` for a constant `r` of the same shape.
fn weighted_sum(g: &mut Graph, x: Var, r: &Tensor) -> Var {
    let rv = g.constant(r.clone());
    let shape = g.value(x).shape().to_vec();
    let rv = g.reshape(rv, shape).unwrap();
    let p = g.mul(x, rv).unwrap();
    g.sum(p)
}

fn tokenizer_case(rng: &mut StdRng) -> CaseReport {
    let mut store = ParamStore::new();
    let f = if rng.random_bool(0.5) { 6 } else { 3 };
    let widths = TokenizerWidths { first: [rng.random_range(2..6), rng.random_range(2..6)], second_hidden: rng.random_range(2..6) };
    let dim = rng.random_range(2..7);
    let emb = PatchEmbedder::new(&mut store, "tok", f, widths, dim, rng);
    let (p, k) = (rng.random_range(1..4), rng.random_range(1..6));
    let input = store.add("input", random_tensor(rng, vec![p * k, f], 1.0));
    let r = random_tensor(rng, vec![p, dim], 1.0);
    let mut ids = emb.params();
    ids.push(input);
    let build = |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, input);
        let y = emb.embed(g, s, x, k).unwrap();
        weighted_sum(g, y, &r)
    };
    check_case(&mut store, &ids, &build, rng)
}

fn attention_case(rng: &mut StdRng) -> CaseReport {
    let mut store = ParamStore::new();
    let (batch, seq, heads, dh) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..4));
    let dim = heads * dh;
    let q = store.add("q", random_tensor(rng, vec![batch * seq, dim], 1.5));
    let k = store.add("k", random_tensor(rng, vec![batch * seq, dim], 1.5));
    let v = store.add("v", random_tensor(rng, vec![batch * seq, dim], 1.5));
    let mask: Rc<[bool]> = (0..batch * seq * seq)
        .map(|e| {
            let (i, j) = ((e / seq) % seq, e % seq);
            i == j || rng.random_bool(0.6)
        })
        .collect();
    let r = random_tensor(rng, vec![batch * seq, dim], 1.0);
    let build = |g: &mut Graph, s: &ParamStore| {
        let (qv, kv, vv) = (g.param(s, q), g.param(s, k), g.param(s, v));
        let y = g.attention(qv, kv, vv, heads, batch, mask.clone()).unwrap();
        weighted_sum(g, y, &r)
    };
    check_case(&mut store, &[q, k, v], &build, rng)
}

fn layer_norm_case(rng: &mut StdRng) -> CaseReport {
    let mut store = ParamStore::new();
    let (rows, dim) = (rng.random_range(1..6), rng.random_range(2..9));
    let ln = LayerNorm::new(&mut store, "ln", dim);
    *store.get_mut(ln.gain) = random_tensor(rng, vec![dim], 2.0);
    *store.get_mut(ln.offset) = random_tensor(rng, vec![dim], 1.0);
    let x = store.add("x", random_tensor(rng, vec![rows, dim], 2.0));
    let r = random_tensor(rng, vec![rows, dim], 1.0);
    let build = |g: &mut Graph, s: &ParamStore| {
        let xv = g.param(s, x);
        let y = ln.forward(g, s, xv).unwrap();
        weighted_sum(g, y, &r)
    };
    check_case(&mut store, &[ln.gain, ln.offset, x], &build, rng)
}

fn pooling_case(rng: &mut StdRng) -> CaseReport {
    let mut store = ParamStore::new();
    let (batch, seq, dim) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..6));
    let pool = SequencePool { score: Linear::new(&mut store, "pool", dim, 1, rng) };
    let tokens = store.add("tokens", random_tensor(rng, vec![batch * seq, dim], 1.5));
    let n_real: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=seq)).collect();
    let r = random_tensor(rng, vec![batch, dim], 1.0);
    let mut ids = pool.score.params().to_vec();
    ids.push(tokens);
    let build = |g: &mut Graph, s: &ParamStore| {
        let t = g.param(s, tokens);
        let (pooled, _) = pool.forward(g, s, t, &n_real).unwrap();
        weighted_sum(g, pooled, &r)
    };
    check_case(&mut store, &ids, &build, rng)
}

fn head_case(rng: &mut StdRng) -> CaseReport {
    let mut store = ParamStore::new();
    let (n, dim, k) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..5));
    let f = if rng.random_bool(0.5) { 6 } else { 3 };
    let head = Linear::new(&mut store, "head", dim, k * f, rng);
    let tokens = store.add("tokens", random_tensor(rng, vec![n, dim], 1.0));
    let r = random_tensor(rng, vec![n * k, f], 1.0);
    let mut ids = head.params().to_vec();
    ids.push(tokens);
    let build = |g: &mut Graph, s: &ParamStore| {
        let t = g.param(s, tokens);
        let y = head.forward(g, s, t).unwrap();
        let y = g.reshape(y, vec![n * k, f]).unwrap();
        weighted_sum(g, y, &r)
    };
    check_case(&mut store, &ids, &build, rng)
}

fn random_targets(rng: &mut StdRng, patches: usize, k: usize, colors: bool) -> PatchTargets {
    PatchTargets {
        positions: (0..patches * k).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect(),
        colors: colors.then(|| (0..patches * k).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..1.0))).collect()),
        k,
    }
}

fn reconstruction_case(rng: &mut StdRng, color: bool) -> CaseReport {
    let mut store = ParamStore::new();
    let (patches, kp, kg) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
    let f = if color { 6 } else { 3 };
    let pred = store.add("pred", random_tensor(rng, vec![patches * kp, f], 1.0));
    let targets = random_targets(rng, patches, kg, color);
    let weight = color.then(|| rng.random_range(0.5..2.0));
    let build = |g: &mut Graph, s: &ParamStore| {
        let p = g.param(s, pred);
        aux_loss_graph(g, p, kp, &targets, weight).unwrap().0
    };
    check_case(&mut store, &[pred], &build, rng)
}

fn actor_case(rng: &mut StdRng) -> CaseReport {
    let mut store = ParamStore::new();
    let (rows, input, hidden, act) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(2..7), rng.random_range(1..4));
    let actor = Actor::new(&mut store, input, hidden, rng.random_range(1..3), act, rng);
    let emb = store.add("emb", random_tensor(rng, vec![rows, input], 1.0));
    let eps = actor.noise(rows, rng);
    let r = random_tensor(rng, vec![rows, 1], 1.0);
    let mut ids = actor.params();
    ids.push(emb);
    let build = |g: &mut Graph, s: &ParamStore| {
        let e = g.param(s, emb);
        let sample = actor.forward(g, s, e, &eps).unwrap();
        weighted_sum(g, sample.log_prob, &r)
    };
    check_case(&mut store, &ids, &build, rng)
}

/// Names of the checked operations, in report order.
pub const OPERATIONS: [&str; 8] = [
    "tokenizer mlp",
    "attention",
    "layer norm",
    "sequence pooling",
    "prediction head",
    "chamfer",
    "color loss",
    "actor log-prob",
];

pub fn run_operation(name: &str, cases: usize, seed: u64) -> (f64, usize, usize) {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for _ in 0..cases {
        let rep = match name {
            "tokenizer mlp" => tokenizer_case(&mut rng),
            "attention" => attention_case(&mut rng),
            "layer norm" => layer_norm_case(&mut rng),
            "sequence pooling" => pooling_case(&mut rng),
            "prediction head" => head_case(&mut rng),
            "chamfer" => reconstruction_case(&mut rng, false),
            "color loss" => reconstruction_case(&mut rng, true),
            "actor log-prob" => actor_case(&mut rng),
            other => panic!("unknown operation {other}"),
        };
        worst = worst.max(rep.max_rel);
        checked += rep.checked;
        skipped += rep.skipped;
    }
    (worst, checked, skipped)
}

pub fn run(cases: usize, seed: u64) -> Outcome {
    let mut failures = Vec::new();
    let mut worst_all = 0.0f64;
    let mut skipped_all = 0;
    for (i, op) in OPERATIONS.iter().enumerate() {
        let (worst, checked, skipped) = run_operation(op, cases, seed.wrapping_add(i as u64));
        worst_all = worst_all.max(worst);
        skipped_all += skipped;
        if !(worst < TOLERANCE) {
            failures.push(format!("{op}: max relative error {worst:.2e}"));
        }
        if checked < cases {
            failures.push(format!("{op}: only {checked} coordinates checked"));
        }
    }
    Outcome::from_failures(
        format!("{} operations x {cases} cases, max relative error {worst_all:.2e}, {skipped_all} kink coordinates skipped", OPERATIONS.len()),
        failures,
    )
}
