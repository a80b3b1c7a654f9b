use regnet::coordination::*;
use regnet::netgraph::DiGraph;

fn ring_chords(n: usize) -> DiGraph {
    // undirected ring plus a few chords
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut add = |a: usize, b: usize, edges: &mut Vec<(usize, usize)>| {
        if !edges.contains(&(a, b)) { edges.push((a, b)); }
        if !edges.contains(&(b, a)) { edges.push((b, a)); }
    };
    for i in 1..=n { let j = i % n + 1; add(i, j, &mut edges); }
    add(1, n / 2, &mut edges);
    add(2, n / 2 + 3, &mut edges);
    add(4, n - 1, &mut edges);
    DiGraph::new(n, edges).unwrap()
}

fn directed_ring(n: usize) -> DiGraph {
    DiGraph::new(n, (1..=n).map(|i| (i, i % n + 1)).collect()).unwrap()
}

fn run(label: &str, comm: &DiGraph, x_r: f64, b1: f64, bo: f64, _a: f64, steps: usize) {
    let n = 12;
    let models_owned: Vec<QuadraticAggregator> = (0..n).map(|i| QuadraticAggregator {
        a: if i == 0 { 1.0 } else { 5e-4 + 5e-4 * i as f64 }, b: 0.0,
        lo: if i == 0 { -b1 } else { -bo },
        hi: if i == 0 { b1 } else { bo },
        ramp: 1e9,
    }).collect();
    let models: Vec<&dyn AggregatorModel> = models_owned.iter().map(|m| m as &dyn AggregatorModel).collect();
    let prob = CoordinationProblem::new(&models, x_r, &vec![0.0; n], comm, Gains::paper(), 0).unwrap();
    let opts = SolveOptions { dt: 1e-3, max_steps: steps, tol: 1e-3, trace_stride: 1, ..Default::default() };
    let out = solve_instant(&prob, opts).unwrap();
    let oracle = prob.centralized_oracle().unwrap();
    // band analysis on the trace
    let band = 0.01 * x_r;
    let mut last_out_of_band = 0usize;
    for row in &out.trace {
        if (row.sum_x - x_r).abs() > band { last_out_of_band = row.step; }
    }
    let err: f64 = out.trace.last().unwrap().x.iter().zip(&oracle).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let tol = 1e-3 * (1.0 + x_r);
    println!("{label}: band from step {last_out_of_band}; err {err:.3} (tol {tol:.2}); x1={:.1} x2={:.1} orc1={:.1} orc2={:.1}",
        out.trace.last().unwrap().x[0], out.trace.last().unwrap().x[1], oracle[0], oracle[1]);
}

fn main() {
    let rc = ring_chords(12);
    let dr = directed_ring(12);
    let b1 = 200.0; let bo = 260.0;
    let xr = b1 + 11.0 * bo;
    run("rc saturated", &rc, xr, b1, bo, 0.0, 4000);
    run("dr saturated", &dr, xr, b1, bo, 0.0, 8000);
}
