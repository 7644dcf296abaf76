use fbsde::backward::PipelineOptions;
use fbsde::config::{build_builtin, BuiltinId, Config};
use fbsde::forward::refine_bundle;
use fbsde::harness::{error_metrics, Reference};
use fbsde::recombine::solve_scheme;
use fbsde::timegrid::TimeGrid;
use std::time::Instant;

fn main() {
    let (spec, jump) = build_builtin(BuiltinId::OuLipschitz, &Config::default()).unwrap();
    let n = 64;
    let paths = 200_000;
    let grid = TimeGrid::uniform(1.0, n).unwrap();
    let t0 = Instant::now();
    let (coarse, fine, fine_grid) = refine_bundle(&grid, 4, &jump, paths, 7).unwrap();
    eprintln!("simulate: {:?}", t0.elapsed());
    let opts = PipelineOptions::default();
    let t1 = Instant::now();
    let sol_c = solve_scheme(&spec, &grid, &coarse, &opts).unwrap();
    eprintln!("coarse pipeline (n=64): {:?}", t1.elapsed());
    let t2 = Instant::now();
    let sol_f = solve_scheme(&spec, &fine_grid, &fine, &opts).unwrap();
    eprintln!("fine pipeline (n=256): {:?}", t2.elapsed());
    let t3 = Instant::now();
    let rep = error_metrics(&sol_c, &Reference::Fine(&sol_f), &jump).unwrap();
    eprintln!("metrics: {:?}", t3.elapsed());
    eprintln!("total: {:?}", t0.elapsed());
    eprintln!("{rep:?}");
}
