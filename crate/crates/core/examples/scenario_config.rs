//! Parsing a scenario configuration and running it in-process.

use meanfield::cli::{parse_config, preset, run_scenario};

fn main() -> meanfield::Result<()> {
    let text = "\
scenario = feynman_kac_linear
reference = heat_quadratic

[numerics]
N = 100
M = 20000
dt = 0.02
seed = 3

[Phi]
outer = x_squared

[probes]
t = 0, 0.5
x = -1, 1
";
    let config = parse_config(text)?;
    println!("planned step sizes: {:?}", config.planned_runs());
    let report = run_scenario(&config)?;
    for line in &report.lines {
        println!("{line}");
    }
    print!("{}", String::from_utf8_lossy(&report.csv));

    match parse_config("scenario = ito_residual\nnumerics.dt = 0.3\ncoeff.id = warp\n") {
        Err(e) => println!("{e}"),
        Ok(_) => unreachable!("invalid configuration accepted"),
    }

    let w2 = parse_config(preset("w2_selftest").expect("built-in preset"))?;
    let report = run_scenario(&w2)?;
    println!("w2_selftest preset passed: {}", report.passed());
    Ok(())
}
