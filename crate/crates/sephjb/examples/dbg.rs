use sephjb::config::ProblemConfig;
use sephjb::hjb::solve_first_exit;
use sephjb::policy_sim::{simulate, ExitReason, PolicyField};
use std::time::Instant;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(61);
    let lambda: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let sig: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let text = format!(r#"{{
      "grid": [
        {{ "points": {n}, "lower": -3.141592653589793, "upper": 3.141592653589793, "periodic": true }},
        {{ "points": {n}, "lower": -11.0, "upper": 11.0 }}
      ],
      "dynamics": [
        [["1", "x"]],
        [["9.8*sin(x)", "1"]]
      ],
      "control": [[[]], [[["1", "1"]]]],
      "noise": [[[]], [[["1", "1"]]]],
      "cost": {{
        "q_terms": [["0.01*x^2", "1"], ["1", "0.005*x^2"]],
        "R": [[{r}]],
        "lambda": {lambda}
      }},
      "sigma_eps": [[{sig}]],
      "setting": "first_exit",
      "boundaries": {{
        "faces": [
          {{ "dim": 1, "side": "lower", "value": {{ "cost": 10.0 }} }},
          {{ "dim": 1, "side": "upper", "value": {{ "cost": 10.0 }} }}
        ],
        "regions": [
          {{ "ranges": [[0, 0], [0, 0]], "value": {{ "psi": ["1", "1"] }} }}
        ]
      }},
      "solver": {{ "tolerance": 3e-4, "max_rank": 25, "max_sweeps": 150, "seed": 0, "accuracy_order": 8 }}
    }}"#, r = lambda / sig);
    let mut cfg = ProblemConfig::from_str(&text).unwrap();
    let c0 = (n - 1) / 2;
    let w0 = (0.3 / (2.0 * std::f64::consts::PI / n as f64)).round() as usize;
    let w1 = (0.55 / (22.0 / (n - 1) as f64)).round() as usize;
    cfg.boundaries.regions[0].ranges = vec![[c0 - w0, c0 + w0 + 1], [c0 - w1, c0 + w1]];
    let (p, bc, mut opts) = cfg.build().unwrap();
    opts.als.initial_rank = 4;
    opts.als.stagnation_threshold = 2e-3;
    let t0 = Instant::now();
    let field = solve_first_exit(&p, &bc, &opts).unwrap();
    println!("M={n} lam={lambda} sig={sig}: rank {} resid {:.2e} {} in {:.1}s sweeps {} min_psi {:.2e}",
        field.psi.rank(), field.report.final_residual(), field.report.termination,
        t0.elapsed().as_secs_f64(), field.report.residual_history.len()-1, field.min_sampled);
    let pf = PolicyField::new(&field, &p, &bc).unwrap();
    println!("psi(2,0) = {:.3e} psi(0,0) = {:.3e}", field.eval(&[2.0, 0.0]).unwrap(), field.eval(&[0.0, 0.0]).unwrap());
    let mut exits = std::collections::BTreeMap::new();
    let mut goal_times = Vec::new();
    for seed in 0..20 {
        let tr = simulate(&pf, &[2.0, 0.0], 0.002, 10.0, seed).unwrap();
        *exits.entry(format!("{}", tr.exit)).or_insert(0) += 1;
        if tr.exit == ExitReason::Goal {
            goal_times.push(tr.samples.last().unwrap().0);
        }
    }
    goal_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("exits: {exits:?}; goal times: {goal_times:.2?}");
}
