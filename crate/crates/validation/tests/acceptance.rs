//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use inode_core::datagen::{
    generate, lotka_volterra_invariant, lotka_volterra_trajectory, save_dataset, GenConfig, Split,
};
use inode_core::eval::{self, read_metrics_csv};
use inode_core::experiment::{
    ablation_plan, cmd_eval, cmd_generate, cmd_train, load_split, prepare_ablation_data, run_ablation_job,
    AblationSection, Axis, EvalSection, ExperimentConfig, ModelSection,
};
use inode_core::model::{load_checkpoint, Pathways, Variant};
use inode_core::objective::{kl_diag_gaussian, ssl_loss};
use inode_core::odeint::{integrate, SolverKind, SolverSpec, TimeGrid};
use inode_core::train::{TrainConfig, BEST_FILE, LOG_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const SEEDS: u64 = 4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(budget: Duration, started: Instant) -> (bool, String) {
    let t = started.elapsed();
    (t <= budget, format!("{:.1}s of {:.0}s", t.as_secs_f64(), budget.as_secs_f64()))
}

fn decay_error(kind: SolverKind, dt: f64) -> f64 {
    let spec = match kind {
        SolverKind::Dopri5 => SolverSpec::dopri5(1e-6, 1e-6),
        _ => SolverSpec { kind, ..SolverSpec::euler(dt) },
    };
    let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
    let path = integrate(|x| vec![-x[0]], &[1.0], &grid, &spec).unwrap();
    (path[1][0] - (-1.0f64).exp()).abs()
}

fn solver_orders() -> Outcome {
    let t0 = Instant::now();
    let euler = decay_error(SolverKind::Euler, 0.01) / decay_error(SolverKind::Euler, 0.005);
    let rk4 = decay_error(SolverKind::Rk4, 0.1) / decay_error(SolverKind::Rk4, 0.05);
    let dopri = decay_error(SolverKind::Dopri5, 0.0);
    let (fast, time) = within(Duration::from_secs(1), t0);
    let pass = (1.8..=2.2).contains(&euler) && (12.0..=20.0).contains(&rk4) && dopri < 10.0 * (1e-6 + 1e-6) && fast;
    outcome(pass, format!("euler ratio {euler:.3}, rk4 ratio {rk4:.2}, dopri5 error {dopri:.2e}; {time}"))
}

fn autodiff() -> Outcome {
    let t0 = Instant::now();
    let mut worst_op = 0.0f64;
    let mut n = 0;
    for seed in 0..120u64 {
        let c = random_case(seed, 1 + (seed % 5) as usize);
        worst_op = worst_op.max(graph_fd_error(&c));
        n += 1;
    }
    // every op on its own as well
    for k in 0..N_OPS {
        let mut c = random_case(1000 + k as u64, 1);
        c.plan = vec![k];
        worst_op = worst_op.max(graph_fd_error(&c));
        n += 1;
    }
    let mut worst_model = 0.0f64;
    for seed in 0..30 {
        worst_model = worst_model.max(model_fd_error(seed));
        n += 1;
    }
    let (fast, time) = within(Duration::from_secs(60), t0);
    outcome(
        worst_op < 1e-4 && worst_model < 1e-4 && n >= 100 && fast,
        format!("{n} instances; max rel err ops {worst_op:.2e}, full model {worst_model:.2e}; {time}"),
    )
}

fn kl() -> Outcome {
    let t0 = Instant::now();
    let mut worst_z = 0.0f64;
    for seed in 0..50 {
        let (mean, lv) = random_posterior(seed);
        let closed = kl_diag_gaussian(&mean, &lv);
        let (mc, se) = kl_monte_carlo(&mean, &lv, 100_000, 1000 + seed);
        worst_z = worst_z.max((closed - mc).abs() / se);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let non_negative = (0..10_000).all(|_| {
        let mean: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let lv: Vec<f64> = (0..4).map(|_| rng.gen_range(-8.0..8.0)).collect();
        kl_diag_gaussian(&mean, &lv) >= 0.0
    });
    let zero = kl_diag_gaussian(&[0.0; 8], &[0.0; 8]);
    let (fast, time) = within(Duration::from_secs(10), t0);
    outcome(
        worst_z <= 3.0 && non_negative && zero == 0.0 && fast,
        format!("max |closed - mc| = {worst_z:.2} SE over 50 posteriors; non-negative {non_negative}; prior KL {zero}; {time}"),
    )
}

fn invariance() -> Outcome {
    let c = (0..100).map(content_permutation_error).fold(0.0, f64::max);
    let m = (0..100).map(|s| modulator_window_order_error(1000 + s)).fold(0.0, f64::max);
    outcome(c <= 1e-12 && m <= 1e-12, format!("max change: content {c:.1e}, modulator {m:.1e} over 100 inputs each"))
}

fn ssl_bounds() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let mut in_range = true;
    let mut worst_scale = 0.0f64;
    for _ in 0..500 {
        let d = rng.gen_range(1..5);
        let groups: Vec<Vec<Vec<f64>>> = (0..rng.gen_range(1..5))
            .map(|_| (0..rng.gen_range(2..6)).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect())
            .collect();
        let v = ssl_loss(&groups).value;
        in_range &= (-1.0..=1.0).contains(&v);
        let scaled: Vec<Vec<Vec<f64>>> = groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|e| {
                        let s = rng.gen_range(1e-3..1e3);
                        e.iter().map(|x| s * x).collect()
                    })
                    .collect()
            })
            .collect();
        worst_scale = worst_scale.max((ssl_loss(&scaled).value - v).abs());
    }
    let e = vec![0.4, -1.1, 2.0];
    let identical = ssl_loss(&[vec![e.clone(); 5], vec![e.clone(); 3]]).value;
    outcome(
        in_range && (identical - 1.0).abs() < 1e-12 && worst_scale <= 1e-12,
        format!("in [-1, 1]: {in_range}; identical -> {identical}; max rescaling change {worst_scale:.1e}"),
    )
}

fn lv_physics() -> Outcome {
    let t0 = Instant::now();
    let g = GenConfig { n_train: 50, n_val: 1, n_test: 1, n_t: 200, sigma: 0.0, ..GenConfig::lotka_volterra(3) };
    let tr = generate(&g).unwrap().train;
    let mut drift = 0.0f64;
    for s in 0..tr.n_seq() {
        let (a, gm) = (tr.true_params[s][0], tr.true_params[s][1]);
        let v0 = lotka_volterra_invariant(a, gm, tr.frame(s, 0));
        for t in 0..tr.n_t() {
            drift = drift.max((lotka_volterra_invariant(a, gm, tr.frame(s, t)) - v0).abs() / v0.abs());
        }
    }
    let mut fixed = 0.0f64;
    let grid = TimeGrid::new(0.0, 0.1, 200).unwrap();
    for (a, gm) in [(0.1, 0.1), (0.25, 0.4), (0.4, 0.15)] {
        let star = [5.0 * gm, 2.0 * a];
        for x in lotka_volterra_trajectory(a, gm, star, &grid).unwrap() {
            fixed = fixed.max((x[0] - star[0]).abs().max((x[1] - star[1]).abs()));
        }
    }
    let (fast, time) = within(Duration::from_secs(10), t0);
    outcome(
        drift < 1e-3 && fixed < 1e-6 && fast,
        format!("max relative drift {drift:.2e} over 50x200 points; fixed-point deviation {fixed:.1e}; {time}"),
    )
}

fn model_section(variant: Variant, pathways: Pathways, q: (usize, usize), t_in: usize, t_inv: usize) -> ModelSection {
    serde_json::from_value(serde_json::json!({
        "variant": variant, "pathways": pathways, "q_x": q.0, "q_c": q.1, "t_in": t_in, "t_inv": t_inv,
        "solver": {"kind": "euler", "dt": 0.1}
    }))
    .unwrap()
}

fn experiment(out: &Path, dataset: GenConfig, model: ModelSection, train: TrainConfig) -> ExperimentConfig {
    ExperimentConfig {
        dataset: Some(dataset),
        data_dir: None,
        model,
        train,
        eval: EvalSection::default(),
        ablation: AblationSection::default(),
        out: out.to_path_buf(),
    }
}

fn mse_at(cfg: &ExperimentConfig, label: &str) -> f64 {
    let rows = read_metrics_csv(&cfg.run_dir().join("eval").join("metrics.csv")).unwrap();
    rows.iter().find(|r| r.horizon_label == label).unwrap().mse
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn headline(root: &Path) -> Outcome {
    let budget = Duration::from_secs(30 * 60);
    let mut mse = [vec![], vec![], vec![]];
    let mut slowest = Duration::ZERO;
    for seed in 0..SEEDS {
        let out = root.join(format!("sinusoid-{seed}"));
        for (k, v) in Variant::ALL.into_iter().enumerate() {
            let cfg = experiment(
                &out,
                GenConfig::sinusoid(seed),
                model_section(v, Pathways::Modulator, (4, 4), 3, 10),
                TrainConfig::sinusoid(seed),
            );
            if k == 0 {
                cmd_generate(&cfg).unwrap();
            }
            let t0 = Instant::now();
            cmd_train(&cfg, false).unwrap();
            cmd_eval(&cfg).unwrap();
            slowest = slowest.max(t0.elapsed());
            mse[k].push(mse_at(&cfg, "3nt"));
        }
    }
    let [node, inode, sinode] = mse.clone().map(median);
    let pass = inode <= 0.8 * node && sinode <= 0.8 * node && slowest <= budget;
    outcome(
        pass,
        format!(
            "median 3N_t mse node {node:.3}, inode {inode:.3} ({:+.0}%), sinode {sinode:.3} ({:+.0}%); per seed node [{}] inode [{}] sinode [{}]; slowest run {:.0}s",
            100.0 * (inode / node - 1.0),
            100.0 * (sinode / node - 1.0),
            fmt(&mse[0]),
            fmt(&mse[1]),
            fmt(&mse[2]),
            slowest.as_secs_f64()
        ),
    )
}

fn reduced_lv(out: &Path, n_train: usize) -> ExperimentConfig {
    let dataset = GenConfig { n_train, n_val: 50, n_test: 50, n_t: 100, ..GenConfig::lotka_volterra(1) };
    let train = TrainConfig { epochs: 100, patience: Some(20), ..TrainConfig::lotka_volterra(0) };
    let mut cfg = experiment(out, dataset, model_section(Variant::Sinode, Pathways::Modulator, (8, 8), 8, 40), train);
    cfg.ablation = AblationSection { seeds: SEEDS as usize, horizon: "3nt".into(), ..AblationSection::default() };
    cfg
}

/// Per-seed MSE for each swept setting, in grid order.
fn sweep(cfg: &ExperimentConfig, axis: Axis) -> Vec<(String, Vec<f64>)> {
    let runs = ablation_plan(cfg, axis).unwrap();
    prepare_ablation_data(cfg, &runs).unwrap();
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for r in &runs {
        run_ablation_job(r).unwrap();
        let v = mse_at(&r.config, &cfg.ablation.horizon);
        match out.iter_mut().find(|(s, _)| s == &r.setting) {
            Some((_, vs)) => vs.push(v),
            None => out.push((r.setting.clone(), vec![v])),
        }
    }
    out
}

fn wins(better: &[f64], worse: &[f64]) -> usize {
    better.iter().zip(worse).filter(|(b, w)| b < w).count()
}

fn ablation_t_inv(root: &Path) -> Outcome {
    let mut cfg = reduced_lv(&root.join("lv-tinv"), 250);
    cfg.ablation.t_inv = Some(vec![10, 80]);
    let res = sweep(&cfg, Axis::TInv);
    let (short, long) = (&res[0].1, &res[1].1);
    let w = wins(long, short);
    outcome(w >= 3, format!("T_inv=80 beats T_inv=10 in {w}/4 seeds; mse T_inv=10 [{}] T_inv=80 [{}]", fmt(short), fmt(long)))
}

fn ablation_n_train(root: &Path) -> Outcome {
    let mut cfg = reduced_lv(&root.join("lv-ntrain"), 500);
    cfg.ablation.n_train = Some(vec![100, 500]);
    let res = sweep(&cfg, Axis::NTrain);
    let (small, large) = (&res[0].1, &res[1].1);
    let w = wins(large, small);
    outcome(w >= 3, format!("N_tr=500 beats N_tr=100 in {w}/4 seeds; mse N_tr=100 [{}] N_tr=500 [{}]", fmt(small), fmt(large)))
}

fn similarity(root: &Path) -> Outcome {
    let mut pairs = Vec::new();
    let mut shape = (0, 0);
    for seed in 0..SEEDS {
        let mut cfg = experiment(
            &root.join(format!("content-{seed}")),
            GenConfig::sinusoid_content(seed),
            model_section(Variant::Sinode, Pathways::Content, (4, 4), 3, 10),
            TrainConfig::sinusoid(seed),
        );
        cfg.eval.similarity_sequences = 25;
        cfg.eval.similarity_frames = 16;
        cmd_generate(&cfg).unwrap();
        cmd_train(&cfg, false).unwrap();
        let e = cmd_eval(&cfg).unwrap();
        pairs.push(e.similarity.unwrap());
        let csv = fs::read_to_string(cfg.run_dir().join("eval").join("similarity.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        shape = (rows.len(), rows[0].split(',').count() - 1);
    }
    let ok = pairs.iter().filter(|(w, b)| w > b).count();
    let detail: Vec<String> = pairs.iter().map(|(w, b)| format!("{w:.3}/{b:.3}")).collect();
    outcome(
        ok == 4 && shape == (400, 400),
        format!("within > between in {ok}/4 seeds (within/between {}); matrix {}x{}", detail.join(" "), shape.0, shape.1),
    )
}

fn lambda_zero(root: &Path) -> Outcome {
    let data = GenConfig::sinusoid(7);
    let train = TrainConfig { epochs: 20, ..TrainConfig::sinusoid(3) };
    let inode = experiment(&root.join("l0"), data, model_section(Variant::Inode, Pathways::Modulator, (4, 4), 3, 10), train.clone());
    let mut sinode = experiment(
        &root.join("l0"),
        data,
        model_section(Variant::Sinode, Pathways::Modulator, (4, 4), 3, 10),
        TrainConfig { lambda: Some(0.0), ..train },
    );
    sinode.data_dir = Some(inode.data_dir());
    cmd_generate(&inode).unwrap();
    cmd_train(&inode, false).unwrap();
    cmd_train(&sinode, false).unwrap();
    let a = fs::read_to_string(inode.run_dir().join(LOG_FILE)).unwrap();
    let b = fs::read_to_string(sinode.run_dir().join(LOG_FILE)).unwrap();
    let pa = load_checkpoint(&inode.run_dir().join(BEST_FILE)).unwrap().params;
    let pb = load_checkpoint(&sinode.run_dir().join(BEST_FILE)).unwrap().params;
    let same = a == b && pa.values() == pb.values();
    outcome(same, format!("{} log rows, logs identical {}, parameters identical {}", a.lines().count() - 1, a == b, pa.values() == pb.values()))
}

fn files_equal(a: &Path, b: &Path, names: &[&str]) -> bool {
    names.iter().all(|n| fs::read(a.join(n)).ok() == fs::read(b.join(n)).ok() && a.join(n).exists())
}

fn determinism(root: &Path) -> Outcome {
    std::env::set_var(eval::THREADS_ENV, "1");
    let data = GenConfig { n_train: 24, n_val: 8, n_test: 8, ..GenConfig::sinusoid(5) };
    let make = |dir: &str| {
        let mut c = experiment(
            &root.join(dir),
            data,
            model_section(Variant::Sinode, Pathways::Modulator, (4, 4), 3, 10),
            TrainConfig { epochs: 10, ..TrainConfig::sinusoid(2) },
        );
        c.eval.samples = 5;
        c
    };
    let (a, b) = (make("det-a"), make("det-b"));
    for c in [&a, &b] {
        cmd_generate(c).unwrap();
        cmd_train(c, false).unwrap();
        cmd_eval(c).unwrap();
    }
    let gen = files_equal(&a.data_dir(), &b.data_dir(), &["train.bin", "val.bin", "test.bin", "manifest.json"]);
    let train = files_equal(&a.run_dir(), &b.run_dir(), &[BEST_FILE, "last.bin", LOG_FILE]);
    let csvs = ["metrics.csv", "per_frame.csv", "similarity.csv", "pca.csv", "explained_variance.csv"];
    let ev = files_equal(&a.run_dir().join("eval"), &b.run_dir().join("eval"), &csvs);

    // eval again in place, then with more threads: same bytes
    let first: Vec<_> = csvs.iter().map(|n| fs::read(a.run_dir().join("eval").join(n)).unwrap()).collect();
    cmd_eval(&a).unwrap();
    std::env::set_var(eval::THREADS_ENV, "3");
    cmd_eval(&a).unwrap();
    std::env::set_var(eval::THREADS_ENV, "1");
    let again = csvs.iter().zip(&first).all(|(n, f)| &fs::read(a.run_dir().join("eval").join(n)).unwrap() == f);

    // a regenerated split equals the saved one
    let test = generate(&data).unwrap().test;
    save_dataset(&test, &root.join("regen.bin")).unwrap();
    let regen = fs::read(root.join("regen.bin")).unwrap() == fs::read(a.data_dir().join("test.bin")).unwrap()
        && load_split(&a.data_dir(), Split::Test).unwrap() == test;
    outcome(
        gen && train && ev && again && regen,
        format!("generate {gen} (regenerated {regen}), train {train}, eval {ev} (repeat {again})"),
    )
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("solver orders", Box::new(solver_orders)),
        ("autodiff vs finite differences", Box::new(autodiff)),
        ("KL closed form", Box::new(kl)),
        ("invariance of c and m", Box::new(invariance)),
        ("SSL bounds", Box::new(ssl_bounds)),
        ("LV physics", Box::new(lv_physics)),
        ("lambda=0 equivalence", Box::new(|| lambda_zero(root.path()))),
        ("determinism", Box::new(|| determinism(root.path()))),
        ("similarity structure", Box::new(|| similarity(root.path()))),
        ("headline sinusoid 3N_t trend", Box::new(|| headline(root.path()))),
        ("ablation T_inv 80 < 10", Box::new(|| ablation_t_inv(root.path()))),
        ("ablation N_tr 100 > 500", Box::new(|| ablation_n_train(root.path()))),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in &criteria {
            println!("{name}: test");
        }
        return;
    }
    let filter: Vec<String> = args.into_iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let o = run();
        ran += 1;
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
