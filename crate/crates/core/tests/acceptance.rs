//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any gated criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,8` restricts the run to the listed criteria.
//!
//! Desk-scale wall-clock limits are stated for an 8-core machine; they are
//! scaled by `8 / min(cores, 8)` on smaller machines. The cheap property
//! suites keep their limits unscaled.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skillbench::envs::{self, EnvKind, EnvSpec, Policy};
use skillbench::eval::{self, adaptation_eval, dynamics_grid, hierarchical_train, log_grid, run_jump_skills, PpoConfig};
use skillbench::harness::{self, protocols, MethodState, RunConfig, RunOptions, Setup};
use skillbench::nn::{Activation, Genotype, NetSpec, OutputHead};
use skillbench::policy::ConstantPolicy;
use skillbench::repertoire::{CvtParams, CvtRepertoire};
use skillbench::rng;
use skillbench::skill_rl::{
    dads_reward, diayn_reward, shape_reward, Discriminator, ShapingConfig, ShapingMode, SkillDynamics,
};
use skillbench::variation::{iso_line_dd, VariationConfig};

struct Outcome {
    pass: bool,
    detail: String,
    /// Reported criteria print their result but never fail the suite.
    gated: bool,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail, gated: true }
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Limit stated for the 8-core reference machine.
fn desk_limit(minutes: f64) -> Duration {
    Duration::from_secs_f64(minutes * 60.0 * 8.0 / cores().min(8) as f64)
}

fn median(v: &[f64]) -> f64 {
    eval::median(v)
}

// 1. Gradient fidelity.
const C1_NETS: usize = 50;
const C1_STEP: f64 = 1e-5;
const C1_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding compare absolutely.
const C1_FLOOR: f64 = 1e-6;

fn c1() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for _ in 0..C1_NETS {
        let input = r.random_range(1..=6);
        let hidden: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(1..=16)).collect();
        let output = r.random_range(1..=6);
        let act = if r.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
        let spec = NetSpec::mlp(input, &hidden, output, act, OutputHead::Linear).unwrap();
        let g = Genotype::random(&spec, &mut r);
        let batch = 4;
        let x: Vec<f64> = (0..batch * input).map(|_| r.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..batch * output).map(|_| r.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], x: &[f64]| -> f64 {
            let t = spec.forward_batch(p, x, batch).unwrap();
            t.output().iter().zip(&u).map(|(y, w)| y * w).sum()
        };
        let tape = spec.forward_batch(&g.params, &x, batch).unwrap();
        let mut pg = vec![0.0; g.len()];
        let ig = spec.backward_batch(&g.params, &tape, &u, &mut pg).unwrap();
        let mut rel = |a: f64, n: f64| {
            checked += 1;
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(C1_FLOOR));
        };
        let mut p = g.params.clone();
        for i in 0..p.len() {
            let v = p[i];
            p[i] = v + C1_STEP;
            let up = loss(&p, &x);
            p[i] = v - C1_STEP;
            let down = loss(&p, &x);
            p[i] = v;
            rel(pg[i], (up - down) / (2.0 * C1_STEP));
        }
        let mut xs = x.clone();
        for i in 0..xs.len() {
            let v = xs[i];
            xs[i] = v + C1_STEP;
            let up = loss(&g.params, &xs);
            xs[i] = v - C1_STEP;
            let down = loss(&g.params, &xs);
            xs[i] = v;
            rel(ig[i], (up - down) / (2.0 * C1_STEP));
        }
    }
    outcome(
        worst < C1_TOL,
        format!("{C1_NETS} nets, {checked} gradient entries, max relative error {worst:.2e} (limit {C1_TOL:.0e})"),
    )
}

// 2. Archive laws.
const C2_INSERTIONS: usize = 10_000;

fn c2() -> Outcome {
    let bounds = envs::Bounds::new(vec![-1.0, -1.0], vec![1.0, 1.0]);
    let mut rep = CvtRepertoire::build("laws", bounds, 64, 5, CvtParams::default()).unwrap();
    let spec = NetSpec::new(vec![2, 2], vec![], OutputHead::Linear).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(202);
    let offset = 1.0;
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    let mut violations: BTreeMap<&str, usize> = BTreeMap::new();
    let mut bump = |law| *violations.entry(law).or_insert(0) += 1;
    let mut last_score = 0.0;
    let mut ties = 0;
    for n in 0..C2_INSERTIONS {
        let mut g = Genotype::random(&spec, &mut r);
        g.quantize();
        // Coarse fitness values make ties common.
        let fitness = (r.random_range(-10..=10) as f64) / 10.0;
        let d = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let cell = rep.cell_index(&d);
        let before = rep.cell(cell).cloned();
        let out = rep.insert(&g, fitness, &d).unwrap();
        let after = rep.cell(cell).unwrap();
        match before {
            Some(inc) if fitness == inc.fitness => {
                ties += 1;
                if out.inserted() || after != &inc {
                    bump("tie-keeps-incumbent");
                }
            }
            Some(inc) if fitness < inc.fitness && after != &inc => bump("elitism"),
            _ => {}
        }
        let b = best.entry(cell).or_insert(f64::NEG_INFINITY);
        *b = b.max(fitness);
        if after.fitness != *b {
            bump("elitism");
        }
        for (i, e) in rep.elites() {
            if rep.cell_index(&e.descriptor) != i {
                bump("cell-consistency");
            }
        }
        let score = rep.metrics(offset).qd_score;
        if score < last_score {
            bump("qd-monotonicity");
        }
        last_score = score;
        if n % 500 == 499 {
            let bytes = rep.to_bytes();
            let back = CvtRepertoire::from_bytes(&bytes).unwrap();
            let same = back.to_bytes() == bytes
                && back.to_csv() == rep.to_csv()
                && back.elites().zip(rep.elites()).all(|(a, b)| a == b)
                && back.coverage() == rep.coverage();
            if !same {
                bump("serialization");
            }
        }
    }
    let total: usize = violations.values().sum();
    outcome(
        total == 0 && ties > 0,
        format!(
            "{C2_INSERTIONS} insertions ({ties} ties, coverage {}), violations {violations:?}",
            rep.coverage()
        ),
    )
}

// 3. Operator statistics.
const C3_DRAWS: usize = 100_000;
const C3_MEAN_SE: f64 = 3.0;
const C3_VAR_REL: f64 = 0.02;

fn c3() -> Outcome {
    let spec = NetSpec::new(vec![3, 2], vec![], OutputHead::Linear).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(303);
    let mut x1 = Genotype::random(&spec, &mut r);
    let mut x2 = Genotype::random(&spec, &mut r);
    x1.quantize();
    x2.quantize();
    let cfg = VariationConfig::default();
    let dim = x1.len();
    let (mut sum, mut sq) = (vec![0.0; dim], vec![0.0; dim]);
    for _ in 0..C3_DRAWS {
        let c = iso_line_dd(&x1, &x2, &cfg, &mut r).unwrap();
        for i in 0..dim {
            let d = c.params[i] - x1.params[i];
            sum[i] += d;
            sq[i] += d * d;
        }
    }
    let n = C3_DRAWS as f64;
    let (mut worst_z, mut worst_var) = (0.0f64, 0.0f64);
    for i in 0..dim {
        let expect = cfg.sigma_iso.powi(2) + cfg.sigma_line.powi(2) * (x2.params[i] - x1.params[i]).powi(2);
        let mean = sum[i] / n;
        let var = sq[i] / n - mean * mean;
        worst_z = worst_z.max(mean.abs() / (expect / n).sqrt());
        worst_var = worst_var.max((var / expect - 1.0).abs());
    }
    outcome(
        worst_z <= C3_MEAN_SE && worst_var <= C3_VAR_REL,
        format!(
            "{C3_DRAWS} draws over {dim} coordinates: worst mean offset {worst_z:.2} SE (limit {C3_MEAN_SE}), worst variance error {:.2}% (limit {:.0}%)",
            100.0 * worst_var,
            100.0 * C3_VAR_REL
        ),
    )
}

// 4. Intrinsic-reward fixed points and the SMERL gate.
const C4_TOL: f64 = 1e-9;
const C4_TRANSITIONS: usize = 10_000;

fn c4() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());
    for z in 2..=10usize {
        check(diayn_reward(1.0 / z as f64, z), 0.0);
        check(diayn_reward(1.0, z), (z as f64).ln());
        let l = r.random_range(-50.0..5.0);
        check(dads_reward(&vec![l; z], r.random_range(0..z)), 0.0);
    }
    // Model-level fixed points.
    let z = 5;
    let mut disc = Discriminator::new(2, z, &[16], 1e-3, &mut r).unwrap();
    let last = disc.net.len() - (16 * z + z);
    disc.net.params[last..].fill(0.0);
    let f = [0.3, -0.7];
    for k in 0..z {
        check(disc.reward(&f, k).unwrap(), 0.0);
    }
    let n = disc.net.len();
    disc.net.params[n - z + 2] = 1e3;
    check(disc.reward(&f, 2).unwrap(), (z as f64).ln());
    let mut dynm = SkillDynamics::new(2, z, 3, &[16], 1e-3, &mut r).unwrap();
    dynm.net.params[..z * 16].fill(0.0);
    for k in 0..z {
        check(dynm.reward(&[0.1, 0.2], &[0.15, 0.1], k).unwrap(), 0.0);
    }
    // Gate set equality.
    let cfg = ShapingConfig {
        mode: ShapingMode::SmerlGate,
        beta: 2.0,
        target_return: -40.0,
        epsilon: 4.0,
    };
    let mut mismatches = 0;
    for _ in 0..C4_TRANSITIONS {
        let ret = r.random_range(-60.0..-20.0);
        let r_env = r.random_range(-1.0..1.0);
        let r_div = r.random_range(0.1..2.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let shaped = shape_reward(r_env, r_div, &cfg, ret);
        let expected_in = ret >= cfg.target_return - cfg.epsilon;
        let got_in = shaped != r_env;
        let value_ok = if expected_in { shaped == r_env + cfg.beta * r_div } else { shaped == r_env };
        if expected_in != got_in || !value_ok {
            mismatches += 1;
        }
    }
    outcome(
        worst <= C4_TOL && mismatches == 0,
        format!("max fixed-point error {worst:.1e} (limit {C4_TOL:.0e}); gate mismatches {mismatches}/{C4_TRANSITIONS}"),
    )
}

// 5. MAP-Elites on point-maze.
const C5_ITERATIONS: u64 = 500;
const C5_SEEDS: [u64; 3] = [0, 1, 2];
const C5_MIN_COVERAGE: f64 = 512.0;
const C5_MAX_DIST: f64 = 0.15;

fn c5() -> Outcome {
    let base = RunConfig::from_toml(&format!(
        "method = \"map-elites\"\nenv = \"point-maze\"\n[budget]\nenv_steps = 0\niterations = {C5_ITERATIONS}"
    ))
    .unwrap();
    let setup = Setup::new(&base).unwrap();
    let target = setup.env.target.unwrap();
    let diag = setup.env.arena_diagonal();
    let (mut cov, mut dist) = (Vec::new(), Vec::new());
    for seed in C5_SEEDS {
        let s = Setup {
            cfg: RunConfig { seed, ..base.clone() },
            ..setup.clone()
        };
        let (state, _) = harness::train_in_memory(&s).unwrap();
        let MethodState::Cvt { state, .. } = state else { unreachable!() };
        let (_, best) = state.rep.elites().max_by(|a, b| a.1.fitness.total_cmp(&b.1.fitness)).unwrap();
        cov.push(state.rep.coverage() as f64);
        dist.push((best.descriptor[0] - target[0]).hypot(best.descriptor[1] - target[1]) / diag);
    }
    let (mc, md) = (median(&cov), median(&dist));
    outcome(
        mc >= C5_MIN_COVERAGE && md <= C5_MAX_DIST,
        format!(
            "median coverage {mc} of 1024 (need >= {C5_MIN_COVERAGE}), median best-policy distance {md:.3} of the diagonal (need <= {C5_MAX_DIST}); per seed coverage {cov:?} distance {:?}",
            dist.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

// 6. PGA-MAP-Elites against MAP-Elites on point-gait.
const C6_ENV_STEPS: u64 = 2_000_000;
const C6_SEEDS: [u64; 3] = [0, 1, 2];

fn c6() -> Outcome {
    let offset = -EnvSpec::shipped(EnvKind::PointGait).fitness_lower_bound();
    let mut medians = Vec::new();
    let mut detail = Vec::new();
    for method in ["map-elites", "pga-map-elites"] {
        let base = RunConfig::from_toml(&format!(
            "method = \"{method}\"\nenv = \"point-gait\"\n[budget]\nenv_steps = {C6_ENV_STEPS}"
        ))
        .unwrap();
        let setup = Setup::new(&base).unwrap();
        let mut scores = Vec::new();
        for seed in C6_SEEDS {
            let s = Setup {
                cfg: RunConfig { seed, ..base.clone() },
                ..setup.clone()
            };
            let (_, rows) = harness::train_in_memory(&s).unwrap();
            let last = rows.last().unwrap();
            scores.push(last.qd_score);
            let mean = last.qd_score / last.coverage as f64 - setup.offset;
            detail.push(format!(
                "{method} seed {seed}: qd {:.1}, coverage {}, mean elite fitness {mean:.2} at {} steps",
                last.qd_score, last.coverage, last.env_steps
            ));
        }
        medians.push(median(&scores));
    }
    outcome(
        medians[1] > medians[0],
        format!(
            "median QD score PGA-MAP-Elites {:.1} vs MAP-Elites {:.1} (offset {}); {}",
            medians[1],
            medians[0],
            offset,
            detail.join("; ")
        ),
    )
}

// 7. DIAYN+REWARD separability on point-omni.
const C7_ENV_STEPS: u64 = 2_000_000;
const C7_SEEDS: [u64; 3] = [0, 1, 2];
const C7_EVALS: usize = 20;
const C7_SEPARATION: f64 = 0.25;
const C7_MIN_SKILLS: f64 = 3.0;

/// Size of the largest subset of points that are pairwise at least `min`
/// apart.
fn largest_separated(points: &[[f64; 2]], min: f64) -> usize {
    let n = points.len();
    (0u32..1 << n)
        .filter(|mask| {
            (0..n).all(|i| {
                (i + 1..n).all(|j| {
                    mask & (1 << i) == 0
                        || mask & (1 << j) == 0
                        || (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]) >= min
                })
            })
        })
        .map(|m| m.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

fn c7() -> Outcome {
    let base = RunConfig::from_toml(&format!(
        "method = \"diayn-reward\"\nenv = \"point-omni\"\n[budget]\nenv_steps = {C7_ENV_STEPS}\n[skill]\nnum_skills = 5"
    ))
    .unwrap();
    let setup = Setup::new(&base).unwrap();
    let env = &setup.env;
    let half_width = 0.5 * (env.arena[2] - env.arena[0]);
    let min = C7_SEPARATION * half_width;
    let mut counts = Vec::new();
    let mut detail = Vec::new();
    for seed in C7_SEEDS {
        let s = Setup {
            cfg: RunConfig { seed, ..base.clone() },
            ..setup.clone()
        };
        let (state, _) = harness::train_in_memory(&s).unwrap();
        let MethodState::Skill(t) = state else { unreachable!() };
        let set = t.skill_set().unwrap();
        let ends: Vec<[f64; 2]> = (0..set.num_skills)
            .map(|z| {
                let p = set.skill(z, env.action_bound);
                let (mut xs, mut ys) = (Vec::new(), Vec::new());
                for j in 0..C7_EVALS {
                    let e = envs::evaluate(&p, env, rng::derive_seed(seed, &[99, j as u64])).unwrap();
                    xs.push(e.descriptor[0]);
                    ys.push(e.descriptor[1]);
                }
                [median(&xs), median(&ys)]
            })
            .collect();
        let k = largest_separated(&ends, min);
        counts.push(k as f64);
        let shown: Vec<String> = ends.iter().map(|p| format!("({:.2},{:.2})", p[0], p[1])).collect();
        detail.push(format!("seed {seed}: {k} separated [{}]", shown.join(" ")));
    }
    let m = median(&counts);
    outcome(
        m >= C7_MIN_SKILLS,
        format!(
            "median separated skills {m} (need >= {C7_MIN_SKILLS}, separation {min:.2}); {}",
            detail.join("; ")
        ),
    )
}

// 8. Adaptation protocol on a constructed two-skill set.
const C8_EVALS: usize = 100;

fn c8() -> Outcome {
    let env = EnvSpec::shipped(EnvKind::PointOmni);
    let a = ConstantPolicy { action: [0.06, 0.0] };
    let b = ConstantPolicy { action: [0.0, 0.1] };
    let skills: Vec<&dyn Policy> = vec![&a, &b];
    let mut values = log_grid(0.1, 4.5, 20, Some(1.0));
    values.push(0.5);
    values.sort_by(f64::total_cmp);
    let grid = dynamics_grid(&[1], &values);
    let report = adaptation_eval(&skills, &env, "dynamics-scale", &grid, C8_EVALS, 8).unwrap();
    // Point-omni pays 0.01 * sum (eff / bound)^2 per step: skill A costs
    // 0.0036 at any scale, skill B costs 0.01 * s^2.
    let h = env.horizon as f64;
    let fit = |k: usize, s: f64| if k == 0 { -h * 0.0036 } else { -h * 0.01 * s * s };
    let mut wrong = Vec::new();
    let mut worst: f64 = 0.0;
    for row in &report.rows {
        let optimal = if fit(0, row.value) >= fit(1, row.value) { 0 } else { 1 };
        if row.best_skill != optimal {
            wrong.push(row.value);
        }
        worst = worst.max((row.median - fit(optimal, row.value)).abs());
    }
    let at = |v: f64| report.rows.iter().find(|r| r.value == v).unwrap();
    let nominal = at(1.0);
    let pass = wrong.is_empty()
        && nominal.fitness_gain == 0.0
        && at(1.0).best_skill == 0
        && at(0.5).best_skill == 1
        && worst < 1e-9;
    outcome(
        pass,
        format!(
            "{} grid points, wrong selections at {wrong:?}, A chosen at 1.0: {}, B chosen at 0.5: {}, nominal fitness_gain {}, max |median - analytic| {worst:.1e}",
            report.rows.len(),
            at(1.0).best_skill == 0,
            at(0.5).best_skill == 1,
            nominal.fitness_gain
        ),
    )
}

// 9. Hierarchical composition on point-hurdle.
const C9_ENV_STEPS: u64 = 2_000_000;
const C9_SEEDS: [u64; 3] = [0, 1, 2];
const C9_RATIO: f64 = 1.2;

fn c9() -> Outcome {
    let env = EnvSpec::shipped(EnvKind::PointHurdle);
    let pair = run_jump_skills(&env);
    let skills: Vec<&dyn Policy> = pair.iter().map(|p| p as &dyn Policy).collect();
    let single: Vec<f64> = skills.iter().map(|p| envs::evaluate(*p, &env, 0).unwrap().fitness).collect();
    let best_single = single.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut finals = Vec::new();
    for seed in C9_SEEDS {
        let (_, curve) = hierarchical_train(&skills, &env, &PpoConfig::default(), C9_ENV_STEPS, seed).unwrap();
        let last = curve.last().unwrap();
        assert!(last.env_steps <= C9_ENV_STEPS + 2048 * 10 * 2);
        finals.push(last.greedy_fitness);
    }
    let m = median(&finals);
    outcome(
        m >= C9_RATIO * best_single,
        format!(
            "median final meta fitness {m:.2} vs best single skill {best_single:.2} (run {:.2}, jump {:.2}); ratio {:.2} (need >= {C9_RATIO}); per seed {finals:?}",
            single[0],
            single[1],
            m / best_single
        ),
    )
}

// 10. Reproducibility and resume.
fn c10_config(method: &str) -> RunConfig {
    let smerl = if method.starts_with("smerl") {
        "[skill.shaping]\ntarget_return = -2.0\n"
    } else {
        ""
    };
    RunConfig::from_toml(&format!(
        r#"
method = "{method}"
env = "point-omni"
seed = 11
[budget]
env_steps = 0
iterations = 5
[cadence]
checkpoint_every = 2
[policy]
hidden = [8]
[repertoire]
cells = 64
[map_elites]
batch_size = 32
init_batch = 32
[pga]
batch_size = 32
init_batch = 32
[pga.td3]
critic_hidden = [16]
batch_size = 64
critic_steps = 10
pg_steps = 10
[aurora]
archive_budget = 128
train_steps = 20
retrain_first = 2
[skill]
env_batch = 4
model_hidden = [16]
record_every = 500
[skill.sac]
policy_hidden = [16]
critic_hidden = [16]
batch_size = 64
{smerl}"#
    ))
    .unwrap()
}

fn c10() -> Outcome {
    let mut failures = Vec::new();
    let root = tempfile::tempdir().unwrap();
    for method in harness::Method::ALL {
        let cfg = c10_config(method.id());
        let dir = |name: &str| root.path().join(format!("{}-{name}", method.id()));
        let pool = |n: usize| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        let full = |name: &str, threads: usize| {
            let d = dir(name);
            pool(threads).install(|| harness::run(&cfg, &d, &RunOptions::default()).unwrap());
            std::fs::read(d.join("metrics.csv")).unwrap()
        };
        let a = full("a", 2);
        let b = full("b", 2);
        let c = full("c", 1);
        let split = dir("split");
        pool(2).install(|| {
            harness::run(&cfg, &split, &RunOptions { resume: false, stop_after: Some(3) }).unwrap();
            harness::run(&cfg, &split, &RunOptions { resume: true, stop_after: None }).unwrap();
        });
        let resumed = std::fs::read(split.join("metrics.csv")).unwrap();
        if a != b {
            failures.push(format!("{method}: repeat differs"));
        }
        if a != c {
            failures.push(format!("{method}: worker count changes metrics"));
        }
        if a != resumed {
            failures.push(format!("{method}: resume differs"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} methods run twice, with 1 and 2 workers and split by resume; mismatches {failures:?}",
            harness::Method::ALL.len()
        ),
    )
}

// 11. Sweep robustness, reported.
const C11_ENV_STEPS: u64 = 2_000_000;
const C11_SEEDS: usize = 5;

fn c11_config(method: &str) -> RunConfig {
    RunConfig::from_toml(&format!(
        "method = \"{method}\"\nenv = \"point-omni\"\n[budget]\nenv_steps = {C11_ENV_STEPS}\n[sweep]\nseeds = {C11_SEEDS}"
    ))
    .unwrap()
}

fn c11() -> Outcome {
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-sweep");
    let cfgs = [c11_config("map-elites"), c11_config("dads-reward")];
    let res = protocols::sweep(&cfgs, Some(&out)).unwrap();
    let (me, dads) = (&res.summaries[0], &res.summaries[1]);
    // Protocol checks on the artifacts.
    let mut problems = Vec::new();
    let best = res
        .summaries
        .iter()
        .flat_map(|s| s.cells.iter().map(|c| c.median))
        .fold(f64::NEG_INFINITY, f64::max);
    for s in &res.summaries {
        if s.cells.len() != 9 || s.cells.iter().any(|c| c.scores.len() != C11_SEEDS) {
            problems.push(format!("{}: grid is not 9 cells x {C11_SEEDS} seeds", s.method));
        }
        if s.normalizer != best {
            problems.push(format!("{}: normalizer {} is not the task max {best}", s.method, s.normalizer));
        }
        let q = [s.q125, s.q25, s.median, s.q75, s.q875];
        if q.windows(2).any(|w| w[0] > w[1]) || q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            problems.push(format!("{}: quantiles out of order or range {q:?}", s.method));
        }
    }
    let cells = std::fs::read_to_string(out.join("sweep_cells.csv")).unwrap_or_default();
    if cells.lines().count() != 1 + 2 * 9 * C11_SEEDS {
        problems.push(format!("sweep_cells.csv has {} lines", cells.lines().count()));
    }
    let ordering = me.iqr() <= dads.iqr();
    Outcome {
        pass: problems.is_empty(),
        gated: false,
        detail: format!(
            "ordering {} (MAP-Elites IQR {:.4} vs DADS+REWARD IQR {:.4}); medians {:.3} / {:.3}; protocol problems {problems:?}; artifacts in {}",
            if ordering { "holds" } else { "does NOT hold" },
            me.iqr(),
            dads.iqr(),
            me.median,
            dads.median,
            out.display()
        ),
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome, Duration);

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 11] = [
        (1, "gradient fidelity", c1, Duration::from_secs(10)),
        (2, "archive laws", c2, Duration::from_secs(30)),
        (3, "operator statistics", c3, Duration::from_secs(30)),
        (4, "intrinsic-reward fixed points", c4, Duration::from_secs(10)),
        (5, "MAP-Elites on point-maze", c5, desk_limit(10.0)),
        (6, "PGA advantage on point-gait", c6, desk_limit(20.0)),
        (7, "DIAYN separability", c7, desk_limit(15.0)),
        (8, "adaptation protocol", c8, Duration::from_secs(60)),
        (9, "hierarchical composition", c9, desk_limit(20.0)),
        (10, "reproducibility", c10, desk_limit(10.0)),
        (11, "sweep robustness (reported)", c11, desk_limit(120.0)),
    ];
    println!("acceptance: {} cores available", cores());
    let mut failed = Vec::new();
    for (id, name, f, limit) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f));
        let took = start.elapsed();
        let o = result.unwrap_or_else(|e| Outcome {
            pass: false,
            gated: true,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        });
        let in_time = took <= limit;
        let pass = o.pass && in_time;
        let tag = match (pass, o.gated) {
            (true, true) => "PASS",
            (false, true) => "FAIL",
            (true, false) => "REPORTED",
            (false, false) => "FAIL",
        };
        println!(
            "[{tag}] criterion {id} {name}: {} [{:.1}s, limit {:.0}s{}]",
            o.detail,
            took.as_secs_f64(),
            limit.as_secs_f64(),
            if in_time { "" } else { ", over time" }
        );
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
