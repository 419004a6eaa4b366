//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! The learned-method runs use the quick profile. The whole suite takes
//! roughly an hour and a quarter on one core. A failing criterion is reported,
//! not raised: the process exits non-zero only if the harness itself breaks.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use xalign_core::arm_env::{forward_kinematics, make_scenario, wrap_angle, ScenarioName};
use xalign_core::baselines::AblationFlags;
use xalign_core::correspond::AlignmentModel;
use xalign_core::expert::{generate_demos, DemoRequest};
use xalign_core::pipeline::{self, Method, RunAllOptions, RunAllReport, RunConfig};
use xalign_core::seeding::child_seed;
use xalign_core::temporal::position_labels;
use xalign_core::traj::{load_corpus, Domain, ProxyDataset, Trajectory};
use xalign_core::Matrix;

const REACH_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ORDER_SLACK: f64 = 0.05;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    println!("criterion {:>2}: {}  {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn fmt_scores(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

/// One completed learned-method run.
struct Run {
    dir: PathBuf,
    report: RunAllReport,
    secs: f64,
    /// Scores of the ablation variants, by label.
    ablations: BTreeMap<String, f64>,
}

fn quick_config(scenario: ScenarioName, seed: u64, dir: &Path) -> RunConfig {
    RunConfig::new(scenario, seed, dir).quick()
}

fn run(root: &Path, scenario: ScenarioName, seed: u64, ablate: bool) -> Result<Run, String> {
    let dir = root.join(format!("{scenario}-{seed}"));
    let cfg = quick_config(scenario, seed, &dir);
    let start = Instant::now();
    let report = pipeline::run_all(&cfg, &RunAllOptions::default()).map_err(|e| format!("{scenario} seed {seed}: {e}"))?;
    let secs = start.elapsed().as_secs_f64();
    let mut ablations = BTreeMap::new();
    if ablate {
        for flags in &AblationFlags::table()[1..] {
            let s = pipeline::run_method(&cfg, Method::Learned(*flags))
                .map_err(|e| format!("{scenario} seed {seed} {}: {e}", flags.label()))?;
            ablations.insert(flags.label(), s.normalized_score);
        }
    }
    eprintln!(
        "  {scenario} seed {seed}: score {:.3}, self-demo {:.3}, {secs:.0}s",
        report.rows[0].normalized_score,
        report.self_demo_score.unwrap_or(f64::NAN)
    );
    Ok(Run {
        dir,
        report,
        secs,
        ablations,
    })
}

fn runs(root: &Path, scenario: ScenarioName, seeds: &[u64], ablate: bool) -> Result<Vec<Run>, String> {
    seeds.iter().map(|&s| run(root, scenario, s, ablate)).collect()
}

fn scores(runs: &[Run]) -> Vec<f64> {
    runs.iter().map(|r| r.report.rows[0].normalized_score).collect()
}

fn max_secs(runs: &[Run]) -> f64 {
    runs.iter().map(|r| r.secs).fold(0.0, f64::max)
}

/// Fresh expert demonstrations of the inference tasks, never seen in training.
fn heldout_states(scenario: ScenarioName, seed: u64, domain: Domain) -> Matrix {
    let sc = make_scenario(scenario);
    let (config, gains) = match domain {
        Domain::Expert => (&sc.expert, sc.expert_gains),
        Domain::Agent => (&sc.agent, sc.agent_gains),
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for task in &sc.inference_tasks {
        let request = DemoRequest {
            domain,
            task: task.clone(),
            num_trajectories: 20,
            record_actions: false,
            seed: child_seed(seed, &format!("acceptance/heldout/{}", task.task_id)),
        };
        for t in generate_demos(&request, config, gains).expect("held-out demos") {
            rows.extend(t.states);
        }
    }
    Matrix::from_rows(&rows).expect("held-out matrix")
}

/// Mean over states and non-goal dims of |ψ(s) − s| in the agent's normalized units.
fn identity_error(run: &Run) -> Result<f64, String> {
    let model = AlignmentModel::load(&run.dir.join("align")).map_err(|e| e.to_string())?;
    let s = heldout_states(ScenarioName::SelfDomain, run.report.rows[0].seed, Domain::Agent);
    let mapped = model.map_states(&s).map_err(|e| e.to_string())?;
    let k = make_scenario(ScenarioName::SelfDomain).agent.num_links;
    let n = model.maps.agent_dim();
    let mut total = 0.0;
    for r in 0..s.rows() {
        for c in 0..n {
            let mut d = mapped.get(r, c) - s.get(r, c);
            if c < k {
                d = wrap_angle(d);
            }
            total += d.abs() / model.norm_a.std[c];
        }
    }
    Ok(total / (s.rows() * n) as f64)
}

/// Fraction of held-out expert states whose mapped end effector lies within
/// 0.05 of the de-rotated ground truth.
fn viewpoint_hit_rate(run: &Run) -> Result<f64, String> {
    let sc = make_scenario(ScenarioName::ViewpointReach);
    let model = AlignmentModel::load(&run.dir.join("align")).map_err(|e| e.to_string())?;
    let s = heldout_states(ScenarioName::ViewpointReach, run.report.rows[0].seed, Domain::Expert);
    let mapped = model.map_states(&s).map_err(|e| e.to_string())?;
    let k = sc.agent.num_links;
    let mut hits = 0;
    for r in 0..s.rows() {
        let mut truth = s.row(r)[..k].to_vec();
        truth[0] = wrap_angle(truth[0] - sc.expert.viewpoint_offset);
        let ee_true = forward_kinematics(&truth, &sc.agent);
        let ee = forward_kinematics(&mapped.row(r)[..k], &sc.agent);
        if (ee[0] - ee_true[0]).hypot(ee[1] - ee_true[1]) < 0.05 {
            hits += 1;
        }
    }
    Ok(hits as f64 / s.rows() as f64)
}

fn c1() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0, "", 0);
    for seed in 0..100 {
        let (arch, err) = common::gradient_check(seed);
        if err > worst.0 {
            worst = (err, arch, seed);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        id: 1,
        pass: worst.0 < 1e-4 && secs < 60.0,
        detail: format!(
            "100 MLPs, max relative error {:.2e} ({} seed {}), {secs:.1}s",
            worst.0, worst.1, worst.2
        ),
    }
}

fn c2() -> Verdict {
    let start = Instant::now();
    let cca = (0..20).map(common::cca_oracle_error).fold(0.0, f64::max);
    let sn = (0..20).map(common::spectral_norm_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        id: 2,
        pass: cca < 1e-6 && sn < 1e-3 && secs < 60.0,
        detail: format!("CCA max error {cca:.2e} on 20 instances, spectral norm max error {sn:.2e}, {secs:.1}s"),
    }
}

fn c3() -> Verdict {
    let mut checked = 0;
    let mut violations = 0;
    for name in ScenarioName::ALL {
        let sc = make_scenario(name);
        for (domain, config, gains) in [
            (Domain::Expert, &sc.expert, sc.expert_gains),
            (Domain::Agent, &sc.agent, sc.agent_gains),
        ] {
            for task in sc.proxy_tasks.iter().chain(&sc.inference_tasks) {
                let request = DemoRequest {
                    domain,
                    task: task.clone(),
                    num_trajectories: 20,
                    record_actions: false,
                    seed: 3,
                };
                let trajs: Vec<Trajectory> = generate_demos(&request, config, gains).expect("demos");
                for t in &trajs {
                    for gamma in [0.5, 0.9, 0.95] {
                        let l = position_labels(t, gamma).expect("labels");
                        checked += 1;
                        let law = l.windows(2).all(|w| w[0] == gamma * w[1]);
                        if !law || l[l.len() - 1] != 1.0 {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    Verdict {
        id: 3,
        pass: violations == 0,
        detail: format!("{checked} label sequences, {violations} violations"),
    }
}

fn main() {
    let root = tempfile::tempdir().expect("scratch directory");
    let root = root.path();
    println!("acceptance: quick profile, scratch {}", root.display());

    for v in [c1(), c2(), c3()] {
        report(&v);
    }

    let mut verdicts = Vec::new();
    let self_runs = runs(root, ScenarioName::SelfDomain, &REACH_SEEDS, false);
    let view_runs = runs(root, ScenarioName::ViewpointReach, &ABLATION_SEEDS, true);
    let dyn_runs = runs(root, ScenarioName::DynamicsReach, &ABLATION_SEEDS, true);
    let morph_runs = runs(root, ScenarioName::MorphologyReach, &REACH_SEEDS, false);
    let write_runs = runs(root, ScenarioName::ViewpointWrite, &REACH_SEEDS, false);

    // 4: identity recovery.
    verdicts.push(match &self_runs {
        Ok(rs) => {
            let errs: Result<Vec<f64>, String> = rs.iter().map(identity_error).collect();
            match errs {
                Ok(errs) => {
                    let sc = scores(rs);
                    Verdict {
                        id: 4,
                        pass: errs.iter().all(|&e| e < 0.1) && sc.iter().all(|&s| s >= 0.8) && max_secs(rs) < 600.0,
                        detail: format!(
                            "self: per-dim |psi(s)-s| {} (< 0.1), scores {} (>= 0.8), max {:.0}s per seed",
                            fmt_scores(&errs),
                            fmt_scores(&sc),
                            max_secs(rs)
                        ),
                    }
                }
                Err(e) => Verdict { id: 4, pass: false, detail: e },
            }
        }
        Err(e) => Verdict { id: 4, pass: false, detail: e.clone() },
    });

    // 5: viewpoint.
    verdicts.push(match &view_runs {
        Ok(rs) => match rs.iter().map(viewpoint_hit_rate).collect::<Result<Vec<f64>, String>>() {
            Ok(hits) => {
                let sc = scores(rs);
                Verdict {
                    id: 5,
                    pass: hits.iter().all(|&h| h >= 0.8) && mean(&sc) >= 0.7 && max_secs(rs) < 900.0,
                    detail: format!(
                        "v-r2r: EE within 0.05 on {} of held-out states (>= 0.8), scores {} mean {:.3} (>= 0.7), max {:.0}s per seed",
                        fmt_scores(&hits),
                        fmt_scores(&sc),
                        mean(&sc),
                        max_secs(rs)
                    ),
                }
            }
            Err(e) => Verdict { id: 5, pass: false, detail: e },
        },
        Err(e) => Verdict { id: 5, pass: false, detail: e.clone() },
    });

    // 6 and 7: score thresholds.
    for (id, name, rs, threshold, limit) in [
        (6, "d-r2r", &dyn_runs, 0.7, 900.0),
        (7, "m-r2r", &morph_runs, 0.5, 1200.0),
    ] {
        verdicts.push(match rs {
            Ok(rs) => {
                let sc = scores(rs);
                Verdict {
                    id,
                    pass: mean(&sc) >= threshold && max_secs(rs) < limit,
                    detail: format!(
                        "{name}: scores {} mean {:.3} (>= {threshold}), max {:.0}s per seed",
                        fmt_scores(&sc),
                        mean(&sc),
                        max_secs(rs)
                    ),
                }
            }
            Err(e) => Verdict { id, pass: false, detail: e.clone() },
        });
    }

    // 8: ablation ordering.
    verdicts.push({
        let mut pass = true;
        let mut parts = Vec::new();
        for (name, rs) in [("d-r2r", &dyn_runs), ("v-r2r", &view_runs)] {
            match rs {
                Ok(rs) => {
                    let full = mean(&scores(rs));
                    let mut line = format!("{name} full {full:.3}");
                    for flags in &AblationFlags::table()[1..] {
                        let label = flags.label();
                        let m = mean(&rs.iter().map(|r| r.ablations[&label]).collect::<Vec<_>>());
                        pass &= full >= m - ORDER_SLACK;
                        line.push_str(&format!(", {label} {m:.3}"));
                    }
                    parts.push(line);
                }
                Err(e) => {
                    pass = false;
                    parts.push(e.clone());
                }
            }
        }
        Verdict {
            id: 8,
            pass,
            detail: format!("{} (means over 5 seeds, slack {ORDER_SLACK})", parts.join("; ")),
        }
    });

    // 9: self-demo bound on every scenario.
    verdicts.push({
        let mut pass = true;
        let mut parts = Vec::new();
        for (name, rs) in [
            ("self", &self_runs),
            ("v-r2r", &view_runs),
            ("v-r2w", &write_runs),
            ("d-r2r", &dyn_runs),
            ("m-r2r", &morph_runs),
        ] {
            match rs {
                Ok(rs) => {
                    let own = mean(&rs.iter().map(|r| r.report.self_demo_score.unwrap_or(f64::NAN)).collect::<Vec<_>>());
                    let transferred = mean(&scores(rs));
                    pass &= own >= 0.9 && own >= transferred;
                    parts.push(format!("{name} self-demo {own:.3} vs transferred {transferred:.3}"));
                }
                Err(e) => {
                    pass = false;
                    parts.push(e.clone());
                }
            }
        }
        Verdict {
            id: 9,
            pass,
            detail: parts.join("; "),
        }
    });

    // 10: reproducibility against the first self run.
    verdicts.push(match &self_runs {
        Ok(rs) => {
            let again = root.join("repeat");
            match pipeline::run_all(&quick_config(ScenarioName::SelfDomain, REACH_SEEDS[0], &again), &RunAllOptions::default()) {
                Ok(_) => {
                    let (compared, differing) = compare_trees(&rs[0].dir, &again);
                    Verdict {
                        id: 10,
                        pass: compared > 0 && differing.is_empty(),
                        detail: format!(
                            "{compared} metric CSVs and checkpoints compared, {} differ {:?}",
                            differing.len(),
                            differing
                        ),
                    }
                }
                Err(e) => Verdict { id: 10, pass: false, detail: e.to_string() },
            }
        }
        Err(e) => Verdict { id: 10, pass: false, detail: e.clone() },
    });

    // 11: state-only contract.
    verdicts.push({
        let all: Vec<&Run> = [&self_runs, &view_runs, &dyn_runs, &morph_runs, &write_runs]
            .into_iter()
            .filter_map(|r| r.as_ref().ok())
            .flatten()
            .collect();
        let completed = all.len() == REACH_SEEDS.len() * 3 + ABLATION_SEEDS.len() * 2;
        let mut files = 0;
        let mut with_actions = 0;
        let mut sample: Option<Trajectory> = None;
        for r in &all {
            for entry in fs::read_dir(r.dir.join("demos")).expect("demos dir") {
                let p = entry.expect("entry").path();
                if !p.to_string_lossy().ends_with("_E.jsonl") {
                    continue;
                }
                files += 1;
                let text = fs::read_to_string(&p).expect("corpus");
                let corpus = load_corpus(&p).expect("corpus");
                if text.contains("\"actions\"") || corpus.iter().any(|t| t.actions.is_some()) {
                    with_actions += 1;
                }
                sample.get_or_insert_with(|| corpus[0].clone());
            }
        }
        // The alignment dataset refuses expert trajectories that carry actions.
        let rejects = sample.is_some_and(|mut t| {
            t.actions = Some(vec![vec![0.0; 2]; t.len() - 1]);
            ProxyDataset::new(&[t.task_id.clone()], &[t], &[]).is_err()
        });
        Verdict {
            id: 11,
            pass: completed && files > 0 && with_actions == 0 && rejects,
            detail: format!(
                "{} runs completed on state-only expert data, {files} expert corpora, {with_actions} with actions, action-carrying expert data rejected: {rejects}",
                all.len()
            ),
        }
    });

    for v in &verdicts {
        report(v);
    }
}

/// Byte-compares every metric CSV and checkpoint JSON of two run directories.
fn compare_trees(a: &Path, b: &Path) -> (usize, Vec<String>) {
    let mut compared = 0;
    let mut differing = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in fs::read_dir(a.join(&rel)).expect("run dir") {
            let p = entry.expect("entry").path();
            let name = rel.join(p.file_name().expect("file name"));
            if p.is_dir() {
                stack.push(name);
                continue;
            }
            let s = name.to_string_lossy().into_owned();
            let relevant = s.ends_with(".csv") || (s.ends_with(".json") && s != "manifest.json");
            if !relevant {
                continue;
            }
            compared += 1;
            if fs::read(&p).ok() != fs::read(b.join(&name)).ok() {
                differing.push(s);
            }
        }
    }
    differing.sort();
    (compared, differing)
}
