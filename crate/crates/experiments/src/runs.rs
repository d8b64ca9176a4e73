//! The experiment runners behind each subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use diffblend::analytic::{exact_finetuned_drift, tilt, GaussianMixture, MixtureScore, PosteriorMap};
use diffblend::baselines::morl_oracle;
use diffblend::blend::{db_kla, db_mpa};
use diffblend::drift::{DriftModel, ScoreField};
use diffblend::jensen::{verify_bound, GapReport, JensenConfig};
use diffblend::metrics::{
    alignment_objective, expected_reward, kl_knn, pareto_front, wasserstein1_1d, Estimate, ParetoPoint,
};
use diffblend::quadrature::{integrate, integrate_2d};
use diffblend::rewards::{scalarize, PreferenceWeights, RewardSpec};
use diffblend::rng::RandomSource;
use diffblend::score_fit::{score_mse, MseGrid, ScoreModel};
use diffblend::sde::{euler_maruyama_reverse, SampleBatch, TimeGrid};

use crate::config::{ExperimentConfig, GridKind, Method, Resolved};
use crate::error::{RunError, RunResult};
use crate::methods::Context;
use crate::output::{fmt_f64, Discretization, MethodTiming, RunOptions, RunRecord, Table};
use crate::plot::{chart, Series, Style};

#[derive(Default)]
struct Timings(BTreeMap<String, (f64, usize)>);

impl Timings {
    fn add(&mut self, method: &str, secs: f64) {
        let e = self.0.entry(method.to_string()).or_default();
        e.0 += secs;
        e.1 += 1;
    }
    fn into_vec(self) -> Vec<MethodTiming> {
        self.0.into_iter().map(|(method, (wall_clock_s, tasks))| MethodTiming { method, wall_clock_s, tasks }).collect()
    }
}

fn pool(workers: usize) -> RunResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunError::Runtime(format!("cannot start worker pool: {e}")))
}

fn record(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    timings: Timings,
    warnings: Vec<String>,
    outputs: Vec<String>,
) -> RunRecord {
    RunRecord {
        command: opts.command.clone(),
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        version: diffblend::VERSION.to_string(),
        seeds: cfg.seeds.clone(),
        discretization: Discretization {
            steps: cfg.sampler.steps,
            samples: cfg.sampler.samples,
            grid: match cfg.sampler.grid {
                GridKind::Uniform => "uniform".into(),
                GridKind::Geometric { first } => format!("geometric(first={first})"),
            },
            beta_min: cfg.schedule.beta_min(),
            beta_max: cfg.schedule.beta_max(),
            horizon: cfg.schedule.horizon(),
        },
        methods: timings.into_vec(),
        warnings,
        outputs,
        points: Vec::new(),
    }
}

fn write_svg(opts: &RunOptions, file: &str, svg: String, outputs: &mut Vec<String>) -> RunResult<()> {
    if opts.plots {
        let p = opts.path(file);
        fs::write(&p, svg).map_err(|e| RunError::io(p, e))?;
        outputs.push(file.into());
    }
    Ok(())
}

fn write_table(opts: &RunOptions, file: &str, table: &Table, outputs: &mut Vec<String>) -> RunResult<()> {
    table.write(&opts.path(file))?;
    outputs.push(file.into());
    Ok(())
}

fn pooled(es: &[Estimate]) -> Estimate {
    let n = es.len() as f64;
    Estimate {
        value: es.iter().map(|e| e.value).sum::<f64>() / n,
        stderr: es.iter().map(|e| e.stderr * e.stderr).sum::<f64>().sqrt() / n,
    }
}

fn nan_estimate() -> Estimate {
    Estimate { value: f64::NAN, stderr: f64::NAN }
}

fn error_status(e: impl std::fmt::Display) -> String {
    format!("error: {e}")
}

/// One method at one preference vector, for one seed (`seed = None` for the across-seed summary).
#[derive(Clone, Debug, PartialEq)]
pub struct PointResult {
    pub method: Method,
    pub w_index: usize,
    pub w: f64,
    pub weights: Vec<f64>,
    pub seed: Option<u64>,
    pub n_samples: usize,
    pub rewards: Vec<Estimate>,
    pub kl: Estimate,
    pub objective: Estimate,
    pub on_front: bool,
    pub status: String,
}

impl PointResult {
    pub fn ok(&self) -> bool {
        self.status == "ok" || self.status.starts_with("ok ")
    }

    pub fn to_pareto_point(&self) -> ParetoPoint {
        ParetoPoint {
            method: self.method.name().into(),
            weights: self.weights.clone(),
            rewards: self.rewards.clone(),
            kl: self.kl,
            objective: self.objective,
        }
    }
}

/// Everything produced by [`run_pareto`].
#[derive(Clone, Debug)]
pub struct ParetoReport {
    pub record: RunRecord,
    pub rows: Vec<PointResult>,
    pub summary: Vec<PointResult>,
}

impl ParetoReport {
    pub fn summary_for(&self, method: Method, w_index: usize) -> Option<&PointResult> {
        self.summary.iter().find(|p| p.method == method && p.w_index == w_index)
    }
}

/// `E[r_i]` for every basis reward, the nearest-neighbour KL to the prior and the objective.
pub fn evaluate_batch(
    batch: &SampleBatch,
    prior: &GaussianMixture,
    basis: &[RewardSpec],
    w: &PreferenceWeights,
    alpha: f64,
    k: usize,
) -> diffblend::Result<(Vec<Estimate>, Estimate, Estimate)> {
    let rewards = basis.iter().map(|r| expected_reward(batch, r)).collect::<diffblend::Result<Vec<_>>>()?;
    let kl = kl_knn(batch, prior, k)?;
    let objective = alignment_objective(batch, &scalarize(basis, w)?, alpha, kl)?;
    Ok((rewards, kl, objective))
}

fn pareto_table(m: usize, with_front: bool) -> Table {
    let mut h: Vec<String> = vec!["method".into(), "w".into(), "seed".into(), "n_samples".into()];
    for i in 1..=m {
        h.push(format!("r{i}_mean"));
        h.push(format!("r{i}_se"));
    }
    h.extend(["kl", "kl_se", "objective", "objective_se"].map(String::from));
    if with_front {
        h.push("on_front".into());
    }
    h.push("status".into());
    Table::new(h)
}

fn pareto_row(p: &PointResult, with_front: bool) -> Vec<String> {
    let mut r = vec![
        p.method.name().to_string(),
        fmt_f64(p.w),
        p.seed.map_or("all".into(), |s| s.to_string()),
        p.n_samples.to_string(),
    ];
    for e in &p.rewards {
        r.push(fmt_f64(e.value));
        r.push(fmt_f64(e.stderr));
    }
    for e in [p.kl, p.objective] {
        r.push(fmt_f64(e.value));
        r.push(fmt_f64(e.stderr));
    }
    if with_front {
        r.push(p.on_front.to_string());
    }
    r.push(p.status.clone());
    r
}

fn method_list(cfg: &ExperimentConfig) -> Vec<Method> {
    let mut m = cfg.methods.clone();
    m.sort();
    m.dedup();
    m
}

type Fits = BTreeMap<u64, Result<Vec<ScoreModel>, String>>;

fn fit_all(ctx: &Context, seeds: &[u64], timings: &mut Timings, warnings: &mut Vec<String>) -> Fits {
    use rayon::prelude::*;
    let results: Vec<_> = seeds
        .par_iter()
        .map(|&s| {
            let start = Instant::now();
            (s, ctx.fit_rewards(s), start.elapsed().as_secs_f64())
        })
        .collect();
    let mut fits = Fits::new();
    for (s, r, secs) in results {
        timings.add("rs_learned", secs);
        match r {
            Ok(models) => {
                for (i, (_, rep)) in models.iter().enumerate() {
                    warnings.extend(rep.warnings.iter().map(|w| format!("seed {s}, reward {}: {w}", i + 1)));
                }
                fits.insert(s, Ok(models.into_iter().map(|(m, _)| m).collect()));
            }
            Err(e) => {
                fits.insert(s, Err(e.to_string()));
            }
        }
    }
    fits
}

/// For each method, preference point and seed: sample, then score rewards, KL and objective.
/// Method failures are recorded in the row status and the run continues.
pub fn run_pareto(cfg: &ExperimentConfig, opts: &RunOptions) -> RunResult<ParetoReport> {
    use rayon::prelude::*;
    let res = cfg.resolve()?;
    if res.rewards.len() < 2 {
        return Err(RunError::Config("pareto runs need at least two basis rewards".into()));
    }
    opts.ensure_dir()?;
    let pool = pool(cfg.workers)?;
    let ctx = Context::new(cfg, &res);
    let methods = method_list(cfg);
    let mut timings = Timings::default();
    let mut warnings = Vec::new();

    let fits = if methods.contains(&Method::RsLearned) {
        pool.install(|| fit_all(&ctx, &cfg.seeds, &mut timings, &mut warnings))
    } else {
        Fits::new()
    };

    let mut tasks = Vec::new();
    for &m in &methods {
        for wi in 0..res.weights.len() {
            for &s in &cfg.seeds {
                tasks.push((m, wi, s));
            }
        }
    }
    let outcomes: Vec<(PointResult, Vec<String>, f64)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(m, wi, seed)| {
                let start = Instant::now();
                let w = &res.weights[wi];
                let mut row = PointResult {
                    method: m,
                    w_index: wi,
                    w: cfg.w_grid[wi].label(),
                    weights: w.as_slice().to_vec(),
                    seed: Some(seed),
                    n_samples: 0,
                    rewards: vec![nan_estimate(); res.rewards.len()],
                    kl: nan_estimate(),
                    objective: nan_estimate(),
                    on_front: false,
                    status: "ok".into(),
                };
                let fit = match fits.get(&seed) {
                    Some(Ok(f)) => Some(f.as_slice()),
                    Some(Err(e)) => {
                        row.status = error_status(format!("score fit failed: {e}"));
                        return (row, Vec::new(), start.elapsed().as_secs_f64());
                    }
                    None => None,
                };
                let outcome = ctx.run_method(m, w, Context::task_rng(m, wi, seed), fit).and_then(|s| {
                    let ev = evaluate_batch(&s.batch, &res.prior, &res.rewards, w, cfg.alpha, cfg.kl.k)?;
                    Ok((s, ev))
                });
                let mut warns = Vec::new();
                match outcome {
                    Ok((s, (rewards, kl, objective))) => {
                        row.n_samples = s.batch.len();
                        row.rewards = rewards;
                        row.kl = kl;
                        row.objective = objective;
                        warns = s.warnings.into_iter().map(|x| format!("{m} w={} seed {seed}: {x}", row.w)).collect();
                    }
                    Err(e) => row.status = error_status(e),
                }
                (row, warns, start.elapsed().as_secs_f64())
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(outcomes.len());
    for (row, w, secs) in outcomes {
        timings.add(row.method.name(), secs);
        warnings.extend(w);
        if !row.ok() {
            warnings.push(format!("{} w={} seed {:?}: {}", row.method, row.w, row.seed, row.status));
        }
        rows.push(row);
    }

    let mut summary = Vec::new();
    for &m in &methods {
        for wi in 0..res.weights.len() {
            let group: Vec<&PointResult> = rows.iter().filter(|r| r.method == m && r.w_index == wi).collect();
            let ok: Vec<&&PointResult> = group.iter().filter(|r| r.ok()).collect();
            let mut s = (*group[0]).clone();
            s.seed = None;
            if ok.is_empty() {
                summary.push(s);
                continue;
            }
            s.n_samples = ok.iter().map(|r| r.n_samples).sum();
            s.rewards =
                (0..res.rewards.len()).map(|i| pooled(&ok.iter().map(|r| r.rewards[i]).collect::<Vec<_>>())).collect();
            s.kl = pooled(&ok.iter().map(|r| r.kl).collect::<Vec<_>>());
            s.objective = pooled(&ok.iter().map(|r| r.objective).collect::<Vec<_>>());
            s.status =
                if ok.len() == group.len() { "ok".into() } else { format!("ok ({}/{} seeds)", ok.len(), group.len()) };
            summary.push(s);
        }
    }
    let good: Vec<ParetoPoint> = summary.iter().filter(|p| p.ok()).map(|p| p.to_pareto_point()).collect();
    let front = pareto_front(&good);
    for p in summary.iter_mut().filter(|p| p.ok()) {
        let pp = p.to_pareto_point();
        p.on_front = front.contains(&pp);
    }

    let mut outputs = Vec::new();
    let mut t = pareto_table(res.rewards.len(), false);
    rows.iter().for_each(|r| t.push(pareto_row(r, false)));
    write_table(opts, "pareto.csv", &t, &mut outputs)?;
    let mut t = pareto_table(res.rewards.len(), true);
    summary.iter().for_each(|r| t.push(pareto_row(r, true)));
    write_table(opts, "pareto_summary.csv", &t, &mut outputs)?;
    let series: Vec<Series> = methods
        .iter()
        .map(|m| Series {
            name: m.name().into(),
            points: summary
                .iter()
                .filter(|p| p.method == *m && p.ok())
                .map(|p| (p.rewards[0].value, p.rewards[1].value))
                .collect(),
        })
        .collect();
    let title = format!("{}: mean rewards across preference weights", cfg.name);
    write_svg(opts, "pareto.svg", chart(&title, "E[r1]", "E[r2]", &series, Style::Lines), &mut outputs)?;
    outputs.push("run.json".into());

    let mut rec = record(cfg, opts, timings, warnings, outputs);
    rec.points = summary.iter().filter(|p| p.ok()).map(|p| p.to_pareto_point()).collect();
    rec.write(opts)?;
    Ok(ParetoReport { record: rec, rows, summary })
}

/// One blend factor of a λ sweep (`seed = None` for the across-seed summary).
#[derive(Clone, Debug, PartialEq)]
pub struct KlaRow {
    pub lambda: f64,
    pub seed: Option<u64>,
    pub n_samples: usize,
    pub kla_reward: Estimate,
    pub oracle_reward: Estimate,
    /// Distance between the blended and oracle terminal laws (on `x` in 1D, on reward values otherwise).
    pub w1: f64,
    /// The same distance between two independent oracle runs.
    pub w1_floor: f64,
    pub kla_kl: Estimate,
    pub oracle_kl: Estimate,
    pub kla_objective: Estimate,
    pub oracle_objective: Estimate,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct KlaReport {
    pub record: RunRecord,
    pub rows: Vec<KlaRow>,
    pub summary: Vec<KlaRow>,
}

fn projection(batch: &SampleBatch, reward: &RewardSpec) -> Vec<f64> {
    if batch.dim() == 1 {
        batch.as_slice().to_vec()
    } else {
        batch.rows().map(|x| reward.value(x)).collect()
    }
}

/// Compare `db_kla(pretrained, finetuned, lambda)` against the oracle at `alpha / lambda` for each lambda.
pub fn run_kla_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> RunResult<KlaReport> {
    use rayon::prelude::*;
    let res = cfg.resolve()?;
    if res.rewards.len() != 1 {
        return Err(RunError::Config(format!("kla sweeps take exactly one reward, got {}", res.rewards.len())));
    }
    if cfg.lambda_grid.is_empty() {
        return Err(RunError::Config("lambda_grid must not be empty".into()));
    }
    opts.ensure_dir()?;
    let pool = pool(cfg.workers)?;
    let ctx = Context::new(cfg, &res);
    let reward = &res.rewards[0];
    let one = PreferenceWeights::new(vec![1.0])?;
    let s = cfg.schedule;
    let ft = exact_finetuned_drift(&res.prior, reward, cfg.alpha, s)?;
    let sample = |d: &DriftModel, rng: RandomSource| euler_maruyama_reverse(d, &s, &res.grid, rng, cfg.sampler.samples);
    let eval = |b: &SampleBatch| evaluate_batch(b, &res.prior, &res.rewards, &one, cfg.alpha, cfg.kl.k);

    let tasks: Vec<(usize, u64)> =
        (0..cfg.lambda_grid.len()).flat_map(|li| cfg.seeds.iter().map(move |&s| (li, s))).collect();
    let outcomes: Vec<(KlaRow, f64, f64)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(li, seed)| {
                let lambda = cfg.lambda_grid[li];
                let root = RandomSource::new(seed).labelled("kla").substream(li as u64);
                let mut row = KlaRow {
                    lambda,
                    seed: Some(seed),
                    n_samples: cfg.sampler.samples,
                    kla_reward: nan_estimate(),
                    oracle_reward: nan_estimate(),
                    w1: f64::NAN,
                    w1_floor: f64::NAN,
                    kla_kl: nan_estimate(),
                    oracle_kl: nan_estimate(),
                    kla_objective: nan_estimate(),
                    oracle_objective: nan_estimate(),
                    status: "ok".into(),
                };
                let t0 = Instant::now();
                let kla = db_kla(&ctx.pre, &ft, lambda).and_then(|d| sample(&d, root.labelled("db_kla")));
                let kla = kla.and_then(|b| eval(&b).map(|e| (b, e)));
                let t_kla = t0.elapsed().as_secs_f64();
                let t1 = Instant::now();
                let oracle = morl_oracle(&res.prior, &res.rewards, &one, cfg.alpha, lambda, s).and_then(|d| {
                    let a = sample(&d, root.labelled("oracle"))?;
                    let b = sample(&d, root.labelled("oracle-floor"))?;
                    let e = eval(&a)?;
                    Ok((a, b, e))
                });
                let t_oracle = t1.elapsed().as_secs_f64();
                match &kla {
                    Ok((_, (r, kl, obj))) => {
                        row.kla_reward = r[0];
                        row.kla_kl = *kl;
                        row.kla_objective = *obj;
                    }
                    Err(e) => row.status = error_status(format!("db_kla: {e}")),
                }
                match &oracle {
                    Ok((a, b, (r, kl, obj))) => {
                        row.oracle_reward = r[0];
                        row.oracle_kl = *kl;
                        row.oracle_objective = *obj;
                        let pa = projection(a, reward);
                        row.w1_floor = wasserstein1_1d(&pa, &projection(b, reward)).unwrap_or(f64::NAN);
                        if let Ok((k, _)) = &kla {
                            row.w1 = wasserstein1_1d(&projection(k, reward), &pa).unwrap_or(f64::NAN);
                        }
                    }
                    Err(e) => {
                        if row.status == "ok" {
                            row.status = error_status(format!("oracle: {e}"));
                        }
                    }
                }
                (row, t_kla, t_oracle)
            })
            .collect()
    });

    let mut timings = Timings::default();
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for (row, a, b) in outcomes {
        timings.add("db_kla", a);
        timings.add("morl_oracle", b);
        if row.status != "ok" {
            warnings.push(format!("lambda={} seed {:?}: {}", row.lambda, row.seed, row.status));
        }
        rows.push(row);
    }
    let mut summary = Vec::new();
    for li in 0..cfg.lambda_grid.len() {
        let group: Vec<&KlaRow> = rows.iter().filter(|r| r.lambda == cfg.lambda_grid[li]).collect();
        let ok: Vec<&&KlaRow> = group.iter().filter(|r| r.status == "ok").collect();
        let mut s = group[0].clone();
        s.seed = None;
        if !ok.is_empty() {
            let pick = |f: fn(&KlaRow) -> Estimate| pooled(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            s.kla_reward = pick(|r| r.kla_reward);
            s.oracle_reward = pick(|r| r.oracle_reward);
            s.kla_kl = pick(|r| r.kla_kl);
            s.oracle_kl = pick(|r| r.oracle_kl);
            s.kla_objective = pick(|r| r.kla_objective);
            s.oracle_objective = pick(|r| r.oracle_objective);
            s.w1 = ok.iter().map(|r| r.w1).sum::<f64>() / ok.len() as f64;
            s.w1_floor = ok.iter().map(|r| r.w1_floor).sum::<f64>() / ok.len() as f64;
            s.n_samples = ok.iter().map(|r| r.n_samples).sum();
            s.status =
                if ok.len() == group.len() { "ok".into() } else { format!("ok ({}/{} seeds)", ok.len(), group.len()) };
        }
        summary.push(s);
    }

    let header = [
        "lambda",
        "seed",
        "n_samples",
        "kla_reward",
        "kla_reward_se",
        "oracle_reward",
        "oracle_reward_se",
        "w1",
        "w1_floor",
        "kla_kl",
        "oracle_kl",
        "kla_objective",
        "kla_objective_se",
        "oracle_objective",
        "oracle_objective_se",
        "status",
    ];
    let to_row = |r: &KlaRow| {
        vec![
            fmt_f64(r.lambda),
            r.seed.map_or("all".into(), |s| s.to_string()),
            r.n_samples.to_string(),
            fmt_f64(r.kla_reward.value),
            fmt_f64(r.kla_reward.stderr),
            fmt_f64(r.oracle_reward.value),
            fmt_f64(r.oracle_reward.stderr),
            fmt_f64(r.w1),
            fmt_f64(r.w1_floor),
            fmt_f64(r.kla_kl.value),
            fmt_f64(r.oracle_kl.value),
            fmt_f64(r.kla_objective.value),
            fmt_f64(r.kla_objective.stderr),
            fmt_f64(r.oracle_objective.value),
            fmt_f64(r.oracle_objective.stderr),
            r.status.clone(),
        ]
    };
    let mut outputs = Vec::new();
    let mut t = Table::new(header);
    rows.iter().for_each(|r| t.push(to_row(r)));
    write_table(opts, "kla.csv", &t, &mut outputs)?;
    let mut t = Table::new(header);
    summary.iter().for_each(|r| t.push(to_row(r)));
    write_table(opts, "kla_summary.csv", &t, &mut outputs)?;
    let line = |name: &str, f: &dyn Fn(&KlaRow) -> f64| Series {
        name: name.into(),
        points: summary.iter().map(|r| (r.lambda, f(r))).collect(),
    };
    let rewards = [line("db_kla", &|r| r.kla_reward.value), line("oracle", &|r| r.oracle_reward.value)];
    let title = format!("{}: expected reward against blend factor", cfg.name);
    write_svg(opts, "kla.svg", chart(&title, "lambda", "E[r]", &rewards, Style::Lines), &mut outputs)?;
    let dists = [line("W1 to oracle", &|r| r.w1), line("oracle noise floor", &|r| r.w1_floor)];
    let title = format!("{}: distance to the oracle", cfg.name);
    write_svg(opts, "kla_w1.svg", chart(&title, "lambda", "W1", &dists, Style::Lines), &mut outputs)?;
    outputs.push("run.json".into());
    let rec = record(cfg, opts, timings, warnings, outputs);
    rec.write(opts)?;
    Ok(KlaReport { record: rec, rows, summary })
}

#[derive(Clone, Debug)]
pub struct JensenReport {
    pub record: RunRecord,
    pub reports: Vec<GapReport>,
}

impl JensenReport {
    /// Largest `|Delta|` over the x grid, for each time.
    pub fn max_delta_by_t(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for r in &self.reports {
            match out.iter_mut().find(|(t, _)| *t == r.t) {
                Some(e) => e.1 = e.1.max(r.delta_norm),
                None => out.push((r.t, r.delta_norm)),
            }
        }
        out
    }

    /// Share of grid points where the bound holds; `None` when it could not be computed.
    pub fn satisfied_fraction(&self) -> Option<f64> {
        let flags: Option<Vec<bool>> = self.reports.iter().map(|r| r.satisfied).collect();
        flags.map(|f| f.iter().filter(|b| **b).count() as f64 / f.len().max(1) as f64)
    }
}

/// The gap, its three bound ingredients and the bound over the configured `(x, t)` grid.
pub fn run_jensen(cfg: &ExperimentConfig, opts: &RunOptions) -> RunResult<JensenReport> {
    let res = cfg.resolve()?;
    if res.prior.dim() != 1 {
        return Err(RunError::Config(format!("jensen reports need a 1-D prior, got d = {}", res.prior.dim())));
    }
    let j = &cfg.jensen;
    if j.xs.is_empty() || j.ts.is_empty() {
        return Err(RunError::Config("jensen.xs and jensen.ts must not be empty".into()));
    }
    opts.ensure_dir()?;
    let w = res.weights.first().cloned().map_or_else(|| PreferenceWeights::new(vec![1.0]), Ok)?;
    let reward = if res.rewards.len() == 1 { res.rewards[0].clone() } else { scalarize(&res.rewards, &w)? };
    let points: Vec<(Vec<f64>, f64)> = j.ts.iter().flat_map(|&t| j.xs.iter().map(move |&x| (vec![x], t))).collect();
    let jc = JensenConfig {
        draws: j.draws,
        rng: RandomSource::new(cfg.seeds[0]).labelled("jensen"),
        shift: j.shift,
        r_grid: j.r_grid,
        slack_stderr: j.slack_stderr,
        ..Default::default()
    };
    let start = Instant::now();
    let reports =
        pool(cfg.workers)?.install(|| verify_bound(&res.prior, &reward, cfg.alpha, &cfg.schedule, &points, &jc))?;
    let mut timings = Timings::default();
    timings.add("jensen", start.elapsed().as_secs_f64());

    let nc = |v: Option<f64>| v.map_or("not computed".to_string(), fmt_f64);
    let mut t = Table::new([
        "t",
        "x",
        "delta",
        "l1",
        "l1_se",
        "l2",
        "l2_se",
        "l3",
        "bound",
        "slack_bound",
        "satisfied",
        "status",
    ]);
    for r in &reports {
        t.push(vec![
            fmt_f64(r.t),
            fmt_f64(r.x[0]),
            fmt_f64(r.delta[0]),
            fmt_f64(r.l1.value),
            fmt_f64(r.l1.stderr),
            fmt_f64(r.l2.value),
            fmt_f64(r.l2.stderr),
            nc(r.l3),
            nc(r.bound),
            nc(r.slack_bound),
            r.satisfied.map_or("not computed".into(), |b| b.to_string()),
            if r.l3.is_some() { "ok".into() } else { "not computed".into() },
        ]);
    }
    let mut outputs = Vec::new();
    write_table(opts, "jensen.csv", &t, &mut outputs)?;
    let report = JensenReport { record: record(cfg, opts, Timings::default(), Vec::new(), Vec::new()), reports };
    let mut t = Table::new(["t", "max_abs_delta", "satisfied_fraction", "status"]);
    for (time, m) in report.max_delta_by_t() {
        let at_t: Vec<&GapReport> = report.reports.iter().filter(|r| r.t == time).collect();
        let sat: Option<Vec<bool>> = at_t.iter().map(|r| r.satisfied).collect();
        let (frac, status) = match sat {
            Some(s) => (fmt_f64(s.iter().filter(|b| **b).count() as f64 / s.len() as f64), "ok"),
            None => ("not computed".into(), "not computed"),
        };
        t.push(vec![fmt_f64(time), fmt_f64(m), frac, status.into()]);
    }
    write_table(opts, "jensen_summary.csv", &t, &mut outputs)?;
    let mut warnings = Vec::new();
    if report.satisfied_fraction().is_none() {
        warnings.push("bound not computed: the reward is not a one-dimensional linear reward".into());
    }
    outputs.push("run.json".into());
    let rec = record(cfg, opts, timings, warnings, outputs);
    rec.write(opts)?;
    Ok(JensenReport { record: rec, reports: report.reports })
}

fn sample_table(batch: &SampleBatch) -> Table {
    let mut t = Table::new((1..=batch.dim()).map(|i| format!("x{i}")));
    for row in batch.rows() {
        t.push(row.iter().map(|v| fmt_f64(*v)).collect());
    }
    t
}

/// Raw terminal samples of every configured method at the first preference point and seed.
pub fn run_sample(cfg: &ExperimentConfig, opts: &RunOptions) -> RunResult<RunRecord> {
    let res = cfg.resolve()?;
    opts.ensure_dir()?;
    let ctx = Context::new(cfg, &res);
    let seed = cfg.seeds[0];
    let w = res.weights.first().ok_or_else(|| RunError::Config("w_grid must not be empty".into()))?;
    let methods = method_list(cfg);
    let mut timings = Timings::default();
    let mut warnings = Vec::new();
    let fits = if methods.contains(&Method::RsLearned) {
        pool(cfg.workers)?.install(|| fit_all(&ctx, &[seed], &mut timings, &mut warnings))
    } else {
        Fits::new()
    };
    let mut outputs = Vec::new();
    let mut status = Table::new(["method", "file", "n_samples", "status"]);
    for m in methods {
        let start = Instant::now();
        let fit = match fits.get(&seed) {
            Some(Ok(f)) => Some(f.as_slice()),
            _ => None,
        };
        let out = pool(cfg.workers)?.install(|| ctx.run_method(m, w, Context::task_rng(m, 0, seed), fit));
        timings.add(m.name(), start.elapsed().as_secs_f64());
        let file = format!("samples_{m}.csv");
        match out {
            Ok(s) => {
                write_table(opts, &file, &sample_table(&s.batch), &mut outputs)?;
                status.push(vec![m.name().into(), file, s.batch.len().to_string(), "ok".into()]);
                warnings.extend(s.warnings);
            }
            Err(e) => {
                warnings.push(format!("{m}: {e}"));
                status.push(vec![m.name().into(), String::new(), "0".into(), error_status(e)]);
            }
        }
    }
    write_table(opts, "samples.csv", &status, &mut outputs)?;
    outputs.push("run.json".into());
    let rec = record(cfg, opts, timings, warnings, outputs);
    rec.write(opts)?;
    Ok(rec)
}

/// Fit one score model per reward to its tilted law and save it as JSON.
pub fn run_fit(cfg: &ExperimentConfig, opts: &RunOptions) -> RunResult<RunRecord> {
    let res = cfg.resolve()?;
    opts.ensure_dir()?;
    let ctx = Context::new(cfg, &res);
    let seed = cfg.seeds[0];
    let start = Instant::now();
    let fits = pool(cfg.workers)?.install(|| ctx.fit_rewards(seed))?;
    let mut timings = Timings::default();
    timings.add("score_fit", start.elapsed().as_secs_f64());
    let mut outputs = Vec::new();
    let mut warnings = Vec::new();
    let mut t = Table::new(["reward", "family", "bins", "features", "objective", "score_mse", "status"]);
    for (i, (model, rep)) in fits.iter().enumerate() {
        let file = format!("score_r{}.json", i + 1);
        let p = opts.path(&file);
        fs::write(&p, model.to_json()).map_err(|e| RunError::io(p, e))?;
        outputs.push(file);
        let mse = if res.prior.dim() <= 2 {
            let truth = tilt(&res.prior, &res.rewards[i], cfg.alpha)?.mixture;
            let pts = if res.prior.dim() == 1 { 201 } else { 41 };
            score_mse(model, &truth, &cfg.schedule, &MseGrid::uniform(16, cfg.schedule.horizon(), pts))?
        } else {
            f64::NAN
        };
        warnings.extend(rep.warnings.iter().map(|w| format!("reward {}: {w}", i + 1)));
        t.push(vec![
            (i + 1).to_string(),
            serde_json::to_string(&model.family).expect("family serialises"),
            model.bins.len().to_string(),
            model.num_features().to_string(),
            fmt_f64(rep.objective),
            fmt_f64(mse),
            "ok".into(),
        ]);
    }
    write_table(opts, "fit.csv", &t, &mut outputs)?;
    outputs.push("run.json".into());
    let rec = record(cfg, opts, timings, warnings, outputs);
    rec.write(opts)?;
    Ok(rec)
}

/// One numerical-hygiene check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: Option<bool>,
}

impl Check {
    fn le(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance, passed: Some(value <= tolerance) }
    }
    fn info(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), value, tolerance: f64::NAN, passed: None }
    }
}

fn mixture_invariants(name: &str, m: &GaussianMixture) -> Vec<Check> {
    let simplex = (m.weights().iter().sum::<f64>() - 1.0).abs();
    let neg = m.weights().iter().filter(|w| !(**w >= 0.0)).count() as f64;
    let not_pd = m.covariances().iter().filter(|c| (*c).clone().cholesky().is_none()).count() as f64;
    vec![
        Check::le(format!("{name}: weights sum to one"), simplex, 1e-9),
        Check::le(format!("{name}: negative weights"), neg, 0.0),
        Check::le(format!("{name}: non-positive-definite covariances"), not_pd, 0.0),
    ]
}

fn test_points(prior: &GaussianMixture, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = prior
        .sample(n, RandomSource::new(seed).labelled("validate-points"))
        .map(|b| b.rows().map(|r| r.to_vec()).collect())
        .unwrap_or_default();
    pts.iter_mut().enumerate().for_each(|(i, p)| p.iter_mut().for_each(|v| *v += 0.5 * (i % 3) as f64 - 0.5));
    pts
}

/// Run the numerical checks on the configured prior, rewards and sampler.
pub fn validation_checks(cfg: &ExperimentConfig, res: &Resolved) -> RunResult<Vec<Check>> {
    let s = cfg.schedule;
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for i in 0..=20 {
        let t = s.horizon() * i as f64 / 20.0;
        let integral = integrate(|u| s.beta_at(u).unwrap_or(f64::NAN), 0.0, t, 1e-14);
        worst = worst.max((s.alpha_bar(t)? - (-integral).exp()).abs());
    }
    checks.push(Check::le("alpha_bar closed form vs quadrature", worst, 1e-10));

    checks.extend(mixture_invariants("prior", &res.prior));
    let d = res.prior.dim();
    let pts = test_points(&res.prior, 20, cfg.seeds[0]);

    let score = MixtureScore::new(res.prior.clone(), s);
    let mut worst = 0.0f64;
    for &t in &[0.0, 0.1, 0.5, 0.9] {
        let slice = score.score_slice(t)?;
        let marg = res.prior.marginal_at(&s, t)?;
        checks.extend(mixture_invariants(&format!("marginal at t={t}"), &marg));
        for x in &pts {
            let mut sc = vec![0.0; d];
            slice.score_into(x, &mut sc);
            for j in 0..d {
                let h = 1e-5 * x[j].abs().max(1.0);
                let (mut a, mut b) = (x.clone(), x.clone());
                a[j] += h;
                b[j] -= h;
                let fd = (marg.log_density(&a) - marg.log_density(&b)) / (2.0 * h);
                worst = worst.max((sc[j] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    checks.push(Check::le("score vs finite differences (relative)", worst, 1e-5));

    for (i, r) in res.rewards.iter().enumerate() {
        let name = format!("reward {} tilt", i + 1);
        let tilted = match tilt(&res.prior, r, cfg.alpha) {
            Ok(t) => t,
            Err(e) => {
                checks.push(Check { name: format!("{name}: {e}"), value: f64::NAN, tolerance: f64::NAN, passed: None });
                continue;
            }
        };
        checks.extend(mixture_invariants(&name, &tilted.mixture));
        if d <= 2 {
            let unnorm = |x: &[f64]| res.prior.density(x) * (r.value(x) / cfg.alpha).exp();
            let m = tilted.mixture.mean();
            let sd: Vec<f64> = (0..d).map(|j| tilted.mixture.covariance()[(j, j)].sqrt()).collect();
            let lo: Vec<f64> = (0..d).map(|j| m[j] - 12.0 * sd[j]).collect();
            let hi: Vec<f64> = (0..d).map(|j| m[j] + 12.0 * sd[j]).collect();
            let z = if d == 1 {
                integrate(|x| unnorm(&[x]), lo[0], hi[0], 1e-13)
            } else {
                integrate_2d(|x, y| unnorm(&[x, y]), [lo[0], lo[1]], [hi[0], hi[1]], 1e-11)
            };
            let worst = pts
                .iter()
                .map(|x| {
                    let q = unnorm(x) / z;
                    (tilted.mixture.density(x) - q).abs() / q.max(1e-300)
                })
                .fold(0.0, f64::max);
            checks.push(Check::le(format!("{name} vs quadrature (relative)"), worst, 1e-6));
        }
    }

    let exact_regime = res.prior.num_components() == 1 && res.rewards.iter().all(|r| r.as_linear().is_some());
    if let (Ok(fts), Some(w)) = (
        res.rewards
            .iter()
            .map(|r| exact_finetuned_drift(&res.prior, r, cfg.alpha, s))
            .collect::<diffblend::Result<Vec<_>>>(),
        res.weights.first(),
    ) {
        let blend = db_mpa(&fts, w)?;
        let oracle = morl_oracle(&res.prior, &res.rewards, w, cfg.alpha, 1.0, s)?;
        let mut worst = 0.0f64;
        for x in &pts {
            for &t in &[0.01, 0.3, 0.7, 1.0] {
                let (a, b) = (blend.eval(x, t)?, oracle.eval(x, t)?);
                worst = worst.max(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
            }
        }
        if exact_regime {
            checks.push(Check::le("db_mpa vs oracle drift (exact regime)", worst, 1e-9));
        } else {
            checks.push(Check::info("db_mpa vs oracle drift (max abs difference)", worst));
        }
        let post = PosteriorMap::new(&res.prior, &s, 0.5)?;
        checks.push(Check::info("posterior components at t=0.5", post.num_components() as f64));
    }

    let grid = TimeGrid::uniform(cfg.sampler.steps.min(100), s.horizon())?;
    let ctx = Context::new(cfg, res);
    let rng = RandomSource::new(cfg.seeds[0]).labelled("validate-rerun");
    let a = euler_maruyama_reverse(&ctx.pre, &s, &grid, rng, 2000)?;
    let b = euler_maruyama_reverse(&ctx.pre, &s, &grid, rng, 2000)?;
    let differ = a.as_slice().iter().zip(b.as_slice()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    checks.push(Check::le("bit-identical rerun (differing values)", differ as f64, 0.0));
    Ok(checks)
}

/// Write `validate.csv`; any failed check turns into a runtime error after the file is written.
pub fn run_validate(cfg: &ExperimentConfig, opts: &RunOptions) -> RunResult<(RunRecord, Vec<Check>)> {
    let res = cfg.resolve()?;
    opts.ensure_dir()?;
    let start = Instant::now();
    let checks = pool(cfg.workers)?.install(|| validation_checks(cfg, &res))?;
    let mut timings = Timings::default();
    timings.add("validate", start.elapsed().as_secs_f64());
    let mut t = Table::new(["check", "value", "tolerance", "status"]);
    for c in &checks {
        let status = match c.passed {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "info",
        };
        t.push(vec![c.name.clone(), fmt_f64(c.value), fmt_f64(c.tolerance), status.into()]);
    }
    let mut outputs = Vec::new();
    write_table(opts, "validate.csv", &t, &mut outputs)?;
    outputs.push("run.json".into());
    let failed: Vec<&Check> = checks.iter().filter(|c| c.passed == Some(false)).collect();
    let warnings =
        failed.iter().map(|c| format!("failed: {} = {} (tolerance {})", c.name, c.value, c.tolerance)).collect();
    let rec = record(cfg, opts, timings, warnings, outputs);
    rec.write(opts)?;
    if !failed.is_empty() {
        return Err(RunError::Runtime(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            checks.len(),
            failed.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join("; ")
        )));
    }
    Ok((rec, checks))
}
