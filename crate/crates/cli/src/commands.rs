use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::json;
use simplex_rank::baselines::{
    bootstrap_rank_ci, bradley_terry_ties, simple_average, single_judge, BaselineError,
};
use simplex_rank::eval::{coverage, mean_rank_width, score_coverage, sensitivity_sweep, spearman};
use simplex_rank::geometry::{
    barycentric_coords, make_nonidentifiability_witness, rank_binary_moderate, rank_binary_strong,
};
use simplex_rank::inference::fit_dataset;
use simplex_rank::io::load_dataset;
use simplex_rank::judge::{
    run_judging, HttpTransport, JudgeQuestion, JudgeSpec, MockTransport, RetryPolicy, RunConfig,
    TaskKind, Transport,
};
use simplex_rank::likelihood::tabulate;
use simplex_rank::model::{
    Hyperparameters, JudgeVertices, MarginalScoreDistribution, Ranking, RubricSpec, ScoreDataset,
    DEFAULT_STRATUM,
};
use simplex_rank::plot::{rank_interval_svg, scatter_svg, simplex_svg};
use simplex_rank::sampler::SamplerConfig;
use simplex_rank::synthetic::{generate_synthetic, JudgeSource, ShiftSpec, SyntheticSpec};

use crate::output::{
    diagnostics_line, extract_report, extract_truth, parse_list, parse_matrix, rank_table,
    read_json, OutDir,
};
use crate::{BaselineMethod, FitArgs, IdentifyTool, JudgeArgs, SimulateArgs};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    omega: Option<f64>,
    beta_max: Option<f64>,
    self_adjust: Option<bool>,
    chains: Option<usize>,
    warmup: Option<usize>,
    samples: Option<usize>,
    seed: Option<u64>,
    stratify: Option<bool>,
}

struct Resolved {
    hyper: Hyperparameters,
    sampler: SamplerConfig,
    stratify: bool,
}

fn resolve(fit: &FitArgs, stratify: Option<bool>, rubric: &RubricSpec) -> Result<Resolved> {
    let file: FitConfig = match &fit.config {
        Some(path) => serde_json::from_value(read_json(path)?)
            .with_context(|| format!("config file {}", path.display()))?,
        None => FitConfig::default(),
    };
    let defaults = SamplerConfig::default();
    let primary = Hyperparameters::primary(rubric.num_true_levels());
    let hyper = Hyperparameters::new(
        fit.omega.or(file.omega).unwrap_or(primary.omega),
        fit.beta_max.or(file.beta_max).unwrap_or(primary.beta_max),
        primary.delta_dir,
        fit.self_adjust
            .or(file.self_adjust)
            .unwrap_or(primary.self_adjust),
    )?;
    let sampler = SamplerConfig {
        chains: fit.chains.or(file.chains).unwrap_or(defaults.chains),
        warmup: fit.warmup.or(file.warmup).unwrap_or(defaults.warmup),
        samples: fit.samples.or(file.samples).unwrap_or(defaults.samples),
        seed: fit.seed.or(file.seed).unwrap_or(defaults.seed),
        ..defaults
    };
    sampler.validate()?;
    Ok(Resolved {
        hyper,
        sampler,
        stratify: stratify.or(file.stratify).unwrap_or(false),
    })
}

fn load(path: &Path) -> Result<ScoreDataset> {
    load_dataset(path).with_context(|| format!("loading scores from {}", path.display()))
}

pub fn rank(input: &Path, fit: &FitArgs, stratify: Option<bool>, out: &Path) -> Result<()> {
    let mut ds = load(input)?;
    let cfg = resolve(fit, stratify, &ds.rubric)?;
    if !cfg.stratify {
        for r in &mut ds.records {
            r.stratum_id = DEFAULT_STRATUM.to_string();
        }
    }
    let (report, _) = fit_dataset(&ds, &cfg.hyper, &cfg.sampler)?;
    let out = OutDir::new(out)?;
    let table = rank_table(&report.pooled);
    out.text("ranks.tsv", &table)?;
    out.json("report.json", &report)?;
    out.text(
        "ranks.svg",
        &rank_interval_svg("Posterior rank intervals", &report.pooled),
    )?;
    if report.strata.len() > 1 {
        let mut strata = String::from("stratum\t");
        strata.push_str(table.lines().next().unwrap_or_default());
        strata.push('\n');
        for (name, r) in &report.strata {
            for line in rank_table(r).lines().skip(1) {
                let _ = writeln!(strata, "{name}\t{line}");
            }
        }
        out.text("strata.tsv", &strata)?;
    }
    print!("{table}");
    println!("{}", diagnostics_line(&report.pooled));
    Ok(())
}

pub fn baseline(
    method: BaselineMethod,
    input: &Path,
    replicates: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = load(input)?;
    let out = OutDir::new(out)?;
    let (name, report, summary) = match method {
        BaselineMethod::Average => {
            let r = simple_average(&ds)?;
            ("average", r.clone(), json!({ "method": "average", "report": r }))
        }
        BaselineMethod::Single => {
            let r = single_judge(&ds)?;
            let pooled = r.pooled.clone();
            (
                "single",
                pooled.clone(),
                json!({ "method": "single", "report": pooled, "per_judge": r.per_judge }),
            )
        }
        BaselineMethod::Bootstrap => {
            let r = bootstrap_rank_ci(&ds, replicates, seed)?;
            (
                "bootstrap",
                r.clone(),
                json!({ "method": "bootstrap", "replicates": replicates, "seed": seed, "report": r }),
            )
        }
        BaselineMethod::Bt => match bradley_terry_ties(&ds, replicates, seed) {
            Ok((fit, r)) => (
                "bt",
                r.clone(),
                json!({ "method": "bt", "replicates": replicates, "seed": seed, "fit": fit, "report": r }),
            ),
            Err(BaselineError::Disconnected {
                components,
                partial,
            }) => {
                out.json(
                    "report.json",
                    &json!({ "method": "bt", "components": components, "report": partial }),
                )?;
                out.text("ranks.tsv", &rank_table(&partial))?;
                bail!(
                    "comparison graph splits into {} groups {:?}; partial order written to {}",
                    components.len(),
                    components,
                    out.path("report.json").display()
                );
            }
            Err(e) => return Err(e.into()),
        },
    };
    let table = rank_table(&report);
    out.text("ranks.tsv", &table)?;
    out.json("report.json", &summary)?;
    out.text(
        "ranks.svg",
        &rank_interval_svg(&format!("Rank intervals ({name})"), &report),
    )?;
    print!("{table}");
    Ok(())
}

pub fn sweep(
    input: &Path,
    omega_grid: &str,
    beta_grid: &str,
    truth: Option<&Path>,
    fit: &FitArgs,
    out: &Path,
) -> Result<()> {
    let ds = load(input)?;
    let cfg = resolve(fit, None, &ds.rubric)?;
    let omegas = parse_list(omega_grid)?;
    let betas = parse_list(beta_grid)?;
    let truth = truth
        .map(|p| read_json(p).and_then(|v| extract_truth(&v)))
        .transpose()?;
    let report = sensitivity_sweep(
        &ds,
        &omegas,
        &betas,
        &cfg.hyper,
        &cfg.sampler,
        truth.as_ref().map(|t| &t.0),
    )?;
    let out = OutDir::new(out)?;
    let tsv = report.to_tsv();
    out.text("sweep.tsv", &tsv)?;
    out.json("sweep.json", &report)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = betas
        .iter()
        .map(|&b| {
            let pts = report
                .cells
                .iter()
                .filter(|c| c.beta_max == b)
                .map(|c| (c.omega, c.correlation.unwrap_or(f64::NAN)))
                .collect();
            (format!("beta_max {b}"), pts)
        })
        .collect();
    out.text(
        "sweep.svg",
        &scatter_svg(
            "Rank correlation with the omega = 0 fit",
            "omega",
            "Spearman correlation",
            &series,
        ),
    )?;
    print!("{tsv}");
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let rubric = RubricSpec::new(args.levels, args.assigned_levels.unwrap_or(args.levels))?;
    let mut spec = SyntheticSpec::new(args.questions, args.candidates, args.judges, rubric);
    spec.judges = match (args.perfect_judges, args.quality) {
        (true, _) => JudgeSource::Perfect,
        (false, Some(quality)) => JudgeSource::PriorWithQuality {
            beta_max: args.beta_max,
            quality,
        },
        (false, None) => JudgeSource::Prior {
            beta_max: args.beta_max,
        },
    };
    if !(0.0..=1.0).contains(&args.correlation) {
        bail!("--correlation must lie in [0, 1]");
    }
    spec.correlation = args.correlation;
    if args.shift > 0.0 {
        spec.shift = Some(ShiftSpec {
            magnitude: args.shift,
            delta: None,
        });
    }
    if args.strata == 0 || args.candidates < 2 || args.judges == 0 || args.questions == 0 {
        bail!("need at least one stratum, question and judge and two candidates");
    }
    spec.num_strata = args.strata;
    let (ds, truth) = generate_synthetic(&spec, args.seed);
    let out = OutDir::new(&args.out)?;
    simplex_rank::io::save_dataset(&ds, &out.path(&args.scores_name))?;
    out.json("truth.json", &truth)?;
    let ranks = truth.ranking.ranks();
    let mut table = String::from("candidate\texpected_score\trank\n");
    for id in &truth.ranking.order {
        let _ = writeln!(table, "{id}\t{:.6}\t{}", truth.expected_scores[id], ranks[id]);
    }
    out.text("truth.tsv", &table)?;
    println!(
        "{} records: {} questions, {} candidates, {} judges",
        ds.records.len(),
        args.questions,
        args.candidates,
        args.judges
    );
    print!("{table}");
    Ok(())
}

fn vertices_from(s: &str) -> Result<JudgeVertices> {
    Ok(JudgeVertices::new(parse_matrix(s)?)?)
}

fn ranking_table(ranking: &Ranking, scores: &BTreeMap<String, f64>) -> String {
    let ranks = ranking.ranks();
    let mut out = String::from("candidate\tscore\trank\n");
    for id in &ranking.order {
        let _ = writeln!(
            out,
            "{id}\t{:.6}\t{}",
            scores.get(id).copied().unwrap_or(f64::NAN),
            ranks[id]
        );
    }
    out
}

pub fn identify(tool: IdentifyTool) -> Result<()> {
    match tool {
        IdentifyTool::Binary {
            input,
            moderate,
            out,
        } => {
            let ds = load(&input)?;
            if ds.rubric.num_true_levels() != 2 {
                bail!(
                    "binary ranking needs two true levels, the rubric has {}",
                    ds.rubric.num_true_levels()
                );
            }
            let counts = tabulate(&ds, false)?;
            let out = OutDir::new(&out)?;
            let (ranking, scores, summary) = if moderate {
                let mut gammas = BTreeMap::new();
                for (j, judge) in counts.judges.iter().enumerate() {
                    for (k, cand) in counts.candidates.iter().enumerate() {
                        if let Some(g) = MarginalScoreDistribution::from_counts(&counts.counts[j][k]) {
                            gammas.insert((judge.clone(), cand.clone()), g);
                        }
                    }
                }
                let r = rank_binary_moderate(&gammas, &ds.judge_family, &ds.candidate_family)?;
                (r.ranking.clone(), r.scale.clone(), json!(r))
            } else {
                let mut gammas = BTreeMap::new();
                for (k, cand) in counts.candidates.iter().enumerate() {
                    if let Some(g) = MarginalScoreDistribution::from_counts(&counts.candidate_totals(k)) {
                        gammas.insert(cand.clone(), g);
                    }
                }
                let r = rank_binary_strong(&gammas);
                let scores: BTreeMap<String, f64> =
                    gammas.iter().map(|(k, g)| (k.clone(), g.probs()[1])).collect();
                let summary = json!({ "ranking": r, "scores": scores });
                (r, scores, summary)
            };
            let table = ranking_table(&ranking, &scores);
            out.text("ranking.tsv", &table)?;
            out.json("ranking.json", &summary)?;
            print!("{table}");
        }
        IdentifyTool::Witness {
            vertices,
            epsilon,
            out,
        } => {
            let base = vertices_from(&vertices)?;
            let w = make_nonidentifiability_witness(&base, epsilon)?;
            let out = OutDir::new(&out)?;
            out.json("witness.json", &w)?;
            let as3 = |v: &[f64]| [v[0], v[1], v[2]];
            let mut points = vec![
                ("gamma 1".to_string(), as3(w.shared_marginals.0.probs())),
                ("gamma 2".to_string(), as3(w.shared_marginals.1.probs())),
            ];
            for (m, c) in w.minus_vertices.columns().iter().enumerate() {
                points.push((format!("minus {}", m + 1), as3(c)));
            }
            for (m, c) in w.plus_vertices.columns().iter().enumerate() {
                points.push((format!("plus {}", m + 1), as3(c)));
            }
            let hull: Vec<[f64; 3]> = base.columns().iter().map(|c| as3(c)).collect();
            out.text(
                "witness.svg",
                &simplex_svg("Shared marginals under two judge configurations", &points, &hull),
            )?;
            println!("step h = {:.6}", w.step);
            println!(
                "score difference: minus {:+.6}  plus {:+.6}",
                w.score_difference.0, w.score_difference.1
            );
        }
        IdentifyTool::Envelope {
            input,
            vertices,
            out,
        } => {
            let ds = load(&input)?;
            let verts = vertices_from(&vertices)?;
            let counts = tabulate(&ds, false)?;
            let out = OutDir::new(&out)?;
            let mut table = String::from("candidate\tcoords\toutside_hull\tresidual\n");
            let mut rows = BTreeMap::new();
            let mut points = Vec::new();
            for (k, cand) in counts.candidates.iter().enumerate() {
                let Some(g) = MarginalScoreDistribution::from_counts(&counts.candidate_totals(k))
                else {
                    continue;
                };
                let b = barycentric_coords(&g, &verts)?;
                let coords: Vec<String> = b.coords.iter().map(|c| format!("{c:.6}")).collect();
                let _ = writeln!(
                    table,
                    "{cand}\t{}\t{}\t{:.3e}",
                    coords.join(","),
                    b.outside_hull,
                    b.residual
                );
                if g.len() == 3 {
                    let p = g.probs();
                    points.push((cand.clone(), [p[0], p[1], p[2]]));
                }
                rows.insert(cand.clone(), b);
            }
            let feasible = rows.values().all(|b| !b.outside_hull);
            out.text("envelope.tsv", &table)?;
            out.json("envelope.json", &json!({ "feasible": feasible, "candidates": rows }))?;
            if verts.num_assigned_levels() == 3 {
                let hull: Vec<[f64; 3]> = verts
                    .columns()
                    .iter()
                    .map(|c| [c[0], c[1], c[2]])
                    .collect();
                out.text(
                    "envelope.svg",
                    &simplex_svg("Candidate marginals and judge hull", &points, &hull),
                )?;
            }
            print!("{table}");
            println!("all candidates enveloped: {feasible}");
        }
    }
    Ok(())
}

fn parse_judge(s: &str) -> Result<JudgeSpec> {
    let (id, rest) = s.split_once('=').unwrap_or((s, s));
    let (model, family) = match rest.split_once('@') {
        Some((m, f)) => (m, Some(f.to_string())),
        None => (rest, None),
    };
    if id.is_empty() || model.is_empty() {
        bail!("bad --judge {s:?}; expected id=model or id=model@family");
    }
    Ok(JudgeSpec {
        judge_id: id.to_string(),
        model: model.to_string(),
        family,
    })
}

fn load_questions(path: &Path) -> Result<Vec<JudgeQuestion>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

pub fn judge(args: &JudgeArgs) -> Result<()> {
    let kind: TaskKind = args.task.parse().map_err(anyhow::Error::msg)?;
    let questions = load_questions(&args.questions)?;
    let mut judges: Vec<JudgeSpec> = args
        .judges
        .iter()
        .map(|s| parse_judge(s))
        .collect::<Result<_>>()?;
    let transport: Box<dyn Transport> = match &args.mock {
        Some(path) => Box::new(MockTransport::load(kind, path)?),
        None => {
            let (http, model) = HttpTransport::from_env(Duration::from_secs(args.timeout_secs))?;
            if judges.is_empty() {
                let model = model.context(
                    "no --judge given and SIMPLEX_RANK_MODEL is not set",
                )?;
                judges.push(JudgeSpec {
                    judge_id: model.clone(),
                    model,
                    family: None,
                });
            }
            Box::new(http)
        }
    };
    if judges.is_empty() {
        bail!("at least one --judge is required");
    }
    let out = OutDir::new(&args.out)?;
    let checkpoint: PathBuf = out.path("checkpoint.jsonl");
    if args.fresh {
        for name in ["checkpoint.jsonl", "audit.jsonl"] {
            let p = out.path(name);
            if p.exists() {
                std::fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let mut cfg = RunConfig::new(kind, judges);
    cfg.concurrency = args.concurrency;
    cfg.seed = args.seed;
    cfg.retry = RetryPolicy {
        max_retries: args.max_retries,
        initial_backoff: Duration::from_millis(args.backoff_ms),
        ..RetryPolicy::default()
    };
    cfg.audit_log = Some(out.path("audit.jsonl"));
    cfg.checkpoint = Some(checkpoint);
    let summary = run_judging(transport.as_ref(), &questions, &cfg)?;
    simplex_rank::io::save_dataset(&summary.dataset, &out.path("scores.jsonl"))?;
    println!(
        "{} records from {} requests ({} retries, {} pairs resumed)",
        summary.dataset.records.len(),
        summary.calls,
        summary.retries,
        summary.resumed
    );
    for why in &summary.incomplete {
        eprintln!("incomplete: {why}");
    }
    Ok(())
}

pub fn eval(reports: &[PathBuf], truth: &Path, out: Option<&Path>) -> Result<()> {
    let (ranking, true_scores) = extract_truth(&read_json(truth)?)?;
    let mut table = String::from("report\tCorr\tCov\tScoreCov\tWidth\n");
    let mut rows = Vec::new();
    for path in reports {
        let (candidates, report_ranking) = extract_report(&read_json(path)?)
            .with_context(|| format!("reading report {}", path.display()))?;
        let report = simplex_rank::inference::RankReport {
            candidates,
            ranking: report_ranking,
            diagnostics: BTreeMap::new(),
            divergences: 0,
            num_draws: 0,
        };
        let corr = spearman(&report.ranking, &ranking)
            .with_context(|| format!("comparing {} with the truth", path.display()))?;
        let cov = coverage(&[&report], &ranking);
        let score_cov = true_scores.as_ref().map(|s| score_coverage(&[&report], s));
        let width = mean_rank_width(&report);
        let name = path.display().to_string();
        let _ = writeln!(
            table,
            "{name}\t{corr:.4}\t{cov:.4}\t{}\t{width:.4}",
            score_cov.map_or("NA".to_string(), |c| format!("{c:.4}"))
        );
        rows.push(json!({
            "report": name,
            "spearman": corr,
            "coverage": cov,
            "score_coverage": score_cov,
            "mean_rank_width": width,
        }));
    }
    if let Some(dir) = out {
        let out = OutDir::new(dir)?;
        out.text("eval.tsv", &table)?;
        out.json("eval.json", &rows)?;
    }
    print!("{table}");
    Ok(())
}
