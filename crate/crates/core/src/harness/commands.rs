use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ExperimentConfig, Report, SamplerSpec};
use crate::error::{Error, Result};
use crate::estimators::{Estimator, EstimatorSpec};
use crate::exactlaws::{budget_grouped_tv, mu_phi, mu_proj, mu_star, phi_exact, PhiTable, StateGraph, TerminalLaw};
use crate::grammar::{Grammar, GrammarSpec, DEFAULT_ENUMERATION_LIMIT};
use crate::instance::Instance;
use crate::metrics::{
    bootstrap_tv_ci, cost_model, fidelity_bounds, kl_identity_check, per_step_tv, structural_stats, Bound,
    CostModelParams,
};
use crate::samplers::{ancestral_many, KernelSpec, SpecConfig, SpecDecoder, StepKernel};
use crate::toylm::LmSpec;

const RESIDUAL_TOL: f64 = 1e-12;
const KL_TOL: f64 = 1e-10;
const BOUND_SLACK: f64 = 1e-12;

fn timed(mut report: Report, body: impl FnOnce(&mut Report) -> Result<()>) -> Result<Report> {
    let start = Instant::now();
    body(&mut report)?;
    report.wall_clock_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

fn csv_bytes<S: Serialize>(rows: &[S]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn count_u64(c: u128) -> u64 {
    u64::try_from(c).unwrap_or(u64::MAX)
}

fn build_graph(inst: &Instance) -> Result<StateGraph> {
    StateGraph::build(inst).map_err(|e| match e {
        Error::Capacity { limit } => Error::Unsupported(format!(
            "state graph exceeds {limit} nodes; for budget languages use `philab budget`"
        )),
        other => other,
    })
}

/// Language size, matcher state count and (when small) the language itself.
pub fn cmd_enumerate(cfg: &ExperimentConfig) -> Result<Report> {
    timed(Report::new("enumerate", cfg), |r| {
        let g = Grammar::new(cfg.grammar.clone())?;
        let cap = cfg.effective_cap()?;
        let count = g.count_language(cap);
        r.analytic("language_size", count_u64(count));
        r.analytic("state_count", g.state_count()?);
        r.analytic("max_length", g.max_length());
        if count <= DEFAULT_ENUMERATION_LIMIT {
            let words = g.enumerate_language(cap)?;
            r.audit(
                "enumeration_matches_count",
                words.len() as u128 == count,
                format!("{} enumerated, {} counted", words.len(), count),
            );
            if cfg.output.dump_samples {
                let mut buf = Vec::new();
                g.dump_language(&words, &mut buf)?;
                r.table("language.txt", buf);
            }
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize)]
struct GapRow {
    seed: u64,
    estimator: String,
    tv_proj_star: f64,
    tv_phi_star: Option<f64>,
    root_delta: f64,
    root_phi_bar: f64,
    root_bound: Option<f64>,
    max_delta: f64,
    vacuous_states: usize,
    states: usize,
    lm_forwards: u64,
    trie_queries: u64,
    error: Option<String>,
}

/// Analytic projection gap, per-estimator gaps, bounds and KL identity.
pub fn cmd_gap(cfg: &ExperimentConfig) -> Result<Report> {
    timed(Report::new("gap", cfg), |r| {
        if let (GrammarSpec::BudgetDfa { n, k }, LmSpec::Bernoulli { p1 }) = (&cfg.grammar, &cfg.lm) {
            let row = budget_row(&BudgetParams { n: *n, k: *k, p1: *p1 })?;
            r.analytic("tv_proj_star", row.tv_proj_star);
            r.analytic("tv_phi_star", row.tv_phi_star);
            r.analytic("budget", &row);
            r.audit("doob_residual", row.doob_residual <= RESIDUAL_TOL, format!("{:e}", row.doob_residual));
            return Ok(());
        }
        let mut rows = Vec::new();
        let mut per_seed = Vec::new();
        for &seed in &cfg.seeds {
            let inst = cfg.instance(seed)?;
            let table = Arc::new(PhiTable::from_graph(build_graph(&inst)?)?);
            let graph = table.graph();
            let residual = table.recursion_residual();
            r.audit("doob_residual", residual <= RESIDUAL_TOL, format!("seed {seed}: {residual:e}"));

            let (star, z) = mu_star(graph)?;
            let proj = mu_proj(graph)?;
            let gap = proj.tv(&star);

            let mut kl_worst = 0.0f64;
            for (id, node) in graph.nodes().iter().enumerate() {
                let c = kl_identity_check(&node.position, table.values_at(id))?;
                kl_worst = kl_worst.max((c.kl_direct - c.kl_via_phi).abs());
            }
            r.audit("kl_identity", kl_worst <= KL_TOL, format!("seed {seed}: max gap {kl_worst:e}"));

            let mut bound_violations = 0usize;
            for spec in &cfg.estimators {
                let est = Estimator::with_table(spec.clone(), table.clone())?;
                let mut row = GapRow {
                    seed,
                    estimator: spec.label(),
                    tv_proj_star: gap,
                    tv_phi_star: None,
                    root_delta: 0.0,
                    root_phi_bar: 0.0,
                    root_bound: None,
                    max_delta: 0.0,
                    vacuous_states: 0,
                    states: graph.len(),
                    lm_forwards: 0,
                    trie_queries: 0,
                    error: None,
                };
                let scan = (|| -> Result<()> {
                    for (id, node) in graph.nodes().iter().enumerate() {
                        let v = est.estimate(&inst, &node.position)?;
                        let exact = table.values_at(id);
                        let b = fidelity_bounds(&v, exact, &node.position)?;
                        row.lm_forwards += v.cost.lm_forwards;
                        row.trie_queries += v.cost.trie_queries;
                        row.max_delta = row.max_delta.max(b.delta);
                        if id == 0 {
                            row.root_delta = b.delta;
                            row.root_phi_bar = b.phi_bar;
                            row.root_bound = b.additive_bound.finite();
                        }
                        match b.additive_bound {
                            Bound::Vacuous => row.vacuous_states += 1,
                            Bound::Finite(bound) => {
                                if per_step_tv(&node.position, &v.values, exact)? > bound + BOUND_SLACK {
                                    bound_violations += 1;
                                }
                            }
                        }
                    }
                    row.tv_phi_star = Some(mu_phi(&inst, graph, &est)?.tv(&star));
                    Ok(())
                })();
                if let Err(e) = scan {
                    row.error = Some(e.to_string());
                }
                rows.push(row);
            }
            r.audit("fidelity_bound", bound_violations == 0, format!("seed {seed}: {bound_violations} violations"));
            per_seed.push(json!({
                "seed": seed,
                "z": z,
                "language_size": star.len(),
                "tv_proj_star": gap,
                "kl_identity_max_gap": kl_worst,
                "doob_residual": residual,
            }));
            if seed == cfg.seeds[0] && cfg.output.csv {
                let mut buf = Vec::new();
                table.write_csv(inst.vocab(), &mut buf)?;
                r.table("phi.csv", buf);
                r.table("laws.csv", laws_csv(&inst, &[("mu_star", &star), ("mu_proj", &proj)])?);
            }
        }
        r.analytic("seeds", per_seed);
        r.analytic("estimators", &rows);
        r.table("gap.csv", csv_bytes(&rows)?);
        Ok(())
    })
}

/// `string,<law>...` with one column per law.
fn laws_csv(inst: &Instance, laws: &[(&str, &TerminalLaw)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["string".to_string()];
    header.extend(laws.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    let mut words: Vec<_> = laws.iter().flat_map(|(_, l)| l.iter().map(|(w, _)| w.clone())).collect();
    words.sort();
    words.dedup();
    for word in words {
        let mut rec = vec![inst.vocab().render(&word)];
        rec.extend(laws.iter().map(|(_, l)| format!("{:.17e}", l.prob(&word))));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Debug, Clone, Serialize)]
struct HierarchyRow {
    seed: u64,
    estimator: String,
    n: usize,
    tv_empirical: f64,
    ci_lo: f64,
    ci_hi: f64,
    tv_analytic: f64,
    root_delta: f64,
    root_phi_bar: f64,
    root_bound: Option<f64>,
    root_lm_forwards: u64,
    root_trie_queries: u64,
}

/// Per-tier sampled TV to `μ*` over a seed sweep.
pub fn cmd_hierarchy(cfg: &ExperimentConfig) -> Result<Report> {
    timed(Report::new("hierarchy", cfg), |r| {
        let mut rows = Vec::new();
        let mut exact_beats_uniform = 0usize;
        for &seed in &cfg.seeds {
            let inst = cfg.instance(seed)?;
            let table = Arc::new(PhiTable::from_graph(build_graph(&inst)?)?);
            let (star, _) = mu_star(table.graph())?;
            let root = inst.position(&inst.root())?;
            let mut by_tier = Vec::new();
            for spec in &cfg.estimators {
                let est = Estimator::with_table(spec.clone(), table.clone())?;
                let v = est.estimate(&inst, &root)?;
                let b = fidelity_bounds(&v, table.values_at(0), &root)?;
                let tv_analytic = mu_phi(&inst, table.graph(), &est)?.tv(&star);
                let words = ancestral_many(&StepKernel::doob(est), &inst, cfg.samples, seed)?;
                let ci = bootstrap_tv_ci(&words, &star, cfg.resamples, seed)?;
                by_tier.push((spec.clone(), ci.point));
                rows.push(HierarchyRow {
                    seed,
                    estimator: spec.label(),
                    n: cfg.samples,
                    tv_empirical: ci.point,
                    ci_lo: ci.lo,
                    ci_hi: ci.hi,
                    tv_analytic,
                    root_delta: b.delta,
                    root_phi_bar: b.phi_bar,
                    root_bound: b.additive_bound.finite(),
                    root_lm_forwards: v.cost.lm_forwards,
                    root_trie_queries: v.cost.trie_queries,
                });
            }
            let tv_of = |s: &EstimatorSpec| by_tier.iter().find(|(t, _)| t == s).map(|(_, v)| *v);
            if let (Some(e), Some(u)) = (tv_of(&EstimatorSpec::ExactTable), tv_of(&EstimatorSpec::Uniform)) {
                exact_beats_uniform += usize::from(e < u);
            }
        }
        r.empirical("rows", &rows);
        r.empirical("exact_beats_uniform", json!({ "count": exact_beats_uniform, "seeds": cfg.seeds.len() }));
        r.table("hierarchy.csv", csv_bytes(&rows)?);
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize)]
struct SpecRow {
    seed: u64,
    target: String,
    n: usize,
    gamma: usize,
    tv_star: f64,
    tv_star_lo: f64,
    tv_star_hi: f64,
    tv_proj: f64,
    tv_proj_lo: f64,
    tv_proj_hi: f64,
    analytic_gap: f64,
    sampling_floor: f64,
    accept_rate: f64,
    proposed: u64,
    accepted: u64,
    residual_draws: u64,
    rounds: u64,
    rollback_checks: u64,
    rollback_failures: u64,
}

/// Speculative loop against a local-mask or Doob target.
pub fn cmd_specloop(cfg: &ExperimentConfig) -> Result<Report> {
    let SamplerSpec::Speculative { gamma, target } = &cfg.sampler else {
        return Err(Error::InvalidSpec("specloop needs a Speculative sampler in the config".into()));
    };
    timed(Report::new("specloop", cfg), |r| {
        let mut rows = Vec::new();
        for &seed in &cfg.seeds {
            let inst = cfg.instance(seed)?;
            let table = Arc::new(PhiTable::from_graph(build_graph(&inst)?)?);
            let graph = table.graph();
            let (star, _) = mu_star(graph)?;
            let proj = mu_proj(graph)?;
            let draft_lm = cfg.draft_lm.clone().unwrap_or_else(|| cfg.lm.with_seed(seed.wrapping_add(1)));
            let spec = SpecConfig { gamma: *gamma, draft_lm, target: target.clone(), seed };
            let kernel = match target {
                KernelSpec::LocalMask => StepKernel::local_mask(),
                KernelSpec::Doob { estimator } => StepKernel::doob(Estimator::with_table(estimator.clone(), table.clone())?),
            };
            let batch = SpecDecoder::with_kernel(&spec, &inst, kernel)?.decode_many(cfg.samples, seed)?;
            let to_star = bootstrap_tv_ci(&batch.words, &star, cfg.resamples, seed)?;
            let to_proj = bootstrap_tv_ci(&batch.words, &proj, cfg.resamples, seed)?;
            r.audit(
                "rollback",
                batch.rollback_failures == 0,
                format!("seed {seed}: {} of {} checks failed", batch.rollback_failures, batch.rollback_checks),
            );
            if cfg.output.dump_samples {
                let mut buf = Vec::new();
                inst.grammar().dump_language(&batch.words, &mut buf)?;
                r.table(&format!("samples_seed{seed}.txt"), buf);
            }
            rows.push(SpecRow {
                seed,
                target: match target {
                    KernelSpec::LocalMask => "LocalMask".into(),
                    KernelSpec::Doob { estimator } => format!("Doob({})", estimator.label()),
                },
                n: cfg.samples,
                gamma: *gamma,
                tv_star: to_star.point,
                tv_star_lo: to_star.lo,
                tv_star_hi: to_star.hi,
                tv_proj: to_proj.point,
                tv_proj_lo: to_proj.lo,
                tv_proj_hi: to_proj.hi,
                analytic_gap: proj.tv(&star),
                sampling_floor: 3.0 * (star.len() as f64 / cfg.samples as f64).sqrt(),
                accept_rate: batch.stats.accept_rate(),
                proposed: batch.stats.proposed,
                accepted: batch.stats.accepted,
                residual_draws: batch.stats.residual_draws,
                rounds: batch.stats.rounds,
                rollback_checks: batch.rollback_checks,
                rollback_failures: batch.rollback_failures,
            });
        }
        r.empirical("rows", &rows);
        r.table("specloop.csv", csv_bytes(&rows)?);
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetParams {
    pub n: usize,
    pub k: usize,
    pub p1: f64,
}

/// Settings of the large regular-language stress table.
pub const BUDGET_TABLE: [BudgetParams; 8] = [
    BudgetParams { n: 20, k: 10, p1: 0.62 },
    BudgetParams { n: 22, k: 11, p1: 0.65 },
    BudgetParams { n: 24, k: 12, p1: 0.68 },
    BudgetParams { n: 24, k: 10, p1: 0.65 },
    BudgetParams { n: 24, k: 8, p1: 0.70 },
    BudgetParams { n: 26, k: 13, p1: 0.68 },
    BudgetParams { n: 28, k: 14, p1: 0.68 },
    BudgetParams { n: 30, k: 15, p1: 0.70 },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub n: usize,
    pub k: usize,
    pub p1: f64,
    pub valid_count: u64,
    pub state_count: usize,
    pub tv_proj_star: f64,
    pub tv_phi_star: f64,
    pub root_masked_p1: f64,
    pub root_doob_p1: f64,
    /// Largest Doob recursion residual of the exact table on the DFA.
    pub doob_residual: f64,
    /// For `n <= 12`: largest disagreement with full enumeration.
    pub enumeration_gap: Option<f64>,
}

/// One row of the grouped budget computation with its cross-checks.
pub fn budget_row(p: &BudgetParams) -> Result<BudgetRow> {
    let tv = budget_grouped_tv(p.n, p.k, p.p1)?;
    let spec = GrammarSpec::BudgetDfa { n: p.n, k: p.k };
    let grammar = Grammar::new(spec.clone())?;
    let inst = Instance::new(spec, LmSpec::Bernoulli { p1: p.p1 }, p.n)?;
    let table = phi_exact(&inst)?;
    let enumeration_gap = if p.n <= 12 {
        let (star, _) = mu_star(table.graph())?;
        let proj = mu_proj(table.graph())?;
        let phi = mu_phi(&inst, table.graph(), &table)?;
        let count_gap = if star.len() as u128 == tv.valid_count { 0.0 } else { f64::INFINITY };
        Some(
            (proj.tv(&star) - tv.tv_proj_star)
                .abs()
                .max((phi.tv(&star) - tv.tv_phi_star).abs())
                .max(count_gap),
        )
    } else {
        None
    };
    Ok(BudgetRow {
        n: p.n,
        k: p.k,
        p1: p.p1,
        valid_count: count_u64(tv.valid_count),
        state_count: grammar.state_count()?,
        tv_proj_star: tv.tv_proj_star,
        tv_phi_star: tv.tv_phi_star,
        root_masked_p1: tv.root_masked_p1,
        root_doob_p1: tv.root_doob_p1,
        doob_residual: table.recursion_residual(),
        enumeration_gap,
    })
}

/// Grouped exact TVs for budget languages; no sampling.
pub fn cmd_budget(cfg: &ExperimentConfig) -> Result<Report> {
    let params: Vec<BudgetParams> = if cfg.budget_rows.is_empty() {
        match (&cfg.grammar, &cfg.lm) {
            (GrammarSpec::BudgetDfa { n, k }, LmSpec::Bernoulli { p1 }) => vec![BudgetParams { n: *n, k: *k, p1: *p1 }],
            _ => return Err(Error::InvalidSpec("budget needs budget_rows or a BudgetDfa grammar with a Bernoulli model".into())),
        }
    } else {
        cfg.budget_rows.clone()
    };
    timed(Report::new("budget", cfg), |r| {
        let rows = params.iter().map(budget_row).collect::<Result<Vec<_>>>()?;
        let worst_residual = rows.iter().map(|x| x.doob_residual).fold(0.0, f64::max);
        let worst_phi = rows.iter().map(|x| x.tv_phi_star).fold(0.0, f64::max);
        r.audit("doob_residual", worst_residual <= RESIDUAL_TOL, format!("{worst_residual:e}"));
        r.audit("doob_law", worst_phi <= RESIDUAL_TOL, format!("max TV(mu_phi, mu_star) {worst_phi:e}"));
        if let Some(gap) = rows.iter().filter_map(|x| x.enumeration_gap).reduce(f64::max) {
            r.audit("enumeration_cross_check", gap <= 1e-10, format!("{gap:e}"));
        }
        r.analytic("rows", &rows);
        r.table("budget.csv", csv_bytes(&rows)?);
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub params: CostModelParams,
}

/// Speculative rows at 35 ms verify, 5 ms draft, 1 ms per extra forward and
/// 3.07 committed tokens per round.
pub fn default_cost_rows() -> Vec<CostRow> {
    let row = |method: &str, fw: f64, fixed: f64| CostRow {
        method: method.into(),
        params: CostModelParams::new(35.0, 5.0, 1.0, 3.07, fw, fixed),
    };
    vec![row("SD, uniform", 0.0, 0.0), row("SD, OneStep-Cheap", 0.0, 0.3), row("SD, OneStep-True", 7.5, 0.0)]
}

#[derive(Debug, Clone, Serialize)]
struct CostLine {
    method: String,
    t_verify_ms: f64,
    t_draft_ms: f64,
    t_forward_ms: f64,
    tokens_per_round: f64,
    overhead_forwards_per_round: f64,
    overhead_fixed_ms: f64,
    tokens_per_second: f64,
    speedup_vs_ar: Option<f64>,
}

/// Throughput rows from the analytic cost model.
pub fn cmd_cost(cfg: &ExperimentConfig) -> Result<Report> {
    timed(Report::new("cost", cfg), |r| {
        let rows = if cfg.cost_rows.is_empty() { default_cost_rows() } else { cfg.cost_rows.clone() };
        let lines = rows
            .iter()
            .map(|row| {
                let p = row.params;
                let tps = cost_model(&p)?;
                Ok(CostLine {
                    method: row.method.clone(),
                    t_verify_ms: p.t_verify_ms,
                    t_draft_ms: p.t_draft_ms,
                    t_forward_ms: p.t_forward_ms,
                    tokens_per_round: p.tokens_per_round,
                    overhead_forwards_per_round: p.overhead_forwards_per_round,
                    overhead_fixed_ms: p.overhead_fixed_ms,
                    tokens_per_second: tps,
                    speedup_vs_ar: cfg.ar_baseline_tok_s.map(|ar| tps / ar),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(ar) = cfg.ar_baseline_tok_s {
            r.analytic("ar_baseline_tok_s", ar);
        }
        r.analytic("rows", &lines);
        r.table("cost.csv", csv_bytes(&lines)?);
        Ok(())
    })
}

/// Loads a written report from its run directory or its JSON file.
pub fn cmd_report(path: &Path) -> Result<Report> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    Ok(serde_json::from_str(&std::fs::read_to_string(file)?)?)
}

/// Mean depth and length under `μ^proj` and `μ*`.
pub fn structural_summary(inst: &Instance) -> Result<serde_json::Value> {
    let graph = build_graph(inst)?;
    let (star, _) = mu_star(&graph)?;
    let proj = mu_proj(&graph)?;
    let s = structural_stats(&star, inst.grammar());
    let p = structural_stats(&proj, inst.grammar());
    Ok(json!({ "mu_star": s, "mu_proj": p }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_cfg(grammar: GrammarSpec, lm: LmSpec) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(grammar, lm);
        c.samples = 300;
        c.resamples = 20;
        c
    }

    #[test]
    fn enumerate_counts_dyck() {
        let r = cmd_enumerate(&tmp_cfg(GrammarSpec::Dyck { depth: 3, length: 12 }, LmSpec::seeded(0, 1))).unwrap();
        assert_eq!(r.analytic["language_size"], json!(145));
        assert!(r.passed());
    }

    #[test]
    fn gap_on_small_dyck() {
        let r = cmd_gap(&tmp_cfg(GrammarSpec::Dyck { depth: 2, length: 6 }, LmSpec::seeded(1, 1))).unwrap();
        assert!(r.passed(), "{:?}", r.audits);
        let rows = r.analytic["estimators"].as_array().unwrap();
        let exact = rows.iter().find(|x| x["estimator"] == "Exact").unwrap();
        assert!(exact["tv_phi_star"].as_f64().unwrap() < 1e-12);
        let uniform = rows.iter().find(|x| x["estimator"] == "Uniform").unwrap();
        assert!((uniform["tv_phi_star"].as_f64().unwrap() - uniform["tv_proj_star"].as_f64().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn budget_small_row_cross_checks() {
        let mut c = tmp_cfg(GrammarSpec::BudgetDfa { n: 10, k: 4 }, LmSpec::Bernoulli { p1: 0.6 });
        c.sampler = SamplerSpec::AnalyticOnly;
        let r = cmd_budget(&c).unwrap();
        assert!(r.passed(), "{:?}", r.audits);
    }

    #[test]
    fn cost_defaults() {
        let mut c = tmp_cfg(GrammarSpec::Dyck { depth: 1, length: 2 }, LmSpec::seeded(0, 1));
        c.ar_baseline_tok_s = Some(16.0);
        let r = cmd_cost(&c).unwrap();
        let rows = r.analytic["rows"].as_array().unwrap();
        assert!((rows[0]["tokens_per_second"].as_f64().unwrap() - 76.75).abs() < 1e-9);
    }

    #[test]
    fn specloop_needs_speculative_sampler() {
        let c = tmp_cfg(GrammarSpec::Dyck { depth: 1, length: 2 }, LmSpec::seeded(0, 1));
        assert!(cmd_specloop(&c).is_err());
    }
}
