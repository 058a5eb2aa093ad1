//! CSV emission with fixed columns and 12 significant digits.

use frictionlab::text_io::fmt12;

use crate::experiments::{
    ConvergenceReport, DualityReport, HjbReport, PremiumOutput, PriceReport, Timing, VerifyReport,
};

fn num(x: f64) -> String {
    fmt12(x)
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt12).unwrap_or_default()
}

/// Writes a header and rows; fields are quoted only when needed.
pub fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn price_csv(r: &PriceReport) -> String {
    table(
        &["n", "engine", "value", "boundary_hit", "widenings", "min_second_difference"],
        r.rows.iter().map(|x| {
            vec![
                x.n.to_string(),
                x.engine.name().into(),
                num(x.value),
                x.boundary_hit.to_string(),
                x.widenings.to_string(),
                num(x.min_second_difference),
            ]
        }),
    )
}

pub fn duality_csv(r: &DualityReport) -> String {
    table(
        &["n", "primal", "dual", "upper_bound", "rel_gap", "method", "iterations"],
        r.rows.iter().map(|x| {
            vec![
                x.n.to_string(),
                num(x.primal),
                num(x.dual),
                opt(x.upper_bound),
                num(x.rel_gap),
                x.method.clone(),
                x.iterations.to_string(),
            ]
        }),
    )
}

pub fn convergence_csv(r: &ConvergenceReport) -> String {
    table(
        &["n", "engine", "primal", "dual", "kusuoka", "limit", "gap", "rel_gap"],
        r.rows.iter().map(|x| {
            vec![
                x.n.to_string(),
                x.engine.name().into(),
                num(x.primal),
                opt(x.dual),
                opt(x.kusuoka),
                opt(x.limit),
                opt(x.gap),
                opt(x.rel_gap),
            ]
        }),
    )
}

/// Limit value, its source and the trend diagnostic.
pub fn convergence_summary_csv(r: &ConvergenceReport) -> String {
    let final_gap = r.rows.last().and_then(|x| x.rel_gap);
    table(
        &["limit", "limit_source", "trend_decreasing", "final_rel_gap"],
        [vec![
            opt(r.limit.map(|l| l.value)),
            r.limit.map(|l| l.source.name().to_string()).unwrap_or_default(),
            r.trend_decreasing.map(|t| t.to_string()).unwrap_or_default(),
            opt(final_gap),
        ]],
    )
}

pub fn hjb_csv(r: &HjbReport) -> String {
    table(
        &["sigma", "s0", "c", "value", "closed_form", "nx", "nt"],
        [vec![
            num(r.spec.sigma),
            num(r.spec.s0),
            num(r.spec.c),
            num(r.solution.value),
            opt(r.closed_form),
            r.grid.nx.to_string(),
            r.grid.nt.to_string(),
        ]],
    )
}

pub fn verify_csv(r: &VerifyReport) -> String {
    table(
        &["n", "capital", "min_slack", "worst_path", "paths"],
        r.rows.iter().map(|x| {
            vec![x.n.to_string(), num(x.capital), num(x.min_slack), x.worst_path.clone(), x.paths.to_string()]
        }),
    )
}

pub fn premium_csv(r: &PremiumOutput) -> String {
    let p = &r.report;
    table(
        &["eps", "limit_value", "bs_baseline", "premium", "closed_form", "constant_control", "best_a", "cost_scale"],
        [vec![
            num(p.eps),
            num(p.limit_value),
            num(p.bs_baseline),
            num(p.premium),
            opt(p.closed_form),
            opt(p.constant_control),
            opt(p.best_a),
            num(p.cost_scale),
        ]],
    )
}

pub fn timings_csv(t: &[Timing]) -> String {
    table(&["label", "ms"], t.iter().map(|x| vec![x.label.clone(), format!("{:.3}", x.ms)]))
}
