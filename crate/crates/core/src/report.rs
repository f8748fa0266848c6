// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe reports, headline aggregates and table rendering.
//!
//! Every stored number is full precision; rounding happens only here, at
//! render time. Missing components render as empty cells and are listed in
//! the completeness manifest.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::probes::{CausalResult, SweepCell};

pub const SCALES: [f64; 3] = [0.5, 1.0, 4.0];
pub const SWEEP_SCALES: [f64; 2] = [0.5, 4.0];
pub const SWEEP_LAMBDAS: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleResult {
    pub scale: f64,
    pub d_hidden: usize,
    pub lambda: f64,
    pub probe_mse: f64,
    pub probe_mae: f64,
    pub degradation_pct: f64,
    pub l0: f64,
    pub recon_mse: f64,
    pub dead_latent_pct: f64,
    pub per_window_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroAblationResult {
    pub ablated_mse: f64,
    pub degradation_pct: f64,
    pub per_window_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub spec_hash: String,
    pub base_mse: f64,
    pub base_mae: f64,
    pub base_per_window_mse: Vec<f64>,
    pub scales: Vec<ScaleResult>,
    pub dead_latent_rate_4x: Option<f64>,
    pub top_latents: Vec<usize>,
    pub causal: Option<CausalResult>,
    pub zero_ablation: Option<ZeroAblationResult>,
    pub lambda_sweep: Vec<SweepCell>,
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

impl ProbeReport {
    pub fn scale(&self, scale: f64) -> Option<&ScaleResult> {
        self.scales.iter().find(|s| same(s.scale, scale))
    }

    pub fn sweep_l0(&self, scale: f64, lambda: f64) -> Option<f64> {
        self.lambda_sweep
            .iter()
            .find(|c| same(c.scale, scale) && same(c.lambda, lambda))
            .map(|c| c.l0)
    }

    /// Components absent from this report.
    pub fn missing(&self) -> Vec<String> {
        let mut out: Vec<String> = SCALES
            .iter()
            .filter(|&&s| self.scale(s).is_none())
            .map(|s| format!("substitution {s}x"))
            .collect();
        if self.dead_latent_rate_4x.is_none() {
            out.push("dead-latent census".into());
        }
        if self.causal.is_none() {
            out.push("causal intervention".into());
        }
        if self.zero_ablation.is_none() {
            out.push("zero ablation".into());
        }
        for &s in &SWEEP_SCALES {
            for &l in &SWEEP_LAMBDAS {
                if self.sweep_l0(s, l).is_none() {
                    out.push(format!("lambda sweep {s}x/{l}"));
                }
            }
        }
        out
    }

    /// `|deg(0.5×) − deg(4.0×)|` when both scales are present.
    pub fn scaling_gap(&self) -> Option<f64> {
        Some((self.scale(0.5)?.degradation_pct - self.scale(4.0)?.degradation_pct).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub cells: usize,
    pub scaling_gap_cells: usize,
    pub scaling_gap_mean: Option<f64>,
    pub causal_cells: usize,
    pub causal_shift_mean: Option<f64>,
}

/// Headline aggregates over all cells that carry the needed components.
pub fn aggregate(reports: &[ProbeReport]) -> Aggregates {
    let gaps: Vec<f64> = reports.iter().filter_map(ProbeReport::scaling_gap).collect();
    let shifts: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.causal.as_ref().map(|c| c.mean_shift))
        .collect();
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Aggregates {
        cells: reports.len(),
        scaling_gap_cells: gaps.len(),
        scaling_gap_mean: avg(&gaps),
        causal_cells: shifts.len(),
        causal_shift_mean: avg(&shifts),
    }
}

/// Degradation cell: two decimals, sign always shown.
pub fn format_pct(v: f64) -> String {
    format!("{v:+.2}")
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

/// One `(dataset, horizon, seed)` grid cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
}

impl ProbeReport {
    pub fn key(&self) -> CellKey {
        CellKey {
            dataset: self.dataset.clone(),
            horizon: self.horizon,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub complete: bool,
    pub present: Vec<CellKey>,
    /// Grid cells with no report at all.
    pub absent: Vec<CellKey>,
    /// Present cells lacking some component.
    pub incomplete: Vec<(CellKey, Vec<String>)>,
    pub aggregates: Aggregates,
}

/// One rendered table: header plus string cells, shared by CSV and text.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub title: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.header[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            parts.join("  ")
        };
        let mut out = format!("{}\n{}\n", self.title, line(&self.header));
        let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        for r in &self.rows {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }
}

enum Row<'a> {
    Present(&'a ProbeReport),
    Absent(&'a CellKey),
}

impl Row<'_> {
    fn key(&self) -> CellKey {
        match self {
            Row::Present(r) => r.key(),
            Row::Absent(k) => (*k).clone(),
        }
    }
}

fn rows<'a>(reports: &'a [ProbeReport], absent: &'a [CellKey]) -> Vec<Row<'a>> {
    let mut v: Vec<Row> = reports.iter().map(Row::Present).chain(absent.iter().map(Row::Absent)).collect();
    v.sort_by_key(Row::key);
    v
}

fn header(cols: &[&str]) -> Vec<String> {
    ["Dataset", "H", "Seed"].iter().chain(cols).map(|s| s.to_string()).collect()
}

/// Builds one table; absent cells get blank value columns.
fn table(
    name: &'static str,
    title: &'static str,
    cols: &[&str],
    rows: &[Row],
    display: &dyn Fn(&str) -> String,
    cells: impl Fn(&ProbeReport) -> Vec<String>,
) -> Table {
    Table {
        name,
        title,
        header: header(cols),
        rows: rows
            .iter()
            .map(|row| {
                let k = row.key();
                let mut out = vec![display(&k.dataset), k.horizon.to_string(), k.seed.to_string()];
                match row {
                    Row::Present(r) => out.extend(cells(r)),
                    Row::Absent(_) => out.extend(cols.iter().map(|_| String::new())),
                }
                out
            })
            .collect(),
    }
}

/// Builds the scaling, fidelity, sweep, ablation and baseline tables.
pub fn tables(reports: &[ProbeReport], absent: &[CellKey], display: &dyn Fn(&str) -> String) -> Vec<Table> {
    let rs = rows(reports, absent);
    let deg = |r: &ProbeReport, s| opt(r.scale(s).map(|x| x.degradation_pct), format_pct);

    let scaling = table(
        "scaling",
        "Dictionary scaling, dead latents and causal shift",
        &["Base MSE", "0.5x Deg%", "1.0x Deg%", "4.0x Deg%", "Dead% (4.0x)", "Causal Shift MAE"],
        &rs,
        display,
        |r| {
            vec![
                num(r.base_mse),
                deg(r, 0.5),
                deg(r, 1.0),
                deg(r, 4.0),
                opt(r.dead_latent_rate_4x, |v| format!("{v:.1}")),
                opt(r.causal.as_ref().map(|c| c.mean_shift), num),
            ]
        },
    );

    let fidelity = table(
        "fidelity",
        "SAE fidelity",
        &["L0 (0.5x)", "Recon MSE (0.5x)", "L0 (4.0x)", "Recon MSE (4.0x)"],
        &rs,
        display,
        |r| {
            let mut row = Vec::new();
            for s in [0.5, 4.0] {
                let x = r.scale(s);
                row.push(opt(x.map(|x| x.l0), |v| format!("{v:.1}")));
                row.push(opt(x.map(|x| x.recon_mse), num));
            }
            row
        },
    );

    let mut sweep_cols = Vec::new();
    for s in SWEEP_SCALES {
        for l in SWEEP_LAMBDAS {
            sweep_cols.push(format!("L0 {s}x l={l}"));
        }
    }
    let sweep_refs: Vec<&str> = sweep_cols.iter().map(String::as_str).collect();
    let sweep = table(
        "lambda_sweep",
        "Average L0 across sparsity penalties",
        &sweep_refs,
        &rs,
        display,
        |r| {
            let mut row = Vec::new();
            for s in SWEEP_SCALES {
                for l in SWEEP_LAMBDAS {
                    row.push(opt(r.sweep_l0(s, l), |v| format!("{v:.1}")));
                }
            }
            row
        },
    );

    let ablation = table(
        "zero_ablation",
        "FFN zero ablation",
        &["Base MSE", "Ablated MSE", "Deg%"],
        &rs,
        display,
        |r| {
            let z = r.zero_ablation.as_ref();
            vec![
                num(r.base_mse),
                opt(z.map(|z| z.ablated_mse), num),
                opt(z.map(|z| z.degradation_pct), format_pct),
            ]
        },
    );

    let baseline = table(
        "baseline",
        "Single-layer forecaster test error",
        &["MSE", "MAE"],
        &rs,
        display,
        |r| vec![num(r.base_mse), num(r.base_mae)],
    );

    vec![scaling, fidelity, sweep, ablation, baseline]
}

/// Full-precision per-cell values behind the scaling table, for exact
/// re-aggregation by external tools.
pub fn raw_scaling_csv(reports: &[ProbeReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "horizon",
        "seed",
        "base_mse",
        "deg_0.5x",
        "deg_1.0x",
        "deg_4.0x",
        "dead_pct_4x",
        "causal_shift_mae",
        "ablation_deg",
    ])
    .expect("in-memory write");
    let full = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut rs: Vec<&ProbeReport> = reports.iter().collect();
    rs.sort_by_key(|r| r.key());
    for r in rs {
        let deg = |s| full(r.scale(s).map(|x| x.degradation_pct));
        w.write_record([
            r.dataset.clone(),
            r.horizon.to_string(),
            r.seed.to_string(),
            r.base_mse.to_string(),
            deg(0.5),
            deg(1.0),
            deg(4.0),
            full(r.dead_latent_rate_4x),
            full(r.causal.as_ref().map(|c| c.mean_shift)),
            full(r.zero_ablation.as_ref().map(|z| z.degradation_pct)),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

pub fn manifest(reports: &[ProbeReport], absent: &[CellKey]) -> Manifest {
    let mut present: Vec<CellKey> = reports.iter().map(ProbeReport::key).collect();
    present.sort();
    let mut absent = absent.to_vec();
    absent.sort();
    let mut incomplete: Vec<(CellKey, Vec<String>)> = reports
        .iter()
        .map(|r| (r.key(), r.missing()))
        .filter(|(_, m)| !m.is_empty())
        .collect();
    incomplete.sort();
    Manifest {
        complete: absent.is_empty() && incomplete.is_empty(),
        present,
        absent,
        incomplete,
        aggregates: aggregate(reports),
    }
}

/// Plain-text rendering of every table plus the aggregates.
pub fn render_text(reports: &[ProbeReport], absent: &[CellKey], display: &dyn Fn(&str) -> String) -> String {
    let mut out = String::new();
    for t in tables(reports, absent, display) {
        out.push_str(&t.to_text());
        out.push('\n');
    }
    let agg = aggregate(reports);
    let _ = writeln!(
        out,
        "Mean |deg(0.5x) - deg(4.0x)|: {} over {} cells",
        opt(agg.scaling_gap_mean, |v| format!("{v:.3}")),
        agg.scaling_gap_cells
    );
    let _ = writeln!(
        out,
        "Mean causal shift MAE: {} over {} cells",
        opt(agg.causal_shift_mean, |v| format!("{v:.4}")),
        agg.causal_cells
    );
    out
}
