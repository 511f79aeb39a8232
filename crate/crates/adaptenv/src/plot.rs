//! Static SVG figures and plain data tables from completed run directories.
//!
//! Four figures mirror the standard analysis of a run set: worst-case
//! accuracy bars, the accuracy-vs-environment profile, the learned policy
//! density against the fixed-environment markers, and the loss-variance
//! evolution on a log scale. Every figure is also written as a TSV table.

use crate::error::{Error, Result};
use crate::experiment::RunSummary;
use crate::policy::PolicySummary;
use crate::special::ln_beta;
use crate::trainer::EpochRecord;
use crate::transforms::EnvDescriptor;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 52.0;

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Data loaded back from one run directory.
#[derive(Debug, Clone)]
pub struct RunDirData {
    pub summary: RunSummary,
    pub trace: Vec<EpochRecord>,
}

pub fn load_run_dir(dir: &Path) -> Result<RunDirData> {
    let summary: RunSummary = serde_json::from_str(
        &std::fs::read_to_string(dir.join("summary.json"))
            .map_err(|_| Error::config(format!("missing summary.json in {}", dir.display())))?,
    )
    .map_err(|e| Error::config(format!("summary.json parse: {e}")))?;
    let metrics = std::fs::read_to_string(dir.join("metrics.jsonl"))
        .map_err(|_| Error::config(format!("missing metrics.jsonl in {}", dir.display())))?;
    let trace = metrics
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::config(format!("metrics line: {e}"))))
        .collect::<Result<Vec<EpochRecord>>>()?;
    Ok(RunDirData { summary, trace })
}

// ---------------------------------------------------------------------------
// SVG primitives
// ---------------------------------------------------------------------------

struct Canvas {
    body: String,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    log_y: bool,
}

impl Canvas {
    fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, log_y: bool) -> Self {
        Canvas {
            body: String::new(),
            x_min,
            x_max,
            y_min,
            y_max,
            log_y,
        }
    }

    fn tx(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x_min) / (self.x_max - self.x_min) * (W - MARGIN_L - MARGIN_R)
    }

    fn ty(&self, y: f64) -> f64 {
        let (y, lo, hi) = if self.log_y {
            (y.max(1e-300).log10(), self.y_min.log10(), self.y_max.log10())
        } else {
            (y, self.y_min, self.y_max)
        };
        H - MARGIN_B - (y - lo) / (hi - lo) * (H - MARGIN_T - MARGIN_B)
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, style: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" {style}/>"#
        );
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: &str) {
        let pts: String = points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1} ", self.tx(x), self.ty(y)))
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>"#
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, color: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="{color}" fill-opacity="0.85"/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}">{s}</text>"#
        );
    }

    fn dashed_vline(&mut self, x: f64, color: &str, label: &str) {
        let sx = self.tx(x);
        self.line(
            sx,
            MARGIN_T,
            sx,
            H - MARGIN_B,
            &format!(r#"stroke="{color}" stroke-width="1.2" stroke-dasharray="6,4""#),
        );
        if !label.is_empty() {
            self.text(sx, MARGIN_T - 4.0, 10.0, "middle", label);
        }
    }

    fn axes(&mut self, title: &str, x_label: &str, y_label: &str, x_ticks: &[f64], y_ticks: &[f64]) {
        self.line(
            MARGIN_L,
            H - MARGIN_B,
            W - MARGIN_R,
            H - MARGIN_B,
            r##"stroke="#333" stroke-width="1""##,
        );
        self.line(
            MARGIN_L,
            MARGIN_T,
            MARGIN_L,
            H - MARGIN_B,
            r##"stroke="#333" stroke-width="1""##,
        );
        for &t in x_ticks {
            let x = self.tx(t);
            self.line(x, H - MARGIN_B, x, H - MARGIN_B + 4.0, r##"stroke="#333""##);
            self.text(x, H - MARGIN_B + 16.0, 10.0, "middle", &trim_num(t));
        }
        for &t in y_ticks {
            let y = self.ty(t);
            self.line(MARGIN_L - 4.0, y, MARGIN_L, y, r##"stroke="#333""##);
            let label = if self.log_y {
                format!("1e{}", t.log10().round() as i64)
            } else {
                trim_num(t)
            };
            self.text(MARGIN_L - 8.0, y + 3.0, 10.0, "end", &label);
        }
        self.text(W / 2.0, 16.0, 13.0, "middle", title);
        self.text(W / 2.0, H - 12.0, 11.0, "middle", x_label);
        let _ = writeln!(
            self.body,
            r#"<text x="16" y="{:.1}" font-size="11" font-family="sans-serif" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            y_label
        );
    }

    fn legend(&mut self, entries: &[(String, String)]) {
        let mut y = MARGIN_T + 10.0;
        for (label, color) in entries {
            let x = W - MARGIN_R - 150.0;
            self.line(x, y - 3.0, x + 18.0, y - 3.0, &format!(r#"stroke="{color}" stroke-width="3""#));
            self.text(x + 24.0, y, 10.0, "start", label);
            y += 14.0;
        }
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n{}\n</svg>\n",
            self.body
        )
    }
}

fn trim_num(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 && v.abs() < 1e6 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

fn descriptor_x(d: &EnvDescriptor) -> f64 {
    match d {
        EnvDescriptor::Correlation { e } => *e,
        EnvDescriptor::Angle { index } => crate::transforms::ANGLES_DEG[*index],
        EnvDescriptor::SpuriousCorr { p } => *p,
        EnvDescriptor::Group { id } => *id as f64,
    }
}

// ---------------------------------------------------------------------------
// Figures
// ---------------------------------------------------------------------------

/// Emit all four figures plus their data tables. Returns the files written.
pub fn plot_runs(runs: &[RunDirData], out_dir: &Path) -> Result<Vec<String>> {
    if runs.is_empty() {
        return Err(Error::config("no run directories given"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    // group runs by method, preserving first-seen order
    let mut by_method: BTreeMap<String, Vec<&RunDirData>> = BTreeMap::new();
    for r in runs {
        by_method
            .entry(r.summary.method.to_string())
            .or_default()
            .push(r);
    }

    // (a) worst-case accuracy bars, mean ± std per method
    {
        let mut canvas = Canvas::new(-0.5, by_method.len() as f64 - 0.5, 0.0, 1.0, false);
        let mut table = String::from("method\tworst_mean\tworst_std\n");
        let mut ticks = Vec::new();
        for (i, (method, group)) in by_method.iter().enumerate() {
            let vals: Vec<f64> = group.iter().map(|r| r.summary.worst_case_acc).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64)
                .sqrt();
            let x0 = canvas.tx(i as f64 - 0.3);
            let x1 = canvas.tx(i as f64 + 0.3);
            let y = canvas.ty(mean);
            let base = canvas.ty(0.0);
            canvas.rect(x0, y, x1 - x0, base - y, COLORS[i % COLORS.len()]);
            let cx = canvas.tx(i as f64);
            canvas.line(
                cx,
                canvas.ty((mean - std).max(0.0)),
                cx,
                canvas.ty((mean + std).min(1.0)),
                r##"stroke="#222" stroke-width="1.5""##,
            );
            canvas.text(cx, H - MARGIN_B + 30.0, 11.0, "middle", method);
            let _ = writeln!(table, "{method}\t{mean:.4}\t{std:.4}");
            ticks.push(i as f64);
        }
        canvas.axes(
            "Worst-case accuracy",
            "",
            "accuracy",
            &[],
            &[0.0, 0.25, 0.5, 0.75, 1.0],
        );
        write_pair(out_dir, "worst_case_bars", &canvas.finish(), &table, &mut written)?;
    }

    // (b) accuracy vs environment profile
    {
        let xs: Vec<f64> = runs[0]
            .summary
            .profile
            .descriptors
            .iter()
            .map(descriptor_x)
            .collect();
        let (x_min, x_max) = (
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        let mut canvas = Canvas::new(x_min, x_max.max(x_min + 1.0), 0.0, 1.0, false);
        let mut table = String::from("method\tenvironment\taccuracy_mean\n");
        let mut legend = Vec::new();
        for (i, (method, group)) in by_method.iter().enumerate() {
            let k = group[0].summary.profile.accuracies.len();
            let mut mean_acc = vec![0.0; k];
            for r in group {
                for (m, &a) in mean_acc.iter_mut().zip(&r.summary.profile.accuracies) {
                    *m += a / group.len() as f64;
                }
            }
            let pts: Vec<(f64, f64)> = group[0]
                .summary
                .profile
                .descriptors
                .iter()
                .map(descriptor_x)
                .zip(mean_acc.iter().cloned())
                .collect();
            canvas.polyline(&pts, COLORS[i % COLORS.len()]);
            legend.push((method.clone(), COLORS[i % COLORS.len()].to_string()));
            for (d, a) in group[0].summary.profile.descriptors.iter().zip(&mean_acc) {
                let _ = writeln!(table, "{method}\t{d}\t{a:.4}");
            }
        }
        let y_ticks = [0.0, 0.25, 0.5, 0.75, 1.0];
        canvas.axes(
            "Accuracy across environments",
            "environment",
            "accuracy",
            &xs,
            &y_ticks,
        );
        canvas.legend(&legend);
        write_pair(out_dir, "env_profile", &canvas.finish(), &table, &mut written)?;
    }

    // (c) learned policy vs fixed environments
    {
        let mut table = String::from("series\tx\tvalue\n");
        let mut canvas = Canvas::new(0.0, 1.0, 0.0, 1.0, false);
        let mut max_density = 1.0f64;
        let mut curves: Vec<(String, Vec<(f64, f64)>, &str)> = Vec::new();
        let mut bars: Vec<(String, Vec<f64>)> = Vec::new();
        for (i, (method, group)) in by_method.iter().enumerate() {
            match group[0].trace.last().map(|r| &r.policy_summary) {
                Some(PolicySummary::Beta { alpha, beta, .. }) => {
                    let pts: Vec<(f64, f64)> = (1..200)
                        .map(|j| {
                            let x = j as f64 / 200.0;
                            let logp = (alpha - 1.0) * x.ln()
                                + (beta - 1.0) * (1.0 - x).ln()
                                - ln_beta(*alpha, *beta);
                            (x, logp.exp())
                        })
                        .collect();
                    for &(x, y) in &pts {
                        max_density = max_density.max(y);
                        let _ = writeln!(table, "{method}_density\t{x:.4}\t{y:.5}");
                    }
                    curves.push((method.clone(), pts, COLORS[i % COLORS.len()]));
                }
                Some(PolicySummary::Categorical { probs, .. }) => {
                    for (j, p) in probs.iter().enumerate() {
                        let _ = writeln!(
                            table,
                            "{method}_prob\t{}\t{p:.5}",
                            crate::transforms::ANGLES_DEG[j]
                        );
                    }
                    bars.push((method.clone(), probs.clone()));
                }
                _ => {}
            }
        }
        canvas.y_max = max_density * 1.1;
        let mut legend = Vec::new();
        for (label, pts, color) in &curves {
            canvas.polyline(pts, color);
            legend.push((label.clone(), color.to_string()));
        }
        if !bars.is_empty() {
            canvas.x_max = (crate::transforms::ANGLES_DEG.len() - 1) as f64;
            canvas.y_max = 1.0;
            for (bi, (label, probs)) in bars.iter().enumerate() {
                for (j, &p) in probs.iter().enumerate() {
                    let x0 = canvas.tx(j as f64 - 0.35 + 0.3 * bi as f64);
                    let w = canvas.tx(0.3) - canvas.tx(0.0);
                    canvas.rect(
                        x0,
                        canvas.ty(p),
                        w,
                        canvas.ty(0.0) - canvas.ty(p),
                        COLORS[bi % COLORS.len()],
                    );
                }
                legend.push((label.clone(), COLORS[bi % COLORS.len()].to_string()));
            }
        }
        // dashed markers at the fixed training environments
        if bars.is_empty() {
            for &g in &[0.1, 0.2] {
                canvas.dashed_vline(g, "#1f4e9c", &format!("e={g}"));
                let _ = writeln!(table, "fixed_env\t{g}\t");
            }
        } else {
            for &a in &[0usize, 2] {
                canvas.dashed_vline(a as f64, "#1f4e9c", &format!("{}°", crate::transforms::ANGLES_DEG[a]));
                let _ = writeln!(table, "fixed_env\t{}\t", crate::transforms::ANGLES_DEG[a]);
            }
        }
        canvas.axes(
            "Learned environment policy",
            if bars.is_empty() { "γ" } else { "angle index" },
            if bars.is_empty() { "density" } else { "probability" },
            &[0.0, 0.25, 0.5, 0.75, 1.0],
            &[],
        );
        canvas.legend(&legend);
        write_pair(out_dir, "policy_density", &canvas.finish(), &table, &mut written)?;
    }

    // (d) loss-variance evolution, log scale spanning at least two decades
    {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in runs {
            for rec in &r.trace {
                if rec.risk_variance > 0.0 {
                    lo = lo.min(rec.risk_variance);
                    hi = hi.max(rec.risk_variance);
                }
            }
        }
        if !lo.is_finite() {
            lo = 1e-6;
            hi = 1e-2;
        }
        // enforce a span of at least two decades
        if hi / lo < 100.0 {
            lo = hi / 100.0;
        }
        let epochs = runs.iter().map(|r| r.trace.len()).max().unwrap_or(1);
        let mut canvas = Canvas::new(0.0, (epochs.max(2) - 1) as f64, lo * 0.8, hi * 1.2, true);
        let mut table = String::from("method\tseed\tepoch\trisk_variance\n");
        let mut legend = Vec::new();
        for (i, (method, group)) in by_method.iter().enumerate() {
            for r in group {
                let pts: Vec<(f64, f64)> = r
                    .trace
                    .iter()
                    .map(|rec| (rec.epoch as f64, rec.risk_variance.max(lo * 0.8)))
                    .collect();
                canvas.polyline(&pts, COLORS[i % COLORS.len()]);
                for rec in &r.trace {
                    let _ = writeln!(
                        table,
                        "{method}\t{}\t{}\t{:.6e}",
                        r.summary.seed, rec.epoch, rec.risk_variance
                    );
                }
            }
            legend.push((method.clone(), COLORS[i % COLORS.len()].to_string()));
        }
        let mut y_ticks = Vec::new();
        let mut d = 10f64.powf(lo.log10().floor());
        while d <= hi * 1.2 {
            if d >= lo * 0.8 {
                y_ticks.push(d);
            }
            d *= 10.0;
        }
        let x_ticks: Vec<f64> = (0..epochs).step_by((epochs / 6).max(1)).map(|e| e as f64).collect();
        canvas.axes(
            "Cross-environment loss variance",
            "epoch",
            "variance (log)",
            &x_ticks,
            &y_ticks,
        );
        canvas.legend(&legend);
        write_pair(out_dir, "loss_variance", &canvas.finish(), &table, &mut written)?;
    }

    Ok(written)
}

fn write_pair(
    out_dir: &Path,
    stem: &str,
    svg: &str,
    table: &str,
    written: &mut Vec<String>,
) -> Result<()> {
    let svg_path = out_dir.join(format!("{stem}.svg"));
    let tsv_path = out_dir.join(format!("{stem}.tsv"));
    std::fs::write(&svg_path, svg)?;
    std::fs::write(&tsv_path, table)?;
    written.push(svg_path.to_string_lossy().into_owned());
    written.push(tsv_path.to_string_lossy().into_owned());
    Ok(())
}
