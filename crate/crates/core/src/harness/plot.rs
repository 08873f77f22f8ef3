//! Standalone SVG sensitivity plots: error against a log-scaled
//! hyperparameter axis, with the erm mean as a dashed reference.

use std::fmt::Write as _;

use super::report::{Stats, SweepTable};
use crate::optim::Method;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 44.0;

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: &[f64], log: bool) -> Axis {
        let vals: Vec<f64> = values
            .iter()
            .copied()
            .filter(|v| v.is_finite() && (!log || *v > 0.0))
            .collect();
        let (mut lo, mut hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = if log { (0.1, 1.0) } else { (0.0, 1.0) };
        }
        if log {
            lo = 10f64.powf(lo.log10().floor());
            hi = 10f64.powf(hi.log10().ceil());
            if hi <= lo {
                hi = lo * 10.0;
            }
        } else {
            let pad = if hi > lo { 0.1 * (hi - lo) } else { 0.5 * lo.abs().max(1e-3) };
            lo = (lo - pad).max(0.0);
            hi += pad;
        }
        Axis { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        if self.log {
            (v.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.log10().round() as i32, self.hi.log10().round() as i32);
            let mut t: Vec<f64> = (a..=b).map(|e| 10f64.powi(e)).collect();
            if b - a <= 1 {
                for e in a..b {
                    for m in [2.0, 5.0] {
                        t.push(m * 10f64.powi(e));
                    }
                }
                t.sort_by(f64::total_cmp);
            }
            t
        } else {
            (0..=4).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0).collect()
        }
    }
}

fn label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if (1e-2..1e3).contains(&v.abs()) {
        format!("{}", (v * 1e4).round() / 1e4)
    } else {
        format!("{v:.0e}")
    }
}

fn panel(out: &mut String, x0: f64, title: &str, xs: &[f64], ys: &[&Stats], reference: Option<&Stats>, xlabel: &str) {
    let px = |a: &Axis, v: f64| x0 + MARGIN_L + a.frac(v) * (PANEL_W - MARGIN_L - MARGIN_R);
    let py = |a: &Axis, v: f64| MARGIN_T + (1.0 - a.frac(v)) * (PANEL_H - MARGIN_T - MARGIN_B);
    let xa = Axis::new(xs, true);
    let mut yv: Vec<f64> = Vec::new();
    for s in ys.iter().copied().chain(reference) {
        if let (Some(m), Some(sd)) = (s.mean, s.sd) {
            yv.extend([m, m + sd, m - sd]);
        }
    }
    let ya = Axis::new(&yv, true);
    let (left, right) = (x0 + MARGIN_L, x0 + PANEL_W - MARGIN_R);
    let (top, bottom) = (MARGIN_T, PANEL_H - MARGIN_B);
    let _ = writeln!(
        out,
        r#"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        right - left,
        bottom - top
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{title}</text>"#,
        (left + right) / 2.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{xlabel} (log scale)</text>"#,
        (left + right) / 2.0,
        PANEL_H - 8.0
    );
    for t in xa.ticks() {
        let x = px(&xa, t);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            bottom + 4.0,
            bottom + 16.0,
            label(t)
        );
    }
    for t in ya.ticks() {
        let y = py(&ya, t);
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{left:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
            left - 4.0,
            left - 6.0,
            y + 3.0,
            label(t)
        );
    }
    if let Some(m) = reference.and_then(|r| r.mean).filter(|m| *m > 0.0) {
        let y = py(&ya, m);
        let _ = writeln!(
            out,
            r#"<line class="erm-reference" x1="{left:.2}" y1="{y:.2}" x2="{right:.2}" y2="{y:.2}" stroke="gray" stroke-dasharray="6,4"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10" fill="gray">erm</text>"#,
            right - 4.0,
            y - 4.0
        );
    }
    let mut pts = Vec::new();
    for (x, s) in xs.iter().zip(ys) {
        let (Some(m), Some(sd)) = (s.mean, s.sd) else { continue };
        if m <= 0.0 {
            continue;
        }
        let (cx, cy) = (px(&xa, *x), py(&ya, m));
        let lo = (m - sd).max(ya.lo);
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="steelblue"/><circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="steelblue"/>"#,
            py(&ya, m + sd),
            py(&ya, lo)
        );
        pts.push(format!("{cx:.2},{cy:.2}"));
    }
    if pts.len() > 1 {
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="steelblue"/>"#,
            pts.join(" ")
        );
    }
}

/// Two panels (θ-error, y-error) for `method` from a sweep table.
pub fn sensitivity_svg(table: &SweepTable, method: Method) -> String {
    let rows: Vec<_> = table.rows.iter().filter(|r| r.method == method).collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.hyper).collect();
    let th: Vec<&Stats> = rows.iter().map(|r| &r.theta_rmse).collect();
    let y: Vec<&Stats> = rows.iter().map(|r| &r.test_y_rmse).collect();
    let xlabel = method.hyper_name().unwrap_or("hyperparameter");
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}" font-family="sans-serif">"#,
        2.0 * PANEL_W,
        PANEL_H,
        2.0 * PANEL_W,
        PANEL_H
    );
    let _ = writeln!(out, "<title>{} {method}: sensitivity to {xlabel}</title>", table.task);
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    panel(
        &mut out,
        0.0,
        &format!("{} {method}: θ-error", table.task),
        &xs,
        &th,
        table.erm_theta_rmse.as_ref(),
        xlabel,
    );
    panel(
        &mut out,
        PANEL_W,
        &format!("{} {method}: y-error", table.task),
        &xs,
        &y,
        table.erm_test_y_rmse.as_ref(),
        xlabel,
    );
    out.push_str("</svg>\n");
    out
}
