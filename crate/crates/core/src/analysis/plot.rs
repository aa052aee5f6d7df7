//! Minimal SVG bar charts for reports.

use std::fmt::Write as _;

use super::{SparsityReport, HISTOGRAM_BINS};

const W: f64 = 480.0;
const H: f64 = 240.0;
const PAD: f64 = 36.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// One panel of bars drawn into `out` at vertical offset `y0`.
fn panel(out: &mut String, y0: f64, title: &str, labels: &[String], values: &[f64], y_max: f64) {
    let (pw, ph) = (W - 2.0 * PAD, H - 2.0 * PAD);
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
        W / 2.0,
        y0 + 20.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{PAD:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##,
        y0 + PAD
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{y_max:.3}</text>"#,
        PAD - 4.0,
        y0 + PAD + 4.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">0</text>"#,
        PAD - 4.0,
        y0 + H - PAD
    );
    let n = values.len().max(1) as f64;
    let bw = pw / n;
    let label_every = (values.len() / 16).max(1);
    for (i, &v) in values.iter().enumerate() {
        let h = (v.max(0.0) / y_max).min(1.0) * ph;
        let x = PAD + i as f64 * bw;
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#3b6ea5"/>"##,
            x + 0.1 * bw,
            y0 + H - PAD - h,
            0.8 * bw
        );
        if i % label_every == 0 {
            if let Some(l) = labels.get(i) {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.1}" font-size="9" text-anchor="middle">{}</text>"#,
                    x + bw / 2.0,
                    y0 + H - PAD + 12.0,
                    escape(l)
                );
            }
        }
    }
}

fn document(panels: usize, body: &str) -> String {
    let h = H * panels.max(1) as f64;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{h}\" viewBox=\"0 0 {W} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64], y_max: f64) -> String {
    let mut body = String::new();
    panel(&mut body, 0.0, title, labels, values, y_max);
    document(1, &body)
}

/// Bars of per-layer sparsity on a fixed [0, 1] axis.
pub fn sparsity_svg(report: &SparsityReport) -> String {
    let labels: Vec<String> = (0..report.layer_sparsity.len())
        .map(|l| format!("L{l}"))
        .collect();
    bar_chart_svg(
        &format!("sparsity per layer (tau = {})", report.tau),
        &labels,
        &report.layer_sparsity,
        1.0,
    )
}

/// One panel per layer with the score histogram as fractions of all scores.
pub fn histogram_svg(report: &SparsityReport) -> String {
    let labels: Vec<String> = (0..HISTOGRAM_BINS)
        .map(|i| format!("{:.2}", i as f64 / HISTOGRAM_BINS as f64))
        .collect();
    let mut body = String::new();
    for (l, h) in report.histograms.iter().enumerate() {
        let total = h.iter().sum::<u64>().max(1) as f64;
        let frac: Vec<f64> = h.iter().map(|&c| c as f64 / total).collect();
        let y_max = frac.iter().copied().fold(0.0, f64::max);
        panel(
            &mut body,
            l as f64 * H,
            &format!("layer {l} expert scores"),
            &labels,
            &frac,
            y_max,
        );
    }
    document(report.histograms.len(), &body)
}
