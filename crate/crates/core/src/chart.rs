//! Static SVG charts: the training loss curve and mean loops per layer.

use std::fmt::Write;

use crate::train::StepMetrics;

const W: f64 = 640.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, y0: f64, title: &str, lo: f64, hi: f64) {
    let _ = writeln!(
        out,
        r#"<text x="{PAD}" y="{:.1}" font-size="14">{}</text>"#,
        y0 + 20.0,
        esc(title)
    );
    let (top, bottom) = (y0 + PAD, y0 + H - PAD / 2.0);
    let _ = writeln!(
        out,
        r#"<polyline points="{PAD},{top:.1} {PAD},{bottom:.1} {:.1},{bottom:.1}" fill="none" stroke="black"/>"#,
        W - PAD / 2.0
    );
    for (v, y) in [(hi, top), (lo, bottom)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.3}</text>"#,
            PAD - 4.0,
            y + 3.0
        );
    }
}

/// Loss against step, plus bars of `loops` (one per layer) when given.
pub fn render_svg(metrics: &[StepMetrics], loops: Option<&[f64]>) -> String {
    let panels = 1 + loops.is_some() as usize;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="sans-serif">"#,
        H * panels as f64
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);

    let losses: Vec<f64> = metrics.iter().map(|m| m.loss).filter(|l| l.is_finite()).collect();
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi.max(lo + 1e-9)) } else { (0.0, 1.0) };
    axes(&mut out, 0.0, "training loss", lo, hi);
    let last = metrics.last().map_or(1, |m| m.step.max(1)) as f64;
    let (x_span, y_span) = (W - 1.5 * PAD, H - 1.5 * PAD);
    let points: Vec<String> = metrics
        .iter()
        .filter(|m| m.loss.is_finite())
        .map(|m| {
            let x = PAD + x_span * m.step as f64 / last;
            let y = PAD + y_span * (hi - m.loss) / (hi - lo);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        points.join(" ")
    );

    if let Some(loops) = loops {
        let y0 = H;
        let top = loops.iter().copied().fold(1.0, f64::max).ceil();
        axes(&mut out, y0, "mean loops per layer", 0.0, top);
        let slot = x_span / loops.len().max(1) as f64;
        for (i, &l) in loops.iter().enumerate() {
            let h = y_span * l / top;
            let x = PAD + slot * (i as f64 + 0.15);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="indianred"/>"#,
                y0 + H - PAD / 2.0 - h,
                slot * 0.7
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">L{} {l:.2}</text>"#,
                x + slot * 0.35,
                y0 + H - PAD / 2.0 + 14.0,
                i + 1
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
