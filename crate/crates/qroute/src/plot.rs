//! Minimal SVG learning curves from metrics rows.

use std::fmt::Write as _;

use crate::metrics::MetricsRow;
use crate::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// Mean cost and baseline cost against epoch. Runs with fewer than two
/// epochs are drawn per batch instead.
pub fn learning_curve_svg(rows: &[MetricsRow]) -> Result<String> {
    let epochs: Vec<&MetricsRow> = rows.iter().filter(|r| r.batch < 0).collect();
    let (points, x_label): (Vec<&MetricsRow>, &str) = if epochs.len() >= 2 {
        (epochs, "epoch")
    } else {
        (rows.iter().filter(|r| r.batch >= 0).collect(), "batch")
    };
    if points.is_empty() {
        return Err(Error::Usage("no metrics rows to plot".into()));
    }
    let xs: Vec<f64> = (1..=points.len()).map(|i| i as f64).collect();
    let series = [
        ("mean cost", "#1f77b4", points.iter().map(|r| r.mean_cost).collect::<Vec<_>>()),
        ("baseline cost", "#d62728", points.iter().map(|r| r.baseline_mean_cost).collect()),
    ];
    let all = series.iter().flat_map(|s| s.2.iter().copied());
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x_max = xs.len().max(2) as f64;
    let sx = |x: f64| MARGIN + (x - 1.0) / (x_max - 1.0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - lo) / (hi - lo) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for (y, v) in [(sy(lo), lo), (sy(hi), hi)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{v:.3}</text>"#,
            MARGIN - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" font-size="12" text-anchor="middle">{x_label} (1..{})</text>"#,
        W / 2.0,
        H - MARGIN / 3.0,
        xs.len()
    );
    for (k, (name, colour, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN / 2.0 + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-size="12" fill="{colour}">{name}</text>"#,
            W - MARGIN - 100.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
