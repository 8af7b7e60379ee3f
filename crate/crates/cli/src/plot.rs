//! Line charts of CSV columns as standalone SVG.

use std::fmt::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Numeric columns of a CSV table by header name. Empty cells become NaN.
pub fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == *n)
                .with_context(|| format!("column `{n}` not in {}", path.display()))
        })
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (c, &i) in idx.iter().enumerate() {
            let cell = rec.get(i).unwrap_or("").trim();
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse().with_context(|| format!("column `{}`: `{cell}` is not a number", names[c]))?
            };
            cols[c].push(v);
        }
    }
    Ok(cols)
}

fn extent(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per `y` series against `x`, with axis ticks and a legend.
/// Non-finite points break the line.
pub fn line_chart(title: &str, x_label: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> Result<String> {
    if series.is_empty() {
        bail!("no series to plot");
    }
    let Some((x0, x1)) = extent(x.iter().copied()) else {
        bail!("x column has no finite values");
    };
    let Some((y0, y1)) = extent(series.iter().flat_map(|s| s.1.iter().copied())) else {
        bail!("y columns have no finite values");
    };
    let px = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    )?;
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title))?;
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#)?;
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let (xp, yp) = (px(xv), py(yv));
        writeln!(s, r#"<line x1="{xp:.2}" y1="{b}" x2="{xp:.2}" y2="{:.2}" stroke="black"/>"#, b + 4.0)?;
        writeln!(s, r#"<text x="{xp:.2}" y="{:.2}" text-anchor="middle">{xv:.4}</text>"#, b + 16.0)?;
        writeln!(s, r#"<line x1="{:.2}" y1="{yp:.2}" x2="{l}" y2="{yp:.2}" stroke="black"/>"#, l - 4.0)?;
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.4}</text>"#, l - 6.0, yp + 4.0)?;
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label))?;
    for (n, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[n % COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (&xv, &yv) in x.iter().zip(ys) {
            if xv.is_finite() && yv.is_finite() {
                write!(d, "{}{:.2} {:.2} ", if pen_down { "L" } else { "M" }, px(xv), py(yv))?;
                pen_down = true;
            } else {
                pen_down = false;
            }
        }
        writeln!(s, r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#, d.trim_end())?;
        for (&xv, &yv) in x.iter().zip(ys) {
            if xv.is_finite() && yv.is_finite() {
                writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(xv), py(yv))?;
            }
        }
        let ly = t + 14.0 * n as f64;
        writeln!(s, r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, r - 110.0, r - 92.0)?;
        writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, r - 88.0, ly + 4.0, escape(name))?;
    }
    writeln!(s, "</svg>")?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_path_per_series() {
        let svg = line_chart("t", "x", &[0.0, 1.0, 2.0], &[("a", vec![1.0, 2.0, 3.0]), ("b", vec![3.0, f64::NAN, 1.0])]).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("stroke-width=\"1.5\"").count(), 2);
        // the gap splits the second line into two moves
        assert!(svg.contains("<path d=\"M56.00"));
    }

    #[test]
    fn constant_series_still_renders() {
        assert!(line_chart("t", "x", &[1.0, 1.0], &[("a", vec![2.0, 2.0])]).is_ok());
    }

    #[test]
    fn no_finite_values_is_an_error() {
        assert!(line_chart("t", "x", &[f64::NAN], &[("a", vec![1.0])]).is_err());
    }
}
