//! Dependency-free SVG line charts for loss curves and sweep results.

use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// One named series of (x, y) points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Renders series as an SVG line chart: a `<path>` per series plus a
/// `<circle>` per data point.
pub fn render_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (x_min, x_max) = bounds(all.iter().map(|p| p.0));
    let (y_min, y_max) = bounds(all.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min).max(1e-12) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| {
        HEIGHT - MARGIN - (y - y_min) / (y_max - y_min).max(1e-12) * (HEIGHT - 2.0 * MARGIN)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));
    // axes
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#333\"/>\n  \
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"#333\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    ));
    // axis extents
    for (v, x, y, anchor) in [
        (x_min, MARGIN, HEIGHT - MARGIN + 16.0, "middle"),
        (x_max, WIDTH - MARGIN, HEIGHT - MARGIN + 16.0, "middle"),
    ] {
        svg.push_str(&format!(
            "  <text x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\">{}</text>\n",
            trim_float(v)
        ));
    }
    for (v, y) in [(y_min, HEIGHT - MARGIN), (y_max, MARGIN)] {
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 6.0,
            y + 4.0,
            trim_float(v)
        ));
    }

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if !s.points.is_empty() {
            let mut d = String::new();
            for (i, &(x, y)) in s.points.iter().enumerate() {
                let cmd = if i == 0 { 'M' } else { 'L' };
                d.push_str(&format!("{cmd}{:.2} {:.2} ", sx(x), sy(y)));
            }
            svg.push_str(&format!(
                "  <path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
                d.trim_end()
            ));
            for &(x, y) in &s.points {
                svg.push_str(&format!(
                    "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.6\" fill=\"{color}\"/>\n",
                    sx(x),
                    sy(y)
                ));
            }
        }
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            WIDTH - MARGIN + 6.0,
            MARGIN + 16.0 * si as f64,
            escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, render_line_chart(title, x_label, y_label, series))?;
    Ok(())
}

/// Reads two named numeric columns from a CSV with a header row.
pub fn csv_columns(path: &Path, x_col: &str, y_col: &str) -> anyhow::Result<Vec<(f64, f64)>> {
    let raw = std::fs::read_to_string(path)?;
    let mut lines = raw.lines();
    let header: Vec<&str> =
        lines.next().ok_or_else(|| anyhow::anyhow!("empty CSV {}", path.display()))?
            .split(',')
            .map(str::trim)
            .collect();
    let xi = header
        .iter()
        .position(|&h| h == x_col)
        .ok_or_else(|| anyhow::anyhow!("column {x_col} not in {header:?}"))?;
    let yi = header
        .iter()
        .position(|&h| h == y_col)
        .ok_or_else(|| anyhow::anyhow!("column {y_col} not in {header:?}"))?;
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> anyhow::Result<f64> {
            cells
                .get(i)
                .ok_or_else(|| anyhow::anyhow!("line {}: missing column {i}", ln + 2))?
                .trim()
                .parse::<f64>()
                .map_err(|e| anyhow::anyhow!("line {}: {e}", ln + 2))
        };
        match (parse(xi), parse(yi)) {
            (Ok(x), Ok(y)) => out.push((x, y)),
            // non-numeric rows (e.g. a "mean" footer) are skipped
            _ => continue,
        }
    }
    Ok(out)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn trim_float(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
