//! `plot`: render a CSV log as an SVG line chart.

use std::path::{Path, PathBuf};

use crate::plot::{csv_columns, write_chart, Series};

pub fn run(
    input: &Path,
    output: &Path,
    x_col: Option<&str>,
    y_col: Option<&str>,
) -> anyhow::Result<Vec<PathBuf>> {
    if !input.exists() {
        anyhow::bail!("missing input CSV {} — run the producing stage first", input.display());
    }
    let raw = std::fs::read_to_string(input)?;
    let header: Vec<String> = raw
        .lines()
        .next()
        .ok_or_else(|| anyhow::anyhow!("empty CSV {}", input.display()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 2 {
        anyhow::bail!("CSV {} needs at least two columns", input.display());
    }
    let x = x_col.unwrap_or(&header[0]);
    let y = y_col.unwrap_or(&header[1]);
    let points = csv_columns(input, x, y)?;
    if points.is_empty() {
        anyhow::bail!("no numeric rows for columns {x},{y} in {}", input.display());
    }
    write_chart(
        output,
        &format!("{y} vs {x}"),
        x,
        y,
        &[Series { label: y.to_string(), points }],
    )?;
    log::info!("plotted {} -> {}", input.display(), output.display());
    Ok(vec![output.to_path_buf()])
}
