//! Line charts as standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Renders one polyline per series on shared axes. The y axis spans [0, 1]
/// whenever every value fits in it.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> Result<String> {
    let points = || series.iter().flat_map(|s| s.points.iter());
    if points().next().is_none() {
        return Err(Error::Argument("no data rows".into()));
    }
    if points().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Numeric("cannot plot non-finite values".into()));
    }
    let (x0, x1) = range(points().map(|p| p.0));
    let (mut y0, mut y1) = range(points().map(|p| p.1));
    if y0 >= 0.0 && y1 <= 1.0 {
        (y0, y1) = (0.0, 1.0);
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut svg = String::new();
    let w = &mut svg;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .expect("write to string");
    writeln!(
        w,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    )
    .expect("write to string");
    writeln!(
        w,
        r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    )
    .expect("write to string");
    let (bx, by) = (LEFT, TOP + ph);
    writeln!(
        w,
        r#"<line x1="{bx}" y1="{by}" x2="{}" y2="{by}" stroke="black"/>"#,
        LEFT + pw
    )
    .expect("write to string");
    writeln!(
        w,
        r#"<line x1="{bx}" y1="{TOP}" x2="{bx}" y2="{by}" stroke="black"/>"#
    )
    .expect("write to string");
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let (x, y) = (sx(xv), sy(yv));
        writeln!(
            w,
            r#"<line x1="{x:.2}" y1="{by}" x2="{x:.2}" y2="{}" stroke="black"/>"#,
            by + 5.0
        )
        .expect("write to string");
        writeln!(
            w,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            by + 18.0,
            tick_label(xv)
        )
        .expect("write to string");
        writeln!(
            w,
            r#"<line x1="{}" y1="{y:.2}" x2="{bx}" y2="{y:.2}" stroke="black"/>"#,
            bx - 5.0
        )
        .expect("write to string");
        writeln!(
            w,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            bx - 8.0,
            y + 4.0,
            tick_label(yv)
        )
        .expect("write to string");
    }
    writeln!(
        w,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    )
    .expect("write to string");
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )
        .expect("write to string");
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 15.0;
        writeln!(
            w,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        )
        .expect("write to string");
        writeln!(
            w,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&s.name)
        )
        .expect("write to string");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Plots `columns` of a headed CSV against its first column.
pub fn plot_csv_text(text: &str, columns: &[String], title: &str) -> Result<String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Argument(e.to_string()))?
        .clone();
    let idx = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::Schema(c.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let x_label = headers.get(0).unwrap_or("x").to_string();
    let mut series: Vec<Series> = columns
        .iter()
        .map(|c| Series {
            name: c.clone(),
            points: Vec::new(),
        })
        .collect();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Argument(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            let cell = rec.get(i).unwrap_or("").trim();
            cell.parse().map_err(|_| Error::Parse {
                row: row + 2,
                message: format!("`{cell}` in column `{}` is not a number", &headers[i]),
            })
        };
        let x = num(0)?;
        for (s, &i) in series.iter_mut().zip(&idx) {
            s.points.push((x, num(i)?));
        }
    }
    line_chart(title, &x_label, &series)
}

pub fn plot_csv(csv_path: &Path, columns: &[String], out_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let title = csv_path
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let svg = plot_csv_text(&text, columns, &title)?;
    std::fs::write(out_path, svg).map_err(|e| Error::io(out_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(c: &[&str]) -> Vec<String> {
        c.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn one_column_one_polyline() {
        let svg = plot_csv_text("iter,w1\n0,0.5\n1,0.7\n", &cols(&["w1"]), "t").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(r#"viewBox="0 0 800 500""#));
        assert!(svg.contains(r#"font-size="12""#));
    }

    #[test]
    fn errors() {
        let err = plot_csv_text("iter,w1\n0,0.5\n", &cols(&["wX"]), "t").unwrap_err();
        assert!(err.to_string().contains("wX"));
        let err = plot_csv_text("iter,w1\n", &cols(&["w1"]), "t").unwrap_err();
        assert!(err.to_string().contains("no data rows"));
    }

    #[test]
    fn unit_range_values_stay_in_the_plot_area() {
        let svg = plot_csv_text(
            "iter,w1,w2\n0,0.0,1.0\n5,0.25,0.75\n9,1.0,0.0\n",
            &cols(&["w1", "w2"]),
            "w",
        )
        .unwrap();
        for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
            let pts = line
                .split("points=\"")
                .nth(1)
                .unwrap()
                .trim_end_matches("\"/>");
            for p in pts.split(' ') {
                let y: f64 = p.split(',').nth(1).unwrap().parse().unwrap();
                assert!((TOP - 1e-9..=HEIGHT - BOTTOM + 1e-9).contains(&y));
            }
        }
        // The y axis is [0,1]: its top tick reads 1 and bottom reads 0.
        assert!(svg.contains(">1</text>") && svg.contains(">0</text>"));
    }
}
