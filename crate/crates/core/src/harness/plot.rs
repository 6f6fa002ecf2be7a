//! Minimal deterministic SVG line and scatter plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::metrics::read_roc_csv;
use crate::training::TrainHistory;
use crate::tsne::read_layout_csv;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
pub const CGI_COLOR: &str = "#d62728";
pub const REAL_COLOR: &str = "#1f77b4";

pub struct Series<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(f64::MIN_POSITIVE);
        MARGIN + (x - self.x.0) / span * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(f64::MIN_POSITIVE);
        H - MARGIN - (y - self.y.0) / span * (H - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, frame: &Frame, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.1} {y1:.1} L{x0:.1} {y0:.1} L{x1:.1} {y0:.1}" fill="none" stroke="black"/>"#
    );
    for (v, anchor_x) in [(frame.x.0, x0), (frame.x.1, x1)] {
        let _ = writeln!(
            out,
            r#"<text x="{anchor_x:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
            y0 + 14.0,
            tick(v)
        );
    }
    for (v, anchor_y) in [(frame.y.0, y0), (frame.y.1, y1)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#,
            x0 - 4.0,
            anchor_y + 3.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart. `x_range`/`y_range` fix the axes; otherwise they fit the data.
pub fn line_chart(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[Series<'_>],
    x_range: Option<(f64, f64)>,
    y_range: Option<(f64, f64)>,
) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter().copied());
    let frame = Frame {
        x: x_range.unwrap_or_else(|| bounds(all().map(|p| p.0))),
        y: y_range.unwrap_or_else(|| bounds(all().map(|p| p.1))),
    };
    let mut out = String::new();
    header(&mut out, title, &frame, xlabel, ylabel);
    for (k, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
            pts.join(" "),
            s.color
        );
        let ly = MARGIN + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" text-anchor="end" font-family="sans-serif" font-size="11" fill="{}">{}</text>"#,
            W - MARGIN - 4.0,
            s.color,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter of a 2-D layout, red for CGI and blue for authentic.
pub fn scatter(title: &str, points: &[[f64; 2]], labels: &[Label]) -> String {
    let frame = Frame {
        x: bounds(points.iter().map(|p| p[0])),
        y: bounds(points.iter().map(|p| p[1])),
    };
    let mut out = String::new();
    header(&mut out, title, &frame, "t-SNE 1", "t-SNE 2");
    for (p, l) in points.iter().zip(labels) {
        let color = if l.is_positive() { CGI_COLOR } else { REAL_COLOR };
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" fill-opacity="0.8"/>"#,
            frame.px(p[0]),
            frame.py(p[1])
        );
    }
    for (k, (name, color)) in [("CGI", CGI_COLOR), ("authentic", REAL_COLOR)].iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11" fill="{color}">{name}</text>"#,
            W - MARGIN - 4.0,
            MARGIN + 14.0 * k as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingFile(path))
    }
}

/// Writes accuracy, loss and ROC charts for a run directory (plus a t-SNE
/// scatter when `tsne.csv` exists, and one ROC chart per extra
/// `roc_<name>.csv`). Output depends only on the CSV contents.
pub fn emit_plots(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let history = TrainHistory::load_csv(require(dir.join("history.csv"))?)?;
    let epochs = |f: fn(&crate::training::EpochRecord) -> f64| -> Vec<(f64, f64)> {
        history.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect()
    };
    let x_range = Some((1.0, history.epochs.len().max(2) as f64));
    let mut written = Vec::new();
    let mut put = |name: String, svg: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, svg)?;
        written.push(p);
        Ok(())
    };
    put(
        "accuracy.svg".into(),
        line_chart(
            "Accuracy",
            "epoch",
            "accuracy",
            &[
                Series { name: "train", color: REAL_COLOR, points: epochs(|e| e.train_acc), dashed: false },
                Series { name: "validation", color: CGI_COLOR, points: epochs(|e| e.val_acc), dashed: false },
            ],
            x_range,
            Some((0.0, 1.0)),
        ),
    )?;
    put(
        "loss.svg".into(),
        line_chart(
            "Loss",
            "epoch",
            "cross-entropy",
            &[
                Series { name: "train", color: REAL_COLOR, points: epochs(|e| e.train_loss), dashed: false },
                Series { name: "validation", color: CGI_COLOR, points: epochs(|e| e.val_loss), dashed: false },
            ],
            x_range,
            None,
        ),
    )?;
    let mut rocs: Vec<(String, PathBuf)> = vec![("roc".into(), require(dir.join("roc.csv"))?)];
    let mut extra: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("roc_") && n.ends_with(".csv"))
        })
        .collect();
    extra.sort();
    for p in extra {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("roc").to_string();
        rocs.push((stem, p));
    }
    for (stem, path) in rocs {
        let pts = read_roc_csv(&path)?;
        let title = if stem == "roc" { "ROC".to_string() } else { format!("ROC ({})", &stem[4..]) };
        put(
            format!("{stem}.svg"),
            line_chart(
                &title,
                "false positive rate",
                "true positive rate",
                &[
                    Series {
                        name: "classifier",
                        color: REAL_COLOR,
                        points: pts.iter().map(|p| (p.fpr, p.tpr)).collect(),
                        dashed: false,
                    },
                    Series { name: "chance", color: "#7f7f7f", points: vec![(0.0, 0.0), (1.0, 1.0)], dashed: true },
                ],
                Some((0.0, 1.0)),
                Some((0.0, 1.0)),
            ),
        )?;
    }
    let tsne = dir.join("tsne.csv");
    if tsne.exists() {
        let (pts, labels, _) = read_layout_csv(&tsne)?;
        let title = match std::fs::read_to_string(dir.join("tsne_config.json")) {
            Ok(text) => {
                let c: crate::tsne::TsneConfig = serde_json::from_str(&text)?;
                format!(
                    "t-SNE (perplexity {}, {} iterations, seed {})",
                    c.perplexity, c.iterations, c.seed
                )
            }
            Err(_) => "t-SNE".to_string(),
        };
        put("tsne.svg".into(), scatter(&title, &pts, &labels))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyline_has_one_coordinate_pair_per_point() {
        let s = line_chart(
            "t",
            "x",
            "y",
            &[Series { name: "a", color: "red", points: (0..20).map(|i| (i as f64, 0.5)).collect(), dashed: false }],
            None,
            Some((0.0, 1.0)),
        );
        let line = s.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts = line.split('"').nth(1).unwrap();
        assert_eq!(pts.split(' ').count(), 20);
    }

    #[test]
    fn corner_maps_to_top_left_of_plot_area() {
        let f = Frame { x: (0.0, 1.0), y: (0.0, 1.0) };
        assert_eq!((f.px(0.0), f.py(1.0)), (MARGIN, MARGIN));
    }
}
