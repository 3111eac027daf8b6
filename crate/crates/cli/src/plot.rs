//! Precision-recall figure writer: several report curves overlaid in one
//! self-contained SVG.

use anyhow::{Context, Result};
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

pub struct Curve {
    pub label: String,
    pub ap: f64,
    /// (recall, precision) points in curve order
    pub points: Vec<(f64, f64)>,
}

pub fn load_report_curve(path: &Path) -> Result<Curve> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read report {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let ap = v["ap"].as_f64().context("report lacks ap")?;
    let pts = v["curve"]["points"]
        .as_array()
        .context("report lacks curve.points")?
        .iter()
        .map(|p| {
            Ok((
                p["recall"].as_f64().context("point lacks recall")?,
                p["precision"].as_f64().context("point lacks precision")?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    Ok(Curve {
        label,
        ap,
        points: pts,
    })
}

fn sx(r: f64) -> f64 {
    MARGIN + r * (WIDTH - 2.0 * MARGIN)
}

fn sy(p: f64) -> f64 {
    HEIGHT - MARGIN - p * (HEIGHT - 2.0 * MARGIN)
}

/// Render the overlay; one polyline per curve, grid every 0.2.
pub fn render_pr_svg(curves: &[Curve]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // grid and axes
    for k in 0..=5 {
        let t = k as f64 / 5.0;
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            sx(t),
            sy(0.0),
            sx(t),
            sy(1.0)
        ));
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            sx(0.0),
            sy(t),
            sx(1.0),
            sy(t)
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{t:.1}</text>\n",
            sx(t),
            sy(0.0) + 18.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{t:.1}</text>\n",
            sx(0.0) - 6.0,
            sy(t) + 4.0
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(0.0)
    ));
    s.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        sx(0.0),
        sy(0.0),
        sx(0.0),
        sy(1.0)
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\">recall</text>\n",
        sx(0.5),
        HEIGHT - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">precision</text>\n",
        sy(0.5),
        sy(0.5)
    ));

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        // anchor at recall 0 with the first precision for a closed look
        if let Some(&(r0, p0)) = c.points.first() {
            pts.push_str(&format!("{:.2},{:.2} ", sx(0.0), sy(p0)));
            let _ = (r0, p0);
        }
        for &(r, p) in &c.points {
            pts.push_str(&format!("{:.2},{:.2} ", sx(r), sy(p)));
        }
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.trim_end()
        ));
        let ly = MARGIN + 18.0 * i as f64;
        s.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"14\" height=\"4\" fill=\"{color}\"/>\n",
            sx(0.62),
            ly - 4.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{} (AP {:.3})</text>\n",
            sx(0.62) + 20.0,
            ly,
            xml_escape(&c.label),
            c.ap
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
