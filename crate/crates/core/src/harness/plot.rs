use std::fmt::Write as _;

use crate::trainer::{MetricsRecord, Phase};

use super::eval::GroupStats;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub dashed: bool,
    pub points: Vec<(f64, f64)>,
    /// Half-width of a shaded band around each point.
    pub band: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub manifest: Option<String>,
}

pub fn phase_color(p: Phase) -> &'static str {
    match p {
        Phase::Cooperative => "#1f5fbf",
        Phase::SelfInterested => "#c0282d",
        Phase::Readapt => "#2a9d3c",
    }
}

/// Mean episodic per-agent return of the trained group against cumulative
/// environment steps, one coloured series per phase in log order.
pub fn training_plot(records: &[MetricsRecord], manifest: Option<String>) -> Plot {
    let mut series: Vec<Series> = Vec::new();
    let mut offset = 0.0;
    let mut last_phase: Option<Phase> = None;
    let mut last_steps = 0.0;
    for r in records {
        if last_phase != Some(r.phase) {
            offset += last_steps;
            last_phase = Some(r.phase);
            series.push(Series {
                label: r.phase.name().into(),
                color: phase_color(r.phase),
                dashed: false,
                points: Vec::new(),
                band: None,
            });
        }
        let y = match r.phase {
            Phase::SelfInterested => r.mean_return_si.unwrap_or(r.mean_return_coop),
            _ => r.mean_return_coop,
        };
        last_steps = r.env_steps as f64;
        series.last_mut().expect("pushed above").points.push((offset + last_steps, y));
    }
    Plot {
        title: "Mean episodic reward per agent".into(),
        x_label: "environment steps".into(),
        y_label: "return".into(),
        series,
        manifest,
    }
}

/// Cumulative reward against time with ±1σ bands; `dashed` marks the variant
/// without adversarial communication.
pub fn eval_series(label: &str, color: &'static str, dashed: bool, stats: &GroupStats) -> Series {
    Series {
        label: label.into(),
        color,
        dashed,
        points: stats
            .curve_mean
            .iter()
            .enumerate()
            .map(|(t, &m)| ((t + 1) as f64, m))
            .collect(),
        band: Some(stats.curve_std.clone()),
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot {
    pub fn is_empty(&self) -> bool {
        self.series.iter().all(|s| s.points.is_empty())
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for (i, &(x, y)) in s.points.iter().enumerate() {
                let h = s.band.as_ref().and_then(|v| v.get(i)).copied().unwrap_or(0.0);
                b.0 = b.0.min(x);
                b.1 = b.1.max(x);
                b.2 = b.2.min(y - h);
                b.3 = b.3.max(y + h);
            }
        }
        if b.1 <= b.0 {
            b.0 -= 1.0;
            b.1 += 1.0;
        }
        if b.3 <= b.2 {
            b.2 -= 1.0;
            b.3 += 1.0;
        }
        b
    }

    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        if let Some(m) = &self.manifest {
            let _ = writeln!(s, "<!-- manifest {} -->", esc(m));
        }
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, esc(&self.title));
        if self.is_empty() {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, W / 2.0, H / 2.0);
            s.push_str("</svg>\n");
            return s;
        }
        let (x0, x1, y0, y1) = self.bounds();
        let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
        let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
        let _ = writeln!(
            s,
            r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#,
            H - M,
            W - M
        );
        let _ = writeln!(s, r#"<text x="{M}" y="{}" >{:.3}</text>"#, H - M + 15.0, x0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, W - M, H - M + 15.0, x1);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.2}</text>"#, M - 4.0, H - M, y0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.2}</text>"#, M - 4.0, M + 4.0, y1);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, esc(&self.x_label));
        let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, H / 2.0, H / 2.0, esc(&self.y_label));
        for (k, se) in self.series.iter().enumerate() {
            if let Some(band) = &se.band {
                let upper: Vec<String> = se
                    .points
                    .iter()
                    .zip(band)
                    .map(|(&(x, y), &h)| format!("{:.2},{:.2}", px(x), py(y + h)))
                    .collect();
                let lower: Vec<String> = se
                    .points
                    .iter()
                    .zip(band)
                    .rev()
                    .map(|(&(x, y), &h)| format!("{:.2},{:.2}", px(x), py(y - h)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polygon points="{} {}" fill="{}" fill-opacity="0.15" stroke="none"/>"#,
                    upper.join(" "),
                    lower.join(" "),
                    se.color
                );
            }
            let dash = if se.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            if se.points.len() == 1 {
                let (x, y) = se.points[0];
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, px(x), py(y), se.color);
            } else {
                let pts: Vec<String> = se.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{}/>"#,
                    pts.join(" "),
                    se.color,
                    dash
                );
            }
            let ly = M + 14.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}"{}/><text x="{}" y="{}">{}</text>"#,
                W - M - 150.0,
                W - M - 125.0,
                se.color,
                dash,
                W - M - 120.0,
                ly + 4.0,
                esc(&se.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
