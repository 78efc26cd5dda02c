//! Minimal SVG line charts.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_label: &str, log_y: bool) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_y,
            series: Vec::new(),
        }
    }

    /// Points that can be drawn: finite, and positive on a log axis.
    fn usable(&self, p: &(f64, f64)) -> bool {
        p.0.is_finite() && p.1.is_finite() && (!self.log_y || p.1 > 0.0)
    }

    fn ranges(&self) -> Option<((f64, f64), (f64, f64))> {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|p| self.usable(p))
            .map(|(x, y)| (x, if self.log_y { y.log10() } else { y }))
            .collect();
        if pts.is_empty() {
            return None;
        }
        let fold = |f: fn(&(f64, f64)) -> f64| {
            pts.iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let widen = |(lo, hi): (f64, f64)| {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (mut ylo, mut yhi) = widen(fold(|p| p.1));
        if self.log_y {
            ylo = ylo.floor();
            yhi = yhi.ceil().max(ylo + 1.0);
        }
        Some((widen(fold(|p| p.0)), (ylo, yhi)))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
            escape(&self.title)
        );
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let _ = writeln!(
            out,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let Some(((xlo, xhi), (ylo, yhi))) = self.ranges() else {
            let _ = writeln!(out, "</svg>");
            return out;
        };
        let sx = |x: f64| LEFT + (x - xlo) / (xhi - xlo) * pw;
        let sy = |y: f64| TOP + ph - (y - ylo) / (yhi - ylo) * ph;

        // Ticks.
        for i in 0..=5 {
            let x = xlo + (xhi - xlo) * i as f64 / 5.0;
            let px = sx(x);
            let _ = writeln!(
                out,
                r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                format_tick(x)
            );
        }
        let y_ticks: Vec<f64> = if self.log_y {
            (ylo as i64..=yhi as i64).map(|e| e as f64).collect()
        } else {
            (0..=5).map(|i| ylo + (yhi - ylo) * i as f64 / 5.0).collect()
        };
        for y in y_ticks {
            let py = sy(y);
            let label = if self.log_y {
                format!("1e{}", y as i64)
            } else {
                format_tick(y)
            };
            let _ = writeln!(
                out,
                r##"<line x1="{}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><line x1="{LEFT}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="#dddddd"/><text x="{}" y="{:.2}" text-anchor="end">{label}</text>"##,
                LEFT - 5.0,
                LEFT + pw,
                LEFT - 8.0,
                py + 4.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 15.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for (i, s) in self.series.iter().enumerate() {
            let colour = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = s
                .points
                .iter()
                .filter(|p| self.usable(p))
                .map(|&(x, y)| {
                    let y = if self.log_y { y.log10() } else { y };
                    format!("{:.2},{:.2}", sx(x), sy(y))
                })
                .collect();
            if !path.is_empty() {
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
                    path.join(" ")
                );
            }
            let ly = TOP + 14.0 + 18.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        let _ = writeln!(out, "</svg>");
        out
    }
}

fn format_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Chart of one metric from a long-format `sweep_value,round,metric,value`
/// CSV. Each sweep value becomes a series.
pub fn chart_from_long_csv(
    csv_text: &str,
    metric: &str,
    title: &str,
    y_label: &str,
    log_y: bool,
) -> crate::error::Result<LineChart> {
    let mut chart = LineChart::new(title, "communication round", y_label, log_y);
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    for rec in rdr.records() {
        let rec = rec?;
        if &rec[2] != metric {
            continue;
        }
        let name = rec[0].to_string();
        let x: f64 = rec[1].parse().unwrap_or(f64::NAN);
        let y: f64 = rec[3].parse().unwrap_or(f64::NAN);
        match chart.series.last_mut() {
            Some(s) if s.name == name => s.points.push((x, y)),
            _ => chart.series.push(Series {
                name,
                points: vec![(x, y)],
            }),
        }
    }
    Ok(chart)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_polyline_per_series() {
        let mut c = LineChart::new("t", "x", "y", true);
        c.series.push(Series {
            name: "a".into(),
            points: vec![(0.0, 1.0), (1.0, 0.1)],
        });
        c.series.push(Series {
            name: "b<".into(),
            points: vec![(0.0, 0.5), (1.0, 0.0)],
        });
        let svg = c.render();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn empty_chart_is_valid() {
        let svg = LineChart::new("t", "x", "y", false).render();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn long_csv_groups_series() {
        let text = "sweep_value,round,metric,value\n1,0,w2,1.0\n1,1,w2,0.5\n2,0,w2,2.0\n2,0,other,9\n";
        let c = chart_from_long_csv(text, "w2", "t", "W2", true).unwrap();
        assert_eq!(c.series.len(), 2);
        assert_eq!(c.series[0].points, vec![(0.0, 1.0), (1.0, 0.5)]);
        assert_eq!(c.series[1].points, vec![(0.0, 2.0)]);
    }
}
