//! Standalone SVG charts: grouped bars with interval whiskers and truth
//! markers, and kernel density curves. Fixed 800×500 view box.

use std::fmt::Write as _;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;
const FILLS: [&str; 4] = ["#9e9e9e", "#ffffff", "#d9d9d9", "#6f6f6f"];
const LINES: [&str; 4] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a"];

#[derive(Debug, Clone)]
pub struct Bar {
    pub series: String,
    pub mean: f64,
    /// 2.5% and 97.5% sampling quantiles (black whisker).
    pub quantiles: [f64; 2],
    /// Monte Carlo interval for the mean (blue whisker).
    pub mean_ci: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct BarGroup {
    pub label: String,
    pub bars: Vec<Bar>,
    /// Red dot.
    pub truth: Option<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="25" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

/// Rounded tick step giving roughly five intervals.
fn tick_step(span: f64) -> f64 {
    if !(span > 0.0) {
        return 1.0;
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let step = tick_step(hi - lo);
        Self { lo: (lo / step).floor() * step, hi: (hi / step).ceil() * step }
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - BOTTOM - (v - self.lo) / (self.hi - self.lo) * (HEIGHT - TOP - BOTTOM)
    }

    fn x(&self, v: f64) -> f64 {
        LEFT + (v - self.lo) / (self.hi - self.lo) * (WIDTH - LEFT - RIGHT)
    }

    fn ticks(&self) -> Vec<f64> {
        let step = tick_step(self.hi - self.lo);
        let n = ((self.hi - self.lo) / step).round() as i64;
        (0..=n).map(|i| self.lo + i as f64 * step).collect()
    }
}

fn whisker(out: &mut String, x: f64, y0: f64, y1: f64, half: f64, color: &str, width: f64) {
    let _ = writeln!(
        out,
        r#"<path d="M{x:.2} {y0:.2}V{y1:.2}M{:.2} {y0:.2}H{:.2}M{:.2} {y1:.2}H{:.2}" stroke="{color}" stroke-width="{width}" fill="none"/>"#,
        x - half,
        x + half,
        x - half,
        x + half
    );
}

fn legend(out: &mut String, names: &[String], swatch: impl Fn(usize) -> String) {
    for (i, name) in names.iter().enumerate() {
        let x = LEFT + 10.0 + i as f64 * 170.0;
        let y = HEIGHT - 22.0;
        let _ = writeln!(out, "{}", swatch(i).replace("{X}", &format!("{x:.1}")).replace("{Y}", &format!("{:.1}", y - 10.0)));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 18.0, escape(name));
    }
}

/// Grouped bar chart: bars are sampling means, black whiskers the 95%
/// sampling quantiles, blue whiskers the Monte Carlo interval of the mean,
/// red dots the true values (labelled to three decimals).
pub fn bar_chart(title: &str, groups: &[BarGroup]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 0.0;
    for g in groups {
        for b in &g.bars {
            lo = lo.min(b.quantiles[0]).min(b.mean);
            hi = hi.max(b.quantiles[1]).max(b.mean);
        }
        if let Some(t) = g.truth {
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    let axis = Axis::new(lo, hi * 1.05);
    for t in axis.ticks() {
        let y = axis.y(t);
        let _ = writeln!(out, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.1}" y2="{y:.2}" stroke="#e0e0e0"/>"##, WIDTH - RIGHT);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(t));
    }
    let zero = axis.y(0.0_f64.clamp(axis.lo, axis.hi));
    let slot = (WIDTH - LEFT - RIGHT) / groups.len().max(1) as f64;
    let mut series: Vec<String> = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let nb = g.bars.len().max(1) as f64;
        let bw = (slot * 0.7 / nb).min(60.0);
        let start = LEFT + gi as f64 * slot + (slot - bw * nb) / 2.0;
        for (bi, b) in g.bars.iter().enumerate() {
            let si = match series.iter().position(|s| *s == b.series) {
                Some(i) => i,
                None => {
                    series.push(b.series.clone());
                    series.len() - 1
                }
            };
            let x = start + bi as f64 * bw;
            let y = axis.y(b.mean);
            let (top, h) = if y < zero { (y, zero - y) } else { (zero, y - zero) };
            let _ = writeln!(
                out,
                r##"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{h:.2}" fill="{}" stroke="#333333"><title>{}: {:.3}</title></rect>"##,
                bw * 0.9,
                FILLS[si % FILLS.len()],
                escape(&b.series),
                b.mean
            );
            let cx = x + bw * 0.45;
            whisker(&mut out, cx - bw * 0.12, axis.y(b.quantiles[0]), axis.y(b.quantiles[1]), bw * 0.1, "#000000", 1.5);
            whisker(&mut out, cx + bw * 0.12, axis.y(b.mean_ci[0]), axis.y(b.mean_ci[1]), bw * 0.1, "#1f4fd8", 1.5);
        }
        if let Some(t) = g.truth {
            let cx = LEFT + (gi as f64 + 0.5) * slot;
            let y = axis.y(t);
            let _ = writeln!(
                out,
                r##"<circle cx="{cx:.2}" cy="{y:.2}" r="4.5" fill="#d62728" class="truth" data-value="{t:.3}"/>"##
            );
            let _ = writeln!(
                out,
                r##"<text x="{:.2}" y="{:.2}" fill="#d62728" font-size="11">{t:.3}</text>"##,
                cx + bw.max(20.0) * nb / 2.0 + 4.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + (gi as f64 + 0.5) * slot,
            HEIGHT - BOTTOM + 18.0,
            escape(&g.label)
        );
    }
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT}" y1="{zero:.2}" x2="{:.1}" y2="{zero:.2}" stroke="#333333"/>"##,
        WIDTH - RIGHT
    );
    legend(&mut out, &series, |i| {
        format!(r##"<rect x="{{X}}" y="{{Y}}" width="12" height="12" fill="{}" stroke="#333333"/>"##, FILLS[i % FILLS.len()])
    });
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

/// Gaussian kernel density estimate with Silverman's bandwidth.
pub fn kernel_density(values: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return vec![0.0; grid.len()];
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let bw = (1.06 * sd * n.powf(-0.2)).max(1e-9);
    let norm = 1.0 / (n * bw * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&g| values.iter().map(|&v| (-0.5 * ((g - v) / bw).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

/// Overlaid density curves, one per named series, with optional truth lines.
pub fn density_chart(title: &str, series: &[(String, Vec<f64>, Option<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, v, t) in series {
        for &x in v.iter().chain(t.iter()) {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let pad = (hi - lo).max(1e-6) * 0.1;
    let xaxis = Axis::new(lo - pad, hi + pad);
    let grid: Vec<f64> = (0..=200).map(|i| xaxis.lo + (xaxis.hi - xaxis.lo) * i as f64 / 200.0).collect();
    let curves: Vec<Vec<f64>> = series.iter().map(|(_, v, _)| kernel_density(v, &grid)).collect();
    let top = curves.iter().flatten().cloned().fold(0.0, f64::max);
    let yaxis = Axis::new(0.0, top * 1.05);
    for t in xaxis.ticks() {
        let x = xaxis.x(t);
        let _ = writeln!(out, r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.1}" stroke="#eeeeee"/>"##, HEIGHT - BOTTOM);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#, HEIGHT - BOTTOM + 16.0, fmt_tick(t));
    }
    for t in yaxis.ticks() {
        let y = yaxis.y(t);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(t));
    }
    let _ = writeln!(
        out,
        r##"<path d="M{LEFT} {TOP}V{:.1}H{:.1}" stroke="#333333" fill="none"/>"##,
        HEIGHT - BOTTOM,
        WIDTH - RIGHT
    );
    for (i, ((_, _, truth), curve)) in series.iter().zip(&curves).enumerate() {
        let color = LINES[i % LINES.len()];
        let mut d = String::new();
        for (j, (&g, &c)) in grid.iter().zip(curve).enumerate() {
            let _ = write!(d, "{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, xaxis.x(g), yaxis.y(c));
        }
        let _ = writeln!(out, r#"<path d="{d}" stroke="{color}" stroke-width="2" fill="none"/>"#);
        if let Some(t) = truth {
            let x = xaxis.x(*t);
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.1}" stroke="{color}" stroke-dasharray="5,4" class="truth" data-value="{t:.3}"/>"#,
                HEIGHT - BOTTOM
            );
        }
    }
    let names: Vec<String> = series.iter().map(|(n, _, _)| n.clone()).collect();
    legend(&mut out, &names, |i| {
        format!(r#"<rect x="{{X}}" y="{{Y}}" width="12" height="12" fill="{}"/>"#, LINES[i % LINES.len()])
    });
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_integrates_to_one() {
        let v: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let grid: Vec<f64> = (0..=2000).map(|i| -3.0 + 6.0 * i as f64 / 2000.0).collect();
        let d = kernel_density(&v, &grid);
        let area: f64 = d.iter().sum::<f64>() * 6.0 / 2000.0;
        assert!((area - 1.0).abs() < 1e-3, "{area}");
    }

    #[test]
    fn bar_chart_marks_truth() {
        let g = BarGroup {
            label: "ω₁".into(),
            bars: vec![Bar { series: "four-way".into(), mean: 0.04, quantiles: [0.02, 0.06], mean_ci: [0.039, 0.041] }],
            truth: Some(0.0412),
        };
        let svg = bar_chart("t", &[g]);
        assert!(svg.contains(r#"data-value="0.041""#));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn ticks_are_round() {
        assert_eq!(tick_step(1.0), 0.2);
        assert_eq!(tick_step(0.07), 0.01);
    }
}
