//! Minimal SVG line chart for FROC curves.

use std::fmt::Write as _;

use anevrix_core::evaluation::FrocCurve;

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Sensitivity against average FPs per subject, one polyline per curve,
/// starting at the origin.
pub fn froc_svg(curves: &[(&str, &FrocCurve)], fp_max: f64) -> String {
    let x_max = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.avg_fp))
        .fold(fp_max, f64::max)
        .max(1e-9);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + pw * x / x_max;
    let sy = |y: f64| TOP + ph * (1.0 - y);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let step = nice_step(x_max);
    let mut x = 0.0;
    while x <= x_max + 1e-9 {
        let px = sx(x);
        let _ = writeln!(
            s,
            r##"<line x1="{px:.2}" y1="{TOP}" x2="{px:.2}" y2="{:.2}" stroke="#e0e0e0"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 18.0,
            format!("{x:.2}").trim_end_matches('0').trim_end_matches('.')
        );
        x += step;
    }
    for k in 0..=5 {
        let y = k as f64 / 5.0;
        let py = sy(y);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{y:.1}</text>"##,
            LEFT + pw,
            LEFT - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Average false positives per subject</text>"#,
        LEFT + pw / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">Sensitivity</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts = vec![(0.0, 0.0)];
        let mut sorted: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.avg_fp, p.sensitivity)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pts.extend(sorted);
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 18.0 + 18.0 * i as f64;
        let lx = LEFT + pw - 150.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use anevrix_core::evaluation::FrocPoint;

    #[test]
    fn renders_one_polyline_per_curve() {
        let c = FrocCurve {
            points: vec![
                FrocPoint { threshold: 1.0, avg_fp: 0.0, sensitivity: 0.0, tp: 0, fp: 0 },
                FrocPoint { threshold: 0.5, avg_fp: 0.5, sensitivity: 1.0, tp: 1, fp: 1 },
            ],
            total_annotations: 1,
            subjects: 2,
        };
        let svg = froc_svg(&[("a<b", &c), ("b", &c)], 2.0);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn tick_steps_are_round() {
        assert_eq!(nice_step(5.0), 1.0);
        assert_eq!(nice_step(2.0), 0.5);
        assert_eq!(nice_step(12.0), 2.5);
    }
}
