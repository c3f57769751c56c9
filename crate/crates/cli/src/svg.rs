//! Minimal SVG emission for the ablation bar chart. Direct markup, no
//! plotting dependency.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

/// Bar chart of `values` in `[0, 1]` with one error whisker per bar.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64], errors: &[f64]) -> String {
    assert_eq!(labels.len(), values.len());
    assert_eq!(labels.len(), errors.len());
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let n = labels.len().max(1) as f64;
    let slot = plot_w / n;
    let bar_w = slot * 0.6;

    let y_of = |v: f64| MARGIN_T + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        title
    );

    // Axes and horizontal gridlines at 0.25 intervals.
    for k in 0..=4 {
        let v = k as f64 * 0.25;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_L:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            WIDTH - MARGIN_R
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"#,
            MARGIN_L - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_L:.1}" y1="{MARGIN_T:.1}" x2="{MARGIN_L:.1}" y2="{:.1}" stroke="black"/>"#,
        HEIGHT - MARGIN_B
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_L:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    );

    for (i, ((label, &v), &e)) in labels.iter().zip(values).zip(errors).enumerate() {
        let x = MARGIN_L + slot * i as f64 + (slot - bar_w) / 2.0;
        let y = y_of(v);
        let h = HEIGHT - MARGIN_B - y;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{bar_w:.1}" height="{h:.1}" fill="#4878a8"/>"##
        );
        if e > 0.0 {
            let cx = x + bar_w / 2.0;
            let (y_lo, y_hi) = (y_of(v - e), y_of(v + e));
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{y_lo:.1}" x2="{cx:.1}" y2="{y_hi:.1}" stroke="black"/>"#
            );
            for yy in [y_lo, y_hi] {
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="black"/>"#,
                    cx - 5.0,
                    cx + 5.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{label}</text>"#,
            x + bar_w / 2.0,
            HEIGHT - MARGIN_B + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.4}</text>"#,
            x + bar_w / 2.0,
            (y - 6.0).max(12.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_wellformed_and_deterministic() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let one = bar_chart("t", &labels, &[0.5, 0.75], &[0.1, 0.0]);
        let two = bar_chart("t", &labels, &[0.5, 0.75], &[0.1, 0.0]);
        assert_eq!(one, two);
        assert!(one.starts_with("<svg"));
        assert!(one.trim_end().ends_with("</svg>"));
        assert_eq!(one.matches("<rect").count(), 3); // background + 2 bars
    }
}
