//! Grouped bar charts as standalone SVG documents.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// One colored series: a value (and optional error bar) per category.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<Option<f64>>,
    pub errors: Vec<Option<f64>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bars grouped by category, one color per series. Missing values leave a
/// gap. The y axis starts at zero and ends at the largest value (or 1).
pub fn grouped_bar_chart(title: &str, y_label: &str, categories: &[String], series: &[Series]) -> String {
    let top = series
        .iter()
        .flat_map(|s| s.values.iter().zip(&s.errors).map(|(v, e)| v.unwrap_or(0.0) + e.unwrap_or(0.0)))
        .fold(0.0_f64, f64::max);
    let y_max = if top > 0.0 { top * 1.05 } else { 1.0 };
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let y_of = |v: f64| MARGIN_TOP + plot_h * (1.0 - v / y_max);
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN_LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="15" y="{:.2}" transform="rotate(-90 15 {:.2})" text-anchor="middle">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );
    for (ci, cat) in categories.iter().enumerate() {
        let gx = MARGIN_LEFT + ci as f64 * group_w + group_w * 0.1;
        for (si, s) in series.iter().enumerate() {
            let Some(v) = s.values.get(ci).copied().flatten() else {
                continue;
            };
            let x = gx + si as f64 * bar_w;
            let y = y_of(v.max(0.0));
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}: {v}</title></rect>"#,
                bar_w * 0.95,
                y_of(0.0) - y,
                PALETTE[si % PALETTE.len()],
                escape(&s.name)
            );
            if let Some(e) = s.errors.get(ci).copied().flatten() {
                let cx = x + bar_w * 0.475;
                let _ = writeln!(
                    out,
                    r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                    y_of((v - e).max(0.0)),
                    y_of(v + e)
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + (ci as f64 + 0.5) * group_w,
            HEIGHT - MARGIN_BOTTOM + 18.0,
            escape(cat)
        );
    }
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN_LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        y_of(0.0),
        MARGIN_LEFT + plot_w,
        y_of(0.0)
    );
    for (si, s) in series.iter().enumerate() {
        let y = MARGIN_TOP + 18.0 * si as f64;
        let x = WIDTH - MARGIN_RIGHT + 15.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            PALETTE[si % PALETTE.len()],
            x + 18.0,
            y + 10.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_bar_per_present_value() {
        let cats = vec!["XL".to_string(), "XS".to_string()];
        let series = vec![
            Series {
                name: "erm".into(),
                values: vec![Some(0.9), Some(0.4)],
                errors: vec![Some(0.01), None],
            },
            Series {
                name: "a<b".into(),
                values: vec![Some(0.8), None],
                errors: vec![None, None],
            },
        ];
        let svg = grouped_bar_chart("t", "acc", &cats, &series);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<title>").count(), 3);
        assert!(svg.contains("a&lt;b"));
    }
}
