//! Static SVG of the privacy/utility trade-off. Utility loss runs along x,
//! privacy along y; each run is an epoch-ordered polyline ending in an arrow.
//! Markers are shaded by cumulative FLOPs within the method's colour family.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::TradeoffPoint;
use crate::error::{LabError, Result};
use crate::finetune::Method;

pub const SIDECAR_HEADER: &str = "label,method,epoch,privacy,utility_loss,flops_cumulative";

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const TICKS: usize = 5;

/// Five shades per method, light to dark.
pub fn method_palette(method: Method) -> [&'static str; 5] {
    match method {
        Method::Dp => ["#fcbba1", "#fc9272", "#fb6a4a", "#de2d26", "#a50f15"],
        Method::Fft => ["#c6dbef", "#9ecae1", "#6baed6", "#3182bd", "#08519c"],
        Method::Lora => ["#c7e9c0", "#a1d99b", "#74c476", "#31a354", "#006d2c"],
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Padded `[lo, hi]` covering `values`.
fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Shade index of `flops` on a log scale over `[lo, hi]`.
fn flops_class(flops: f64, lo: f64, hi: f64) -> usize {
    if !(hi > lo) || flops <= 0.0 {
        return 4;
    }
    let t = (flops.max(lo).ln() - lo.ln()) / (hi.ln() - lo.ln());
    ((t * 5.0) as usize).min(4)
}

/// Writes the plot to `path` and the plotted values to `path` with a `.csv`
/// extension. Sidecar numbers use the same formatting as `metrics.csv`.
pub fn emit_tradeoff_plot(points: &[TradeoffPoint], path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(LabError::Config("nothing to plot".into()));
    }
    if points.iter().any(|p| !p.privacy.is_finite() || !p.utility_loss.is_finite()) {
        return Err(LabError::Config("trade-off points must be finite".into()));
    }
    let mut runs: BTreeMap<&str, Vec<&TradeoffPoint>> = BTreeMap::new();
    for p in points {
        runs.entry(&p.label).or_default().push(p);
    }
    for run in runs.values_mut() {
        run.sort_by_key(|p| p.epoch);
    }

    let (x_lo, x_hi) = axis_range(points.iter().map(|p| p.utility_loss));
    let (y_lo, y_hi) = axis_range(points.iter().map(|p| p.privacy));
    let positive = points.iter().map(|p| p.flops_cumulative).filter(|&f| f > 0.0);
    let f_lo = positive.clone().fold(f64::INFINITY, f64::min);
    let f_hi = positive.fold(0.0, f64::max);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * pw;
    let sy = |y: f64| TOP + ph - (y - y_lo) / (y_hi - y_lo) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    svg.push_str("<defs>\n");
    for method in [Method::Fft, Method::Dp, Method::Lora] {
        let _ = writeln!(
            svg,
            r#"<marker id="arrow-{m}" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="7" markerHeight="7" orient="auto-start-reverse"><path d="M0,0 L10,5 L0,10 z" fill="{c}"/></marker>"#,
            m = method,
            c = method_palette(method)[3]
        );
    }
    svg.push_str("</defs>\n");
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(svg, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);

    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let (xv, yv) = (x_lo + f * (x_hi - x_lo), y_lo + f * (y_hi - y_lo));
        let (x, y) = (sx(xv), sy(yv));
        let bottom = TOP + ph;
        let _ = writeln!(svg, r##"<line x1="{x:.2}" y1="{bottom}" x2="{x:.2}" y2="{:.2}" stroke="#444"/>"##, bottom + 5.0);
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{xv:.3}</text>"#, bottom + 20.0);
        let _ = writeln!(svg, r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#444"/>"##, LEFT - 5.0);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#, LEFT - 8.0, y + 4.0);
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">utility loss (non-sensitive test tokens, nats)</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(20 {:.2}) rotate(-90)" text-anchor="middle">privacy (sensitive training-token loss, nats)</text>"#,
        TOP + ph / 2.0
    );

    let legend_x = LEFT + pw + 20.0;
    for (row, (label, run)) in runs.iter().enumerate() {
        let method = run[0].method;
        let palette = method_palette(method);
        if run.len() > 1 {
            let coords: Vec<String> = run.iter().map(|p| format!("{:.2},{:.2}", sx(p.utility_loss), sy(p.privacy))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5" marker-end="url(#arrow-{method})"/>"#,
                coords.join(" "),
                palette[2]
            );
        }
        for p in run {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{}" stroke="{}" stroke-width="0.5"><title>{} epoch {}</title></circle>"#,
                sx(p.utility_loss),
                sy(p.privacy),
                palette[flops_class(p.flops_cumulative, f_lo, f_hi)],
                palette[4],
                escape(label),
                p.epoch
            );
        }
        let y = TOP + 10.0 + row as f64 * 20.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{legend_x}" y1="{y}" x2="{:.2}" y2="{y}" stroke="{}" stroke-width="3"/>"#,
            legend_x + 20.0,
            palette[3]
        );
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, legend_x + 26.0, y + 4.0, escape(label));
    }
    let note_y = TOP + 20.0 + runs.len() as f64 * 20.0;
    let _ = writeln!(svg, r#"<text x="{legend_x}" y="{note_y:.2}" font-size="10">darker marker = more</text>"#);
    let _ = writeln!(svg, r#"<text x="{legend_x}" y="{:.2}" font-size="10">cumulative FLOPs</text>"#, note_y + 12.0);
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| LabError::io(path, e))?;

    let mut csv = String::from(SIDECAR_HEADER);
    csv.push('\n');
    for run in runs.values() {
        for p in run {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                p.label, p.method, p.epoch, p.privacy, p.utility_loss, p.flops_cumulative
            );
        }
    }
    let sidecar = path.with_extension("csv");
    std::fs::write(&sidecar, csv).map_err(|e| LabError::io(&sidecar, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(method: Method, label: &str, epoch: usize, privacy: f64, utility_loss: f64) -> TradeoffPoint {
        TradeoffPoint {
            method,
            label: label.into(),
            epoch,
            privacy,
            utility_loss,
            flops_cumulative: epoch as f64 * 1e9,
        }
    }

    #[test]
    fn shading_classes() {
        assert_eq!(flops_class(1.0, 1.0, 1e5), 0);
        assert_eq!(flops_class(1e5, 1.0, 1e5), 4);
        assert_eq!(flops_class(1e2, 1.0, 1e5), 2);
        assert_eq!(flops_class(3.0, 3.0, 3.0), 4);
    }

    #[test]
    fn one_curve_per_run_in_epoch_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.svg");
        let points = [
            point(Method::Lora, "lora_r16_a16", 2, 2.0, 1.0),
            point(Method::Lora, "lora_r16_a16", 1, 3.0, 1.5),
            point(Method::Lora, "lora_r16_a16", 3, 1.5, 0.9),
        ];
        emit_tradeoff_plot(&points, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 3);
        let csv = std::fs::read_to_string(path.with_extension("csv")).unwrap();
        let epochs: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
        assert_eq!(epochs, ["1", "2", "3"]);
    }

    #[test]
    fn empty_input_and_bad_path() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_tradeoff_plot(&[], &dir.path().join("a.svg")).is_err());
        let points = [point(Method::Fft, "fft", 1, 1.0, 1.0)];
        let err = emit_tradeoff_plot(&points, &dir.path().join("missing").join("a.svg")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
