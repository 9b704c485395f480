//! Standalone SVG rendering of trace convergence curves.
//!
//! Four panels: functional suboptimality and squared distance, each against
//! iterations and against cumulative uplink bits, with a log-scale value
//! axis. No plotting dependency, just polylines.

use qgrad_core::engine::TraceRecord;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_B: f64 = 45.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_R: f64 = 15.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

struct Panel {
    title: &'static str,
    x_label: &'static str,
    x_of: fn(&TraceRecord) -> f64,
    y_of: fn(&TraceRecord) -> f64,
}

const PANELS: [Panel; 4] = [
    Panel {
        title: "f(x) - f* vs iterations",
        x_label: "iteration",
        x_of: |r| r.k as f64,
        y_of: |r| r.f_gap,
    },
    Panel {
        title: "f(x) - f* vs uplink bits",
        x_label: "cumulative uplink bits",
        x_of: |r| r.bits_up_cum as f64,
        y_of: |r| r.f_gap,
    },
    Panel {
        title: "|x - x*|^2 vs iterations",
        x_label: "iteration",
        x_of: |r| r.k as f64,
        y_of: |r| r.dist_sq,
    },
    Panel {
        title: "|x - x*|^2 vs uplink bits",
        x_label: "cumulative uplink bits",
        x_of: |r| r.bits_up_cum as f64,
        y_of: |r| r.dist_sq,
    },
];

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 {
        format!("{v:.1e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders one SVG document with all four panels and one polyline per
/// series. Points with non-positive or non-finite values are skipped (the
/// value axis is logarithmic).
pub fn render(series: &[(String, Vec<TraceRecord>)]) -> String {
    let width = 2.0 * PANEL_W + 40.0;
    let height = 2.0 * PANEL_H + 60.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"11\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (p, panel) in PANELS.iter().enumerate() {
        let ox = 20.0 + (p % 2) as f64 * PANEL_W;
        let oy = 20.0 + (p / 2) as f64 * PANEL_H;
        svg.push_str(&render_panel(panel, series, ox, oy));
    }

    // legend
    let lx = width - 230.0;
    let mut ly = 14.0;
    for (s, (label, _)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"#333\">{}</text>\n",
            lx + 24.0,
            ly + 3.5,
            xml_escape(label)
        ));
        ly += 14.0;
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_panel(panel: &Panel, series: &[(String, Vec<TraceRecord>)], ox: f64, oy: f64) -> String {
    let plot_x0 = ox + MARGIN_L;
    let plot_y0 = oy + MARGIN_T;
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;

    // gather finite positive points per series
    let points: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, records)| {
            records
                .iter()
                .map(|r| ((panel.x_of)(r), (panel.y_of)(r)))
                .filter(|(x, y)| x.is_finite() && y.is_finite() && *y > 0.0)
                .collect()
        })
        .collect();
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for pts in &points {
        for &(x, y) in pts {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    let mut out = String::new();
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" fill=\"#000\" font-size=\"13\">{}</text>\n",
        plot_x0,
        oy + 16.0,
        panel.title
    ));
    out.push_str(&format!(
        "<rect x=\"{plot_x0}\" y=\"{plot_y0}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#555\"/>\n"
    ));
    if !(x_min.is_finite() && y_min.is_finite()) || x_min == x_max {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"#999\">no plottable points</text>\n",
            plot_x0 + 20.0,
            plot_y0 + plot_h / 2.0
        ));
        return out;
    }
    let ly_min = y_min.log10().floor();
    let ly_max = y_max.log10().ceil().max(ly_min + 1.0);
    let to_px = |x: f64, y: f64| {
        let fx = (x - x_min) / (x_max - x_min);
        let fy = (y.log10() - ly_min) / (ly_max - ly_min);
        (plot_x0 + fx * plot_w, plot_y0 + (1.0 - fy) * plot_h)
    };

    // y grid at powers of ten (thinned to at most ~10 lines)
    let decades = (ly_max - ly_min) as i64;
    let step = ((decades as f64 / 8.0).ceil() as i64).max(1);
    let mut e = ly_min as i64;
    while e <= ly_max as i64 {
        let (_, py) = to_px(x_min, 10f64.powi(e as i32));
        out.push_str(&format!(
            "<line x1=\"{plot_x0}\" y1=\"{py}\" x2=\"{}\" y2=\"{py}\" stroke=\"#ddd\"/>\n",
            plot_x0 + plot_w
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"#333\">1e{e}</text>\n",
            plot_x0 - 6.0,
            py + 3.5
        ));
        e += step;
    }
    // x ticks
    for t in 0..=4 {
        let x = x_min + (x_max - x_min) * t as f64 / 4.0;
        let (px, _) = to_px(x, y_max);
        out.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"#555\"/>\n",
            plot_y0 + plot_h,
            plot_y0 + plot_h + 4.0
        ));
        out.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" fill=\"#333\">{}</text>\n",
            plot_y0 + plot_h + 16.0,
            fmt_tick(x)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#000\">{}</text>\n",
        plot_x0 + plot_w / 2.0,
        plot_y0 + plot_h + 32.0,
        panel.x_label
    ));

    for (s, pts) in points.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[s % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = to_px(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            coords.join(" ")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> Vec<(String, Vec<TraceRecord>)> {
        let records: Vec<TraceRecord> = (0..50)
            .map(|k| TraceRecord {
                k,
                f_gap: 10.0 * 0.8f64.powi(k as i32),
                dist_sq: 5.0 * 0.9f64.powi(k as i32),
                lyapunov: 1.0,
                h: 1.0,
                d: 1.0,
                grad_norm_sq: 1.0,
                bits_up_cum: 364 * k,
                bits_down_cum: 1280 * k,
                wall_ms: 0.0,
            })
            .collect();
        vec![("run_a".into(), records)]
    }

    #[test]
    fn renders_polylines_and_axes() {
        let svg = render(&series());
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("1e-"));
        assert!(svg.contains("run_a"));
    }

    #[test]
    fn empty_series_yield_placeholder() {
        let svg = render(&[("empty".into(), vec![])]);
        assert!(svg.contains("no plottable points"));
    }
}
