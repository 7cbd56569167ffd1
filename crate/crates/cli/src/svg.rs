//! Minimal single-file SVG renderings: a heat map and a line plot.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 48.0;

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, x: (f64, f64), y: (f64, f64), xl: &str, yl: &str) {
    let _ = write!(
        out,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let text = |out: &mut String, px: f64, py: f64, anchor: &str, s: &str| {
        let _ = writeln!(
            out,
            "<text x=\"{px:.1}\" y=\"{py:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{}</text>",
            escape(s)
        );
    };
    text(out, PAD, H - PAD + 16.0, "start", &format!("{:.3}", x.0));
    text(out, W - PAD, H - PAD + 16.0, "end", &format!("{:.3}", x.1));
    text(out, W / 2.0, H - 12.0, "middle", xl);
    text(out, PAD - 4.0, H - PAD, "end", &format!("{:.3}", y.0));
    text(out, PAD - 4.0, PAD + 10.0, "end", &format!("{:.3}", y.1));
    text(out, 14.0, H / 2.0, "middle", yl);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue-white-red ramp on `[0, 1]`.
fn ramp(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    if v < 0.5 {
        let a = v * 2.0;
        ((255.0 * a) as u8, (255.0 * a) as u8, 255)
    } else {
        let a = (1.0 - v) * 2.0;
        (255, (255.0 * a) as u8, (255.0 * a) as u8)
    }
}

/// `values[j * ny + k]` at `(x_j, y_k)`, drawn with `x` horizontal.
pub fn heat_map(title: &str, values: &[f64], nx: usize, ny: usize, x: (f64, f64), y: (f64, f64)) -> String {
    let mut out = String::new();
    let (lo, hi) = values.iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(*v), b.max(*v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    header(&mut out, &format!("{title} [{lo:.4}, {hi:.4}]"));
    let cw = (W - 2.0 * PAD) / nx as f64;
    let ch = (H - 2.0 * PAD) / ny as f64;
    for j in 0..nx {
        for k in 0..ny {
            let (r, g, b) = ramp((values[j * ny + k] - lo) / span);
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#{r:02x}{g:02x}{b:02x}\"/>",
                PAD + j as f64 * cw,
                H - PAD - (k + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    axes(&mut out, x, y, "x", "x1");
    out.push_str("</svg>\n");
    out
}

/// One polyline per series.
pub fn line_plot(title: &str, series: &[Vec<(f64, f64)>], xl: &str, yl: &str) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let pts = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(a, b) in pts {
        x0 = x0.min(a);
        x1 = x1.max(a);
        y0 = y0.min(b);
        y1 = y1.max(b);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let sx = |a: f64| PAD + (a - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |b: f64| H - PAD - (b - y0) / (y1 - y0) * (H - 2.0 * PAD);
    for (i, s) in series.iter().enumerate() {
        let hue = (i * 67) % 360;
        out.push_str("<polyline fill=\"none\" stroke-width=\"1\" stroke=\"hsl(");
        let _ = write!(out, "{hue},70%,40%)\" points=\"");
        for &(a, b) in s {
            let _ = write!(out, "{:.2},{:.2} ", sx(a), sy(b));
        }
        out.push_str("\"/>\n");
    }
    axes(&mut out, (x0, x1), (y0, y1), xl, yl);
    out.push_str("</svg>\n");
    out
}
