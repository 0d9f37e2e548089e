//! Minimal SVG rendering of the diagnostic curves. The CSV files are the
//! data of record; these plots are for a quick look.

use std::fmt::Write as _;
use std::path::Path;

use sphere_distill::energy::KdePlane;
use sphere_distill::eval::LayerEnergy;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn frame(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn finite_max(v: impl Iterator<Item = f64>) -> f64 {
    v.filter(|x| x.is_finite()).fold(0.0, f64::max)
}

/// Density against angle, as a line over `[0, 2pi)`.
pub fn circle_plot(path: &Path, theta: &[f64], density: &[f64]) -> std::io::Result<()> {
    let mut s = frame("vMF KDE of angles");
    let top = finite_max(density.iter().copied()).max(1e-12);
    let x0 = theta.first().copied().unwrap_or(0.0);
    let span = (theta.last().copied().unwrap_or(1.0) - x0).max(1e-12);
    let pts: Vec<String> = theta
        .iter()
        .zip(density)
        .map(|(t, d)| {
            let x = PAD + (t - x0) / span * (W - 2.0 * PAD);
            let y = H - PAD - d / top * (H - 2.0 * PAD);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        s,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1.5\" points=\"{}\"/>",
        pts.join(" ")
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">theta (rad)</text>",
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{}\">max {top:.3}</text>",
        PAD - 4.0
    );
    s.push_str("</svg>\n");
    std::fs::write(path, s)
}

/// Grey-scale heat map of a planar density.
pub fn heat_map(path: &Path, plane: &KdePlane) -> std::io::Result<()> {
    let mut s = frame("Gaussian KDE of projected features");
    let (nx, ny) = (plane.xs.len(), plane.ys.len());
    let side = (H - 2.0 * PAD).min(W - 2.0 * PAD);
    let x_off = (W - side) / 2.0;
    let (cw, ch) = (side / nx as f64, side / ny as f64);
    let top = finite_max(plane.density.iter().copied()).max(1e-12);
    for iy in 0..ny {
        for ix in 0..nx {
            let v = (plane.at(ix, iy) / top).clamp(0.0, 1.0);
            let g = (255.0 * (1.0 - v)).round() as u8;
            // rows run bottom to top so y grows upwards
            let y = PAD + (ny - 1 - iy) as f64 * ch;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({g},{g},{g})\"/>",
                x_off + ix as f64 * cw,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)
}

/// Horizontal bars of per-layer energies; missing values are skipped.
pub fn layer_bars(
    path: &Path,
    neuron: &[LayerEnergy],
    repr: &[LayerEnergy],
) -> std::io::Result<()> {
    let rows: Vec<(String, f64)> = neuron
        .iter()
        .map(|l| (format!("w {}", l.layer), l.energy))
        .chain(repr.iter().map(|l| (format!("h {}", l.layer), l.energy)))
        .filter_map(|(n, e)| e.filter(|v| v.is_finite()).map(|v| (n, v)))
        .collect();
    let height = (PAD * 2.0 + rows.len() as f64 * 16.0).max(H);
    let mut s = frame("layer energies").replacen(
        &format!("height=\"{H}\""),
        &format!("height=\"{height}\""),
        1,
    );
    s = s.replacen(&format!("0 0 {W} {H}"), &format!("0 0 {W} {height}"), 1);
    let top = finite_max(rows.iter().map(|r| r.1.abs())).max(1e-12);
    let label_w = 150.0;
    for (i, (name, v)) in rows.iter().enumerate() {
        let y = PAD + i as f64 * 16.0;
        let len = v.abs() / top * (W - PAD - label_w);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            label_w - 4.0,
            y + 11.0,
            escape(name)
        );
        let _ = writeln!(
            s,
            "<rect x=\"{label_w}\" y=\"{y:.1}\" width=\"{len:.2}\" height=\"12\" fill=\"#1f5fa8\"/><title>{v}</title>"
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)
}
