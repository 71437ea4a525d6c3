//! Self-contained SVG scatter plots and per-dimension histograms.

use std::fmt::Write as _;

use aggdiff::autodiff::Matrix;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 50.0;
const TRUE_COLOR: &str = "#1f77b4";
const PRED_COLOR: &str = "#ff7f0e";

/// A labelled point cloud.
pub struct Layer<'a> {
    pub label: &'a str,
    pub batch: &'a Matrix,
}

impl<'a> Layer<'a> {
    pub fn truth(batch: &'a Matrix) -> Self {
        Self { label: "true", batch }
    }

    pub fn predicted(batch: &'a Matrix) -> Self {
        Self { label: "predicted", batch }
    }

    fn color(&self) -> &'static str {
        if self.label == "true" {
            TRUE_COLOR
        } else {
            PRED_COLOR
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            return Self { lo: lo - 0.5, hi: hi + 0.5 };
        }
        let pad = 0.05 * (hi - lo);
        Self { lo: lo - pad, hi: hi + pad }
    }

    fn to_x(self, v: f64) -> f64 {
        MARGIN + (v - self.lo) / (self.hi - self.lo) * (SIZE - 2.0 * MARGIN)
    }

    fn to_y(self, v: f64) -> f64 {
        SIZE - MARGIN - (v - self.lo) / (self.hi - self.lo) * (SIZE - 2.0 * MARGIN)
    }
}

fn header(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, SIZE / 2.0);
}

fn axes(svg: &mut String, xr: Range, yr: Range, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (MARGIN, SIZE - MARGIN, SIZE - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = xr.lo + f * (xr.hi - xr.lo);
        let x = xr.to_x(xv);
        let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y0 + 4.0);
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{xv:.2}</text>"#, y0 + 16.0);
        let yv = yr.lo + f * (yr.hi - yr.lo);
        let y = yr.to_y(yv);
        let _ = writeln!(svg, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{yv:.2}</text>"#, x0 - 6.0, y + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, SIZE / 2.0, SIZE - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{ylabel}</text>"#,
        SIZE / 2.0
    );
}

fn legend(svg: &mut String, layers: &[Layer]) {
    for (i, layer) in layers.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let x = SIZE - MARGIN - 80.0;
        let _ = writeln!(svg, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, layer.color());
        let _ = writeln!(svg, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, layer.label);
    }
}

/// Scatter of columns `dims` (one or two). One column gives a strip plot
/// with one row per layer.
pub fn scatter(layers: &[Layer], dims: &[usize], title: &str) -> String {
    let mut svg = String::new();
    header(&mut svg, title);
    let column = |d: usize| layers.iter().flat_map(move |l| l.batch.column(d).to_vec());
    let xr = Range::of(column(dims[0]));
    if dims.len() == 2 {
        let yr = Range::of(column(dims[1]));
        axes(&mut svg, xr, yr, &format!("dim {}", dims[0]), &format!("dim {}", dims[1]));
        for layer in layers {
            for row in layer.batch.rows() {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.5"/>"#,
                    xr.to_x(row[dims[0]]),
                    yr.to_y(row[dims[1]]),
                    layer.color()
                );
            }
        }
    } else {
        let yr = Range {
            lo: -0.5,
            hi: layers.len().max(1) as f64 - 0.5,
        };
        axes(&mut svg, xr, yr, &format!("dim {}", dims[0]), "layer");
        for (i, layer) in layers.iter().enumerate() {
            for v in layer.batch.column(dims[0]) {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.5"/>"#,
                    xr.to_x(*v),
                    yr.to_y(i as f64),
                    layer.color()
                );
            }
        }
    }
    legend(&mut svg, layers);
    svg.push_str("</svg>\n");
    svg
}

/// Overlaid density histograms of column `dim` with `bins` shared bins.
pub fn histogram(layers: &[Layer], dim: usize, bins: usize, title: &str) -> String {
    let mut svg = String::new();
    header(&mut svg, title);
    let xr = Range::of(layers.iter().flat_map(|l| l.batch.column(dim).to_vec()));
    let width = (xr.hi - xr.lo) / bins as f64;
    let densities: Vec<Vec<f64>> = layers
        .iter()
        .map(|l| {
            let mut counts = vec![0.0; bins];
            for v in l.batch.column(dim) {
                let b = (((v - xr.lo) / width) as usize).min(bins - 1);
                counts[b] += 1.0;
            }
            let n = l.batch.nrows().max(1) as f64;
            counts.into_iter().map(|c| c / (n * width)).collect()
        })
        .collect();
    let top = densities.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let yr = Range {
        lo: 0.0,
        hi: if top > 0.0 { top * 1.1 } else { 1.0 },
    };
    axes(&mut svg, xr, yr, &format!("dim {dim}"), "density");
    for (layer, dens) in layers.iter().zip(&densities) {
        for (b, d) in dens.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let x = xr.to_x(xr.lo + b as f64 * width);
            let w = xr.to_x(xr.lo + (b + 1) as f64 * width) - x;
            let y = yr.to_y(*d);
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{:.2}" fill="{}" fill-opacity="0.5"/>"#,
                yr.to_y(0.0) - y,
                layer.color()
            );
        }
    }
    legend(&mut svg, layers);
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn empty_batch_gives_empty_axes() {
        let empty = Matrix::zeros((0, 2));
        let svg = scatter(&[Layer::truth(&empty)], &[0, 1], "t");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(!svg.contains("<circle"));
    }

    #[test]
    fn layers_are_labelled() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let b = array![[0.5, 0.5]];
        let svg = scatter(&[Layer::truth(&a), Layer::predicted(&b)], &[0, 1], "t");
        assert!(svg.contains(">true<") && svg.contains(">predicted<"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn histogram_is_deterministic() {
        let a = array![[0.0], [0.1], [0.9], [1.0]];
        let svg = histogram(&[Layer::truth(&a)], 0, 10, "h");
        assert!(svg.matches("<rect").count() >= 3);
        assert_eq!(svg, histogram(&[Layer::truth(&a)], 0, 10, "h"));
    }
}
