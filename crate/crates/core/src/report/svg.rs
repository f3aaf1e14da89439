//! Hand-written SVG for scatter plots, grouped histograms and mask galleries.

use std::fmt::Write as _;
use std::io::Cursor;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::{DynamicImage, ImageFormat};
use ndarray::ArrayView2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::objstats::HistogramData;

/// Default cap on thumbnails drawn over a scatter plot.
pub const DEFAULT_THUMBNAIL_CAP: usize = 500;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Distinct fill color for series `i`.
pub fn series_color(i: usize) -> String {
    if i < PALETTE.len() {
        return PALETTE[i].to_string();
    }
    // Golden-angle hue walk past the fixed palette.
    let hue = (i as f64 * 137.507_764) % 360.0;
    format!("hsl({hue:.1},65%,45%)")
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// PNG bytes as a `data:` URI.
pub fn png_data_uri(img: &DynamicImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory");
    format!("data:image/png;base64,{}", BASE64.encode(buf.into_inner()))
}

fn open_svg(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
}

/// Indices of at most `cap` of `n` items, drawn with `seed`, ascending.
pub fn select_thumbnails(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, cap).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone)]
pub struct ScatterOptions {
    pub width: f64,
    pub height: f64,
    pub margin: f64,
    pub marker_radius: f64,
    pub thumbnail_size: f64,
    pub title: String,
}

impl Default for ScatterOptions {
    fn default() -> Self {
        Self {
            width: 800.0,
            height: 800.0,
            margin: 40.0,
            marker_radius: 4.0,
            thumbnail_size: 32.0,
            title: String::new(),
        }
    }
}

/// Maps data coordinates into the plot square; degenerate ranges map to
/// the center.
struct Projection {
    min: [f64; 2],
    span: [f64; 2],
    origin: [f64; 2],
    extent: [f64; 2],
}

impl Projection {
    fn new(coords: ArrayView2<f64>, opts: &ScatterOptions) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for row in coords.rows() {
            for d in 0..2 {
                min[d] = min[d].min(row[d]);
                max[d] = max[d].max(row[d]);
            }
        }
        let span = [max[0] - min[0], max[1] - min[1]];
        let legend_w = 140.0;
        Self {
            min,
            span,
            origin: [opts.margin, opts.margin],
            extent: [
                opts.width - 2.0 * opts.margin - legend_w,
                opts.height - 2.0 * opts.margin,
            ],
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = if self.span[0] > 0.0 { (x - self.min[0]) / self.span[0] } else { 0.5 };
        let fy = if self.span[1] > 0.0 { (y - self.min[1]) / self.span[1] } else { 0.5 };
        (
            self.origin[0] + fx * self.extent[0],
            self.origin[1] + (1.0 - fy) * self.extent[1],
        )
    }
}

fn write_legend(out: &mut String, x: f64, y: f64, labels: &[String], swatch_class: &str) {
    let _ = writeln!(out, r#"<g class="legend">"#);
    for (i, name) in labels.iter().enumerate() {
        let ly = y + i as f64 * 18.0;
        let _ = writeln!(
            out,
            r#"<rect class="{swatch_class}" x="{x}" y="{ly}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            series_color(i),
            x + 18.0,
            ly + 10.0,
            escape(name)
        );
    }
    let _ = writeln!(out, "</g>");
}

/// A raster drawn over a scatter point.
#[derive(Debug, Clone)]
pub struct Thumbnail {
    pub index: usize,
    pub image: DynamicImage,
}

/// One class-colored marker per row of `coords`, plus a class legend.
/// Thumbnails, when given, are drawn centered on their points.
pub fn render_scatter(
    coords: ArrayView2<f64>,
    labels: &[usize],
    classes: &[String],
    thumbnails: &[Thumbnail],
    opts: &ScatterOptions,
) -> String {
    let mut out = String::new();
    open_svg(&mut out, opts.width, opts.height);
    if !opts.title.is_empty() {
        let _ = writeln!(
            out,
            r#"<text class="title" x="{}" y="20" text-anchor="middle">{}</text>"#,
            opts.width / 2.0,
            escape(&opts.title)
        );
    }
    let proj = Projection::new(coords, opts);
    let _ = writeln!(
        out,
        r##"<rect class="frame" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        proj.origin[0], proj.origin[1], proj.extent[0], proj.extent[1]
    );

    let _ = writeln!(out, r#"<g class="points">"#);
    for (i, row) in coords.rows().into_iter().enumerate() {
        let (x, y) = proj.map(row[0], row[1]);
        let class = labels[i];
        let _ = writeln!(
            out,
            r#"<circle class="point" data-class="{}" cx="{x:.3}" cy="{y:.3}" r="{}" fill="{}" fill-opacity="0.8"/>"#,
            escape(&classes[class]),
            opts.marker_radius,
            series_color(class)
        );
    }
    let _ = writeln!(out, "</g>");

    if !thumbnails.is_empty() {
        let s = opts.thumbnail_size;
        let _ = writeln!(out, r#"<g class="thumbnails">"#);
        for t in thumbnails {
            let (x, y) = proj.map(coords[[t.index, 0]], coords[[t.index, 1]]);
            let (x, y) = (x - s / 2.0, y - s / 2.0);
            let _ = writeln!(
                out,
                r#"<image class="thumbnail" x="{x:.3}" y="{y:.3}" width="{s}" height="{s}" href="{}"/><rect x="{x:.3}" y="{y:.3}" width="{s}" height="{s}" fill="none" stroke="{}" stroke-width="2"/>"#,
                png_data_uri(&t.image),
                series_color(labels[t.index])
            );
        }
        let _ = writeln!(out, "</g>");
    }

    write_legend(&mut out, opts.width - opts.margin - 120.0, opts.margin, classes, "legend-swatch");
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Clone)]
pub struct HistogramOptions {
    pub width: f64,
    pub plot_height: f64,
    pub margin: f64,
    pub group_width: f64,
}

impl Default for HistogramOptions {
    fn default() -> Self {
        Self {
            width: 800.0,
            plot_height: 300.0,
            margin: 50.0,
            group_width: 60.0,
        }
    }
}

/// Top of the plot area, in pixels from the top edge.
pub const HISTOGRAM_TOP: f64 = 40.0;

/// Grouped bars of `R` per object (groups) and model (bars) for one class,
/// on a fixed `[0, 1]` y-axis. Bar height is `R * plot_height`.
pub fn render_histogram(data: &HistogramData, class: usize, opts: &HistogramOptions) -> String {
    let objects = data.objects(class);
    let n_models = data.models.len().max(1);
    let plot_w = (objects.len() as f64 * opts.group_width).max(opts.width - 2.0 * opts.margin - 140.0);
    let width = plot_w + 2.0 * opts.margin + 140.0;
    let height = HISTOGRAM_TOP + opts.plot_height + 120.0;
    let (x0, y0) = (opts.margin, HISTOGRAM_TOP);
    let baseline = y0 + opts.plot_height;

    let mut out = String::new();
    open_svg(&mut out, width, height);
    let _ = writeln!(
        out,
        r#"<text class="title" x="{}" y="20" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(data.classes.get(class).map_or("", String::as_str))
    );

    let _ = writeln!(out, r#"<g class="axes" stroke="black">"#);
    let _ = writeln!(out, r#"<line class="y-axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{baseline}"/>"#);
    let _ = writeln!(
        out,
        r#"<line class="x-axis" x1="{x0}" y1="{baseline}" x2="{}" y2="{baseline}"/>"#,
        x0 + plot_w
    );
    let _ = writeln!(out, "</g>");
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = baseline - v * opts.plot_height;
        let _ = writeln!(
            out,
            r#"<line class="tick" x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0
        );
    }

    let bar_w = opts.group_width * 0.8 / n_models as f64;
    let _ = writeln!(out, r#"<g class="bars">"#);
    for (g, (object, name)) in objects.iter().enumerate() {
        let gx = x0 + g as f64 * opts.group_width + opts.group_width * 0.1;
        for (m, model) in data.models.iter().enumerate() {
            let Some(r) = data.ratio(class, *object, model) else {
                continue;
            };
            let h = r * opts.plot_height;
            let _ = writeln!(
                out,
                r#"<rect class="bar" data-object="{}" data-model="{}" data-r="{r}" x="{:.3}" y="{:.3}" width="{bar_w:.3}" height="{h:.3}" fill="{}"/>"#,
                escape(name),
                escape(model),
                gx + m as f64 * bar_w,
                baseline - h,
                series_color(m)
            );
        }
        let lx = gx + opts.group_width * 0.4;
        let ly = baseline + 12.0;
        let _ = writeln!(
            out,
            r#"<text class="object-label" x="{lx:.3}" y="{ly}" transform="rotate(45 {lx:.3} {ly})">{}</text>"#,
            escape(name)
        );
    }
    let _ = writeln!(out, "</g>");

    write_legend(&mut out, x0 + plot_w + 20.0, y0, &data.models, "legend-swatch");
    out.push_str("</svg>\n");
    out
}

/// One gallery row: an optional source image followed by one raster per
/// model.
#[derive(Debug, Clone)]
pub struct GalleryRow {
    pub id: String,
    pub image: Option<DynamicImage>,
    pub masks: Vec<DynamicImage>,
}

/// Grid of weighted masks: rows are images, columns are models.
pub fn render_gallery(rows: &[GalleryRow], models: &[String], cell: f64) -> String {
    let label_w = 120.0;
    let cols = models.len() + 1;
    let width = label_w + cols as f64 * (cell + 8.0) + 8.0;
    let height = 30.0 + rows.len() as f64 * (cell + 8.0) + 8.0;
    let mut out = String::new();
    open_svg(&mut out, width, height);

    let header = std::iter::once("image").chain(models.iter().map(String::as_str));
    for (c, name) in header.enumerate() {
        let _ = writeln!(
            out,
            r#"<text class="column-label" x="{}" y="20" text-anchor="middle">{}</text>"#,
            label_w + c as f64 * (cell + 8.0) + cell / 2.0,
            escape(name)
        );
    }
    for (r, row) in rows.iter().enumerate() {
        let y = 30.0 + r as f64 * (cell + 8.0);
        let _ = writeln!(
            out,
            r#"<text class="row-label" x="4" y="{}">{}</text>"#,
            y + cell / 2.0,
            escape(&row.id)
        );
        let cells = std::iter::once(row.image.as_ref()).chain(row.masks.iter().map(Some));
        for (c, img) in cells.enumerate() {
            let x = label_w + c as f64 * (cell + 8.0);
            match img {
                Some(img) => {
                    let _ = writeln!(
                        out,
                        r#"<image class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" href="{}"/>"#,
                        png_data_uri(img)
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        r##"<rect class="cell-empty" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#eee"/>"##
                    );
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
