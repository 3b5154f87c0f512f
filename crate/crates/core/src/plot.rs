//! Standalone SVG figures from result CSVs.
//!
//! Output depends only on the input rows and the spec: coordinates are
//! printed with fixed precision and series are ordered by key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise;
use crate::results::EVAL_METRIC;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    LossVsIteration,
    FinalLossVsBatchSize,
    Qq,
    Histogram,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub plot: PlotKind,
    pub input: PathBuf,
    /// File name or path of the SVG; relative paths land under `--out`.
    pub output: PathBuf,
    /// Columns whose values name a series. Defaults depend on the kind.
    #[serde(default)]
    pub group_by: Option<Vec<String>>,
    /// Keep rows whose column equals the given text.
    #[serde(default)]
    pub filter: BTreeMap<String, String>,
    #[serde(default)]
    pub x_scale: Option<Scale>,
    #[serde(default)]
    pub y_scale: Option<Scale>,
    #[serde(default)]
    pub title: Option<String>,
    /// QQ reference Gaussian; fitted to the data when absent.
    #[serde(default)]
    pub reference: Option<Reference>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub mu: f64,
    pub sigma: f64,
}

impl PlotSpec {
    pub fn new(plot: PlotKind, input: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            plot,
            input: input.into(),
            output: output.into(),
            group_by: None,
            filter: BTreeMap::new(),
            x_scale: None,
            y_scale: None,
            title: None,
            reference: None,
        }
    }

    fn groups(&self) -> Vec<String> {
        if let Some(g) = &self.group_by {
            return g.clone();
        }
        let cols: &[&str] = match self.plot {
            PlotKind::LossVsIteration => &["optimizer", "batch_label", "seed"],
            PlotKind::FinalLossVsBatchSize => &["optimizer"],
            PlotKind::Qq | PlotKind::Histogram => &[],
        };
        cols.iter().map(|s| s.to_string()).collect()
    }

    fn scales(&self) -> (Scale, Scale) {
        let (x, y) = match self.plot {
            PlotKind::LossVsIteration => (Scale::Linear, Scale::Log),
            PlotKind::FinalLossVsBatchSize => (Scale::Log, Scale::Log),
            PlotKind::Qq | PlotKind::Histogram => (Scale::Linear, Scale::Linear),
        };
        (self.x_scale.unwrap_or(x), self.y_scale.unwrap_or(y))
    }
}

/// A CSV held as text cells.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::schema(name, "column not present in the input CSV"))
    }

    fn number(&self, row: &[String], col: usize) -> Option<f64> {
        row[col].parse().ok()
    }
}

pub fn emit_plot(spec: &PlotSpec, out_dir: &Path) -> Result<PathBuf> {
    let svg = render_plot(spec)?;
    let path = if spec.output.is_absolute() { spec.output.clone() } else { out_dir.join(&spec.output) };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, svg)?;
    Ok(path)
}

pub fn render_plot(spec: &PlotSpec) -> Result<String> {
    let table = Table::read(&spec.input)?;
    let groups = spec.groups();
    let group_cols = groups.iter().map(|g| table.col(g)).collect::<Result<Vec<_>>>()?;
    let filters = spec
        .filter
        .iter()
        .map(|(k, v)| Ok((table.col(k)?, v.as_str())))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<&Vec<String>> =
        table.rows.iter().filter(|r| filters.iter().all(|(c, v)| r[*c] == *v)).collect();
    if rows.is_empty() {
        return Err(Error::EmptySelection);
    }
    let key = |r: &[String]| -> String {
        group_cols.iter().zip(&groups).map(|(&c, g)| format!("{g}={}", r[c])).collect::<Vec<_>>().join(" ")
    };
    let (xs, ys) = spec.scales();
    let title = spec.title.clone().unwrap_or_else(|| default_title(spec.plot).to_string());
    match spec.plot {
        PlotKind::LossVsIteration => {
            let (xc, yc) = (table.col("iteration")?, table.col("train_loss")?);
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &rows {
                if let (Some(x), Some(y)) = (table.number(r, xc), table.number(r, yc)) {
                    series.entry(key(r)).or_default().push((x, y));
                }
            }
            for pts in series.values_mut() {
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
            Ok(Chart::new(title, "iteration", "training loss", xs, ys).lines(series, true).render())
        }
        PlotKind::FinalLossVsBatchSize => {
            let (rc, bc, ic) = (table.col("run_id")?, table.col("batch_size")?, table.col("iteration")?);
            let (nc, vc) = (table.col("eval_metric_name")?, table.col("eval_metric_value")?);
            // last full-dataset evaluation of each run
            let mut finals: BTreeMap<&str, (f64, f64, String, f64)> = BTreeMap::new();
            for r in &rows {
                let (Some(b), Some(it)) = (table.number(r, bc), table.number(r, ic)) else { continue };
                if r[nc] != EVAL_METRIC {
                    continue;
                }
                let v = table.number(r, vc).unwrap_or(f64::NAN);
                let entry = finals.entry(r[rc].as_str()).or_insert((it, b, key(r), v));
                if it >= entry.0 {
                    *entry = (it, b, key(r), v);
                }
            }
            let mut grouped: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
            for (_, b, k, v) in finals.into_values() {
                grouped.entry(k).or_default().entry(b as u64).or_default().push(v);
            }
            if grouped.is_empty() {
                return Err(Error::EmptySelection);
            }
            let series = grouped
                .into_iter()
                .map(|(k, by_batch)| {
                    let pts = by_batch.into_iter().map(|(b, v)| (b as f64, median(v))).collect();
                    (k, pts)
                })
                .collect();
            Ok(Chart::new(title, "batch size", "final training loss (median over seeds)", xs, ys)
                .lines(series, true)
                .points()
                .render())
        }
        PlotKind::Qq | PlotKind::Histogram => {
            let vc = table.col("error_norm")?;
            let values: Vec<f64> = rows.iter().filter_map(|r| table.number(r, vc)).collect();
            if spec.plot == PlotKind::Qq {
                let pts = match spec.reference {
                    Some(r) => noise::qq_points(&values, r.mu, r.sigma)?,
                    None => noise::qq_against_fit(&values)?,
                };
                let mut series = BTreeMap::new();
                series.insert(String::new(), pts);
                Ok(Chart::new(title, "Gaussian quantile", "observed", xs, ys).scatter(series).identity().render())
            } else {
                Ok(histogram(title, &values, xs, ys)?.render())
            }
        }
    }
}

fn default_title(kind: PlotKind) -> &'static str {
    match kind {
        PlotKind::LossVsIteration => "Training loss",
        PlotKind::FinalLossVsBatchSize => "Final training loss across batch sizes",
        PlotKind::Qq => "Gradient error norm against a fitted Gaussian",
        PlotKind::Histogram => "Gradient error norm",
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn histogram(title: String, values: &[f64], xs: Scale, ys: Scale) -> Result<Chart> {
    let (mu, sigma) = noise::fit_gaussian(values)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateFit);
    }
    let bins = ((values.len() as f64).sqrt().ceil() as usize).clamp(5, 60);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    let bars = counts.iter().enumerate().map(|(i, &c)| (lo + i as f64 * width, width, c as f64 / (n * width))).collect();
    let mut curve = BTreeMap::new();
    let density = |x: f64| (-0.5 * ((x - mu) / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    curve.insert("fitted Gaussian".to_string(), (0..=200).map(|i| lo + (hi - lo) * i as f64 / 200.0).map(|x| (x, density(x))).collect());
    Ok(Chart::new(title, "error norm", "density", xs, ys).bars(bars).lines(curve, false))
}

#[derive(Default)]
struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    x_scale: Option<Scale>,
    y_scale: Option<Scale>,
    lines: BTreeMap<String, Vec<(f64, f64)>>,
    terminations: bool,
    markers: bool,
    scatter: BTreeMap<String, Vec<(f64, f64)>>,
    bars: Vec<(f64, f64, f64)>,
    identity: bool,
}

struct Axis {
    scale: Scale,
    lo: f64,
    hi: f64,
    pixel_lo: f64,
    pixel_hi: f64,
}

impl Axis {
    fn new(scale: Scale, values: impl Iterator<Item = f64>, pixel_lo: f64, pixel_hi: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| usable(scale, *v)) {
            let t = transform(scale, v);
            lo = lo.min(t);
            hi = hi.max(t);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.03 * (hi - lo);
        Self { scale, lo: lo - pad, hi: hi + pad, pixel_lo, pixel_hi }
    }

    fn px(&self, v: f64) -> f64 {
        let t = transform(self.scale, v);
        self.pixel_lo + (t - self.lo) / (self.hi - self.lo) * (self.pixel_hi - self.pixel_lo)
    }

    fn ticks(&self) -> Vec<f64> {
        match self.scale {
            Scale::Log => {
                let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
                let step = ((b - a) / 6).max(1);
                (a..=b).step_by(step as usize).map(|e| 10f64.powi(e)).collect()
            }
            Scale::Linear => {
                let raw = (self.hi - self.lo) / 6.0;
                let mag = 10f64.powf(raw.log10().floor());
                let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
                let first = (self.lo / step).ceil() as i64;
                let last = (self.hi / step).floor() as i64;
                (first..=last).map(|i| i as f64 * step).collect()
            }
        }
    }
}

fn usable(scale: Scale, v: f64) -> bool {
    v.is_finite() && (scale == Scale::Linear || v > 0.0)
}

fn transform(scale: Scale, v: f64) -> f64 {
    match scale {
        Scale::Linear => v,
        Scale::Log => v.log10(),
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Chart {
    fn new(title: String, x_label: &str, y_label: &str, x_scale: Scale, y_scale: Scale) -> Self {
        Self {
            title,
            x_label: x_label.into(),
            y_label: y_label.into(),
            x_scale: Some(x_scale),
            y_scale: Some(y_scale),
            ..Self::default()
        }
    }

    fn lines(mut self, series: BTreeMap<String, Vec<(f64, f64)>>, terminations: bool) -> Self {
        self.lines = series;
        self.terminations = terminations;
        self
    }

    fn points(mut self) -> Self {
        self.markers = true;
        self
    }

    fn scatter(mut self, series: BTreeMap<String, Vec<(f64, f64)>>) -> Self {
        self.scatter = series;
        self
    }

    fn bars(mut self, bars: Vec<(f64, f64, f64)>) -> Self {
        self.bars = bars;
        self
    }

    fn identity(mut self) -> Self {
        self.identity = true;
        self
    }

    fn render(&self) -> String {
        let (xs, ys) = (self.x_scale.unwrap_or(Scale::Linear), self.y_scale.unwrap_or(Scale::Linear));
        let all = || {
            self.lines
                .values()
                .chain(self.scatter.values())
                .flatten()
                .copied()
                .chain(self.bars.iter().flat_map(|&(x, w, h)| [(x, 0.0), (x + w, h)]))
        };
        let (plot_l, plot_r) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
        let (plot_t, plot_b) = (MARGIN_TOP, HEIGHT - MARGIN_BOTTOM);
        let (x_axis, y_axis) = if self.identity {
            // shared range so the guide is the diagonal
            let v: Vec<f64> = all().flat_map(|(x, y)| [x, y]).collect();
            (
                Axis::new(xs, v.iter().copied(), plot_l, plot_r),
                Axis::new(ys, v.iter().copied(), plot_b, plot_t),
            )
        } else {
            (
                Axis::new(xs, all().map(|p| p.0), plot_l, plot_r),
                Axis::new(ys, all().map(|p| p.1), plot_b, plot_t),
            )
        };

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
            (plot_l + plot_r) / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{plot_l:.2}" y="{plot_t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
            plot_r - plot_l,
            plot_b - plot_t
        );
        for t in x_axis.ticks() {
            let x = x_axis.px(t);
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{plot_b:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/>"##, plot_b + 4.0);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, plot_b + 16.0, fmt_tick(t));
        }
        for t in y_axis.ticks() {
            let y = y_axis.px(t);
            let _ = writeln!(s, r##"<line x1="{:.2}" y1="{y:.2}" x2="{plot_l:.2}" y2="{y:.2}" stroke="#444"/>"##, plot_l - 4.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, plot_l - 6.0, y + 4.0, fmt_tick(t));
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (plot_l + plot_r) / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
            (plot_t + plot_b) / 2.0,
            (plot_t + plot_b) / 2.0,
            escape(&self.y_label)
        );

        for &(x, w, h) in &self.bars {
            let (x0, x1) = (x_axis.px(x), x_axis.px(x + w));
            let (y0, y1) = (y_axis.px(0.0), y_axis.px(h));
            let _ = writeln!(
                s,
                r##"<rect x="{x0:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#c6dbef" stroke="#6baed6"/>"##,
                y1.min(y0),
                (x1 - x0).max(0.0),
                (y0 - y1).abs()
            );
        }
        if self.identity {
            let lo = x_axis.lo.max(y_axis.lo);
            let hi = x_axis.hi.min(y_axis.hi);
            let _ = writeln!(
                s,
                r##"<line class="guide" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
                x_axis.px(lo),
                y_axis.px(lo),
                x_axis.px(hi),
                y_axis.px(hi)
            );
        }

        let mut legend = Vec::new();
        for (i, (name, pts)) in self.lines.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let vertices: Vec<(f64, f64)> = pts
                .iter()
                .filter(|(x, y)| usable(xs, *x) && usable(ys, *y))
                .map(|&(x, y)| (x_axis.px(x), y_axis.px(y)))
                .collect();
            if vertices.is_empty() {
                continue;
            }
            let coords: Vec<String> = vertices.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                coords.join(" ")
            );
            if self.markers {
                for (x, y) in &vertices {
                    let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}"/>"#);
                }
            }
            if self.terminations {
                let (x, y) = vertices[vertices.len() - 1];
                let _ = writeln!(
                    s,
                    r#"<path class="termination" d="M{:.2},{:.2} L{:.2},{:.2} L{x:.2},{:.2} Z" fill="{color}"/>"#,
                    x - 4.0,
                    y - 7.0,
                    x + 4.0,
                    y - 7.0,
                    y - 1.0
                );
            }
            legend.push((name.clone(), color));
        }
        for (i, (name, pts)) in self.scatter.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            for &(x, y) in pts.iter().filter(|(x, y)| usable(xs, *x) && usable(ys, *y)) {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="{color}"/>"#, x_axis.px(x), y_axis.px(y));
            }
            if !name.is_empty() {
                legend.push((name.clone(), color));
            }
        }
        for (i, (name, color)) in legend.iter().enumerate() {
            let y = plot_t + 10.0 + 14.0 * i as f64;
            let x = plot_r + 10.0;
            let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#, x + 16.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 20.0, y + 4.0, escape(name));
        }
        s.push_str("</svg>\n");
        s
    }
}
