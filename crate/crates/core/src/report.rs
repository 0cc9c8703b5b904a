//! Text tables and SVG figures. Output is a pure function of the input, so
//! reruns are byte-identical.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::darc::DatasetSummary;
use crate::locality::{average_ranks, max_aie_layer, CorrelationMatrix};
use crate::model::Component;
use crate::tokenizer::Bucket;
use crate::tracing::CategoryAggregate;

/// Critical value of the two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("invalid figure spec: {0}")]
    InvalidSpec(String),
    #[error("data shape: {0}")]
    Shape(String),
}

/// One column pair of the max-AIE table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MaxAieColumn {
    pub bucket: Bucket,
    pub component: Component,
}

/// MLP at the last subject token, attention at the last token.
pub const DEFAULT_MAX_AIE_COLUMNS: [MaxAieColumn; 2] = [
    MaxAieColumn {
        bucket: Bucket::LastSubject,
        component: Component::MlpOut,
    },
    MaxAieColumn {
        bucket: Bucket::LastToken,
        component: Component::AttnOut,
    },
];

impl MaxAieColumn {
    fn prefix(&self) -> String {
        if DEFAULT_MAX_AIE_COLUMNS.contains(self) {
            self.component.as_str().to_string()
        } else {
            format!("{}_{}", self.component.as_str(), self.bucket.as_str())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxAieRow {
    pub subcategory: String,
    /// Per column, the peak layer and its value; `None` when the curve is
    /// missing or incomplete.
    pub peaks: Vec<Option<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxAieTable {
    pub columns: Vec<MaxAieColumn>,
    pub rows: Vec<MaxAieRow>,
}

impl MaxAieTable {
    pub fn from_aggregates(aggregates: &[CategoryAggregate], columns: &[MaxAieColumn]) -> Self {
        let rows = aggregates
            .iter()
            .map(|agg| MaxAieRow {
                subcategory: agg.subcategory.clone(),
                peaks: columns
                    .iter()
                    .map(|c| {
                        let curve: Option<Vec<f64>> = agg.layer_curve(c.bucket, c.component)?.into_iter().collect();
                        max_aie_layer(&curve?).ok()
                    })
                    .collect(),
            })
            .collect();
        Self {
            columns: columns.to_vec(),
            rows,
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["subcategory".to_string()];
        for c in &self.columns {
            h.push(format!("{}_layer", c.prefix()));
            h.push(format!("{}_aie", c.prefix()));
        }
        h
    }

    fn cells(row: &MaxAieRow) -> Vec<String> {
        let mut cells = Vec::new();
        for p in &row.peaks {
            match p {
                Some((layer, v)) => {
                    cells.push(layer.to_string());
                    cells.push(fixed3(*v));
                }
                None => {
                    cells.push("-".into());
                    cells.push("-".into());
                }
            }
        }
        cells
    }

    /// Space-separated rows, AIE to three decimals.
    pub fn to_text(&self) -> String {
        let mut out = self.header().join(" ");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.subcategory);
            for c in Self::cells(row) {
                out.push(' ');
                out.push_str(&c);
            }
            out.push('\n');
        }
        out
    }

    /// Same content as CSV; missing peaks are empty fields.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header()).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![row.subcategory.clone()];
            rec.extend(
                Self::cells(row)
                    .into_iter()
                    .map(|c| if c == "-" { String::new() } else { c }),
            );
            w.write_record(rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Three decimals, without a sign on values that round to zero.
fn fixed3(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

pub fn summary_text(summary: &DatasetSummary) -> String {
    let mut out = String::from("category relation concepts facts accuracy\n");
    for c in &summary.categories {
        let acc = c
            .accuracy
            .map(|a| format!("{:.1}%", a * 100.0))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            c.category,
            c.relation.as_str(),
            c.concepts,
            c.total_facts,
            acc
        );
        for s in &c.subcategories {
            match s.correct {
                Some(k) => {
                    let _ = writeln!(out, "  {} {} correct {k}", s.name, s.facts);
                }
                None => {
                    let _ = writeln!(out, "  {} {}", s.name, s.facts);
                }
            }
        }
    }
    if summary.unassigned > 0 {
        let _ = writeln!(out, "unassigned {}", summary.unassigned);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FigureKind {
    CorrelationHeatmap,
    LayerImportanceHeatmap,
    AieLinePlot,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FigureSpec {
    pub kind: FigureKind,
    pub title: String,
    /// Value range of the color scale (heatmaps) or the y axis (line
    /// plots). Line plots fit the data when unset.
    pub bounds: Option<(f64, f64)>,
}

impl FigureSpec {
    pub fn correlation(title: &str) -> Self {
        Self {
            kind: FigureKind::CorrelationHeatmap,
            title: title.into(),
            bounds: Some((-1.0, 1.0)),
        }
    }

    pub fn layer_importance(title: &str, bounds: (f64, f64)) -> Self {
        Self {
            kind: FigureKind::LayerImportanceHeatmap,
            title: title.into(),
            bounds: Some(bounds),
        }
    }

    pub fn line_plot(title: &str) -> Self {
        Self {
            kind: FigureKind::AieLinePlot,
            title: title.into(),
            bounds: None,
        }
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if let Some((lo, hi)) = self.bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ReportError::InvalidSpec(format!("bounds {lo}..{hi}")));
            }
        }
        if self.kind != FigureKind::AieLinePlot && self.bounds.is_none() {
            return Err(ReportError::InvalidSpec("heatmaps need bounds".into()));
        }
        Ok(())
    }
}

/// Labelled grid of values for a heatmap. `None` cells are drawn grey.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Option<f64>>,
}

impl Grid {
    pub fn new(
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        values: Vec<Option<f64>>,
    ) -> Result<Self, ReportError> {
        if values.len() != row_labels.len() * col_labels.len() {
            return Err(ReportError::Shape(format!(
                "{} values for {}x{} grid",
                values.len(),
                row_labels.len(),
                col_labels.len()
            )));
        }
        Ok(Self {
            row_labels,
            col_labels,
            values,
        })
    }

    pub fn from_matrix(m: &CorrelationMatrix) -> Self {
        let n = m.len();
        Self {
            row_labels: m.labels.clone(),
            col_labels: m.labels.clone(),
            values: (0..n * n).map(|k| m.get(k / n, k % n)).collect(),
        }
    }

    /// Rows are subcategories, columns are layers.
    pub fn layer_importance(
        aggregates: &[CategoryAggregate],
        bucket: Bucket,
        component: Component,
    ) -> Result<Self, ReportError> {
        let n_layer = aggregates.first().map_or(0, |a| a.n_layer);
        let mut values = Vec::new();
        for a in aggregates {
            if a.n_layer != n_layer {
                return Err(ReportError::Shape("aggregates disagree on layer count".into()));
            }
            let curve = a
                .layer_curve(bucket, component)
                .ok_or_else(|| ReportError::Shape(format!("{} lacks {component}", a.subcategory)))?;
            values.extend(curve);
        }
        Self::new(
            aggregates.iter().map(|a| a.subcategory.clone()).collect(),
            (0..n_layer).map(|l| l.to_string()).collect(),
            values,
        )
    }

    pub fn transposed(&self) -> Self {
        let (r, c) = (self.row_labels.len(), self.col_labels.len());
        Self {
            row_labels: self.col_labels.clone(),
            col_labels: self.row_labels.clone(),
            values: (0..r * c).map(|k| self.values[(k % r) * c + k / r]).collect(),
        }
    }

    fn rows_map(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let c = self.col_labels.len();
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(c.max(1)) {
            if row.iter().all(Option::is_some) && !row.is_empty() {
                let vals: Vec<f64> = row.iter().map(|v| v.expect("checked")).collect();
                values.extend(f(&vals).into_iter().map(Some));
            } else {
                values.extend(std::iter::repeat_n(None, row.len()));
            }
        }
        Self { values, ..self.clone() }
    }

    /// Each row mapped onto [0, 1] by its own minimum and maximum; a constant
    /// row maps to 0.
    pub fn normalize_rows_minmax(&self) -> Self {
        self.rows_map(|r| {
            let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            r.iter()
                .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                .collect()
        })
    }

    /// Each row replaced by its average ranks scaled onto [0, 1].
    pub fn rank_normalize_rows(&self) -> Self {
        self.rows_map(|r| {
            let n = r.len();
            average_ranks(r)
                .into_iter()
                .map(|k| if n > 1 { (k - 1.0) / (n - 1) as f64 } else { 1.0 })
                .collect()
        })
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (a as f64 + (b as f64 - a as f64) * t).round() as u8
}

/// Blue through white to red.
fn diverging(t: f64) -> String {
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (lerp(33, 255, u), lerp(102, 255, u), lerp(172, 255, u))
    } else {
        let u = (t - 0.5) / 0.5;
        (lerp(255, 178, u), lerp(255, 24, u), lerp(255, 43, u))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// White to dark red.
fn sequential(t: f64) -> String {
    let (r, g, b) = (lerp(255, 128, t), lerp(255, 0, t), lerp(255, 38, t));
    format!("#{r:02x}{g:02x}{b:02x}")
}

const CELL: f64 = 28.0;
const CHAR_W: f64 = 6.5;
const FONT: &str = "font-family=\"sans-serif\" font-size=\"11\"";
const TITLE_FONT: &str = "font-family=\"sans-serif\" font-size=\"14\"";

fn num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

/// Heatmap with one rect per cell, color linearly mapped within the figure
/// bounds. Each rect carries its value in `data-value`.
pub fn emit_heatmap(grid: &Grid, spec: &FigureSpec) -> Result<String, ReportError> {
    spec.validate()?;
    if spec.kind == FigureKind::AieLinePlot {
        return Err(ReportError::InvalidSpec("line plot spec passed to heatmap".into()));
    }
    let (lo, hi) = spec.bounds.expect("validated");
    let color = |v: f64| {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        match spec.kind {
            FigureKind::CorrelationHeatmap => diverging(t),
            _ => sequential(t),
        }
    };
    let rows = grid.row_labels.len();
    let cols = grid.col_labels.len();
    let longest = |labels: &[String]| labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) as f64;
    let left = 12.0 + longest(&grid.row_labels) * CHAR_W;
    let top = 40.0 + longest(&grid.col_labels) * CHAR_W;
    let legend_x = left + cols as f64 * CELL + 20.0;
    let width = legend_x + 70.0;
    let height = (top + rows as f64 * CELL + 20.0).max(top + 120.0);

    let mut s = String::new();
    let _ = writeln!(s, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">",
        num(width),
        num(height),
        num(width),
        num(height)
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" {TITLE_FONT} text-anchor=\"middle\">{}</text>",
        num(width / 2.0),
        escape(&spec.title)
    );
    let _ = writeln!(s, "<g class=\"cells\">");
    for r in 0..rows {
        for c in 0..cols {
            let v = grid.values[r * cols + c];
            let (fill, data) = match v {
                Some(x) => (color(x), x.to_string()),
                None => ("#bbbbbb".to_string(), String::new()),
            };
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{fill}\" stroke=\"#ffffff\" stroke-width=\"0.5\" data-row=\"{r}\" data-col=\"{c}\" data-value=\"{data}\"/>",
                num(left + c as f64 * CELL),
                num(top + r as f64 * CELL)
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, "<g class=\"row-labels\" {FONT} text-anchor=\"end\">");
    for (r, label) in grid.row_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">{}</text>",
            num(left - 6.0),
            num(top + r as f64 * CELL + CELL / 2.0 + 4.0),
            escape(label)
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, "<g class=\"col-labels\" {FONT}>");
    for (c, label) in grid.col_labels.iter().enumerate() {
        let x = left + c as f64 * CELL + CELL / 2.0 + 4.0;
        let y = top - 6.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" transform=\"rotate(-90 {} {})\">{}</text>",
            num(x),
            num(y),
            num(x),
            num(y),
            escape(label)
        );
    }
    let _ = writeln!(s, "</g>");
    let steps = 20;
    let bar_h = 100.0;
    let _ = writeln!(s, "<g class=\"legend\" data-min=\"{lo}\" data-max=\"{hi}\">");
    for k in 0..steps {
        let t = 1.0 - (k as f64 + 0.5) / steps as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"14\" height=\"{}\" fill=\"{}\"/>",
            num(legend_x),
            num(top + k as f64 * bar_h / steps as f64),
            num(bar_h / steps as f64),
            color(lo + t * (hi - lo))
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" {FONT}>{}</text>",
        num(legend_x + 18.0),
        num(top + 8.0),
        num(hi)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" {FONT}>{}</text>",
        num(legend_x + 18.0),
        num(top + bar_h),
        num(lo)
    );
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

/// One curve of a line plot.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSeries {
    pub label: String,
    /// Per layer: mean, sample standard deviation and count. Layers with
    /// count 0 are left out of the curve.
    pub points: Vec<(f64, f64, u64)>,
}

impl LineSeries {
    pub fn from_aggregate(agg: &CategoryAggregate, bucket: Bucket, component: Component) -> Result<Self, ReportError> {
        let points = (0..agg.n_layer)
            .map(|l| {
                let c = agg
                    .cell(l, bucket, component)
                    .ok_or_else(|| ReportError::Shape(format!("{} lacks {component}", agg.subcategory)))?;
                Ok((c.mean.unwrap_or(0.0), c.stddev.unwrap_or(0.0), c.count))
            })
            .collect::<Result<_, ReportError>>()?;
        Ok(Self {
            label: agg.subcategory.clone(),
            points,
        })
    }

    /// Half-width of the 95% normal interval of the mean.
    pub fn half_width(stddev: f64, count: u64) -> f64 {
        if count == 0 {
            0.0
        } else {
            Z_95 * stddev / (count as f64).sqrt()
        }
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Mean AIE per layer with a shaded 95% band, one line per series.
pub fn emit_lineplot(series: &[LineSeries], spec: &FigureSpec) -> Result<String, ReportError> {
    spec.validate()?;
    if spec.kind != FigureKind::AieLinePlot {
        return Err(ReportError::InvalidSpec("heatmap spec passed to line plot".into()));
    }
    let n_layer = series.iter().map(|s| s.points.len()).max().unwrap_or(0);
    let defined = |s: &LineSeries| -> Vec<(usize, f64, f64, f64)> {
        s.points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.2 > 0)
            .map(|(l, &(m, sd, n))| {
                let h = LineSeries::half_width(sd, n);
                (l, m, m - h, m + h)
            })
            .collect()
    };
    let (y_min, y_max) = match spec.bounds {
        Some(b) => b,
        None => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for s in series {
                for (_, _, a, b) in defined(s) {
                    lo = lo.min(a);
                    hi = hi.max(b);
                }
            }
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = (hi - lo) * 0.05;
                (lo - pad, hi + pad)
            }
        }
    };
    let x_max = n_layer.saturating_sub(1).max(1) as f64;

    let (pl, pt, pw, ph) = (60.0, 40.0, 480.0, 280.0);
    let legend_h = 16.0 * series.len() as f64;
    let width = pl + pw + 40.0;
    let height = pt + ph + 60.0 + legend_h;
    let px = |layer: f64| pl + layer / x_max * pw;
    let py = |v: f64| pt + (y_max - v) / (y_max - y_min) * ph;

    let mut s = String::new();
    let _ = writeln!(s, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">",
        num(width),
        num(height),
        num(width),
        num(height)
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" {TITLE_FONT} text-anchor=\"middle\">{}</text>",
        num(width / 2.0),
        escape(&spec.title)
    );
    let _ = writeln!(
        s,
        "<rect class=\"plot-area\" x=\"{pl}\" y=\"{pt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444444\" data-x-min=\"0\" data-x-max=\"{x_max}\" data-y-min=\"{y_min}\" data-y-max=\"{y_max}\"/>"
    );
    let _ = writeln!(s, "<g class=\"axes\" {FONT}>");
    for k in 0..=4 {
        let v = y_min + (y_max - y_min) * k as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{pl}\" y2=\"{}\" stroke=\"#444444\"/><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            num(pl - 4.0),
            num(y),
            num(y),
            num(pl - 6.0),
            num(y + 4.0),
            num(v)
        );
    }
    let tick_every = ((n_layer as f64 / 12.0).ceil() as usize).max(1);
    for l in (0..n_layer).step_by(tick_every) {
        let x = px(l as f64);
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#444444\"/><text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{l}</text>",
            num(x),
            num(pt + ph),
            num(x),
            num(pt + ph + 4.0),
            num(x),
            num(pt + ph + 16.0)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">layer</text>",
        num(pl + pw / 2.0),
        num(pt + ph + 32.0)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">mean AIE</text>",
        num(pt + ph / 2.0),
        num(pt + ph / 2.0)
    );
    let _ = writeln!(s, "</g>");

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts = defined(ser);
        let _ = writeln!(s, "<g class=\"series\" data-label=\"{}\">", escape(&ser.label));
        if !pts.is_empty() {
            let mut d = String::new();
            for (k, &(l, _, _, up)) in pts.iter().enumerate() {
                let _ = write!(
                    d,
                    "{}{},{} ",
                    if k == 0 { "M" } else { "L" },
                    num(px(l as f64)),
                    num(py(up))
                );
            }
            for &(l, _, lo, _) in pts.iter().rev() {
                let _ = write!(d, "L{},{} ", num(px(l as f64)), num(py(lo)));
            }
            d.push('Z');
            let _ = writeln!(
                s,
                "<path class=\"band\" d=\"{d}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>"
            );
            let line: Vec<String> = pts
                .iter()
                .map(|&(l, m, _, _)| format!("{},{}", num(px(l as f64)), num(py(m))))
                .collect();
            let _ = writeln!(
                s,
                "<polyline class=\"mean\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                line.join(" ")
            );
            for &(l, m, lo, up) in &pts {
                let _ = writeln!(
                    s,
                    "<circle cx=\"{}\" cy=\"{}\" r=\"2\" fill=\"{color}\" data-layer=\"{l}\" data-mean=\"{m}\" data-lower=\"{lo}\" data-upper=\"{up}\"/>",
                    num(px(l as f64)),
                    num(py(m))
                );
            }
        }
        let ly = pt + ph + 48.0 + i as f64 * 16.0;
        let _ = writeln!(
            s,
            "<line x1=\"{pl}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\" {FONT}>{}</text>",
            num(ly),
            num(pl + 20.0),
            num(ly),
            num(pl + 26.0),
            num(ly + 4.0),
            escape(&ser.label)
        );
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        "<text class=\"footer\" x=\"{}\" y=\"{}\" {FONT} text-anchor=\"end\">band: mean \u{b1} 1.96\u{b7}s/\u{221a}n (95% normal approximation)</text>",
        num(pl + pw),
        num(height - 6.0)
    );
    s.push_str("</svg>\n");
    Ok(s)
}
