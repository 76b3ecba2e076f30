//! Static SVG charts rendered from metrics logs: loss curves, per-layer
//! gradient bars, validation mIoU over epochs, and mIoU against the
//! labelled ratio of the split each run trained on.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use psmt_core::data::SplitManifest;
use psmt_core::metrics::{read_metrics, EvalEntry, MetricsRecord, ProbeEntry, StepRecord};

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 64.0;

/// One plotted line.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Everything extracted from one run needed by the charts.
pub struct RunData {
    pub label: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalEntry>,
    pub probes: Vec<ProbeEntry>,
    /// Labelled fraction of the split the run used, when its `run.json`
    /// and manifest are still readable.
    pub ratio: Option<f64>,
}

// ── metrics ingestion ────────────────────────────────────────────────────────

fn run_label(path: &Path) -> String {
    // prefer the run directory name; fall back to the file stem
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string())
}

fn sibling_ratio(metrics_path: &Path) -> Option<f64> {
    let record = metrics_path.parent()?.join("run.json");
    let text = std::fs::read_to_string(record).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    let split = value.get("config")?.get("data")?.get("split")?.as_str()?;
    let manifest = SplitManifest::load(Path::new(split)).ok()?;
    Some(1.0 / manifest.ratio_denominator as f64)
}

/// Parse one metrics file, failing loudly when it holds no records.
pub fn load_run(path: &Path) -> Result<RunData> {
    let records = read_metrics(path).with_context(|| format!("reading {}", path.display()))?;
    if records.is_empty() {
        bail!("metrics file {} has no records", path.display());
    }
    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let mut probes = Vec::new();
    for r in records {
        match r {
            MetricsRecord::Step(s) => steps.push(s),
            MetricsRecord::Eval(e) => evals.push(e),
            MetricsRecord::Probe(p) => probes.push(p),
        }
    }
    Ok(RunData {
        label: run_label(path),
        steps,
        evals,
        probes,
        ratio: sibling_ratio(path),
    })
}

// ── scales and ticks ─────────────────────────────────────────────────────────

fn data_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    if lo == hi {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    } * mag;
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        // snap tiny float dust to zero so labels read "0" not "1.2e-17"
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.001 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ── chart rendering ──────────────────────────────────────────────────────────

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn sx(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x_lo) / (self.x_hi - self.x_lo) * (WIDTH - MARGIN_L - MARGIN_R)
    }
    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y_lo) / (self.y_hi - self.y_lo) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn svg_open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        esc(title)
    );
    s
}

fn axes(s: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (px0, px1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (py0, py1) = (HEIGHT - MARGIN_B, MARGIN_T);
    for t in ticks(f.x_lo, f.x_hi, 6) {
        let x = f.sx(t);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{py0}\" x2=\"{x:.1}\" y2=\"{py1}\" stroke=\"#eee\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            py0 + 14.0,
            fmt_tick(t)
        );
    }
    for t in ticks(f.y_lo, f.y_hi, 5) {
        let y = f.sy(t);
        let _ = writeln!(
            s,
            "<line x1=\"{px0}\" y1=\"{y:.1}\" x2=\"{px1}\" y2=\"{y:.1}\" stroke=\"#eee\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            px0 - 6.0,
            y + 3.5,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{px0}\" y1=\"{py0}\" x2=\"{px1}\" y2=\"{py0}\" stroke=\"#333\"/>\n\
         <line x1=\"{px0}\" y1=\"{py0}\" x2=\"{px0}\" y2=\"{py1}\" stroke=\"#333\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">{}</text>",
        (px0 + px1) / 2.0,
        HEIGHT - 18.0,
        esc(x_label),
        (py0 + py1) / 2.0,
        (py0 + py1) / 2.0,
        esc(y_label)
    );
}

fn legend(s: &mut String, names: &[&str]) {
    let mut y = MARGIN_T + 12.0;
    for (i, name) in names.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = WIDTH - MARGIN_R - 150.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>",
            y - 10.0,
            x + 16.0,
            y,
            esc(name)
        );
        y += 16.0;
    }
}

/// Multi-series line chart; every series shares both axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x_lo, x_hi) = data_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (mut y_lo, mut y_hi) = data_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pad = (y_hi - y_lo) * 0.05;
    y_lo -= pad;
    y_hi += pad;
    let f = Frame { x_lo, x_hi, y_lo, y_hi };
    let mut s = svg_open(title);
    axes(&mut s, &f, x_label, y_label);
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| (f.sx(x), f.sy(y)))
            .collect();
        if pts.len() > 1 {
            let path: String = pts
                .iter()
                .map(|(x, y)| format!("{x:.1},{y:.1}"))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(
                s,
                "<polyline points=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
            );
        }
        if pts.len() <= 64 {
            for (x, y) in &pts {
                let _ = writeln!(s, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"2.5\" fill=\"{color}\"/>");
            }
        }
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per label, one bar per inner series.
pub fn bar_chart(title: &str, y_label: &str, groups: &[(String, Vec<(String, f64)>)]) -> String {
    let max = groups
        .iter()
        .flat_map(|(_, bars)| bars.iter().map(|b| b.1))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let f = Frame {
        x_lo: 0.0,
        x_hi: groups.len().max(1) as f64,
        y_lo: 0.0,
        y_hi: max * 1.08,
    };
    let mut s = svg_open(title);
    axes(&mut s, &f, "", y_label);
    let mut series_names: Vec<String> = Vec::new();
    let group_w = (WIDTH - MARGIN_L - MARGIN_R) / groups.len().max(1) as f64;
    for (gi, (label, bars)) in groups.iter().enumerate() {
        let n = bars.len().max(1) as f64;
        let bar_w = group_w * 0.8 / n;
        for (bi, (name, value)) in bars.iter().enumerate() {
            if !series_names.iter().any(|s| s == name) {
                series_names.push(name.clone());
            }
            let color_idx = series_names.iter().position(|s| s == name).unwrap();
            let color = PALETTE[color_idx % PALETTE.len()];
            let x = MARGIN_L + gi as f64 * group_w + group_w * 0.1 + bi as f64 * bar_w;
            let y = f.sy(value.max(0.0));
            let h = (HEIGHT - MARGIN_B) - y;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{color}\"/>",
                bar_w * 0.92
            );
        }
        let cx = MARGIN_L + (gi as f64 + 0.5) * group_w;
        let cy = HEIGHT - MARGIN_B + 12.0;
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{cy:.1}\" font-size=\"10\" text-anchor=\"end\" \
             transform=\"rotate(-30 {cx:.1} {cy:.1})\">{}</text>",
            esc(label)
        );
    }
    let names: Vec<&str> = series_names.iter().map(|s| s.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

// ── the plot command ─────────────────────────────────────────────────────────

fn write_chart(out_dir: &Path, name: &str, svg: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = out_dir.join(name);
    std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(())
}

/// Render every chart the given metrics files can support into `out_dir`.
/// Returns the written paths; at least one chart is always produced.
pub fn cmd_plot(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        bail!("no metrics files given");
    }
    let runs: Vec<RunData> = inputs
        .iter()
        .map(|p| load_run(p))
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut written = Vec::new();

    // training loss against the optimizer step
    let mut loss_series: Vec<Series> = Vec::new();
    for run in &runs {
        if run.steps.is_empty() {
            continue;
        }
        loss_series.push(Series {
            name: format!("{} total", run.label),
            points: run.steps.iter().map(|s| (s.iter as f64, s.total)).collect(),
        });
        if runs.len() == 1 {
            loss_series.push(Series {
                name: "supervised".into(),
                points: run.steps.iter().map(|s| (s.iter as f64, s.sup)).collect(),
            });
            loss_series.push(Series {
                name: "consistency".into(),
                points: run.steps.iter().map(|s| (s.iter as f64, s.con)).collect(),
            });
        }
    }
    if !loss_series.is_empty() {
        let svg = line_chart("training loss", "iteration", "loss", &loss_series);
        write_chart(out_dir, "loss_vs_iter.svg", &svg, &mut written)?;
    }

    // validation mIoU across epochs
    let miou_series: Vec<Series> = runs
        .iter()
        .filter(|r| !r.evals.is_empty())
        .map(|r| Series {
            name: r.label.clone(),
            points: r.evals.iter().map(|e| (e.epoch as f64, e.miou)).collect(),
        })
        .collect();
    if !miou_series.is_empty() {
        let svg = line_chart("validation mIoU", "epoch", "mIoU", &miou_series);
        write_chart(out_dir, "miou_vs_epoch.svg", &svg, &mut written)?;
    }

    // per-layer gradient magnitudes from the latest probes of the first
    // run that has any
    if let Some(run) = runs.iter().find(|r| !r.probes.is_empty()) {
        let last_epoch = run.probes.iter().map(|p| p.epoch).max().unwrap_or(0);
        let latest: Vec<&ProbeEntry> =
            run.probes.iter().filter(|p| p.epoch == last_epoch).collect();
        let layer_names: Vec<String> =
            latest[0].layers.iter().map(|(n, _)| n.clone()).collect();
        let groups: Vec<(String, Vec<(String, f64)>)> = layer_names
            .iter()
            .map(|layer| {
                let bars = latest
                    .iter()
                    .filter_map(|p| {
                        p.layers
                            .iter()
                            .find(|(n, _)| n == layer)
                            .map(|(_, v)| (p.loss.clone(), *v))
                    })
                    .collect();
                (layer.clone(), bars)
            })
            .collect();
        let svg = bar_chart("consistency gradient magnitude by layer", "mean |grad|", &groups);
        write_chart(out_dir, "grad_layers.svg", &svg, &mut written)?;
    }

    // final mIoU against labelled ratio, one point per run that recorded both
    let mut ratio_points: Vec<(f64, f64)> = runs
        .iter()
        .filter_map(|r| {
            let ratio = r.ratio?;
            let last = r.evals.last()?;
            Some((ratio, last.miou))
        })
        .collect();
    if !ratio_points.is_empty() {
        ratio_points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let series = [Series {
            name: "final mIoU".into(),
            points: ratio_points,
        }];
        let svg = line_chart("mIoU by labelled ratio", "labelled fraction", "mIoU", &series);
        write_chart(out_dir, "miou_vs_ratio.svg", &svg, &mut written)?;
    }

    if written.is_empty() {
        bail!("metrics files held no plottable records");
    }
    Ok(written)
}
