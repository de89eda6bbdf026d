//! CSV traces and SVG plots of a simulation run.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::simulate::StepRecord;

pub const CSV_HEADER: [&str; 21] = [
    "step", "obj_x", "obj_y", "wp_x", "wp_y", "zmp_x", "zmp_y", "fzmp_x", "fzmp_y", "gamma_1", "beta_1", "gap_1",
    "gamma_2", "beta_2", "gap_2", "fs_norm", "tau_norm", "iters", "cost", "slack", "dist",
];

pub const PATH_PLOT: &str = "path.svg";
pub const ZMP_PLOT: &str = "zmp.svg";
pub const FORCE_PLOT: &str = "forces.svg";

fn row(r: &StepRecord) -> Vec<String> {
    // `{}` on f64 prints the shortest string that parses back to the same value.
    let f = |v: f64| format!("{v}");
    vec![
        r.step.to_string(),
        f(r.obj[0]),
        f(r.obj[1]),
        f(r.wp[0]),
        f(r.wp[1]),
        f(r.zmp[0]),
        f(r.zmp[1]),
        f(r.fzmp[0]),
        f(r.fzmp[1]),
        f(r.gamma[0]),
        f(r.beta[0]),
        f(r.gap[0]),
        f(r.gamma[1]),
        f(r.beta[1]),
        f(r.gap[1]),
        f(r.fs_norm),
        f(r.tau_norm),
        r.iters.to_string(),
        f(r.cost),
        f(r.slack),
        f(r.dist),
    ]
}

pub fn write_csv<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let to_err = |e: csv::Error| Error::Io {
        path: "<csv>".into(),
        message: e.to_string(),
    };
    w.write_record(CSV_HEADER).map_err(to_err)?;
    for r in records {
        w.write_record(row(r)).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn csv_string(records: &[StepRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}

pub fn emit_csv(records: &[StepRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if records.is_empty() {
        return Err(Error::invalid("no step records to write"));
    }
    let text = csv_string(records)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse(format!("unexpected CSV header: {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let bad = |col: usize| Error::Parse(format!("row {}: bad value in column {}", line + 1, CSV_HEADER[col]));
        let f = |col: usize| -> Result<f64> { rec.get(col).and_then(|s| s.parse().ok()).ok_or_else(|| bad(col)) };
        let u = |col: usize| -> Result<usize> { rec.get(col).and_then(|s| s.parse().ok()).ok_or_else(|| bad(col)) };
        out.push(StepRecord {
            step: u(0)?,
            obj: [f(1)?, f(2)?],
            wp: [f(3)?, f(4)?],
            zmp: [f(5)?, f(6)?],
            fzmp: [f(7)?, f(8)?],
            gamma: [f(9)?, f(12)?],
            beta: [f(10)?, f(13)?],
            gap: [f(11)?, f(14)?],
            fs_norm: f(15)?,
            tau_norm: f(16)?,
            iters: u(17)?,
            cost: f(18)?,
            slack: f(19)?,
            dist: f(20)?,
        });
    }
    Ok(out)
}

/// Geometry drawn behind the trace data.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotContext {
    pub sp_polygon: Vec<Vector2<f64>>,
    pub sp_center: Vector2<f64>,
    pub safe_radius: f64,
    pub port_edges: [[Vector2<f64>; 2]; 2],
    /// Per step, the joint polylines of both arms.
    pub arm_lines: Vec<[Vec<Vector2<f64>>; 2]>,
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

/// Maps data coordinates into the plot area, y up.
struct Frame {
    min: Vector2<f64>,
    scale: Vector2<f64>,
}

impl Frame {
    fn new(min: Vector2<f64>, max: Vector2<f64>, equal: bool) -> Self {
        let span = (max - min).map(|v| if v > 0.0 { v } else { 1.0 });
        let mut scale = Vector2::new((WIDTH - 2.0 * MARGIN) / span.x, (HEIGHT - 2.0 * MARGIN) / span.y);
        if equal {
            let s = scale.x.min(scale.y);
            scale = Vector2::new(s, s);
        }
        Frame { min, scale }
    }

    fn fit(points: &[Vector2<f64>], pad: f64, equal: bool) -> Self {
        let mut min = Vector2::repeat(f64::INFINITY);
        let mut max = Vector2::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let pad = Vector2::repeat(pad);
        Frame::new(min - pad, max + pad, equal)
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.min.x) * self.scale.x
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.min.y) * self.scale.y
    }

    fn pt(&self, p: &Vector2<f64>) -> String {
        format!("{:.2},{:.2}", self.x(p.x), self.y(p.y))
    }
}

/// Blue at the first step to red at the last.
fn step_color(k: usize, n: usize) -> String {
    let t = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
    format!("rgb({},{},{})", (255.0 * t).round(), 0, (255.0 * (1.0 - t)).round())
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn axis_labels(s: &mut String, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>",
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{ylabel}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
}

fn polyline(frame: &Frame, pts: &[Vector2<f64>], attrs: &str) -> String {
    let p: Vec<String> = pts.iter().map(|p| frame.pt(p)).collect();
    format!("<polyline points=\"{}\" fill=\"none\" {attrs}/>\n", p.join(" "))
}

fn path_plot(records: &[StepRecord], ctx: &PlotContext) -> String {
    let mut pts: Vec<Vector2<f64>> = ctx.arm_lines.iter().flatten().flatten().copied().collect();
    pts.extend(ctx.port_edges.iter().flatten());
    pts.extend(records.iter().map(|r| Vector2::from(r.wp)));
    let frame = Frame::fit(&pts, 0.05, true);
    let mut s = svg_open("Arm configurations and object path");
    let n = records.len();
    for (k, lines) in ctx.arm_lines.iter().enumerate() {
        let color = step_color(k, ctx.arm_lines.len());
        for line in lines {
            s += &polyline(&frame, line, &format!("stroke=\"{color}\" stroke-width=\"2\" stroke-opacity=\"0.7\""));
        }
    }
    for edges in &ctx.port_edges {
        for e in edges {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"black\"/>",
                frame.x(e.x),
                frame.y(e.y)
            );
        }
    }
    let wps: Vec<Vector2<f64>> = records.iter().map(|r| Vector2::from(r.wp)).collect();
    s += &polyline(&frame, &wps, "stroke=\"gray\" stroke-dasharray=\"4 3\"");
    for (k, r) in records.iter().enumerate() {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>",
            frame.x(r.obj[0]),
            frame.y(r.obj[1]),
            step_color(k, n)
        );
    }
    axis_labels(&mut s, "x [m]", "y [m]");
    s + "</svg>\n"
}

fn zmp_plot(records: &[StepRecord], ctx: &PlotContext) -> String {
    let mut pts = ctx.sp_polygon.clone();
    let r = Vector2::repeat(ctx.safe_radius);
    pts.push(ctx.sp_center - r);
    pts.push(ctx.sp_center + r);
    pts.extend(records.iter().flat_map(|r| [Vector2::from(r.zmp), Vector2::from(r.fzmp)]));
    let frame = Frame::fit(&pts, 0.02, true);
    let mut s = svg_open("ZMP (filled) and FZMP (open)");
    let mut poly = ctx.sp_polygon.clone();
    if let Some(first) = poly.first().copied() {
        poly.push(first);
    }
    s += &polyline(&frame, &poly, "stroke=\"black\" stroke-width=\"1.5\"");
    let _ = writeln!(
        s,
        "<circle class=\"safe-circle\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"{:.2}\" fill=\"none\" stroke=\"green\" stroke-dasharray=\"5 3\"/>",
        frame.x(ctx.sp_center.x),
        frame.y(ctx.sp_center.y),
        ctx.safe_radius * frame.scale.x
    );
    let n = records.len();
    for (k, r) in records.iter().enumerate() {
        let c = step_color(k, n);
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"none\" stroke=\"{c}\"/>",
            frame.x(r.fzmp[0]),
            frame.y(r.fzmp[1])
        );
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{c}\"/>",
            frame.x(r.zmp[0]),
            frame.y(r.zmp[1])
        );
    }
    axis_labels(&mut s, "x [m]", "y [m]");
    s + "</svg>\n"
}

fn force_plot(records: &[StepRecord]) -> String {
    let dmin = records.iter().map(|r| r.dist).fold(f64::INFINITY, f64::min);
    let dmax = records.iter().map(|r| r.dist).fold(f64::NEG_INFINITY, f64::max);
    let vmax = records
        .iter()
        .flat_map(|r| [r.fs_norm, r.tau_norm])
        .fold(0.0, f64::max);
    let frame = Frame::new(Vector2::new(dmin, 0.0), Vector2::new(dmax, vmax * 1.05), false);
    let mut s = svg_open("Support force |f_s| [N] (blue) and torque |tau| [Nm] (red)");
    let fs: Vec<Vector2<f64>> = records.iter().map(|r| Vector2::new(r.dist, r.fs_norm)).collect();
    let tau: Vec<Vector2<f64>> = records.iter().map(|r| Vector2::new(r.dist, r.tau_norm)).collect();
    s += &polyline(&frame, &fs, "stroke=\"blue\" stroke-width=\"2\"");
    s += &polyline(&frame, &tau, "stroke=\"red\" stroke-width=\"2\"");
    for (line, color) in [(&fs, "blue"), (&tau, "red")] {
        for p in line.iter() {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                frame.x(p.x),
                frame.y(p.y)
            );
        }
    }
    for (v, anchor) in [(dmin, "start"), (dmax, "end")] {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"{anchor}\">{v:.3}</text>",
            frame.x(v),
            HEIGHT - MARGIN + 14.0
        );
    }
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{vmax:.1}</text>", MARGIN - 4.0, frame.y(vmax));
    axis_labels(&mut s, "object distance from base [m]", "magnitude");
    s + "</svg>\n"
}

/// SVG documents for the path, ZMP and force plots, in that order.
pub fn render_plots(records: &[StepRecord], ctx: &PlotContext) -> Result<[(String, &'static str); 3]> {
    if records.is_empty() {
        return Err(Error::invalid("no step records to plot"));
    }
    Ok([
        (path_plot(records, ctx), PATH_PLOT),
        (zmp_plot(records, ctx), ZMP_PLOT),
        (force_plot(records), FORCE_PLOT),
    ])
}

/// Writes `path.svg`, `zmp.svg` and `forces.svg` into `dir`, creating it if needed.
pub fn emit_plots(records: &[StepRecord], ctx: &PlotContext, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let plots = render_plots(records, ctx)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (text, name) in plots {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize) -> StepRecord {
        let k = step as f64;
        StepRecord {
            step,
            obj: [1e-17 * k, 0.5 + 0.05 * k],
            wp: [0.0, 0.5 + 0.05 * k],
            zmp: [0.001, 0.13 + 0.002 * k],
            fzmp: [0.0, 0.13 + 0.01 * k],
            gamma: [if step > 3 { 10.0 * k } else { 0.0 }, 0.1 / 3.0],
            beta: [-3.0, -0.06],
            gap: [0.03 - 0.01 * k, -0.0],
            fs_norm: 12.3456789 * k,
            tau_norm: 2.0f64.sqrt() * k,
            iters: 3 + step,
            cost: 1.0 / 7.0,
            slack: 1e-300,
            dist: 0.5 + 0.05 * k,
        }
    }

    fn records(n: usize) -> Vec<StepRecord> {
        (0..n).map(record).collect()
    }

    fn context() -> PlotContext {
        let v = |x, y| Vector2::new(x, y);
        PlotContext {
            sp_polygon: vec![v(-0.2, -0.15), v(0.2, -0.15), v(0.2, 0.15), v(-0.2, 0.15)],
            sp_center: v(0.0, 0.0),
            safe_radius: 0.15,
            port_edges: [[v(-0.325, 0.3), v(-0.075, 0.3)], [v(0.075, 0.3), v(0.325, 0.3)]],
            arm_lines: vec![[vec![v(-0.2, 0.0), v(-0.3, 0.5)], vec![v(0.2, 0.0), v(0.3, 0.5)]]; 3],
        }
    }

    #[test]
    fn header_and_line_count() {
        let text = csv_string(&records(9)).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.ends_with('\n'));
        assert_eq!(
            text.lines().next().unwrap(),
            "step,obj_x,obj_y,wp_x,wp_y,zmp_x,zmp_y,fzmp_x,fzmp_y,gamma_1,beta_1,gap_1,gamma_2,beta_2,gap_2,fs_norm,tau_norm,iters,cost,slack,dist"
        );
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let recs = records(9);
        let back = parse_csv(&csv_string(&recs).unwrap()).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn open_contacts_write_zero_force() {
        let text = csv_string(&records(1)).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[9], "0");
        assert_eq!(parse_csv(&text).unwrap()[0].gamma[0], 0.0);
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(matches!(parse_csv("a,b\n1,2\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn emit_csv_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/trace.csv");
        emit_csv(&records(3), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), csv_string(&records(3)).unwrap());
    }

    #[test]
    fn emit_csv_reports_path_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = emit_csv(&records(1), blocker.join("trace.csv")).unwrap_err();
        assert!(matches!(&err, Error::Io { path, .. } if path.contains("file")), "{err}");
    }

    #[test]
    fn empty_records_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_csv(&[], dir.path().join("t.csv")).is_err());
        let out = dir.path().join("plots");
        assert!(emit_plots(&[], &context(), &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn plots_are_written_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        emit_plots(&records(3), &context(), dir.path()).unwrap();
        for name in [PATH_PLOT, ZMP_PLOT, FORCE_PLOT] {
            let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
            assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
        }
        let a = render_plots(&records(3), &context()).unwrap();
        let b = render_plots(&records(3), &context()).unwrap();
        assert_eq!(a, b);
    }

    fn attr(tag: &str, name: &str) -> f64 {
        let key = format!(" {name}=\"");
        let start = tag.find(&key).unwrap() + key.len();
        tag[start..].split('"').next().unwrap().parse().unwrap()
    }

    #[test]
    fn safe_circle_radius_follows_plot_scale() {
        let [_, (zmp, _), _] = render_plots(&records(3), &context()).unwrap();
        let circle = zmp.lines().find(|l| l.contains("class=\"safe-circle\"")).unwrap();
        // The support polygon outline is 0.4 m wide.
        let poly = zmp.lines().find(|l| l.contains("stroke=\"black\" stroke-width=\"1.5\"")).unwrap();
        let xs: Vec<f64> = poly
            .split('"')
            .nth(1)
            .unwrap()
            .split(' ')
            .map(|p| p.split(',').next().unwrap().parse().unwrap())
            .collect();
        let width = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        let scale = width / 0.4;
        assert!((attr(circle, "r") - 0.15 * scale).abs() < 0.02);
    }
}
