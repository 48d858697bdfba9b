//! File outputs: bit-stable CSV, JSON logs and small SVG line charts.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::constants::SystemConstants;
use crate::error::Result;
use crate::hankel::fmt_f64;
use crate::mpc::InputBox;

use super::{ClosedLoopLog, Pipeline};

/// Times whose open-loop predictions are overlaid on the output plot.
const PREDICTION_TIMES: [usize; 4] = [0, 30, 60, 90];

fn signal_headers(name: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![name.to_string()]
    } else {
        (1..=dim).map(|i| format!("{name}_{i}")).collect()
    }
}

/// `t,u,y,ytilde,feasible`, one row per time step.
pub fn write_closed_loop_csv<W: Write>(log: &ClosedLoopLog, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let (m, p) = log.steps.first().map_or((1, 1), |s| (s.u.len(), s.y.len()));
    let mut header = vec!["t".to_string()];
    header.extend(signal_headers("u", m));
    header.extend(signal_headers("y", p));
    header.extend(signal_headers("ytilde", p));
    header.push("feasible".into());
    w.write_record(&header)?;
    for s in &log.steps {
        let mut row = vec![s.t.to_string()];
        row.extend(s.u.iter().chain(&s.y).chain(&s.ytilde).map(|v| fmt_f64(*v)));
        row.push(s.feasible.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-solve records as a JSON array.
pub fn write_solves_json<W: Write>(log: &ClosedLoopLog, mut writer: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, &log.solves)?;
    writeln!(writer)?;
    Ok(())
}

/// `k,rho,rho_model` rows followed by the scalar constants.
pub fn write_constants_csv<W: Write>(constants: &SystemConstants, model: &SystemConstants, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["name", "k", "value", "model_value"])?;
    for (i, (r, rm)) in constants.rho.iter().zip(&model.rho).enumerate() {
        w.write_record(["rho", &(i + constants.n).to_string(), &fmt_f64(*r), &fmt_f64(*rm)])?;
    }
    for (name, v, vm) in [
        ("gamma", constants.gamma, model.gamma),
        ("rho_n_max", constants.rho_n_max, model.rho_n_max),
        ("rho_L_max", constants.rho_l_max, model.rho_l_max),
        ("c_pe", constants.c_pe, model.c_pe),
        ("xi_max", constants.xi_max, model.xi_max),
    ] {
        w.write_record([name, "", &fmt_f64(v), &fmt_f64(vm)])?;
    }
    w.flush()?;
    Ok(())
}

struct Series {
    points: Vec<(f64, f64)>,
    color: &'static str,
    width: f64,
    dashed: bool,
    step: bool,
}

struct Chart<'a> {
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
    x_range: (f64, f64),
    y_range: (f64, f64),
    series: Vec<Series>,
    hlines: Vec<(f64, &'static str)>,
}

const W: f64 = 720.0;
const H: f64 = 360.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 45.0); // left, right, top, bottom

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|f| f * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut out = Vec::new();
    let mut v = (lo / step).ceil() * step;
    while v <= hi + 1e-9 * span {
        out.push(if v.abs() < 1e-12 * span { 0.0 } else { v });
        v += step;
    }
    out
}

impl Chart<'_> {
    fn render(&self) -> String {
        let (ml, mr, mt, mb) = MARGIN;
        let (pw, ph) = (W - ml - mr, H - mt - mb);
        let sx = |x: f64| ml + (x - self.x_range.0) / (self.x_range.1 - self.x_range.0) * pw;
        let sy = |y: f64| mt + (self.y_range.1 - y) / (self.y_range.1 - self.y_range.0) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, self.title);
        for t in ticks(self.x_range.0, self.x_range.1) {
            let x = sx(t);
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{mt}" x2="{x:.2}" y2="{:.2}" stroke="#eee"/>"##, mt + ph);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#, mt + ph + 16.0);
        }
        for t in ticks(self.y_range.0, self.y_range.1) {
            let y = sy(t);
            let _ = writeln!(s, r##"<line x1="{ml}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#eee"/>"##, ml + pw);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text>"#, ml - 6.0, y + 4.0);
        }
        let _ = writeln!(s, r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, ml + pw / 2.0, H - 8.0, self.x_label);
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            mt + ph / 2.0,
            mt + ph / 2.0,
            self.y_label
        );
        for (v, color) in &self.hlines {
            let y = sy(*v);
            let _ = writeln!(
                s,
                r#"<line class="bound" x1="{ml}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-dasharray="6 4" data-value="{v}"/>"#,
                ml + pw
            );
        }
        for series in &self.series {
            let mut d = String::new();
            let mut prev: Option<(f64, f64)> = None;
            for &(x, y) in &series.points {
                match prev {
                    None => {
                        let _ = write!(d, "M{:.2},{:.2}", sx(x), sy(y));
                    }
                    Some((_, py)) if series.step => {
                        let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", sx(x), sy(py), sx(x), sy(y));
                    }
                    Some(_) => {
                        let _ = write!(d, " L{:.2},{:.2}", sx(x), sy(y));
                    }
                }
                prev = Some((x, y));
            }
            let dash = if series.dashed { r#" stroke-dasharray="3 3""# } else { "" };
            let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="{}"{dash}/>"#, series.color, series.width);
        }
        s.push_str("</svg>\n");
        s
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let pad = 0.08 * (hi - lo).max(1.0);
    (lo - pad, hi + pad)
}

/// Closed-loop input (first component) against time, with the input
/// bounds drawn as horizontal lines.
pub fn closed_loop_svg_input(log: &ClosedLoopLog, input_box: &InputBox) -> String {
    let t_end = log.steps.len().max(1) as f64;
    let (lo, hi) = (input_box.lower[0], input_box.upper[0]);
    Chart {
        title: "Closed-loop input",
        x_label: "time step t",
        y_label: "input u_t",
        x_range: (0.0, t_end),
        y_range: padded(lo, hi),
        series: vec![Series {
            points: log.steps.iter().map(|s| (s.t as f64, s.u[0])).chain(log.steps.last().map(|s| (s.t as f64 + 1.0, s.u[0]))).collect(),
            color: "#1f4e9c",
            width: 1.5,
            dashed: false,
            step: true,
        }],
        hlines: vec![(lo, "#b22222"), (hi, "#b22222")],
    }
    .render()
}

/// Closed-loop output (first component) with open-loop predictions at a
/// few solve times and horizontal lines at `±y_max`.
pub fn closed_loop_svg_output(log: &ClosedLoopLog, y_max: Option<f64>) -> String {
    let t_end = log.steps.len().max(1) as f64;
    let mut series = vec![Series {
        points: log.steps.iter().map(|s| (s.t as f64, s.y[0])).collect(),
        color: "#1f4e9c",
        width: 1.5,
        dashed: false,
        step: false,
    }];
    let palette = ["#2e8b57", "#d2691e", "#8a2be2", "#708090"];
    for (i, t) in PREDICTION_TIMES.iter().enumerate() {
        if let Some(solve) = log.solves.iter().find(|s| s.t == *t && s.feasible) {
            series.push(Series {
                points: solve.predicted_y.iter().enumerate().map(|(k, y)| ((t + k) as f64, y[0])).collect(),
                color: palette[i % palette.len()],
                width: 1.2,
                dashed: true,
                step: false,
            });
        }
    }
    let data_max = series.iter().flat_map(|s| s.points.iter().map(|p| p.1.abs())).fold(1.0, f64::max);
    let bound = y_max.unwrap_or(data_max);
    let mut hlines = Vec::new();
    if let Some(v) = y_max {
        hlines.push((-v, "#b22222"));
        hlines.push((v, "#b22222"));
    }
    Chart {
        title: "Closed-loop output and open-loop predictions",
        x_label: "time step t",
        y_label: "output y_t",
        x_range: (0.0, t_end),
        y_range: padded(-bound.max(data_max), bound.max(data_max)),
        series,
        hlines,
    }
    .render()
}

/// Writes every artifact of a reproduction run into `dir`.
pub(super) fn write_artifacts(dir: &Path, pipeline: &Pipeline, model: &SystemConstants, logs: &[ClosedLoopLog]) -> Result<()> {
    let create = |name: &str| std::fs::File::create(dir.join(name));
    pipeline.data().save(&dir.join("data.csv"))?;
    write_constants_csv(pipeline.constants(), model, create("constants.csv")?)?;
    std::fs::write(dir.join("constants.json"), pipeline.constants().to_json_string()?)?;
    pipeline.coeffs().write_csv(create("coefficients.csv")?)?;
    for log in logs {
        let seed = log.summary.online_seed;
        write_closed_loop_csv(log, create(&format!("closed_loop_seed{seed}.csv"))?)?;
        write_solves_json(log, create(&format!("solves_seed{seed}.json"))?)?;
    }
    if let Some(first) = logs.first() {
        let cfg = &pipeline.setup.config;
        std::fs::write(dir.join("input.svg"), closed_loop_svg_input(first, &cfg.input_box))?;
        std::fs::write(dir.join("output.svg"), closed_loop_svg_output(first, cfg.y_max))?;
    }
    Ok(())
}
