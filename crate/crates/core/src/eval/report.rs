use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Delta, RobustnessCurve};
use crate::error::Result;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// Files written by [`emit_reports`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub curves_csv: PathBuf,
    pub per_curve_csv: Vec<PathBuf>,
    pub curve_svgs: Vec<PathBuf>,
    pub deltas_csv: PathBuf,
    pub deltas_svg: Option<PathBuf>,
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn curve_rows(out: &mut String, c: &RobustnessCurve) {
    for (eps, acc) in &c.points {
        let _ = writeln!(out, "{},{},{eps},{acc}", csv_field(&c.model), csv_field(&c.attack_id));
    }
}

/// One curve as `{model}_{attack_id}.curve.csv` in `dir`.
pub fn write_curve_csv(c: &RobustnessCurve, dir: &Path) -> Result<PathBuf> {
    let mut s = String::from("model,attack_id,eps,accuracy\n");
    curve_rows(&mut s, c);
    let path = dir.join(format!("{}_{}.curve.csv", sanitize(&c.model), sanitize(&c.attack_id)));
    std::fs::write(&path, s)?;
    Ok(path)
}

/// Evenly spaced x positions for the ε grid (grids span orders of
/// magnitude and may contain 0).
fn x_at(i: usize, n: usize) -> f64 {
    if n <= 1 {
        (W + MARGIN) / 2.0
    } else {
        MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n - 1) as f64
    }
}

fn y_at(v: f64, lo: f64, hi: f64) -> f64 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    H - MARGIN - (H - 2.0 * MARGIN) * t
}

fn frame(title: &str, xlabel: &str, ylabel: &str, ticks: &[String], lo: f64, hi: f64) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>", W / 2.0, escape(title));
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for (i, t) in ticks.iter().enumerate() {
        let x = x_at(i, ticks.len());
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", y0 + 16.0, escape(t));
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_at(v, lo, hi);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>", x0 - 6.0, y + 4.0);
        let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y:.1}\" x2=\"{x1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>");
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "<rect x=\"{}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{c}\"/>", W - MARGIN - 110.0, y - 9.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y:.1}\">{}</text>", W - MARGIN - 96.0, escape(n));
    }
}

fn curves_svg(attack_id: &str, curves: &[&RobustnessCurve]) -> String {
    let grid: Vec<f64> = curves[0].points.iter().map(|p| p.0).collect();
    let ticks: Vec<String> = grid.iter().map(|e| e.to_string()).collect();
    let mut s = frame(&format!("robust accuracy: {attack_id}"), "epsilon", "accuracy", &ticks, 0.0, 1.0);
    for (i, c) in curves.iter().enumerate() {
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(e, a)| {
                let j = grid.iter().position(|g| *g == e).unwrap_or(0);
                format!("{:.1},{:.1}", x_at(j, grid.len()), y_at(a, 0.0, 1.0))
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    legend(&mut s, &curves.iter().map(|c| c.model.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

fn deltas_svg(deltas: &[Delta]) -> String {
    let mut grid: Vec<f64> = deltas.iter().map(|d| d.eps).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut models: Vec<&str> = Vec::new();
    for d in deltas {
        if !models.contains(&d.model.as_str()) {
            models.push(&d.model);
        }
    }
    let m = deltas.iter().map(|d| d.delta.abs()).fold(0.05, f64::max);
    let ticks: Vec<String> = grid.iter().map(|e| e.to_string()).collect();
    let mut s = frame("improvement over best baseline", "epsilon", "accuracy delta", &ticks, -m, m);
    let y0 = y_at(0.0, -m, m);
    let _ = writeln!(s, "<line x1=\"{MARGIN}\" y1=\"{y0:.1}\" x2=\"{}\" y2=\"{y0:.1}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>", W - MARGIN);
    let spread = (W - 2.0 * MARGIN) / (grid.len().max(1) as f64) * 0.5;
    for d in deltas {
        let mi = models.iter().position(|x| *x == d.model).unwrap_or(0);
        let j = grid.iter().position(|g| *g == d.eps).unwrap_or(0);
        let off = if models.len() > 1 { (mi as f64 / (models.len() - 1) as f64 - 0.5) * spread } else { 0.0 };
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.5\" fill=\"{}\" fill-opacity=\"0.75\"><title>{}</title></circle>",
            x_at(j, grid.len()) + off,
            y_at(d.delta, -m, m),
            PALETTE[mi % PALETTE.len()],
            escape(&format!("{} {} eps={} delta={:.4}", d.model, d.attack_id, d.eps, d.delta))
        );
    }
    legend(&mut s, &models);
    s.push_str("</svg>\n");
    s
}

/// Writes `curves.csv`, one CSV per curve, one SVG line chart per attack id
/// (a polyline per model), and `deltas.csv` with its scatter plot. Empty
/// inputs produce header-only CSVs and no SVG.
pub fn emit_reports(curves: &[RobustnessCurve], deltas: &[Delta], out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = ReportFiles::default();
    let mut all = String::from("model,attack_id,eps,accuracy\n");
    for c in curves {
        curve_rows(&mut all, c);
        files.per_curve_csv.push(write_curve_csv(c, out_dir)?);
    }
    files.curves_csv = out_dir.join("curves.csv");
    std::fs::write(&files.curves_csv, all)?;

    let mut by_attack: BTreeMap<&str, Vec<&RobustnessCurve>> = BTreeMap::new();
    for c in curves.iter().filter(|c| !c.points.is_empty()) {
        by_attack.entry(&c.attack_id).or_default().push(c);
    }
    for (id, cs) in by_attack {
        let p = out_dir.join(format!("curves_{}.svg", sanitize(id)));
        std::fs::write(&p, curves_svg(id, &cs))?;
        files.curve_svgs.push(p);
    }

    let mut d = String::from("model,attack_id,eps,accuracy,best_baseline,delta\n");
    for x in deltas {
        let _ = writeln!(
            d,
            "{},{},{},{},{},{}",
            csv_field(&x.model),
            csv_field(&x.attack_id),
            x.eps,
            x.accuracy,
            x.best_baseline,
            x.delta
        );
    }
    files.deltas_csv = out_dir.join("deltas.csv");
    std::fs::write(&files.deltas_csv, d)?;
    if !deltas.is_empty() {
        let p = out_dir.join("deltas.svg");
        std::fs::write(&p, deltas_svg(deltas))?;
        files.deltas_svg = Some(p);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::super::{improvement_over_best_baseline, CIFAR_EPS_GRID};
    use super::*;

    fn curve(model: &str, attack: &str, base: f64) -> RobustnessCurve {
        RobustnessCurve {
            model: model.into(),
            attack_id: attack.into(),
            points: CIFAR_EPS_GRID.iter().enumerate().map(|(i, &e)| (e, base - 0.1 * i as f64)).collect(),
        }
    }

    #[test]
    fn two_models_one_attack() {
        let dir = tempfile::tempdir().unwrap();
        let cs = vec![curve("standard", "pgd", 0.9), curve("retinal", "pgd", 0.8)];
        let files = emit_reports(&cs, &[], dir.path()).unwrap();
        let text = std::fs::read_to_string(&files.curves_csv).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert_eq!(text.lines().next().unwrap(), "model,attack_id,eps,accuracy");
        assert!(dir.path().join("standard_pgd.curve.csv").exists());
        assert_eq!(files.curve_svgs.len(), 1);
        let svg = std::fs::read_to_string(&files.curve_svgs[0]).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 2);
        assert!(files.deltas_svg.is_none());
    }

    #[test]
    fn empty_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_reports(&[], &[], dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&files.curves_csv).unwrap(), "model,attack_id,eps,accuracy\n");
        assert!(files.curve_svgs.is_empty() && files.deltas_svg.is_none());
        let n = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "svg").count();
        assert_eq!(n, 0);
    }

    #[test]
    fn delta_scatter_is_xml() {
        let dir = tempfile::tempdir().unwrap();
        let cs = vec![
            curve("standard", "a&b", 0.9),
            curve("coarse", "a&b", 0.85),
            curve("retinal", "a&b", 0.95),
            curve("cortical", "a&b", 0.7),
        ];
        let d = improvement_over_best_baseline(&cs, &["standard", "coarse"], &CIFAR_EPS_GRID).unwrap();
        let files = emit_reports(&cs, &d, dir.path()).unwrap();
        let svg = std::fs::read_to_string(files.deltas_svg.unwrap()).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("circle")).count(), 12);
        assert_eq!(std::fs::read_to_string(files.deltas_csv).unwrap().lines().count(), 13);
    }
}
