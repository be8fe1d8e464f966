//! One markdown document per run directory, with SVG loss charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cascade::{ArtifactPaths, EvalSummary, LossCurve};
use crate::error::Result;

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// A minimal SVG line chart. Empty series are skipped.
pub fn line_chart(title: &str, x_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (560.0, 320.0, 48.0);
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    y0 = y0.min(0.0);
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#,
        w / 2.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = h - m,
        r = w - m
    )
    .unwrap();
    for (v, y) in [(y0, h - m), (y1, m)] {
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#,
            m - 4.0,
            y + 4.0
        )
        .unwrap();
    }
    for (v, x) in [(x0, m), (x1, w - m)] {
        writeln!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle">{v}</text>"#,
            h - m + 16.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        w / 2.0,
        h - 10.0
    )
    .unwrap();
    for (i, (name, s)) in series.iter().filter(|(_, s)| !s.is_empty()).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = s
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            d.join(" ")
        )
        .unwrap();
        let ly = m + 14.0 * i as f64;
        writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="3" fill="{color}"/><text x="{}" y="{}">{name}</text>"#,
            w - m - 110.0,
            ly,
            w - m - 96.0,
            ly + 4.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn read_curve(path: &Path) -> Option<LossCurve> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn tsv_to_markdown(tsv: &str) -> String {
    let mut out = String::new();
    for (i, line) in tsv.lines().enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        writeln!(out, "| {} |", cells.join(" | ")).unwrap();
        if i == 0 {
            writeln!(out, "|{}", " --- |".repeat(cells.len())).unwrap();
        }
    }
    out
}

/// Write `reports/summary.md` (plus one SVG per loss curve) for a run
/// directory and return the document path. Missing pieces are noted, not
/// treated as errors.
pub fn report(run_dir: &Path) -> Result<PathBuf> {
    let paths = ArtifactPaths::new(run_dir);
    let reports = run_dir.join("reports");
    fs::create_dir_all(&reports)?;
    let mut doc = String::from("# Run summary\n\n");
    match paths.config() {
        Ok(cfg) => writeln!(doc, "Run seed {}, config hash `{:016x}`.\n", cfg.seed, cfg.hash()).unwrap(),
        Err(_) => doc.push_str("No `config.toml` in this run directory.\n\n"),
    }

    doc.push_str("## Test set\n\n");
    match fs::read_to_string(paths.report("eval"))
        .ok()
        .and_then(|s| serde_json::from_str::<EvalSummary>(&s).ok())
    {
        Some(e) => {
            doc.push_str("| method | BLEU | pivot inconsistency rate | sentences |\n| --- | --- | --- | --- |\n");
            if let Some(d) = &e.direct {
                writeln!(doc, "| direct | {:.2} | - | {} |", d.bleu, d.sentences).unwrap();
            }
            for (name, r) in [("pivot (hard)", &e.pivot), ("cascade (soft, fine-tuned)", &e.cascade)] {
                writeln!(
                    doc,
                    "| {name} | {:.2} | {:.4} | {} |",
                    r.bleu, r.inconsistency_rate, r.sentences
                )
                .unwrap();
            }
            doc.push_str(
                "\nThe inconsistency rate is the share of selected pivot positions whose token is not the \
                 argmax of the distribution stored for it.\n\n",
            );
        }
        None => doc.push_str("Not evaluated yet.\n\n"),
    }

    doc.push_str("## Loss curves\n\n");
    let mut any = false;
    for name in ["pretrain.sp", "pretrain.pt", "pretrain.direct", "finetune"] {
        let Some(c) = read_curve(&paths.report(name)) else {
            continue;
        };
        any = true;
        let train: Vec<(f64, f64)> = c.train.iter().map(|&(s, l)| (s as f64, l)).collect();
        let valid: Vec<(f64, f64)> = c.valid.iter().map(|p| (p.step as f64, p.loss)).collect();
        let svg = line_chart(name, "step", &[("train", train), ("valid", valid)]);
        let file = format!("{name}.svg");
        fs::write(reports.join(&file), svg)?;
        writeln!(doc, "### {name}\n\n![{name}]({file})\n").unwrap();
        doc.push_str("| step | train loss | valid loss | valid BLEU |\n| --- | --- | --- | --- |\n");
        for (t, v) in c.train.iter().zip(&c.valid) {
            let b = v.bleu.map_or("-".to_string(), |b| format!("{b:.2}"));
            writeln!(doc, "| {} | {:.4} | {:.4} | {b} |", t.0, t.1, v.loss).unwrap();
        }
        doc.push('\n');
    }
    if !any {
        doc.push_str("No training reports yet.\n\n");
    }

    let mut tables: Vec<PathBuf> = fs::read_dir(&reports)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    tables.sort();
    if !tables.is_empty() {
        doc.push_str("## Ablations\n\n");
        for t in tables {
            let name = t.file_stem().unwrap().to_string_lossy();
            writeln!(doc, "### {name}\n\n{}", tsv_to_markdown(&fs::read_to_string(&t)?)).unwrap();
        }
    }
    let out = reports.join("summary.md");
    fs::write(&out, doc)?;
    Ok(out)
}
