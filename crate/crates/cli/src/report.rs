//! Combined report, text tables and the confusion-matrix heatmap.

use std::fmt::Write as _;

use advsig::attacks::AttackLabel;
use advsig::eval::{EerEntry, KnownReport, TaskReport, REPORT_SCHEMA_VERSION};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Preset};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub schema_version: u32,
    pub preset: Preset,
    pub seed: u64,
    pub modes: Vec<TaskReport>,
}

/// Reorders a confusion matrix so its axes follow `order`.
pub fn reorder(k: &KnownReport, order: &[AttackLabel]) -> CliResult<KnownReport> {
    let mut classes: Vec<AttackLabel> = order.iter().copied().filter(|c| k.classes.contains(c)).collect();
    classes.extend(k.classes.iter().copied().filter(|c| !order.contains(c)));
    let idx: Vec<usize> = classes.iter().map(|c| k.classes.iter().position(|x| x == c).expect("present")).collect();
    let permute = |m: &Vec<Vec<f64>>| idx.iter().map(|&i| idx.iter().map(|&j| m[i][j]).collect()).collect();
    let counts: Vec<Vec<usize>> = idx.iter().map(|&i| idx.iter().map(|&j| k.confusion[i][j]).collect()).collect();
    if counts.iter().flatten().sum::<usize>() != k.evaluated {
        return Err(CliError::Runtime("confusion matrix does not sum to the evaluated count".into()));
    }
    Ok(KnownReport {
        classes,
        accuracy: k.accuracy,
        evaluated: k.evaluated,
        confusion: counts,
        confusion_percent: permute(&k.confusion_percent),
    })
}

pub fn combine(cfg: &ExperimentConfig, reports: Vec<TaskReport>, order: &[AttackLabel]) -> CliResult<CombinedReport> {
    let modes = reports
        .into_iter()
        .map(|mut r| {
            if r.schema_version != REPORT_SCHEMA_VERSION {
                return Err(CliError::Runtime(format!("evaluation schema {} is not {}", r.schema_version, REPORT_SCHEMA_VERSION)));
            }
            r.known_classification = reorder(&r.known_classification, order)?;
            Ok(r)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(CombinedReport { schema_version: REPORT_SCHEMA_VERSION, preset: cfg.preset, seed: cfg.seed, modes })
}

fn pct(e: &EerEntry) -> String {
    e.eer.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

fn table(out: &mut String, title: &str, header: &[&str], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join(" | ").trim_end().to_string()
    };
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", line(header.to_vec()));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for r in rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
    out.push('\n');
}

/// Known-attack accuracy, verification EERs and detection EERs per mode.
pub fn render_tables(r: &CombinedReport) -> String {
    let mut out = String::new();
    let sys = |m: &TaskReport| vec![m.mode.name().to_string(), m.train_input.as_str().to_string(), m.test_input.as_str().to_string()];
    let rows: Vec<Vec<String>> = r
        .modes
        .iter()
        .map(|m| {
            let k = &m.known_classification;
            [sys(m), vec![format!("{:.2}", 100.0 * k.accuracy), k.evaluated.to_string()]].concat()
        })
        .collect();
    table(&mut out, "Known attack classification", &["System", "Train", "Test", "Accuracy(%)", "N"], &rows);
    let rows: Vec<Vec<String>> = r
        .modes
        .iter()
        .map(|m| {
            let v = &m.verification;
            [vec![m.mode.name().to_string()], vec![pct(&v.known), pct(&v.unknown), pct(&v.known_unknown)]].concat()
        })
        .collect();
    table(&mut out, "Attack verification, attack group EER(%)", &["System", "Known", "Unknown", "Known+Unknown"], &rows);
    let rows: Vec<Vec<String>> = r
        .modes
        .iter()
        .map(|m| vec![m.mode.name().to_string(), pct(&m.detection.with_benign), pct(&m.detection.without_benign)])
        .collect();
    table(&mut out, "Unknown attack detection EER(%)", &["System", "With benign", "Without benign"], &rows);
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Row-normalised confusion matrix as an SVG heatmap, rows true class and
/// columns predicted, in the report's class order.
pub fn heatmap_svg(k: &KnownReport, title: &str) -> String {
    let n = k.classes.len();
    let (cell, left, top) = (48usize, 96usize, 64usize);
    let (w, h) = (left + n * cell + 16, top + n * cell + 40);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" font-size="13" text-anchor="middle">{} (accuracy {:.2}%)</text>"#, w / 2, escape(title), 100.0 * k.accuracy);
    for (i, row) in k.confusion_percent.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 - 2.2 * v).clamp(0.0, 255.0) as u8;
            let (x, y) = (left + j * cell, top + i * cell);
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="white"/>"#);
            let ink = if v > 55.0 { "white" } else { "black" };
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.1}</text>"#, x + cell / 2, y + cell / 2 + 4);
        }
    }
    for (i, c) in k.classes.iter().enumerate() {
        let name = escape(c.name());
        let _ = writeln!(s, r#"<text class="row" x="{}" y="{}" text-anchor="end">{name}</text>"#, left - 6, top + i * cell + cell / 2 + 4);
        let _ = writeln!(s, r#"<text class="col" x="{}" y="{}" text-anchor="middle">{name}</text>"#, left + i * cell + cell / 2, top - 8);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">predicted</text>"#, left + n * cell / 2, top + n * cell + 24);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use advsig::eval::{DetectionReport, VerificationReport};
    use advsig::signature::{ExperimentMode, InputKind};
    use AttackLabel::*;

    fn known() -> KnownReport {
        KnownReport {
            classes: vec![Fgsm, PgdL2, CwL2],
            accuracy: 0.5,
            evaluated: 6,
            confusion: vec![vec![1, 1, 0], vec![0, 2, 0], vec![2, 0, 0]],
            confusion_percent: vec![vec![50.0, 50.0, 0.0], vec![0.0, 100.0, 0.0], vec![100.0, 0.0, 0.0]],
        }
    }

    #[test]
    fn reorder_follows_configured_order() {
        let r = reorder(&known(), &[Benign, CwL2, Fgsm, PgdL2]).unwrap();
        assert_eq!(r.classes, vec![CwL2, Fgsm, PgdL2]);
        assert_eq!(r.confusion, vec![vec![0, 2, 0], vec![0, 1, 1], vec![0, 0, 2]]);
        assert_eq!(r.confusion_percent[0], vec![0.0, 100.0, 0.0]);
    }

    #[test]
    fn heatmap_axes_enumerate_classes_in_order() {
        let svg = heatmap_svg(&known(), "Oracle");
        let rows: Vec<&str> = svg.lines().filter(|l| l.contains(r#"class="row""#)).collect();
        assert_eq!(rows.len(), 3);
        for (line, c) in rows.iter().zip([Fgsm, PgdL2, CwL2]) {
            assert!(line.ends_with(&format!(">{}</text>", c.name())));
        }
        assert_eq!(svg.matches("<rect").count(), 9);
    }

    #[test]
    fn verification_table_has_group_headers() {
        let entry = |e| EerEntry { eer: e, targets: 3, nontargets: 9, note: None };
        let m = TaskReport {
            schema_version: REPORT_SCHEMA_VERSION,
            mode: ExperimentMode::Proposed,
            train_input: InputKind::Perturbation,
            test_input: InputKind::EstimatedPerturbation,
            known_classification: known(),
            verification: VerificationReport { known: entry(Some(0.0514)), unknown: entry(None), known_unknown: entry(Some(0.1457)) },
            detection: DetectionReport { with_benign: entry(Some(0.3799)), without_benign: entry(Some(0.0906)) },
            warnings: vec![],
        };
        let text = render_tables(&CombinedReport { schema_version: 1, preset: Preset::Smoke, seed: 0, modes: vec![m] });
        let lines: Vec<&str> = text.lines().collect();
        let at = lines.iter().position(|l| l.starts_with("Attack verification")).unwrap();
        let cols: Vec<&str> = lines[at + 1].split('|').map(str::trim).collect();
        assert_eq!(cols, ["System", "Known", "Unknown", "Known+Unknown"]);
        assert!(lines[at + 3].contains("5.14") && lines[at + 3].contains("n/a") && lines[at + 3].contains("14.57"));
        assert!(text.contains("37.99") && text.contains("9.06"));
    }
}
