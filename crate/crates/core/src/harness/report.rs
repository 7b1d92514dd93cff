use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::routing::RouteReport;
use crate::train::MetricRecord;

/// Parses a metrics log written one [`MetricRecord`] per line.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let err = |msg: &str| Error::Parse {
                line: n + 1,
                msg: msg.to_string(),
            };
            let mut fields = BTreeMap::new();
            for f in line.split_whitespace() {
                let (k, v) = f.split_once('=').ok_or_else(|| err("expected key=value"))?;
                fields.insert(k, v);
            }
            let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(&format!("missing {k}")));
            let num = |k: &str| get(k)?.parse::<f64>().map_err(|_| err(&format!("bad {k}")));
            Ok(MetricRecord {
                step: get("step")?.parse().map_err(|_| err("bad step"))?,
                phase: get("phase")?.parse().map_err(|_| err("bad phase"))?,
                target: get("target")?.to_string(),
                loss: num("loss")?,
                kd: num("kd")?,
                collapse: num("collapse")?,
            })
        })
        .collect()
}

/// Per-target step counts and mean loss over the last quarter of each target's steps.
pub fn render_metrics(records: &[MetricRecord]) -> String {
    let mut by_target: BTreeMap<&str, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_target.entry(&r.target).or_default().push(r);
    }
    let mut s = String::new();
    writeln!(s, "{:<8} {:>6} {:>12} {:>12} {:>10}", "target", "steps", "tail_loss", "tail_kd", "collapse").unwrap();
    for (t, rs) in by_target {
        let tail = &rs[rs.len() - rs.len().div_ceil(4)..];
        let mean = |f: fn(&MetricRecord) -> f64| tail.iter().map(|r| f(r)).sum::<f64>() / tail.len() as f64;
        writeln!(
            s,
            "{:<8} {:>6} {:>12.5} {:>12.5} {:>10.5}",
            t,
            rs.len(),
            mean(|r| r.loss),
            mean(|r| r.kd),
            mean(|r| r.collapse)
        )
        .unwrap();
    }
    s
}

/// Accuracy table per report, gains against the report's baseline (or the full
/// net when none was recorded) and the spread of per-path accuracy.
pub fn render_route_reports(reports: &[(String, RouteReport)]) -> String {
    let mut s = String::new();
    for (label, r) in reports {
        let reference = r.baseline.unwrap_or(r.full_accuracy);
        let reference_name = if r.baseline.is_some() { "baseline" } else { "full" };
        writeln!(s, "== {label} (task {}, k={}) ==", r.task, r.k).unwrap();
        writeln!(s, "{:<6} {:<10} {:>9} {:>9}", "path", "digits", "acc", "gain").unwrap();
        for e in &r.entries {
            let mark = if r.best == Some(e.index) { " *" } else { "" };
            writeln!(
                s,
                "{:<6} {:<10} {:>9.4} {:>+9.4}{mark}",
                e.index,
                e.path.digit_string(),
                e.accuracy,
                e.accuracy - reference
            )
            .unwrap();
        }
        writeln!(s, "{:<6} {:<10} {:>9.4} {:>+9.4}", "full", "-", r.full_accuracy, r.full_accuracy - reference).unwrap();
        if let Some(b) = r.baseline {
            writeln!(s, "baseline acc={b:.4}").unwrap();
        }
        writeln!(s, "gain reference={reference_name}").unwrap();
        writeln!(s, "path_std={:.6}", r.path_accuracy_std()).unwrap();
        writeln!(s).unwrap();
    }
    s
}

/// Whitespace-separated columns `report path gain` for plotting a gain histogram.
pub fn gain_columns(reports: &[(String, RouteReport)]) -> String {
    let mut s = String::from("# report path gain\n");
    for (i, (_, r)) in reports.iter().enumerate() {
        let reference = r.baseline.unwrap_or(r.full_accuracy);
        for e in &r.entries {
            writeln!(s, "{i} {} {}", e.index, e.accuracy - reference).unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::RouteEntry;

    fn report(accs: &[f64], baseline: Option<f64>) -> RouteReport {
        RouteReport {
            task: "t".into(),
            k: 5,
            seed: 1,
            entries: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| RouteEntry {
                    path: crate::sdrnet::path_decode(i, 2, 2).unwrap(),
                    index: i,
                    accuracy: a,
                })
                .collect(),
            full_accuracy: 0.5,
            best: Some(0),
            best_accuracy: accs[0],
            baseline,
        }
    }

    #[test]
    fn ablation_pair_prints_both_spreads() {
        let a = report(&[0.9, 0.5, 0.6, 0.7], Some(0.6));
        let b = report(&[0.7, 0.7, 0.7, 0.7], None);
        let text = render_route_reports(&[("siamkd".into(), a.clone()), ("l2".into(), b)]);
        assert!(text.contains(&format!("path_std={:.6}", a.path_accuracy_std())));
        assert!(text.contains("path_std=0.000000"));
        assert!(gain_columns(&[("a".into(), a)]).lines().count() == 5);
    }

    #[test]
    fn metrics_round_trip() {
        let r = MetricRecord {
            step: 4,
            phase: 2,
            target: "full".into(),
            loss: -0.75,
            kd: 0.0,
            collapse: 0.17,
        };
        let parsed = parse_metrics(&format!("{r}\n{r}\n")).unwrap();
        assert_eq!(parsed, vec![r.clone(), r]);
        assert!(render_metrics(&parsed).contains("full"));
        assert!(matches!(parse_metrics("step=1 phase=x\n"), Err(Error::Parse { line: 1, .. })));
    }
}
