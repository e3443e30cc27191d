//! Experiment reports: an aligned text rendering for people and a
//! line-per-run `key=value` form for machines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use crate::config::Seeds;
use crate::error::{FedError, Result};
use crate::model::{MetricLevel, Metrics};
use crate::protocol::{RoundRecord, SiteEval};

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub group: String,
    pub label: String,
    pub clients: usize,
    /// `50/50` style, or `-` for equal shards.
    pub ratios: String,
    pub strategy: String,
    pub rounds: u64,
    pub byzantine: usize,
    pub seeds: Seeds,
    pub entity: Metrics,
    pub token: Metrics,
    pub aborted_rounds: usize,
    pub model_digest: String,
}

impl RunRow {
    pub fn to_line(&self) -> String {
        let (e, t) = (&self.entity, &self.token);
        format!(
            "group={} label={} clients={} ratios={} strategy={} rounds={} byzantine={} \
             seed_data={} seed_model={} seed_net={} \
             entity_p={} entity_r={} entity_f1={} entity_tp={} entity_fp={} entity_fn={} \
             token_p={} token_r={} token_f1={} token_tp={} token_fp={} token_fn={} \
             aborted_rounds={} model_digest={}",
            self.group,
            self.label,
            self.clients,
            self.ratios,
            self.strategy,
            self.rounds,
            self.byzantine,
            self.seeds.data,
            self.seeds.model,
            self.seeds.net,
            e.precision,
            e.recall,
            e.f1,
            e.tp,
            e.fp,
            e.fn_,
            t.precision,
            t.recall,
            t.f1,
            t.tp,
            t.fp,
            t.fn_,
            self.aborted_rounds,
            self.model_digest
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = line
            .split_whitespace()
            .filter_map(|p| p.split_once('='))
            .collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| FedError::Config(format!("report row: missing `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| FedError::Config(format!("report row: bad `{k}`")))
        }
        let n = |k: &str| -> Result<u64> { num(k, get(k)?) };
        Ok(RunRow {
            group: get("group")?.into(),
            label: get("label")?.into(),
            clients: n("clients")? as usize,
            ratios: get("ratios")?.into(),
            strategy: get("strategy")?.into(),
            rounds: n("rounds")?,
            byzantine: n("byzantine")? as usize,
            seeds: Seeds {
                data: n("seed_data")?,
                model: n("seed_model")?,
                net: n("seed_net")?,
            },
            entity: Metrics::from_counts(
                n("entity_tp")?,
                n("entity_fp")?,
                n("entity_fn")?,
                MetricLevel::EntityStrict,
            ),
            token: Metrics::from_counts(
                n("token_tp")?,
                n("token_fp")?,
                n("token_fn")?,
                MetricLevel::Token,
            ),
            aborted_rounds: n("aborted_rounds")? as usize,
            model_digest: get("model_digest")?.into(),
        })
    }
}

pub fn parse_rows(text: &str) -> Result<Vec<RunRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(RunRow::parse_line)
        .collect()
}

pub fn rows_text(rows: &[RunRow]) -> String {
    rows.iter().map(|r| r.to_line() + "\n").collect()
}

const REFERENCE_NOTE: &str =
    "reference range for a BERT tagger on the full corpus: P 0.95-0.97  R 0.97-0.98  F1 0.96-0.97 (annotation only)";

fn group_title(group: &str) -> &str {
    match group {
        "clients" => "Number of clients",
        "imbalance" => "Data imbalance",
        "robust-clean" => "Robust aggregation, clean",
        "robust-byzantine" => "Robust aggregation, one Byzantine client",
        "single" => "Federation",
        other => other,
    }
}

fn column_name(row: &RunRow) -> String {
    match row.group.as_str() {
        "clients" | "single" => format!("n={}", row.clients),
        "imbalance" => row.ratios.clone(),
        "robust-clean" | "robust-byzantine" => row.strategy.clone(),
        _ => row.label.clone(),
    }
}

fn metric_table(out: &mut String, columns: &[(String, &Metrics)]) {
    let width = columns
        .iter()
        .map(|(c, _)| c.len())
        .max()
        .unwrap_or(0)
        .max(8);
    let _ = write!(out, "  {:<10}", "");
    for (c, _) in columns {
        let _ = write!(out, " {c:>width$}");
    }
    out.push('\n');
    type Getter = fn(&Metrics) -> f64;
    let metric_rows: [(&str, Getter); 3] = [
        ("precision", |m| m.precision),
        ("recall", |m| m.recall),
        ("f1", |m| m.f1),
    ];
    for (name, get) in metric_rows {
        let _ = write!(out, "  {name:<10}");
        for (_, m) in columns {
            let _ = write!(out, " {:>width$.4}", get(m));
        }
        out.push('\n');
    }
}

/// Aligned precision/recall/F1 tables, one per run group, at both metric
/// levels. Federated groups get a centralized column and an F1 delta when a
/// baseline row exists.
pub fn render_tables(rows: &[RunRow]) -> String {
    let central = rows.iter().find(|r| r.group == "centralized");
    let mut groups: Vec<&str> = Vec::new();
    for r in rows {
        if r.group != "centralized" && !groups.contains(&r.group.as_str()) {
            groups.push(&r.group);
        }
    }
    let mut out = String::new();
    for g in groups {
        let members: Vec<&RunRow> = rows.iter().filter(|r| r.group == g).collect();
        let with_central = matches!(g, "clients" | "imbalance" | "single")
            .then_some(central)
            .flatten();
        let _ = writeln!(out, "{}", group_title(g));
        for (level, pick) in [
            (
                "entity-strict",
                (|r: &RunRow| r.entity) as fn(&RunRow) -> Metrics,
            ),
            ("token", |r: &RunRow| r.token),
        ] {
            let _ = writeln!(out, " {level}");
            let mut cols: Vec<(String, Metrics)> =
                members.iter().map(|r| (column_name(r), pick(r))).collect();
            if let Some(c) = with_central {
                cols.push(("centralized".into(), pick(c)));
            }
            let refs: Vec<(String, &Metrics)> = cols.iter().map(|(n, m)| (n.clone(), m)).collect();
            metric_table(&mut out, &refs);
        }
        if let Some(c) = with_central {
            let _ = write!(out, "  f1 - centralized f1:");
            for r in &members {
                let _ = write!(out, " {}={:+.4}", column_name(r), r.entity.f1 - c.entity.f1);
            }
            out.push('\n');
        }
        let f1s: Vec<f64> = members.iter().map(|r| r.entity.f1).collect();
        if f1s.len() > 1 {
            let max = f1s.iter().cloned().fold(f64::MIN, f64::max);
            let min = f1s.iter().cloned().fold(f64::MAX, f64::min);
            let _ = writeln!(out, "  entity f1 spread: {:.4}", max - min);
        }
        out.push('\n');
    }
    if let Some(c) = central {
        let _ = writeln!(
            out,
            "Centralized baseline: entity f1 {:.4}, token f1 {:.4}\n",
            c.entity.f1, c.token.f1
        );
    }
    let _ = writeln!(out, "{REFERENCE_NOTE}");
    out
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<RunRow>,
    /// Round history per run label.
    pub rounds: Vec<(String, Vec<RoundRecord>)>,
    /// Cross-site table per run label.
    pub cross_site: Vec<(String, Vec<SiteEval>)>,
    pub runtime: Duration,
    pub config_echo: String,
}

impl Report {
    pub fn new(config_echo: String) -> Self {
        Self {
            rows: Vec::new(),
            rounds: Vec::new(),
            cross_site: Vec::new(),
            runtime: Duration::ZERO,
            config_echo,
        }
    }

    pub fn push_run(&mut self, row: RunRow, history: Vec<RoundRecord>, evals: Vec<SiteEval>) {
        if !history.is_empty() {
            self.rounds.push((row.label.clone(), history));
        }
        if !evals.is_empty() {
            self.cross_site.push((row.label.clone(), evals));
        }
        self.rows.push(row);
    }

    pub fn row(&self, label: &str) -> Option<&RunRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn rows_text(&self) -> String {
        rows_text(&self.rows)
    }

    pub fn to_text(&self) -> String {
        let mut out = render_tables(&self.rows);
        out.push_str("\nCross-site validation (entity-strict)\n");
        for (label, evals) in &self.cross_site {
            let _ = writeln!(out, " {label}");
            let _ = writeln!(
                out,
                "  {:<10} {:>9} {:>9} {:>9} {:>9}",
                "site", "sentences", "precision", "recall", "f1"
            );
            for e in evals {
                let _ = writeln!(
                    out,
                    "  {:<10} {:>9} {:>9.4} {:>9.4} {:>9.4}",
                    e.site_id, e.sentences, e.entity.precision, e.entity.recall, e.entity.f1
                );
            }
        }
        out.push_str("\nRounds\n");
        for (label, history) in &self.rounds {
            let aborted = history.iter().filter(|r| r.aborted).count();
            let late: usize = history.iter().map(|r| r.late_discarded.len()).sum();
            let virtual_ms: u64 = history.iter().map(|r| r.duration_ms).sum();
            let _ = writeln!(
                out,
                " {label}: {} rounds, {aborted} aborted, {late} late updates, {virtual_ms} virtual ms",
                history.len()
            );
            if let Some(last) = history.last() {
                let _ = writeln!(out, "  last: {}", last.summary());
            }
        }
        let _ = writeln!(out, "\nRuntime: {:.2} s", self.runtime.as_secs_f64());
        out.push_str("\nConfiguration\n");
        for line in self.config_echo.lines() {
            let _ = writeln!(out, "  {line}");
        }
        out
    }

    /// Writes `report.txt` and `report.rows` into `dir`.
    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
        for (name, body) in [
            ("report.txt", self.to_text()),
            ("report.rows", self.rows_text()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| FedError::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(group: &str, label: &str, clients: usize, tp: u64) -> RunRow {
        RunRow {
            group: group.into(),
            label: label.into(),
            clients,
            ratios: "-".into(),
            strategy: "fedavg".into(),
            rounds: 20,
            byzantine: 0,
            seeds: Seeds::default(),
            entity: Metrics::from_counts(tp, 3, 4, MetricLevel::EntityStrict),
            token: Metrics::from_counts(tp * 2, 1, 2, MetricLevel::Token),
            aborted_rounds: 0,
            model_digest: "ab".repeat(32),
        }
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![
            row("clients", "clients-2", 2, 90),
            row("centralized", "centralized", 1, 95),
        ];
        assert_eq!(parse_rows(&rows_text(&rows)).unwrap(), rows);
    }

    #[test]
    fn table_has_one_column_per_config() {
        let rows = vec![
            row("clients", "clients-2", 2, 90),
            row("clients", "clients-4", 4, 91),
            row("clients", "clients-6", 6, 92),
            row("centralized", "centralized", 1, 95),
        ];
        let text = render_tables(&rows);
        let header = text.lines().find(|l| l.contains("n=2")).unwrap();
        for col in ["n=2", "n=4", "n=6", "centralized"] {
            assert!(header.contains(col), "{header}");
        }
        let f1_lines = text
            .lines()
            .filter(|l| l.trim_start().starts_with("f1 ") && !l.contains("centralized f1"))
            .count();
        assert_eq!(f1_lines, 2);
        let precision = text
            .lines()
            .find(|l| l.trim_start().starts_with("precision"))
            .unwrap();
        assert_eq!(precision.split_whitespace().count(), 5);
    }
}
