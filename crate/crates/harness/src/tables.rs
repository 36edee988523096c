use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Setting;
use crate::error::{io_err, HarnessError};
use crate::experiment::{write_json, ExperimentReport, RunRecord, MIXED_TEST, TEST_ID, TEST_OOD, VAL_ID, VAL_OOD};

/// Mean and sample standard deviation (n - 1 denominator, 0 when n = 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// `"52.6 (0.5)"`. Inputs are already in percent.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.1} ({std:.1})")
}

pub const COMPARE_COLUMNS: [&str; 5] = [VAL_ID, VAL_OOD, TEST_ID, TEST_OOD, MIXED_TEST];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: String,
    pub setting: Setting,
    /// One per column; `None` where the split was not evaluated.
    pub cells: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub benchmark_fingerprint: String,
    pub columns: Vec<String>,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("strategy,setting,{}\n", self.columns.join(","));
        for r in &self.rows {
            let cells: Vec<&str> = r.cells.iter().map(|c| c.as_deref().unwrap_or("")).collect();
            let _ = writeln!(s, "{},{},{}", r.strategy, r.setting, cells.join(","));
        }
        s
    }

    pub fn row(&self, strategy: &str, setting: Setting) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.setting == setting)
    }
}

/// One row per (strategy, setting) across all reports, ADA mean (std) in percent.
pub fn compare(reports: &[ExperimentReport]) -> Result<CompareTable, HarnessError> {
    let first = reports.first().ok_or_else(|| HarnessError::Mismatch("no reports to compare".into()))?;
    if let Some(r) = reports.iter().find(|r| r.benchmark_fingerprint != first.benchmark_fingerprint) {
        return Err(HarnessError::Mismatch(format!(
            "benchmark fingerprints differ: {} vs {}",
            &first.benchmark_fingerprint[..12.min(first.benchmark_fingerprint.len())],
            &r.benchmark_fingerprint[..12.min(r.benchmark_fingerprint.len())]
        )));
    }
    let mut rows = Vec::new();
    for report in reports {
        for strategy in report.strategies() {
            for &setting in &report.config.settings {
                let cells = COMPARE_COLUMNS
                    .iter()
                    .map(|&split| {
                        report.aggregate(&strategy, setting, split).map(|a| format_cell(100.0 * a.mean, 100.0 * a.std))
                    })
                    .collect();
                rows.push(CompareRow { strategy: strategy.clone(), setting, cells });
            }
        }
    }
    Ok(CompareTable {
        benchmark_fingerprint: first.benchmark_fingerprint.clone(),
        columns: COMPARE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

/// Per-domain accuracies of one strategy, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyAccs {
    pub strategy: String,
    /// Mixed-trained model on mixed-test.
    pub id: BTreeMap<usize, f64>,
    /// Officially trained model on mixed-test.
    pub ood: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub id: f64,
    pub ood: f64,
    pub ggap: f64,
}

impl GapCell {
    pub fn new(id: f64, ood: f64) -> Self {
        GapCell { id, ood, ggap: dplab_core::evalmetrics::generalisation_gap(id, ood) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgapRow {
    /// Domain index, or `None` for the Total row.
    pub domain: Option<usize>,
    pub cells: Vec<GapCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairWins {
    pub better: String,
    pub worse: String,
    /// Domains where `better` has the strictly smaller gap.
    pub count: usize,
    pub of: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgapTable {
    pub strategies: Vec<String>,
    pub rows: Vec<GgapRow>,
    pub total: GgapRow,
    pub wins: Vec<PairWins>,
}

impl GgapTable {
    pub fn wins(&self, better: &str, worse: &str) -> Option<&PairWins> {
        self.wins.iter().find(|w| w.better == better && w.worse == worse)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain");
        for st in &self.strategies {
            let _ = write!(s, ",{st}_id,{st}_ood,{st}_ggap");
        }
        s.push('\n');
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            match row.domain {
                Some(d) => {
                    let _ = write!(s, "{d}");
                }
                None => s.push_str("Total"),
            }
            for c in &row.cells {
                let _ = write!(s, ",{:.1},{:.1},{:.1}", c.id, c.ood, c.ggap);
            }
            s.push('\n');
        }
        s
    }
}

/// Gap table from per-domain accuracies. Every strategy must cover the same domains.
pub fn build_ggap(accs: &[StrategyAccs]) -> Result<GgapTable, HarnessError> {
    let first = accs.first().ok_or_else(|| HarnessError::Mismatch("no strategies for the gap table".into()))?;
    let domains: BTreeSet<usize> = first.id.keys().copied().collect();
    for a in accs {
        let id: BTreeSet<usize> = a.id.keys().copied().collect();
        let ood: BTreeSet<usize> = a.ood.keys().copied().collect();
        if id != domains || ood != domains {
            return Err(HarnessError::Mismatch(format!("strategy {} covers a different domain set", a.strategy)));
        }
    }
    if domains.is_empty() {
        return Err(HarnessError::Mismatch("gap table needs at least one domain".into()));
    }
    let rows: Vec<GgapRow> = domains
        .iter()
        .map(|d| GgapRow { domain: Some(*d), cells: accs.iter().map(|a| GapCell::new(a.id[d], a.ood[d])).collect() })
        .collect();
    let n = domains.len() as f64;
    let total = GgapRow {
        domain: None,
        cells: accs
            .iter()
            .map(|a| GapCell::new(a.id.values().sum::<f64>() / n, a.ood.values().sum::<f64>() / n))
            .collect(),
    };
    let mut wins = Vec::new();
    for (i, a) in accs.iter().enumerate() {
        for (j, b) in accs.iter().enumerate() {
            if i == j {
                continue;
            }
            let count = rows.iter().filter(|r| r.cells[i].ggap < r.cells[j].ggap).count();
            wins.push(PairWins { better: a.strategy.clone(), worse: b.strategy.clone(), count, of: rows.len() });
        }
    }
    Ok(GgapTable { strategies: accs.iter().map(|a| a.strategy.clone()).collect(), rows, total, wins })
}

/// Mean over seeds of each domain's accuracy on `split`, in percent.
fn mean_domain_accs(report: &ExperimentReport, strategy: &str, setting: Setting, split: &str) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in report.runs_for(strategy, setting) {
        if let Some(r) = run.splits.get(split) {
            for d in &r.per_domain {
                acc.entry(d.domain).or_default().push(100.0 * d.acc);
            }
        }
    }
    acc.into_iter().map(|(d, v)| (d, mean_std(&v).0)).collect()
}

/// ID accuracy from the mixed-trained runs, OOD accuracy from the officially
/// trained runs, both on the mixed-test images. The two reports may be the same.
pub fn ggap_table(official: &ExperimentReport, mixed: &ExperimentReport) -> Result<GgapTable, HarnessError> {
    if official.benchmark_fingerprint != mixed.benchmark_fingerprint {
        return Err(HarnessError::Mismatch("reports were run on different benchmarks".into()));
    }
    let mut accs = Vec::new();
    for strategy in official.strategies() {
        let ood = mean_domain_accs(official, &strategy, Setting::Official, MIXED_TEST);
        let id = mean_domain_accs(mixed, &strategy, Setting::MixedToTest, MIXED_TEST);
        if ood.is_empty() || id.is_empty() {
            continue;
        }
        accs.push(StrategyAccs { strategy, id, ood });
    }
    if accs.is_empty() {
        return Err(HarnessError::Mismatch("no strategy has both official and mixed_to_test runs".into()));
    }
    build_ggap(&accs)
}

/// True when every element is <= its predecessor.
pub fn is_monotone_non_increasing(seq: &[f64]) -> bool {
    seq.windows(2).all(|w| w[1] <= w[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMonotonicity {
    pub strategy: String,
    pub setting: Setting,
    pub seed: u64,
    pub per_domain: BTreeMap<usize, bool>,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicitySummary {
    pub runs: Vec<RunMonotonicity>,
    /// Mean monotone fraction over seeds, keyed `strategy/setting`.
    pub per_strategy: BTreeMap<String, f64>,
}

impl MonotonicitySummary {
    pub fn fraction(&self, strategy: &str, setting: Setting) -> Option<f64> {
        self.per_strategy.get(&format!("{strategy}/{setting}")).copied()
    }
}

/// Long-format rows: `epoch,domain,avg_loss,weight,mean_batch_loss`.
pub fn curves_csv(run: &RunRecord) -> String {
    let mut s = String::from("epoch,domain,avg_loss,weight,mean_batch_loss\n");
    for e in &run.history {
        for (d, l) in &e.per_domain_avg_loss {
            let w = e.weights_used.get(*d).unwrap_or(f64::NAN);
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, d, l, w, e.mean_batch_loss);
        }
    }
    s
}

pub fn run_monotonicity(run: &RunRecord) -> RunMonotonicity {
    let mut seqs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in &run.history {
        for (d, l) in &e.per_domain_avg_loss {
            seqs.entry(*d).or_default().push(*l);
        }
    }
    let per_domain: BTreeMap<usize, bool> = seqs.iter().map(|(d, s)| (*d, is_monotone_non_increasing(s))).collect();
    let fraction = per_domain.values().filter(|m| **m).count() as f64 / per_domain.len().max(1) as f64;
    RunMonotonicity { strategy: run.strategy.clone(), setting: run.setting, seed: run.seed, per_domain, fraction }
}

pub fn monotonicity(report: &ExperimentReport) -> MonotonicitySummary {
    let runs: Vec<RunMonotonicity> = report.runs.iter().map(run_monotonicity).collect();
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        grouped.entry(format!("{}/{}", r.strategy, r.setting)).or_default().push(r.fraction);
    }
    let per_strategy = grouped.into_iter().map(|(k, v)| (k, mean_std(&v).0)).collect();
    MonotonicitySummary { runs, per_strategy }
}

/// One CSV per run plus `monotonicity.json` in `dir`.
pub fn export_curves(report: &ExperimentReport, dir: &Path) -> Result<MonotonicitySummary, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for run in &report.runs {
        let path = dir.join(format!("{}.csv", run.key()));
        fs::write(&path, curves_csv(run)).map_err(io_err(&path))?;
    }
    let summary = monotonicity(report);
    write_json(&dir.join("monotonicity.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dplab_core::penalise::{DomainWeights, ScaleMode};
    use dplab_core::trainer::EpochStats;

    #[test]
    fn cell_formatting() {
        assert_eq!(format_cell(51.2, 1.8), "51.2 (1.8)");
        assert_eq!(format_cell(52.6, 0.5), "52.6 (0.5)");
        assert_eq!(format_cell(47.94, 0.05), "47.9 (0.1)");
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn monotone_sequences() {
        assert!(is_monotone_non_increasing(&[3.0, 2.0, 1.0]));
        assert!(is_monotone_non_increasing(&[1.0, 1.0]));
        assert!(!is_monotone_non_increasing(&[1.0, 1.2, 0.9]));
        assert!(is_monotone_non_increasing(&[]));
    }

    fn accs(name: &str, id: &[(usize, f64)], ood: &[(usize, f64)]) -> StrategyAccs {
        StrategyAccs { strategy: name.into(), id: id.iter().copied().collect(), ood: ood.iter().copied().collect() }
    }

    #[test]
    fn single_session_gap() {
        let c = GapCell::new(63.1, 48.0);
        assert_eq!(format!("{:.1}", c.ggap), "15.1");
        assert!((c.ggap - 15.1).abs() < 1e-12);
        assert_eq!(GapCell::new(40.0, 40.0).ggap, 0.0);
    }

    #[test]
    fn hand_built_two_domain_table() {
        let t = build_ggap(&[
            accs("erm", &[(7, 60.0), (8, 50.0)], &[(7, 40.0), (8, 45.0)]),
            accs("dp", &[(7, 62.0), (8, 48.0)], &[(7, 50.0), (8, 40.0)]),
        ])
        .unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].cells[0].ggap, 20.0);
        assert_eq!(t.rows[1].cells[0].ggap, 5.0);
        assert_eq!(t.rows[0].cells[1].ggap, 12.0);
        assert_eq!(t.rows[1].cells[1].ggap, 8.0);
        assert_eq!(t.total.cells[0], GapCell::new(55.0, 42.5));
        assert_eq!(t.total.cells[1], GapCell::new(55.0, 45.0));
        assert_eq!(t.wins("dp", "erm").unwrap().count, 1);
        assert_eq!(t.wins("erm", "dp").unwrap().count, 1);
        let csv = t.to_csv();
        assert!(csv.starts_with("domain,erm_id,erm_ood,erm_ggap,dp_id,dp_ood,dp_ggap\n7,60.0,40.0,20.0,"));
        assert!(csv.ends_with("Total,55.0,42.5,12.5,55.0,45.0,10.0\n"));
    }

    #[test]
    fn domain_set_mismatch() {
        let r = build_ggap(&[accs("a", &[(1, 1.0)], &[(2, 1.0)])]);
        assert!(matches!(r, Err(HarnessError::Mismatch(_))));
    }

    fn fake_run(losses: &[[f64; 2]]) -> RunRecord {
        let w = DomainWeights::unity([0usize, 1], ScaleMode::DomainCount).unwrap();
        RunRecord {
            strategy: "dp".into(),
            setting: Setting::Official,
            seed: 0,
            splits: BTreeMap::new(),
            history: losses
                .iter()
                .enumerate()
                .map(|(e, l)| EpochStats {
                    epoch: e,
                    per_domain_avg_loss: [(0, l[0]), (1, l[1])].into_iter().collect(),
                    weights_used: w.clone(),
                    mean_batch_loss: 0.5,
                    image_losses: vec![],
                })
                .collect(),
            final_weights: BTreeMap::new(),
            final_train_losses: BTreeMap::new(),
            checkpoint: String::new(),
        }
    }

    #[test]
    fn curve_rows_and_monotonicity() {
        let run = fake_run(&[[1.0, 1.0], [0.8, 1.2], [0.7, 0.9]]);
        let csv = curves_csv(&run);
        assert_eq!(csv.lines().count(), 1 + 6);
        assert_eq!(csv.lines().nth(1).unwrap(), "0,0,1,1,0.5");
        let m = run_monotonicity(&run);
        assert!(m.per_domain[&0]);
        assert!(!m.per_domain[&1]);
        assert_eq!(m.fraction, 0.5);
    }
}
