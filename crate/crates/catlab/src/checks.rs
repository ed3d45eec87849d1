//! Pass/fail checks over experiment reports, used by `--check` mode.

use catlab_core::experiment::{tag_of, Report};

/// Thresholds for the report checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Minimum chrF gap between the clean and the misaligned tag on test.
    pub tag_gap: f64,
    /// OCAT may trail the best pretrained tag by at most this much.
    pub ocat_vs_best: f64,
    /// OCAT must beat the untagged baseline by at least this much.
    pub ocat_vs_baseline: f64,
    pub ocat_overfit_delta: f64,
    pub full_overfit_delta: f64,
    pub full_tune_chrf: f64,
    pub ocat_flat_range: f64,
    pub baseline_degradation: f64,
    pub size_n1_delta: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tag_gap: 5.0,
            ocat_vs_best: 0.5,
            ocat_vs_baseline: 1.0,
            ocat_overfit_delta: -1.0,
            full_overfit_delta: -5.0,
            full_tune_chrf: 95.0,
            ocat_flat_range: 2.0,
            baseline_degradation: 5.0,
            size_n1_delta: -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail,
        }
    }

    fn missing(name: &str, what: &str) -> Self {
        Self::new(name, false, format!("report lacks {what}"))
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

fn num(r: &Report, row: usize, col: &str) -> Option<f64> {
    r.get(row, col)?.as_f64()
}

fn text<'a>(r: &'a Report, row: usize, col: &str) -> Option<&'a str> {
    r.get(row, col)?.as_str()
}

/// Scores of the CAT report that the checks use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatScores {
    pub clean_tag: f64,
    pub misaligned_tag: f64,
    pub best_tag_test: f64,
    pub baseline: f64,
    pub ocat: f64,
}

/// Extracts test scores; the best pretrained tag is the one with the top dev score.
pub fn cat_scores(r: &Report, clean_corpus: &str, misaligned_corpus: &str) -> Option<CatScores> {
    let row_of = |system: &str, tag: &str| {
        (0..r.rows.len()).find(|&i| text(r, i, "system") == Some(system) && text(r, i, "tag") == Some(tag))
    };
    let test = |i: usize| num(r, i, "test_chrf");
    let cat_rows = r.rows_where("system", "cat");
    let best = cat_rows.iter().copied().max_by(|&a, &b| {
        let (x, y) = (
            num(r, a, "dev_chrf").unwrap_or(f64::MIN),
            num(r, b, "dev_chrf").unwrap_or(f64::MIN),
        );
        x.total_cmp(&y).then(b.cmp(&a))
    })?;
    Some(CatScores {
        clean_tag: test(row_of("cat", &tag_of(clean_corpus))?)?,
        misaligned_tag: test(row_of("cat", &tag_of(misaligned_corpus))?)?,
        best_tag_test: test(best)?,
        baseline: test(*r.rows_where("system", "baseline").first()?)?,
        ocat: test(*r.rows_where("system", "ocat").first()?)?,
    })
}

pub fn check_tag_sensitivity(s: &CatScores, t: &Thresholds) -> CheckResult {
    let gap = s.clean_tag - s.misaligned_tag;
    CheckResult::new(
        "tag-sensitivity",
        gap >= t.tag_gap,
        format!(
            "clean {:.2} - misaligned {:.2} = {gap:.2} (need >= {})",
            s.clean_tag, s.misaligned_tag, t.tag_gap
        ),
    )
}

pub fn check_ocat_improvement(s: &CatScores, t: &Thresholds) -> CheckResult {
    let ok = s.ocat >= s.best_tag_test - t.ocat_vs_best && s.ocat >= s.baseline + t.ocat_vs_baseline;
    CheckResult::new(
        "ocat-improvement",
        ok,
        format!(
            "ocat {:.2}, best tag {:.2} (need >= -{}), baseline {:.2} (need >= +{})",
            s.ocat, s.best_tag_test, t.ocat_vs_best, s.baseline, t.ocat_vs_baseline
        ),
    )
}

pub fn check_overfit(r: &Report, t: &Thresholds) -> CheckResult {
    const NAME: &str = "overfitting-resilience";
    let (Some(&o), Some(&f)) = (
        r.rows_where("method", "ocat").first(),
        r.rows_where("method", "full").first(),
    ) else {
        return CheckResult::missing(NAME, "ocat and full rows");
    };
    let (Some(od), Some(fd), Some(ft)) = (
        num(r, o, "heldout_delta"),
        num(r, f, "heldout_delta"),
        num(r, f, "tune_chrf"),
    ) else {
        return CheckResult::missing(NAME, "delta columns");
    };
    CheckResult::new(
        NAME,
        od >= t.ocat_overfit_delta && fd <= t.full_overfit_delta && ft > t.full_tune_chrf,
        format!(
            "ocat delta {od:.2} (need >= {}), full delta {fd:.2} (need <= {}), full tune {ft:.2} (need > {})",
            t.ocat_overfit_delta, t.full_overfit_delta, t.full_tune_chrf
        ),
    )
}

pub fn check_stability(r: &Report, t: &Thresholds) -> CheckResult {
    const NAME: &str = "stability-sweep";
    let ocat: Vec<f64> = r
        .rows_where("method", "ocat")
        .iter()
        .filter_map(|&i| num(r, i, "heldout_chrf"))
        .collect();
    if ocat.is_empty() {
        return CheckResult::missing(NAME, "ocat rows");
    }
    let range = ocat.iter().cloned().fold(f64::MIN, f64::max) - ocat.iter().cloned().fold(f64::MAX, f64::min);
    let worst = (0..r.rows.len())
        .filter(|&i| text(r, i, "method") != Some("ocat"))
        .filter_map(|i| num(r, i, "heldout_delta"))
        .fold(f64::INFINITY, f64::min);
    CheckResult::new(
        NAME,
        range <= t.ocat_flat_range && worst < -t.baseline_degradation,
        format!(
            "ocat held-out range {range:.2} (need <= {}), worst baseline delta {worst:.2} (need < -{})",
            t.ocat_flat_range, t.baseline_degradation
        ),
    )
}

pub fn check_size(r: &Report, t: &Thresholds) -> CheckResult {
    const NAME: &str = "finetune-size";
    let mut pts: Vec<(f64, f64)> = (0..r.rows.len())
        .filter_map(|i| Some((num(r, i, "n")?, num(r, i, "heldout_delta")?)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let Some(&(n_min, d1)) = pts.first().filter(|p| p.0 == 1.0) else {
        return CheckResult::missing(NAME, "an n=1 row");
    };
    let &(n_max, dmax) = pts.last().expect("non-empty");
    CheckResult::new(
        NAME,
        d1 >= t.size_n1_delta && dmax >= d1,
        format!(
            "delta(n={n_min}) {d1:.2} (need >= {}), delta(n={n_max}) {dmax:.2} (need >= delta(n=1))",
            t.size_n1_delta
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use catlab_core::experiment::Value;
    use std::collections::BTreeMap;

    fn report(columns: &[&str], rows: Vec<Vec<Value>>) -> Report {
        Report {
            kind: "t".into(),
            experiment: "t".into(),
            config_hash: "0".into(),
            seeds: BTreeMap::new(),
            metric_signature: String::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows,
        }
    }

    #[test]
    fn size_check_reads_extremes() {
        let cols = ["n", "heldout_chrf", "heldout_delta"];
        let ok = report(
            &cols,
            vec![
                vec![1usize.into(), 50.0.into(), (-1.0).into()],
                vec![100usize.into(), 52.0.into(), 1.0.into()],
            ],
        );
        assert!(check_size(&ok, &Thresholds::default()).passed);
        let bad = report(&cols, vec![vec![1usize.into(), 50.0.into(), (-3.0).into()]]);
        assert!(!check_size(&bad, &Thresholds::default()).passed);
        assert!(!check_size(&report(&cols, vec![]), &Thresholds::default()).passed);
    }

    #[test]
    fn stability_check_needs_flat_ocat_and_a_degraded_baseline() {
        let cols = [
            "method",
            "lr",
            "steps",
            "trainable",
            "tune_chrf",
            "heldout_chrf",
            "heldout_delta",
        ];
        let row = |m: &str, h: f64, d: f64| {
            vec![
                m.into(),
                1e-3.into(),
                10usize.into(),
                1usize.into(),
                90.0.into(),
                h.into(),
                d.into(),
            ]
        };
        let t = Thresholds::default();
        assert!(
            check_stability(
                &report(
                    &cols,
                    vec![row("ocat", 80.0, 0.0), row("ocat", 81.5, 1.5), row("full", 60.0, -20.0)]
                ),
                &t
            )
            .passed
        );
        assert!(
            !check_stability(
                &report(
                    &cols,
                    vec![row("ocat", 80.0, 0.0), row("ocat", 83.0, 3.0), row("full", 60.0, -20.0)]
                ),
                &t
            )
            .passed
        );
        assert!(
            !check_stability(
                &report(&cols, vec![row("ocat", 80.0, 0.0), row("lora", 79.0, -1.0)]),
                &t
            )
            .passed
        );
    }
}
