//! Table rendering of segmentation and dose reports.

use std::fmt::Write as _;
use std::path::Path;

use soars_core::metrics::{Aggregate, MeanSd};

use crate::commands::{DoseReport, SegReport};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Md,
}

impl Format {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" => Ok(Format::Md),
            other => Err(CliError::Config(format!("--format {other}: expected csv or md"))),
        }
    }
}

pub enum AnyReport {
    Seg(SegReport),
    Dose(DoseReport),
}

pub fn load(path: &Path) -> Result<AnyReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |e: serde_json::Error| CliError::Data(format!("{}: {e}", path.display()));
    let v: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    match v.get("kind").and_then(|k| k.as_str()) {
        Some("segmentation") => Ok(AnyReport::Seg(serde_json::from_value(v).map_err(bad)?)),
        Some("dose") => Ok(AnyReport::Dose(serde_json::from_value(v).map_err(bad)?)),
        _ => Err(CliError::Data(format!("{}: not a segmentation or dose report", path.display()))),
    }
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        _ => String::new(),
    }
}

fn pm(m: &Option<MeanSd>) -> String {
    match m {
        Some(m) => format!("{:.4} ± {:.4}", m.mean, m.sd),
        None => "n/a".into(),
    }
}

pub fn render(r: &AnyReport, f: Format) -> String {
    match (r, f) {
        (AnyReport::Seg(s), Format::Csv) => seg_csv(s),
        (AnyReport::Seg(s), Format::Md) => seg_md(s),
        (AnyReport::Dose(d), Format::Csv) => dose_csv(d),
        (AnyReport::Dose(d), Format::Md) => dose_md(d),
    }
}

fn seg_csv(s: &SegReport) -> String {
    let mut out = String::from("case,organ,stratum,set,dsc,hd_mm,hd95_mm,asd_mm\n");
    for r in &s.report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.case,
            r.organ,
            r.stratum.name(),
            r.set,
            num(Some(r.dsc)),
            num(r.hd_mm),
            num(r.hd95_mm),
            num(r.asd_mm)
        );
    }
    out
}

fn aggregate_table(out: &mut String, rows: &[Aggregate], hd_q: f64) {
    let _ = writeln!(out, "| set | group | DSC | HD (mm) | HD{hd_q} (mm) | ASD (mm) |");
    out.push_str("|---|---|---|---|---|---|\n");
    for a in rows {
        let _ = writeln!(out, "| {} | {} | {} | {} | {} | {} |", a.set, a.group, pm(&a.dsc), pm(&a.hd_mm), pm(&a.hd95_mm), pm(&a.asd_mm));
    }
}

fn seg_md(s: &SegReport) -> String {
    let mut out = String::from("# Segmentation report\n\n");
    let _ = writeln!(out, "Config hash `{}`; sets: {}.\n", s.config_hash, s.sets.join(", "));
    out.push_str("## Per stratum\n\n");
    aggregate_table(&mut out, &s.report.per_stratum, s.hd_percentile);
    out.push_str("\n## Per organ\n\n");
    aggregate_table(&mut out, &s.report.per_organ, s.hd_percentile);
    if !s.report.paired.is_empty() {
        out.push_str("\n## Paired Wilcoxon tests on per-case mean DSC\n\n");
        out.push_str("| group | set A | set B | cases | mean A | mean B | W | p | exact |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for p in &s.report.paired {
            let (w, pv, ex) = match &p.test {
                Some(t) => (format!("{}", t.w), format!("{:.6}", t.p), t.exact.to_string()),
                None => ("n/a".into(), "n/a".into(), "n/a".into()),
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {w} | {pv} | {ex} |",
                p.group,
                p.set_a,
                p.set_b,
                p.n_cases,
                num(Some(p.mean_a)),
                num(Some(p.mean_b))
            );
        }
    }
    out
}

fn dose_csv(d: &DoseReport) -> String {
    let mut out =
        String::from("case,organ,set,mean_gy,max_gy,diff_mean_pct,diff_max_pct,abs_diff_mean_pct,abs_diff_max_pct,coverage\n");
    for r in &d.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.case,
            r.organ,
            r.set,
            num(Some(r.mean_gy)),
            num(Some(r.max_gy)),
            num(r.diff_mean_pct),
            num(r.diff_max_pct),
            num(r.abs_diff_mean_pct),
            num(r.abs_diff_max_pct),
            num(Some(r.coverage))
        );
    }
    out
}

fn dose_md(d: &DoseReport) -> String {
    let mut out = String::from("# Dose report\n\n");
    let _ = writeln!(out, "Config hash `{}`; DVH bin width {} Gy.\n", d.config_hash, d.bin_width_gy);
    out.push_str("| set | group | rows | mean abs diff in mean dose (%) | mean abs diff in max dose (%) |\n");
    out.push_str("|---|---|---|---|---|\n");
    for s in &d.summary {
        let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(out, "| {} | {} | {} | {} | {} |", s.set, s.group, s.n, show(s.mean_abs_diff_mean_pct), show(s.mean_abs_diff_max_pct));
    }
    if !d.warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in &d.warnings {
            let _ = writeln!(out, "- {w}");
        }
    }
    out
}
