//! Aggregation of finished cells across seeds and held-out sets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{write_atomic, RunManifest};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::planner::{Approach, TagSet};

/// Mean with spread; `std` and `ci95` are absent for a single observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub ci95: Option<(f64, f64)>,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Some(Stat {
                n,
                mean,
                std: None,
                ci95: None,
            });
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        let half = t * std / (n as f64).sqrt();
        Some(Stat {
            n,
            mean,
            std: Some(std),
            ci95: Some((mean - half, mean + half)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub approach: Approach,
    pub tagset: TagSet,
    pub cells: usize,
    pub metrics: BTreeMap<String, Stat>,
    /// Min-importance curve: K → stat of the mean over pairs.
    pub curve: Vec<(usize, Stat)>,
}

/// Paired difference against the standard approach, matched on (set, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub approach: Approach,
    pub tagset: TagSet,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub backend: String,
    pub sets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub gains: Vec<GainRow>,
}

impl Report {
    pub fn row(&self, approach: Approach, tagset: TagSet) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.approach == approach && r.tagset == tagset)
    }

    pub fn gain(&self, approach: Approach, tagset: TagSet) -> Option<&GainRow> {
        self.gains.iter().find(|r| r.approach == approach && r.tagset == tagset)
    }
}

/// Recalls and precision-style values are scaled to points (0–100).
fn scalar_metrics(m: &MetricsReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (i, r) in m.mean_recall.iter().enumerate() {
        out.push((format!("R@{}", i + 1), 100.0 * r));
    }
    for (cat, v) in &m.categories {
        if let Some(v) = v {
            out.push((format!("cat.{}", cat.label()), 100.0 * v));
        }
    }
    out.push(("BLEU".into(), m.bleu));
    if let Some(a) = m.tag_accuracy {
        out.push(("tag_acc".into(), 100.0 * a));
    }
    out.push(("wellformed".into(), 100.0 * m.wellformed));
    let d = &m.diversity;
    out.extend([
        ("ASL".into(), d.asl),
        ("types".into(), d.types as f64),
        ("TTR1".into(), d.ttr1),
        ("TTR2".into(), d.ttr2),
        ("novel".into(), d.novel),
        ("coverage".into(), d.coverage),
        ("local5".into(), d.local5),
    ]);
    if let Some(ret) = &m.retrieval {
        for r in ret {
            let dir = format!("{:?}", r.direction).to_lowercase();
            out.push((format!("{dir}R@{}", r.k), 100.0 * r.recall));
        }
    }
    out
}

/// Manifests and metrics of finished cells, refusing runs of different configs.
pub fn load_reports(dirs: &[PathBuf]) -> Result<(String, Vec<MetricsReport>)> {
    if dirs.is_empty() {
        return Err(Error::Aggregation("no run directories given".into()));
    }
    let mut hash: Option<String> = None;
    let mut reports = Vec::new();
    let mut seen = BTreeMap::new();
    for dir in dirs {
        let m = RunManifest::load(dir)?;
        match &hash {
            None => hash = Some(m.config_hash.clone()),
            Some(h) if *h != m.config_hash => {
                return Err(Error::Aggregation(format!(
                    "{} was produced by config {} but {} by {h}; refusing to mix",
                    dir.display(),
                    m.config_hash,
                    dirs[0].display()
                )))
            }
            _ => {}
        }
        for rec in m.completed() {
            let Some(rel) = &rec.metrics else { continue };
            if seen.insert(rec.cell.id(), ()).is_some() {
                continue;
            }
            let p = dir.join(rel);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            reports.push(serde_json::from_str(&text)?);
        }
    }
    Ok((hash.unwrap_or_default(), reports))
}

pub fn aggregate(config_hash: &str, reports: &[MetricsReport]) -> Result<Report> {
    if reports.is_empty() {
        return Err(Error::Aggregation("no finished cells to aggregate".into()));
    }
    let backend = reports[0].backend.clone();
    if reports.iter().any(|r| r.backend != backend || r.k != reports[0].k) {
        return Err(Error::Aggregation("cells disagree on backend or K".into()));
    }
    let mut groups: BTreeMap<(Approach, TagSet), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.approach, r.tagset)).or_default().push(r);
    }
    let mut rows = Vec::new();
    for ((approach, tagset), cells) in &groups {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut curve: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for c in cells {
            for (k, v) in scalar_metrics(c) {
                values.entry(k).or_default().push(v);
            }
            for &(k, v) in &c.curve {
                curve.entry(k).or_default().push(100.0 * v);
            }
        }
        rows.push(ReportRow {
            approach: *approach,
            tagset: *tagset,
            cells: cells.len(),
            metrics: values.iter().filter_map(|(k, v)| Some((k.clone(), Stat::of(v)?))).collect(),
            curve: curve.iter().filter_map(|(k, v)| Some((*k, Stat::of(v)?))).collect(),
        });
    }

    let key = |r: &MetricsReport| (r.heldout_set, r.seed);
    let baseline: BTreeMap<(usize, u64), BTreeMap<String, f64>> = groups
        .get(&(Approach::Standard, TagSet::None))
        .map(|cells| cells.iter().map(|c| (key(c), scalar_metrics(c).into_iter().collect())).collect())
        .unwrap_or_default();
    let mut gains = Vec::new();
    if !baseline.is_empty() {
        for ((approach, tagset), cells) in &groups {
            if *approach == Approach::Standard {
                continue;
            }
            let mut diffs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for c in cells {
                let Some(base) = baseline.get(&key(c)) else { continue };
                for (k, v) in scalar_metrics(c) {
                    if let Some(b) = base.get(&k) {
                        diffs.entry(k).or_default().push(v - b);
                    }
                }
            }
            gains.push(GainRow {
                approach: *approach,
                tagset: *tagset,
                metrics: diffs.iter().filter_map(|(k, v)| Some((k.clone(), Stat::of(v)?))).collect(),
            });
        }
    }
    let mut sets: Vec<usize> = reports.iter().map(|r| r.heldout_set).collect();
    sets.sort_unstable();
    sets.dedup();
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    Ok(Report {
        config_hash: config_hash.to_string(),
        backend,
        sets,
        seeds,
        rows,
        gains,
    })
}

fn cell(s: Option<&Stat>) -> String {
    match s {
        None => "-".into(),
        Some(Stat { mean, std: None, .. }) => format!("{mean:.2}"),
        Some(Stat { mean, std: Some(sd), .. }) => format!("{mean:.2}±{sd:.2}"),
    }
}

fn table(out: &mut String, header: &[String], body: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|j| {
            body.iter()
                .map(|r| r[j].chars().count())
                .chain([header[j].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |out: &mut String, r: &[String]| {
        let cols: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cols.join("  ").trim_end());
    };
    line(out, header);
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for r in body {
        line(out, r);
    }
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config {}", self.config_hash);
        let _ = writeln!(out, "backend {}  sets {:?}  seeds {:?}", self.backend, self.sets, self.seeds);
        let _ = writeln!(out, "mean±std over cells; recall, tag accuracy and wellformedness in points\n");
        let caption_cols = ["R@1", "R@5", "BLEU", "tag_acc", "wellformed"];
        let label = |a: Approach, t: TagSet| if t == TagSet::None { a.to_string() } else { format!("{a}+{t}") };
        let mut header: Vec<String> = vec!["approach".into(), "n".into()];
        header.extend(caption_cols.iter().map(|s| s.to_string()));
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![label(r.approach, r.tagset), r.cells.to_string()];
                row.extend(caption_cols.iter().map(|c| cell(r.metrics.get(*c))));
                row
            })
            .collect();
        table(&mut out, &header, &body);

        let cats: Vec<String> = {
            let mut c: Vec<String> = self
                .rows
                .iter()
                .flat_map(|r| r.metrics.keys().filter(|k| k.starts_with("cat.")).cloned())
                .collect();
            c.sort();
            c.dedup();
            c
        };
        if !cats.is_empty() {
            let _ = writeln!(out, "\nrecall@K by pair category");
            let mut header: Vec<String> = vec!["approach".into()];
            header.extend(cats.iter().map(|c| c.trim_start_matches("cat.").to_string()));
            let body: Vec<Vec<String>> = self
                .rows
                .iter()
                .map(|r| {
                    let mut row = vec![label(r.approach, r.tagset)];
                    row.extend(cats.iter().map(|c| cell(r.metrics.get(c))));
                    row
                })
                .collect();
            table(&mut out, &header, &body);
        }

        let div = ["ASL", "types", "TTR1", "TTR2", "novel", "coverage", "local5"];
        let _ = writeln!(out, "\ndiversity");
        let mut header: Vec<String> = vec!["approach".into()];
        header.extend(div.iter().map(|s| s.to_string()));
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![label(r.approach, r.tagset)];
                row.extend(div.iter().map(|c| cell(r.metrics.get(*c))));
                row
            })
            .collect();
        table(&mut out, &header, &body);

        let ret: Vec<String> = {
            let mut c: Vec<String> = self
                .rows
                .iter()
                .flat_map(|r| r.metrics.keys().filter(|k| k.starts_with("text") || k.starts_with("image")).cloned())
                .collect();
            c.sort_by_key(|k| {
                let (dir, n) = k.split_once("R@").unwrap_or((k, "0"));
                (dir.to_string(), n.parse::<usize>().unwrap_or(0))
            });
            c.dedup();
            c
        };
        if !ret.is_empty() {
            let _ = writeln!(out, "\nretrieval");
            let mut header: Vec<String> = vec!["approach".into()];
            header.extend(ret.iter().cloned());
            let body: Vec<Vec<String>> = self
                .rows
                .iter()
                .map(|r| {
                    let mut row = vec![label(r.approach, r.tagset)];
                    row.extend(ret.iter().map(|c| cell(r.metrics.get(c))));
                    row
                })
                .collect();
            table(&mut out, &header, &body);
        }

        if !self.gains.is_empty() {
            let _ = writeln!(out, "\npaired gain over standard (mean [95% CI])");
            let cols = ["R@1", "R@5", "BLEU"];
            let mut header: Vec<String> = vec!["approach".into(), "n".into()];
            header.extend(cols.iter().map(|s| s.to_string()));
            let body: Vec<Vec<String>> = self
                .gains
                .iter()
                .map(|g| {
                    let n = g.metrics.get("BLEU").map_or(0, |s| s.n);
                    let mut row = vec![label(g.approach, g.tagset), n.to_string()];
                    row.extend(cols.iter().map(|c| match g.metrics.get(*c) {
                        None => "-".into(),
                        Some(Stat { mean, ci95: None, .. }) => format!("{mean:+.2}"),
                        Some(Stat { mean, ci95: Some((lo, hi)), .. }) => format!("{mean:+.2} [{lo:+.2},{hi:+.2}]"),
                    }));
                    row
                })
                .collect();
            table(&mut out, &header, &body);
        }
        out
    }

    /// `approach,tagset,k,n,mean,std` rows of the min-importance curve.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("approach,tagset,k,n,mean,std\n");
        for r in &self.rows {
            for (k, s) in &r.curve {
                let sd = s.std.map(|v| format!("{v:.6}")).unwrap_or_default();
                let _ = writeln!(out, "{},{},{k},{},{:.6},{sd}", r.approach, r.tagset, s.n, s.mean);
            }
        }
        out
    }
}

/// Aggregate runs and write `report.txt`, `curve.csv` and `summary.json`.
pub fn emit_report(dirs: &[PathBuf], out: &Path) -> Result<Report> {
    let (hash, reports) = load_reports(dirs)?;
    let report = aggregate(&hash, &reports)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("report.txt"), report.render().as_bytes())?;
    write_atomic(&out.join("curve.csv"), report.curve_csv().as_bytes())?;
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::DiversityBlock;

    fn fake(approach: Approach, tagset: TagSet, set: usize, seed: u64, r5: f64) -> MetricsReport {
        MetricsReport {
            backend: "recurrent".into(),
            approach,
            tagset,
            heldout_set: set,
            split: "test".into(),
            seed,
            k: 2,
            pairs: vec![],
            mean_recall: vec![r5 / 2.0, r5],
            categories: vec![],
            curve: vec![(1, r5)],
            bleu: 10.0 * r5,
            tag_accuracy: None,
            wellformed: 1.0,
            diversity: DiversityBlock {
                asl: 5.0,
                types: 10,
                ttr1: 0.5,
                ttr2: 0.8,
                novel: 50.0,
                coverage: 20.0,
                local5: 90.0,
            },
            retrieval: None,
        }
    }

    #[test]
    fn single_observation_has_no_spread() {
        let s = Stat::of(&[3.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        assert!(s.std.is_none() && s.ci95.is_none());
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn t_interval_matches_table_value() {
        // t(0.975, 4) = 2.776445
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let s = Stat::of(&xs).unwrap();
        let sd = 2.5f64.sqrt();
        assert!((s.std.unwrap() - sd).abs() < 1e-12);
        let half = 2.776445 * sd / 5f64.sqrt();
        let (lo, hi) = s.ci95.unwrap();
        assert!((lo - (3.0 - half)).abs() < 1e-5 && (hi - (3.0 + half)).abs() < 1e-5);
    }

    #[test]
    fn rows_group_cells_and_gains_pair_on_set_and_seed() {
        let mut rs = Vec::new();
        for set in 0..2 {
            for seed in 1..=3u64 {
                let base = 0.1 * seed as f64 + 0.05 * set as f64;
                rs.push(fake(Approach::Standard, TagSet::None, set, seed, base));
                rs.push(fake(Approach::Interleave, TagSet::Pos, set, seed, base + 0.02));
            }
        }
        let rep = aggregate("h", &rs).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.rows.iter().all(|r| r.cells == 6));
        let g = rep.gain(Approach::Interleave, TagSet::Pos).unwrap();
        let r5 = &g.metrics["R@2"];
        // the pairing removes all seed variance
        assert_eq!(r5.n, 6);
        assert!((r5.mean - 2.0).abs() < 1e-9 && r5.std.unwrap() < 1e-9);
        // the unpaired mean difference agrees
        let a = rep.row(Approach::Interleave, TagSet::Pos).unwrap().metrics["R@2"].mean;
        let b = rep.row(Approach::Standard, TagSet::None).unwrap().metrics["R@2"].mean;
        assert!((a - b - 2.0).abs() < 1e-9);
        let text = rep.render();
        assert!(text.contains("interleave+pos"), "{text}");
        assert_eq!(rep.curve_csv().lines().count(), 3);
    }

    #[test]
    fn mixed_backends_refused() {
        let mut b = fake(Approach::Standard, TagSet::None, 0, 1, 0.1);
        b.backend = "transformer".into();
        let rs = vec![fake(Approach::Standard, TagSet::None, 0, 1, 0.1), b];
        assert!(matches!(aggregate("h", &rs), Err(Error::Aggregation(_))));
    }
}
