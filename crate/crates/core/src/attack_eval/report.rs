use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::metrics::{aggregate_folds, roc_curve, tar_at_far, FarAggregate, FarPoint, IdentificationResult, RocPoint};
use super::{AttackKind, ScoreSet};
use crate::{Error, Result};

pub const THRESHOLD_CONVENTION: &str =
    "score >= threshold accepts; threshold is the smallest impostor score whose acceptance fraction is <= FAR (no interpolation)";
pub const SIGMA_CONVENTION: &str = "population standard deviation across folds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPoints {
    pub fold_id: usize,
    pub points: Vec<FarPoint>,
}

/// Verification outcome of one model under one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub model: String,
    pub dataset: String,
    pub attack: AttackKind,
    pub folds: Vec<FoldPoints>,
    /// Present when at least two folds were evaluated.
    pub aggregate: Option<Vec<FarAggregate>>,
    /// ROC of all folds' scores pooled.
    pub roc: Vec<RocPoint>,
}

impl VerificationResult {
    pub fn from_scores(model: &str, dataset: &str, scores: &[ScoreSet], fars: &[f64]) -> Result<Self> {
        let attack = scores.first().ok_or_else(|| Error::Insufficient("no score sets".into()))?.attack_kind;
        if scores.iter().any(|s| s.attack_kind != attack) {
            return Err(Error::Config("score sets mix attack kinds".into()));
        }
        let folds = scores
            .iter()
            .map(|s| Ok(FoldPoints { fold_id: s.fold_id, points: tar_at_far(s, fars)? }))
            .collect::<Result<Vec<_>>>()?;
        let aggregate = if folds.len() >= 2 {
            Some(aggregate_folds(&folds.iter().map(|f| f.points.clone()).collect::<Vec<_>>())?)
        } else {
            None
        };
        let pooled = ScoreSet {
            genuine: scores.iter().flat_map(|s| s.genuine.iter().copied()).collect(),
            impostor: scores.iter().flat_map(|s| s.impostor.iter().copied()).collect(),
            fold_id: 0,
            attack_kind: attack,
        };
        Ok(Self { model: model.into(), dataset: dataset.into(), attack, folds, aggregate, roc: roc_curve(&pooled) })
    }

    /// The headline value at `far`: `mu - sigma` over folds, or the single fold's TAR.
    pub fn reported(&self, far: f64) -> Option<f64> {
        match &self.aggregate {
            Some(a) => a.iter().find(|p| p.far == far).map(|p| p.reported),
            None => self.folds.first()?.points.iter().find(|p| p.far == far).map(|p| p.tar),
        }
    }

    fn fars(&self) -> Vec<f64> {
        self.folds.first().map(|f| f.points.iter().map(|p| p.far).collect()).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationEntry {
    pub model: String,
    pub dataset: String,
    pub result: IdentificationResult,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub verification: Vec<VerificationResult>,
    pub identification: Vec<IdentificationEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub markdown: PathBuf,
    pub csv: PathBuf,
    pub roc_svg: Option<PathBuf>,
}

fn far_label(far: f64) -> String {
    format!("{:.1}%", far * 100.0)
}

fn num(v: f64) -> String {
    format!("{v:.2}")
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.verification.is_empty() && self.identification.is_empty()
    }

    /// Copy with rows ordered by model, dataset and attack.
    pub fn sorted(&self) -> Report {
        let mut r = self.clone();
        r.verification.sort_by(|a, b| (&a.model, &a.dataset, a.attack).cmp(&(&b.model, &b.dataset, b.attack)));
        r.identification
            .sort_by(|a, b| (&a.model, &a.dataset, &a.result.partition).cmp(&(&b.model, &b.dataset, &b.result.partition)));
        r
    }

    fn all_fars(&self) -> Vec<f64> {
        let mut fars: Vec<f64> = self.verification.iter().flat_map(|v| v.fars()).collect();
        fars.sort_by(f64::total_cmp);
        fars.dedup();
        fars
    }

    pub fn to_json(&self) -> Value {
        let r = self.sorted();
        let verification: Vec<Value> = r
            .verification
            .iter()
            .map(|v| {
                let mut far = Map::new();
                for f in v.fars() {
                    let entry = match &v.aggregate {
                        Some(a) => {
                            let p = a.iter().find(|p| p.far == f).expect("aggregated FAR");
                            json!({"mu": p.mu, "sigma": p.sigma, "reported": p.reported, "threshold": p.threshold})
                        }
                        None => {
                            let p = v.folds[0].points.iter().find(|p| p.far == f).expect("fold FAR");
                            json!({"mu": p.tar, "sigma": 0.0, "reported": p.tar, "threshold": p.threshold})
                        }
                    };
                    far.insert(f.to_string(), entry);
                }
                json!({
                    "model": v.model,
                    "dataset": v.dataset,
                    "attack": v.attack,
                    "far": far,
                    "folds": v.folds,
                })
            })
            .collect();
        let identification: Vec<Value> = r
            .identification
            .iter()
            .map(|e| json!({"model": e.model, "dataset": e.dataset, "partition": e.result.partition, "rank1": e.result.rate}))
            .collect();
        json!({
            "metadata": {
                "threshold_convention": THRESHOLD_CONVENTION,
                "sigma_convention": SIGMA_CONVENTION,
                "tar_units": "percent",
                "far_units": "fraction",
            },
            "verification": verification,
            "identification": identification,
        })
    }

    fn verification_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let fars = self.all_fars();
        let mut header = vec!["Model".to_string(), "Dataset".into(), "Attack".into()];
        for f in &fars {
            let l = far_label(*f);
            header.extend([format!("FAR {l} mu"), format!("FAR {l} sigma"), format!("FAR {l} mu-sigma")]);
        }
        let rows = self
            .sorted()
            .verification
            .iter()
            .map(|v| {
                let mut row = vec![v.model.clone(), v.dataset.clone(), v.attack.label().to_string()];
                for f in &fars {
                    match (&v.aggregate, v.folds.first().and_then(|fp| fp.points.iter().find(|p| p.far == *f))) {
                        (Some(a), _) => match a.iter().find(|p| p.far == *f) {
                            Some(p) => row.extend([num(p.mu), num(p.sigma), num(p.reported)]),
                            None => row.extend(["".into(), "".into(), "".into()]),
                        },
                        (None, Some(p)) => row.extend([num(p.tar), "".into(), "".into()]),
                        (None, None) => row.extend(["".into(), "".into(), "".into()]),
                    }
                }
                row
            })
            .collect();
        (header, rows)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let table = |out: &mut String, header: &[String], rows: &[Vec<String>]| {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for r in rows {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
        };
        if !self.verification.is_empty() {
            let (h, rows) = self.verification_rows();
            let _ = writeln!(out, "## Verification (TAR %)\n");
            table(&mut out, &h, &rows);
            let _ = writeln!(out, "\nThreshold: {THRESHOLD_CONVENTION}. Sigma: {SIGMA_CONVENTION}.\n");
        }
        if !self.identification.is_empty() {
            let h: Vec<String> = ["Model", "Dataset", "Partition", "Rank-1 (%)"].map(String::from).to_vec();
            let rows: Vec<Vec<String>> = self
                .sorted()
                .identification
                .iter()
                .map(|e| vec![e.model.clone(), e.dataset.clone(), e.result.partition.clone(), num(e.result.rate)])
                .collect();
            let _ = writeln!(out, "## Identification\n");
            table(&mut out, &h, &rows);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let (h, rows) = self.verification_rows();
        let _ = writeln!(out, "kind,{}", h.join(","));
        for r in rows {
            let _ = writeln!(out, "verification,{}", r.join(","));
        }
        for e in self.sorted().identification {
            let _ = writeln!(out, "identification,{},{},{},{}", e.model, e.dataset, e.result.partition, num(e.result.rate));
        }
        out
    }

    /// ROC curves on a log-FAR axis from 1e-4 to 1.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 480.0;
        const M: f64 = 60.0;
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
        let x = |far: f64| M + (far.max(1e-4).log10() + 4.0) / 4.0 * (W - 2.0 * M);
        let y = |tar: f64| H - M - tar / 100.0 * (H - 2.0 * M);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{M} {M} V{:.1} H{:.1}" stroke="black" fill="none"/>"#,
            H - M,
            W - M
        );
        for e in -4..=0 {
            let xe = x(10f64.powi(e));
            let _ = writeln!(s, r#"<text x="{xe:.1}" y="{:.1}" text-anchor="middle">1e{e}</text>"#, H - M + 18.0);
        }
        for t in (0..=100).step_by(20) {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t}</text>"#, M - 6.0, y(t as f64) + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">False accept rate</text>"#, W / 2.0, H - 15.0);
        let _ = writeln!(s, r#"<text x="15" y="{:.1}" transform="rotate(-90 15 {:.1})" text-anchor="middle">True accept rate (%)</text>"#, H / 2.0, H / 2.0);
        for (k, v) in self.sorted().verification.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<String> = v.roc.iter().map(|p| format!("{:.1},{:.1}", x(p.far), y(p.tar))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none"/>"#, pts.join(" "));
            let label = escape(&format!("{} / {} / {}", v.model, v.dataset, v.attack.label()));
            let ly = M + 16.0 * k as f64;
            let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{label}</text>"#, M + 10.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `results.json`, `results.md`, `results.csv` and (with verification
/// results) `roc.svg` into `dir`.
pub fn render_report(report: &Report, dir: &Path) -> Result<ReportFiles> {
    if report.is_empty() {
        return Err(Error::Insufficient("report has no results".into()));
    }
    std::fs::create_dir_all(dir)?;
    let files = ReportFiles {
        json: dir.join("results.json"),
        markdown: dir.join("results.md"),
        csv: dir.join("results.csv"),
        roc_svg: (!report.verification.is_empty()).then(|| dir.join("roc.svg")),
    };
    std::fs::write(&files.json, serde_json::to_string_pretty(&report.to_json())? + "\n")?;
    std::fs::write(&files.markdown, report.to_markdown())?;
    std::fs::write(&files.csv, report.to_csv())?;
    if let Some(p) = &files.roc_svg {
        std::fs::write(p, report.to_svg())?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(fold: usize, shift: f64) -> ScoreSet {
        ScoreSet {
            genuine: (0..20).map(|i| (0.5 + shift + i as f64 / 100.0).min(1.0)).collect(),
            impostor: (0..200).map(|i| i as f64 / 400.0).collect(),
            fold_id: fold,
            attack_kind: AttackKind::Type1,
        }
    }

    #[test]
    fn single_result_table() {
        let v = VerificationResult::from_scores("nbnet_b", "synthetic", &[scores(0, 0.0)], &[0.001 * 5.0, 0.01]).unwrap();
        let r = Report { verification: vec![v], identification: vec![] };
        let md = r.to_markdown();
        let lines: Vec<&str> = md.lines().filter(|l| l.starts_with("| nbnet_b")).collect();
        assert_eq!(lines.len(), 1);
        assert!(md.contains("FAR 0.5% mu") && md.contains("FAR 1.0% mu"));
    }

    #[test]
    fn rows_sorted_and_folds_aggregated() {
        let fars = [0.01, 0.1];
        let b = VerificationResult::from_scores("zeta", "d", &[scores(0, 0.0), scores(1, -0.3)], &fars).unwrap();
        let a = VerificationResult::from_scores("alpha", "d", &[scores(0, 0.0), scores(1, 0.0)], &fars).unwrap();
        let r = Report { verification: vec![b, a], identification: vec![] };
        let csv = r.to_csv();
        let models: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(models, ["alpha", "zeta"]);
        assert!(csv.lines().next().unwrap().contains("mu-sigma"));
        let j = r.to_json();
        assert_eq!(j["verification"][0]["far"]["0.01"]["sigma"], 0.0);
        assert_eq!(j["metadata"]["sigma_convention"], SIGMA_CONVENTION);
        let dir = tempfile::tempdir().unwrap();
        let f1 = render_report(&r, dir.path()).unwrap();
        let first = std::fs::read(&f1.json).unwrap();
        render_report(&r, dir.path()).unwrap();
        assert_eq!(std::fs::read(&f1.json).unwrap(), first);
        assert!(std::fs::read_to_string(f1.roc_svg.unwrap()).unwrap().contains("<polyline"));
    }
}
