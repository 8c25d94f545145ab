use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::metrics::{macro_auc, roc_points, RocPoints};
use super::{predict, PreparedData, N_CLASSES};
use crate::dataio::{ConditionVector, DefectClass, Wheelset, N_COMBINATIONS};
use crate::error::{Error, Result};
use crate::models::Model;

const CSV_HEADER: &str = "place,orientation,rotation,load,speed,n_wa1,auc_wa1,n_wa2,auc_wa2,n_wa3,auc_wa3";

/// One condition combination. An AUC is `NaN` when no class in the cell had
/// both positives and negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationRow {
    pub conditions: ConditionVector,
    pub n: [usize; 3],
    pub auc: [f64; 3],
}

/// Rows in combination-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationTable {
    pub rows: Vec<CombinationRow>,
}

fn fmt_auc(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.4}")
    }
}

impl CombinationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let b = r.conditions.bits();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                b[0],
                b[1],
                b[2],
                b[3],
                b[4],
                r.n[0],
                fmt_auc(r.auc[0]),
                r.n[1],
                fmt_auc(r.auc[1]),
                r.n[2],
                fmt_auc(r.auc[2])
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::format("combinations.csv", e.to_string()))?;
        if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(Error::format("combinations.csv", format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::format("combinations.csv", e.to_string()))?;
            let f: Vec<&str> = rec.iter().collect();
            if f.len() != 11 {
                return Err(Error::format("combinations.csv", format!("row has {} fields", f.len())));
            }
            let bad = |v: &str| Error::format("combinations.csv", format!("bad value {v:?}"));
            let mut bits = [0u8; 5];
            for (b, v) in bits.iter_mut().zip(&f[..5]) {
                *b = v.trim().parse().map_err(|_| bad(v))?;
            }
            let mut n = [0usize; 3];
            let mut a = [0f64; 3];
            for w in 0..3 {
                n[w] = f[5 + 2 * w].trim().parse().map_err(|_| bad(f[5 + 2 * w]))?;
                a[w] = f[6 + 2 * w].trim().parse().map_err(|_| bad(f[6 + 2 * w]))?;
            }
            rows.push(CombinationRow {
                conditions: ConditionVector::from_bits(bits)?,
                n,
                auc: a,
            });
        }
        Ok(CombinationTable { rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// ROC curve of one class against the rest over a wheelset's test set.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRoc {
    pub wheelset: Wheelset,
    pub class: DefectClass,
    pub points: RocPoints,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub table: CombinationTable,
    pub roc: Vec<ClassRoc>,
    pub warnings: Vec<String>,
}

fn bit_string(c: ConditionVector) -> String {
    c.bits().iter().map(|b| b.to_string()).collect()
}

/// Scores every test record of every wheelset and tabulates macro
/// one-vs-rest AUC per condition combination.
pub fn evaluate_combinations(model: &Model, data: &PreparedData, seed: u64) -> Result<Evaluation> {
    let mut rows: Vec<CombinationRow> = ConditionVector::all()
        .map(|c| CombinationRow {
            conditions: c,
            n: [0; 3],
            auc: [f64::NAN; 3],
        })
        .collect();
    let mut roc = Vec::new();
    let mut warnings = Vec::new();
    for wa in Wheelset::ALL {
        let ids = data.splits.test_for(wa);
        if ids.is_empty() {
            return Err(Error::arg(format!("the {wa} test set is empty")));
        }
        let probs = predict(model, data, ids, seed)?;
        let labels = ids.iter().map(|&id| data.label(id)).collect::<Result<Vec<_>>>()?;

        let mut cells: Vec<(Vec<Vec<f64>>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); N_COMBINATIONS];
        for ((&id, p), &y) in ids.iter().zip(&probs).zip(&labels) {
            let cell = &mut cells[data.signal(id)?.conditions.index()];
            cell.0.push(p.clone());
            cell.1.push(y);
        }
        for (row, (p, y)) in rows.iter_mut().zip(&cells) {
            row.n[wa.index()] = y.len();
            if y.is_empty() {
                warnings.push(format!("{wa} combination {}: no test samples", bit_string(row.conditions)));
                continue;
            }
            let (m, per_class) = macro_auc(p, y, N_CLASSES)?;
            for (c, v) in per_class.iter().enumerate() {
                if v.is_none() {
                    warnings.push(format!(
                        "{wa} combination {}: class {} not separable (absent or alone), skipped",
                        bit_string(row.conditions),
                        DefectClass::ALL[c].name()
                    ));
                }
            }
            row.auc[wa.index()] = m.unwrap_or(f64::NAN);
        }

        for class in DefectClass::ALL {
            let is_c: Vec<bool> = labels.iter().map(|&l| l == class.index()).collect();
            let scores: Vec<f64> = probs.iter().map(|p| p[class.index()]).collect();
            match roc_points(&scores, &is_c) {
                Ok(points) => roc.push(ClassRoc {
                    wheelset: wa,
                    class,
                    points,
                }),
                Err(_) => warnings.push(format!("{wa}: no ROC curve for class {}", class.name())),
            }
        }
    }
    Ok(Evaluation {
        table: CombinationTable { rows },
        roc,
        warnings,
    })
}

/// Mean and population standard deviation of one wheelset's AUC over the
/// rows sharing a condition value.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStat {
    pub factor: &'static str,
    pub value: u8,
    pub label: &'static str,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub groups: Vec<GroupStat>,
    pub overall: [f64; 3],
}

const FACTORS: [(&str, [&str; 2]); 5] = [
    ("Place", ["RHS", "LHS"]),
    ("Orientation", ["Lengthwise", "Vertical"]),
    ("Rotation", ["Counterclockwise", "Clockwise"]),
    ("Load", ["Low", "High"]),
    ("Speed", ["20 km/h", "50 km/h"]),
];

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    // moments of the offsets from the first value (shifted-data algorithm)
    let n = v.len() as f64;
    let k = v[0];
    let d_mean = v.iter().map(|x| x - k).sum::<f64>() / n;
    let var = v.iter().map(|x| (x - k - d_mean).powi(2)).sum::<f64>() / n;
    (k + d_mean, var.sqrt())
}

/// Per-condition and overall statistics; undefined (`NaN`) cells are left
/// out of every mean.
pub fn summarize(table: &CombinationTable) -> Result<Summary> {
    if table.rows.is_empty() {
        return Err(Error::Metric("cannot summarize an empty table".into()));
    }
    let mut groups = Vec::new();
    for (f, (factor, labels)) in FACTORS.iter().enumerate() {
        for value in 0..2u8 {
            let mut mean = [0.0; 3];
            let mut std = [0.0; 3];
            for w in 0..3 {
                (mean[w], std[w]) = mean_std(
                    table
                        .rows
                        .iter()
                        .filter(|r| r.conditions.bits()[f] == value)
                        .map(|r| r.auc[w]),
                );
            }
            groups.push(GroupStat {
                factor,
                value,
                label: labels[value as usize],
                mean,
                std,
            });
        }
    }
    let mut overall = [0.0; 3];
    for (w, o) in overall.iter_mut().enumerate() {
        *o = mean_std(table.rows.iter().map(|r| r.auc[w])).0;
    }
    Ok(Summary { groups, overall })
}

/// Everything written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub table: CombinationTable,
    pub summary: Summary,
    pub roc: Vec<ClassRoc>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, evaluation: Evaluation) -> Result<Self> {
        Ok(EvalReport {
            model: model.into(),
            summary: summarize(&evaluation.table)?,
            table: evaluation.table,
            roc: evaluation.roc,
            warnings: evaluation.warnings,
        })
    }

    pub fn summary_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Evaluation summary: {}\n", self.model);
        let _ = writeln!(s, "## Mean AUC per wheelset\n");
        let _ = writeln!(s, "| Model | WA1 | WA2 | WA3 |");
        let _ = writeln!(s, "|---|---|---|---|");
        let o = self.summary.overall;
        let _ = writeln!(s, "| {} | {} | {} | {} |\n", self.model, fmt_auc(o[0]), fmt_auc(o[1]), fmt_auc(o[2]));
        let _ = writeln!(s, "## AUC by condition (mean ± std over combinations)\n");
        let _ = writeln!(s, "| Condition | Value | WA1 | WA2 | WA3 |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for g in &self.summary.groups {
            let cell = |w: usize| {
                if g.mean[w].is_nan() {
                    "nan".to_string()
                } else {
                    format!("{:.2} ± {:.2}", g.mean[w], g.std[w])
                }
            };
            let _ = writeln!(s, "| {} | {} | {} | {} | {} |", g.factor, g.label, cell(0), cell(1), cell(2));
        }
        if !self.warnings.is_empty() {
            let _ = writeln!(s, "\n## Warnings\n");
            for w in &self.warnings {
                let _ = writeln!(s, "- {w}");
            }
        }
        s
    }
}

fn roc_csv(points: &RocPoints) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (f, t) in &points.0 {
        let _ = writeln!(s, "{f:.6},{t:.6}");
    }
    s
}

/// Writes `combinations.csv`, `summary.md` and one `roc_<wa>_<class>.csv`
/// per available curve.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("combinations.csv".into(), report.table.to_csv())?;
    write("summary.md".into(), report.summary_markdown())?;
    for c in &report.roc {
        write(
            format!(
                "roc_{}_{}.csv",
                c.wheelset.name().to_ascii_lowercase(),
                c.class.name().to_ascii_lowercase()
            ),
            roc_csv(&c.points),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_table(v: f64) -> CombinationTable {
        CombinationTable {
            rows: ConditionVector::all()
                .map(|c| CombinationRow {
                    conditions: c,
                    n: [1, 2, 3],
                    auc: [v, v, v],
                })
                .collect(),
        }
    }

    #[test]
    fn constant_table_has_zero_spread() {
        let s = summarize(&constant_table(0.8)).unwrap();
        assert_eq!(s.groups.len(), 10);
        for g in &s.groups {
            assert_eq!(g.std, [0.0; 3]);
            assert!((g.mean[1] - 0.8).abs() < 1e-12);
        }
        assert!(summarize(&CombinationTable { rows: vec![] }).is_err());
    }

    #[test]
    fn csv_round_trip_and_line_count() {
        let mut t = constant_table(0.8125);
        t.rows[3].auc[2] = f64::NAN;
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 33);
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
        let back = CombinationTable::from_csv(&csv).unwrap();
        assert_eq!(back.rows.len(), 32);
        assert!(back.rows[3].auc[2].is_nan());
        assert_eq!(back.rows[0], t.rows[0]);
    }

    #[test]
    fn nan_cells_are_left_out_of_means() {
        let mut t = constant_table(0.5);
        t.rows[0].auc[0] = f64::NAN;
        let s = summarize(&t).unwrap();
        assert_eq!(s.overall[0], 0.5);
    }
}
