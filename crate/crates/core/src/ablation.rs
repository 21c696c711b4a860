//! Ablation matrix: configuration rows, one shared burn-in per detector
//! family, and the checkmark table.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::detector::{Detector, ParameterSet};
use crate::error::{Error, Result};
use crate::metrics::evaluate_model;
use crate::scenes::Dataset;
use crate::trainer::{burn_in, Mode, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub label: String,
    pub mode: Mode,
    pub cascade: bool,
    pub uncertainty: bool,
}

impl AblationRow {
    /// Rows named like `A1`, `A11`, `A12` ... `A42`: the first digit picks
    /// the family (1 plain, 2 uncertainty head, 3 cascade, 4 both), the
    /// optional second digit the teacher update (none for the moving
    /// average, 1 for refinement, 2 for refinement with disagreement).
    pub fn standard(label: &str) -> Option<AblationRow> {
        let digits = label.strip_prefix('A')?.as_bytes();
        let (cascade, uncertainty) = match digits.first()? {
            b'1' => (false, false),
            b'2' => (false, true),
            b'3' => (true, false),
            b'4' => (true, true),
            _ => return None,
        };
        let mode = match digits.get(1..)? {
            [] => Mode::ClassicalEma,
            [b'1'] => Mode::Tmr,
            [b'2'] => Mode::TmrRd,
            _ => return None,
        };
        Some(AblationRow { label: label.to_string(), mode, cascade, uncertainty })
    }

    /// `base` with this row's mode and detector flags.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.mode = self.mode;
        cfg.detector.cascade = self.cascade;
        cfg.detector.uncertainty = self.uncertainty;
        cfg
    }

    fn family(&self) -> (bool, bool) {
        (self.cascade, self.uncertainty)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationSpec {
    pub rows: Vec<AblationRow>,
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl AblationSpec {
    pub fn new(rows: Vec<AblationRow>) -> Result<Self> {
        let spec = AblationSpec { rows };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let rows = labels
            .iter()
            .map(|l| {
                let l = l.as_ref().trim();
                AblationRow::standard(l).ok_or_else(|| Error::invalid("ablation", format!("unknown row label `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    /// A1, A11, A12 and their uncertainty-head counterparts A2, A21, A22.
    pub fn six() -> Self {
        Self::from_labels(&["A1", "A11", "A12", "A2", "A21", "A22"]).expect("standard labels")
    }

    /// All twelve standard rows.
    pub fn twelve() -> Self {
        let labels: Vec<String> = (1..=4).flat_map(|f| [format!("A{f}"), format!("A{f}1"), format!("A{f}2")]).collect();
        Self::from_labels(&labels).expect("standard labels")
    }

    /// One row per line: a standard label alone, or
    /// `label mode cascade uncertainty` with flags as `0`/`1`/`true`/`false`.
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut bad = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let row = match fields.as_slice() {
                [label] => AblationRow::standard(label).ok_or_else(|| format!("unknown row label `{label}`")),
                [label, mode, cascade, unc] => match (mode.parse::<Mode>(), parse_flag(cascade), parse_flag(unc)) {
                    (Ok(mode), Some(cascade), Some(uncertainty)) => {
                        Ok(AblationRow { label: label.to_string(), mode, cascade, uncertainty })
                    }
                    (Err(e), _, _) => Err(e),
                    _ => Err("cascade and uncertainty flags must be 0/1/true/false".into()),
                },
                _ => Err("expected `label` or `label mode cascade uncertainty`".into()),
            };
            match row {
                Ok(r) => rows.push(r),
                Err(e) => bad.push(format!("line {}: {e}", i + 1)),
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        Self::new(rows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::invalid("ablation", "spec has no rows"));
        }
        let mut seen = BTreeSet::new();
        for r in &self.rows {
            if !seen.insert(r.label.as_str()) {
                return Err(Error::invalid("ablation", format!("duplicate row label `{}`", r.label)));
            }
            if r.label.is_empty() || r.label.contains([',', '|']) || r.label.contains(char::is_whitespace) {
                return Err(Error::invalid("ablation", format!("bad row label `{}`", r.label)));
            }
        }
        Ok(())
    }

    fn families(&self) -> Vec<(bool, bool)> {
        let mut out: Vec<(bool, bool)> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.family()) {
                out.push(r.family());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Done { ap50: f64, map: f64 },
    Failed(String),
}

impl Outcome {
    pub fn map(&self) -> Option<f64> {
        match self {
            Outcome::Done { map, .. } => Some(*map),
            Outcome::Failed(_) => None,
        }
    }
}

/// The burn-in model of one family, evaluated on the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub cascade: bool,
    pub uncertainty: bool,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub row: AblationRow,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub baselines: Vec<Baseline>,
    pub rows: Vec<RowResult>,
}

/// Column order of [`AblationReport::to_csv`].
pub const ABLATION_CSV_HEADER: &str = "label,mode,cascade,uncertainty,ap50,map,status";

impl AblationReport {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| matches!(r.outcome, Outcome::Done { .. }))
            && self.baselines.iter().all(|b| matches!(b.outcome, Outcome::Done { .. }))
    }

    pub fn baseline(&self, cascade: bool, uncertainty: bool) -> Option<&Baseline> {
        self.baselines.iter().find(|b| b.cascade == cascade && b.uncertainty == uncertainty)
    }

    /// Baselines first (label `burn_in`, mode `supervised`), then the rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        let mut line = |label: &str, mode: &str, cascade: bool, unc: bool, o: &Outcome| {
            let (ap50, map, status) = match o {
                Outcome::Done { ap50, map } => (ap50.to_string(), map.to_string(), "ok".to_string()),
                Outcome::Failed(e) => {
                    (String::new(), String::new(), format!("FAILED: {}", e.replace([',', '\n'], ";")))
                }
            };
            let _ = writeln!(out, "{label},{mode},{},{},{ap50},{map},{status}", cascade as u8, unc as u8);
        };
        for b in &self.baselines {
            line("burn_in", "supervised", b.cascade, b.uncertainty, &b.outcome);
        }
        for r in &self.rows {
            line(&r.row.label, r.row.mode.as_str(), r.row.cascade, r.row.uncertainty, &r.outcome);
        }
        out
    }

    /// Checkmark matrix with AP50 and mAP in percent. Burn-in rows are
    /// labelled `Supervised`.
    pub fn to_table(&self) -> String {
        let header = ["Abl.", "A1", "A2", "cEMA", "TMR", "RD", "c-regress.", "AP50", "mAP"];
        let mark = |b: bool| if b { "✓" } else { "×" }.to_string();
        let metrics = |o: &Outcome| match o {
            Outcome::Done { ap50, map } => [format!("{:.2}", ap50 * 100.0), format!("{:.2}", map * 100.0)],
            Outcome::Failed(_) => ["FAILED".to_string(), "FAILED".to_string()],
        };
        let mut body: Vec<Vec<String>> = Vec::new();
        for b in &self.baselines {
            let [ap50, map] = metrics(&b.outcome);
            body.push(vec![
                "Supervised".into(),
                mark(!b.uncertainty),
                mark(b.uncertainty),
                mark(false),
                mark(false),
                mark(false),
                mark(b.cascade),
                ap50,
                map,
            ]);
        }
        for r in &self.rows {
            let [ap50, map] = metrics(&r.outcome);
            let row = &r.row;
            body.push(vec![
                row.label.clone(),
                mark(!row.uncertainty),
                mark(row.uncertainty),
                mark(row.mode == Mode::ClassicalEma),
                mark(row.mode != Mode::ClassicalEma),
                mark(row.mode == Mode::TmrRd),
                mark(row.cascade),
                ap50,
                map,
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| body.iter().map(|r| r[c].chars().count()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let render = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    // label left, marks centred, metrics right
                    let pad = widths[c] - s.chars().count();
                    match c {
                        0 => format!("{s}{}", " ".repeat(pad)),
                        7 | 8 => format!("{}{s}", " ".repeat(pad)),
                        _ => format!("{}{s}{}", " ".repeat(pad / 2), " ".repeat(pad - pad / 2)),
                    }
                })
                .collect();
            parts.join(" | ").trim_end().to_string()
        };
        let mut out = render(&header.map(String::from));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        out.push('\n');
        for r in &body {
            out.push_str(&render(r));
            out.push('\n');
        }
        out
    }
}

/// Applies `f` to every item on up to `threads` scoped threads, keeping order.
fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<U>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let v = f(&items[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(v);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|v| v.expect("every slot filled")).collect()
}

fn family_burn_in(base: &TrainConfig, data: &Dataset, family: (bool, bool)) -> Result<(ParameterSet, f64, f64)> {
    let row = AblationRow { label: String::new(), mode: Mode::ClassicalEma, cascade: family.0, uncertainty: family.1 };
    let cfg = row.config(base);
    let trainer = Trainer::new(cfg.clone(), data)?;
    let params = burn_in(&cfg, data)?;
    let model = Detector { cfg: trainer.detector(), params: &params };
    let r = evaluate_model(&model, &data.test, data.num_classes, &cfg.eval)?;
    Ok((params, r.ap50, r.map))
}

fn run_row(base: &TrainConfig, data: &Dataset, row: &AblationRow, burned: &ParameterSet) -> Result<(f64, f64)> {
    let trainer = Trainer::new(row.config(base), data)?;
    let mut state = trainer.state_after_burn_in(burned)?;
    trainer.run_until(&mut state, usize::MAX)?;
    let (ap50, map, _) = trainer.evaluate_state(&state)?;
    Ok((ap50, map))
}

/// Burns in once per detector family, evaluates that model, then trains
/// every row from it. Failing runs are reported in their row rather than
/// aborting the matrix; only an invalid spec or base config is an error.
pub fn run_ablation(base: &TrainConfig, data: &Dataset, spec: &AblationSpec, threads: usize) -> Result<AblationReport> {
    spec.validate()?;
    for r in &spec.rows {
        Trainer::new(r.config(base), data)?;
    }
    let families = spec.families();
    let burned = parallel_map(&families, threads, |&f| family_burn_in(base, data, f));
    let baselines = families
        .iter()
        .zip(&burned)
        .map(|(&(cascade, uncertainty), r)| Baseline {
            cascade,
            uncertainty,
            outcome: match r {
                Ok((_, ap50, map)) => Outcome::Done { ap50: *ap50, map: *map },
                Err(e) => Outcome::Failed(e.to_string()),
            },
        })
        .collect();
    let outcomes = parallel_map(&spec.rows, threads, |row| {
        let i = families.iter().position(|f| *f == row.family()).expect("family listed");
        match &burned[i] {
            Err(e) => Outcome::Failed(format!("burn-in failed: {e}")),
            Ok((params, _, _)) => match run_row(base, data, row, params) {
                Ok((ap50, map)) => Outcome::Done { ap50, map },
                Err(e) => Outcome::Failed(e.to_string()),
            },
        }
    });
    let rows = spec.rows.iter().cloned().zip(outcomes).map(|(row, outcome)| RowResult { row, outcome }).collect();
    Ok(AblationReport { baselines, rows })
}

/// Ablation parallelism from `TMRD_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("TMRD_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1)
}

#[cfg(test)]
mod tests;
