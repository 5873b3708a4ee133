use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::case_rng;
use crate::engine::checkpoint::TrainedModel;
use crate::engine::infer::{predict_multimodal, predict_single};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_per_case, assd, dice_score};
use crate::volume::{ModalityId, MultiModalCase};

/// Column header of the per-case CSV.
pub const REPORT_COLUMNS: [&str; 4] = ["case_id", "mode", "dice", "assd"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Multimodal,
    Single(ModalityId),
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Multimodal => f.write_str("multimodal"),
            EvalMode::Single(m) => write!(f, "single:{m}"),
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "multimodal" => Ok(EvalMode::Multimodal),
            Some(("single", m)) => Ok(EvalMode::Single(ModalityId::new(m)?)),
            _ => Err(Error::Config(format!("mode must be `multimodal` or `single:<ID>`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case_id: String,
    pub dice: f64,
    /// `None` when either mask has no surface.
    pub assd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub mode: EvalMode,
    pub cases: Vec<CaseResult>,
    /// Mean and population std over all cases.
    pub dice: (f64, f64),
    /// Over the cases where ASSD is defined.
    pub assd: Option<(f64, f64)>,
    pub assd_missing: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| v.to_string())
}

impl Report {
    pub fn from_cases(mode: EvalMode, cases: Vec<CaseResult>) -> Result<Self> {
        let dices: Vec<f64> = cases.iter().map(|c| c.dice).collect();
        let assds: Vec<f64> = cases.iter().filter_map(|c| c.assd).collect();
        Ok(Self {
            dice: aggregate_per_case(&dices)?,
            assd: if assds.is_empty() { None } else { Some(aggregate_per_case(&assds)?) },
            assd_missing: cases.len() - assds.len(),
            mode,
            cases,
        })
    }

    /// `case_id,mode,dice,assd`; undefined ASSD is written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for c in &self.cases {
            out.push_str(&format!("{},{},{},{}\n", c.case_id, self.mode, c.dice, fmt_opt(c.assd)));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut t = format!("mode: {}  cases: {}\n", self.mode, self.cases.len());
        t.push_str(&format!("{:<12} {:>10} {:>12}\n", "case", "Dice [%]", "ASSD"));
        for c in &self.cases {
            let assd = c.assd.map_or_else(|| "NA".into(), |v| format!("{v:.3}"));
            t.push_str(&format!("{:<12} {:>10.2} {:>12}\n", c.case_id, 100.0 * c.dice, assd));
        }
        let assd = self.assd.map_or_else(|| "NA".into(), |(m, s)| format!("{m:.3} ± {s:.3}"));
        t.push_str(&format!(
            "{:<12} {:>10} {:>12}\n",
            "mean ± std",
            format!("{:.2} ± {:.2}", 100.0 * self.dice.0, 100.0 * self.dice.1),
            assd
        ));
        if self.assd_missing > 0 {
            t.push_str(&format!("ASSD undefined (empty mask) for {} case(s)\n", self.assd_missing));
        }
        t
    }

    /// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        for (ext, body) in [("csv", self.to_csv()), ("txt", self.to_table())] {
            let p = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Per-case Dice and ASSD for every case, evaluated in parallel.
pub fn evaluate(cases: &[MultiModalCase], model: &TrainedModel, mode: &EvalMode, window: [usize; 3]) -> Result<Report> {
    if cases.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let results = cases
        .par_iter()
        .map(|case| {
            let pred = match (mode, model) {
                (EvalMode::Multimodal, TrainedModel::Maml(m)) => predict_multimodal(case, m, window)?.mask,
                (EvalMode::Multimodal, TrainedModel::Single(m)) => {
                    return Err(Error::Config(format!(
                        "multimodal evaluation needs a fused model; checkpoint is a {} baseline",
                        m.modality()
                    )))
                }
                (EvalMode::Single(id), _) => predict_single(case.volume(id)?, id, model, window)?,
            };
            Ok(CaseResult {
                case_id: case.case_id().into(),
                dice: dice_score(&pred, case.mask())?,
                assd: assd(&pred, case.mask(), case.spacing())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Report::from_cases(mode.clone(), results)
}

/// Seeded `k`-fold partition of `0..n`; returns `(train, test)` index lists.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("cannot split {n} cases into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut case_rng(seed, 0));
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let test = idx[lo..hi].to_vec();
            let train = idx[..lo].iter().chain(&idx[hi..]).copied().collect();
            (train, test)
        })
        .collect())
}
