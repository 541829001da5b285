//! Ablation matrices: every requested (fusion, positional encoding, matching
//! loss) cell trained over several seeds and summarized.

use std::fmt::Write as _;

use serde::Serialize;

use super::config::RunConfig;
use crate::data::Sample;
use crate::encoder::{EncoderConfig, FusionModel, FusionVariant};
use crate::error::{Error, Result};
use crate::posenc::PosEncKind;
use crate::train::{evaluate, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Cell {
    pub fusion: FusionVariant,
    pub posenc: PosEncKind,
    pub ctm: bool,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.fusion, self.posenc, if self.ctm { "ctm" } else { "no-ctm" })
    }
}

/// Cells in run order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Matrix {
    pub cells: Vec<Cell>,
}

impl Matrix {
    /// Every fusion strategy with the rate-aware rotary encoding and the
    /// matching loss on.
    pub fn fusion_table() -> Self {
        let cells = FusionVariant::ALL
            .iter()
            .map(|&fusion| Cell { fusion, posenc: PosEncKind::TaRope, ctm: true })
            .collect();
        Matrix { cells }
    }

    /// Every positional encoding under joint self-attention, without and
    /// with the matching loss.
    pub fn posenc_table() -> Self {
        let mut cells = Vec::new();
        for &posenc in &PosEncKind::ALL {
            for ctm in [false, true] {
                cells.push(Cell { fusion: FusionVariant::MsaMsa, posenc, ctm });
            }
        }
        Matrix { cells }
    }

    /// Cartesian product, fusion-major.
    pub fn product(fusions: &[FusionVariant], posencs: &[PosEncKind], ctm: &[bool]) -> Self {
        let mut cells = Vec::new();
        for &fusion in fusions {
            for &posenc in posencs {
                for &c in ctm {
                    cells.push(Cell { fusion, posenc, ctm: c });
                }
            }
        }
        Matrix { cells }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Stable text form, part of the run-directory hash.
    pub fn describe(&self) -> String {
        self.cells.iter().map(Cell::label).collect::<Vec<_>>().join(",")
    }
}

/// One trained (cell, seed) pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunOutcome {
    pub cell: Cell,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub seeds: usize,
    pub succeeded: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub params: usize,
    pub params_paper_scale: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct AblationReport {
    pub runs: Vec<RunOutcome>,
    pub cells: Vec<CellSummary>,
}

impl AblationReport {
    pub fn cell(&self, fusion: FusionVariant, posenc: PosEncKind, ctm: bool) -> Option<&CellSummary> {
        let want = Cell { fusion, posenc, ctm };
        self.cells.iter().find(|c| c.cell == want)
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunOutcome> {
        self.runs.iter().filter(|r| r.error.is_some())
    }
}

/// Counted parameters of `fusion` at the configured widths and at the
/// default full-size widths.
pub fn parameter_counts(cfg: &EncoderConfig, fusion: FusionVariant) -> Result<(usize, usize)> {
    let here = FusionModel::new(EncoderConfig { fusion, ..cfg.clone() }, 0)?.count_parameters();
    let paper = FusionModel::new(EncoderConfig { fusion, ..EncoderConfig::default() }, 0)?.count_parameters();
    Ok((here, paper))
}

/// Config of one (cell, seed) run derived from `base`.
pub fn cell_config(base: &RunConfig, cell: Cell, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.fusion = cell.fusion;
    cfg.model.posenc = cell.posenc;
    cfg.train.seed = seed;
    if !cell.ctm {
        cfg.ctm.lambda_ctm = 0.0;
    }
    cfg
}

/// Trains every cell with seeds `base.train.seed .. + n_seeds` and scores
/// the final model on `test`. A failing run is recorded and the remaining
/// runs continue. `on_run` sees each outcome with its model, if training
/// finished.
pub fn run_matrix(
    base: &RunConfig,
    matrix: &Matrix,
    n_seeds: usize,
    train_set: &[Sample],
    test_set: &[Sample],
    on_run: &mut dyn FnMut(&RunOutcome, Option<&FusionModel>),
) -> Result<AblationReport> {
    if matrix.is_empty() {
        return Err(Error::Config("ablation matrix has no cells".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    base.validate()?;
    let mut report = AblationReport::default();
    for &cell in &matrix.cells {
        let mut accs = Vec::new();
        for k in 0..n_seeds as u64 {
            let seed = base.train.seed + k;
            let cfg = cell_config(base, cell, seed);
            let mut model = None;
            let result = (|| {
                let mut m = FusionModel::new(cfg.model.clone(), seed)?;
                train(&mut m, train_set, None, &cfg.train, cfg.ctm_for_training(), &mut |_| {})?;
                let acc = evaluate(&m, test_set, cfg.train.batch_size)?.accuracy;
                model = Some(m);
                Ok::<f64, Error>(acc)
            })();
            let outcome = match result {
                Ok(acc) => {
                    accs.push(acc);
                    RunOutcome { cell, seed, accuracy: Some(acc), error: None }
                }
                Err(e) => RunOutcome { cell, seed, accuracy: None, error: Some(e.to_string()) },
            };
            on_run(&outcome, model.as_ref());
            report.runs.push(outcome);
        }
        let (params, params_paper_scale) = parameter_counts(&base.model, cell.fusion)?;
        let (mean, std) = mean_std(&accs);
        report.cells.push(CellSummary {
            cell,
            seeds: n_seeds,
            succeeded: accs.len(),
            mean_accuracy: mean,
            std_accuracy: std,
            params,
            params_paper_scale,
        });
    }
    Ok(report)
}

/// Population standard deviation.
fn mean_std(x: &[f64]) -> (Option<f64>, Option<f64>) {
    if x.is_empty() {
        return (None, None);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// One row per cell.
pub fn results_csv(r: &AblationReport) -> String {
    let mut out = String::from("fusion,posenc,ctm,seeds,succeeded,mean_accuracy,std_accuracy,params,params_paper_scale\n");
    for c in &r.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.cell.fusion,
            c.cell.posenc,
            c.cell.ctm,
            c.seeds,
            c.succeeded,
            opt(c.mean_accuracy),
            opt(c.std_accuracy),
            c.params,
            c.params_paper_scale
        );
    }
    out
}

/// One row per (fusion, encoding) with the mean accuracy without and with
/// the matching loss side by side; a column is empty if that cell was not
/// requested or every seed failed.
pub fn table_csv(r: &AblationReport) -> String {
    let mut keys: Vec<(FusionVariant, PosEncKind)> = Vec::new();
    for c in &r.cells {
        if !keys.contains(&(c.cell.fusion, c.cell.posenc)) {
            keys.push((c.cell.fusion, c.cell.posenc));
        }
    }
    let mut out = String::from("fusion,posenc,without_ctm,with_ctm,params,params_paper_scale\n");
    for (f, p) in keys {
        let off = r.cell(f, p, false);
        let on = r.cell(f, p, true);
        let any = off.or(on).expect("key came from a cell");
        let _ = writeln!(
            out,
            "{f},{p},{},{},{},{}",
            opt(off.and_then(|c| c.mean_accuracy)),
            opt(on.and_then(|c| c.mean_accuracy)),
            any.params,
            any.params_paper_scale
        );
    }
    out
}

/// One row per (cell, seed), including failures.
pub fn runs_csv(r: &AblationReport) -> String {
    let mut out = String::from("fusion,posenc,ctm,seed,accuracy,error\n");
    for run in &r.runs {
        let err = run.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            run.cell.fusion,
            run.cell.posenc,
            run.cell.ctm,
            run.seed,
            opt(run.accuracy),
            err
        );
    }
    out
}
