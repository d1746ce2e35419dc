//! The component ablation table: five runs sharing one dataset and seed.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{Ablation, Config};
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::eval::evaluate;
use crate::metrics::ClosedMetrics;
use crate::train::train;

/// Flag rows in table order: baseline, +RLP, +MGMT, +AVFE without RACL, full.
pub fn ablation_rows() -> [Ablation; 5] {
    let row = |rlp, mgmt, avfe, racl| Ablation { rlp, mgmt, avfe, racl };
    [
        row(false, false, false, false),
        row(true, false, false, false),
        row(true, true, false, false),
        row(true, true, true, false),
        row(true, true, true, true),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub flags: Ablation,
    pub closed: ClosedMetrics,
}

/// Train and evaluate every row on `split`. With `out`, each run's artifacts
/// go to `out/row{i}`.
pub fn run_ablation_suite(base: &Config, ds: &Dataset, split: Split, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    ablation_rows()
        .into_iter()
        .enumerate()
        .map(|(i, flags)| {
            let mut cfg = base.clone();
            cfg.ablation = flags;
            log::info!("ablation row {i}: {flags:?}");
            let dir = out.map(|d| d.join(format!("row{i}")));
            let run = train(&cfg, ds, dir.as_deref())?;
            let report = evaluate(&run.model, &run.store, ds, &cfg.eval, split, false)?;
            Ok(AblationRow { flags, closed: report.closed })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("rlp,mgmt,avfe,racl,mA,acc,prec,recall,f1\n");
    for r in rows {
        let (f, c) = (&r.flags, &r.closed);
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            u8::from(f.rlp),
            u8::from(f.mgmt),
            u8::from(f.avfe),
            u8::from(f.racl),
            c.ma,
            c.acc,
            c.prec,
            c.recall,
            c.f1
        );
    }
    s
}
