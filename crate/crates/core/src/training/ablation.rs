//! Module ablation: the same recipe trained once per variant and seed.

use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use super::trainer::Trainer;
use crate::data::{BiTemporalSample, Perturbation};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::AblationFlags;

pub const ABLATION_FILE: &str = "ablation.tsv";

/// Full model, each single module off, and the image-only baseline.
pub const DEFAULT_VARIANTS: [AblationFlags; 5] = [
    AblationFlags::FULL,
    AblationFlags::NO_IFR,
    AblationFlags::NO_TDE,
    AblationFlags::NO_ITFF,
    AblationFlags::IMAGE_ONLY,
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: AblationFlags,
    pub seed: u64,
    /// Held-out metrics, or the error that stopped this variant.
    pub clean: std::result::Result<EvalReport, String>,
    /// Held-out metrics under the perturbation, when one was requested.
    pub perturbed: Option<EvalReport>,
}

impl AblationRow {
    pub fn iou(&self) -> Option<f64> {
        self.clean.as_ref().ok().map(|r| r.iou)
    }

    /// Clean F1 minus perturbed F1.
    pub fn f1_drop(&self) -> Option<f64> {
        let clean = self.clean.as_ref().ok()?;
        Some(clean.f1 - self.perturbed.as_ref()?.f1)
    }
}

/// Parses comma-separated variant names such as `full,no-ifr`.
pub fn parse_variants(list: &str) -> Result<Vec<AblationFlags>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            AblationFlags::from_name(name).ok_or_else(|| {
                let known: Vec<String> = AblationFlags::TABLE.iter().map(|f| f.name()).collect();
                Error::Config(format!("unknown variant `{name}` (known: {})", known.join(", ")))
            })
        })
        .collect()
}

pub struct AblationPlan<'a> {
    pub base: TrainConfig,
    pub variants: Vec<AblationFlags>,
    pub seeds: Vec<u64>,
    pub train: &'a [BiTemporalSample],
    pub test: &'a [BiTemporalSample],
    pub perturbation: Option<Perturbation>,
}

/// Trains every variant for every seed. A failing variant is recorded in
/// its row and the others still run. With `out_dir`, each run logs to
/// `<out>/<variant>-seed<k>/`.
pub fn run_ablation(
    plan: &AblationPlan<'_>,
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for &seed in &plan.seeds {
        for &variant in &plan.variants {
            let (clean, perturbed) = match run_one(plan, variant, seed, out_dir) {
                Ok((c, p)) => (Ok(c), p),
                Err(e) => (Err(e.to_string()), None),
            };
            let row = AblationRow {
                variant,
                seed,
                clean,
                perturbed,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    rows
}

fn run_one(
    plan: &AblationPlan<'_>,
    variant: AblationFlags,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(EvalReport, Option<EvalReport>)> {
    let mut cfg = plan.base.clone();
    cfg.model.flags = variant;
    cfg.seed = seed;
    let mut trainer = Trainer::new(cfg)?;
    let dir = out_dir.map(|d| d.join(format!("{}-seed{seed}", variant.name())));
    trainer.run(plan.train, None, dir.as_deref(), |_| {})?;
    let clean = trainer.evaluate(plan.test, &Perturbation::IDENTITY, seed)?;
    let perturbed = match &plan.perturbation {
        Some(p) => Some(trainer.evaluate(plan.test, p, seed)?),
        None => None,
    };
    Ok((clean, perturbed))
}

pub const TSV_HEADER: &str = "variant\tseed\tiou\tf1\tprecision\trecall\tperturbed_iou\tperturbed_f1\tf1_drop\tstatus";

pub fn tsv_line(row: &AblationRow) -> String {
    let mut line = format!("{}\t{}", row.variant.name(), row.seed);
    match &row.clean {
        Ok(r) => {
            let _ = write!(line, "\t{:.6}\t{:.6}\t{:.6}\t{:.6}", r.iou, r.f1, r.precision, r.recall);
            match (&row.perturbed, row.f1_drop()) {
                (Some(p), Some(d)) => {
                    let _ = write!(line, "\t{:.6}\t{:.6}\t{:.6}", p.iou, p.f1, d);
                }
                _ => line.push_str("\t-\t-\t-"),
            }
            line.push_str("\tok");
        }
        Err(e) => {
            line.push_str("\t-\t-\t-\t-\t-\t-\t-\terror: ");
            line.push_str(&e.replace(['\t', '\n'], " "));
        }
    }
    line
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&tsv_line(r));
        out.push('\n');
    }
    out
}

/// Seeds on which `full` scores at least `other` on held-out IoU, out of
/// the seeds where both succeeded.
pub fn wins(rows: &[AblationRow], full: AblationFlags, other: AblationFlags) -> (usize, usize) {
    let mut won = 0;
    let mut total = 0;
    for a in rows.iter().filter(|r| r.variant == full) {
        let paired = rows.iter().find(|r| r.variant == other && r.seed == a.seed);
        if let (Some(x), Some(y)) = (a.iou(), paired.and_then(AblationRow::iou)) {
            total += 1;
            won += usize::from(x >= y);
        }
    }
    (won, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_samples;
    use crate::data::AugmentConfig;

    #[test]
    fn variant_names() {
        let v = parse_variants("full, no-ifr,image-only").unwrap();
        assert_eq!(v, vec![AblationFlags::FULL, AblationFlags::NO_IFR, AblationFlags::IMAGE_ONLY]);
        assert!(parse_variants("full,no-decoder").is_err());
    }

    #[test]
    fn tiny_ablation_table() {
        let data = generate_samples(3, 0, 3, 32).unwrap();
        let mut base = TrainConfig {
            batch_size: 2,
            max_iteration: 2,
            stop_at: None,
            augment: AugmentConfig::NONE,
            ..TrainConfig::default()
        };
        base.model.widths = [4, 4, 4, 4];
        let plan = AblationPlan {
            base,
            variants: vec![AblationFlags::FULL, AblationFlags::IMAGE_ONLY],
            seeds: vec![0],
            train: &data[..2],
            test: &data[2..],
            perturbation: Some(Perturbation {
                noise_sigma: 0.05,
                ..Perturbation::IDENTITY
            }),
        };
        let rows = run_ablation(&plan, None, |_| {});
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.clean.is_ok() && r.f1_drop().is_some()));
        let tsv = ablation_tsv(&rows);
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.lines().nth(1).unwrap().starts_with("full\t0\t"));
        assert_eq!(wins(&rows, AblationFlags::FULL, AblationFlags::IMAGE_ONLY).1, 1);
    }
}
