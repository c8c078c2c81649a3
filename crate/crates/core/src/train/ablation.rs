use std::path::{Path, PathBuf};

use glfusion_tensor::Scalar;
use serde::{Deserialize, Serialize};

use super::config::{AblationFlags, TrainConfig};
use super::eval::{evaluate_samples, EvalSettings};
use super::{train, Dataset};
use crate::cycle::CycleMode;
use crate::error::{Error, Result};
use crate::model::GlFusion;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationRow {
    Base,
    PlusMgfm,
    PlusMlfm,
    Full,
    FusionOnly,
    FusionSingleCycle,
    FusionDenseCycle,
}

/// Rows of the fusion-module table.
pub const FUSION_ROWS: [AblationRow; 4] =
    [AblationRow::Base, AblationRow::PlusMgfm, AblationRow::PlusMlfm, AblationRow::Full];
/// Rows of the cycle-loss table.
pub const CYCLE_ROWS: [AblationRow; 3] =
    [AblationRow::FusionOnly, AblationRow::FusionSingleCycle, AblationRow::FusionDenseCycle];

impl AblationRow {
    pub fn label(self) -> &'static str {
        match self {
            Self::Base => "Base",
            Self::PlusMgfm => "+MGFM",
            Self::PlusMlfm => "+MLFM",
            Self::Full => "+MGFM +MLFM",
            Self::FusionOnly => "Fusion",
            Self::FusionSingleCycle => "Fusion + Cyc.",
            Self::FusionDenseCycle => "Fusion + Dense Cyc.",
        }
    }

    pub fn flags(self) -> AblationFlags {
        match self {
            Self::Base => AblationFlags::new(false, false, false),
            Self::PlusMgfm => AblationFlags::new(true, false, true),
            Self::PlusMlfm => AblationFlags::new(false, true, true),
            Self::Full | Self::FusionSingleCycle | Self::FusionDenseCycle => AblationFlags::new(true, true, true),
            Self::FusionOnly => AblationFlags::new(true, true, false),
        }
    }

    /// `base` with this row's switches.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.with_ablation(self.flags());
        cfg.cycle.enabled = true;
        cfg.model.mgfm.enabled = true;
        cfg.model.mlfm.enabled = true;
        cfg.cycle.mode = if self == Self::FusionSingleCycle { CycleMode::Single } else { CycleMode::Dense };
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub row: AblationRow,
    pub label: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Test average Dice per seed.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl AblationCell {
    /// Half the spread between the best and worst seed.
    pub fn half_range(&self) -> f64 {
        (self.max - self.min) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub cells: Vec<AblationCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub full_ge_base: Option<bool>,
    pub full_ge_fusion_only: Option<bool>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub tables: Vec<AblationTable>,
    pub directional: DirectionalCheck,
}

impl AblationReport {
    pub fn cell(&self, row: AblationRow) -> Option<&AblationCell> {
        self.tables.iter().flat_map(|t| &t.cells).find(|c| c.row == row)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            out.push_str(&format!(
                "## {}\n\n| Configuration | Average Dice (mean ± half-range) | min | max |\n|---|---|---|---|\n",
                t.title
            ));
            for c in &t.cells {
                out.push_str(&format!(
                    "| {} | {:.2} ± {:.2} | {:.2} | {:.2} |\n",
                    c.label,
                    100.0 * c.mean,
                    100.0 * c.half_range(),
                    100.0 * c.min,
                    100.0 * c.max
                ));
            }
            out.push('\n');
        }
        for n in &self.directional.notes {
            out.push_str(&format!("- {n}\n"));
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct CachedRun {
    config_hash: String,
    seed: u64,
    test_average_dice: f64,
    run_dir: PathBuf,
}

fn run_once<T: Scalar>(cfg: &TrainConfig, data: &Dataset, work_dir: &Path) -> Result<f64> {
    let hash = cfg.config_hash();
    let key = format!("{}_seed{}", &hash[..16], cfg.rng_seed);
    let cache = work_dir.join("cache").join(format!("{key}.json"));
    if let Ok(text) = std::fs::read_to_string(&cache) {
        if let Ok(c) = serde_json::from_str::<CachedRun>(&text) {
            if c.config_hash == hash && c.seed == cfg.rng_seed {
                log::info!("reusing cached run {key}");
                return Ok(c.test_average_dice);
            }
        }
    }
    let run_dir = work_dir.join("runs").join(&key);
    let report = train::<T>(cfg, data, &run_dir)?;
    let model = GlFusion::<T>::load_checkpoint(&report.checkpoint)?;
    let settings = EvalSettings { resize: cfg.resize, crop: cfg.crop, chunk: cfg.eval_chunk };
    let score = evaluate_samples(&model, &data.test, &settings, None)?.average;
    let cached = CachedRun { config_hash: hash, seed: cfg.rng_seed, test_average_dice: score, run_dir };
    if let Some(parent) = cache.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&cache, serde_json::to_string_pretty(&cached).expect("cache entry serializes"))
        .map_err(|e| Error::io(&cache, e))?;
    Ok(score)
}

/// Trains each requested row once per seed and tabulates test average Dice.
///
/// Runs are cached under `work_dir` by configuration hash and seed, so rows sharing a
/// configuration train once.
pub fn run_ablation_suite<T: Scalar>(
    base: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    rows: &[AblationRow],
    work_dir: &Path,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("the ablation suite needs at least one seed".into()));
    }
    let mut tables = Vec::new();
    for (title, group) in [
        ("Effectiveness of MGFM and MLFM", &FUSION_ROWS[..]),
        ("Effectiveness of Cyc. and Dense Cyc.", &CYCLE_ROWS[..]),
    ] {
        let mut cells = Vec::new();
        for &row in group.iter().filter(|r| rows.contains(r)) {
            let cfg = row.config(base);
            let mut scores = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let run = TrainConfig { rng_seed: seed, ..cfg.clone() };
                let score = run_once::<T>(&run, data, work_dir)?;
                log::info!("{} seed {seed}: test average Dice {score:.4}", row.label());
                scores.push(score);
            }
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            cells.push(AblationCell {
                row,
                label: row.label().to_string(),
                config_hash: cfg.config_hash(),
                seeds: seeds.to_vec(),
                scores,
                mean,
                min,
                max,
            });
        }
        if !cells.is_empty() {
            tables.push(AblationTable { title: title.to_string(), cells });
        }
    }
    let mean_of = |row: AblationRow| tables.iter().flat_map(|t| &t.cells).find(|c| c.row == row).map(|c| c.mean);
    let full = mean_of(AblationRow::Full).or(mean_of(AblationRow::FusionDenseCycle));
    let mut notes = Vec::new();
    let mut compare = |other: AblationRow| {
        let (f, o) = (full?, mean_of(other)?);
        let ok = f >= o;
        notes.push(format!(
            "full {:.4} {} {} {:.4} (difference {:+.4})",
            f,
            if ok { ">=" } else { "<" },
            other.label(),
            o,
            f - o
        ));
        Some(ok)
    };
    let full_ge_base = compare(AblationRow::Base);
    let full_ge_fusion_only = compare(AblationRow::FusionOnly);
    let report = AblationReport {
        seeds: seeds.to_vec(),
        tables,
        directional: DirectionalCheck { full_ge_base, full_ge_fusion_only, notes },
    };
    std::fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
    let json = work_dir.join("ablation.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| Error::io(&json, e))?;
    let md = work_dir.join("ablation.md");
    std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(report)
}
