//! Multi-arm, multi-seed experiments and their reports.
//!
//! Layout under the output root:
//! * `experiment.json`: the resolved configuration;
//! * `data/seed_<s>/`: the dataset generated with seed `s`;
//! * `runs/<arm>/seed_<s>/`: one training run (see [`crate::trainer`]);
//! * report files named by [`Outputs`], each as `.csv` and `.md`.
//!
//! Runs whose directory already holds a completed run with the same
//! configuration are skipped. Reports only read files on disk.

use crate::dataset::{self, DatasetSpec, Manifest, Split};
use crate::error::{LabError, Result};
use crate::trainer::{self, EvalRow, TrainConfig};
use afl_core::loss::{AblationFlags, LossKind, LossSpec};
use afl_core::metrics::SampleMetrics;
use afl_core::phantom::{SmoothnessBin, VolumeBin};
use log::info;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const EXPERIMENT_JSON: &str = "experiment.json";
pub const REFERENCE_LABEL: &str = "reference (full scale, not reproduced)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    pub loss: LossSpec,
}

/// Report file stems, relative to the output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub ablation: String,
    pub comparison: String,
    pub bins: String,
}

impl Default for Outputs {
    fn default() -> Self {
        Self { ablation: "ablation".into(), comparison: "comparison".into(), bins: "bins".into() }
    }
}

/// A dataset recipe, a list of seeds, one training recipe and the loss arms
/// that differ only in their `LossSpec`. `train.seed` is replaced by each
/// seed in turn, which also seeds that seed's dataset. `train.loss` supplies
/// the hyperparameters of the generated ablation and comparison arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Arms of `compare`; one per loss kind when empty.
    #[serde(default)]
    pub arms: Vec<Arm>,
    #[serde(default)]
    pub outputs: Outputs,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            arms: Vec::new(),
            outputs: Outputs::default(),
        }
    }
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(LabError::Config(format!("arm name `{name}` must be non-empty [A-Za-z0-9_-]")))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(LabError::Config("seeds must not be empty".into()));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(LabError::Config("seeds must be distinct".into()));
        }
        let mut names = HashSet::new();
        for arm in &self.arms {
            check_name(&arm.name)?;
            arm.loss.validate().map_err(|e| LabError::Config(format!("arm {}: {e}", arm.name)))?;
            if !names.insert(&arm.name) {
                return Err(LabError::Config(format!("duplicate arm `{}`", arm.name)));
            }
        }
        Ok(())
    }

    /// The six ablation arms in grid order.
    pub fn ablation_arms(&self) -> Vec<(AblationFlags, Arm)> {
        AblationFlags::GRID
            .iter()
            .map(|&flags| {
                let loss = LossSpec { kind: LossKind::Afl, ablation: flags, ..self.train.loss };
                (flags, Arm { name: format!("afl_{}", flags.label().replace('+', "_")), loss })
            })
            .collect()
    }

    pub fn comparison_arms(&self) -> Vec<Arm> {
        if !self.arms.is_empty() {
            return self.arms.clone();
        }
        LossKind::ALL
            .iter()
            .map(|&kind| {
                let mut loss = LossSpec { kind, ..self.train.loss };
                if kind == LossKind::Afl {
                    loss.ablation = AblationFlags::ALL;
                }
                Arm { name: kind.name().to_string(), loss }
            })
            .collect()
    }

    fn train_config(&self, arm: &Arm, seed: u64) -> TrainConfig {
        TrainConfig { seed, loss: arm.loss, ..self.train.clone() }
    }
}

pub fn data_dir(root: &Path, seed: u64) -> PathBuf {
    root.join("data").join(format!("seed_{seed}"))
}

pub fn run_dir(root: &Path, arm: &str, seed: u64) -> PathBuf {
    root.join("runs").join(arm).join(format!("seed_{seed}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn write_experiment(root: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&root.join(EXPERIMENT_JSON), &(serde_json::to_string_pretty(cfg).expect("config serializes") + "\n"))
}

pub fn load_experiment(root: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&root.join(EXPERIMENT_JSON))
}

/// Generates the dataset of `seed` unless an identical one exists.
pub fn ensure_dataset(root: &Path, spec: &DatasetSpec, seed: u64) -> Result<PathBuf> {
    let dir = data_dir(root, seed);
    if let Ok(m) = Manifest::load(&dir) {
        if m.seed == seed && m.spec == *spec {
            return Ok(dir);
        }
    }
    info!("generating {} phantoms into {}", spec.n, dir.display());
    dataset::make_dataset(&dir, spec, seed)?;
    Ok(dir)
}

/// Trains every arm on every seed, skipping completed runs.
pub fn run_arms(root: &Path, cfg: &ExperimentConfig, arms: &[Arm]) -> Result<()> {
    cfg.validate()?;
    write_experiment(root, cfg)?;
    for &seed in &cfg.seeds {
        let data = ensure_dataset(root, &cfg.dataset, seed)?;
        for arm in arms {
            let out = run_dir(root, &arm.name, seed);
            let tc = cfg.train_config(arm, seed);
            if trainer::is_complete(&out, &data, &tc) {
                info!("{} seed {seed}: already complete", arm.name);
                continue;
            }
            info!("{} seed {seed}: training", arm.name);
            trainer::train(&data, &tc, &out)?;
        }
    }
    Ok(())
}

pub fn read_eval(root: &Path, arm: &str, seed: u64) -> Result<Vec<EvalRow>> {
    trainer::read_csv(&run_dir(root, arm, seed).join(trainer::EVAL_CSV))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Across-seed statistics of one arm; each seed contributes the mean of its
/// validation samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub seeds: usize,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub sensitivity_mean: f64,
    pub specificity_mean: f64,
}

pub fn summarize(root: &Path, arm: &str, seeds: &[u64]) -> Result<ArmSummary> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let rows = read_eval(root, arm, s)?;
        let m = SampleMetrics::mean(rows.iter().map(EvalRow::metrics).collect::<Vec<_>>().iter())
            .ok_or_else(|| LabError::Data(format!("{arm} seed {s}: empty eval.csv")))?;
        per_seed.push(m);
    }
    let col = |f: fn(&SampleMetrics) -> f64| per_seed.iter().map(f).collect::<Vec<_>>();
    let (iou_mean, iou_std) = mean_std(&col(|m| m.iou));
    let (dsc_mean, dsc_std) = mean_std(&col(|m| m.dsc));
    Ok(ArmSummary {
        arm: arm.to_string(),
        seeds: seeds.len(),
        iou_mean,
        iou_std,
        dsc_mean,
        dsc_std,
        sensitivity_mean: mean_std(&col(|m| m.sensitivity)).0,
        specificity_mean: mean_std(&col(|m| m.specificity)).0,
    })
}

/// Full-scale reference IoU/DSC of each ablation row, in grid order.
const ABLATION_REFERENCE: [(f64, f64); 6] =
    [(0.641, 0.715), (0.656, 0.733), (0.677, 0.748), (0.687, 0.756), (0.696, 0.769), (0.677, 0.746)];

/// Full-scale reference IoU/DSC/sensitivity/specificity per loss kind.
fn comparison_reference(kind: LossKind) -> [f64; 4] {
    match kind {
        LossKind::FocalBaseline => [0.641, 0.715, 0.924, 0.9484],
        LossKind::Tversky => [0.654, 0.726, 0.917, 0.948],
        LossKind::CrossEntropy => [0.630, 0.705, 0.870, 0.876],
        LossKind::Iou => [0.654, 0.727, 0.917, 0.947],
        LossKind::Dice => [0.665, 0.739, 0.904, 0.952],
        LossKind::DiceCe => [0.670, 0.742, 0.938, 0.927],
        LossKind::DiceFocal => [0.685, 0.757, 0.896, 0.949],
        LossKind::Afl => [0.696, 0.769, 0.941, 0.9489],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub alpha_va: bool,
    pub gamma_va: bool,
    pub gamma_msa: bool,
    pub summary: ArmSummary,
    pub reference_iou: f64,
    pub reference_dsc: f64,
}

const SUMMARY_COLUMNS: [&str; 8] =
    ["arm", "seeds", "iou_mean", "iou_std", "dsc_mean", "dsc_std", "sensitivity_mean", "specificity_mean"];

impl ArmSummary {
    fn fields(&self) -> Vec<String> {
        let mut v = vec![self.arm.clone(), self.seeds.to_string()];
        v.extend(
            [self.iou_mean, self.iou_std, self.dsc_mean, self.dsc_std, self.sensitivity_mean, self.specificity_mean]
                .iter()
                .map(f64::to_string),
        );
        v
    }
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let csv_err = |e: csv::Error| LabError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

pub fn ablation_report(root: &Path, cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let rows = cfg
        .ablation_arms()
        .iter()
        .zip(ABLATION_REFERENCE)
        .map(|((flags, arm), (ri, rd))| {
            Ok(AblationRow {
                alpha_va: flags.use_alpha_va,
                gamma_va: flags.use_gamma_va,
                gamma_msa: flags.use_gamma_msa,
                summary: summarize(root, &arm.name, &cfg.seeds)?,
                reference_iou: ri,
                reference_dsc: rd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stem = root.join(&cfg.outputs.ablation);
    let header: Vec<&str> = ["alpha_va", "gamma_va", "gamma_msa"]
        .into_iter()
        .chain(SUMMARY_COLUMNS)
        .chain(["reference_iou", "reference_dsc"])
        .collect();
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v: Vec<String> = [r.alpha_va, r.gamma_va, r.gamma_msa].iter().map(bool::to_string).collect();
            v.extend(r.summary.fields());
            v.extend([r.reference_iou.to_string(), r.reference_dsc.to_string()]);
            v
        })
        .collect();
    write_table(&stem.with_extension("csv"), &header, &records)?;
    let mut md = format!(
        "| α_va | γ_va | γ_mSa | IoU | DSC | {REFERENCE_LABEL} IoU | {REFERENCE_LABEL} DSC |\n|---|---|---|---|---|---|---|\n"
    );
    for r in &rows {
        let s = &r.summary;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.3} | {:.3} |",
            mark(r.alpha_va),
            mark(r.gamma_va),
            mark(r.gamma_msa),
            s.iou_mean,
            s.iou_std,
            s.dsc_mean,
            s.dsc_std,
            r.reference_iou,
            r.reference_dsc
        );
    }
    let _ = writeln!(md, "\nMean ± std over {} seed(s) of the per-seed validation mean.", cfg.seeds.len());
    write_text(&stem.with_extension("md"), &md)?;
    Ok(rows)
}

pub fn ablate(root: &Path, cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let arms: Vec<Arm> = cfg.ablation_arms().into_iter().map(|(_, a)| a).collect();
    run_arms(root, cfg, &arms)?;
    ablation_report(root, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub kind: LossKind,
    pub summary: ArmSummary,
}

pub fn comparison_report(root: &Path, cfg: &ExperimentConfig) -> Result<Vec<ComparisonRow>> {
    let rows = cfg
        .comparison_arms()
        .iter()
        .map(|arm| Ok(ComparisonRow { kind: arm.loss.kind, summary: summarize(root, &arm.name, &cfg.seeds)? }))
        .collect::<Result<Vec<_>>>()?;
    let stem = root.join(&cfg.outputs.comparison);
    let header: Vec<&str> = ["kind"].into_iter().chain(SUMMARY_COLUMNS).collect();
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| std::iter::once(r.kind.name().to_string()).chain(r.summary.fields()).collect())
        .collect();
    write_table(&stem.with_extension("csv"), &header, &records)?;
    let mut md = format!(
        "| loss | IoU | DSC | sensitivity | specificity | {REFERENCE_LABEL} IoU / DSC / sens. / spec. |\n|---|---|---|---|---|---|\n"
    );
    for r in &rows {
        let s = &r.summary;
        let [a, b, c, d] = comparison_reference(r.kind);
        let _ = writeln!(
            md,
            "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.4} | {:.4} | {a} / {b} / {c} / {d} |",
            s.arm, s.iou_mean, s.iou_std, s.dsc_mean, s.dsc_std, s.sensitivity_mean, s.specificity_mean
        );
    }
    write_text(&stem.with_extension("md"), &md)?;
    Ok(rows)
}

pub fn compare(root: &Path, cfg: &ExperimentConfig) -> Result<Vec<ComparisonRow>> {
    run_arms(root, cfg, &cfg.comparison_arms())?;
    comparison_report(root, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    /// `volume` or `smoothness`.
    pub axis: String,
    pub bin: String,
    /// Validation samples in the bin, summed over seeds.
    pub count: usize,
    pub baseline_dsc: f64,
    pub candidate_dsc: f64,
    /// `(candidate - baseline) / baseline`; zero when both are zero.
    pub relative_improvement: f64,
}

pub fn relative_improvement(baseline: f64, candidate: f64) -> f64 {
    if baseline == candidate {
        0.0
    } else {
        (candidate - baseline) / baseline
    }
}

/// Per-bin validation DSC of two arms, pooling the samples of every seed.
pub fn bin_report(root: &Path, cfg: &ExperimentConfig, baseline: &str, candidate: &str) -> Result<Vec<BinRow>> {
    // (volume bin, smoothness bin, baseline dsc, candidate dsc)
    let mut pooled: Vec<(VolumeBin, SmoothnessBin, f64, f64)> = Vec::new();
    for &seed in &cfg.seeds {
        let manifest = Manifest::load(&data_dir(root, seed))?;
        let base = read_eval(root, baseline, seed)?;
        let cand = read_eval(root, candidate, seed)?;
        for e in manifest.samples.iter().filter(|e| e.split == Split::Val) {
            let find = |rows: &[EvalRow], arm: &str| {
                rows.iter()
                    .find(|r| r.id == e.id)
                    .map(|r| r.dsc)
                    .ok_or_else(|| LabError::Data(format!("{arm} seed {seed}: no result for {}", e.id)))
            };
            pooled.push((e.volume_bin, e.smoothness_bin, find(&base, baseline)?, find(&cand, candidate)?));
        }
    }
    let mut rows = Vec::new();
    let mut push = |axis: &str, bin: &str, sel: Vec<(f64, f64)>| {
        let n = sel.len();
        let (b, c) = if n == 0 {
            (0.0, 0.0)
        } else {
            let b = sel.iter().map(|p| p.0).sum::<f64>() / n as f64;
            let c = sel.iter().map(|p| p.1).sum::<f64>() / n as f64;
            (b, c)
        };
        rows.push(BinRow {
            axis: axis.into(),
            bin: bin.into(),
            count: n,
            baseline_dsc: b,
            candidate_dsc: c,
            relative_improvement: relative_improvement(b, c),
        });
    };
    for v in VolumeBin::ALL {
        push("volume", v.name(), pooled.iter().filter(|p| p.0 == v).map(|p| (p.2, p.3)).collect());
    }
    for s in SmoothnessBin::ALL {
        push("smoothness", s.name(), pooled.iter().filter(|p| p.1 == s).map(|p| (p.2, p.3)).collect());
    }
    push("all", "all", pooled.iter().map(|p| (p.2, p.3)).collect());

    let stem = root.join(&cfg.outputs.bins);
    trainer::write_csv(&stem.with_extension("csv"), &rows)?;
    let mut md = format!("| axis | bin | n | {baseline} DSC | {candidate} DSC | relative improvement |\n|---|---|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} | {:.4} | {:+.2}% |",
            r.axis,
            r.bin,
            r.count,
            r.baseline_dsc,
            r.candidate_dsc,
            100.0 * r.relative_improvement
        );
    }
    write_text(&stem.with_extension("md"), &md)?;
    Ok(rows)
}

/// Default baseline and candidate arms for the bin report: the first of
/// each list with completed runs for every seed.
pub fn default_bin_arms(root: &Path, cfg: &ExperimentConfig) -> Option<(String, String)> {
    let done = |arm: &str| cfg.seeds.iter().all(|&s| run_dir(root, arm, s).join(trainer::EVAL_CSV).is_file());
    let base = ["focal_baseline", "afl_none"].into_iter().find(|a| done(a))?;
    let cand = ["afl", "afl_a_gv_gm"].into_iter().find(|a| done(a))?;
    Some((base.to_string(), cand.to_string()))
}

/// Which reports `report` regenerated.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Regenerated {
    pub ablation: bool,
    pub comparison: bool,
    pub bins: bool,
}

/// Rewrites every report whose runs are all complete.
pub fn report(root: &Path, cfg: &ExperimentConfig) -> Result<Regenerated> {
    let done = |arm: &str| cfg.seeds.iter().all(|&s| run_dir(root, arm, s).join(trainer::EVAL_CSV).is_file());
    let mut out = Regenerated::default();
    if cfg.ablation_arms().iter().all(|(_, a)| done(&a.name)) {
        ablation_report(root, cfg)?;
        out.ablation = true;
    }
    if cfg.comparison_arms().iter().all(|a| done(&a.name)) {
        comparison_report(root, cfg)?;
        out.comparison = true;
    }
    if let Some((b, c)) = default_bin_arms(root, cfg) {
        bin_report(root, cfg, &b, &c)?;
        out.bins = true;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_arm_names() {
        let names: Vec<String> = ExperimentConfig::default().ablation_arms().into_iter().map(|(_, a)| a.name).collect();
        assert_eq!(names, ["afl_none", "afl_a", "afl_a_gv", "afl_a_gm", "afl_a_gv_gm", "afl_gv_gm"]);
    }

    #[test]
    fn comparison_arms_cover_every_kind() {
        let arms = ExperimentConfig::default().comparison_arms();
        assert_eq!(arms.len(), 8);
        assert!(arms.iter().all(|a| a.loss.kind != LossKind::Afl || a.loss.ablation == AblationFlags::ALL));
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seeds": [0], "bogus": 1}"#).is_err());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seeds": []}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seeds": [1, 1]}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"seeds": [1], "arms": [{"name": "a b", "loss": {"kind": "dice"}}]}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seeds": [4], "train": {"epochs": 3}}"#).unwrap();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.train.lr, 0.01);
    }

    #[test]
    fn improvement_convention() {
        assert_eq!(relative_improvement(0.0, 0.0), 0.0);
        assert_eq!(relative_improvement(0.5, 0.5), 0.0);
        assert!((relative_improvement(0.5, 0.6) - 0.2).abs() < 1e-12);
        assert!(relative_improvement(0.0, 0.1).is_infinite());
    }
}
