//! The four-row ablation grid: clustering baseline, with label transfer,
//! with label transfer and the memory bank, and the full multi-group model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterMode;
use crate::config::Config;
use crate::data::synth_generate;
use crate::error::Result;
use crate::trainer::{adapt, pretrain_source, EpochMetrics, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    LabelTransfer,
    LabelTransferBank,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::LabelTransfer,
        Variant::LabelTransferBank,
        Variant::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::LabelTransfer => "+LT",
            Variant::LabelTransferBank => "+LT+bank",
            Variant::Full => "GLT",
        }
    }

    /// Derives the variant's training config from the base config.
    pub fn configure(&self, base: &TrainConfig, k_list: &[usize]) -> TrainConfig {
        let mut cfg = base.clone();
        let multi = *self == Variant::Full;
        match cfg.groups.mode {
            ClusterMode::Kmeans => {
                cfg.groups.kmeans_k_list = if multi { k_list.to_vec() } else { k_list[..1].to_vec() };
            }
            ClusterMode::Dbscan => {
                if !multi {
                    cfg.groups.dbscan_eps_list.truncate(1);
                }
            }
        }
        cfg.bank_group = 0;
        cfg.refine = *self != Variant::Baseline;
        if matches!(self, Variant::Baseline | Variant::LabelTransfer) {
            cfg.weights.wcl = 0.0;
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    /// Per-epoch metrics; entry 0 is the initial clustering.
    pub history: Vec<EpochMetrics>,
}

impl AblationRun {
    pub fn initial(&self) -> &EpochMetrics {
        &self.history[0]
    }

    pub fn last(&self) -> &EpochMetrics {
        self.history.last().expect("history holds the initial entry")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub median_map: f64,
    pub median_top1: f64,
    pub median_nmi: f64,
    pub median_noise_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationReport {
    pub fn runs_of(&self, variant: Variant) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    pub fn summary(&self, variant: Variant) -> AblationSummary {
        let col = |f: fn(&EpochMetrics) -> f64| median(&self.runs_of(variant).map(|r| f(r.last())).collect::<Vec<_>>());
        AblationSummary {
            variant,
            median_map: col(|m| m.map),
            median_top1: col(|m| m.top1),
            median_nmi: col(|m| m.nmi),
            median_noise_rate: col(|m| m.noise_rate),
        }
    }

    pub fn summaries(&self) -> Vec<AblationSummary> {
        Variant::ALL.iter().map(|&v| self.summary(v)).collect()
    }

    /// Markdown table of per-variant medians.
    pub fn table(&self) -> String {
        let mut out = String::from("| variant | mAP | top-1 | NMI | noise rate |\n|---|---|---|---|---|\n");
        for s in self.summaries() {
            out.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                s.variant, s.median_map, s.median_top1, s.median_nmi, s.median_noise_rate
            ));
        }
        out
    }
}

/// Runs every variant on every seed. Source pretraining is shared by the
/// variants of one seed.
pub fn run_ablation(cfg: &Config) -> Result<AblationReport> {
    cfg.validate()?;
    let mut report = AblationReport::default();
    for &seed in &cfg.ablation.seeds {
        let mut synth = cfg.synth.clone();
        synth.seed = seed;
        let (source, target) = synth_generate(&synth)?;
        let mut base = cfg.train.clone();
        base.seed = seed;
        let pre = pretrain_source(&source, &base)?;
        for variant in Variant::ALL {
            let vcfg = variant.configure(&base, &cfg.ablation.k_list);
            let (_, history) = adapt(&source, &target, &vcfg, Some(&pre))?;
            log::info!("seed {seed} {variant}: mAP {:.4}", history.epochs.last().unwrap().map);
            report.runs.push(AblationRun {
                variant,
                seed,
                history: history.epochs,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn variant_configs() {
        let base = TrainConfig::default();
        let k = [5, 10];
        let b = Variant::Baseline.configure(&base, &k);
        assert!(!b.refine && b.weights.wcl == 0.0 && b.groups.kmeans_k_list == vec![5]);
        let lt = Variant::LabelTransfer.configure(&base, &k);
        assert!(lt.refine && lt.weights.wcl == 0.0);
        let bank = Variant::LabelTransferBank.configure(&base, &k);
        assert!(bank.refine && bank.weights.wcl == base.weights.wcl && bank.groups.kmeans_k_list == vec![5]);
        let full = Variant::Full.configure(&base, &k);
        assert_eq!(full.groups.kmeans_k_list, vec![5, 10]);
    }
}
