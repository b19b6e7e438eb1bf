//! Ablation suites: each suite derives a family of configs from a base
//! config, trains every variant under the identical seed and budget, and
//! tabulates parameter counts with held-out scores.

use anyhow::{bail, Result};
use ccformer_model::model::CcformerParams;
use ccformer_model::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

use crate::config::{BclBranchCfg, Config, QGen};
use crate::trainer;

pub const SUITES: [&str; 5] = ["components", "qgen", "eim", "layers", "bcl"];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    pub val_mj: f64,
    pub val_mf: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub suite: String,
    pub rows: Vec<AblationRow>,
}

fn variants(base: &Config, suite: &str) -> Result<Vec<(String, Config)>> {
    let mut out: Vec<(String, Config)> = Vec::new();
    let mut push = |name: &str, edit: &dyn Fn(&mut Config)| {
        let mut cfg = base.clone();
        edit(&mut cfg);
        out.push((name.to_string(), cfg));
    };
    match suite {
        "components" => {
            push("without_eim", &|c| c.ablation.disable_eim = true);
            push("without_ici", &|c| c.ablation.disable_ici = true);
            push("without_iti", &|c| c.ablation.disable_iti = true);
            push("without_bcl", &|c| c.ablation.disable_bcl = true);
            push("full", &|_| {});
        }
        "qgen" => {
            push("no_generator", &|c| c.ablation.query_generator = QGen::None);
            push("repeat_generator", &|c| c.ablation.query_generator = QGen::Repeat);
            push("attention_generator", &|c| c.ablation.query_generator = QGen::Attention);
        }
        "eim" => {
            push("neither_direction", &|c| {
                c.ablation.disable_ave = true;
                c.ablation.disable_vae = true;
            });
            push("audio_enhancement_only", &|c| c.ablation.disable_ave = true);
            push("visual_enhancement_only", &|c| c.ablation.disable_vae = true);
            push("both_directions", &|_| {});
        }
        "layers" => {
            for k in 1..=4usize {
                let name = format!("decoder_blocks_{k}");
                push(&name, &move |c| c.model.decoder_blocks = k);
            }
            for m in 1..=4usize {
                let name = format!("iti_per_block_{m}");
                push(&name, &move |c| c.model.iti_per_block = m);
            }
        }
        "bcl" => {
            push("original_visual_branch", &|c| {
                c.model.bcl.second_branch = BclBranchCfg::OriginalVisual;
            });
            push("enhanced_visual_branch", &|c| {
                c.model.bcl.second_branch = BclBranchCfg::EnhancedVisual;
            });
            push("enhanced_audio_branch", &|c| {
                c.model.bcl.second_branch = BclBranchCfg::EnhancedAudio;
            });
        }
        other => bail!("unknown ablation suite `{other}`; pick one of {SUITES:?}"),
    }
    Ok(out)
}

/// Registered parameter totals must agree with the closed-form count for
/// every variant before any training time is spent.
fn audit_param_count(cfg: &Config) -> Result<usize> {
    let model_cfg = cfg.model_config();
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    CcformerParams::new(&mut store, &mut rng, model_cfg.clone())?;
    let expected = CcformerParams::param_count(&model_cfg);
    if store.total_elems() != expected {
        bail!(
            "parameter audit failed for this variant: registered {} vs computed {}",
            store.total_elems(),
            expected
        );
    }
    Ok(expected)
}

/// Trains every variant of `suite` from `base` (same data, seed, and step
/// budget) and reports held-out scores.
pub fn run_suite(base: &Config, suite: &str) -> Result<AblationTable> {
    let list = variants(base, suite)?;
    let mut rows = Vec::with_capacity(list.len());
    for (name, cfg) in list {
        let mut cfg = cfg;
        cfg.train.out_dir = PathBuf::from(&base.train.out_dir)
            .join(suite)
            .join(&name)
            .to_string_lossy()
            .into_owned();
        cfg.validate()?;
        let params = audit_param_count(&cfg)?;
        println!("[ablate] {suite}/{name} starting ({params} parameters)");
        let outcome = trainer::train(&cfg, None)?;
        println!(
            "[ablate] {suite}/{name} params {params} val M_J {:.4} M_F {:.4}",
            outcome.val.mj, outcome.val.mf
        );
        rows.push(AblationRow { name, params, val_mj: outcome.val.mj, val_mf: outcome.val.mf });
    }
    Ok(AblationTable { suite: suite.to_string(), rows })
}
