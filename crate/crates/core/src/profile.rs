//! Parameter and FLOP reports with per-module breakdowns.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleRow {
    pub module: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub input_size: usize,
    pub params: usize,
    pub flops: u64,
    pub params_m: f64,
    pub gflops: f64,
    pub modules: Vec<ModuleRow>,
}

impl ProfileReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<14} {:>12} {:>10}\n", "module", "params", "GFLOPs");
        for r in &self.modules {
            s.push_str(&format!("{:<14} {:>12} {:>10.3}\n", r.module, r.params, r.flops as f64 / 1e9));
        }
        s.push_str(&format!(
            "{:<14} {:>12} {:>10.3}\n({:.3} M params, {:.2} GFLOPs at {}x{})\n",
            "total", self.params, self.gflops, self.params_m, self.gflops, self.input_size, self.input_size
        ));
        s
    }
}

/// Profiles a freshly built model at its configured input size. FLOPs count
/// one multiply-accumulate as two operations.
pub fn profile(cfg: &ModelConfig) -> Result<ProfileReport> {
    let model = Model::build(cfg, 0, candle_core::DType::F32)?;
    profile_model(&model, cfg.input_size)
}

pub fn profile_model(model: &Model, input_size: usize) -> Result<ProfileReport> {
    let params = model.profile_params();
    let macs = model.profile_macs(input_size)?;
    let mut names: Vec<String> = params.keys().chain(macs.keys()).cloned().collect();
    names.sort();
    names.dedup();
    let modules: Vec<ModuleRow> = names
        .into_iter()
        .map(|m| ModuleRow {
            params: params.get(&m).copied().unwrap_or(0),
            flops: 2 * macs.get(&m).copied().unwrap_or(0),
            module: m,
        })
        .collect();
    let total_params = modules.iter().map(|r| r.params).sum();
    let total_flops = modules.iter().map(|r| r.flops).sum();
    Ok(ProfileReport {
        input_size,
        params: total_params,
        flops: total_flops,
        params_m: total_params as f64 / 1e6,
        gflops: total_flops as f64 / 1e9,
        modules,
    })
}
