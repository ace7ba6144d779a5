//! Settings from a TOML file. Command-line flags override every key here,
//! and keys left out fall back to the built-in defaults.

use std::path::Path;

use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub fragments: FragmentSection,
    #[serde(default)]
    pub reward: RewardSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub time_budget: Option<f64>,
    pub max_work: Option<u64>,
    pub retries: Option<u32>,
    pub order_filter: Option<bool>,
    pub min_flops: Option<u64>,
    pub max_flops: Option<u64>,
    pub max_size: Option<u64>,
    pub min_size_tensor: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FragmentSection {
    pub cap: Option<usize>,
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub delta: Option<f64>,
    /// Power-law speed reward exponent; the log reward is used when absent.
    pub alpha: Option<f64>,
    pub kl: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
