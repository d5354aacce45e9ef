//! Optional TOML config. Every key mirrors a long flag; flags win.
//!
//! ```toml
//! jobs = 4
//! timeout = 30.0          # seconds per backend request
//! retries = 1
//! max_inflight = 4
//! backends = ["uie=stdio:my-uie-server", "image_segmenter=http://localhost:8080/seg"]
//! split = "shared,specific"
//! format = "table"
//! case_insensitive = false
//! strict_relations = false
//! exclude_vacuous = false
//! label = "ours"
//! ```

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub jobs: Option<usize>,
    pub timeout: Option<f64>,
    pub retries: Option<u32>,
    pub max_inflight: Option<usize>,
    #[serde(default)]
    pub backends: Vec<String>,
    pub split: Option<String>,
    pub format: Option<String>,
    pub case_insensitive: Option<bool>,
    pub strict_relations: Option<bool>,
    pub exclude_vacuous: Option<bool>,
    pub label: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let c: FileConfig = toml::from_str(
            r#"
            jobs = 2
            timeout = 1.5
            backends = ["uie=stdio:cat"]
            split = "shared"
            exclude_vacuous = true
            "#,
        )
        .unwrap();
        assert_eq!(c.jobs, Some(2));
        assert_eq!(c.timeout, Some(1.5));
        assert_eq!(c.backends, vec!["uie=stdio:cat"]);
        assert_eq!(c.exclude_vacuous, Some(true));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(toml::from_str::<FileConfig>("jbos = 2").is_err());
    }
}
