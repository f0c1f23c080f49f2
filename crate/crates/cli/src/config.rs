use std::path::Path;

use clap::Args;
use hpgan_core::evaluation::Profile;
use hpgan_core::networks::ModelConfig;
use serde_json::Value;

use crate::Failure;

/// Flags that take precedence over the profile and the config file.
#[derive(Debug, Default, Clone, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_hypotheses: Option<usize>,
    #[arg(long)]
    pub threshold_multiplier: Option<f64>,
}

/// Nested objects merge key by key; everything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Profile defaults, then the config file, then flags.
pub fn resolve_config(
    profile: Profile,
    file: Option<&Path>,
    overrides: &ConfigOverrides,
) -> Result<ModelConfig, Failure> {
    let mut value = serde_json::to_value(profile.config()).map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("config {} is not JSON: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(Failure::Usage(format!("config {} must be a JSON object", path.display())));
        }
        merge(&mut value, patch);
    }
    let mut config: ModelConfig =
        serde_json::from_value(value).map_err(|e| Failure::Usage(format!("invalid config: {e}")))?;
    let o = overrides;
    if let Some(v) = o.epochs {
        config.epochs = v;
    }
    if let Some(v) = o.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = o.kernel_size {
        config.kernel_size = v;
    }
    if let Some(v) = o.n_blocks {
        config.n_blocks = v;
    }
    if let Some(v) = o.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = o.n_hypotheses {
        config.n_hypotheses = v;
    }
    if let Some(v) = o.threshold_multiplier {
        config.threshold_multiplier = v;
    }
    config.validated().map_err(|e| Failure::Usage(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn layering() {
        let f = file(r#"{"kernel_size": 9, "epochs": 5, "loss_weights": {"w_gen": 10.0}}"#);
        let o = ConfigOverrides {
            epochs: Some(7),
            ..Default::default()
        };
        let c = resolve_config(Profile::Desk, Some(f.path()), &o).unwrap();
        assert_eq!((c.kernel_size, c.epochs, c.base_channels), (9, 7, 8));
        assert_eq!((c.loss_weights.w_gen, c.loss_weights.w_enc), (10.0, 1.0));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let f = file(r#"{"kernal_size": 9}"#);
        assert!(matches!(
            resolve_config(Profile::Paper, Some(f.path()), &ConfigOverrides::default()),
            Err(Failure::Usage(_))
        ));
        let f = file(r#"{"kernel_size": 4}"#);
        assert!(resolve_config(Profile::Paper, Some(f.path()), &ConfigOverrides::default()).is_err());
    }
}
