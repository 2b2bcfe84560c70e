//! Layered runtime configuration.
//!
//! Settings resolve in precedence order: explicit command-line overrides,
//! then environment variables (`CONFMEND_ENDPOINT`, `CONFMEND_API_KEY`,
//! `CONFMEND_MODEL`), then a TOML config file, then built-in defaults.

use std::path::PathBuf;

use serde::Deserialize;

use crate::backend::live::LiveConfig;
use crate::confidence::ConfidenceParams;
use crate::error::{Error, Result};
use crate::orchestrator::{Policy, SessionConfig};

pub const ENV_ENDPOINT: &str = "CONFMEND_ENDPOINT";
pub const ENV_API_KEY: &str = "CONFMEND_API_KEY";
pub const ENV_MODEL: &str = "CONFMEND_MODEL";

/// Contents of a TOML config file. Every field is optional; sections may
/// be omitted entirely.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub session: SessionSection,
    #[serde(default)]
    pub confidence: ConfidenceSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub backend: BackendSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSection {
    pub policy: Option<String>,
    /// Total paths per question (warmup + reasoning).
    pub budget: Option<usize>,
    /// Unmonitored calibration paths per question.
    pub warmup: Option<usize>,
    pub max_tokens_per_path: Option<usize>,
    pub max_interventions_per_path: Option<usize>,
    pub refractory_tokens: Option<usize>,
    pub min_window_basis: Option<usize>,
    pub correction_max_tokens: Option<usize>,
    pub prompt_template: Option<String>,
    /// Questions processed concurrently (default 1).
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceSection {
    pub top_k: Option<usize>,
    pub window: Option<usize>,
    pub percentile: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    /// "scripted" or "live".
    pub kind: Option<String>,
    /// Script path for the scripted backend.
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
}

/// Explicit overrides, typically from command-line flags. `backend` takes
/// the same syntax as the `--backend` flag: `scripted:PATH` or `live`.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub policy: Option<Policy>,
    pub budget: Option<usize>,
    pub warmup: Option<usize>,
    pub percentile: Option<f64>,
    pub window: Option<usize>,
    pub top_k: Option<usize>,
    pub seed: Option<u64>,
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

/// Which token source a session talks to.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendChoice {
    Scripted(PathBuf),
    Live(LiveConfig),
}

/// Fully resolved settings for one session.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub session: SessionConfig,
    /// `None` when neither file nor flags named a backend; commands that
    /// generate tokens reject that, commands that only read archives
    /// don't care.
    pub backend: Option<BackendChoice>,
    pub parallelism: usize,
}

/// Read and parse a TOML config file.
pub fn load_file(path: &std::path::Path) -> Result<FileConfig> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::storage(path.to_path_buf(), e))?;
    toml::from_str(&body).map_err(|e| {
        Error::InvalidConfig(format!("config file {}: {e}", path.display()))
    })
}

/// Resolve settings from the standard process environment.
pub fn resolve(file: &FileConfig, overrides: &Overrides) -> Result<ResolvedConfig> {
    resolve_with_env(file, overrides, |key| std::env::var(key).ok())
}

/// Resolve settings with an injectable environment, for tests.
pub fn resolve_with_env(
    file: &FileConfig,
    overrides: &Overrides,
    env: impl Fn(&str) -> Option<String>,
) -> Result<ResolvedConfig> {
    let defaults = SessionConfig::default();
    let confidence = ConfidenceParams {
        top_k: overrides
            .top_k
            .or(file.confidence.top_k)
            .unwrap_or(defaults.confidence.top_k),
        window: overrides
            .window
            .or(file.confidence.window)
            .unwrap_or(defaults.confidence.window),
        percentile: overrides
            .percentile
            .or(file.confidence.percentile)
            .unwrap_or(defaults.confidence.percentile),
    };
    let budget = overrides
        .budget
        .or(file.session.budget)
        .unwrap_or(defaults.budget);
    let warmup = overrides
        .warmup
        .or(file.session.warmup)
        .unwrap_or(defaults.warmup_count);
    let policy = match (&overrides.policy, &file.session.policy) {
        (Some(p), _) => *p,
        (None, Some(name)) => name.parse()?,
        (None, None) => defaults.policy,
    };
    let mut session = defaults
        .with_confidence(confidence)
        .with_budget(budget, warmup)
        .with_policy(policy);
    if let Some(v) = file.session.max_tokens_per_path {
        session.max_tokens_per_path = v;
    }
    if let Some(v) = file.session.max_interventions_per_path {
        session.max_interventions_per_path = v;
    }
    if let Some(v) = file.session.refractory_tokens {
        session.refractory_tokens = v;
    }
    if let Some(v) = file.session.min_window_basis {
        session.min_window_basis = v;
    }
    if let Some(v) = file.session.correction_max_tokens {
        session.correction_max_tokens = v;
    }
    if let Some(v) = &file.session.prompt_template {
        session.prompt_template = v.clone();
    }
    if let Some(v) = file.sampling.temperature {
        session.sampling.temperature = v;
    }
    if let Some(v) = file.sampling.top_p {
        session.sampling.top_p = v;
    }
    session.sampling.seed = overrides
        .seed
        .or(file.sampling.seed)
        .unwrap_or(session.sampling.seed);
    session.validate()?;
    let parallelism = file.session.parallelism.unwrap_or(1);
    if parallelism == 0 {
        return Err(Error::InvalidConfig(
            "parallelism must be at least 1".into(),
        ));
    }
    let backend = resolve_backend(file, overrides, &env)?;
    Ok(ResolvedConfig {
        session,
        backend,
        parallelism,
    })
}

fn resolve_backend(
    file: &FileConfig,
    overrides: &Overrides,
    env: &impl Fn(&str) -> Option<String>,
) -> Result<Option<BackendChoice>> {
    // A --backend flag carries the kind and, for scripted, the path.
    let (kind, flag_path) = match &overrides.backend {
        Some(raw) => match raw.split_once(':') {
            Some((kind, path)) => (Some(kind.trim().to_string()), Some(PathBuf::from(path))),
            None => (Some(raw.trim().to_string()), None),
        },
        None => (file.backend.kind.clone(), None),
    };
    let Some(kind) = kind else {
        return Ok(None);
    };
    match kind.as_str() {
        "scripted" => {
            let path = flag_path
                .or_else(|| file.backend.script.clone())
                .ok_or_else(|| {
                    Error::InvalidConfig(
                        "scripted backend needs a script path (use scripted:PATH or set \
                         backend.script in the config file)"
                            .into(),
                    )
                })?;
            if path.as_os_str().is_empty() {
                return Err(Error::InvalidConfig(
                    "scripted backend script path is empty".into(),
                ));
            }
            Ok(Some(BackendChoice::Scripted(path)))
        }
        "live" => {
            let endpoint = overrides
                .endpoint
                .clone()
                .or_else(|| env(ENV_ENDPOINT))
                .or_else(|| file.backend.endpoint.clone())
                .ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "live backend needs an endpoint (--endpoint, {ENV_ENDPOINT}, or \
                         backend.endpoint)"
                    ))
                })?;
            let model = overrides
                .model
                .clone()
                .or_else(|| env(ENV_MODEL))
                .or_else(|| file.backend.model.clone())
                .ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "live backend needs a model name (--model, {ENV_MODEL}, or \
                         backend.model)"
                    ))
                })?;
            let mut live = LiveConfig::new(endpoint, model);
            if let Some(key) = env(ENV_API_KEY).or_else(|| file.backend.api_key.clone()) {
                live = live.with_api_key(key);
            }
            Ok(Some(BackendChoice::Live(live)))
        }
        other => Err(Error::InvalidConfig(format!(
            "unknown backend kind '{other}' (expected scripted or live)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn empty_inputs_resolve_to_defaults() {
        let resolved =
            resolve_with_env(&FileConfig::default(), &Overrides::default(), no_env).unwrap();
        assert_eq!(resolved.session, SessionConfig::default());
        assert_eq!(resolved.backend, None);
        assert_eq!(resolved.parallelism, 1);
    }

    #[test]
    fn file_fields_apply_and_rederive_dependent_defaults() {
        let file: FileConfig = toml::from_str(
            r#"
            [session]
            policy = "restart"
            budget = 8
            warmup = 2
            parallelism = 4

            [confidence]
            window = 12
            top_k = 3
            percentile = 25.0

            [sampling]
            temperature = 0.5
            seed = 7

            [backend]
            kind = "scripted"
            script = "fixtures/demo/script.jsonl"
            "#,
        )
        .unwrap();
        let resolved = resolve_with_env(&file, &Overrides::default(), no_env).unwrap();
        assert_eq!(resolved.session.policy, Policy::Restart);
        assert_eq!(resolved.session.budget, 8);
        assert_eq!(resolved.session.warmup_count, 2);
        assert_eq!(resolved.session.reasoning_count, 6);
        assert_eq!(resolved.session.confidence.window, 12);
        assert_eq!(resolved.session.min_window_basis, 3, "window / 4");
        assert_eq!(resolved.session.sampling.temperature, 0.5);
        assert_eq!(resolved.session.sampling.seed, 7);
        assert_eq!(resolved.parallelism, 4);
        assert_eq!(
            resolved.backend,
            Some(BackendChoice::Scripted("fixtures/demo/script.jsonl".into()))
        );
    }

    #[test]
    fn explicit_gating_fields_beat_derived_values() {
        let file: FileConfig = toml::from_str(
            r#"
            [confidence]
            window = 12

            [session]
            min_window_basis = 5
            refractory_tokens = 9
            "#,
        )
        .unwrap();
        let resolved = resolve_with_env(&file, &Overrides::default(), no_env).unwrap();
        assert_eq!(resolved.session.min_window_basis, 5);
        assert_eq!(resolved.session.refractory_tokens, 9);
    }

    #[test]
    fn cli_overrides_beat_file_values() {
        let file: FileConfig = toml::from_str(
            r#"
            [session]
            policy = "discard"
            budget = 4

            [sampling]
            seed = 1
            "#,
        )
        .unwrap();
        let overrides = Overrides {
            policy: Some(Policy::Reflect),
            budget: Some(6),
            seed: Some(99),
            ..Overrides::default()
        };
        let resolved = resolve_with_env(&file, &overrides, no_env).unwrap();
        assert_eq!(resolved.session.policy, Policy::Reflect);
        assert_eq!(resolved.session.budget, 6);
        assert_eq!(resolved.session.sampling.seed, 99);
    }

    #[test]
    fn live_backend_pulls_endpoint_from_env_over_file() {
        let file: FileConfig = toml::from_str(
            r#"
            [backend]
            kind = "live"
            endpoint = "http://file.example/v1"
            model = "file-model"
            "#,
        )
        .unwrap();
        let env = |key: &str| match key {
            ENV_ENDPOINT => Some("http://env.example/v1".to_string()),
            ENV_API_KEY => Some("sk-test".to_string()),
            _ => None,
        };
        let resolved = resolve_with_env(&file, &Overrides::default(), env).unwrap();
        match resolved.backend {
            Some(BackendChoice::Live(live)) => {
                assert_eq!(live.base_url, "http://env.example/v1");
                assert_eq!(live.model, "file-model");
                assert_eq!(live.api_key.as_deref(), Some("sk-test"));
            }
            other => panic!("expected live backend, got {other:?}"),
        }
    }

    #[test]
    fn cli_endpoint_beats_env() {
        let overrides = Overrides {
            backend: Some("live".into()),
            endpoint: Some("http://flag.example/v1".into()),
            model: Some("flag-model".into()),
            ..Overrides::default()
        };
        let env = |key: &str| match key {
            ENV_ENDPOINT => Some("http://env.example/v1".to_string()),
            _ => None,
        };
        let resolved = resolve_with_env(&FileConfig::default(), &overrides, env).unwrap();
        match resolved.backend {
            Some(BackendChoice::Live(live)) => {
                assert_eq!(live.base_url, "http://flag.example/v1");
            }
            other => panic!("expected live backend, got {other:?}"),
        }
    }

    #[test]
    fn backend_flag_parses_scripted_with_path() {
        let overrides = Overrides {
            backend: Some("scripted:demo/script.jsonl".into()),
            ..Overrides::default()
        };
        let resolved =
            resolve_with_env(&FileConfig::default(), &overrides, no_env).unwrap();
        assert_eq!(
            resolved.backend,
            Some(BackendChoice::Scripted("demo/script.jsonl".into()))
        );
    }

    #[test]
    fn scripted_backend_without_a_path_is_rejected() {
        let overrides = Overrides {
            backend: Some("scripted".into()),
            ..Overrides::default()
        };
        let err =
            resolve_with_env(&FileConfig::default(), &overrides, no_env).unwrap_err();
        assert!(err.to_string().contains("script path"));
    }

    #[test]
    fn live_backend_without_endpoint_or_model_is_rejected() {
        let overrides = Overrides {
            backend: Some("live".into()),
            ..Overrides::default()
        };
        let err =
            resolve_with_env(&FileConfig::default(), &overrides, no_env).unwrap_err();
        assert!(err.to_string().contains("endpoint"));
    }

    #[test]
    fn unknown_backend_kind_is_rejected() {
        let overrides = Overrides {
            backend: Some("carrier-pigeon".into()),
            ..Overrides::default()
        };
        assert!(resolve_with_env(&FileConfig::default(), &overrides, no_env).is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let result: std::result::Result<FileConfig, _> = toml::from_str(
            r#"
            [session]
            polciy = "reflect"
            "#,
        );
        assert!(result.is_err(), "typo'd keys must not be silently ignored");
    }

    #[test]
    fn zero_parallelism_is_rejected() {
        let file: FileConfig = toml::from_str(
            r#"
            [session]
            parallelism = 0
            "#,
        )
        .unwrap();
        let err = resolve_with_env(&file, &Overrides::default(), no_env).unwrap_err();
        assert!(err.to_string().contains("parallelism"));
    }

    #[test]
    fn warmup_exceeding_budget_is_rejected() {
        let overrides = Overrides {
            budget: Some(1),
            warmup: Some(2),
            ..Overrides::default()
        };
        assert!(resolve_with_env(&FileConfig::default(), &overrides, no_env).is_err());
    }

    #[test]
    fn calibrate_only_budget_is_allowed() {
        let overrides = Overrides {
            budget: Some(4),
            warmup: Some(4),
            ..Overrides::default()
        };
        let resolved =
            resolve_with_env(&FileConfig::default(), &overrides, no_env).unwrap();
        assert_eq!(resolved.session.reasoning_count, 0);
    }
}
