//! TOML config files with `section.key=value` command-line overrides.

use std::path::Path;

use toml::{Table, Value};

use crate::error::{FeloError, Result};
use crate::orchestrator::ExperimentConfig;

/// Environment variable consulted for the seed when neither the file nor the
/// command line sets one.
pub const SEED_ENV: &str = "FELO_SEED";

fn defaults_table() -> Table {
    Table::try_from(ExperimentConfig::default()).expect("default config serializes")
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Check `value` against the default's type for `key`, widening integers
/// where a float is expected.
fn coerce(key: &str, default: &Value, value: Value) -> Result<Value> {
    match (default, value) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(_), Value::Array(items)) => {
            if let Some(bad) = items.iter().find(|v| !v.is_integer()) {
                return Err(FeloError::config(format!(
                    "{key}: expected an array of integers, found an element of type {}",
                    type_name(bad)
                )));
            }
            Ok(Value::Array(items))
        }
        (d, v) if std::mem::discriminant(d) == std::mem::discriminant(&v) => Ok(v),
        (d, v) => Err(FeloError::config(format!(
            "{key}: expected {}, found {}",
            type_name(d),
            type_name(&v)
        ))),
    }
}

fn merge_into(
    target: &mut Table,
    key: &str,
    value: Value,
    defaults: &Table,
    origin: &str,
) -> Result<()> {
    let (section, field) = key.split_once('.').ok_or_else(|| {
        FeloError::config(format!(
            "{origin}: key `{key}` must have the form section.key"
        ))
    })?;
    let dsec = defaults
        .get(section)
        .and_then(Value::as_table)
        .ok_or_else(|| {
            FeloError::config(format!(
                "{origin}: unknown section `{section}` (in `{key}`)"
            ))
        })?;
    let default = dsec
        .get(field)
        .ok_or_else(|| FeloError::config(format!("{origin}: unknown key `{key}`")))?;
    let value = coerce(key, default, value)?;
    let sec = target
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .expect("sections are tables");
    sec.insert(field.to_string(), value);
    Ok(())
}

/// Resolve a bare override key such as `strategy` to its unique section.
fn qualify(key: &str, defaults: &Table) -> Result<String> {
    if key.contains('.') {
        return Ok(key.to_string());
    }
    let owners: Vec<&String> = defaults
        .iter()
        .filter(|(_, sec)| sec.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(name, _)| name)
        .collect();
    match owners.as_slice() {
        [one] => Ok(format!("{one}.{key}")),
        [] => Err(FeloError::config(format!("override: unknown key `{key}`"))),
        many => Err(FeloError::config(format!(
            "override: key `{key}` is ambiguous between sections {:?}",
            many
        ))),
    }
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, text) = raw.split_once('=').ok_or_else(|| {
        FeloError::config(format!("override `{raw}` must look like section.key=value"))
    })?;
    let (key, text) = (key.trim(), text.trim());
    // Anything that is not a TOML literal is taken as a bare string.
    let value = format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()));
    Ok((key.to_string(), value))
}

/// Build a config from file text, overrides and an optional fallback seed.
/// Precedence: overrides, then the file, then `env_seed`, then defaults.
pub fn parse_config_str(
    text: &str,
    overrides: &[String],
    env_seed: Option<&str>,
) -> Result<ExperimentConfig> {
    let defaults = defaults_table();
    let file: Table = text
        .parse()
        .map_err(|e: toml::de::Error| FeloError::config(format!("config file: {}", e.message())))?;

    let mut merged = Table::new();
    for (section, body) in file {
        let body = match body {
            Value::Table(t) => t,
            other => {
                return Err(FeloError::config(format!(
                    "config file: `{section}` must be a table, found {}",
                    type_name(&other)
                )))
            }
        };
        for (field, value) in body {
            merge_into(
                &mut merged,
                &format!("{section}.{field}"),
                value,
                &defaults,
                "config file",
            )?;
        }
    }
    let seed_given = merged
        .get("experiment")
        .and_then(Value::as_table)
        .is_some_and(|t| t.contains_key("seed"));
    let mut seed_overridden = false;
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        let key = qualify(&key, &defaults)?;
        seed_overridden |= key == "experiment.seed";
        merge_into(&mut merged, &key, value, &defaults, "override")?;
    }
    if !seed_given && !seed_overridden {
        if let Some(raw) = env_seed {
            let seed: i64 = raw.trim().parse().ok().filter(|s| *s >= 0).ok_or_else(|| {
                FeloError::config(format!("{SEED_ENV}: `{raw}` is not a non-negative integer"))
            })?;
            merge_into(
                &mut merged,
                "experiment.seed",
                Value::Integer(seed),
                &defaults,
                SEED_ENV,
            )?;
        }
    }

    let config: ExperimentConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| FeloError::config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Read `path`, apply overrides and `FELO_SEED`, and validate.
pub fn parse_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| FeloError::config(format!("cannot read config {}: {e}", path.display())))?;
    let env_seed = std::env::var(SEED_ENV).ok();
    parse_config_str(&text, overrides, env_seed.as_deref())
}

/// Canonical TOML rendering; parsing it back yields the same config.
pub fn canonical_config(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::Strategy;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            parse_config_str("", &[], None).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn override_beats_file() {
        let c = parse_config_str(
            "[experiment]\nalpha = 0.75\n",
            &["experiment.alpha=0.25".into()],
            None,
        )
        .unwrap();
        assert_eq!(c.experiment.alpha, 0.25);
    }

    #[test]
    fn integer_accepted_for_float() {
        let c = parse_config_str("[experiment]\nalpha = 1\n", &[], None).unwrap();
        assert_eq!(c.experiment.alpha, 1.0);
    }

    #[test]
    fn bare_strings_and_bare_keys() {
        let c = parse_config_str(
            "",
            &["strategy=fedavg".into(), "model.homogeneous=true".into()],
            None,
        )
        .unwrap();
        assert_eq!(c.experiment.strategy, Strategy::Fedavg);
    }

    #[test]
    fn unknown_key_named() {
        let err = parse_config_str("[experiment]\nalpah = 0.2\n", &[], None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("experiment.alpah"), "{err}");
        let err = parse_config_str("", &["data.nope=1".into()], None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("data.nope"), "{err}");
    }

    #[test]
    fn type_error_named() {
        let err = parse_config_str("[experiment]\nrounds = \"many\"\n", &[], None)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("experiment.rounds") && err.contains("string"),
            "{err}"
        );
    }

    #[test]
    fn fedavg_heterogeneous_rejected() {
        let err = parse_config_str("[experiment]\nstrategy = \"fedavg\"\n", &[], None)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("experiment.strategy") && err.contains("model.homogeneous"),
            "{err}"
        );
    }

    #[test]
    fn env_seed_is_lowest_precedence() {
        assert_eq!(
            parse_config_str("", &[], Some("7"))
                .unwrap()
                .experiment
                .seed,
            7
        );
        let c = parse_config_str("[experiment]\nseed = 3\n", &[], Some("7")).unwrap();
        assert_eq!(c.experiment.seed, 3);
        let c = parse_config_str("", &["experiment.seed=5".into()], Some("7")).unwrap();
        assert_eq!(c.experiment.seed, 5);
        assert!(parse_config_str("", &[], Some("x")).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let c = parse_config_str("[data]\nspread = 0.25\n[cvae]\nepochs = 3\n", &[], None).unwrap();
        let text = canonical_config(&c);
        let back = parse_config_str(&text, &[], None).unwrap();
        assert_eq!(back, c);
        assert_eq!(canonical_config(&back), text);
    }
}
