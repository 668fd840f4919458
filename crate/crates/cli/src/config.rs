use std::fs;
use std::path::Path;

use segnas::search::{EvaluatorSpec, RunConfig};
use segnas::{Genotype, SpaceConfig};

use crate::error::CliError;

/// Reads a TOML run config whose tables mirror [`RunConfig`]'s fields.
/// Missing tables and fields take their defaults.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = read(path)?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn load_space(path: Option<&Path>) -> Result<SpaceConfig, CliError> {
    Ok(load_run_config(path)?.space)
}

pub fn load_genotype(path: &Path, space: &SpaceConfig) -> Result<Genotype, CliError> {
    let text = read(path)?;
    Genotype::load(&text, space).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

/// `surrogate` or `external:<command line>`.
pub fn parse_evaluator(spec: &str) -> Result<EvaluatorSpec, CliError> {
    if spec == "surrogate" {
        return Ok(EvaluatorSpec::Surrogate);
    }
    match spec.strip_prefix("external:") {
        Some(cmd) if !cmd.trim().is_empty() => Ok(EvaluatorSpec::External {
            command: cmd.split_whitespace().map(str::to_string).collect(),
            timeout_secs: segnas::eval::ExternalConfig::new(Vec::new()).timeout_secs,
        }),
        _ => Err(CliError::Usage(format!("--evaluator must be `surrogate` or `external:CMD`, got {spec:?}"))),
    }
}
