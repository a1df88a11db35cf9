//! TOML config files as an alternative to flags.
//!
//! A config file holds the same keys as the parameter flags of a subcommand,
//! with dashes replaced by underscores. Input and output paths are always
//! given on the command line. Flags given on the command line win over the
//! file; the file wins over built-in defaults.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Command};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

pub fn overlay<T>(matches: &ArgMatches, args: &T, path: &Path) -> Result<T, CliError>
where
    T: Args + Serialize + DeserializeOwned,
{
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let file: toml::Table = toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;

    let known: BTreeSet<String> = T::augment_args(Command::new("config"))
        .get_arguments()
        .map(|a| a.get_id().to_string())
        .filter(|id| id != "help")
        .collect();
    let mut merged = toml::Table::try_from(args)
        .map_err(|e| CliError::Runtime(format!("cannot serialize arguments: {e}")))?;
    for (key, value) in file {
        if !known.contains(&key) {
            return Err(CliError::Usage(format!(
                "config {}: unknown key {key:?}",
                path.display()
            )));
        }
        if matches.value_source(&key) != Some(ValueSource::CommandLine) {
            merged.insert(key, value);
        }
    }
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}
