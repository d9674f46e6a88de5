//! One `--flag` per model config key, collected as text overrides.

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use pick_kie::model::{ModelConfig, ModelError, CONFIG_KEYS};

/// Keys with a dedicated flag elsewhere on the command line.
const SPECIAL: &[&str] = &["layers"];

#[derive(Clone, Debug, Default)]
pub struct ConfigOverrides(pub Vec<(&'static str, String)>);

fn keys() -> impl Iterator<Item = &'static str> {
    CONFIG_KEYS.iter().copied().filter(|k| !SPECIAL.contains(k))
}

impl ConfigOverrides {
    pub fn apply(&self, config: &mut ModelConfig) -> Result<(), ModelError> {
        for (k, v) in &self.0 {
            config.set(k, v)?;
        }
        Ok(())
    }
}

impl FromArgMatches for ConfigOverrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Self(
            keys()
                .filter_map(|k| m.get_one::<String>(k).map(|v| (k, v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigOverrides {
    fn augment_args(cmd: Command) -> Command {
        keys().fold(cmd, |cmd, k| {
            cmd.arg(
                Arg::new(k)
                    .long(k.replace('_', "-"))
                    .value_name("VALUE")
                    .help_heading("Model config overrides")
                    .help(format!("Overrides `{k}` from the config file")),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
