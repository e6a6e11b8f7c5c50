//! `--config KEY=VALUE` overrides for the actor, training, solver, and
//! collection configs. Keys are dotted: `actor.nchan=32`,
//! `train.epochs=50`, `solver.full_steps=2`, `collect.magnitude_lo=0.2`.

use dpx_core::actor::{ActorConfig, PeakEncoderKind};
use dpx_core::solver::SolverConfig;
use dpx_core::train::TrainingConfig;

use crate::CliError;

/// Collection knobs that are not part of a core config struct.
#[derive(Debug, Clone)]
pub struct CollectKnobs {
    pub magnitude_lo: f64,
    pub magnitude_hi: f64,
}

impl Default for CollectKnobs {
    fn default() -> Self {
        CollectKnobs { magnitude_lo: 1.0, magnitude_hi: 1.0 }
    }
}

pub struct Overrides {
    pub actor: Option<ActorConfig>,
    pub train: Option<TrainingConfig>,
    pub solver: Option<SolverConfig>,
    pub collect: CollectKnobs,
}

impl Overrides {
    pub fn new(
        actor: Option<ActorConfig>,
        train: Option<TrainingConfig>,
        solver: Option<SolverConfig>,
    ) -> Self {
        Overrides { actor, train, solver, collect: CollectKnobs::default() }
    }

    /// Applies every `KEY=VALUE` item; unknown keys or keys for a config
    /// this command does not use are config errors.
    pub fn apply_all(&mut self, items: &[String]) -> Result<(), CliError> {
        for item in items {
            self.apply(item).map_err(|msg| {
                CliError::Config(format!("--config {item:?}: {msg}"))
            })?;
        }
        Ok(())
    }

    fn apply(&mut self, item: &str) -> Result<(), String> {
        let (key, value) =
            item.split_once('=').ok_or_else(|| "expected KEY=VALUE".to_string())?;
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| format!("key {key:?} must be SECTION.FIELD"))?;
        match section {
            "actor" => {
                let c = self
                    .actor
                    .as_mut()
                    .ok_or_else(|| "this command takes no actor overrides".to_string())?;
                apply_actor(c, field, value)
            }
            "train" => {
                let c = self
                    .train
                    .as_mut()
                    .ok_or_else(|| "this command takes no train overrides".to_string())?;
                apply_train(c, field, value)
            }
            "solver" => {
                let c = self
                    .solver
                    .as_mut()
                    .ok_or_else(|| "this command takes no solver overrides".to_string())?;
                apply_solver(c, field, value)
            }
            "collect" => apply_collect(&mut self.collect, field, value),
            _ => Err(format!("unknown section {section:?}")),
        }
    }
}

fn parse<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("bad {what} {value:?}: {e}"))
}

fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse(v.trim(), what)).collect()
}

fn parse_encoder(value: &str) -> Result<PeakEncoderKind, String> {
    match value.trim() {
        "none" => Ok(PeakEncoderKind::None),
        "simple" => Ok(PeakEncoderKind::Simple),
        "softmax" => Ok(PeakEncoderKind::Softmax),
        other => Err(format!("bad encoder {other:?} (none|simple|softmax)")),
    }
}

fn apply_actor(c: &mut ActorConfig, field: &str, value: &str) -> Result<(), String> {
    match field {
        "nchan" => c.nchan = parse(value, "integer")?,
        "blocks" => {
            let v: Vec<usize> = parse_list(value, "integer")?;
            c.blocks = v
                .try_into()
                .map_err(|_| "blocks needs exactly 4 comma-separated values".to_string())?;
        }
        "first_layer_stride" => c.first_layer_stride = parse(value, "integer")?,
        "peak_encoders" => {
            let kinds: Vec<PeakEncoderKind> =
                value.split(',').map(parse_encoder).collect::<Result<_, _>>()?;
            c.peak_encoders = kinds
                .try_into()
                .map_err(|_| "peak_encoders needs exactly 3 values".to_string())?;
        }
        "softmax_heads" => c.softmax_heads = parse(value, "integer")?,
        "use_s21_regression" => c.use_s21_regression = parse(value, "bool")?,
        "head_hidden" => c.head_hidden = parse_list(value, "integer")?,
        "peak_embed_dim" => c.peak_embed_dim = parse(value, "integer")?,
        _ => return Err(format!("unknown actor field {field:?}")),
    }
    Ok(())
}

fn apply_train(c: &mut TrainingConfig, field: &str, value: &str) -> Result<(), String> {
    match field {
        "batch_size" => c.batch_size = parse(value, "integer")?,
        "lr" => c.lr = parse(value, "float")?,
        "epochs" => c.epochs = parse(value, "integer")?,
        "cosine_schedule" => c.cosine_schedule = parse(value, "bool")?,
        "stop_at_train_loss" => c.stop_at_train_loss = Some(parse(value, "float")?),
        "patience" => c.patience = Some(parse(value, "integer")?),
        _ => return Err(format!("unknown train field {field:?}")),
    }
    Ok(())
}

fn apply_solver(c: &mut SolverConfig, field: &str, value: &str) -> Result<(), String> {
    match field {
        "full_steps" => c.full_steps = parse(value, "integer")?,
        "group_size" => c.group_size = parse(value, "integer")?,
        "revert_threshold" => c.revert_threshold = parse(value, "float")?,
        "continue_threshold" => c.continue_threshold = parse(value, "float")?,
        "max_fine_steps" => c.max_fine_steps = parse(value, "integer")?,
        _ => return Err(format!("unknown solver field {field:?}")),
    }
    Ok(())
}

fn apply_collect(c: &mut CollectKnobs, field: &str, value: &str) -> Result<(), String> {
    match field {
        "magnitude_lo" => c.magnitude_lo = parse(value, "float")?,
        "magnitude_hi" => c.magnitude_hi = parse(value, "float")?,
        _ => return Err(format!("unknown collect field {field:?}")),
    }
    Ok(())
}
