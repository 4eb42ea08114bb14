//! Checkpoints: a structured-text header followed by the flat parameter
//! array as decimal floats, one value per line. Values round-trip exactly
//! through the shortest-representation formatting.

use crate::autodiff::FlowModel;
use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct CheckpointHeader {
    pub env_hash: String,
    pub spec: String,
    pub seed: u64,
    pub round: usize,
    pub step: u64,
}

pub fn save(
    path: &Path,
    model: &FlowModel,
    env_hash: &str,
    seed: u64,
    round: usize,
    step: u64,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# orderflow checkpoint v1")?;
    writeln!(w, "# env_hash = {env_hash}")?;
    writeln!(w, "# spec = {}", model.spec().descriptor())?;
    writeln!(w, "# seed = {seed}")?;
    writeln!(w, "# round = {round}")?;
    writeln!(w, "# step = {step}")?;
    writeln!(w, "# params = {}", model.params.len())?;
    for v in model.params.values() {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut header = CheckpointHeader {
        env_hash: String::new(),
        spec: String::new(),
        seed: 0,
        round: 0,
        step: 0,
    };
    let mut expected = None;
    let mut values = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((key, value)) = rest.split_once('=') {
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "env_hash" => header.env_hash = value.to_string(),
                    "spec" => header.spec = value.to_string(),
                    "seed" => header.seed = value.parse().unwrap_or(0),
                    "round" => header.round = value.parse().unwrap_or(0),
                    "step" => header.step = value.parse().unwrap_or(0),
                    "params" => expected = value.parse().ok(),
                    _ => {}
                }
            }
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad parameter value `{line}`")))?;
        values.push(v);
    }
    if let Some(n) = expected {
        if values.len() != n {
            return Err(Error::Checkpoint(format!(
                "expected {n} parameters, found {}",
                values.len()
            )));
        }
    }
    Ok((header, values))
}

/// Load a checkpoint into a freshly built model, verifying the environment
/// hash and the model spec.
pub fn restore(path: &Path, model: &mut FlowModel, env_hash: &str) -> Result<CheckpointHeader> {
    let (header, values) = load(path)?;
    if header.env_hash != env_hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on env {} but the configuration describes env {env_hash}",
            header.env_hash
        )));
    }
    let spec = model.spec().descriptor();
    if header.spec != spec {
        return Err(Error::Checkpoint(format!(
            "checkpoint spec `{}` does not match the configured model `{spec}`",
            header.spec
        )));
    }
    model.params.load_values(values)?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::env::{Env, EnvDescriptor};

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let env = Env::new(EnvDescriptor::default()).unwrap();
        let model =
            FlowModel::for_env(&env, false, vec![16], Activation::Relu, 0.25, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        save(&path, &model, &env.hash(), 7, 12, 345).unwrap();

        let mut fresh =
            FlowModel::for_env(&env, false, vec![16], Activation::Relu, 0.25, 99).unwrap();
        let header = restore(&path, &mut fresh, &env.hash()).unwrap();
        assert_eq!(header.seed, 7);
        assert_eq!(header.round, 12);
        assert_eq!(header.step, 345);
        for (a, b) in fresh.params.values().iter().zip(model.params.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mismatched_env_hash_is_named() {
        let env = Env::new(EnvDescriptor::default()).unwrap();
        let model =
            FlowModel::for_env(&env, false, vec![8], Activation::Relu, 0.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        save(&path, &model, &env.hash(), 1, 1, 1).unwrap();
        let mut fresh =
            FlowModel::for_env(&env, false, vec![8], Activation::Relu, 0.0, 1).unwrap();
        match restore(&path, &mut fresh, "deadbeef") {
            Err(Error::Checkpoint(msg)) => {
                assert!(msg.contains(&env.hash()));
                assert!(msg.contains("deadbeef"));
            }
            other => panic!("expected checkpoint mismatch, got {other:?}"),
        }
    }
}
