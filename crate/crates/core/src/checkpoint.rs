//! Versioned plain-text checkpoints: a header, then named flat arrays.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::env::Role;
use crate::error::{Error, Result};
use crate::policy::{Adapter, CriticParams, PolicyParams, Weights, ACTIONS, FEATURE_SCHEMA, LOCAL_DIM};

pub const MAGIC: &str = "teamgrpo-checkpoint";
pub const VERSION: u32 = 1;

fn write_array(out: &mut String, name: &str, values: &[f64]) {
    let _ = write!(out, "{name} {}", values.len());
    for v in values {
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

fn weights_arrays(out: &mut String, prefix: &str, w: &Weights) {
    write_array(out, &format!("{prefix}.shared"), &w.shared);
    for (role, a) in &w.adapters {
        write_array(out, &format!("{prefix}.{}.u", role.name()), &a.u);
        write_array(out, &format!("{prefix}.{}.v", role.name()), &a.v);
    }
}

pub fn encode(params: &PolicyParams, critic: &CriticParams, config_hash: &str) -> String {
    let mut out = String::new();
    let roles: Vec<&str> = params.weights.adapters.keys().map(|r| r.name()).collect();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "config_hash {config_hash}");
    let _ = writeln!(out, "feature_schema {FEATURE_SCHEMA}");
    let _ = writeln!(out, "local_dim {LOCAL_DIM}");
    let _ = writeln!(out, "actions {ACTIONS}");
    let _ = writeln!(out, "rank {}", params.weights.rank);
    let _ = writeln!(out, "roles {}", roles.join(","));
    weights_arrays(&mut out, "weights", &params.weights);
    weights_arrays(&mut out, "reference", params.reference());
    write_array(&mut out, "critic.weights", &critic.weights);
    write_array(&mut out, "critic.bias", &[critic.bias]);
    out
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub critic: CriticParams,
    pub config_hash: String,
}

pub fn decode(text: &str) -> Result<Checkpoint> {
    let bad = |line: usize, message: String| Error::Parse { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| bad(1, "empty checkpoint".into()))?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| bad(1, "not a checkpoint file".into()))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut scalars = BTreeMap::new();
    let mut arrays: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (no, line) in lines {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if let [single] = rest.as_slice() {
            if !key.contains('.') {
                scalars.insert(key.to_string(), single.to_string());
                continue;
            }
        }
        let (count, values) = rest.split_first().ok_or_else(|| bad(no, format!("`{key}` has no length")))?;
        let count: usize = count.parse().map_err(|_| bad(no, format!("bad length for `{key}`")))?;
        if values.len() != count {
            return Err(bad(no, format!("`{key}` declares {count} values but has {}", values.len())));
        }
        let parsed = values
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| bad(no, format!("bad number `{v}` in `{key}`"))))
            .collect::<Result<Vec<_>>>()?;
        arrays.insert(key.to_string(), parsed);
    }
    let scalar = |k: &str| -> Result<&String> {
        scalars.get(k).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))
    };
    let expect = |k: &str, want: usize| -> Result<()> {
        let got: usize = scalar(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}`")))?;
        if got != want {
            return Err(Error::Checkpoint(format!("`{k}` is {got}, this build expects {want}")));
        }
        Ok(())
    };
    expect("feature_schema", FEATURE_SCHEMA as usize)?;
    expect("local_dim", LOCAL_DIM)?;
    expect("actions", ACTIONS)?;
    let rank: usize = scalar("rank")?.parse().map_err(|_| Error::Checkpoint("bad rank".into()))?;
    let roles: Vec<Role> = scalar("roles")?
        .split(',')
        .map(|r| r.parse::<Role>().map_err(Error::Checkpoint))
        .collect::<Result<_>>()?;
    let mut take = |k: String, len: usize| -> Result<Vec<f64>> {
        let v = arrays.remove(&k).ok_or_else(|| Error::Checkpoint(format!("missing array `{k}`")))?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!("`{k}` has {} values, expected {len}", v.len())));
        }
        Ok(v)
    };
    let mut read_weights = |prefix: &str| -> Result<Weights> {
        let shared = take(format!("{prefix}.shared"), LOCAL_DIM * ACTIONS)?;
        let mut adapters = BTreeMap::new();
        for &r in &roles {
            let u = take(format!("{prefix}.{}.u", r.name()), LOCAL_DIM * rank)?;
            let v = take(format!("{prefix}.{}.v", r.name()), ACTIONS * rank)?;
            adapters.insert(r, Adapter { u, v });
        }
        Ok(Weights { shared, adapters, rank })
    };
    let weights = read_weights("weights")?;
    let reference = read_weights("reference")?;
    let critic_weights = arrays
        .remove("critic.weights")
        .ok_or_else(|| Error::Checkpoint("missing array `critic.weights`".into()))?;
    let bias = arrays
        .remove("critic.bias")
        .and_then(|b| b.first().copied())
        .ok_or_else(|| Error::Checkpoint("missing array `critic.bias`".into()))?;
    Ok(Checkpoint {
        params: PolicyParams::with_reference(weights, reference)?,
        critic: CriticParams {
            weights: critic_weights,
            bias,
        },
        config_hash: scalar("config_hash")?.clone(),
    })
}

pub fn save(path: &Path, params: &PolicyParams, critic: &CriticParams, config_hash: &str) -> Result<()> {
    std::fs::write(path, encode(params, critic, config_hash))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read_to_string(path)?)
}
