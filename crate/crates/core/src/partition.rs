//! Splits a model's parameters into LayerNorm, adapted and frozen subsets
//! and checks that frozen parameters survive training untouched.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::miniedge::{Model, ParameterGroup};

/// CLI spellings of the named layer sets.
pub const PRESETS: [&str; 7] = [
    "baseline",
    "LN",
    "ST",
    "LN,ST",
    "LN,ST,S0",
    "LN,ST,S0,S1",
    "LN,ST,S0,S1,S2",
];

/// Set of groups unfrozen for adaptation. HEAD is never adaptable.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AdaptConfig {
    groups: BTreeSet<ParameterGroup>,
}

impl AdaptConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn new(groups: impl IntoIterator<Item = ParameterGroup>) -> Result<Self> {
        let groups: BTreeSet<_> = groups.into_iter().collect();
        if groups.contains(&ParameterGroup::Head) {
            return Err(Error::UnknownGroup {
                token: "HEAD".into(),
                presets: PRESETS.join(" | "),
            });
        }
        Ok(Self { groups })
    }

    /// All named presets in table order, baseline first.
    pub fn presets() -> Vec<AdaptConfig> {
        PRESETS.iter().map(|p| p.parse().unwrap()).collect()
    }

    pub fn groups(&self) -> &BTreeSet<ParameterGroup> {
        &self.groups
    }

    pub fn contains(&self, group: ParameterGroup) -> bool {
        self.groups.contains(&group)
    }

    pub fn is_baseline(&self) -> bool {
        self.groups.is_empty()
    }
}

impl FromStr for AdaptConfig {
    type Err = Error;

    /// Accepts `""`, `"baseline"`, or comma-separated tokens from LN, ST, S0, S1, S2.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("baseline") {
            return Ok(Self::baseline());
        }
        let mut groups = Vec::new();
        for token in s.split(',') {
            match token.trim().parse::<ParameterGroup>() {
                Ok(g) if g != ParameterGroup::Head => groups.push(g),
                _ => {
                    return Err(Error::UnknownGroup {
                        token: token.trim().to_string(),
                        presets: PRESETS.join(" | "),
                    })
                }
            }
        }
        Self::new(groups)
    }
}

impl fmt::Display for AdaptConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.groups.is_empty() {
            return f.write_str("baseline");
        }
        let names: Vec<&str> = self.groups.iter().map(|g| g.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PartitionReport {
    /// Trainable LayerNorm scalars.
    pub n_ln_params: u64,
    /// Trainable non-LayerNorm scalars.
    pub n_adapted_params: u64,
    pub n_frozen_params: u64,
    /// Number of LayerNorm layers in the model, trainable or not.
    pub k_ln_layers: usize,
    pub trainable_names: Vec<String>,
}

/// Marks exactly the parameters whose group is in `config` as trainable.
pub fn partition(model: &mut Model, config: &AdaptConfig) -> PartitionReport {
    for p in model.params_mut() {
        p.trainable = config.contains(p.group);
    }
    report(model)
}

/// Three-way split of the model's current trainable flags.
pub fn report(model: &Model) -> PartitionReport {
    let mut r = PartitionReport {
        n_ln_params: 0,
        n_adapted_params: 0,
        n_frozen_params: 0,
        k_ln_layers: model.ln_layer_count(),
        trainable_names: Vec::new(),
    };
    for p in model.params() {
        let n = p.tensor.numel() as u64;
        match (p.trainable, p.group) {
            (true, ParameterGroup::Ln) => r.n_ln_params += n,
            (true, _) => r.n_adapted_params += n,
            (false, _) => r.n_frozen_params += n,
        }
        if p.trainable {
            r.trainable_names.push(p.name.clone());
        }
    }
    r
}

/// Result of comparing frozen parameters across two models.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenCheck {
    /// Frozen parameters whose bytes changed.
    pub modified: Vec<String>,
}

impl FrozenCheck {
    pub fn is_intact(&self) -> bool {
        self.modified.is_empty()
    }
}

/// Checks that every parameter outside `config` is bit-identical between
/// `before` and `after`.
pub fn verify_frozen(before: &Model, after: &Model, config: &AdaptConfig) -> Result<FrozenCheck> {
    if before.params().len() != after.params().len() {
        return Err(Error::TopologyMismatch(format!(
            "{} vs {} parameters",
            before.params().len(),
            after.params().len()
        )));
    }
    let mut modified = Vec::new();
    for (a, b) in before.params().iter().zip(after.params()) {
        if a.name != b.name || a.group != b.group || a.tensor.shape() != b.tensor.shape() {
            return Err(Error::TopologyMismatch(format!(
                "parameter {} ({}) vs {} ({})",
                a.name, a.group, b.name, b.group
            )));
        }
        if config.contains(a.group) {
            continue;
        }
        let same = a
            .tensor
            .data()
            .iter()
            .zip(b.tensor.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            modified.push(a.name.clone());
        }
    }
    Ok(FrozenCheck { modified })
}
