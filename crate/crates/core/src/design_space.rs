//! The discrete cross-layer design space: parameter definitions, validity
//! rules, legalization, one-hot encoding, sampling, and mutation.
//!
//! The space itself is data — see `data/design_space.toml` for the default
//! 16-parameter definition spanning architecture, synthesis, and placement.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Parameter count of the default space.
pub const N_PARAMS: usize = 16;
/// One-hot columns per parameter in the default space (longest candidate list).
pub const K_SLOTS: usize = 7;

/// The default space definition shipped with the crate.
pub const DEFAULT_SPACE_TOML: &str = include_str!("../data/design_space.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Architecture,
    LogicSynthesis,
    PhysicalDesign,
}

/// One candidate value of a parameter. Lists are homogeneous in practice but
/// nothing below depends on that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CandidateValue {
    Bool(bool),
    Int(i64),
    Real(f64),
    Token(String),
}

impl CandidateValue {
    /// Numeric view, used by the coupling rules.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CandidateValue::Int(v) => Some(*v as f64),
            CandidateValue::Real(v) => Some(*v),
            _ => None,
        }
    }

    /// The literal form used in CSV files and reports. Reals keep a decimal
    /// point so `1.0` ns does not collapse to the integer `1`.
    pub fn literal(&self) -> String {
        match self {
            CandidateValue::Bool(v) => v.to_string(),
            CandidateValue::Int(v) => v.to_string(),
            CandidateValue::Real(v) => format!("{v:?}"),
            CandidateValue::Token(v) => v.clone(),
        }
    }
}

impl fmt::Display for CandidateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.literal())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub id: usize,
    pub name: String,
    pub layer: Layer,
    pub candidates: Vec<CandidateValue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// lhs value must be ≤ rhs value; legalization lowers lhs.
    LeCoupled,
    /// lhs value must be ≥ rhs value; legalization raises lhs.
    GeCoupled,
}

/// A coupling rule between two numeric parameters. `lhs`/`rhs` are parameter
/// slots (0-based positions in the space), with lhs the constrained side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignRule {
    pub kind: RuleKind,
    pub lhs: usize,
    pub rhs: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleEntry {
    kind: RuleKind,
    lhs: String,
    rhs: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    #[serde(rename = "parameter")]
    parameters: Vec<ParameterSpec>,
    #[serde(rename = "rule", default)]
    rules: Vec<RuleEntry>,
}

/// A point in the space: one candidate index per parameter.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Configuration {
    choices: Vec<usize>,
}

impl Configuration {
    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    pub fn choice(&self, slot: usize) -> usize {
        self.choices[slot]
    }
}

/// One-hot image of a configuration: n×k 0/1 matrix, one 1 per row, always in
/// a column below that row's candidate count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    n: usize,
    k: usize,
    bits: Vec<u8>,
}

impl Bitmap {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.k + col] == 1
    }
}

#[derive(Debug, Clone)]
pub struct DesignSpace {
    params: Vec<ParameterSpec>,
    rules: Vec<DesignRule>,
    slots: HashMap<String, usize>,
    k: usize,
}

impl DesignSpace {
    /// The Table-shaped default space baked into the crate.
    pub fn builtin() -> DesignSpace {
        DesignSpace::from_toml_str(DEFAULT_SPACE_TOML)
            .expect("built-in design space definition is valid")
    }

    pub fn from_path(path: &Path) -> Result<DesignSpace> {
        let text = std::fs::read_to_string(path)?;
        DesignSpace::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { location: _, message } => Error::Parse {
                location: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<DesignSpace> {
        let file: SpaceFile = toml::from_str(text).map_err(|e| Error::Parse {
            location: "design space".into(),
            message: e.to_string(),
        })?;
        DesignSpace::new(file.parameters, file.rules)
    }

    fn new(params: Vec<ParameterSpec>, rule_entries: Vec<RuleEntry>) -> Result<DesignSpace> {
        if params.is_empty() {
            return Err(Error::InvalidSpace("no parameters defined".into()));
        }
        let mut slots = HashMap::new();
        for (slot, p) in params.iter().enumerate() {
            if p.id != slot + 1 {
                return Err(Error::InvalidSpace(format!(
                    "parameter '{}' has id {}, expected {} (ids must be 1..n in order)",
                    p.name,
                    p.id,
                    slot + 1
                )));
            }
            if p.candidates.is_empty() {
                return Err(Error::InvalidSpace(format!(
                    "parameter '{}' has no candidates",
                    p.name
                )));
            }
            if p.candidates.len() > K_SLOTS {
                return Err(Error::InvalidSpace(format!(
                    "parameter '{}' has {} candidates, limit is {K_SLOTS}",
                    p.name,
                    p.candidates.len()
                )));
            }
            for (a, ca) in p.candidates.iter().enumerate() {
                for cb in &p.candidates[a + 1..] {
                    if ca == cb {
                        return Err(Error::InvalidSpace(format!(
                            "parameter '{}' lists candidate {} twice",
                            p.name, ca
                        )));
                    }
                }
            }
            if slots.insert(p.name.clone(), slot).is_some() {
                return Err(Error::InvalidSpace(format!(
                    "duplicate parameter name '{}'",
                    p.name
                )));
            }
        }

        let mut rules = Vec::with_capacity(rule_entries.len());
        for entry in rule_entries {
            let lhs = *slots.get(&entry.lhs).ok_or_else(|| {
                Error::InvalidSpace(format!("rule references unknown parameter '{}'", entry.lhs))
            })?;
            let rhs = *slots.get(&entry.rhs).ok_or_else(|| {
                Error::InvalidSpace(format!("rule references unknown parameter '{}'", entry.rhs))
            })?;
            if lhs == rhs {
                return Err(Error::InvalidSpace(format!(
                    "rule couples parameter '{}' with itself",
                    entry.lhs
                )));
            }
            for (side, slot) in [("lhs", lhs), ("rhs", rhs)] {
                let p = &params[slot];
                if p.candidates.iter().any(|c| c.as_f64().is_none()) {
                    return Err(Error::InvalidSpace(format!(
                        "rule {side} parameter '{}' has non-numeric candidates",
                        p.name
                    )));
                }
            }
            // Legalization must always have somewhere to go: for every bound
            // value, the constrained side needs a candidate on the right side
            // of it. Checking here keeps legalize() infallible.
            for bound in &params[rhs].candidates {
                let b = bound.as_f64().unwrap();
                let ok = params[lhs].candidates.iter().any(|c| {
                    let v = c.as_f64().unwrap();
                    match entry.kind {
                        RuleKind::LeCoupled => v <= b,
                        RuleKind::GeCoupled => v >= b,
                    }
                });
                if !ok {
                    return Err(Error::InvalidSpace(format!(
                        "rule {} ~ {} cannot be legalized when the bound is {}",
                        params[lhs].name, params[rhs].name, bound
                    )));
                }
            }
            rules.push(DesignRule {
                kind: entry.kind,
                lhs,
                rhs,
            });
        }

        let k = params.iter().map(|p| p.candidates.len()).max().unwrap();
        Ok(DesignSpace {
            params,
            rules,
            slots,
            k,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// One-hot columns per row: the longest candidate list.
    pub fn k_slots(&self) -> usize {
        self.k
    }

    /// Width of a flattened encoded configuration.
    pub fn flat_width(&self) -> usize {
        self.params.len() * self.k
    }

    pub fn params(&self) -> &[ParameterSpec] {
        &self.params
    }

    pub fn param(&self, slot: usize) -> &ParameterSpec {
        &self.params[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.slots.get(name).copied()
    }

    pub fn rules(&self) -> &[DesignRule] {
        &self.rules
    }

    /// Number of configurations ignoring the rules.
    pub fn size(&self) -> u64 {
        self.params
            .iter()
            .map(|p| p.candidates.len() as u64)
            .product()
    }

    /// Range-checked constructor for a point in this space.
    pub fn config(&self, choices: Vec<usize>) -> Result<Configuration> {
        if choices.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} choices, got {}",
                self.params.len(),
                choices.len()
            )));
        }
        for (slot, (&c, p)) in choices.iter().zip(&self.params).enumerate() {
            if c >= p.candidates.len() {
                return Err(Error::InvalidConfig(format!(
                    "choice {c} out of range for parameter '{}' (slot {slot}, {} candidates)",
                    p.name,
                    p.candidates.len()
                )));
            }
        }
        Ok(Configuration { choices })
    }

    pub fn value_of(&self, config: &Configuration, slot: usize) -> &CandidateValue {
        &self.params[slot].candidates[config.choices[slot]]
    }

    fn numeric_value(&self, config: &Configuration, slot: usize) -> f64 {
        self.value_of(config, slot)
            .as_f64()
            .expect("rule parameters are numeric (checked at load)")
    }

    fn rule_holds(&self, rule: &DesignRule, config: &Configuration) -> bool {
        let l = self.numeric_value(config, rule.lhs);
        let r = self.numeric_value(config, rule.rhs);
        match rule.kind {
            RuleKind::LeCoupled => l <= r,
            RuleKind::GeCoupled => l >= r,
        }
    }

    /// All violated rules; empty means the configuration is valid.
    pub fn validate(&self, config: &Configuration) -> Vec<DesignRule> {
        self.rules
            .iter()
            .filter(|r| !self.rule_holds(r, config))
            .copied()
            .collect()
    }

    pub fn is_valid(&self, config: &Configuration) -> bool {
        self.rules.iter().all(|r| self.rule_holds(r, config))
    }

    /// Repair rule violations by moving each rule's constrained parameter to
    /// the nearest candidate that satisfies the bound: the largest one still
    /// ≤ the bound, or the smallest one ≥ it. Valid inputs pass through
    /// unchanged and the operation is idempotent.
    pub fn legalize(&self, config: &Configuration) -> Configuration {
        let mut choices = config.choices.clone();
        for rule in &self.rules {
            let bound = self.params[rule.rhs].candidates[choices[rule.rhs]]
                .as_f64()
                .expect("rule parameters are numeric (checked at load)");
            let lhs_param = &self.params[rule.lhs];
            let current = lhs_param.candidates[choices[rule.lhs]].as_f64().unwrap();
            let satisfied = match rule.kind {
                RuleKind::LeCoupled => current <= bound,
                RuleKind::GeCoupled => current >= bound,
            };
            if satisfied {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, cand) in lhs_param.candidates.iter().enumerate() {
                let v = cand.as_f64().unwrap();
                let fits = match rule.kind {
                    RuleKind::LeCoupled => v <= bound,
                    RuleKind::GeCoupled => v >= bound,
                };
                if !fits {
                    continue;
                }
                let better = match (rule.kind, best) {
                    (_, None) => true,
                    (RuleKind::LeCoupled, Some((_, bv))) => v > bv,
                    (RuleKind::GeCoupled, Some((_, bv))) => v < bv,
                };
                if better {
                    best = Some((j, v));
                }
            }
            let (j, _) = best.expect("legalization has a target candidate (checked at load)");
            choices[rule.lhs] = j;
        }
        Configuration { choices }
    }

    /// One-hot encode. The 1 for row i sits in column choices[i]; columns at
    /// or beyond the row's candidate count stay 0.
    pub fn encode(&self, config: &Configuration) -> Bitmap {
        let n = self.params.len();
        let mut bits = vec![0u8; n * self.k];
        for (i, &c) in config.choices.iter().enumerate() {
            bits[i * self.k + c] = 1;
        }
        Bitmap { n, k: self.k, bits }
    }

    /// Map a bitmap to the real tensor the denoiser works on: 1 → +1.0,
    /// 0 → −1.0. Padding columns come out −1.0 and are ignored by decode.
    pub fn signed(&self, bitmap: &Bitmap) -> Tensor2D {
        let data = bitmap
            .bits
            .iter()
            .map(|&b| if b == 1 { 1.0 } else { -1.0 })
            .collect();
        Tensor2D::from_vec(bitmap.n, bitmap.k, data).expect("bitmap is rectangular")
    }

    /// encode + signed, flattened to one feature row.
    pub fn encode_signed_flat(&self, config: &Configuration) -> Vec<f64> {
        let mut row = vec![-1.0; self.flat_width()];
        for (i, &c) in config.choices.iter().enumerate() {
            row[i * self.k + c] = 1.0;
        }
        row
    }

    /// Per-row argmax over the real candidate columns; padding columns are
    /// masked out, ties go to the lowest index, and NaNs lose every
    /// comparison rather than panicking.
    pub fn decode_flat(&self, values: &[f64]) -> Result<Configuration> {
        if values.len() != self.flat_width() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", self.flat_width()),
                got: format!("{} values", values.len()),
            });
        }
        let mut choices = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let row = &values[i * self.k..i * self.k + p.candidates.len()];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            choices.push(best);
        }
        Ok(Configuration { choices })
    }

    /// Decode an n×k real tensor (the usual shape after denoising).
    pub fn decode(&self, values: &Tensor2D) -> Result<Configuration> {
        if values.rows() != self.params.len() || values.cols() != self.k {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.params.len(), self.k),
                got: format!("{}x{}", values.rows(), values.cols()),
            });
        }
        self.decode_flat(values.as_slice())
    }

    fn raw_uniform(&self, rng: &mut impl Rng) -> Configuration {
        let choices = self
            .params
            .iter()
            .map(|p| rng.gen_range(0..p.candidates.len()))
            .collect();
        Configuration { choices }
    }

    /// Uniform draw over candidate indices, then legalized. Always valid.
    pub fn random_config(&self, rng: &mut impl Rng) -> Configuration {
        let raw = self.raw_uniform(rng);
        self.legalize(&raw)
    }

    /// Resample each parameter uniformly with probability `rate`, then
    /// legalize. rate 0 is the identity; rate 1 is a fresh random draw.
    pub fn mutate(&self, config: &Configuration, rate: f64, rng: &mut impl Rng) -> Configuration {
        let mut choices = config.choices.clone();
        for (slot, p) in self.params.iter().enumerate() {
            if rng.gen::<f64>() < rate {
                choices[slot] = rng.gen_range(0..p.candidates.len());
            }
        }
        self.legalize(&Configuration { choices })
    }

    /// Human-readable `name=value` listing, ordered by slot.
    pub fn describe(&self, config: &Configuration) -> String {
        self.params
            .iter()
            .zip(&config.choices)
            .map(|(p, &c)| format!("{}={}", p.name, p.candidates[c]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub(crate) fn literal_to_choice(&self, slot: usize, literal: &str) -> Result<usize> {
        let p = &self.params[slot];
        let s = literal.trim();
        if let Some(j) = p.candidates.iter().position(|c| c.literal() == s) {
            return Ok(j);
        }
        // Accept numerically equal spellings ("1" for 1.0, "0.60" for 0.6).
        if let Ok(x) = s.parse::<f64>() {
            if let Some(j) = p
                .candidates
                .iter()
                .position(|c| c.as_f64().is_some_and(|v| v == x))
            {
                return Ok(j);
            }
        }
        Err(Error::Parse {
            location: format!("column '{}'", p.name),
            message: format!("'{s}' is not a candidate value"),
        })
    }

    /// Write configurations as CSV: one named column per parameter, values
    /// as candidate literals.
    pub fn configs_to_csv<W: io::Write>(&self, writer: W, configs: &[Configuration]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.params.iter().map(|p| p.name.as_str()))
            .map_err(csv_error)?;
        for c in configs {
            w.write_record(
                self.params
                    .iter()
                    .zip(&c.choices)
                    .map(|(p, &j)| p.candidates[j].literal()),
            )
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read configurations written by [`configs_to_csv`]. The header must
    /// list exactly the parameter names, in slot order.
    pub fn configs_from_csv<R: io::Read>(&self, reader: R) -> Result<Vec<Configuration>> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers().map_err(csv_error)?.clone();
        let expected: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::Parse {
                location: "configuration CSV header".into(),
                message: format!("expected columns {expected:?}, got {got:?}"),
            });
        }
        let mut out = Vec::new();
        for (idx, record) in r.records().enumerate() {
            let record = record.map_err(csv_error)?;
            if record.len() != self.params.len() {
                return Err(Error::Parse {
                    location: format!("configuration CSV row {}", idx + 2),
                    message: format!(
                        "expected {} fields, got {}",
                        self.params.len(),
                        record.len()
                    ),
                });
            }
            let mut choices = Vec::with_capacity(self.params.len());
            for (slot, field) in record.iter().enumerate() {
                choices.push(self.literal_to_choice(slot, field)?);
            }
            out.push(Configuration { choices });
        }
        Ok(out)
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Parse {
        location: "csv".into(),
        message: e.to_string(),
    }
}
