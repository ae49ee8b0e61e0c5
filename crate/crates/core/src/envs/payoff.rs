use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::joint;

/// Reward for every joint action, stored row-major over `action_counts`.
#[derive(Clone, Debug, PartialEq)]
pub struct PayoffTable {
    action_counts: Vec<usize>,
    values: Vec<f64>,
}

impl PayoffTable {
    pub fn new(action_counts: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if joint::joint_space_size(&action_counts) != values.len() {
            return Err(Error::Config(format!(
                "payoff has {} entries, expected {} for action counts {:?}",
                values.len(),
                joint::joint_space_size(&action_counts),
                action_counts
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("payoff entries must be finite".into()));
        }
        Ok(Self {
            action_counts,
            values,
        })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, joint_action: &[usize]) -> f64 {
        self.values[joint::flat_index(&self.action_counts, joint_action)]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Parses an N-deep nested JSON array of numbers.
    pub fn from_json(value: &Value) -> Result<Self> {
        let mut shape = Vec::new();
        let mut cursor = value;
        while let Value::Array(items) = cursor {
            shape.push(items.len());
            match items.first() {
                Some(first) => cursor = first,
                None => break,
            }
        }
        let mut flat = Vec::new();
        flatten(value, 0, &shape, &mut flat)?;
        Self::new(shape, flat)
    }

    pub fn to_json(&self) -> Value {
        nest(&self.action_counts, &self.values)
    }
}

fn flatten(value: &Value, depth: usize, shape: &[usize], out: &mut Vec<f64>) -> Result<()> {
    match value {
        Value::Array(items) => {
            if depth >= shape.len() || items.len() != shape[depth] {
                return Err(Error::Config("payoff array is ragged".into()));
            }
            items.iter().try_for_each(|v| flatten(v, depth + 1, shape, out))
        }
        Value::Number(n) if depth == shape.len() => {
            out.push(n.as_f64().ok_or_else(|| Error::Config("bad number".into()))?);
            Ok(())
        }
        _ => Err(Error::Config("payoff must be nested arrays of numbers".into())),
    }
}

fn nest(shape: &[usize], values: &[f64]) -> Value {
    match shape.split_first() {
        None => Value::from(values[0]),
        Some((&n, rest)) => {
            let stride = values.len() / n.max(1);
            Value::Array(
                (0..n)
                    .map(|i| nest(rest, &values[i * stride..(i + 1) * stride]))
                    .collect(),
            )
        }
    }
}

impl Serialize for PayoffTable {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PayoffTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        PayoffTable::from_json(&v).map_err(D::Error::custom)
    }
}
