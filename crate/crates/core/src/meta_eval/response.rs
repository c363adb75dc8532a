//! Extraction and validation of the model's JSON answer.

use std::collections::{BTreeMap, HashMap};

use serde_json::Value;
use thiserror::Error;

use crate::labels::MOS_RANGE;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResponseError {
    #[error("no JSON array found in response")]
    NoJsonFound,
    #[error("response holds {got} entries, expected {expected}")]
    CountMismatch { got: usize, expected: usize },
    #[error("response has no entry for utt_id {0:?}")]
    MissingId(String),
    #[error("mos for utt_id {0:?} is not a number")]
    NonNumericMos(String),
    #[error("entry {0} is not an object with a string utt_id")]
    InvalidEntry(usize),
}

/// One rated utterance: the MOS estimate and the free-form attribute map.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub utt_id: String,
    pub mos: f64,
    pub attributes: BTreeMap<String, String>,
    pub raw_response: String,
    /// The model's value lay outside `[1, 5]` and was clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    /// In `expected_ids` order.
    pub predictions: Vec<Prediction>,
    pub clamped: usize,
}

/// Returns the first substring that parses as a JSON array.
fn first_json_array(text: &str) -> Option<Vec<Value>> {
    text.match_indices('[').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Array(items))) => Some(items),
            _ => None,
        }
    })
}

fn attribute_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn parse_response(
    text: &str,
    expected_ids: &[String],
) -> Result<ParsedResponse, ResponseError> {
    let entries = first_json_array(text).ok_or(ResponseError::NoJsonFound)?;
    if entries.len() != expected_ids.len() {
        return Err(ResponseError::CountMismatch {
            got: entries.len(),
            expected: expected_ids.len(),
        });
    }

    let mut by_id: HashMap<&str, &serde_json::Map<String, Value>> = HashMap::new();
    for (i, entry) in entries.iter().enumerate() {
        let obj = entry.as_object().ok_or(ResponseError::InvalidEntry(i))?;
        let id = obj
            .get("utt_id")
            .and_then(Value::as_str)
            .ok_or(ResponseError::InvalidEntry(i))?;
        by_id.entry(id).or_insert(obj);
    }

    let mut clamped = 0;
    let mut predictions = Vec::with_capacity(expected_ids.len());
    for id in expected_ids {
        let obj = by_id
            .get(id.as_str())
            .ok_or_else(|| ResponseError::MissingId(id.clone()))?;
        let raw_mos = obj
            .get("mos")
            .and_then(Value::as_f64)
            .ok_or_else(|| ResponseError::NonNumericMos(id.clone()))?;
        let mos = raw_mos.clamp(MOS_RANGE.0, MOS_RANGE.1);
        let was_clamped = mos != raw_mos;
        clamped += usize::from(was_clamped);
        let attributes = match obj.get("attributes") {
            Some(Value::Object(m)) => m
                .iter()
                .map(|(k, v)| (k.clone(), attribute_text(v)))
                .collect(),
            _ => BTreeMap::new(),
        };
        predictions.push(Prediction {
            utt_id: id.clone(),
            mos,
            attributes,
            raw_response: text.to_string(),
            clamped: was_clamped,
        });
    }
    Ok(ParsedResponse {
        predictions,
        clamped,
    })
}
