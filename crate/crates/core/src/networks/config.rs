//! Flat key/value serialization of model configurations (stored in checkpoint
//! manifests).

use std::collections::BTreeMap;

use super::layers::{BlockKind, EncoderSpec};
use crate::error::{Error, Result};

pub(crate) fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::invalid(format!("missing config key {key}")))
}

fn parse_err(key: &str, value: &str) -> Error {
    Error::invalid(format!("config key {key}: cannot parse {value:?}"))
}

pub(crate) fn get_usize(kv: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    let v = get(kv, key)?;
    v.parse().map_err(|_| parse_err(key, v))
}

pub(crate) fn get_f64(kv: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    let v = get(kv, key)?;
    v.parse().map_err(|_| parse_err(key, v))
}

pub(crate) fn get_bool(kv: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    let v = get(kv, key)?;
    v.parse().map_err(|_| parse_err(key, v))
}

pub(crate) fn get_list(kv: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
    let v = get(kv, key)?;
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.trim().parse().map_err(|_| parse_err(key, v)))
        .collect()
}

pub(crate) fn encoder_to_kv(prefix: &str, e: &EncoderSpec, kv: &mut BTreeMap<String, String>) {
    kv.insert(format!("{prefix}.base_channels"), join(&e.base_channels));
    kv.insert(format!("{prefix}.k"), format!("{:?}", e.k));
    kv.insert(format!("{prefix}.in_channels"), e.in_channels.to_string());
    kv.insert(format!("{prefix}.strides"), join(&e.strides));
    kv.insert(format!("{prefix}.block"), e.block.as_str().to_string());
}

pub(crate) fn encoder_from_kv(prefix: &str, kv: &BTreeMap<String, String>) -> Result<EncoderSpec> {
    Ok(EncoderSpec {
        base_channels: get_list(kv, &format!("{prefix}.base_channels"))?,
        k: get_f64(kv, &format!("{prefix}.k"))?,
        in_channels: get_usize(kv, &format!("{prefix}.in_channels"))?,
        strides: get_list(kv, &format!("{prefix}.strides"))?,
        block: BlockKind::parse(get(kv, &format!("{prefix}.block"))?)?,
    })
}
