//! Model checkpoints: a `manifest.txt` of `key = value` lines plus one ATNP
//! file per parameter tensor.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::atnp::Tensor;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, Model};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

fn dims_text(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad dims `{s}` in manifest")))
        })
        .collect()
}

/// Manifest text for `model`, trained with `seed`.
pub fn manifest(model: &Model, seed: u64) -> String {
    let c = model.config();
    let specs = c.param_specs();
    let mut out = String::new();
    let _ = writeln!(out, "format_version = {FORMAT_VERSION}");
    let _ = writeln!(out, "head = {}", c.kind);
    let _ = writeln!(out, "features = {}", c.features);
    let _ = writeln!(out, "classes = {}", c.classes);
    let _ = writeln!(out, "rank = {}", c.rank);
    let _ = writeln!(out, "hidden = {}", c.hidden);
    let _ = writeln!(out, "lambda_pose = {}", c.lambda_pose);
    let _ = writeln!(out, "bottom_up_bias = {}", c.bottom_up_bias);
    let _ = writeln!(out, "sketch_dim = {}", c.sketch_dim);
    let _ = writeln!(out, "sketch_seed = {}", c.sketch_seed);
    let _ = writeln!(out, "sketch_normalize = {}", c.sketch_normalize);
    let _ = writeln!(out, "seed = {seed}");
    let names: Vec<&str> = specs.iter().map(|(n, _)| n.as_str()).collect();
    let _ = writeln!(out, "tensors = {}", names.join(","));
    for (name, dims) in &specs {
        let _ = writeln!(out, "tensor.{name} = {}", dims_text(dims));
    }
    out
}

/// Writes the manifest and parameter blobs into `dir` (created if needed).
/// `extra` files (e.g. the resolved run config) are written alongside.
pub fn save(model: &Model, seed: u64, dir: &Path, extra: &[(&str, &str)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest(model, seed)).map_err(|e| Error::io(&path, e))?;
    for ((name, dims), value) in model.config().param_specs().iter().zip(model.params()) {
        Tensor::new(dims.clone(), value.data().to_vec())?.save(dir.join(format!("{name}.atnp")))?;
    }
    for (file, text) in extra {
        let p = dir.join(file);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {}: expected `key = value`", no + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Format(format!("manifest: duplicate key `{}`", k.trim())));
        }
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = map
        .get(key)
        .ok_or_else(|| Error::Format(format!("manifest: missing `{key}`")))?;
    v.parse()
        .map_err(|_| Error::Format(format!("manifest: bad value `{v}` for `{key}`")))
}

/// Loads a checkpoint, checking the version and every tensor's dims against
/// both the manifest and the head layout. Returns the model and its seed.
pub fn load(dir: &Path) -> Result<(Model, u64)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let map = parse_manifest(&text)?;
    let version: u32 = field(&map, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let kind = map
        .get("head")
        .ok_or_else(|| Error::Format("manifest: missing `head`".into()))?
        .parse()
        .map_err(|_| Error::Format("manifest: unknown head".into()))?;
    let config = HeadConfig {
        kind,
        features: field(&map, "features")?,
        classes: field(&map, "classes")?,
        rank: field(&map, "rank")?,
        hidden: field(&map, "hidden")?,
        lambda_pose: field(&map, "lambda_pose")?,
        bottom_up_bias: field(&map, "bottom_up_bias")?,
        sketch_dim: field(&map, "sketch_dim")?,
        sketch_seed: field(&map, "sketch_seed")?,
        sketch_normalize: field(&map, "sketch_normalize")?,
    };
    config
        .validate()
        .map_err(|e| Error::Invalid(format!("manifest: {e}")))?;
    let seed: u64 = field(&map, "seed")?;
    let specs = config.param_specs();
    let listed: String = field(&map, "tensors")?;
    let expected: Vec<&str> = specs.iter().map(|(n, _)| n.as_str()).collect();
    if listed.split(',').map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Invalid(format!(
            "manifest lists tensors `{listed}`, {} head needs `{}`",
            config.kind,
            expected.join(",")
        )));
    }
    let mut params = Vec::with_capacity(specs.len());
    for (name, dims) in &specs {
        let declared = parse_dims(&field::<String>(&map, &format!("tensor.{name}"))?)?;
        if &declared != dims {
            return Err(Error::Invalid(format!(
                "tensor {name}: manifest declares {}, head layout needs {}",
                dims_text(&declared),
                dims_text(dims)
            )));
        }
        let t = Tensor::load(dir.join(format!("{name}.atnp")))?;
        if t.dims() != dims.as_slice() {
            return Err(Error::Invalid(format!(
                "tensor {name}: file holds {}, manifest declares {}",
                dims_text(t.dims()),
                dims_text(dims)
            )));
        }
        params.push(t.to_matrix()?);
    }
    Ok((Model::from_params(config, params)?, seed))
}
