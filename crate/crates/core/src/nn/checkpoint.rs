//! Binary network checkpoints.
//!
//! Layout: magic `HFNN`, little-endian `u32` version, the spec as UTF-8
//! `key=value` lines closed by an empty line, `u64` parameter count, the
//! parameters as little-endian `f64`, then the frozen Fourier matrix when the
//! spec has an embedding. Floats in the spec use Rust's shortest round-trip
//! formatting, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, Architecture, Embedding, Factorization, Network, NetworkSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HFNN";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    if &m != magic {
        return Err(bad(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

/// Writes `key=value` lines and the closing blank line.
pub fn write_kv(w: &mut impl Write, pairs: &[(String, String)]) -> Result<()> {
    for (k, v) in pairs {
        writeln!(w, "{k}={v}")?;
    }
    writeln!(w)?;
    Ok(())
}

/// Reads `key=value` lines up to the blank line.
pub fn read_kv(r: &mut impl Read) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut line = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte).map_err(|e| bad(format!("truncated header: {e}")))?;
        if byte[0] != b'\n' {
            line.push(byte[0]);
            continue;
        }
        if line.is_empty() {
            return Ok(pairs);
        }
        let text = String::from_utf8(std::mem::take(&mut line)).map_err(|_| bad("header is not UTF-8"))?;
        let (k, v) = text.split_once('=').ok_or_else(|| bad(format!("malformed header line {text:?}")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
}

pub fn kv_get<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| bad(format!("missing header key {key}")))
}

pub fn kv_parse<T: std::str::FromStr>(pairs: &[(String, String)], key: &str) -> Result<T> {
    let raw = kv_get(pairs, key)?;
    raw.parse().map_err(|_| bad(format!("bad value {raw:?} for {key}")))
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn split(raw: &str, key: &str) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|s| s.parse().map_err(|_| bad(format!("bad float {s:?} in {key}")))).collect()
}

pub fn spec_to_kv(spec: &NetworkSpec) -> Vec<(String, String)> {
    let mut kv = vec![
        ("input_dim".to_string(), spec.input_dim.to_string()),
        ("output_dim".to_string(), spec.output_dim.to_string()),
        ("hidden_layers".to_string(), spec.hidden_layers.to_string()),
        ("hidden_width".to_string(), spec.hidden_width.to_string()),
        ("activation".to_string(), "tanh".to_string()),
        (
            "architecture".to_string(),
            match spec.architecture {
                Architecture::Mlp => "mlp",
                Architecture::ModifiedMlp => "modified_mlp",
            }
            .to_string(),
        ),
    ];
    match spec.embedding {
        Embedding::None => kv.push(("embedding".into(), "none".into())),
        Embedding::Fourier { features, sigma } => {
            kv.push(("embedding".into(), "fourier".into()));
            kv.push(("fourier_features".into(), features.to_string()));
            kv.push(("fourier_sigma".into(), format!("{sigma:?}")));
        }
    }
    match spec.factorization {
        Factorization::None => kv.push(("factorization".into(), "none".into())),
        Factorization::Rwf { mean, std } => {
            kv.push(("factorization".into(), "rwf".into()));
            kv.push(("rwf_mean".into(), format!("{mean:?}")));
            kv.push(("rwf_std".into(), format!("{std:?}")));
        }
    }
    kv.push(("input_shift".into(), join(&spec.input_shift)));
    kv.push(("input_scale".into(), join(&spec.input_scale)));
    kv.push(("seed".into(), spec.seed.to_string()));
    kv
}

pub fn spec_from_kv(kv: &[(String, String)]) -> Result<NetworkSpec> {
    let activation = match kv_get(kv, "activation")? {
        "tanh" => Activation::Tanh,
        other => return Err(bad(format!("unknown activation {other:?}"))),
    };
    let architecture = match kv_get(kv, "architecture")? {
        "mlp" => Architecture::Mlp,
        "modified_mlp" => Architecture::ModifiedMlp,
        other => return Err(bad(format!("unknown architecture {other:?}"))),
    };
    let embedding = match kv_get(kv, "embedding")? {
        "none" => Embedding::None,
        "fourier" => Embedding::Fourier {
            features: kv_parse(kv, "fourier_features")?,
            sigma: kv_parse(kv, "fourier_sigma")?,
        },
        other => return Err(bad(format!("unknown embedding {other:?}"))),
    };
    let factorization = match kv_get(kv, "factorization")? {
        "none" => Factorization::None,
        "rwf" => Factorization::Rwf { mean: kv_parse(kv, "rwf_mean")?, std: kv_parse(kv, "rwf_std")? },
        other => return Err(bad(format!("unknown factorization {other:?}"))),
    };
    let spec = NetworkSpec {
        input_dim: kv_parse(kv, "input_dim")?,
        output_dim: kv_parse(kv, "output_dim")?,
        hidden_layers: kv_parse(kv, "hidden_layers")?,
        hidden_width: kv_parse(kv, "hidden_width")?,
        activation,
        architecture,
        embedding,
        factorization,
        input_shift: split(kv_get(kv, "input_shift")?, "input_shift")?,
        input_scale: split(kv_get(kv, "input_scale")?, "input_scale")?,
        seed: kv_parse(kv, "seed")?,
    };
    spec.validate().map_err(|e| bad(format!("invalid network spec: {e}")))?;
    Ok(spec)
}

pub fn write_network(w: &mut impl Write, net: &Network) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_kv(w, &spec_to_kv(&net.spec))?;
    write_u64(w, net.params.values.len() as u64)?;
    write_f64s(w, &net.params.values)?;
    if let Some(b) = net.params.fourier() {
        write_f64s(w, b)?;
    }
    Ok(())
}

pub fn read_network(r: &mut impl Read) -> Result<Network> {
    expect_magic(r, MAGIC)?;
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(bad(format!("unsupported network checkpoint version {version}")));
    }
    let spec = spec_from_kv(&read_kv(r)?)?;
    let count = read_u64(r)? as usize;
    if count != spec.num_params() {
        return Err(bad(format!("parameter count {count} does not match spec ({})", spec.num_params())));
    }
    let values = read_f64s(r, count)?;
    let fourier = match spec.embedding {
        Embedding::None => None,
        Embedding::Fourier { features, .. } => Some(read_f64s(r, features * spec.input_dim)?),
    };
    Network::from_parts(spec, values, fourier)
}

impl Network {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_network(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network> {
        let mut r = BufReader::new(File::open(path)?);
        read_network(&mut r)
    }
}
