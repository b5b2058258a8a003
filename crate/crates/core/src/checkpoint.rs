//! `MTAL1` model files.
//!
//! ```text
//! MTAL1
//! kind=recognizer
//! mode=landmark
//! layout={"mode":"landmark",...}
//! input_width=22
//! config=<hash>
//! tensor=standardizer.mean 22
//! tensor=trunk.0.weight 22x128
//! ...
//! payload_sha256=<hex>
//! header_sha256=<hex of every line above>
//! end
//! <little-endian f64 arrays in the order listed>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::labels::{LabelLayout, TaskMode};
use crate::models::{head_widths, DiscriminatorModel, HeadKind, Linear, RecognizerModel, Standardizer};

pub const MAGIC: &str = "MTAL1";
const MAX_HEADER: usize = 1 << 20;

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn entry(name: impl Into<String>, t: &Tensor) -> Entry {
    Entry {
        name: name.into(),
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

fn vec_entry(name: &str, v: &[f64]) -> Entry {
    Entry {
        name: name.into(),
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn encode(meta: &[(&str, String)], entries: &[Entry]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(entries.iter().map(|e| e.data.len() * 8).sum());
    for e in entries {
        for v in &e.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut header = format!("{MAGIC}\n");
    for (k, v) in meta {
        header.push_str(&format!("{k}={v}\n"));
    }
    for e in entries {
        header.push_str(&format!("tensor={} {}\n", e.name, shape_str(&e.shape)));
    }
    header.push_str(&format!("payload_sha256={}\n", hex::encode(Sha256::digest(&payload))));
    let header_sha = hex::encode(Sha256::digest(header.as_bytes()));
    header.push_str(&format!("header_sha256={header_sha}\nend\n"));
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

struct Decoded {
    meta: Vec<(String, String)>,
    entries: Vec<Entry>,
}

impl Decoded {
    fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint header lacks '{key}'")))
    }

    fn take(&mut self, name: &str) -> Result<Entry> {
        let pos = self
            .entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))?;
        Ok(self.entries.remove(pos))
    }
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if !bytes.starts_with(format!("{MAGIC}\n").as_bytes()) {
        return Err(fmt_err("not an MTAL1 checkpoint (magic/version mismatch)"));
    }
    let end_marker = b"\nend\n";
    let limit = bytes.len().min(MAX_HEADER);
    let end = bytes[..limit]
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| fmt_err("checkpoint header is unterminated"))?
        + end_marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| fmt_err("checkpoint header is not UTF-8"))?;
    let lines: Vec<&str> = header.lines().collect();
    // magic, ..., header_sha256, end
    let n = lines.len();
    if n < 3 {
        return Err(fmt_err("checkpoint header is too short"));
    }
    let claimed = lines[n - 2]
        .strip_prefix("header_sha256=")
        .ok_or_else(|| fmt_err("checkpoint header lacks its checksum"))?;
    let signed: String = lines[..n - 2].iter().map(|l| format!("{l}\n")).collect();
    if hex::encode(Sha256::digest(signed.as_bytes())) != claimed {
        return Err(fmt_err("checkpoint header checksum mismatch"));
    }
    let mut meta = Vec::new();
    let mut shapes = Vec::new();
    let mut payload_sha = None;
    for line in &lines[1..n - 2] {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("malformed header line '{line}'")))?;
        match k {
            "tensor" => {
                let (name, shape) = v
                    .split_once(' ')
                    .ok_or_else(|| fmt_err(format!("malformed tensor line '{line}'")))?;
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| fmt_err(format!("bad tensor shape in '{line}'")))?;
                shapes.push((name.to_string(), shape));
            }
            "payload_sha256" => payload_sha = Some(v.to_string()),
            _ => meta.push((k.to_string(), v.to_string())),
        }
    }
    let payload = &bytes[end..];
    let expected: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>() * 8).sum();
    if payload.len() != expected {
        return Err(Error::Integrity(format!(
            "checkpoint payload has {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    if payload_sha.as_deref() != Some(hex::encode(Sha256::digest(payload)).as_str()) {
        return Err(Error::Integrity("checkpoint payload checksum mismatch".into()));
    }
    let mut floats = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let entries = shapes
        .into_iter()
        .map(|(name, shape)| {
            let data = floats.by_ref().take(shape.iter().product()).collect();
            Entry { name, shape, data }
        })
        .collect();
    Ok(Decoded { meta, entries })
}

fn tensor(e: Entry) -> Result<Tensor> {
    Ok(Tensor::new(e.shape, e.data)?.into_param())
}

fn linear(d: &mut Decoded, prefix: &str) -> Result<Linear> {
    let weight = tensor(d.take(&format!("{prefix}.weight"))?)?;
    let bias = tensor(d.take(&format!("{prefix}.bias"))?)?;
    if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
        return Err(fmt_err(format!("layer '{prefix}' has inconsistent shapes")));
    }
    Ok(Linear { weight, bias })
}

fn mode_name(mode: TaskMode) -> &'static str {
    match mode {
        TaskMode::Landmark => "landmark",
        TaskMode::Attribute => "attribute",
    }
}

pub fn encode_recognizer(model: &RecognizerModel, config_hash: &str) -> Vec<u8> {
    let s = model.standardizer();
    let mut entries = vec![
        vec_entry("standardizer.mean", &s.mean),
        vec_entry("standardizer.scale", &s.scale),
    ];
    for (i, l) in model.trunk().iter().enumerate() {
        entries.push(entry(format!("trunk.{i}.weight"), &l.weight));
        entries.push(entry(format!("trunk.{i}.bias"), &l.bias));
    }
    for (kind, l) in model.heads() {
        entries.push(entry(format!("head.{}.weight", kind.name()), &l.weight));
        entries.push(entry(format!("head.{}.bias", kind.name()), &l.bias));
    }
    let layout = serde_json::to_string(model.layout()).expect("layout serializes");
    let meta = [
        ("kind", "recognizer".to_string()),
        ("mode", mode_name(model.layout().mode).to_string()),
        ("layout", layout),
        ("input_width", model.input_width().to_string()),
        ("trunk_layers", model.trunk().len().to_string()),
        ("config", config_hash.to_string()),
    ];
    encode(&meta, &entries)
}

/// Restored model and the config hash stored with it.
pub fn decode_recognizer(bytes: &[u8]) -> Result<(RecognizerModel, String)> {
    let mut d = decode(bytes)?;
    if d.get("kind")? != "recognizer" {
        return Err(fmt_err("checkpoint does not hold a recognizer"));
    }
    let layout: LabelLayout =
        serde_json::from_str(d.get("layout")?).map_err(|e| fmt_err(format!("bad layout: {e}")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| fmt_err("bad integer in checkpoint header"))
    };
    let input_width = parse(d.get("input_width")?)?;
    let layers = parse(d.get("trunk_layers")?)?;
    let config = d.get("config")?.to_string();
    let standardizer = Standardizer {
        mean: d.take("standardizer.mean")?.data,
        scale: d.take("standardizer.scale")?.data,
    };
    let trunk = (0..layers)
        .map(|i| linear(&mut d, &format!("trunk.{i}")))
        .collect::<Result<Vec<_>>>()?;
    let heads = head_widths(&layout)
        .into_iter()
        .map(|(kind, _): (HeadKind, usize)| Ok((kind, linear(&mut d, &format!("head.{}", kind.name()))?)))
        .collect::<Result<Vec<_>>>()?;
    if !d.entries.is_empty() {
        return Err(fmt_err("checkpoint has unexpected extra tensors"));
    }
    let model = RecognizerModel::from_parts(layout, input_width, trunk, heads, standardizer)
        .map_err(|e| fmt_err(e.to_string()))?;
    Ok((model, config))
}

pub fn encode_discriminator(model: &DiscriminatorModel, config_hash: &str) -> Vec<u8> {
    let entries: Vec<Entry> = model
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                entry(format!("layer.{i}.weight"), &l.weight),
                entry(format!("layer.{i}.bias"), &l.bias),
            ]
        })
        .collect();
    let meta = [
        ("kind", "discriminator".to_string()),
        ("input_width", model.input_width().to_string()),
        ("config", config_hash.to_string()),
    ];
    encode(&meta, &entries)
}

pub fn decode_discriminator(bytes: &[u8]) -> Result<(DiscriminatorModel, String)> {
    let mut d = decode(bytes)?;
    if d.get("kind")? != "discriminator" {
        return Err(fmt_err("checkpoint does not hold a discriminator"));
    }
    let config = d.get("config")?.to_string();
    let layers = [
        linear(&mut d, "layer.0")?,
        linear(&mut d, "layer.1")?,
        linear(&mut d, "layer.2")?,
    ];
    if !d.entries.is_empty() {
        return Err(fmt_err("checkpoint has unexpected extra tensors"));
    }
    let model = DiscriminatorModel::from_layers(layers).map_err(|e| fmt_err(e.to_string()))?;
    Ok((model, config))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn save_recognizer(path: &Path, model: &RecognizerModel, config_hash: &str) -> Result<()> {
    write_file(path, &encode_recognizer(model, config_hash))
}

pub fn load_recognizer(path: &Path) -> Result<(RecognizerModel, String)> {
    decode_recognizer(&read_file(path)?)
}

pub fn save_discriminator(path: &Path, model: &DiscriminatorModel, config_hash: &str) -> Result<()> {
    write_file(path, &encode_discriminator(model, config_hash))
}

pub fn load_discriminator(path: &Path) -> Result<(DiscriminatorModel, String)> {
    decode_discriminator(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::PoseMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> RecognizerModel {
        let layout = LabelLayout::landmark(3, PoseMode::Continuous);
        RecognizerModel::new(7, &[5, 4], layout, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let m = model();
        let bytes = encode_recognizer(&m, "abc");
        let (back, hash) = decode_recognizer(&bytes).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(encode_recognizer(&back, "abc"), bytes);
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn discriminator_round_trip() {
        let d = DiscriminatorModel::new(6, [4, 3], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let bytes = encode_discriminator(&d, "h");
        let (back, _) = decode_discriminator(&bytes).unwrap();
        assert_eq!(encode_discriminator(&back, "h"), bytes);
        assert!(decode_recognizer(&bytes).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_recognizer(&model(), "abc");
        let mut magic = bytes.clone();
        magic[4] = b'2';
        assert!(matches!(decode_recognizer(&magic), Err(Error::Format(_))));
        let mut header = bytes.clone();
        header[12] ^= 0x01;
        assert!(matches!(decode_recognizer(&header), Err(Error::Format(_))));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_recognizer(truncated), Err(Error::Integrity(_))));
        let mut payload = bytes.clone();
        let last = payload.len() - 1;
        payload[last] ^= 0x40;
        assert!(matches!(decode_recognizer(&payload), Err(Error::Integrity(_))));
    }
}
