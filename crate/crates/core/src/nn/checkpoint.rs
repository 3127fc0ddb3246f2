//! Versioned plain-text checkpoints.
//!
//! ```text
//! deid-checkpoint
//! format_version 1
//! model_kind <tag>
//! nets <count>
//! net <name>
//! layer_sizes 64 256 64
//! hidden_activation tanh
//! final_activation linear
//! params <n>
//! <one float per line, shortest round-trip decimal>
//! ...
//! checksum <sha256 hex of every byte before this line>
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::dense::{Activation, DenseNet};
use crate::error::{CheckpointError, Error, Result};

pub const CHECKPOINT_MAGIC: &str = "deid-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_kind: String,
    pub nets: Vec<(String, DenseNet)>,
}

fn checksum(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Checkpoint {
    pub fn new(model_kind: impl Into<String>) -> Self {
        Self { model_kind: model_kind.into(), nets: Vec::new() }
    }

    pub fn single(model_kind: impl Into<String>, net: &DenseNet) -> Self {
        Self { model_kind: model_kind.into(), nets: vec![("main".into(), net.clone())] }
    }

    pub fn with(mut self, name: impl Into<String>, net: &DenseNet) -> Self {
        self.nets.push((name.into(), net.clone()));
        self
    }

    pub fn net(&self, name: &str) -> Result<&DenseNet> {
        self.nets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| CheckpointError::Malformed(format!("no network named `{name}`")).into())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.model_kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Malformed(format!("expected model kind `{kind}`, found `{}`", self.model_kind)).into())
        }
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "format_version {CHECKPOINT_VERSION}").unwrap();
        writeln!(s, "model_kind {}", self.model_kind).unwrap();
        writeln!(s, "nets {}", self.nets.len()).unwrap();
        for (name, net) in &self.nets {
            writeln!(s, "net {name}").unwrap();
            let sizes: Vec<String> = net.layer_sizes().iter().map(|v| v.to_string()).collect();
            writeln!(s, "layer_sizes {}", sizes.join(" ")).unwrap();
            writeln!(s, "hidden_activation {}", net.hidden_activation()).unwrap();
            writeln!(s, "final_activation {}", net.final_activation()).unwrap();
            writeln!(s, "params {}", net.param_count()).unwrap();
            for v in net.flat_params() {
                writeln!(s, "{v:e}").unwrap();
            }
        }
        let sum = checksum(&s);
        writeln!(s, "checksum {sum}").unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut header = text.lines();
        match header.next() {
            Some(CHECKPOINT_MAGIC) => {}
            Some(_) => return Err(CheckpointError::Malformed("missing checkpoint magic".into())),
            None => return Err(CheckpointError::Truncated("empty file".into())),
        }
        let version_line = header.next().ok_or_else(|| CheckpointError::Truncated("no version line".into()))?;
        let found: u32 = version_line
            .strip_prefix("format_version ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| CheckpointError::Malformed(format!("bad version line `{version_line}`")))?;
        if found != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found, expected: CHECKPOINT_VERSION });
        }

        let marker = "\nchecksum ";
        let split = text.rfind(marker).ok_or_else(|| CheckpointError::Truncated("no checksum line".into()))?;
        let body = &text[..split + 1];
        let stored = text[split + marker.len()..].trim_end_matches('\n').to_string();
        if stored.len() != 64 || text[split + marker.len()..].trim_end_matches('\n').contains('\n') {
            return Err(CheckpointError::Truncated("incomplete checksum line".into()));
        }
        let computed = checksum(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        parse_body(body)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text)?)
    }
}

fn field<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str, CheckpointError> {
    let line = lines.next().ok_or_else(|| CheckpointError::Truncated(format!("missing `{key}`")))?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| CheckpointError::Malformed(format!("expected `{key}`, found `{line}`")))
}

fn parse_body(body: &str) -> Result<Checkpoint, CheckpointError> {
    let malformed = |m: String| CheckpointError::Malformed(m);
    let mut lines = body.lines().skip(2);
    let model_kind = field(&mut lines, "model_kind")?.to_string();
    let count: usize = field(&mut lines, "nets")?.parse().map_err(|e| malformed(format!("net count: {e}")))?;
    let mut nets = Vec::with_capacity(count);
    for _ in 0..count {
        let name = field(&mut lines, "net")?.to_string();
        let sizes: Vec<usize> = field(&mut lines, "layer_sizes")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|e| malformed(format!("layer size `{s}`: {e}"))))
            .collect::<Result<_, _>>()?;
        let hidden: Activation =
            field(&mut lines, "hidden_activation")?.parse().map_err(|e: Error| malformed(e.to_string()))?;
        let last: Activation =
            field(&mut lines, "final_activation")?.parse().map_err(|e: Error| malformed(e.to_string()))?;
        let n: usize = field(&mut lines, "params")?.parse().map_err(|e| malformed(format!("param count: {e}")))?;
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let line = lines.next().ok_or_else(|| CheckpointError::Truncated(format!("net `{name}` stops at param {i}")))?;
            let v: f64 = line.parse().map_err(|e| malformed(format!("param {i} `{line}`: {e}")))?;
            values.push(v);
        }
        let mut net = DenseNet::zeros(&sizes, hidden, last).map_err(|e| malformed(e.to_string()))?;
        net.set_flat_params(&values).map_err(|e| malformed(e.to_string()))?;
        if net.first_non_finite_layer().is_some() {
            return Err(malformed(format!("net `{name}` holds non-finite parameters")));
        }
        nets.push((name, net));
    }
    if let Some(extra) = lines.next() {
        return Err(malformed(format!("unexpected trailing line `{extra}`")));
    }
    Ok(Checkpoint { model_kind, nets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let a = DenseNet::init(&[3, 5, 2], Activation::Tanh, Activation::Linear, 3).unwrap();
        let b = DenseNet::init(&[2, 4], Activation::Tanh, Activation::Sigmoid, 4).unwrap();
        Checkpoint::new("pair").with("a", &a).with("b", &b)
    }

    fn bits(net: &DenseNet) -> Vec<u64> {
        net.flat_params().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_text(&ck.to_text()).unwrap();
        assert_eq!(back.model_kind, "pair");
        for ((n1, a), (n2, b)) in ck.nets.iter().zip(&back.nets) {
            assert_eq!(n1, n2);
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.layer_sizes(), b.layer_sizes());
            assert_eq!(a.final_activation(), b.final_activation());
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let text = sample().to_text();
        let params_at = text.find("params ").unwrap();
        let line_start = params_at + text[params_at..].find('\n').unwrap() + 1;
        let mut bytes = text.into_bytes();
        let digit = (line_start..bytes.len()).find(|&i| bytes[i].is_ascii_digit()).unwrap();
        bytes[digit] = if bytes[digit] == b'7' { b'8' } else { b'7' };
        let err = Checkpoint::from_text(std::str::from_utf8(&bytes).unwrap()).unwrap_err();
        assert!(matches!(err, CheckpointError::Checksum { .. }), "{err:?}");
    }

    #[test]
    fn newer_version_is_rejected() {
        let text = sample().to_text().replacen("format_version 1", "format_version 2", 1);
        assert_eq!(
            Checkpoint::from_text(&text).unwrap_err(),
            CheckpointError::Version { found: 2, expected: 1 }
        );
    }

    #[test]
    fn truncated_file_is_detected() {
        let text = sample().to_text();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::from_text(cut).unwrap_err(), CheckpointError::Truncated(_)));
        assert!(matches!(Checkpoint::from_text("").unwrap_err(), CheckpointError::Truncated(_)));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(Checkpoint::load(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
