//! Line-oriented text container for trained networks.
//!
//! ```text
//! aggdiff-checkpoint
//! version 1
//! meta <key> <value>
//! entry mlp <name>
//! sizes 2 32 2
//! activations relu linear
//! values 162
//! -1.2345678901234567e-1
//! ...
//! entry lstm <name>
//! dims <input> <hidden> <output>
//! values <count>
//! ...
//! entry matrix <name>
//! dims <rows> <cols>
//! values <count>
//! ...
//! end
//! ```
//!
//! Parameters are written row-major, one per line, with 17 significant
//! digits, which round-trips every finite `f64` exactly.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{Activation, Lstm, Mlp, Parametric};
use crate::autodiff::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "aggdiff-checkpoint";

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (missing header)")]
    MissingHeader,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("no entry named {0:?}")]
    MissingEntry(String),
    #[error("entry {0:?} has the wrong kind")]
    WrongKind(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Mlp(Mlp),
    Lstm(Lstm),
    Matrix(Matrix),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    entries: Vec<(String, Entry)>,
}

fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Inserts or replaces an entry, keeping first-insertion order.
    pub fn insert(&mut self, name: &str, entry: Entry) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name.to_string(), entry)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn mlp(&self, name: &str) -> Result<&Mlp, CheckpointError> {
        match self.get(name) {
            Some(Entry::Mlp(m)) => Ok(m),
            Some(_) => Err(CheckpointError::WrongKind(name.to_string())),
            None => Err(CheckpointError::MissingEntry(name.to_string())),
        }
    }

    pub fn lstm(&self, name: &str) -> Result<&Lstm, CheckpointError> {
        match self.get(name) {
            Some(Entry::Lstm(m)) => Ok(m),
            Some(_) => Err(CheckpointError::WrongKind(name.to_string())),
            None => Err(CheckpointError::MissingEntry(name.to_string())),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<&Matrix, CheckpointError> {
        match self.get(name) {
            Some(Entry::Matrix(m)) => Ok(m),
            Some(_) => Err(CheckpointError::WrongKind(name.to_string())),
            None => Err(CheckpointError::MissingEntry(name.to_string())),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        line(MAGIC.to_string());
        line(format!("version {CHECKPOINT_VERSION}"));
        for (k, v) in &self.meta {
            line(format!("meta {} {}", k, v.replace('\n', " ")));
        }
        for (name, entry) in &self.entries {
            let values: Vec<f64> = match entry {
                Entry::Mlp(m) => {
                    line(format!("entry mlp {name}"));
                    line(format!("sizes {}", join(m.sizes())));
                    let acts: Vec<&str> = m.activations().iter().map(|a| a.name()).collect();
                    line(format!("activations {}", acts.join(" ")));
                    flatten(m.parameters())
                }
                Entry::Lstm(l) => {
                    line(format!("entry lstm {name}"));
                    line(format!(
                        "dims {} {} {}",
                        l.input_dim(),
                        l.hidden(),
                        l.output_dim()
                    ));
                    flatten(l.parameters())
                }
                Entry::Matrix(m) => {
                    line(format!("entry matrix {name}"));
                    line(format!("dims {} {}", m.nrows(), m.ncols()));
                    flatten(vec![m])
                }
            };
            line(format!("values {}", values.len()));
            for v in values {
                line(fmt_value(v));
            }
        }
        line("end".to_string());
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = Lines::new(text);
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(CheckpointError::MissingHeader),
        }
        let (ln, version) = lines.next().ok_or(CheckpointError::Truncated)?;
        let found = version
            .strip_prefix("version ")
            .ok_or_else(|| parse_err(ln, "expected version line"))?;
        if found.trim() != CHECKPOINT_VERSION.to_string() {
            return Err(CheckpointError::Version {
                found: found.trim().to_string(),
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut ckpt = Checkpoint::new();
        loop {
            let (ln, l) = lines.next().ok_or(CheckpointError::Truncated)?;
            if l == "end" {
                return Ok(ckpt);
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != "entry" {
                return Err(parse_err(ln, "expected entry header"));
            }
            let name = parts[2];
            let entry = match parts[1] {
                "mlp" => {
                    let sizes = lines.usizes("sizes")?;
                    let (ln, acts) = lines.keyed("activations")?;
                    let activations = acts
                        .split_whitespace()
                        .map(|a| {
                            Activation::parse(a)
                                .ok_or_else(|| parse_err(ln, &format!("unknown activation {a}")))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    let shapes: Vec<(usize, usize)> = sizes
                        .windows(2)
                        .flat_map(|w| [(w[0], w[1]), (1, w[1])])
                        .collect();
                    let mut mats = lines.values(&shapes)?.into_iter();
                    let mut weights = Vec::new();
                    let mut biases = Vec::new();
                    while let (Some(w), Some(b)) = (mats.next(), mats.next()) {
                        weights.push(w);
                        biases.push(b);
                    }
                    let mlp = Mlp::from_parts(sizes, activations, weights, biases)
                        .map_err(|e| parse_err(ln, &e.to_string()))?;
                    Entry::Mlp(mlp)
                }
                "lstm" => {
                    let dims = lines.usizes("dims")?;
                    if dims.len() != 3 {
                        return Err(parse_err(ln, "lstm dims need 3 values"));
                    }
                    let (p, h, o) = (dims[0], dims[1], dims[2]);
                    let shapes = [(p, 4 * h), (h, 4 * h), (1, 4 * h), (h, o), (1, o)];
                    let mats = lines.values(&shapes)?;
                    Entry::Lstm(
                        Lstm::from_parts(p, h, o, mats).map_err(|e| parse_err(ln, &e.to_string()))?,
                    )
                }
                "matrix" => {
                    let dims = lines.usizes("dims")?;
                    if dims.len() != 2 {
                        return Err(parse_err(ln, "matrix dims need 2 values"));
                    }
                    let mut mats = lines.values(&[(dims[0], dims[1])])?;
                    Entry::Matrix(mats.remove(0))
                }
                other => return Err(parse_err(ln, &format!("unknown entry kind {other}"))),
            };
            ckpt.entries.push((name.to_string(), entry));
        }
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn flatten(params: Vec<&Matrix>) -> Vec<f64> {
    params.iter().flat_map(|p| p.iter().copied()).collect()
}

fn parse_err(line: usize, message: &str) -> CheckpointError {
    CheckpointError::Parse {
        line,
        message: message.to_string(),
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        self.inner.next().map(|(i, l)| (i + 1, l))
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str), CheckpointError> {
        let (ln, l) = self.next().ok_or(CheckpointError::Truncated)?;
        let rest = l
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some("") } else { None }))
            .ok_or_else(|| parse_err(ln, &format!("expected {key}")))?;
        Ok((ln, rest))
    }

    fn usizes(&mut self, key: &str) -> Result<Vec<usize>, CheckpointError> {
        let (ln, rest) = self.keyed(key)?;
        rest.split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(ln, &format!("bad integer {t}"))))
            .collect()
    }

    fn values(&mut self, shapes: &[(usize, usize)]) -> Result<Vec<Matrix>, CheckpointError> {
        let (ln, count) = self.keyed("values")?;
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| parse_err(ln, "bad value count"))?;
        let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if count != expected {
            return Err(parse_err(
                ln,
                &format!("value count {count} does not match shapes ({expected})"),
            ));
        }
        let mut out = Vec::with_capacity(shapes.len());
        for &(r, c) in shapes {
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r * c {
                let (ln, l) = self.next().ok_or(CheckpointError::Truncated)?;
                let v: f64 = l
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(ln, &format!("bad number {l:?}")))?;
                data.push(v);
            }
            out.push(Matrix::from_shape_vec((r, c), data).expect("sized above"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", "legend");
        c.set_meta("dt", 0.2);
        c.insert(
            "g",
            Entry::Mlp(Mlp::new(&[2, 5, 2], Activation::Relu, 1).unwrap()),
        );
        c.insert("h", Entry::Lstm(Lstm::new(3, 4, 2, 2).unwrap()));
        c.insert("sigma_root", Entry::Matrix(Rng::new(3).normal_matrix(2, 2)));
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let text = sample().to_text();
        let loaded = Checkpoint::from_text(&text).unwrap();
        assert_eq!(loaded, sample());
        assert_eq!(loaded.to_text(), text);
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let text = sample().to_text();
        let cut = &text[..text.len() / 2];
        let cut = &cut[..cut.rfind('\n').unwrap()];
        assert_eq!(
            Checkpoint::from_text(cut).unwrap_err(),
            CheckpointError::Truncated
        );
        assert!(Checkpoint::from_text("").is_err());
    }

    #[test]
    fn version_is_checked() {
        let text = sample().to_text().replacen("version 1", "version 7", 1);
        assert!(matches!(
            Checkpoint::from_text(&text),
            Err(CheckpointError::Version { .. })
        ));
    }

    #[test]
    fn corrupt_number_reports_line() {
        let text = sample().to_text();
        let mut lines: Vec<&str> = text.lines().collect();
        let idx = lines.iter().position(|l| l.starts_with("values")).unwrap() + 2;
        lines[idx] = "zzz";
        let err = Checkpoint::from_text(&lines.join("\n")).unwrap_err();
        assert!(matches!(err, CheckpointError::Parse { line, .. } if line == idx + 1));
    }

    #[test]
    fn forward_pass_survives_round_trip() {
        let net = Mlp::new(&[3, 16, 16, 2], Activation::Relu, 77).unwrap();
        let mut c = Checkpoint::new();
        c.insert("f", Entry::Mlp(net.clone()));
        let back = Checkpoint::from_text(&c.to_text()).unwrap();
        let loaded = back.mlp("f").unwrap();
        let x = Rng::new(1).normal_matrix(100, 3).mapv(|v| v * 10.0);
        assert_eq!(net.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    }
}
