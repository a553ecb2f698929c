//! On-disk formats.
//!
//! Feature file: `JEF1`, u32 LE row count, u32 LE dimension, then row-major
//! f32 LE values. Caption file: `subset<TAB>tok tok tok` per line. Vocabulary:
//! one token per line, id = line number. Manifest: `key=value` lines with
//! `features`, `captions`, `vocab`, `k` and `split`; relative paths resolve
//! against the manifest's directory.

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const FEATURE_MAGIC: [u8; 4] = *b"JEF1";

pub fn load_features(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_features(&bytes)
}

pub fn read_features(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 12 {
        if bytes.len() >= 4 && bytes[..4] != FEATURE_MAGIC {
            return Err(bad_magic(bytes));
        }
        return Err(Error::TruncatedFile(format!(
            "header needs 12 bytes, file has {}",
            bytes.len()
        )));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(bad_magic(bytes));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    let want = n * d * 4;
    if body.len() < want {
        return Err(Error::TruncatedFile(format!(
            "header declares {n}x{d} values ({want} bytes), found {} bytes",
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in body[..want].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFiniteValue(i));
        }
        data.push(f64::from(v));
    }
    Matrix::from_vec(n, d, data)
}

fn bad_magic(bytes: &[u8]) -> Error {
    let mut found = [0u8; 4];
    found.copy_from_slice(&bytes[..4]);
    Error::BadMagic {
        expected: FEATURE_MAGIC,
        found,
    }
}

/// Writes values as f32; callers wanting a lossless round trip must hold
/// f32-representable values.
pub fn write_features(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(12 + m.as_slice().len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses caption lines and checks that every subset has the same number of
/// captions.
pub fn load_captions(path: impl AsRef<Path>, vocab_size: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_captions(&text, vocab_size)
}

fn parse_captions(text: &str, vocab_size: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: &str| Error::MalformedLine {
            line: line_no,
            reason: reason.to_string(),
        };
        let (idx, toks) = line.split_once('\t').ok_or_else(|| malformed("missing TAB"))?;
        let idx: usize = idx.trim().parse().map_err(|_| malformed("bad subset index"))?;
        let tokens = toks
            .split_ascii_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| malformed("bad token id")))
            .collect::<Result<Vec<_>>>()?;
        if tokens.is_empty() {
            return Err(malformed("caption has no tokens"));
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab_size });
        }
        out.push((idx, tokens));
    }

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (idx, _) in &out {
        *counts.entry(*idx).or_default() += 1;
    }
    if let Some((_, &expected)) = counts.iter().next() {
        if let Some((&subset, &got)) = counts.iter().find(|(_, &c)| c != expected) {
            return Err(Error::UnevenK {
                subset,
                expected,
                got,
            });
        }
    }
    Ok(out)
}

pub fn write_captions(path: impl AsRef<Path>, captions: &[(usize, Vec<usize>)]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for (idx, toks) in captions {
        s.push_str(&idx.to_string());
        s.push('\t');
        let toks: Vec<String> = toks.iter().map(|t| t.to_string()).collect();
        s.push_str(&toks.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_vocab(path: impl AsRef<Path>, vocab: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in vocab {
        writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// One integer label per line.
pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let s: String = labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::MalformedLine {
                line: i + 1,
                reason: "bad label".into(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub features: PathBuf,
    pub captions: PathBuf,
    pub vocab: PathBuf,
    pub k: usize,
    pub split: Split,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::MalformedLine {
                line: i + 1,
                reason: "expected key=value".into(),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| {
            kv.get(key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("manifest is missing `{key}`")))
        };
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let k = get("k")?
            .parse()
            .map_err(|_| Error::Config("manifest `k` is not an integer".into()))?;
        Ok(Self {
            features: resolve(get("features")?),
            captions: resolve(get("captions")?),
            vocab: resolve(get("vocab")?),
            k,
            split: get("split")?.parse()?,
        })
    }

    /// Writes the manifest with paths as given (relative paths stay relative).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = format!(
            "features={}\ncaptions={}\nvocab={}\nk={}\nsplit={}\n",
            self.features.display(),
            self.captions.display(),
            self.vocab.display(),
            self.k,
            self.split
        );
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let vocab = load_vocab(&self.vocab)?;
        let features = load_features(&self.features)?;
        let captions = load_captions(&self.captions, vocab.len())?;
        let ds = Dataset::from_parts(&features, captions, vocab.len(), self.split)?;
        if ds.k() != self.k {
            return Err(Error::UnevenK {
                subset: 0,
                expected: self.k,
                got: ds.k(),
            });
        }
        Ok(ds)
    }
}
