//! Line-oriented text header plus a little-endian f32 blob, shared by model
//! and dataset files.
//!
//! ```text
//! FLEXPE-MODEL 1                      magic and version
//! name glyph-mlp                      free-form metadata lines
//! tensor fc1.w shape=64x32 offset=0 scale=0.0123
//! digest sha256 <hex of the blob>
//! end
//! <blob>
//! ```
//!
//! Tensor offsets are byte offsets into the blob (4-byte aligned), data is
//! row-major f32. `scale` is optional. The header ends at the first line
//! reading `end`; every byte after its newline is blob.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContainerError {
    #[error("header line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("digest mismatch: header says {expected}, blob hashes to {actual}")]
    Digest { expected: String, actual: String },
    #[error("tensor '{name}' ({bytes} bytes at offset {offset}) lies outside the {blob}-byte blob")]
    Bounds {
        name: String,
        offset: usize,
        bytes: usize,
        blob: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub scale: Option<f64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not fill its shape");
        Self {
            shape,
            scale: None,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub version: u32,
    /// Metadata lines, tokenized, in file order (tensor/digest/end lines excluded).
    pub meta: Vec<(usize, Vec<String>)>,
    pub tensors: BTreeMap<String, Tensor>,
    pub digest: String,
}

pub fn parse_shape(s: &str) -> Option<Vec<usize>> {
    let dims: Option<Vec<usize>> = s.split('x').map(|d| d.parse().ok().filter(|&n| n > 0)).collect();
    dims.filter(|d| !d.is_empty())
}

pub fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Container {
    pub fn parse(bytes: &[u8], magic: &str) -> Result<Self, ContainerError> {
        let err = |line: usize, msg: String| ContainerError::Parse { line, msg };
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
                return Err(err(lines.len() + 1, "header has no 'end' line".into()));
            };
            let text = std::str::from_utf8(&rest[..nl])
                .map_err(|_| err(lines.len() + 1, "header is not UTF-8".into()))?
                .trim_end_matches('\r')
                .to_string();
            pos += nl + 1;
            if text.trim() == "end" {
                break;
            }
            lines.push(text);
        }
        let blob = &bytes[pos..];
        let first = lines.first().ok_or_else(|| err(1, "empty header".into()))?;
        let mut head = first.split_whitespace();
        if head.next() != Some(magic) {
            return Err(err(1, format!("expected magic '{magic}', got '{first}'")));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(1, "missing format version".into()))?;
        if version != 1 {
            return Err(err(1, format!("unsupported version {version}")));
        }
        let mut meta = Vec::new();
        let mut tensors = BTreeMap::new();
        let mut digest = None;
        for (i, line) in lines.iter().enumerate().skip(1) {
            let n = i + 1;
            let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            match toks.first().map(String::as_str) {
                None => continue,
                Some(t) if t.starts_with('#') => continue,
                Some("digest") => {
                    if toks.len() != 3 || toks[1] != "sha256" {
                        return Err(err(n, "expected 'digest sha256 <hex>'".into()));
                    }
                    digest = Some(toks[2].to_ascii_lowercase());
                }
                Some("tensor") => {
                    let (name, t) = parse_tensor_line(&toks, blob).map_err(|m| match m {
                        TensorLineError::Parse(msg) => err(n, msg),
                        TensorLineError::Bounds(e) => e,
                    })?;
                    if tensors.insert(name.clone(), t).is_some() {
                        return Err(err(n, format!("tensor '{name}' defined twice")));
                    }
                }
                Some(_) => meta.push((n, toks)),
            }
        }
        let expected = digest.ok_or_else(|| err(lines.len(), "missing digest line".into()))?;
        let actual = sha256_hex(blob);
        if expected != actual {
            return Err(ContainerError::Digest { expected, actual });
        }
        Ok(Self {
            kind: magic.to_string(),
            version,
            meta,
            tensors,
            digest: actual,
        })
    }

    /// Serializes with tensors laid out in the given order.
    pub fn write(magic: &str, meta: &[String], tensors: &[(&str, &Tensor)]) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut tensor_lines = Vec::new();
        for (name, t) in tensors {
            let mut line = format!("tensor {name} shape={} offset={}", shape_string(&t.shape), blob.len());
            if let Some(s) = t.scale {
                line += &format!(" scale={s:e}");
            }
            tensor_lines.push(line);
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = format!("{magic} 1\n");
        for m in meta {
            out += m;
            out.push('\n');
        }
        for l in tensor_lines {
            out += &l;
            out.push('\n');
        }
        out += &format!("digest sha256 {}\nend\n", sha256_hex(&blob));
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(&blob);
        bytes
    }
}

enum TensorLineError {
    Parse(String),
    Bounds(ContainerError),
}

fn parse_tensor_line(toks: &[String], blob: &[u8]) -> Result<(String, Tensor), TensorLineError> {
    let p = |m: String| TensorLineError::Parse(m);
    let name = toks.get(1).ok_or_else(|| p("tensor needs a name".into()))?.clone();
    let (mut shape, mut offset, mut scale) = (None, None, None);
    for kv in &toks[2..] {
        let (k, v) = kv.split_once('=').ok_or_else(|| p(format!("expected key=value, got '{kv}'")))?;
        match k {
            "shape" => shape = Some(parse_shape(v).ok_or_else(|| p(format!("bad shape '{v}'")))?),
            "offset" => offset = Some(v.parse::<usize>().map_err(|_| p(format!("bad offset '{v}'")))?),
            "scale" => {
                let s: f64 = v.parse().map_err(|_| p(format!("bad scale '{v}'")))?;
                if !(s.is_finite() && s > 0.0) {
                    return Err(p(format!("scale of '{name}' must be positive, got {v}")));
                }
                scale = Some(s);
            }
            _ => return Err(p(format!("unknown tensor field '{k}'"))),
        }
    }
    let shape = shape.ok_or_else(|| p(format!("tensor '{name}' has no shape")))?;
    let offset = offset.ok_or_else(|| p(format!("tensor '{name}' has no offset")))?;
    if offset % 4 != 0 {
        return Err(p(format!("offset {offset} of '{name}' is not 4-byte aligned")));
    }
    let bytes = shape.iter().product::<usize>() * 4;
    let raw = blob.get(offset..offset + bytes).ok_or_else(|| {
        TensorLineError::Bounds(ContainerError::Bounds {
            name: name.clone(),
            offset,
            bytes,
            blob: blob.len(),
        })
    })?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, Tensor { shape, scale, data }))
}
