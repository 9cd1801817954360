//! Corpus files.
//!
//! Binary layout (all integers little-endian `u32`, floats little-endian `f64`):
//!
//! ```text
//! BARCORPUS <version> <num_samples> <d_k>\n
//! repeat num_samples times:
//!   id_len, id bytes (UTF-8)
//!   N
//!   num_tokens, token ids...
//!   has_gt (u8), [start, end] when has_gt == 1
//!   N * d_k feature values, row-major
//! ```
//!
//! The JSON-lines alternative starts with a header object
//! `{"format_version", "num_samples", "feature_dim"}` followed by one sample
//! object per line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_corpus, GroundingSample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::extractor::Boundary;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "BARCORPUS";

pub fn save_corpus(samples: &[GroundingSample], path: &Path) -> Result<()> {
    std::fs::write(path, encode_binary(samples)?).map_err(|e| Error::io(path, e))
}

pub fn save_corpus_jsonl(samples: &[GroundingSample], path: &Path) -> Result<()> {
    let dim = samples.first().map_or(0, GroundingSample::feature_dim);
    let mut out = serde_json::to_string(&JsonHeader {
        format_version: CORPUS_FORMAT_VERSION,
        num_samples: samples.len(),
        feature_dim: dim,
    })
    .expect("header serializes");
    out.push('\n');
    for s in samples {
        let rec = JsonSample {
            video_id: s.video_id.clone(),
            query_tokens: s.query_tokens.clone(),
            gt_segment: s.gt_segment.map(|b| [b.start, b.end]),
            features: (0..s.num_clips())
                .map(|r| s.clip_features.row(r).to_vec())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("sample serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads either format, detected from the leading bytes, and validates every
/// sample.
pub fn load_corpus(path: &Path) -> Result<Vec<GroundingSample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let samples = if bytes.starts_with(MAGIC.as_bytes()) {
        decode_binary(&bytes)?
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::parse("byte 0", format!("not UTF-8 text: {e}")))?;
        decode_jsonl(&text)?
    };
    validate_corpus(&samples)?;
    Ok(samples)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Validation(format!("value {v} does not fit the corpus format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_binary(samples: &[GroundingSample]) -> Result<Vec<u8>> {
    let dim = samples.first().map_or(0, GroundingSample::feature_dim);
    let mut out = format!(
        "{MAGIC} {CORPUS_FORMAT_VERSION} {} {dim}\n",
        samples.len()
    )
    .into_bytes();
    for s in samples {
        if s.feature_dim() != dim {
            return Err(Error::Validation(format!(
                "sample {}: feature dim {} differs from corpus dim {dim}",
                s.video_id,
                s.feature_dim()
            )));
        }
        put_u32(&mut out, s.video_id.len())?;
        out.extend_from_slice(s.video_id.as_bytes());
        put_u32(&mut out, s.num_clips())?;
        put_u32(&mut out, s.query_tokens.len())?;
        for &t in &s.query_tokens {
            put_u32(&mut out, t)?;
        }
        match s.gt_segment {
            Some(b) => {
                out.push(1);
                put_u32(&mut out, b.start)?;
                put_u32(&mut out, b.end)?;
            }
            None => out.push(0),
        }
        for v in s.clip_features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                format!("byte offset {}", self.pos),
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

fn decode_binary(bytes: &[u8]) -> Result<Vec<GroundingSample>> {
    let header_end = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::parse("byte offset 0", "header line not terminated"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::parse("byte offset 0", "header is not UTF-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parse_field = |i: usize, name: &str| -> Result<usize> {
        fields
            .get(i)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::parse("byte offset 0", format!("bad header field {name}")))
    };
    if fields.len() != 4 || fields[0] != MAGIC {
        return Err(Error::parse("byte offset 0", format!("malformed header {header:?}")));
    }
    let version = parse_field(1, "version")?;
    if version != CORPUS_FORMAT_VERSION as usize {
        return Err(Error::parse(
            "byte offset 0",
            format!("unsupported format version {version}"),
        ));
    }
    let count = parse_field(2, "sample count")?;
    let dim = parse_field(3, "feature dim")?;

    let mut r = Reader {
        bytes,
        pos: header_end + 1,
    };
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = r.u32("id length")?;
        let id_at = r.pos;
        let video_id = std::str::from_utf8(r.take(id_len, "video id")?)
            .map_err(|_| Error::parse(format!("byte offset {id_at}"), "video id is not UTF-8"))?
            .to_string();
        let n = r.u32("clip count")?;
        let n_tokens = r.u32("token count")?;
        let query_tokens = (0..n_tokens)
            .map(|_| r.u32("token id"))
            .collect::<Result<Vec<_>>>()?;
        let flag_at = r.pos;
        let gt_segment = match r.u8("segment flag")? {
            0 => None,
            1 => Some(Boundary::new(r.u32("segment start")?, r.u32("segment end")?)),
            other => {
                return Err(Error::parse(
                    format!("byte offset {flag_at}"),
                    format!("segment flag must be 0 or 1, got {other}"),
                ))
            }
        };
        let raw = r.take(n * dim * 8, "feature block")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        samples.push(GroundingSample {
            video_id,
            clip_features: Tensor::matrix(n, dim, data)?,
            query_tokens,
            gt_segment,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(
            format!("byte offset {}", r.pos),
            "trailing bytes after last sample",
        ));
    }
    Ok(samples)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHeader {
    format_version: u32,
    num_samples: usize,
    feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSample {
    video_id: String,
    query_tokens: Vec<usize>,
    gt_segment: Option<[usize; 2]>,
    features: Vec<Vec<f64>>,
}

fn decode_jsonl(text: &str) -> Result<Vec<GroundingSample>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::parse("line 1", "empty corpus file"))?;
    let header: JsonHeader = serde_json::from_str(first)
        .map_err(|e| Error::parse("line 1", format!("bad header: {e}")))?;
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::parse(
            "line 1",
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let mut samples = Vec::new();
    for (i, line) in lines {
        let loc = format!("line {}", i + 1);
        let rec: JsonSample =
            serde_json::from_str(line).map_err(|e| Error::parse(loc.clone(), e.to_string()))?;
        if rec.features.iter().any(|r| r.len() != header.feature_dim) {
            return Err(Error::parse(
                loc,
                format!(
                    "sample {}: feature rows must have {} values",
                    rec.video_id, header.feature_dim
                ),
            ));
        }
        let clip_features = Tensor::from_rows(&rec.features)
            .map_err(|e| Error::parse(loc.clone(), e.to_string()))?;
        let clip_features = if rec.features.is_empty() {
            Tensor::zeros(&[0, header.feature_dim])
        } else {
            clip_features
        };
        samples.push(GroundingSample {
            video_id: rec.video_id,
            clip_features,
            query_tokens: rec.query_tokens,
            gt_segment: rec.gt_segment.map(|[s, e]| Boundary::new(s, e)),
        });
    }
    if samples.len() != header.num_samples {
        return Err(Error::parse(
            "end of file",
            format!(
                "header promises {} samples, found {}",
                header.num_samples,
                samples.len()
            ),
        ));
    }
    Ok(samples)
}
