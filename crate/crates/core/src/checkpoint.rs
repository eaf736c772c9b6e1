//! Single-file checkpoint container.
//!
//! Layout (all text lines end in `\n`):
//!
//! ```text
//! biaffine-checkpoint <format_version>
//! [config] <line count>
//! key=value ...
//! [vocab] <line count>
//! ... vocabulary text ...
//! [history] <line count>
//! epoch<TAB>train_loss<TAB>dev_uas<TAB>dev_las ...
//! [params] <count>
//! <name><TAB><dim>x<dim>... ...
//! [blob] <byte length>
//! <little-endian f64 values of every parameter, in manifest order>
//! sha256 <hex digest of every preceding byte>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tensor};
use crate::model::{ModelParams, Parser};
use crate::trainer::{Checkpoint, EpochRecord, Result, TrainConfig, TrainError};
use crate::vocab::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "biaffine-checkpoint";

fn corrupt(message: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(message.into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn section(out: &mut Vec<u8>, name: &str, body: &str) {
    let lines = body.matches('\n').count();
    out.extend_from_slice(format!("[{name}] {lines}\n").as_bytes());
    out.extend_from_slice(body.as_bytes());
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = format!("{MAGIC} {FORMAT_VERSION}\n").into_bytes();
    section(&mut out, "config", &ck.config.to_text());
    section(&mut out, "vocab", &ck.parser.vocab.to_text());
    let mut history = String::new();
    for r in &ck.history {
        let _ = writeln!(history, "{}\t{}\t{}\t{}", r.epoch, r.train_loss, r.dev_uas, r.dev_las);
    }
    section(&mut out, "history", &history);
    let store = &ck.parser.params.store;
    let mut manifest = String::new();
    for p in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "{}\t{}", p.name, dims.join("x"));
    }
    out.extend_from_slice(format!("[params] {}\n", store.len()).as_bytes());
    out.extend_from_slice(manifest.as_bytes());
    let blob_len: usize = store.iter().map(|p| p.value.len() * 8).sum();
    out.extend_from_slice(format!("[blob] {blob_len}\n").as_bytes());
    for p in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = hex(&Sha256::digest(&out));
    out.extend_from_slice(format!("sha256 {digest}\n").as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("unexpected end of file"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("header is not valid UTF-8"))
    }

    fn header(&mut self, name: &str) -> Result<usize> {
        let line = self.line()?;
        let tag = format!("[{name}] ");
        line.strip_prefix(&tag).and_then(|n| n.parse().ok()).ok_or_else(|| corrupt(format!("expected section [{name}], found {line:?}")))
    }

    fn section(&mut self, name: &str) -> Result<String> {
        let n = self.header(name)?;
        let mut body = String::new();
        for _ in 0..n {
            body.push_str(self.line()?);
            body.push('\n');
        }
        Ok(body)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt("parameter blob is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| corrupt(format!("bad number {s:?}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    // verify the trailer before trusting any content
    let trailer_len = "sha256 ".len() + 64 + 1;
    if bytes.len() < trailer_len {
        return Err(corrupt("missing checksum trailer"));
    }
    let body_end = bytes.len() - trailer_len;
    let trailer = std::str::from_utf8(&bytes[body_end..]).map_err(|_| corrupt("missing checksum trailer"))?;
    let expected = trailer.strip_prefix("sha256 ").and_then(|t| t.strip_suffix('\n')).ok_or_else(|| corrupt("missing checksum trailer"))?;
    let actual = hex(&Sha256::digest(&bytes[..body_end]));
    if expected != actual {
        return Err(corrupt("checksum mismatch (file is truncated or corrupted)"));
    }

    let mut r = Reader { bytes: &bytes[..body_end], pos: 0 };
    let first = r.line()?;
    let version = first.strip_prefix(MAGIC).map(str::trim).ok_or_else(|| corrupt("not a checkpoint file"))?;
    let version: u32 = version.parse().map_err(|_| corrupt(format!("bad format version {version:?}")))?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
    }
    let config = TrainConfig::from_text(&r.section("config")?)?;
    let vocab = Vocabulary::from_text(&r.section("vocab")?)?;
    let mut history = Vec::new();
    for line in r.section("history")?.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(corrupt(format!("bad history row {line:?}")));
        }
        history.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| corrupt(format!("bad epoch {:?}", f[0])))?,
            train_loss: parse_f64(f[1])?,
            dev_uas: parse_f64(f[2])?,
            dev_las: parse_f64(f[3])?,
        });
    }
    let count = r.header("params")?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = r.line()?;
        let (name, dims) = line.split_once('\t').ok_or_else(|| corrupt(format!("bad manifest row {line:?}")))?;
        let shape =
            dims.split('x').map(|d| d.parse::<usize>().map_err(|_| corrupt(format!("bad shape {dims:?}")))).collect::<Result<Vec<_>>>()?;
        manifest.push((name.to_owned(), shape));
    }
    let blob_len = r.header("blob")?;
    let declared: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>() * 8).sum();
    if declared != blob_len {
        return Err(corrupt("blob length disagrees with the manifest"));
    }
    let mut store = ParamStore::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| corrupt(e.to_string()))?;
        store.add(name, tensor);
    }
    if r.pos != r.bytes.len() {
        return Err(corrupt("trailing bytes after parameter blob"));
    }
    let params = ModelParams::with_store(&config.dims, &vocab, store).map_err(corrupt)?;
    Ok(Checkpoint { parser: Parser { params, vocab }, config, history })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_dims, toy_treebank};
    use crate::trainer::train;

    fn trained() -> Checkpoint {
        let config = TrainConfig { dims: tiny_dims(), min_word_freq: 1, max_epochs: 2, ..TrainConfig::default() };
        let tb = toy_treebank();
        train(&config, &tb, &tb).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = trained();
        let bytes = to_bytes(&ck);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let bytes = to_bytes(&trained());
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(TrainError::Checkpoint(_))), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        let k = flipped.len() - 100;
        flipped[k] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(TrainError::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let bytes = to_bytes(&trained());
        let text_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut body = format!("{MAGIC} 99").into_bytes();
        body.extend_from_slice(&bytes[text_end..]);
        let body_end = body.len() - (64 + 8);
        body.truncate(body_end);
        let digest = hex(&Sha256::digest(&body));
        body.extend_from_slice(format!("sha256 {digest}\n").as_bytes());
        let err = from_bytes(&body).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }
}
