//! JSONL pair ingestion and u16 token shards.

use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capgen::tokenizer::tokenize;
use crate::checkpoint::{read_container, write_container};
use crate::error::{ensure, Error, Result};
use crate::vlm::{ImageInput, Origin, PairRecord};
use crate::vq::{TokenGrid, ToyImage};

pub const SHARD_FORMAT: &str = "synthpair-tokens-v1";
pub const SHARD_RECORDS: usize = 10_000;
/// Ingest fails outright when more than this fraction of lines is rejected.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShardHeader {
    pub format: String,
    /// Tokens per grid.
    pub n: usize,
    pub k: usize,
    pub count: usize,
}

/// Writes all of `grids` into one shard container at `path`.
pub fn write_token_shard(path: &Path, grids: &[TokenGrid], k: usize) -> Result<()> {
    ensure!(
        k < u16::MAX as usize,
        Config,
        "codebook of {k} does not fit u16 packing"
    );
    let n = grids.first().map_or(0, TokenGrid::len);
    let mut payload = Vec::with_capacity(grids.len() * n * 2);
    for g in grids {
        ensure!(g.len() == n, Dimension, "grids in one shard must share a size");
        g.check_finalized(k)?;
        for &id in g.ids() {
            payload.extend_from_slice(&(id as u16).to_le_bytes());
        }
    }
    let header = ShardHeader {
        format: SHARD_FORMAT.into(),
        n,
        k,
        count: grids.len(),
    };
    write_container(path, &header, &payload)
}

/// Writes grids into `dir/<stem>-00000.bin`, ... with at most `per_shard`
/// grids each. Returns the shard paths in order.
pub fn write_token_shards(
    dir: &Path,
    stem: &str,
    grids: &[TokenGrid],
    k: usize,
    per_shard: usize,
) -> Result<Vec<PathBuf>> {
    ensure!(per_shard > 0, Config, "shard size must be positive");
    let n = grids.first().map_or(0, TokenGrid::len);
    ensure!(
        grids.iter().all(|g| g.len() == n),
        Dimension,
        "grids in one shard set must share a size"
    );
    let mut paths = Vec::new();
    for (i, chunk) in grids.chunks(per_shard).enumerate() {
        let path = dir.join(format!("{stem}-{i:05}.bin"));
        write_token_shard(&path, chunk, k)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn read_token_shard(path: &Path) -> Result<(ShardHeader, Vec<TokenGrid>)> {
    let (header, payload) = read_container(path)?;
    let header: ShardHeader = serde_json::from_value(header)?;
    ensure!(
        header.format == SHARD_FORMAT,
        Data,
        "{}: not a token shard",
        path.display()
    );
    ensure!(
        payload.len() == header.count * header.n * 2,
        Data,
        "{}: payload holds {} bytes, header promises {} grids of {}",
        path.display(),
        payload.len(),
        header.count,
        header.n
    );
    let side = (header.n as f64).sqrt().round() as usize;
    ensure!(
        side * side == header.n,
        Data,
        "{}: {} tokens is not a square grid",
        path.display(),
        header.n
    );
    let ids: Vec<u32> = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    let grids = ids
        .chunks(header.n.max(1))
        .take(header.count)
        .map(|c| {
            let g = TokenGrid::new(side, c.to_vec())?;
            g.check_finalized(header.k)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    Ok((header, grids))
}

/// One input line. Exactly one of `image_path` / `token_shard_ref` is set;
/// a shard reference reads `<shard file>#<index>`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PairLine {
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_shard_ref: Option<String>,
    pub origin: Origin,
}

/// Parses and checks one line without touching the filesystem.
pub fn parse_line(line: &str, line_no: usize) -> Result<PairLine> {
    let schema = |msg: String| Error::Schema { line: line_no, msg };
    let p: PairLine = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
    match (&p.image_path, &p.token_shard_ref) {
        (Some(_), Some(_)) => return Err(schema("image_path and token_shard_ref are mutually exclusive".into())),
        (None, None) => return Err(schema("one of image_path or token_shard_ref is required".into())),
        _ => {}
    }
    if p.caption.trim().is_empty() {
        return Err(schema("empty caption".into()));
    }
    Ok(p)
}

#[derive(Clone, Debug)]
pub struct IngestReport {
    pub records: Vec<PairRecord>,
    pub lines: usize,
    /// Line number and reason for every rejected line.
    pub skipped: Vec<(usize, String)>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a pairs file. Bad lines and missing images are skipped and
/// counted; more than 10% skipped fails the whole ingest. Relative paths are
/// resolved against the file's directory.
pub fn ingest(path: &Path) -> Result<IngestReport> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut shards: std::collections::HashMap<PathBuf, Vec<TokenGrid>> = Default::default();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut lines = 0;
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        let no = i + 1;
        let rec = parse_line(&line, no).and_then(|p| {
            let image = if let Some(img) = &p.image_path {
                ImageInput::Pixel(ToyImage::load_png(&resolve(&base, img))?)
            } else {
                let r = p.token_shard_ref.as_deref().unwrap_or_default();
                let (file, idx) = r.rsplit_once('#').ok_or_else(|| Error::Schema {
                    line: no,
                    msg: format!("token_shard_ref {r:?} lacks '#index'"),
                })?;
                let idx: usize = idx.parse().map_err(|_| Error::Schema {
                    line: no,
                    msg: format!("bad shard index in {r:?}"),
                })?;
                let file = resolve(&base, file);
                if !shards.contains_key(&file) {
                    let (_, grids) = read_token_shard(&file)?;
                    shards.insert(file.clone(), grids);
                }
                let grid = shards[&file].get(idx).cloned().ok_or_else(|| Error::Schema {
                    line: no,
                    msg: format!("shard index {idx} out of range"),
                })?;
                ImageInput::Embedding(grid)
            };
            Ok(PairRecord {
                caption: tokenize(&p.caption),
                image,
                origin: p.origin,
            })
        });
        match rec {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{}:{no}: skipped: {e}", path.display());
                skipped.push((no, e.to_string()));
            }
        }
    }
    ensure!(lines > 0, Data, "{}: no pair records", path.display());
    if skipped.len() as f64 > MAX_SKIP_FRACTION * lines as f64 {
        return Err(Error::Schema {
            line: skipped[0].0,
            msg: format!(
                "{} of {lines} lines rejected (limit 10%); first: {}",
                skipped.len(),
                skipped[0].1
            ),
        });
    }
    if !skipped.is_empty() {
        log::warn!("{}: skipped {} of {lines} lines", path.display(), skipped.len());
    }
    Ok(IngestReport {
        records,
        lines,
        skipped,
    })
}
