//! Corpus files: a JSON Lines manifest plus a binary feature file.
//!
//! The feature file sits next to the manifest with the extension `.sovf`.
//! Its header is the magic `SOVF` followed by version, n, m, d_v and C as
//! little-endian u32. Each example stores, at the byte offset recorded in
//! its manifest line, n·m·d_v features, n·m·4 boxes and n·m·C class
//! probabilities as little-endian f32.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sovmas_core::data::{Corpus, FeatureDims, MultimodalExample};

pub const FEATURE_MAGIC: &[u8; 4] = b"SOVF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 24;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{file}: {source}")]
    Io { file: String, source: std::io::Error },
    #[error("{file}:{line}: field `{field}`: {detail}")]
    Record { file: String, line: usize, field: String, detail: String },
    #[error("{file}: {detail}")]
    Header { file: String, detail: String },
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub lang: String,
    pub article_ids: Vec<u32>,
    pub summary_ids: Vec<u32>,
    pub n_images: usize,
    pub feat_offset: u64,
}

pub fn feature_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("sovf")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { file: path.display().to_string(), source }
}

fn example_floats(d: &FeatureDims) -> usize {
    d.slots() * (d.d_visual + 4 + d.classes)
}

/// Writes the manifest and feature file through temporary names renamed
/// into place once complete.
pub fn write_corpus(corpus: &Corpus, manifest: &Path) -> Result<(), CorpusError> {
    let features = feature_path(manifest);
    let tmp_m = manifest.with_extension("jsonl.tmp");
    let tmp_f = features.with_extension("sovf.tmp");
    {
        let mut mw = BufWriter::new(fs::File::create(&tmp_m).map_err(io_err(manifest))?);
        let mut fw = BufWriter::new(fs::File::create(&tmp_f).map_err(io_err(&features))?);
        let d = corpus.dims;
        fw.write_all(FEATURE_MAGIC).map_err(io_err(&features))?;
        for v in [FEATURE_VERSION, d.n_images as u32, d.regions as u32, d.d_visual as u32, d.classes as u32] {
            fw.write_all(&v.to_le_bytes()).map_err(io_err(&features))?;
        }
        let mut offset = HEADER_BYTES;
        for ex in &corpus.examples {
            let rec = ManifestRecord {
                id: ex.id.clone(),
                lang: ex.lang.clone(),
                article_ids: ex.article.clone(),
                summary_ids: ex.summary.clone(),
                n_images: ex.n_images,
                feat_offset: offset,
            };
            let line = serde_json::to_string(&rec).expect("manifest records serialize");
            writeln!(mw, "{line}").map_err(io_err(manifest))?;
            let mut bytes = Vec::with_capacity(example_floats(&d) * 4);
            for v in ex.features.iter().chain(&ex.boxes).chain(&ex.classes) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fw.write_all(&bytes).map_err(io_err(&features))?;
            offset += bytes.len() as u64;
        }
        mw.flush().map_err(io_err(manifest))?;
        fw.flush().map_err(io_err(&features))?;
    }
    fs::rename(&tmp_f, &features).map_err(io_err(&features))?;
    fs::rename(&tmp_m, manifest).map_err(io_err(manifest))?;
    Ok(())
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<FeatureDims, CorpusError> {
    let mut h = [0u8; HEADER_BYTES as usize];
    r.read_exact(&mut h).map_err(|_| CorpusError::Header {
        file: path.display().to_string(),
        detail: "truncated header".into(),
    })?;
    if &h[..4] != FEATURE_MAGIC {
        return Err(CorpusError::Header { file: path.display().to_string(), detail: "bad magic".into() });
    }
    let u = |k: usize| u32::from_le_bytes([h[4 * k], h[4 * k + 1], h[4 * k + 2], h[4 * k + 3]]) as usize;
    if u(1) as u32 != FEATURE_VERSION {
        return Err(CorpusError::Header { file: path.display().to_string(), detail: format!("unsupported version {}", u(1)) });
    }
    let dims = FeatureDims { n_images: u(2), regions: u(3), d_visual: u(4), classes: u(5) };
    if [dims.n_images, dims.regions, dims.d_visual, dims.classes].contains(&0) {
        return Err(CorpusError::Header { file: path.display().to_string(), detail: "zero extent in header".into() });
    }
    Ok(dims)
}

/// Loads and validates a corpus. Token ids are checked against
/// `vocab_size` when given. An empty manifest yields an empty corpus whose
/// dimensions come from the feature file header when present.
pub fn load_corpus(manifest: &Path, vocab_size: Option<usize>) -> Result<Corpus, CorpusError> {
    let file = manifest.display().to_string();
    let reader = BufReader::new(fs::File::open(manifest).map_err(io_err(manifest))?);
    let lines: Vec<(usize, String)> = reader
        .lines()
        .enumerate()
        .map(|(k, l)| l.map(|l| (k + 1, l)))
        .collect::<Result<_, _>>()
        .map_err(io_err(manifest))?;
    let lines: Vec<_> = lines.into_iter().filter(|(_, l)| !l.trim().is_empty()).collect();
    let fpath = feature_path(manifest);
    if lines.is_empty() && !fpath.exists() {
        return Ok(Corpus::new(FeatureDims { n_images: 1, regions: 1, d_visual: 1, classes: 1 }));
    }
    let mut fr = BufReader::new(fs::File::open(&fpath).map_err(io_err(&fpath))?);
    let dims = read_header(&fpath, &mut fr)?;
    let flen = fs::metadata(&fpath).map_err(io_err(&fpath))?.len();
    let per = example_floats(&dims);
    let mut corpus = Corpus::new(dims);
    for (line, text) in lines {
        let rec_err = |field: &str, detail: String| CorpusError::Record {
            file: file.clone(),
            line,
            field: field.into(),
            detail,
        };
        let rec: ManifestRecord = serde_json::from_str(&text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("missing field") || msg.starts_with("unknown field"))
                .unwrap_or("record")
                .to_string();
            rec_err(&field, msg)
        })?;
        if rec.feat_offset < HEADER_BYTES || rec.feat_offset + (per as u64) * 4 > flen {
            return Err(rec_err("feat_offset", format!("{} is outside the feature file", rec.feat_offset)));
        }
        fr.seek(SeekFrom::Start(rec.feat_offset)).map_err(io_err(&fpath))?;
        let mut bytes = vec![0u8; per * 4];
        fr.read_exact(&mut bytes).map_err(io_err(&fpath))?;
        let mut floats = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let slots = dims.slots();
        let ex = MultimodalExample {
            id: rec.id,
            lang: rec.lang,
            article: rec.article_ids,
            summary: rec.summary_ids,
            n_images: rec.n_images,
            features: floats.by_ref().take(slots * dims.d_visual).collect(),
            boxes: floats.by_ref().take(slots * 4).collect(),
            classes: floats.collect(),
        };
        ex.validate(&dims, vocab_size.unwrap_or(u32::MAX as usize + 1)).map_err(|e| {
            let msg = match e {
                sovmas_core::Error::Invalid(m) => m,
                other => other.to_string(),
            };
            let (field, detail) = msg.split_once(": ").unwrap_or(("record", msg.as_str()));
            let field = match field {
                "classes" => "q".to_string(),
                f if f.starts_with("classes[") => format!("q{}", &f["classes".len()..]),
                f => f.to_string(),
            };
            rec_err(&field, detail.to_string())
        })?;
        corpus.examples.push(ex);
    }
    Ok(corpus)
}
