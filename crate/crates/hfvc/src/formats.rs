//! On-disk formats: mel files, corpus directories, checkpoints and TSV logs.
//!
//! All binary values are little-endian. Floats are written with the shortest
//! representation that parses back to the same value, so every text format
//! round-trips exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hfvc_core::params::ParamStore;
use hfvc_core::seq2seq::{MelGram, PhonemeSequence};
use hfvc_core::synthdata::{Corpus, CorpusSpec, IntensityLevel, Prompt, StyleFactors, Utterance};
use hfvc_core::training::{Checkpoint, MetricLog, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MEL_MAGIC: &[u8; 4] = b"MELS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HFVC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn malformed(path: &Path, what: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {what}", path.display()))
}

/// Cursor over a byte slice that reports truncation as an error.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, String> {
        let len = n.checked_mul(4).ok_or("size overflow")?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<(), String> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.bytes.len() - self.pos))
        }
    }
}

pub fn encode_mel(mel: &MelGram) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * mel.data().len());
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.bands() as u32).to_le_bytes());
    for v in mel.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mel(bytes: &[u8]) -> Result<MelGram, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MEL_MAGIC {
        return Err("bad magic, expected MELS".into());
    }
    let frames = r.u32()? as usize;
    let bands = r.u32()? as usize;
    let data = r.f32s(frames.checked_mul(bands).ok_or("size overflow")?)?;
    r.finish()?;
    MelGram::new(frames, bands, data).map_err(|e| e.to_string())
}

pub fn read_mel(path: &Path) -> CliResult<MelGram> {
    decode_mel(&read_file(path)?).map_err(|e| malformed(path, e))
}

pub fn write_mel(path: &Path, mel: &MelGram) -> CliResult<()> {
    write_file(path, &encode_mel(mel))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    OneShot,
    Prompt,
}

/// One entry of the corpus index in `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<IntensityLevel>,
    pub phonemes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<StyleFactors>,
    /// Mel file relative to the corpus directory; absent for prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mel: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub utterances: Vec<IndexEntry>,
}

fn mel_path(id: &str) -> String {
    format!("mels/{id}.mels")
}

/// Writes `meta.json` and `mels/<id>.mels` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> CliResult<()> {
    let mut entries = Vec::new();
    let mut mels = Vec::new();
    let utterances = corpus
        .train
        .iter()
        .map(|u| (Split::Train, None, u))
        .chain(corpus.one_shot.iter().map(|(l, u)| (Split::OneShot, Some(*l), u)));
    for (split, level, u) in utterances {
        let file = mel_path(&u.id);
        entries.push(IndexEntry {
            id: u.id.clone(),
            split,
            level,
            phonemes: u.phonemes.ids().to_vec(),
            style: Some(u.style),
            mel: Some(file.clone()),
        });
        mels.push((file, &u.mel));
    }
    for p in &corpus.prompts {
        entries.push(IndexEntry {
            id: p.id.clone(),
            split: Split::Prompt,
            level: None,
            phonemes: p.phonemes.ids().to_vec(),
            style: None,
            mel: None,
        });
    }
    let meta = CorpusMeta {
        spec: corpus.spec.clone(),
        seed: corpus.seed,
        utterances: entries,
    };
    let json = serde_json::to_string_pretty(&meta).expect("corpus index serializes");
    write_file(&dir.join("meta.json"), format!("{json}\n").as_bytes())?;
    for (file, mel) in mels {
        write_mel(&dir.join(file), mel)?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> CliResult<Corpus> {
    let meta_path = dir.join("meta.json");
    let meta: CorpusMeta = serde_json::from_str(&read_text(&meta_path)?).map_err(|e| malformed(&meta_path, e))?;
    meta.spec.validate().map_err(|e| malformed(&meta_path, e))?;
    let vocab = meta.spec.vocab;
    let mut corpus = Corpus {
        spec: meta.spec.clone(),
        seed: meta.seed,
        train: Vec::new(),
        one_shot: Vec::new(),
        prompts: Vec::new(),
    };
    for e in meta.utterances {
        let phonemes =
            PhonemeSequence::new(e.phonemes, vocab).map_err(|err| malformed(&meta_path, format!("{}: {err}", e.id)))?;
        if e.split == Split::Prompt {
            corpus.prompts.push(Prompt { id: e.id, phonemes });
            continue;
        }
        let id = e.id.clone();
        let missing = |field: &str| malformed(&meta_path, format!("{id}: missing {field}"));
        let style = e.style.ok_or_else(|| missing("style"))?;
        let file = e.mel.as_deref().ok_or_else(|| missing("mel"))?;
        let path = dir.join(file);
        let mel = read_mel(&path)?;
        if mel.bands() != meta.spec.bands {
            return Err(malformed(
                &path,
                format!("{} bands, corpus has {}", mel.bands(), meta.spec.bands),
            ));
        }
        let utt = Utterance {
            id: e.id,
            phonemes,
            mel,
            style,
        };
        match e.split {
            Split::Train => corpus.train.push(utt),
            Split::OneShot => corpus.one_shot.push((e.level.ok_or_else(|| missing("level"))?, utt)),
            Split::Prompt => unreachable!("handled above"),
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the data block, in floats.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub step: usize,
    pub final_kl: Option<f64>,
    pub final_recon: Option<f64>,
    pub init_seed: u64,
    pub params: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let store = &ckpt.params;
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for id in store.ids() {
        let (r, c) = store.shape(id);
        params.push(TensorEntry {
            name: store.name(id).to_string(),
            shape: [r, c],
            offset,
        });
        offset += r * c;
    }
    let header = CheckpointHeader {
        config: ckpt.config.clone(),
        step: ckpt.step,
        final_kl: ckpt.final_kl,
        final_recon: ckpt.final_recon,
        init_seed: store.seed(),
        params,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in store.tensors() {
        for v in t {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic, expected HFVC".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| "header too large")?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?).map_err(|e| e.to_string())?;
    let total: usize = header.params.iter().map(|p| p.shape[0] * p.shape[1]).sum();
    let data = r.f32s(total)?;
    r.finish()?;
    let mut store = ParamStore::new(header.init_seed);
    for p in &header.params {
        let n = p.shape[0] * p.shape[1];
        let slice = data
            .get(p.offset..p.offset + n)
            .ok_or_else(|| format!("tensor {} out of bounds", p.name))?;
        let values = slice.iter().map(|&v| f64::from(v)).collect();
        store
            .insert(&p.name, p.shape[0], p.shape[1], values)
            .map_err(|e| e.to_string())?;
    }
    let ckpt = Checkpoint {
        config: header.config,
        params: store,
        step: header.step,
        final_kl: header.final_kl,
        final_recon: header.final_recon,
    };
    // Rejects parameter sets that do not fit the configured model.
    ckpt.model().map_err(|e| e.to_string())?;
    Ok(ckpt)
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    decode_checkpoint(&read_file(path)?).map_err(|e| malformed(path, e))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    write_file(path, &encode_checkpoint(ckpt))
}

pub const METRIC_HEADER: &str = "step\tkl\trecon\tbeta\twall_ms";

pub fn metric_log_tsv(log: &MetricLog) -> String {
    let mut out = String::from(METRIC_HEADER);
    out.push('\n');
    for r in log.records() {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.step, r.kl, r.recon, r.beta, r.wall_ms).expect("string write");
    }
    out
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}
