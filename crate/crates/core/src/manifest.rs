//! JSON-lines corpus manifests.
//!
//! One record per line: `{"clean": path, "coded": path | "surrogate:<preset>",
//! "split": "train" | "val" | "test"}`. Relative paths resolve against the
//! manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::degrade::Preset;
use crate::dsp::{write_wav, WavEncoding};
use crate::error::{Error, Result};
use crate::synth::{synth_utterance, SynthStyle};

const SURROGATE_PREFIX: &str = "surrogate:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidConfig(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodedSource {
    File(PathBuf),
    /// Synthesized from the clean file on ingestion.
    Surrogate(Preset),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// Absolute (or caller-relative) path after resolution.
    pub clean: PathBuf,
    pub coded: CodedSource,
    pub split: Split,
    /// Preset that produced a coded file, when known.
    pub preset: Option<Preset>,
}

impl Record {
    /// Grouping key for reports: the preset name, or `file` when unknown.
    pub fn source_label(&self) -> String {
        match (&self.coded, self.preset) {
            (&CodedSource::Surrogate(p), _) | (&CodedSource::File(_), Some(p)) => p.to_string(),
            (CodedSource::File(_), None) => "file".into(),
        }
    }

    /// Utterance identifier used in reports: the clean file's stem.
    pub fn id(&self) -> String {
        self.clean
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.clean.display().to_string())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    clean: String,
    coded: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preset: Option<Preset>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<Record>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn relative_to(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base, path)
    }

    /// Parses JSON lines; `origin` only labels errors. Blank lines are skipped.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Manifest {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let coded = match raw.coded.strip_prefix(SURROGATE_PREFIX) {
                Some(p) => CodedSource::Surrogate(p.parse().map_err(|e: Error| err(e.to_string()))?),
                None => CodedSource::File(resolve(base, &raw.coded)),
            };
            records.push(Record {
                clean: resolve(base, &raw.clean),
                coded,
                split: raw.split,
                preset: raw.preset,
            });
        }
        if records.is_empty() {
            return Err(Error::Empty(format!("manifest {} has no records", origin.display())));
        }
        Ok(Self { records })
    }

    /// Serializes with paths written relative to `base` where possible.
    pub fn to_jsonl(&self, base: &Path) -> String {
        let mut out = String::new();
        for r in &self.records {
            let raw = RawRecord {
                clean: relative_to(base, &r.clean),
                coded: match &r.coded {
                    CodedSource::File(p) => relative_to(base, p),
                    CodedSource::Surrogate(p) => format!("{SURROGATE_PREFIX}{p}"),
                },
                split: r.split,
                preset: r.preset,
            };
            out.push_str(&serde_json::to_string(&raw).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        std::fs::write(path, self.to_jsonl(base)).map_err(|e| Error::io(path, e))
    }

    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// The records of `split`, or an error naming the missing split.
    pub fn require(&self, split: Split) -> Result<Vec<&Record>> {
        let v = self.split(split);
        if v.is_empty() {
            Err(Error::Empty(format!("manifest has no '{split}' records")))
        } else {
            Ok(v)
        }
    }
}

/// Layout of a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub style: SynthStyle,
    pub preset: Preset,
    pub duration_s: f64,
    pub seed: u64,
}

/// Writes seeded clean utterances to `dir` and returns (and saves) a
/// manifest pairing each with a surrogate directive.
pub fn write_synthetic_corpus(dir: &Path, corpus: &SynthCorpus) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = std::iter::repeat_n(Split::Train, corpus.train)
        .chain(std::iter::repeat_n(Split::Val, corpus.val))
        .chain(std::iter::repeat_n(Split::Test, corpus.test));
    let style = match corpus.style {
        SynthStyle::A => "a",
        SynthStyle::B => "b",
    };
    let mut records = Vec::new();
    for (i, split) in splits.enumerate() {
        let buf = synth_utterance(corpus.seed.wrapping_mul(1_000_003).wrapping_add(i as u64), corpus.style, corpus.duration_s)?;
        let path = dir.join(format!("utt_{style}_{i:04}.wav"));
        write_wav(&path, &buf, WavEncoding::Float32)?;
        records.push(Record {
            clean: path,
            coded: CodedSource::Surrogate(corpus.preset),
            split,
            preset: None,
        });
    }
    let manifest = Manifest { records };
    manifest.save(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let text = r#"{"clean": "a/x.wav", "coded": "surrogate:q_mid", "split": "train"}

{"clean": "/abs/y.wav", "coded": "coded/y.wav", "split": "test"}
"#;
        let m = Manifest::parse(text, Path::new("/data"), Path::new("m.jsonl")).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].clean, PathBuf::from("/data/a/x.wav"));
        assert_eq!(m.records[0].coded, CodedSource::Surrogate(Preset::QMid));
        assert_eq!(m.records[1].coded, CodedSource::File(PathBuf::from("/data/coded/y.wav")));
        assert_eq!(m.records[1].clean, PathBuf::from("/abs/y.wav"));
        assert_eq!(m.split(Split::Test).len(), 1);
        assert!(m.require(Split::Val).is_err());
        assert_eq!(m.records[0].id(), "x");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "{\"clean\": \"a.wav\", \"coded\": \"surrogate:q_none\", \"split\": \"train\"}\n";
        match Manifest::parse(text, Path::new(""), Path::new("m.jsonl")) {
            Err(Error::Manifest { line, message, .. }) => {
                assert_eq!(line, 1);
                assert!(message.contains("q_none"));
            }
            other => panic!("{other:?}"),
        }
        let text = "{\"clean\": \"a.wav\", \"coded\": \"b.wav\", \"split\": \"dev\"}";
        assert!(matches!(
            Manifest::parse(text, Path::new(""), Path::new("m")),
            Err(Error::Manifest { line: 1, .. })
        ));
        assert!(matches!(Manifest::parse("\n", Path::new(""), Path::new("m")), Err(Error::Empty(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let text = "{\"clean\":\"x.wav\",\"coded\":\"surrogate:q_low\",\"split\":\"val\"}\n{\"clean\":\"y.wav\",\"coded\":\"c/y.wav\",\"split\":\"train\"}\n";
        let m = Manifest::parse(text, Path::new("/d"), Path::new("m")).unwrap();
        assert_eq!(m.to_jsonl(Path::new("/d")), text);
    }

    #[test]
    fn synthetic_corpus_is_reproducible() {
        let corpus = SynthCorpus {
            train: 2,
            val: 1,
            test: 1,
            style: SynthStyle::B,
            preset: Preset::QHigh,
            duration_s: 0.25,
            seed: 3,
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_synthetic_corpus(a.path(), &corpus).unwrap();
        write_synthetic_corpus(b.path(), &corpus).unwrap();
        assert_eq!(ma.records.len(), 4);
        assert_eq!(ma.split(Split::Train).len(), 2);
        for r in &ma.records {
            let name = r.clean.file_name().unwrap();
            assert_eq!(std::fs::read(&r.clean).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        let reloaded = Manifest::load(&a.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reloaded, ma);
    }
}
