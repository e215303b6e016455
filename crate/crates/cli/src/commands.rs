use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use postmask_core::degrade::{surrogate_code, DegradeProfile, Preset};
use postmask_core::dsp::{read_wav, write_wav, SignalRole, WavEncoding};
use postmask_core::manifest::{write_synthetic_corpus, CodedSource, Manifest, Record, Split, SynthCorpus};
use postmask_core::mask::{compute_irm, oracle_sweep, MaskHistogram, OracleSystem};
use postmask_core::nn::{write_training_log, ModelKind, ModelSpec};
use postmask_core::pipeline::{
    analyze, load_split, par_map, preprocess, score, surrogate_seed, train_postfilter, Pair, PostFilter,
};
use postmask_core::synth::SynthStyle;
use postmask_core::{Error, Result};
use serde::Serialize;

use crate::config::{write_header, FileConfig, RunHeader};
use crate::Common;

fn manifest(c: &Common) -> Result<Manifest> {
    let path = c
        .manifest
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--manifest is required for this command".into()))?;
    Manifest::load(path)
}

fn prepare(c: &Common, command: &str, params: &impl Serialize) -> Result<FileConfig> {
    let cfg = FileConfig::load(c.config.as_deref())?;
    std::fs::create_dir_all(&c.out_dir).map_err(|e| Error::io(&c.out_dir, e))?;
    write_header(
        &c.out_dir,
        &RunHeader {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: c.seed,
            jobs: c.jobs,
            manifest: c.manifest.as_deref(),
            config_file: c.config.as_deref(),
            pipeline: &cfg.pipeline,
            parameters: params,
        },
    )?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// Restrict to one split (default: whole manifest).
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
}

pub fn stats(c: &Common, a: &StatsArgs) -> Result<()> {
    let cfg = prepare(c, "stats", a)?;
    let m = manifest(c)?;
    let pairs = load_split(&m, a.split, &cfg.pipeline, c.seed, c.jobs)?;
    let hists = par_map(&pairs, c.jobs, |p| {
        let an = analyze(p, &cfg.pipeline)?;
        let irm = compute_irm(&an.clean_mag, &an.coded_mag, cfg.pipeline.mask.gamma)?;
        let mut h = MaskHistogram::default();
        h.add(&irm);
        Ok((p.source.clone(), h))
    })?;
    // sources in first-appearance order
    let mut groups: Vec<(String, MaskHistogram)> = Vec::new();
    for (source, h) in hists {
        match groups.iter_mut().find(|(s, _)| *s == source) {
            Some((_, acc)) => acc.merge(&h),
            None => groups.push((source, h)),
        }
    }
    let labels = MaskHistogram::labels();
    let mut csv = String::from("source,bucket,count,fraction\n");
    let mut table = format!("{:<8}", "source");
    for l in labels {
        let _ = write!(table, "{l:>12}");
    }
    table.push('\n');
    for (source, h) in &groups {
        let fr = h.fractions();
        let _ = write!(table, "{source:<8}");
        for (k, l) in labels.iter().enumerate() {
            let _ = writeln!(csv, "{source},{l},{},{:.9}", h.counts[k], fr[k]);
            let _ = write!(table, "{:>11.2}%", 100.0 * fr[k]);
        }
        table.push('\n');
    }
    write_text(&c.out_dir.join("stats.csv"), &csv)?;
    print!("{table}");
    Ok(())
}

fn parse_bound(s: &str) -> std::result::Result<f64, String> {
    match s {
        "inf" | "∞" => Ok(f64::INFINITY),
        _ => s
            .parse::<f64>()
            .ok()
            .filter(|b| *b > 0.0)
            .ok_or_else(|| format!("bound must be positive or 'inf', got '{s}'")),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    /// Mask bounds; `inf` leaves the mask unbounded.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,10,inf", value_parser = parse_bound)]
    bounds: Vec<f64>,
    /// Also run the 64-coefficient cepstral oracle.
    #[arg(long)]
    cepstrum: bool,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

pub fn oracle(c: &Common, a: &OracleArgs) -> Result<()> {
    let cfg = prepare(c, "oracle", a)?;
    let m = manifest(c)?;
    let pairs = load_split(&m, a.split, &cfg.pipeline, c.seed, c.jobs)?;
    let rows = par_map(&pairs, c.jobs, |p| {
        oracle_sweep(&p.clean, &p.coded, &a.bounds, cfg.pipeline.mask.gamma, a.cepstrum)
    })?;
    let mut csv = String::from("utterance,source,system,lsd_db,lsd_resynth_db,seg_snr_db\n");
    for (p, rs) in pairs.iter().zip(&rows) {
        for r in rs {
            let _ = writeln!(
                csv,
                "{},{},{},{:.6},{:.6},{:.6}",
                p.id, p.source, r.system, r.lsd_db, r.lsd_resynth_db, r.seg_snr_db
            );
        }
    }
    println!("{:<14}{:>10}{:>16}{:>12}", "system", "lsd_db", "lsd_resynth_db", "seg_snr_db");
    for k in 0..rows[0].len() {
        let system: OracleSystem = rows[0][k].system;
        let col = |f: fn(&postmask_core::mask::OracleRow) -> f64| mean(rows.iter().map(|r| f(&r[k])));
        let (l, lr, s) = (col(|r| r.lsd_db), col(|r| r.lsd_resynth_db), col(|r| r.seg_snr_db));
        let _ = writeln!(csv, "mean,all,{system},{l:.6},{lr:.6},{s:.6}");
        println!("{:<14}{l:>10.4}{lr:>16.4}{s:>12.3}", system.to_string());
    }
    write_text(&c.out_dir.join("oracle.csv"), &csv)
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Network kind: fcnn, lstm or ced.
    #[arg(long, default_value = "ced", value_parser = |s: &str| s.parse::<ModelKind>().map_err(|e| e.to_string()))]
    model: ModelKind,
    /// Model file (default: <out-dir>/model.mpf).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Train on plain IRMs instead of modified masks.
    #[arg(long)]
    plain_targets: bool,
}

pub fn train(c: &Common, a: &TrainArgs) -> Result<()> {
    let mut cfg = prepare(c, "train", a)?;
    let mut tc = cfg.train.clone();
    tc.seed = c.seed;
    if let Some(v) = a.max_epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = a.patience {
        tc.patience = v;
    }
    if let Some(v) = a.learning_rate {
        tc.learning_rate = v;
    }
    tc.validate()?;
    if a.plain_targets {
        cfg.pipeline.modified_target = false;
    }
    let m = manifest(c)?;
    m.require(Split::Train)?;
    m.require(Split::Val)?;
    let train_pairs = load_split(&m, Some(Split::Train), &cfg.pipeline, c.seed, c.jobs)?;
    let val_pairs = load_split(&m, Some(Split::Val), &cfg.pipeline, c.seed, c.jobs)?;
    let spec = ModelSpec::new(a.model);
    let (model, outcome) = train_postfilter(&spec, &train_pairs, &val_pairs, &tc, &cfg.pipeline, c.seed)?;
    let path = a.output.clone().unwrap_or_else(|| c.out_dir.join("model.mpf"));
    model.save(&path)?;
    write_training_log(&c.out_dir.join("training_log.csv"), &outcome.log)?;
    println!(
        "{} parameters; best epoch {} of {} (val loss {:.6} from {:.6}); model written to {}",
        model.store.param_count(),
        outcome.best_epoch,
        outcome.log.len() - 1,
        outcome.best_val_loss,
        outcome.log[0].val_loss,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EnhanceArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Coded 16 kHz mono WAV.
    #[arg(long)]
    input: PathBuf,
    /// Enhanced WAV to write.
    #[arg(long)]
    output: PathBuf,
    /// Write 16-bit PCM instead of 32-bit float.
    #[arg(long)]
    pcm16: bool,
}

pub fn enhance(c: &Common, a: &EnhanceArgs) -> Result<()> {
    prepare(c, "enhance", a)?;
    let mut pf = PostFilter::load(&a.model)?;
    let coded = read_wav(&a.input, SignalRole::Coded)?;
    let out = pf.enhance(&coded)?;
    let enc = if a.pcm16 { WavEncoding::Pcm16 } else { WavEncoding::Float32 };
    write_wav(&a.output, &out, enc)
}

/// One evaluated system.
#[derive(Debug, Clone, PartialEq, Serialize)]
enum System {
    Coded,
    Oracle(f64),
    Model(PathBuf),
}

impl System {
    fn label(&self) -> String {
        match self {
            System::Coded => "coded".into(),
            System::Oracle(b) => OracleSystem::Bound(*b).to_string(),
            System::Model(p) => format!(
                "model_{}",
                p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            ),
        }
    }
}

fn parse_system(s: &str) -> std::result::Result<System, String> {
    if s == "coded" {
        Ok(System::Coded)
    } else if let Some(b) = s.strip_prefix("oracle:") {
        parse_bound(b).map(System::Oracle)
    } else if let Some(p) = s.strip_prefix("model:") {
        Ok(System::Model(PathBuf::from(p)))
    } else {
        Err(format!("unknown system '{s}' (coded, oracle:<bound>, model:<path>)"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Systems to score: coded, oracle:<bound|inf>, model:<path>. Repeatable.
    #[arg(long = "system", value_parser = parse_system, default_value = "coded")]
    systems: Vec<System>,
}

fn oracle_output(p: &Pair, bound: f64, gamma: f64) -> Result<postmask_core::AudioBuffer> {
    use postmask_core::dsp::{istft, stft, StftConfig};
    use postmask_core::mask::{apply_mask, bound_mask};
    let cfg = StftConfig::default();
    let clean = stft(&p.clean, &cfg)?;
    let coded = stft(&p.coded, &cfg)?;
    let irm = compute_irm(&clean.processed_magnitudes(), &coded.processed_magnitudes(), gamma)?;
    istft(&apply_mask(&bound_mask(&irm, bound)?, &coded)?, &cfg)
}

pub fn eval(c: &Common, a: &EvalArgs) -> Result<()> {
    let cfg = prepare(c, "eval", a)?;
    let m = manifest(c)?;
    let pairs = load_split(&m, Some(a.split), &cfg.pipeline, c.seed, c.jobs)?;
    let mut csv = String::from("utterance,source,system,lsd_db,seg_snr_db\n");
    let mut summary = Vec::new();
    for system in &a.systems {
        let mut filter = match system {
            System::Model(path) => Some(PostFilter::load(path)?),
            _ => None,
        };
        let reports = match &mut filter {
            // the network is stateful during a forward pass, so models run serially
            Some(pf) => pairs
                .iter()
                .map(|p| score(&p.clean, &pf.enhance(&p.coded)?))
                .collect::<Result<Vec<_>>>()?,
            None => par_map(&pairs, c.jobs, |p| match system {
                System::Oracle(b) => score(&p.clean, &oracle_output(p, *b, cfg.pipeline.mask.gamma)?),
                _ => score(&p.clean, &p.coded),
            })?,
        };
        let label = system.label();
        for (p, r) in pairs.iter().zip(&reports) {
            let _ = writeln!(csv, "{},{},{label},{:.6},{:.6}", p.id, p.source, r.lsd_db, r.seg_snr_db);
        }
        let (l, s) = (
            mean(reports.iter().map(|r| r.lsd_db)),
            mean(reports.iter().map(|r| r.seg_snr_db)),
        );
        summary.push((label, l, s));
    }
    println!("{:<24}{:>10}{:>12}", "system", "lsd_db", "seg_snr_db");
    for (label, l, s) in &summary {
        let _ = writeln!(csv, "mean,all,{label},{l:.6},{s:.6}");
        println!("{label:<24}{l:>10.4}{s:>12.3}");
    }
    write_text(&c.out_dir.join("eval.csv"), &csv)
}

#[derive(Debug, Args, Serialize)]
pub struct DegradeArgs {
    /// Surrogate preset: q_low, q_mid or q_high.
    #[arg(long, value_parser = parse_preset)]
    preset: Preset,
}

pub fn degrade(c: &Common, a: &DegradeArgs) -> Result<()> {
    let cfg = prepare(c, "degrade", a)?;
    let m = manifest(c)?;
    let coded_dir = c.out_dir.join("coded");
    std::fs::create_dir_all(&coded_dir).map_err(|e| Error::io(&coded_dir, e))?;
    let indexed: Vec<(usize, &Record)> = m.records.iter().enumerate().collect();
    let records = par_map(&indexed, c.jobs, |(i, r)| {
        let clean = preprocess(&read_wav(&r.clean, SignalRole::Clean)?, &cfg.pipeline)?;
        let coded = surrogate_code(&clean, &DegradeProfile::preset(a.preset, surrogate_seed(c.seed, *i)))?;
        let path = coded_dir.join(format!("{}_{}.wav", r.id(), a.preset));
        write_wav(&path, &coded, WavEncoding::Float32)?;
        Ok(Record {
            clean: std::path::absolute(&r.clean).map_err(|e| Error::io(&r.clean, e))?,
            coded: CodedSource::File(path),
            split: r.split,
            preset: Some(a.preset),
        })
    })?;
    let out = Manifest { records };
    out.save(&c.out_dir.join("manifest.jsonl"))?;
    println!("{} coded files written to {}", out.records.len(), coded_dir.display());
    Ok(())
}

fn parse_style(s: &str) -> std::result::Result<SynthStyle, String> {
    match s {
        "a" | "A" => Ok(SynthStyle::A),
        "b" | "B" => Ok(SynthStyle::B),
        _ => Err(format!("unknown style '{s}' (a or b)")),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 14)]
    train: usize,
    #[arg(long, default_value_t = 2)]
    val: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    /// Voice style: a or b.
    #[arg(long, default_value = "a", value_parser = parse_style)]
    style: SynthStyle,
    /// Preset named in the manifest's surrogate directives.
    #[arg(long, default_value = "q_low", value_parser = parse_preset)]
    preset: Preset,
    /// Seconds per utterance.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
}

pub fn synth(c: &Common, a: &SynthArgs) -> Result<()> {
    prepare(c, "synth", a)?;
    if !(a.duration > 0.0) || a.train + a.val + a.test == 0 {
        return Err(Error::InvalidConfig("need a positive duration and at least one utterance".into()));
    }
    let m = write_synthetic_corpus(
        &c.out_dir,
        &SynthCorpus {
            train: a.train,
            val: a.val,
            test: a.test,
            style: a.style,
            preset: a.preset,
            duration_s: a.duration,
            seed: c.seed,
        },
    )?;
    println!(
        "{} utterances; manifest {}",
        m.records.len(),
        c.out_dir.join("manifest.jsonl").display()
    );
    Ok(())
}
