use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use codec_lm::backbone::CodecLm;
use codec_lm::checkpoint::{load_checkpoint, save_checkpoint};
use codec_lm::config::RunConfig;
use codec_lm::corpus::{gen_corpus, render_pseudo_waveform, HESITATIONS, LETTERS};
use codec_lm::inference::{concat_clips, segment_text, synthesize, Clip, GuidanceConfig, Passes, ScoreRecord};
use codec_lm::records::{read_records, write_records, UtteranceRecord};
use codec_lm::seed::derive_seed;
use codec_lm::text::CharVocab;
use codec_lm::training::{assemble_example, Budgets, StepMetrics, Trainer};
use codec_lm::vocab::AcousticGrid;
use codec_lm::DType;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "codec-lm", version, about = "Two-stage codec language model on a synthetic speech corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Train (or resume training) on a corpus file.
    Train(TrainArgs),
    /// Synthesize semantic and acoustic tokens for a text.
    Synth(SynthArgs),
    /// Split text into segments at punctuation.
    Segment(SegmentArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus records written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the metric log.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Total number of steps, overriding the config.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text to synthesize.
    #[arg(long)]
    text: Option<String>,
    /// JSON request: {"text", "prompt_id", "prompt_at", "guidance", "seed"}.
    #[arg(long)]
    request: Option<PathBuf>,
    /// Corpus records to look prompt ids up in.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Utterance whose acoustic tokens prompt the voice.
    #[arg(long)]
    prompt_id: Option<String>,
    /// Use only the first N prompt frames as the start of the text itself
    /// instead of prepending the whole prompt utterance.
    #[arg(long)]
    prompt_frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    min_seg_len: Option<usize>,
    #[arg(long)]
    gap_ms: Option<f64>,
    /// Write the blended scores of every sampled token to scores.jsonl.
    #[arg(long)]
    debug_dump_scores: bool,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long, conflicts_with = "file")]
    text: Option<String>,
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    min_seg_len: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Segment(a) => segment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[derive(Serialize)]
struct GeneratorInfo {
    seed: u64,
    size: usize,
    speakers: u32,
    readings_per_text: u32,
    alphabet: String,
    num_codebooks: usize,
    st_size: u32,
    at_size: u32,
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = args.common.load()?.resolve()?;
    let vocab = cfg.model.vocab;
    let corpus = gen_corpus(&cfg.corpus, &vocab)?;
    std::fs::create_dir_all(&args.out)?;
    let records: Vec<UtteranceRecord> = corpus.iter().map(Into::into).collect();
    let path = args.out.join("corpus.tsv");
    write_records(BufWriter::new(File::create(&path)?), &records)?;
    let info = GeneratorInfo {
        seed: cfg.corpus.seed,
        size: cfg.corpus.size,
        speakers: cfg.corpus.speakers,
        readings_per_text: cfg.corpus.readings_per_text,
        alphabet: LETTERS.chars().chain([' ']).chain(HESITATIONS).collect(),
        num_codebooks: vocab.num_codebooks,
        st_size: vocab.st_size,
        at_size: vocab.at_size,
    };
    std::fs::write(args.out.join("generator.json"), serde_json::to_string_pretty(&info)?)?;
    cfg.write_effective(&args.out)?;
    log::info!("wrote {} utterances to {}", records.len(), path.display());
    Ok(())
}

fn read_data(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_records(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Keeps the lines of an existing metric log up to `step`.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line).context("parsing existing metric log")?;
        if m.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.load()?.resolve()?;
    let records = read_data(&args.data)?;
    if records.is_empty() {
        bail!("{} holds no utterances", args.data.display());
    }
    let resumed = match &args.checkpoint {
        Some(path) => {
            let loaded = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if let Some(train) = loaded.state.train.clone() {
                cfg.train = train;
            }
            cfg.model = *loaded.model.config();
            Some(loaded)
        }
        None => None,
    };
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    let vocab = cfg.model.vocab;
    let chars = match &resumed {
        Some(l) => l.model.text_encoder().chars().clone(),
        None => CharVocab::from_texts(records.iter().map(|r| r.text.as_str())),
    };
    let budgets = Budgets {
        text_budget: cfg.model.backbone.text_budget,
        st_at_budget: cfg.model.backbone.st_at_budget,
    };
    let examples = records
        .iter()
        .map(|r| {
            assemble_example(&r.text, &r.st, &r.at, &vocab, &chars, budgets)
                .with_context(|| format!("utterance {}", r.id))
        })
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(&args.out)?;
    cfg.write_effective(&args.out)?;
    let metrics_path = args.out.join("metrics.jsonl");
    let (model, state) = match resumed {
        Some(l) => (l.model, Some(l.state)),
        None => {
            let dtype = if cfg.run.double_precision { DType::F64 } else { DType::F32 };
            (CodecLm::new(cfg.model, chars, cfg.run.model_seed, dtype)?, None)
        }
    };
    let mut trainer = Trainer::new(model, cfg.train.clone(), examples)?;
    let mut log_file = match state {
        Some(state) => {
            let done = state.step as usize;
            trainer.resume(state);
            truncate_metrics(&metrics_path, done)?;
            log::info!("resuming after step {done}");
            std::fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?
        }
        None => File::create(&metrics_path)?,
    };
    let ckpt = args.out.join("checkpoint.ckpt");
    while !trainer.is_done() {
        let m = trainer.train_step()?;
        m.write_jsonl(&mut log_file)?;
        if m.step % 50 == 0 || m.step == 1 {
            log::info!("step {} loss {:.4} lr {:.2e}", m.step, m.loss, m.lr);
        }
        let every = cfg.run.checkpoint_every;
        if every > 0 && m.step % every == 0 && !trainer.is_done() {
            let path = args.out.join(format!("checkpoint-{}.ckpt", m.step));
            save_checkpoint(&path, &trainer.model, &trainer.state())?;
        }
    }
    log_file.flush()?;
    save_checkpoint(&ckpt, &trainer.model, &trainer.state())?;
    log::info!("saved {}", ckpt.display());
    Ok(())
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GuidanceOverrides {
    gamma: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    temperature: Option<f64>,
    top_k: Option<usize>,
    max_st_len: Option<usize>,
    max_at_len: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthRequest {
    text: Option<String>,
    prompt_id: Option<String>,
    /// Frames of K ids each.
    prompt_at: Option<Vec<Vec<u32>>>,
    guidance: GuidanceOverrides,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct SegmentResult {
    text: String,
    conditioning_text: String,
    st: Vec<u32>,
    st_terminated: bool,
    st_truncated: bool,
    at: Vec<Vec<u32>>,
    at_truncated: bool,
}

#[derive(Serialize)]
struct SynthResponse {
    guidance: GuidanceConfig,
    prompt_frames: usize,
    sample_rate: u32,
    samples: usize,
    segments: Vec<SegmentResult>,
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    segment: usize,
    #[serde(flatten)]
    record: &'a ScoreRecord,
}

fn apply(g: &mut GuidanceConfig, o: &GuidanceOverrides) {
    let GuidanceOverrides {
        gamma,
        alpha,
        beta,
        temperature,
        top_k,
        max_st_len,
        max_at_len,
    } = *o;
    g.gamma = gamma.unwrap_or(g.gamma);
    g.alpha = alpha.unwrap_or(g.alpha);
    g.beta = beta.unwrap_or(g.beta);
    g.temperature = temperature.unwrap_or(g.temperature);
    g.top_k = top_k.unwrap_or(g.top_k);
    g.max_st_len = max_st_len.unwrap_or(g.max_st_len);
    g.max_at_len = max_at_len.unwrap_or(g.max_at_len);
}

fn synth(args: SynthArgs) -> Result<()> {
    let request: SynthRequest = match &args.request {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .with_context(|| format!("parsing request {}", path.display()))?,
        None => SynthRequest::default(),
    };
    let mut cfg = args.common.load()?;
    if args.common.seed.is_none() {
        if let Some(seed) = request.seed {
            cfg = cfg.with_seed(seed);
        }
    }
    apply(&mut cfg.guidance, &request.guidance);
    apply(
        &mut cfg.guidance,
        &GuidanceOverrides {
            gamma: args.gamma,
            alpha: args.alpha,
            beta: args.beta,
            temperature: args.temperature,
            top_k: args.top_k,
            ..Default::default()
        },
    );
    if let Some(v) = args.min_seg_len {
        cfg.synth.min_seg_len = v;
    }
    if let Some(v) = args.gap_ms {
        cfg.synth.gap_ms = v;
    }
    let loaded = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let model = loaded.model;
    cfg.model = *model.config();
    let cfg = cfg.resolve()?;
    let vocab = cfg.model.vocab;

    let text = args
        .text
        .clone()
        .or(request.text.clone())
        .context("no text given (use --text or a request file)")?;
    let prompt_id = args.prompt_id.clone().or(request.prompt_id.clone());
    let (prompt, prompt_text) = match (&prompt_id, &request.prompt_at) {
        (Some(_), Some(_)) => bail!("give either a prompt id or an inline prompt, not both"),
        (Some(id), None) => {
            let data = args.data.as_ref().context("--prompt-id needs --data")?;
            let rec = read_data(data)?
                .into_iter()
                .find(|r| &r.id == id)
                .with_context(|| format!("no utterance {id} in {}", data.display()))?;
            match args.prompt_frames {
                Some(n) => (rec.at.prefix(n), None),
                None => (rec.at, Some(rec.text)),
            }
        }
        (None, Some(rows)) => (AcousticGrid::from_rows(rows, vocab.num_codebooks)?, None),
        (None, None) => (AcousticGrid::empty(vocab.num_codebooks), None),
    };

    let segments = segment_text(&text, cfg.synth.min_seg_len)?;
    std::fs::create_dir_all(&args.out)?;
    cfg.write_effective(&args.out)?;
    let mut results = Vec::new();
    let mut clips = Vec::new();
    let mut records = Vec::new();
    let mut score_file = if args.debug_dump_scores {
        Some(BufWriter::new(File::create(args.out.join("scores.jsonl"))?))
    } else {
        None
    };
    for (i, seg) in segments.iter().enumerate() {
        let conditioning = match &prompt_text {
            Some(p) => format!("{p} {seg}"),
            None => seg.clone(),
        };
        let g = GuidanceConfig {
            seed: derive_seed(cfg.guidance.seed, "segment", i as u64),
            ..cfg.guidance
        };
        let out = synthesize(&model, &conditioning, &prompt, &g, Passes::Guided, score_file.is_some())
            .with_context(|| format!("segment {i}"))?;
        if let Some(f) = score_file.as_mut() {
            for record in out.st.scores.iter().chain(&out.at.scores) {
                serde_json::to_writer(&mut *f, &ScoreLine { segment: i, record })?;
                f.write_all(b"\n")?;
            }
        }
        if out.st.truncated || out.at.truncated {
            log::warn!(
                "segment {i}: truncated (semantic {}, acoustic {})",
                out.st.truncated,
                out.at.truncated
            );
        }
        clips.push(Clip {
            sample_rate: cfg.audio.sample_rate,
            samples: render_pseudo_waveform(&out.at.grid, cfg.audio.sample_rate, cfg.audio.downsample as usize),
        });
        records.push(UtteranceRecord {
            id: format!("seg{i:03}"),
            text: seg.clone(),
            st: out.st.stream.tokens().to_vec(),
            at: out.at.grid.clone(),
            speaker: None,
        });
        results.push(SegmentResult {
            text: seg.clone(),
            conditioning_text: conditioning,
            st: out.st.stream.tokens().to_vec(),
            st_terminated: out.st.stream.terminated(),
            st_truncated: out.st.truncated,
            at: out.at.grid.rows().map(<[u32]>::to_vec).collect(),
            at_truncated: out.at.truncated,
        });
    }
    if let Some(mut f) = score_file {
        f.flush()?;
    }
    let samples = concat_clips(&clips, cfg.audio.sample_rate, cfg.synth.gap_ms)?;
    write_wav(&args.out.join("output.wav"), &samples, cfg.audio.sample_rate)?;
    write_records(BufWriter::new(File::create(args.out.join("output.tsv"))?), &records)?;
    let response = SynthResponse {
        guidance: cfg.guidance,
        prompt_frames: prompt.frames(),
        sample_rate: cfg.audio.sample_rate,
        samples: samples.len(),
        segments: results,
    };
    std::fs::write(args.out.join("result.json"), serde_json::to_string_pretty(&response)?)?;
    log::info!("synthesized {} segment(s) into {}", segments.len(), args.out.display());
    Ok(())
}

fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

fn segment(args: SegmentArgs) -> Result<()> {
    let text = match (&args.text, &args.file) {
        (Some(t), None) => t.clone(),
        (None, Some(p)) => {
            let raw = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            raw.trim_end_matches(['\n', '\r']).to_string()
        }
        _ => bail!("give --text or --file"),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for seg in segment_text(&text, args.min_seg_len)? {
        writeln!(out, "{seg}")?;
    }
    Ok(())
}
