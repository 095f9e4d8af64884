use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::warn;
use serde::{Deserialize, Serialize};

use tisv::asr::{AsrHead, AsrHeadConfig};
use tisv::checkpoint::{self, load_network, save_network, Metadata, META_HASH, META_HEAD, META_KIND};
use tisv::config::RunConfig;
use tisv::data::{
    fit_length, generate_synthetic, make_split, read_manifest, read_wav, segment_by_manifest, segment_random,
    write_manifest, write_truth_table, write_wav, Dataset, Manifest, ManifestRow, SplitSpec, SynthSpec,
};
use tisv::experiment::{evaluate_model, run_sweep, SweepConfig};
use tisv::gradcheck::standard_suite;
use tisv::network::{build_network, SeNetwork};
use tisv::params::ParameterStore;
use tisv::rng::{tag_of, SplitMix64};
use tisv::trainer::{finetune_adversarial, pretrain_speaker_softmax, EpochRecord};
use tisv::verification::{decide, enroll, score, Decision, DecisionPolicy, EvalReport, SpeakerModel};
use tisv::{Error, Result};

#[derive(Parser)]
#[command(name = "tisv", version, about = "Keyword-adversarial speaker verification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speaker x keyword corpus.
    GenData {
        /// Synthetic corpus spec (TOML); built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override the spec seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the embedding network as a speaker classifier.
    TrainBase {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest CSV of the pretraining corpus.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune with the triplet loss and the keyword-adversarial loss.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base checkpoint from train-base.
        #[arg(long)]
        base: PathBuf,
        /// Manifest CSV of the fine-tuning corpus (train and eval speakers).
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        n_keywords: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Accept training speakers with more than one keyword.
        #[arg(long)]
        allow_multi_keyword: bool,
    },
    /// Enroll a speaker from M waveforms.
    Enroll {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        speaker: String,
        /// Output speaker-model file (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Enrollment WAV files.
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Score one waveform against a speaker model; exit 0 accept, 1 reject.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Decision threshold; defaults to the EER threshold of --report.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
        /// Evaluation report whose pooled EER threshold is the default.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the target / non-target keyword evaluation protocol.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Split from finetune; restricts evaluation to its eval speakers
        /// and probes its training keywords.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Keyword head checkpoint from finetune.
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random points per check.
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
    /// Print the hash of the effective configuration.
    ConfigHash {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Gamma x N sweep on a synthetic corpus, one pretraining per seed.
    Sweep {
        /// Sweep configuration (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Output rows (JSON).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenData { spec, seed, out } => cmd_gen_data(spec.as_deref(), seed, &out),
        Command::TrainBase { config, manifest, out, seed, epochs } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            cmd_train_base(&cfg, &manifest, &out)
        }
        Command::Finetune { config, base, manifest, out, seed, gamma, n_keywords, epochs, allow_multi_keyword } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(g) = gamma {
                cfg.finetune.adv.gamma = g;
            }
            if let Some(n) = n_keywords {
                cfg.finetune.n_keywords = n;
                cfg.split.n_keywords = Some(n);
            }
            if let Some(e) = epochs {
                cfg.finetune.epochs = e;
            }
            cfg.finetune.allow_multi_keyword |= allow_multi_keyword;
            cfg.validate()?;
            cmd_finetune(&cfg, &base, &manifest, &out)
        }
        Command::Enroll { checkpoint, speaker, out, wavs } => cmd_enroll(&checkpoint, &speaker, &out, &wavs),
        Command::Verify { checkpoint, model, wav, threshold, report } => {
            cmd_verify(&checkpoint, &model, &wav, threshold, report.as_deref())
        }
        Command::Evaluate { checkpoint, manifest, split, head, config, m, seed, out } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(m) = m {
                cfg.eval.m = m;
            }
            cfg.validate()?;
            cmd_evaluate(&cfg, &checkpoint, &manifest, split.as_deref(), head.as_deref(), &out)
        }
        Command::Gradcheck { seed, points } => cmd_gradcheck(seed, points),
        Command::ConfigHash { config, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            println!("{}", cfg.hash());
            Ok(0)
        }
        Command::Sweep { config, seeds, out } => cmd_sweep(config.as_deref(), &seeds, &out),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Write the effective configuration next to the run's outputs.
fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &format!("# config_hash = {}\n{}", cfg.hash(), cfg.to_toml()))
}

fn load_corpus(manifest: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let m = read_manifest(manifest)?;
    let out = segment_by_manifest(&m);
    for (row, err) in &out.errors {
        warn!("manifest row {}: {err}", row + 1);
    }
    let mut ds = Dataset::new(out.utterances);
    if cfg.segment.random {
        let mut kept = Vec::with_capacity(ds.len());
        for u in ds.utterances {
            let seed = SplitMix64::derive(cfg.seed, tag_of(&format!("segment/{}", u.id))).next_u64();
            if let Some(w) = segment_random(&u.wav, cfg.segment.min_sec, cfg.segment.max_sec, seed)? {
                kept.push(tisv::data::Utterance { wav: w, ..u });
            }
        }
        ds = Dataset::new(kept);
    }
    if ds.is_empty() {
        return Err(Error::Data(format!("{}: no usable segments", manifest.display())));
    }
    ds.fit_all(cfg.network.input_len);
    Ok(ds)
}

fn cmd_gen_data(spec_path: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<u8> {
    let mut spec: SynthSpec = match spec_path {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let (ds, truth) = generate_synthetic(&spec)?;
    let wav_dir = out.join("wav");
    create_dir(&wav_dir)?;
    let mut rows = Vec::with_capacity(ds.len());
    for u in &ds.utterances {
        let rel = PathBuf::from("wav").join(format!("{}.wav", u.id));
        write_wav(&out.join(&rel), &u.wav)?;
        rows.push(ManifestRow {
            path: rel,
            speaker: u.speaker.clone(),
            keyword: u.keyword.clone().unwrap_or_default(),
            start: 0,
            end: u.wav.len(),
        });
    }
    write_manifest(&out.join("manifest.csv"), &Manifest { rows })?;
    write_truth_table(&out.join("truth.csv"), &truth)?;
    let text = toml::to_string(&spec).expect("serialisable");
    let hash = tisv::config::hash_bytes(text.as_bytes());
    write_text(&out.join("spec.toml"), &format!("# config_hash = {hash}\n{text}"))?;
    println!("{} utterances written to {}", ds.len(), out.display());
    Ok(0)
}

fn cmd_train_base(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<u8> {
    let ds = load_corpus(manifest, cfg)?;
    create_dir(out)?;
    echo_config(out, cfg)?;
    let init_seed = SplitMix64::derive(cfg.seed, tag_of("init")).next_u64();
    let (net, mut store) = build_network(&cfg.network, init_seed)?;
    let rec = pretrain_speaker_softmax(&net, &mut store, &ds, &cfg.pretrain)?;
    save_network(&out.join("base.ckpt"), &store, &cfg.network, &cfg.hash())?;
    #[derive(Serialize)]
    struct Record<'a> {
        config_hash: String,
        #[serde(flatten)]
        record: &'a tisv::trainer::PretrainRecord,
    }
    write_json(&out.join("pretrain.json"), &Record { config_hash: cfg.hash(), record: &rec })?;
    println!(
        "pretrained on {} speakers, final loss {:.6}",
        rec.speakers.len(),
        rec.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    config_hash: String,
    #[serde(flatten)]
    split: SplitSpec,
}

fn cmd_finetune(cfg: &RunConfig, base: &Path, manifest: &Path, out: &Path) -> Result<u8> {
    let (net, mut store, _) = load_network(base)?;
    if net.config() != &cfg.network {
        return Err(Error::Config("network section does not match the base checkpoint".into()));
    }
    let ds = load_corpus(manifest, cfg)?;
    let split_seed = SplitMix64::derive(cfg.seed, tag_of("split")).next_u64();
    let split = make_split(&ds, cfg.split.n_train_speakers, cfg.split.n_eval_speakers, cfg.split.n_keywords, split_seed)?;
    let train = split.train_set(&ds);
    let validation = split.validation_set(&ds);
    create_dir(out)?;
    echo_config(out, cfg)?;
    let hash = cfg.hash();
    let (head, head_store, record) =
        finetune_adversarial(&net, &mut store, &train, Some(&validation), &cfg.finetune, &hash)?;
    save_network(&out.join("model.ckpt"), &store, &cfg.network, &hash)?;
    let mut meta = Metadata::new();
    meta.insert(META_KIND.into(), "keyword-head".into());
    meta.insert(META_HEAD.into(), serde_json::to_string(&head.config()).expect("serialisable"));
    meta.insert("keywords".into(), record.keywords.join(","));
    meta.insert(META_HASH.into(), hash.clone());
    checkpoint::save(&out.join("head.ckpt"), &head_store, &meta)?;
    write_json(&out.join("split.json"), &SplitFile { config_hash: hash.clone(), split })?;
    let mut log = format!("# config_hash = {hash}\n{}\n", EpochRecord::TSV_HEADER);
    for e in &record.epochs {
        log.push_str(&e.tsv());
        log.push('\n');
    }
    write_text(&out.join("train_log.tsv"), &log)?;
    write_json(&out.join("run_record.json"), &record)?;
    println!("fine-tuned for {} epochs (gamma = {})", record.epochs.len(), cfg.finetune.adv.gamma);
    Ok(0)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config_hash: String,
    model: SpeakerModel,
}

fn embed_file(net: &SeNetwork, store: &ParameterStore, path: &Path) -> Result<Vec<f64>> {
    let wav = fit_length(&read_wav(path)?, net.config().input_len);
    let mut out = net.embed_frozen(store, &[wav.samples.as_slice()], 1)?;
    Ok(out.pop().expect("one embedding"))
}

fn cmd_enroll(ckpt: &Path, speaker: &str, out: &Path, wavs: &[PathBuf]) -> Result<u8> {
    let (net, store, meta) = load_network(ckpt)?;
    let embs = wavs.iter().map(|p| embed_file(&net, &store, p)).collect::<Result<Vec<_>>>()?;
    let model = enroll(&embs, speaker)?;
    let hash = meta.get(META_HASH).cloned().unwrap_or_default();
    write_json(out, &ModelFile { config_hash: hash, model })?;
    println!("enrolled '{speaker}' from {} utterances", embs.len());
    Ok(0)
}

fn cmd_verify(ckpt: &Path, model: &Path, wav: &Path, threshold: Option<f64>, report: Option<&Path>) -> Result<u8> {
    let tau = match (threshold, report) {
        (Some(t), _) => t,
        (None, Some(r)) => {
            let rep: EvalReport = read_json(r)?;
            rep.tau_all.ok_or_else(|| Error::Config(format!("{} has no pooled EER threshold", r.display())))?
        }
        (None, None) => return Err(Error::Config("pass --threshold or --report".into())),
    };
    let policy = DecisionPolicy::new(tau)?;
    let (net, store, _) = load_network(ckpt)?;
    let mf: ModelFile = read_json(model)?;
    let x = embed_file(&net, &store, wav)?;
    let s = score(&mf.model, &x)?;
    let d = decide(s, policy);
    let word = match d {
        Decision::Accept => "accept",
        Decision::Reject => "reject",
    };
    println!("score {s:.9} threshold {tau:.9} {word}");
    Ok(if d == Decision::Accept { 0 } else { 1 })
}

fn cmd_evaluate(
    cfg: &RunConfig,
    ckpt: &Path,
    manifest: &Path,
    split: Option<&Path>,
    head: Option<&Path>,
    out: &Path,
) -> Result<u8> {
    let (net, store, meta) = load_network(ckpt)?;
    let mut ds = load_corpus(manifest, cfg)?;
    let keywords: Vec<String> = match split {
        Some(p) => {
            let sf: SplitFile = read_json(p)?;
            ds = sf.split.eval_set(&ds);
            sf.split.train_keywords()
        }
        None => ds.keywords(),
    };
    let head = match head {
        Some(p) => {
            let (hs, hm) = checkpoint::load(p)?;
            let hc: AsrHeadConfig = serde_json::from_str(hm.get(META_HEAD).map(String::as_str).unwrap_or(""))
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
            let names: BTreeSet<&str> = hm.get("keywords").map(|k| k.split(',').collect()).unwrap_or_default();
            if names != keywords.iter().map(String::as_str).collect() {
                return Err(Error::Config("keyword head was trained on different keywords".into()));
            }
            Some((AsrHead::new(hc)?, hs))
        }
        None => None,
    };
    let eval_seed = SplitMix64::derive(cfg.seed, tag_of("eval")).next_u64();
    let mut report = evaluate_model(
        &net,
        &store,
        &ds,
        &keywords,
        head.as_ref().map(|(h, s)| (h, s)),
        cfg.eval.m,
        &cfg.eval.probe,
        eval_seed,
    )?;
    report.config_hash = meta.get(META_HASH).cloned().unwrap_or_default();
    write_json(out, &report)?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    println!("EER TK {} NTK {} Avg {} (%)", f(report.eer_tk), f(report.eer_ntk), f(report.eer_avg));
    Ok(0)
}

fn cmd_gradcheck(seed: u64, points: usize) -> Result<u8> {
    let rows = standard_suite(seed, points.max(1))?;
    println!("{:<26} {:>12} {:>10} {:>8} {:>6}  result", "check", "max_rel_err", "tolerance", "coords", "kinks");
    for r in &rows {
        println!(
            "{:<26} {:>12.3e} {:>10.0e} {:>8} {:>6}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.checked,
            r.kinks,
            if r.pass { "pass" } else { "FAIL" }
        );
        if let (false, Some(w)) = (r.pass, &r.worst) {
            println!("    worst: {w}");
        }
    }
    Ok(if rows.iter().all(|r| r.pass) { 0 } else { 1 })
}

fn cmd_sweep(config: Option<&Path>, seeds: &[u64], out: &Path) -> Result<u8> {
    let cfg: SweepConfig = match config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SweepConfig::default(),
    };
    let mut rows = Vec::new();
    for &s in seeds {
        let r = run_sweep(&cfg, s)?;
        for row in &r {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
            println!(
                "seed {} N={} gamma={:.2}  TK {:>6} NTK {:>6} probe {:>6} head {:>6}",
                row.seed,
                row.n_keywords,
                row.gamma,
                f(row.eer_tk),
                f(row.eer_ntk),
                f(row.keyword_probe_accuracy.map(|a| 100.0 * a)),
                f(row.asr_head_accuracy.map(|a| 100.0 * a))
            );
        }
        rows.extend(r);
    }
    write_json(out, &rows)?;
    Ok(0)
}
