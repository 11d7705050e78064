//! Subcommand implementations.

use std::cell::Cell;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ratectl::agent::{Checkpoint, SearchConfig, Trainer};
use ratectl::baselines::{OracleCache, OracleConfig};
use ratectl::codec_sim::corpus::{Corpus, CorpusParams};
use ratectl::codec_sim::{CodecConfig, VideoSpec};
use ratectl::eval::report::{markdown_summary, write_bundle};
use ratectl::eval::{
    compare_policies, default_targets, rd_sweep, AgentPolicy, ConstantQp, EpisodeRecord, HeuristicVbr, Oracle,
    PolicyRuns, RatePolicy,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::{EvaluateArgs, GenCorpusArgs, OracleArgs, Preset, TrainArgs};

pub fn gen_corpus(a: &GenCorpusArgs, out: &mut dyn Write) -> Result<()> {
    let (params, codec) = match a.preset {
        Preset::Desk => (CorpusParams::desk(), CodecConfig::scaled(30.0)),
        Preset::Full => (CorpusParams::default(), CodecConfig::default()),
    };
    let corpus = Corpus::generate(a.seed, a.count, params, codec)?;
    corpus.write(&a.out)?;
    let _ = writeln!(
        out,
        "wrote {} videos to {} (hash {})",
        corpus.videos.len(),
        a.out.display(),
        corpus.content_hash()
    );
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ratectl::Error + '_ {
    move |e| ratectl::Error::io(path, e)
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(threads) = a.threads {
        cfg.train.threads = threads;
    }
    if let Some(targets) = &a.targets {
        cfg.train.targets = targets.clone();
    }
    if let Some(kind) = a.reward {
        cfg.reward.mode = kind;
    }
    if let Some(lambda) = a.lambda {
        cfg.reward.lambda = lambda;
    }
    if let Some(dir) = &a.out {
        cfg.out = Some(dir.clone());
    }
    let mode = cfg.finalize()?;
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))?;
    let corpus = Corpus::read(&cfg.corpus)?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| CliError::io(&cfg_path, e))?;

    let mut trainer = match &a.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.net != cfg.net || ckpt.reward != mode {
                return Err(CliError::Config(format!(
                    "{} was trained with a different network or reward",
                    path.display()
                )));
            }
            Trainer::resume(&corpus, cfg.train.clone(), &ckpt)?
        }
        None => Trainer::new(&corpus, cfg.train.clone(), cfg.net.clone(), mode)?,
    };

    let log_path = dir.join("train_log.jsonl");
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.checkpoint.is_some())
        .truncate(a.checkpoint.is_none())
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let until = a.until.unwrap_or(cfg.train.steps).min(cfg.train.steps);
    let last_saved = Cell::new(None);
    let save = |ckpt: &Checkpoint| -> ratectl::Result<()> {
        ckpt.save(&ckpt_dir.join(format!("step-{:08}.json", ckpt.step)))?;
        ckpt.save(&dir.join("checkpoint.json"))?;
        last_saved.set(Some(ckpt.step));
        Ok(())
    };
    trainer.run(
        until,
        &mut |rec| {
            let line = serde_json::to_string(rec)?;
            writeln!(log, "{line}").map_err(io_err(&log_path))
        },
        &mut |c| save(c),
    )?;
    if last_saved.get() != Some(trainer.step()) {
        save(&trainer.checkpoint())?;
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let _ = writeln!(
        out,
        "trained to step {} ({} episodes); checkpoint at {}",
        trainer.step(),
        trainer.episodes_generated(),
        dir.join("checkpoint.json").display()
    );
    Ok(())
}

/// Resolves `heuristic-vbr` and `constant-qp-N`.
pub fn named_policy(name: &str) -> Result<Box<dyn RatePolicy>> {
    if name == "heuristic-vbr" {
        return Ok(Box::new(HeuristicVbr));
    }
    if let Some(qp) = name.strip_prefix("constant-qp-") {
        let qp: u8 = qp
            .parse()
            .map_err(|_| CliError::Config(format!("bad constant QP in {name:?}")))?;
        return Ok(Box::new(ConstantQp(qp)));
    }
    Err(CliError::Config(format!(
        "unknown policy {name:?} (expected heuristic-vbr or constant-qp-N)"
    )))
}

fn split_checkpoint_arg(arg: &str) -> (Option<&str>, PathBuf) {
    match arg.split_once('=') {
        Some((label, path)) if !label.is_empty() => (Some(label), PathBuf::from(path)),
        _ => (None, PathBuf::from(arg)),
    }
}

fn targets_or_default(targets: &Option<Vec<f64>>) -> Result<Vec<f64>> {
    let t = targets.clone().unwrap_or_else(default_targets);
    if t.is_empty() || t.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(CliError::Config("targets must be positive".into()));
    }
    Ok(t)
}

pub fn evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = Corpus::read(&a.corpus)?;
    let codec = corpus.codec();
    let targets = targets_or_default(&a.targets)?;
    let search = if a.search {
        let mut s = SearchConfig::default();
        if let Some(n) = a.simulations {
            s.simulations = n;
        }
        s.validate()?;
        Some(s)
    } else {
        None
    };

    let mut runs: Vec<PolicyRuns> = Vec::new();
    let mut records: Vec<EpisodeRecord> = Vec::new();
    let mut add = |label: String, recs: Vec<EpisodeRecord>| {
        records.extend(recs.iter().cloned());
        match runs.iter_mut().find(|r| r.label == label) {
            Some(r) => r.seeds.push(recs),
            None => runs.push(PolicyRuns::single(label, recs)),
        }
    };
    for name in a.baseline.iter().filter(|n| !n.is_empty()) {
        let policy = named_policy(name)?;
        add(policy.label(), rd_sweep(policy.as_ref(), &corpus.videos, codec, &targets, a.threads)?.records);
    }
    for arg in &a.checkpoint {
        let (label, path) = split_checkpoint_arg(arg);
        let ckpt = Checkpoint::load(&path)?;
        let params = ckpt.params()?;
        let label = label.map_or_else(|| format!("agent-{}", ckpt.reward.label()), str::to_string);
        let policy = AgentPolicy {
            label: label.clone(),
            params: &params,
            search: search.clone(),
        };
        add(label, rd_sweep(&policy, &corpus.videos, codec, &targets, a.threads)?.records);
    }

    let reference = runs
        .iter()
        .find(|r| r.label == a.reference)
        .ok_or_else(|| CliError::Config(format!("reference policy {:?} was not evaluated", a.reference)))?;
    let mut reports = Vec::new();
    for test in runs.iter().filter(|r| r.label != a.reference) {
        reports.push(compare_policies(reference, test)?);
    }
    if reports.is_empty() {
        reports.push(compare_policies(reference, reference)?);
    }
    write_bundle(&a.out, &records, &reports)?;
    let _ = write!(out, "{}", markdown_summary(&reports));
    Ok(())
}

/// One (video, target) row of the oracle table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub video_id: String,
    pub target_kbps: f64,
    pub oracle_qps: Vec<u8>,
    pub oracle_bitrate_kbps: f64,
    pub oracle_psnr_db: f64,
    pub oracle_feasible: bool,
    pub policy_bitrate_kbps: Option<f64>,
    pub policy_psnr_db: Option<f64>,
    pub policy_feasible: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub policy: Option<String>,
    pub cases: usize,
    pub skipped_videos: usize,
    pub oracle_feasible: usize,
    pub policy_feasible: Option<usize>,
    /// Cases where policy and oracle agree on feasibility.
    pub feasibility_agreement: Option<usize>,
    /// Mean oracle PSNR minus policy PSNR over cases both solve.
    pub mean_gap_db: Option<f64>,
    pub both_feasible: Option<usize>,
}

impl GapReport {
    pub fn from_rows(policy: Option<String>, rows: &[OracleRow], skipped_videos: usize) -> Self {
        let measured = policy.is_some();
        let both: Vec<&OracleRow> = rows
            .iter()
            .filter(|r| r.oracle_feasible && r.policy_feasible == Some(true))
            .collect();
        let gap = (!both.is_empty()).then(|| {
            both.iter()
                .map(|r| r.oracle_psnr_db - r.policy_psnr_db.unwrap_or(f64::NAN))
                .sum::<f64>()
                / both.len() as f64
        });
        GapReport {
            policy,
            cases: rows.len(),
            skipped_videos,
            oracle_feasible: rows.iter().filter(|r| r.oracle_feasible).count(),
            policy_feasible: measured.then(|| rows.iter().filter(|r| r.policy_feasible == Some(true)).count()),
            feasibility_agreement: measured
                .then(|| rows.iter().filter(|r| r.policy_feasible == Some(r.oracle_feasible)).count()),
            mean_gap_db: if measured { gap } else { None },
            both_feasible: measured.then_some(both.len()),
        }
    }
}

pub fn oracle(a: &OracleArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = Corpus::read(&a.corpus)?;
    let codec = corpus.codec();
    let targets = targets_or_default(&a.targets)?;
    let mut config = OracleConfig::default();
    if let Some(grid) = &a.grid {
        config.qp_grid = grid.clone();
    }
    if let Some(m) = a.max_frames {
        config.max_frames = m;
    }
    config.validate()?;
    let cache = OracleCache::from_env()?;
    let hash = corpus.content_hash();
    let oracle = Oracle {
        config: config.clone(),
        cache: cache.as_ref().map(|c| (c, hash.clone())),
    };

    let params = match &a.checkpoint {
        Some(path) => Some(Checkpoint::load(path)?.params()?),
        None => None,
    };
    let policy: Option<Box<dyn RatePolicy + '_>> = match (&a.policy, &params) {
        (Some(name), _) if name == "oracle" => Some(Box::new(Oracle {
            config: config.clone(),
            cache: cache.as_ref().map(|c| (c, hash.clone())),
        })),
        (Some(name), _) => Some(named_policy(name)?),
        (None, Some(p)) => Some(Box::new(AgentPolicy {
            label: "agent".into(),
            params: p,
            search: None,
        })),
        (None, None) => None,
    };

    let (eligible, skipped): (Vec<&Arc<VideoSpec>>, Vec<&Arc<VideoSpec>>) =
        corpus.videos.iter().partition(|v| v.frames.len() <= config.max_frames);
    let mut rows = Vec::with_capacity(eligible.len() * targets.len());
    for video in &eligible {
        for &t in &targets {
            let best = oracle.encode(video, t, codec)?;
            let qps = best.results().iter().map(|r| r.qp).collect();
            let m = best.episode_metrics()?;
            let mut row = OracleRow {
                video_id: video.id.clone(),
                target_kbps: t,
                oracle_qps: qps,
                oracle_bitrate_kbps: m.bitrate_kbps,
                oracle_psnr_db: m.mean_psnr_db,
                oracle_feasible: m.feasible(),
                policy_bitrate_kbps: None,
                policy_psnr_db: None,
                policy_feasible: None,
            };
            if let Some(p) = &policy {
                let pm = p.encode(video, t, codec)?.episode_metrics()?;
                row.policy_bitrate_kbps = Some(pm.bitrate_kbps);
                row.policy_psnr_db = Some(pm.mean_psnr_db);
                row.policy_feasible = Some(pm.feasible());
            }
            rows.push(row);
        }
    }
    let report = GapReport::from_rows(policy.as_ref().map(|p| p.label()), &rows, skipped.len());

    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let table = a.out.join("oracle.jsonl");
    let mut f = BufWriter::new(File::create(&table).map_err(|e| CliError::io(&table, e))?);
    for row in &rows {
        writeln!(f, "{}", serde_json::to_string(row)?).map_err(|e| CliError::io(&table, e))?;
    }
    f.flush().map_err(|e| CliError::io(&table, e))?;
    let gap = a.out.join("gap.json");
    fs::write(&gap, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| CliError::io(&gap, e))?;

    let _ = writeln!(
        out,
        "{} cases, {} videos skipped (more than {} frames), oracle feasible on {}",
        report.cases, report.skipped_videos, config.max_frames, report.oracle_feasible
    );
    if let (Some(label), Some(feasible), Some(agree)) = (&report.policy, report.policy_feasible, report.feasibility_agreement) {
        let gap = report.mean_gap_db.map_or("n/a".to_string(), |g| format!("{g:.3} dB"));
        let _ = writeln!(
            out,
            "{label}: feasible on {feasible}, agrees with the oracle on {agree}, mean PSNR gap {gap}"
        );
    }
    Ok(())
}
