use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use hemf::data::{
    chunk_stream, fit_with_metrics, load_checkpoint, mean_rating, parse_chunk_stream, parse_ratings, parse_ratings_with,
    predict_all, predict_with_fallback, rmse, save_checkpoint, sgd_with_metrics, split_dataset, stream_with_metrics,
    write_ratings, Checkpoint, Dataset, IdMap, Scoring, SplitMode, SplitSpec,
};
use hemf::{
    sample_from_model, BatchConfig, HemfError, Hyperparameters, ModelState, OnlineConfig, OnlineSession, RatingChunk, SgdConfig,
    SgdModel, Side, SparseRatings, StepSchedule,
};
use log::info;
use serde_json::{json, Value};

use crate::output::{clip, create, parse_pairs, write_summary, ClipRange, MetricsSink};
use crate::settings::{ModelArgs, Settings};
use crate::Common;

fn hyper_json(h: &Hyperparameters) -> Value {
    json!({
        "latent_dim": h.latent_dim,
        "sigma2": h.sigma2,
        "alpha": h.alpha,
        "beta": h.beta,
        "lambda0": h.lambda0,
        "iota0": h.iota0,
        "community_update": format!("{:?}", h.community_update).to_lowercase(),
    })
}

fn load(path: &Path, common: &Common) -> Result<Dataset> {
    Ok(parse_ratings(path, common.format)?)
}

/// Parses `path` against existing ids; new ids are appended to the maps.
fn load_against(path: &Path, common: &Common, users: &IdMap, items: &IdMap) -> Result<SparseRatings> {
    Ok(parse_ratings_with(path, common.format, users.clone(), items.clone())?.ratings)
}

fn elapsed(start: Instant, timing: bool) -> Option<u128> {
    timing.then(|| start.elapsed().as_millis())
}

fn state_rmse(state: &ModelState, set: &SparseRatings, range: Option<(f64, f64)>) -> Result<Option<f64>> {
    if set.is_empty() {
        return Ok(None);
    }
    Ok(Some(rmse(&predict_all(state, set, range), set)?))
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Training ratings
    #[arg(long)]
    train: PathBuf,
    /// Held-out ratings scored after every sweep
    #[arg(long)]
    test: Option<PathBuf>,
    /// Empirical-Bayes updates after every sweep
    #[arg(long)]
    empirical: bool,
    /// [default: 200]
    #[arg(long)]
    max_sweeps: Option<usize>,
    /// Relative ELBO change that stops the fit [default: 1e-6]
    #[arg(long)]
    tolerance: Option<f64>,
    /// Clip predictions to LO,HI
    #[arg(long, allow_hyphen_values = true)]
    clip: Option<ClipRange>,
    /// Per-sweep metrics CSV
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// JSON summary (stdout if absent)
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Save the fitted state here
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

pub fn fit(args: FitArgs) -> Result<()> {
    let start = Instant::now();
    let settings = Settings::load(args.common.config.as_deref())?;
    let setup = args.model.resolve(&settings)?;
    let config = BatchConfig {
        d_init: setup.d_init,
        k_init: setup.k_init,
        seed: settings.pick(args.common.seed, "seed", 0)?,
        max_sweeps: settings.pick(args.max_sweeps, "max_sweeps", 200)?,
        tolerance: settings.pick(args.tolerance, "tolerance", 1e-6)?,
        empirical: args.empirical,
    };
    let train = load(&args.train, &args.common)?;
    let test = match &args.test {
        Some(p) => Some(load_against(p, &args.common, &train.users, &train.items)?),
        None => None,
    };
    let range = clip(args.clip);
    let timing = !args.common.no_timing;
    let mut sink = MetricsSink::open(args.metrics.as_deref(), timing, false)?;
    let scoring = Scoring { test: test.as_ref(), range };
    let fit = fit_with_metrics(&train.ratings, &setup.hyper, &config, scoring, |row| sink.write(row))?;
    info!("fit stopped after {} sweeps", fit.sweeps);

    let state = &fit.state;
    let summary = json!({
        "command": "fit",
        "sweeps": fit.sweeps,
        "converged": fit.converged,
        "elbo": state.elbo_trace.last(),
        "train_rmse": state_rmse(state, &train.ratings, range)?,
        "test_rmse": match &test { Some(t) => state_rmse(state, t, range)?, None => None },
        "D": state.n_components(Side::User),
        "K": state.n_components(Side::Item),
        "users": train.users.len(),
        "items": train.items.len(),
        "ratings": train.ratings.len(),
        "hyperparameters": hyper_json(&state.hyper),
        "wall_ms": elapsed(start, timing),
    });
    if let Some(path) = &args.checkpoint {
        save_checkpoint(path, &Checkpoint::from_state(fit.state, train.users, train.items))?;
    }
    write_summary(args.summary.as_deref(), &summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    /// Online HeMF
    Ovb,
    /// Stochastic gradient descent baseline
    Sgd,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Rating file, shuffled and cut into --chunk-size chunks
    #[arg(long, conflicts_with = "chunks", required_unless_present = "chunks")]
    train: Option<PathBuf>,
    /// Chunk file: user,item,rating[,prev_rating] records, blank line between chunks
    #[arg(long)]
    chunks: Option<PathBuf>,
    /// [default: 30]
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Held-out ratings scored after every chunk
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ovb")]
    algo: Algorithm,
    /// Empirical-Bayes pass every N chunks
    #[arg(long)]
    empirical_every: Option<usize>,
    /// Local re-sweeps after each chunk [default: 0]
    #[arg(long)]
    propagation: Option<usize>,
    #[arg(long)]
    no_spawn: bool,
    #[arg(long)]
    no_merge: bool,
    /// Continue from this checkpoint, skipping the chunks it has seen
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save the session here at the end (and every --checkpoint-every chunks)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Stop once this many chunks have been processed in total
    #[arg(long)]
    stop_after: Option<u64>,
    /// Initial SGD step size; the SGD rank is --latent-dim
    #[arg(long, default_value_t = 0.01)]
    sgd_step: f64,
    #[arg(long, default_value_t = 1e-4)]
    sgd_decay: f64,
    #[arg(long, default_value_t = 0.02)]
    sgd_reg: f64,
    #[arg(long, allow_hyphen_values = true)]
    clip: Option<ClipRange>,
    /// Per-chunk metrics CSV; appended to when resuming
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// JSON summary (stdout if absent)
    #[arg(long)]
    summary: Option<PathBuf>,
}

/// The whole stream with ids resolved against `users`/`items`. Revisions in a
/// chunk file are labelled against everything earlier in the file.
fn build_stream(args: &StreamArgs, settings: &Settings, seed: u64, users: &mut IdMap, items: &mut IdMap) -> Result<Vec<RatingChunk>> {
    if let Some(path) = &args.chunks {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let raw = parse_chunk_stream(&text).map_err(|e| e.context(path.display().to_string()))?;
        let mut seen = SparseRatings::empty(0, 0);
        let mut chunks = Vec::with_capacity(raw.len());
        for records in raw {
            let entries: Vec<_> = records.iter().map(|r| r.resolve(users, items, &seen)).collect();
            for e in &entries {
                seen.upsert(e.user, e.item, e.value);
            }
            chunks.push(RatingChunk { entries });
        }
        return Ok(chunks);
    }
    let Some(path) = &args.train else {
        bail!(HemfError::InvalidConfig("stream needs --train or --chunks".into()));
    };
    let data = parse_ratings_with(path, args.common.format, users.clone(), items.clone())?;
    *users = data.users;
    *items = data.items;
    let size = settings.pick(args.chunk_size, "chunk_size", 30)?;
    Ok(chunk_stream(&data.ratings, size, seed)?)
}

pub fn stream(args: StreamArgs) -> Result<()> {
    let start = Instant::now();
    let settings = Settings::load(args.common.config.as_deref())?;
    let setup = args.model.resolve(&settings)?;
    let seed = settings.pick(args.common.seed, "seed", 0)?;
    let timing = !args.common.no_timing;
    let range = clip(args.clip);

    if args.algo == Algorithm::Sgd {
        if args.resume.is_some() || args.checkpoint.is_some() {
            bail!(HemfError::InvalidConfig("checkpoints are only supported for --algo ovb".into()));
        }
        return stream_sgd(&args, &settings, &setup.hyper, seed, start);
    }

    let config = OnlineConfig {
        globals: setup.globals,
        propagation_sweeps: settings.pick(args.propagation, "propagation", 0)?,
        empirical_every: match args.empirical_every {
            Some(n) => Some(n),
            None => settings.get("empirical_every")?,
        },
        spawn: !args.no_spawn,
        merge: !args.no_merge,
    };
    let (mut session, mut users, mut items) = match &args.resume {
        Some(path) => {
            let (session, users, items) = load_checkpoint(path)?.into_session(Some(config));
            info!("resuming after {} chunks", session.chunks_processed);
            (session, users, items)
        }
        None => (
            OnlineSession::new(&setup.hyper, setup.d_init, setup.k_init, seed, config)?,
            IdMap::new(),
            IdMap::new(),
        ),
    };
    let chunks = build_stream(&args, &settings, seed, &mut users, &mut items)?;
    let test = match &args.test {
        Some(p) => Some(load_against(p, &args.common, &users, &items)?),
        None => None,
    };

    let done = session.chunks_processed as usize;
    if done > chunks.len() {
        bail!(HemfError::InvalidConfig(format!(
            "checkpoint has seen {done} chunks but the stream has {}",
            chunks.len()
        )));
    }
    let end = match args.stop_after {
        Some(n) => (n as usize).clamp(done, chunks.len()),
        None => chunks.len(),
    };

    let mut sink = MetricsSink::open(args.metrics.as_deref(), timing, args.resume.is_some())?;
    let scoring = Scoring { test: test.as_ref(), range };
    let every = args.checkpoint_every;
    let reports = stream_with_metrics(
        &mut session,
        &chunks[done..end],
        scoring,
        |row| sink.write(row),
        |s| match &args.checkpoint {
            Some(path) if every > 0 && s.chunks_processed.is_multiple_of(every) => {
                save_checkpoint(path, &Checkpoint::from_session(s, users.clone(), items.clone()))
            }
            _ => Ok(()),
        },
    )?;
    if let Some(path) = &args.checkpoint {
        save_checkpoint(path, &Checkpoint::from_session(&session, users.clone(), items.clone()))?;
    }

    let state = &session.state;
    let summary = json!({
        "command": "stream",
        "algo": "ovb",
        "chunks": session.chunks_processed,
        "chunks_total": chunks.len(),
        "observed": session.observed.len(),
        "elbo": state.elbo_trace.last(),
        "train_rmse": state_rmse(state, &session.observed, range)?,
        "test_rmse": match &test { Some(t) => state_rmse(state, t, range)?, None => None },
        "D": state.n_components(Side::User),
        "K": state.n_components(Side::Item),
        "spawned": reports.iter().map(|r| r.spawned_users + r.spawned_items).sum::<usize>(),
        "merged": reports.iter().map(|r| r.merged_users + r.merged_items).sum::<usize>(),
        "hyperparameters": hyper_json(&state.hyper),
        "wall_ms": elapsed(start, timing),
    });
    write_summary(args.summary.as_deref(), &summary)
}

fn stream_sgd(args: &StreamArgs, settings: &Settings, hyper: &Hyperparameters, seed: u64, start: Instant) -> Result<()> {
    let (mut users, mut items) = (IdMap::new(), IdMap::new());
    let chunks = build_stream(args, settings, seed, &mut users, &mut items)?;
    let test = match &args.test {
        Some(p) => Some(load_against(p, &args.common, &users, &items)?),
        None => None,
    };
    let end = args.stop_after.map_or(chunks.len(), |n| (n as usize).min(chunks.len()));
    let chunks = &chunks[..end];
    let mut seen = SparseRatings::empty(0, 0);
    for c in chunks {
        for e in &c.entries {
            seen.upsert(e.user, e.item, e.value);
        }
    }
    // Unseen entities are predicted as the mean training rating.
    let fallback = mean_rating(&seen);
    let config = SgdConfig {
        latent_dim: hyper.latent_dim,
        schedule: StepSchedule { initial: args.sgd_step, decay: args.sgd_decay },
        regularization: args.sgd_reg,
        seed,
    };
    let mut model = SgdModel::new(&config)?;
    let timing = !args.common.no_timing;
    let mut sink = MetricsSink::open(args.metrics.as_deref(), timing, false)?;
    let range = clip(args.clip);
    let scoring = Scoring { test: test.as_ref(), range };
    let mut last_test = None;
    let mut last_train = None;
    sgd_with_metrics(&mut model, chunks, fallback, scoring, |row| {
        last_test = row.test_rmse;
        last_train = row.train_rmse;
        sink.write(row)
    })?;
    let summary = json!({
        "command": "stream",
        "algo": "sgd",
        "chunks": chunks.len(),
        "observed": seen.len(),
        "train_rmse": last_train,
        "test_rmse": last_test,
        "latent_dim": hyper.latent_dim,
        "wall_ms": elapsed(start, timing),
    });
    write_summary(args.summary.as_deref(), &summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Seeded uniform split keeping --fraction for training
    Holdout,
    /// One rating per user with at least two ratings goes to test
    Weak,
    /// Fold --fold of a seeded --folds-way partition is the test set
    Kfold,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "holdout")]
    protocol: Protocol,
    #[arg(long, default_value_t = 0.9)]
    fraction: f64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Training ratings are written here as csv
    #[arg(long)]
    train_out: PathBuf,
    /// Test ratings are written here as csv
    #[arg(long)]
    test_out: PathBuf,
}

pub fn split(args: SplitArgs) -> Result<()> {
    let settings = Settings::load(args.common.config.as_deref())?;
    let data = load(&args.input, &args.common)?;
    let mode = match args.protocol {
        Protocol::Holdout => SplitMode::Holdout(args.fraction),
        Protocol::Weak => SplitMode::WeakGeneralization,
        Protocol::Kfold => SplitMode::KFold { folds: args.folds, fold: args.fold },
    };
    let spec = SplitSpec { mode, seed: settings.pick(args.common.seed, "seed", 0)? };
    let (train, test) = split_dataset(&data.ratings, &spec)?;
    write_ratings(&train, &data.users, &data.items, create(&args.train_out)?)?;
    write_ratings(&test, &data.users, &data.items, create(&args.test_out)?)?;
    write_summary(None, &json!({ "command": "split", "train": train.len(), "test": test.len() }))
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// user,item lines (extra fields ignored)
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    clip: Option<ClipRange>,
    /// user,item,prediction CSV (stdout if absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let text = fs::read_to_string(&args.pairs).with_context(|| format!("reading {}", args.pairs.display()))?;
    let pairs = parse_pairs(&text).map_err(|e| e.context(args.pairs.display().to_string()))?;
    let range = clip(args.clip);
    let mut lines = String::from("user,item,prediction\n");
    for (u, i) in &pairs {
        // Unknown ids fall outside the state and get the mixture-mean factor.
        let user = ckpt.users.get(u).unwrap_or(usize::MAX);
        let item = ckpt.items.get(i).unwrap_or(usize::MAX);
        let p = predict_with_fallback(&ckpt.state, user, item, range);
        lines.push_str(&format!("{u},{i},{p}\n"));
    }
    match &args.out {
        Some(path) => fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{lines}"),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Ratings to score
    #[arg(long)]
    test: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    clip: Option<ClipRange>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let test = load_against(&args.test, &args.common, &ckpt.users, &ckpt.items)?;
    let state = &ckpt.state;
    let unseen = test
        .entries()
        .iter()
        .filter(|e| e.user >= state.users.n_entities() || e.item >= state.items.n_entities())
        .count();
    let value = rmse(&predict_all(state, &test, clip(args.clip)), &test)?;
    write_summary(None, &json!({ "command": "eval", "rmse": value, "ratings": test.len(), "unseen": unseen }))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Ratings are written here as csv
    #[arg(long)]
    out: PathBuf,
    /// side,id,label lines with the true community of every entity
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 3)]
    d_true: usize,
    #[arg(long, default_value_t = 2)]
    k_true: usize,
    /// Fraction of observed cells
    #[arg(long, default_value_t = 0.1)]
    density: f64,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let settings = Settings::load(args.common.config.as_deref())?;
    let setup = args.model.resolve(&settings)?;
    let seed = settings.pick(args.common.seed, "seed", 0)?;
    let data = sample_from_model(&setup.hyper, args.d_true, args.k_true, args.users, args.items, args.density, seed)?;
    let users = IdMap::from_ids((0..args.users).map(|k| k.to_string()).collect())?;
    let items = IdMap::from_ids((0..args.items).map(|k| k.to_string()).collect())?;
    write_ratings(&data.ratings, &users, &items, create(&args.out)?)?;
    if let Some(path) = &args.labels {
        let mut text = String::from("side,id,label\n");
        for (k, l) in data.user_labels.iter().enumerate() {
            text.push_str(&format!("user,{k},{l}\n"));
        }
        for (k, l) in data.item_labels.iter().enumerate() {
            text.push_str(&format!("item,{k},{l}\n"));
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    write_summary(
        None,
        &json!({
            "command": "synth",
            "ratings": data.ratings.len(),
            "users": args.users,
            "items": args.items,
            "hyperparameters": hyper_json(&setup.hyper),
        }),
    )
}
