use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::Parser;
use rankcount_core::data::{
    dataset_id, generate_scene, load_labeled_dir, load_unlabeled_dir, write_scenes, CountDistribution, RankingSet,
    SceneParams, Sources,
};
use rankcount_core::eval::{evaluate, EvalReport, InferenceOptions};
use rankcount_core::experiment::{run_comparison, ComparisonConfig};
use rankcount_core::model::{CountingNet, NetConfig};
use rankcount_core::rankgen::{chain_seed, generate_chain, read_chains, write_chains, ChainParams};
use rankcount_core::seed::derive_seed;
use rankcount_core::tensor::read_checkpoint;
use rankcount_core::trainer::{init_net, train, EvalSet, IterRecord, RunOptions, TrainConfig};

use crate::manifest::{manifest_path, RunManifest};
use crate::report;
use crate::{Cli, Command, CompareArgs, EvalArgs, RankgenArgs, ReportArgs, RerunArgs, SynthArgs, TrainArgs};

pub(crate) fn run(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, argv),
        Command::Rankgen(a) => rankgen(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(a) => eval_cmd(a, argv),
        Command::Report(a) => report_cmd(a, argv),
        Command::Compare(a) => compare(a, argv),
        Command::Rerun(a) => rerun(a),
    }
}

/// Appends `--seed` when the seed came from the environment or a default.
fn resolve_seed(argv: &mut Vec<String>, seed: Option<u64>) -> u64 {
    let seed = seed.unwrap_or(0);
    if !argv.iter().any(|a| a == "--seed" || a.starts_with("--seed=")) {
        argv.push("--seed".into());
        argv.push(seed.to_string());
    }
    seed
}

fn finish(mut manifest: RunManifest, out: &Path, started: Instant) -> Result<()> {
    manifest.record_outputs(out, out)?;
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.write(&manifest_path(out))
}

fn parse_size(s: &str) -> Result<(u32, u32)> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| anyhow!("size `{s}` is not HEIGHTxWIDTH"))?;
    Ok((h.trim().parse().context("scene height")?, w.trim().parse().context("scene width")?))
}

fn synth(a: SynthArgs, mut argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let seed = resolve_seed(&mut argv, a.seed);
    let (height, width) = parse_size(&a.size)?;
    let count = match a.density {
        Some(mean) => CountDistribution::Poisson { mean },
        None => CountDistribution::Uniform { min: a.min_count, max: a.max_count },
    };
    let params = SceneParams {
        width,
        height,
        count,
        blob_radius: (a.blob_min, a.blob_max),
        perspective: a.perspective,
        clutter: a.clutter,
        ..SceneParams::default()
    };
    let scenes = (0..a.scenes)
        .map(|i| generate_scene(&format!("{}{i:05}", a.prefix), &params, derive_seed(seed, &[i as u64])))
        .collect::<rankcount_core::Result<Vec<_>>>()?;
    write_scenes(&a.out, &scenes)?;
    let total: usize = scenes.iter().map(|s| s.annotation.count()).sum();
    println!("wrote {} scenes ({total} people) to {}", scenes.len(), a.out.display());
    let m = RunManifest::new("synth", argv, serde_json::to_value(&params)?, Some(seed));
    finish(m, &a.out, started)
}

fn rankgen(a: RankgenArgs, mut argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let seed = resolve_seed(&mut argv, a.seed);
    let params = ChainParams {
        k: a.k,
        scale: a.s,
        anchor_ratio: a.r,
        anchor_mode: a.anchor_mode.parse()?,
        min_side: a.min_side,
    };
    params.validate()?;
    let images = load_unlabeled_dir(&a.corpus, 1)?;
    let mut chains = Vec::with_capacity(images.len() * a.per_image);
    for (id, image) in &images {
        for j in 0..a.per_image {
            chains.push(generate_chain(id, image.width as u32, image.height as u32, &params, chain_seed(seed, id, j))?);
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_chains(&a.out, &chains)?;
    println!("wrote {} chains over {} images to {}", chains.len(), images.len(), a.out.display());
    let mut m = RunManifest::new("rankgen", argv, serde_json::to_value(params)?, Some(seed));
    m.input("corpus", &a.corpus);
    finish(m, &a.out, started)
}

fn resolve_config(a: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), preset) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let base = match preset {
                Some(p) => format!("preset = {p}\n{text}"),
                None => text,
            };
            TrainConfig::from_kv(&base)?
        }
        (None, Some(p)) => TrainConfig::preset(p)?,
        (None, None) => TrainConfig::toy(),
    };
    if let Some(r) = &a.regime {
        cfg.regime = r.parse()?;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k, v)?;
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

/// The corpus a chains file was generated from, via its manifest.
fn chains_corpus(chains: &Path) -> Result<PathBuf> {
    let m = RunManifest::read(&manifest_path(chains))
        .with_context(|| format!("no --unlabeled given and no manifest found for {}", chains.display()))?;
    m.inputs
        .get("corpus")
        .map(PathBuf::from)
        .ok_or_else(|| anyhow!("manifest for {} does not name a corpus", chains.display()))
}

fn train_cmd(a: TrainArgs, mut argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let seed = resolve_seed(&mut argv, a.seed);
    let cfg = resolve_config(&a, seed)?;
    let mut m = RunManifest::new("train", argv, serde_json::to_value(&cfg)?, Some(seed));

    let labeled = match &a.labeled {
        Some(dir) => {
            m.input("labeled", dir);
            Some(load_labeled_dir(dir, cfg.in_channels)?)
        }
        None => None,
    };
    let unlabeled_dir = match (&a.unlabeled, &a.chains) {
        (Some(d), _) => Some(d.clone()),
        (None, Some(c)) => Some(chains_corpus(c)?),
        (None, None) => None,
    };
    let ranking = match unlabeled_dir {
        Some(dir) => {
            m.input("unlabeled", &dir);
            let images = load_unlabeled_dir(&dir, cfg.in_channels)?;
            Some(match &a.chains {
                Some(c) => {
                    m.input("chains", c);
                    RankingSet::with_chains(images, read_chains(c)?)?
                }
                None => RankingSet::new(images),
            })
        }
        None => None,
    };
    let eval_scenes = match &a.eval {
        Some(dir) => {
            m.input("eval", dir);
            Some((load_labeled_dir(dir, cfg.in_channels)?, dataset_id(dir)?))
        }
        None => None,
    };
    let net = match &a.init {
        Some(path) => {
            m.input("init", path);
            CountingNet::from_checkpoint(&read_checkpoint(path)?, Some(&cfg.net_config()))?
        }
        None => init_net(&cfg)?,
    };

    let quiet = a.quiet;
    let every = (cfg.iterations / 20).max(1);
    let progress = move |r: &IterRecord| {
        if !quiet && (r.iteration % every == 0) {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            eprintln!(
                "iter {:>6} {:<5} lr {:.2e} loss {:.4} L_c {} L_r {}",
                r.iteration,
                r.phase,
                r.lr,
                r.loss,
                opt(r.l_c),
                opt(r.l_r)
            );
        }
    };
    let sources = Sources { labeled: labeled.as_deref(), ranking: ranking.as_ref() };
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        eval: eval_scenes.as_ref().map(|(s, id)| EvalSet { scenes: s, dataset_id: id }),
        progress: Some(&progress),
    };
    let (net, log) = train(net, sources, &cfg, &opts)?;
    if let Some((scenes, id)) = &eval_scenes {
        let infer = InferenceOptions { scale: cfg.eval_scale, tile: None };
        let report = evaluate(&net, scenes, id, &cfg.regime.to_string(), &infer)?;
        report.write(a.out.join("eval_report.csv"))?;
        println!("held-out MAE {:.3} MSE {:.3}", report.mae, report.mse);
    }
    if let Some(last) = log.records.last() {
        println!("trained {} iterations ({}), final loss {:.4}", log.records.len(), cfg.regime, last.loss);
    }
    finish(m, &a.out, started)
}

fn eval_cmd(a: EvalArgs, argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let expected = a.expect_arch.as_deref().map(NetConfig::from_descriptor).transpose()?;
    let net: CountingNet<f32> = CountingNet::from_checkpoint(&read_checkpoint(&a.checkpoint)?, expected.as_ref())?;
    let scenes = load_labeled_dir(&a.dataset, net.config().in_channels)?;
    let id = dataset_id(&a.dataset)?;
    let opts = InferenceOptions { scale: a.scale, tile: a.tile };
    let label = a.label.clone().unwrap_or_else(|| {
        a.checkpoint.parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    });
    let mut report = evaluate(&net, &scenes, &id, &label, &opts)?;
    report.checkpoint_sha256 = Some(rankcount_core::data::file_sha256(&a.checkpoint)?);
    report.cross_dataset = a.transfer;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    report.write(&a.out)?;
    println!("{}: MAE {:.3} MSE {:.3} over {} images", report.label, report.mae, report.mse, report.items.len());
    let mut m = RunManifest::new("eval", argv, serde_json::to_value(opts)?, None);
    m.input("checkpoint", &a.checkpoint);
    m.input("dataset", &a.dataset);
    finish_files(m, &[a.out.clone(), a.out.with_extension("json")], &a.out, started)
}

fn finish_files(mut manifest: RunManifest, files: &[PathBuf], anchor: &Path, started: Instant) -> Result<()> {
    for f in files {
        manifest.record_outputs(f, anchor)?;
    }
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.write(&manifest_path(anchor))
}

fn report_cmd(a: ReportArgs, argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let reports = a.reports.iter().map(EvalReport::read).collect::<rankcount_core::Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (md, csv) = report::comparison_table(&reports)?;
    std::fs::write(a.out.join("comparison.md"), &md)?;
    std::fs::write(a.out.join("comparison.csv"), csv)?;
    print!("{md}");
    if let (Some(ckpt), Some(dataset)) = (&a.checkpoint, &a.dataset) {
        let net: CountingNet<f32> = CountingNet::from_checkpoint(&read_checkpoint(ckpt)?, None)?;
        let scenes = load_labeled_dir(dataset, net.config().in_channels)?;
        for scene in scenes.iter().take(a.samples) {
            report::write_triptych(&net, scene, a.scale, &a.out)?;
        }
    }
    let mut m = RunManifest::new("report", argv, serde_json::json!({ "samples": a.samples, "scale": a.scale }), None);
    for (i, r) in a.reports.iter().enumerate() {
        m.input(&format!("report{i}"), r);
    }
    finish(m, &a.out, started)
}

fn compare(a: CompareArgs, argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let mut cfg = ComparisonConfig::toy();
    cfg.seeds = (0..a.seeds).collect();
    if let Some(v) = a.iterations {
        cfg.base.iterations = v;
    }
    if let Some(v) = a.labeled {
        cfg.labeled = v;
    }
    if let Some(v) = a.unlabeled {
        cfg.unlabeled = v;
    }
    if let Some(v) = a.test {
        cfg.test = v;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.base.set(k, v)?;
    }
    let comparison = run_comparison(&cfg, &|line| eprintln!("{line}"))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let md = comparison.to_markdown();
    std::fs::write(a.out.join("comparison.md"), &md)?;
    std::fs::write(a.out.join("comparison.json"), serde_json::to_string_pretty(&comparison)?)?;
    print!("{md}");
    finish(RunManifest::new("compare", argv, serde_json::to_value(&cfg)?, None), &a.out, started)
}

/// Replaces the value of `--out` in a recorded argument list.
fn replace_out(argv: &mut [String], out: &Path) -> Result<()> {
    let out = out.display().to_string();
    for i in 0..argv.len() {
        if argv[i] == "--out" && i + 1 < argv.len() {
            argv[i + 1] = out;
            return Ok(());
        }
        if argv[i].starts_with("--out=") {
            argv[i] = format!("--out={out}");
            return Ok(());
        }
    }
    bail!("recorded command has no --out argument")
}

fn out_of(argv: &[String]) -> Option<PathBuf> {
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--out" {
            argv.get(i + 1).map(PathBuf::from)
        } else {
            a.strip_prefix("--out=").map(PathBuf::from)
        }
    })
}

fn rerun(a: RerunArgs) -> Result<()> {
    let recorded = RunManifest::read(&a.manifest)?;
    ensure!(recorded.subcommand != "rerun", "manifest records a rerun");
    let mut argv = recorded.argv.clone();
    if let Some(out) = &a.out {
        replace_out(&mut argv, out)?;
    }
    let os: Vec<OsString> = argv.iter().map(OsString::from).collect();
    let cli = Cli::try_parse_from(&os).map_err(|e| anyhow!("recorded arguments no longer parse: {e}"))?;
    run(cli.command, argv.clone())?;
    if a.verify {
        let out = out_of(&argv).ok_or_else(|| anyhow!("recorded command has no --out argument"))?;
        let fresh = RunManifest::read(&manifest_path(&out))?;
        let mismatched: Vec<&String> =
            recorded.outputs.iter().filter(|(k, v)| fresh.outputs.get(*k) != Some(*v)).map(|(k, _)| k).collect();
        ensure!(
            mismatched.is_empty() && fresh.outputs.len() == recorded.outputs.len(),
            "artifacts differ from the recorded run: {mismatched:?}"
        );
        println!("verified {} artifacts byte-identical", recorded.outputs.len());
    }
    Ok(())
}
