use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use floornav::agents::read_step_log;
use floornav::config::{ConfigError, RunConfig};
use floornav::episodes::{
    compute_stats, episodes_per_scene, load_dataset, save_dataset, DatasetStats, Episode, EpisodeSampler,
};
use floornav::eval::{render_trajectory, run_benchmark, write_results, BenchmarkResult, Track};
use floornav::floorgrid::{load_scene, save_scene, synth_scene, Scene, SizeClass};
use floornav::policy::{load_checkpoint, save_checkpoint, train, Normalizer, Policy, TrainData, Variant};
use floornav::seeds::derive_seed;

/// Floor-plan-guided navigation pipeline.
///
/// Every command reads the same run configuration (built-in defaults, then
/// `--config`, then `--set` overrides, then the dedicated flags) and works
/// inside one output directory laid out as scenes/, datasets/,
/// checkpoints/, results/ and renders/.
#[derive(Parser)]
#[command(name = "floornav", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config field by dotted path, e.g. `train.lr=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize floor plans and furnished truth maps into scenes/.
    SynthScenes,
    /// Sample A* demonstrations into datasets/episodes.jsonl.
    GenEpisodes,
    /// Train a policy into checkpoints/<variant>.json.
    Train {
        /// Training epochs; 0 saves the initial parameters.
        #[arg(long)]
        epochs: Option<usize>,
        /// Policy variant: loc or naive.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Benchmark the configured methods into results/.
    Eval {
        /// Policy checkpoint; repeat for several variants. Defaults to
        /// checkpoints/<variant>.json for each variant the methods need.
        #[arg(long, value_name = "FILE")]
        checkpoint: Vec<PathBuf>,
        /// Keep per-episode step logs under results/logs/.
        #[arg(long)]
        logs: bool,
    },
    /// Draw evaluated trajectories into renders/.
    Render {
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 4)]
        scale: usize,
        /// Render at most this many start/goal pairs.
        #[arg(long)]
        max: Option<usize>,
    },
    /// Print dataset statistics per size class.
    Stats {
        /// Dataset to summarize; defaults to datasets/episodes.jsonl.
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
    },
}

/// Failure with its exit code: 1 for usage, 2 for data.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.common.overrides)?;
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.common.workers {
        cfg.workers = w;
    }
    if let Command::Train { epochs, variant } = &cli.command {
        if let Some(e) = epochs {
            cfg.train.epochs = *e;
        }
        if let Some(v) = variant {
            cfg.variant = *v;
        }
    }
    if let Command::Eval { logs: true, .. } = &cli.command {
        cfg.eval.keep_logs = true;
    }
    cfg.validate()?;
    let out = Layout(cli.common.out.clone());
    match cli.command {
        Command::SynthScenes => synth_scenes(&cfg, &out),
        Command::GenEpisodes => gen_episodes(&cfg, &out),
        Command::Train { .. } => train_cmd(&cfg, &out),
        Command::Eval { checkpoint, .. } => eval_cmd(&cfg, &out, &checkpoint),
        Command::Render { scale, max } => render_cmd(&cfg, &out, scale, max),
        Command::Stats { dataset } => stats_cmd(&out, dataset),
    }
}

struct Layout(PathBuf);

impl Layout {
    fn dir(&self, name: &str) -> Result<PathBuf, Failure> {
        let d = self.0.join(name);
        fs::create_dir_all(&d).map_err(|e| data(format!("cannot create {}: {e}", d.display())))?;
        Ok(d)
    }

    fn scenes_index(&self) -> PathBuf {
        self.0.join("scenes").join("index.txt")
    }

    fn dataset(&self) -> PathBuf {
        self.0.join("datasets").join("episodes.jsonl")
    }

    fn checkpoint(&self, v: Variant) -> PathBuf {
        self.0.join("checkpoints").join(format!("{v}.json"))
    }

    fn results(&self) -> PathBuf {
        self.0.join("results")
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| data(format!("cannot write {}: {e}", path.display())))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    write(&dir.join("config.toml"), &cfg.to_toml())
}

fn load_scenes(out: &Layout) -> Result<Vec<Scene>, Failure> {
    let index = out.scenes_index();
    let text = fs::read_to_string(&index)
        .map_err(|e| data(format!("cannot read {}: {e} (run synth-scenes first)", index.display())))?;
    let root = index.parent().expect("index lives in scenes/");
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|id| load_scene(&root.join(id.trim())).map_err(data))
        .collect()
}

fn synth_scenes(cfg: &RunConfig, out: &Layout) -> Result<(), Failure> {
    let dir = out.dir("scenes")?;
    echo_config(cfg, &dir)?;
    let s = &cfg.scenes;
    let mut ids = Vec::new();
    for (class, count) in [
        (SizeClass::Small, s.small),
        (SizeClass::Medium, s.medium),
        (SizeClass::Large, s.large),
    ] {
        for i in 0..count {
            let seed = derive_seed(cfg.seed, &format!("scene-{}", class.name()), i as u64) % 1_000_000_000;
            let scene = synth_scene(seed, class, s.furniture_density, &s.params).map_err(data)?;
            if ids.contains(&scene.id) {
                return Err(Failure::Data(format!(
                    "scene id {} drawn twice; change the seed",
                    scene.id
                )));
            }
            save_scene(&scene, &dir.join(&scene.id)).map_err(data)?;
            ids.push(scene.id);
        }
    }
    write(&out.scenes_index(), &(ids.join("\n") + "\n"))?;
    info!("wrote {} scenes to {}", ids.len(), dir.display());
    Ok(())
}

fn gen_episodes(cfg: &RunConfig, out: &Layout) -> Result<(), Failure> {
    let scenes = load_scenes(out)?;
    let dir = out.dir("datasets")?;
    echo_config(cfg, &dir)?;
    let mut episodes = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let n = match cfg.episodes.per_scene {
            0 => episodes_per_scene(scene.size_class, cfg.episodes.factor),
            n => n,
        };
        let sampler = EpisodeSampler::new(scene, &cfg.episodes.params);
        for j in 0..n {
            match sampler.sample(derive_seed(cfg.seed, "episode", (si * 1_000_000 + j) as u64)) {
                Ok(e) => episodes.push(e),
                Err(e) => warn!("scene {}: episode {j} skipped: {e}", scene.id),
            }
        }
    }
    save_dataset(&episodes, &out.dataset()).map_err(data)?;
    let stats = compute_stats(&episodes).map_err(data)?;
    let json = serde_json::to_string_pretty(&stats).map_err(data)?;
    write(&dir.join("stats.json"), &(json + "\n"))?;
    info!("wrote {} episodes to {}", episodes.len(), out.dataset().display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, out: &Layout) -> Result<(), Failure> {
    let scenes = load_scenes(out)?;
    let episodes = load_dataset(&out.dataset())
        .map_err(|e| data(format!("{}: {e} (run gen-episodes first)", out.dataset().display())))?;
    let dir = out.dir("checkpoints")?;
    echo_config(cfg, &dir)?;
    let norm = Normalizer::from_episodes(&episodes).map_err(data)?;
    let td = TrainData::new(&episodes, &scenes, &cfg.sim, cfg.policy.plan_side).map_err(data)?;
    let tcfg = cfg.train_config();
    let (policy, log) = train(&td, cfg.variant, &cfg.policy, &tcfg, norm).map_err(data)?;
    let path = out.checkpoint(cfg.variant);
    save_checkpoint(&policy, Some(&tcfg), &path).map_err(data)?;
    let mut csv = String::from("step,total,noise,dist,pose\n");
    for (i, s) in log.steps.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{},{},{}", s.total, s.noise, s.dist, s.pose);
    }
    write(&dir.join(format!("{}_loss.csv", cfg.variant)), &csv)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, out: &Layout, checkpoints: &[PathBuf]) -> Result<(), Failure> {
    let scenes = load_scenes(out)?;
    let mut policies: HashMap<Variant, Policy> = HashMap::new();
    for p in checkpoints {
        let (policy, _) = load_checkpoint(p).map_err(|e| data(format!("{}: {e}", p.display())))?;
        policies.insert(policy.variant, policy);
    }
    for m in &cfg.eval.methods {
        let Some(v) = m.needs_policy() else { continue };
        if policies.contains_key(&v) {
            continue;
        }
        let p = out.checkpoint(v);
        let (policy, _) =
            load_checkpoint(&p).map_err(|e| data(format!("method {} needs {}: {e}", m.name, p.display())))?;
        policies.insert(v, policy);
    }
    let agents: Vec<_> = cfg
        .eval
        .methods
        .iter()
        .map(|m| (m.clone(), m.needs_policy().and_then(|v| policies.get(&v))))
        .collect();
    let res = run_benchmark(&agents, &scenes, &cfg.benchmark_config(), cfg.seed).map_err(data)?;
    for w in &res.warnings {
        warn!("{w}");
    }
    let dir = out.dir("results")?;
    echo_config(cfg, &dir)?;
    write_results(&res, &dir).map_err(data)?;
    for m in &cfg.eval.methods {
        if let Some(r) = res.table.get(&m.name, cfg.sim.tau_d, cfg.sim.tau_c) {
            info!(
                "{:<20} SR {:.3}  SPL {:.3}  ({} episodes)",
                m.name, r.sr, r.spl, r.n_episodes
            );
        }
    }
    info!("wrote {}", dir.display());
    Ok(())
}

fn render_cmd(cfg: &RunConfig, out: &Layout, scale: usize, max: Option<usize>) -> Result<(), Failure> {
    if scale == 0 {
        return Err(Failure::Usage("--scale must be positive".into()));
    }
    let results = out.results();
    let path = results.join("results.json");
    let text =
        fs::read_to_string(&path).map_err(|e| data(format!("cannot read {}: {e} (run eval first)", path.display())))?;
    let res: BenchmarkResult = serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let scenes: HashMap<String, Scene> = load_scenes(out)?.into_iter().map(|s| (s.id.clone(), s)).collect();
    let dir = out.dir("renders")?;
    echo_config(cfg, &dir)?;
    let mut methods: Vec<&str> = Vec::new();
    for r in &res.records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let n = max.unwrap_or(res.pairs.len()).min(res.pairs.len());
    for pair in &res.pairs[..n] {
        let scene = scenes
            .get(&pair.scene_id)
            .ok_or_else(|| Failure::Data(format!("results reference unknown scene {}", pair.scene_id)))?;
        let mut tracks = Vec::new();
        for m in &methods {
            let log_path = results
                .join("logs")
                .join(format!("{m}__{}__{}.jsonl", pair.scene_id, pair.pair_index));
            if log_path.exists() {
                tracks.push(Track {
                    scene_id: pair.scene_id.clone(),
                    start: pair.start,
                    log: read_step_log(&log_path).map_err(data)?,
                });
            }
        }
        let png = dir.join(format!("{}__{}.png", pair.scene_id, pair.pair_index));
        render_trajectory(scene, &tracks, pair.goal, scale, &png).map_err(data)?;
    }
    info!(
        "wrote {n} renders to {} (track colors follow method order: {})",
        dir.display(),
        methods.join(", ")
    );
    Ok(())
}

fn stats_cmd(out: &Layout, dataset: Option<PathBuf>) -> Result<(), Failure> {
    let path = dataset.unwrap_or_else(|| out.dataset());
    let episodes = load_dataset(&path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let classes: HashMap<String, SizeClass> = match load_scenes(out) {
        Ok(s) => s.into_iter().map(|s| (s.id, s.size_class)).collect(),
        Err(_) => HashMap::new(),
    };
    let mut groups: BTreeMap<&str, Vec<Episode>> = BTreeMap::new();
    for e in &episodes {
        if let Some(c) = classes.get(&e.scene_id) {
            groups.entry(c.name()).or_default().push(e.clone());
        }
    }
    let mut rows = vec![("all", compute_stats(&episodes).map_err(data)?)];
    for class in [SizeClass::Small, SizeClass::Medium, SizeClass::Large] {
        if let Some(g) = groups.get(class.name()) {
            rows.push((class.name(), compute_stats(g).map_err(data)?));
        }
    }
    print!("{}", stats_table(&rows));
    Ok(())
}

fn stats_table(rows: &[(&str, DatasetStats)]) -> String {
    let mut s = format!(
        "{:<8} {:>7} {:<14} {:>8} {:>8} {:>8} {:>8}\n",
        "split", "count", "metric", "min", "max", "mean", "median"
    );
    for (name, st) in rows {
        for (metric, v) in [("straight_line", st.straight_line), ("travel", st.travel)] {
            let _ = writeln!(
                s,
                "{name:<8} {:>7} {metric:<14} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                st.count, v.min, v.max, v.mean, v.median
            );
        }
    }
    s
}
