use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rsg_core::demo::{generate_demo, read_dataset, write_dataset, Demonstration};
use rsg_core::dependency::{
    compute_thresholds, discover, plan_to_goal, ClassifierThresholds, DependencyMatrix, GoalMode, GoalSearchConfig,
};
use rsg_core::eval::{demo_seed, evaluate, oracle_satisfies};
use rsg_core::fsm::compile;
use rsg_core::learner::{train, TrainConfig};
use rsg_core::model::{Classifier, Oracle, Theta};
use rsg_core::planner::{plan, PlannerConfig, Product};
use rsg_core::tl::{parse_task, SubgoalName, TaskAst};
use rsg_core::world::WorldSpec;

const DEPS_FORMAT: &str = "rsg-deps";
const DEPS_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "rsg", version, about = "Learn subgoal classifiers from demonstrations and plan with them")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "RSG_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations for a list of tasks.
    GenDemos {
        #[arg(long)]
        world: PathBuf,
        /// One task per line; blank lines and `#` comments are ignored.
        #[arg(long)]
        tasks: PathBuf,
        /// Demonstrations per task.
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit classifiers to a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML file with training settings; missing fields keep defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write one JSON line per epoch here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Plan for a task in a sampled scenario.
    Plan {
        #[arg(long)]
        world: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        task: String,
        /// Total expanded-node cap.
        #[arg(long, env = "RSG_BUDGET", default_value_t = 5000)]
        budget: usize,
    },
    /// Plan for a single final goal using discovered dependencies.
    PlanGoal {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// File written by `rsg deps`.
        #[arg(long)]
        deps: PathBuf,
        #[arg(long)]
        goal: String,
        /// Replace the discovered matrix with a uniform one.
        #[arg(long, conflicts_with = "blind")]
        uniform_deps: bool,
        /// Search for the goal directly, without intermediate subgoals.
        #[arg(long)]
        blind: bool,
        /// Expanded-node cap shared by all attempts.
        #[arg(long, env = "RSG_BUDGET", default_value_t = 25_000)]
        budget: usize,
        /// Run each seed in this range (e.g. `0..100`) instead of `--seed`.
        #[arg(long)]
        seeds: Option<String>,
        /// Write one CSV row per run here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Success rates on a task split.
    Eval {
        #[arg(long)]
        world: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Task list, one per line.
        #[arg(long)]
        split: PathBuf,
        /// Scenario seeds: `a..b` or a comma-separated list.
        #[arg(long, default_value = "0..100")]
        seeds: String,
        #[arg(long, env = "RSG_BUDGET", default_value_t = 5000)]
        budget: usize,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discover subgoal dependencies from a dataset.
    Deps {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the matrix as a text table.
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, required_unless_present = "oracle")]
    model: Option<PathBuf>,
    /// Use ground-truth classifiers instead of a model.
    #[arg(long, conflicts_with = "model")]
    oracle: bool,
}

#[derive(Serialize, Deserialize)]
struct DepsFile {
    format: String,
    version: u32,
    thresholds: ClassifierThresholds,
    matrix: DependencyMatrix,
}

enum Failure {
    Input(anyhow::Error),
    Planner(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenDemos {
            world,
            tasks,
            count,
            noise,
            out,
        } => gen_demos(&world, &tasks, count, noise, &out, cli.seed),
        Command::Train { data, config, out, log } => train_cmd(&data, config.as_deref(), &out, log.as_deref(), cli.seed),
        Command::Plan {
            world,
            model,
            task,
            budget,
        } => plan_cmd(&world, &model, &task, budget, cli.seed),
        Command::PlanGoal {
            world,
            model,
            deps,
            goal,
            uniform_deps,
            blind,
            budget,
            seeds,
            csv,
        } => {
            let mode = if blind { GoalMode::Blind } else { GoalMode::Guided };
            plan_goal_cmd(
                &world,
                &model,
                &deps,
                &goal,
                uniform_deps,
                mode,
                budget,
                seeds.as_deref(),
                cli.seed,
                csv.as_deref(),
            )
        }
        Command::Eval {
            world,
            model,
            split,
            seeds,
            budget,
            out,
        } => eval_cmd(&world, &model, &split, &seeds, budget, out.as_deref()),
        Command::Deps { data, model, out, table } => deps_cmd(&data, &model, &out, table.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(match f {
                Failure::Planner(_) => 2,
                Failure::Input(_) => 3,
                Failure::Other(_) => 1,
            })
        }
    }
}

fn report(f: &Failure) {
    match f {
        Failure::Input(e) => eprintln!("error: {e:#}"),
        Failure::Planner(msg) => eprintln!("planning failed: {msg}"),
        Failure::Other(e) => eprintln!("error: {e:#}"),
    }
}

fn read_world(path: &Path) -> anyhow::Result<WorldSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    WorldSpec::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_tasks(path: &Path) -> anyhow::Result<Vec<TaskAst>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        tasks.push(parse_task(line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    if tasks.is_empty() {
        bail!("{} lists no tasks", path.display());
    }
    Ok(tasks)
}

fn read_model(path: &Path) -> anyhow::Result<Theta> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Theta::deserialize(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn read_demos(path: &Path) -> anyhow::Result<Vec<Demonstration>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_dataset(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().context("seed range start")?;
        let b: u64 = b.trim().parse().context("seed range end")?;
        if a >= b {
            bail!("empty seed range {text}");
        }
        return Ok((a..b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad seed `{s}`")))
        .collect()
}

fn gen_demos(world: &Path, tasks: &Path, count: usize, noise: f64, out: &Path, seed: u64) -> Outcome {
    let spec = read_world(world)?;
    let tasks = read_tasks(tasks)?;
    if !(0.0..=1.0).contains(&noise) {
        return Err(anyhow!("noise must lie in [0, 1]").into());
    }
    let mut demos = Vec::new();
    let mut empty = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let mut made = 0;
        for k in 0..count {
            match generate_demo(&spec, task, demo_seed(seed, t, k), noise) {
                Ok(d) if d.satisfies_task() => {
                    demos.push(d);
                    made += 1;
                }
                Ok(_) => eprintln!("{task}: demo {k} failed validation"),
                Err(e) => eprintln!("{task}: demo {k}: {e}"),
            }
        }
        if made == 0 && count > 0 {
            empty.push(task.to_string());
        }
    }
    let mut w = create(out)?;
    write_dataset(&mut w, &demos).context("writing dataset")?;
    w.flush().context("writing dataset")?;
    eprintln!("wrote {} demonstrations to {}", demos.len(), out.display());
    if !empty.is_empty() {
        return Err(Failure::Planner(format!("no demonstrations for: {}", empty.join("; "))));
    }
    Ok(())
}

fn train_cmd(data: &Path, config: Option<&Path>, out: &Path, log: Option<&Path>, seed: u64) -> Outcome {
    let demos = read_demos(data)?;
    let mut config: TrainConfig = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    config.seed = seed;
    let Some(first) = demos.first() else {
        return Err(anyhow!("{} holds no demonstrations", data.display()).into());
    };
    let theta = Theta::for_world(&first.world);
    let mut log_file = log.map(create).transpose()?;
    let mut log_err = None;
    let outcome = train(&demos, theta, &config, |record, _| {
        eprintln!(
            "epoch {:>3}  score {:>9.4}  accuracy {:.3}  {:.1}s",
            record.epoch, record.mean_score, record.contrastive_accuracy, record.wall_time
        );
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(record).expect("log record serializes");
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(e);
            }
        }
    })
    .map_err(|e| Failure::Other(e.into()))?;
    if let Some(e) = log_err {
        return Err(Failure::Other(anyhow!(e).context("writing training log")));
    }
    if let Some(mut f) = log_file {
        f.flush().context("writing training log")?;
    }
    std::fs::write(out, outcome.theta.serialize()).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn plan_cmd(world: &Path, model: &ModelArgs, task: &str, budget: usize, seed: u64) -> Outcome {
    let spec = read_world(world)?;
    let task = parse_task(task).context("parsing --task")?;
    let config = PlannerConfig {
        global_budget: Some(budget),
        seed,
        ..PlannerConfig::test()
    };
    let scenario = spec.sample(seed, Some(&task)).context("sampling scenario")?;
    let fsm = compile(&task);
    let theta;
    let classifier: &dyn Classifier = if model.oracle {
        &Oracle
    } else {
        theta = read_model(model.model.as_deref().expect("clap requires --model"))?;
        theta.check_world(&scenario.world).context("model does not fit world")?;
        &theta
    };
    let product = Product::new(&scenario.world, &fsm, classifier, config.lambda).context("building search")?;
    print!("{}", scenario.world.render(&scenario.start));
    match plan(&product, &config, product.start(scenario.start)) {
        Ok(p) => {
            println!();
            print!("{}", p.trace(&product));
            println!();
            print!("{}", scenario.world.render_path(&p.env_states()));
            let ok = oracle_satisfies(&scenario.world, &p.env_states(), &task);
            println!(
                "cost {:.4}  expanded {}  steps {}  satisfied {}",
                p.cost,
                p.expanded,
                p.primitive_actions().len(),
                ok
            );
            Ok(())
        }
        Err(f) => {
            println!("cost -  expanded {}  steps -  satisfied false", f.expanded);
            Err(Failure::Planner(format!("no plan within {budget} expanded nodes")))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn plan_goal_cmd(
    world: &Path,
    model: &Path,
    deps: &Path,
    goal: &str,
    uniform: bool,
    mode: GoalMode,
    budget: usize,
    seeds: Option<&str>,
    seed: u64,
    csv: Option<&Path>,
) -> Outcome {
    let seeds = match seeds {
        Some(text) => parse_seeds(text)?,
        None => vec![seed],
    };
    let spec = read_world(world)?;
    let theta = read_model(model)?;
    let text = std::fs::read_to_string(deps).with_context(|| format!("reading {}", deps.display()))?;
    let file: DepsFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", deps.display()))?;
    if file.format != DEPS_FORMAT || file.version != DEPS_VERSION {
        return Err(anyhow!("{} is not a dependency file this version understands", deps.display()).into());
    }
    if file.matrix.subgoals != theta.subgoals() {
        return Err(anyhow!("dependency file and model disagree on subgoals").into());
    }
    let goal: SubgoalName = goal.parse().map_err(|e| anyhow!("bad --goal: {e}"))?;
    theta.index_of(&goal).map_err(|e| anyhow!("{e}"))?;
    let matrix = if uniform {
        DependencyMatrix::uniform(theta.subgoals().to_vec())
    } else {
        file.matrix
    };
    let mut rows = Vec::new();
    let mut failures = 0;
    for &seed in &seeds {
        let scenario = spec.sample(seed, None).context("sampling scenario")?;
        theta.check_world(&scenario.world).context("model does not fit world")?;
        let defaults = GoalSearchConfig::default();
        let config = GoalSearchConfig {
            planner: PlannerConfig {
                seed,
                ..defaults.planner.clone()
            },
            node_cap: budget,
            mode,
            ..defaults
        };
        let result = plan_to_goal(&goal, &scenario.world, &theta, &matrix, scenario.start, &config);
        let single = seeds.len() == 1;
        match result {
            Ok(found) => {
                let states = found.plan.env_states();
                let o = scenario.world.subgoal_index(&goal).context("goal not in world")?;
                let achieved = states.last().is_some_and(|s| scenario.world.goal_holds(o, s));
                if single {
                    print!("{}", scenario.world.render_path(&states));
                    println!("instruction: {}", found.instruction);
                }
                println!(
                    "seed {seed}  expanded {}  attempts {}  steps {}  achieved {achieved}",
                    found.expanded,
                    found.attempts,
                    found.plan.primitive_actions().len()
                );
                rows.push((seed, true, achieved, found.expanded, found.attempts, found.instruction.to_string()));
            }
            Err(f) => {
                failures += 1;
                println!("seed {seed}  expanded {}  attempts {}  no plan", f.expanded, f.attempts);
                rows.push((seed, false, false, f.expanded, f.attempts, String::new()));
            }
        }
    }
    if let Some(path) = csv {
        let mut w = create(path)?;
        let mode = match (mode, uniform) {
            (GoalMode::Blind, _) => "blind",
            (GoalMode::Guided, true) => "uniform",
            (GoalMode::Guided, false) => "guided",
        };
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "seed,mode,goal,found,achieved,expanded,attempts,instruction")?;
            for (seed, found, achieved, expanded, attempts, instr) in &rows {
                writeln!(w, "{seed},{mode},{goal},{found},{achieved},{expanded},{attempts},\"{instr}\"")?;
            }
            w.flush()
        };
        write().with_context(|| format!("writing {}", path.display()))?;
    }
    if failures == seeds.len() {
        return Err(Failure::Planner(format!("no plan for {goal} within {budget} expanded nodes")));
    }
    Ok(())
}

fn eval_cmd(world: &Path, model: &ModelArgs, split: &Path, seeds: &str, budget: usize, out: Option<&Path>) -> Outcome {
    let spec = read_world(world)?;
    let tasks = read_tasks(split)?;
    let seeds = parse_seeds(seeds)?;
    let config = PlannerConfig {
        global_budget: Some(budget),
        ..PlannerConfig::test()
    };
    let report = if model.oracle {
        evaluate(&spec, &Oracle, &tasks, &seeds, &config)
    } else {
        let theta = read_model(model.model.as_deref().expect("clap requires --model"))?;
        evaluate(&spec, &theta, &tasks, &seeds, &config)
    };
    println!("{:<50} {:>8} {:>10} {:>10}", "task", "success", "cost", "expanded");
    for t in &report.tasks {
        println!(
            "{:<50} {:>8.3} {:>10.4} {:>10.1}",
            t.task, t.success_rate, t.mean_cost, t.mean_expanded
        );
    }
    println!(
        "overall success {:.3} over {} runs in {:.1}s",
        report.success_rate,
        tasks.len() * seeds.len(),
        report.wall_time
    );
    if let Some(path) = out {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &report).context("writing report")?;
        writeln!(w).and_then(|_| w.flush()).context("writing report")?;
    }
    Ok(())
}

fn deps_cmd(data: &Path, model: &Path, out: &Path, table: Option<&Path>) -> Outcome {
    let demos = read_demos(data)?;
    if demos.is_empty() {
        return Err(anyhow!("{} holds no demonstrations", data.display()).into());
    }
    let theta = read_model(model)?;
    for d in &demos {
        theta.check_world(&d.world).context("model does not fit dataset")?;
    }
    let thresholds = compute_thresholds(&demos, &theta);
    let matrix = discover(&demos, &theta, &thresholds);
    for (o, name) in matrix.subgoals.iter().enumerate() {
        let top: Vec<String> = matrix
            .top_predecessors(o, 3)
            .iter()
            .map(|(p, v)| format!("{p} {v:.3}"))
            .collect();
        println!("{name}: {}", if top.is_empty() { "-".to_string() } else { top.join(", ") });
    }
    if let Some(path) = table {
        std::fs::write(path, matrix.to_string()).with_context(|| format!("writing {}", path.display()))?;
    }
    let file = DepsFile {
        format: DEPS_FORMAT.into(),
        version: DEPS_VERSION,
        thresholds,
        matrix,
    };
    let mut w = create(out)?;
    serde_json::to_writer(&mut w, &file).context("writing dependency file")?;
    writeln!(w).and_then(|_| w.flush()).context("writing dependency file")?;
    Ok(())
}
