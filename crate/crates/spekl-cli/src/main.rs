//! `spekl`: run, attack, transform and check toy kernels.
//!
//! Exit codes: 0 ok/safe, 1 usage or parse failure, 2 unsafe/attack
//! succeeded, 3 budget exceeded.

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use spekl_core::analysis::classic_checks::{
    check_kernel_safety, check_layout_ni_system, check_semantic_equivalence,
    estimate_unsafe_probability, exact_unsafe_probability, unsafe_probability_bound,
    EquivalenceVerdict,
};
use spekl_core::analysis::spec_checks::{check_safety_imposition, check_spec_kernel_safety};
use spekl_core::analysis::{layout_to_map, ExplorationBudget, Verdict};
use spekl_core::buffer::BufferedMemory;
use spekl_core::casestudy::{self, AttackKind};
use spekl_core::classic::{self, Frame, Mode, Outcome, RegisterMap, TraceRecord};
use spekl_core::lang::parse::{parse_cmd_text, parse_system};
use spekl_core::lang::print::system_to_ksl;
use spekl_core::lang::{Expr, Instr, System, Value};
use spekl_core::layout::{compose, delta_lower_bound, sample_layout, LayoutDistribution};
use spekl_core::specsem::{spec_run_steps_only, spec_trace_record};
use spekl_core::transform::Transformation;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "spekl", about = "toy-kernel speculation laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for layout sampling and randomized checks.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// User address-space size override.
    #[arg(long, global = true)]
    kappa_u: Option<u64>,
    /// Kernel address-space size override.
    #[arg(long, global = true)]
    kappa_k: Option<u64>,
    /// Slot size of the randomization scheme.
    #[arg(long, global = true, default_value_t = 2)]
    theta: u64,
    /// Step budget for runs.
    #[arg(long, global = true, default_value_t = 10_000)]
    fuel: u64,
    /// Emit machine-readable JSON instead of prose.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Args)]
struct FileArg {
    /// Path to a `.ksl` file, or the name of a bundled study
    /// (sigma6, msgpassing, msgpassing-safe, sc-leak, single-store, probe4,
    /// scope-extrusion, empty).
    file: String,
}

#[derive(Subcommand)]
enum Command {
    /// Classic run of a system-call entry (or an empty program).
    Run {
        #[command(flatten)]
        file: FileArg,
        /// System call to invoke.
        #[arg(long)]
        sys: Option<String>,
        /// Arguments for the invocation (integers, `true`, `false`, `nil`).
        #[arg(long, num_args = 0.., allow_hyphen_values = true)]
        args: Vec<String>,
        /// Print a JSON line per step.
        #[arg(long, value_name = "FORMAT")]
        trace: Option<String>,
    },
    /// Step-only speculative run of a system call, printing observations.
    SpecRun {
        #[command(flatten)]
        file: FileArg,
        #[arg(long)]
        sys: String,
        #[arg(long, num_args = 0.., allow_hyphen_values = true)]
        args: Vec<String>,
        #[arg(long, value_name = "FORMAT")]
        trace: Option<String>,
    },
    /// Run a bundled attack against a system (optionally transformed first).
    Attack {
        #[command(flatten)]
        file: FileArg,
        /// attack-a | attack-b | attack-c
        attack: String,
        /// Apply a pass before attacking: simple | opt | nospec.
        #[arg(long)]
        transform: Option<String>,
    },
    /// Apply a pass and print (or write) the transformed system.
    Transform {
        #[command(flatten)]
        file: FileArg,
        /// simple | opt | nospec
        #[arg(long)]
        pass: String,
        /// Output path; stdout when omitted.
        #[arg(short, long)]
        output: Option<String>,
    },
    /// Check a property: ks | sks | lni | sclni | equiv | imposes | delta.
    Check {
        #[command(flatten)]
        file: FileArg,
        #[arg(long)]
        property: String,
        /// Second system for `equiv`.
        #[arg(long)]
        against: Option<String>,
        /// Trials for `equiv`.
        #[arg(long, default_value_t = 1000)]
        trials: u64,
    },
    /// Attack-effectiveness matrix over the identity system and the three
    /// passes.
    Table1 {
        #[command(flatten)]
        file: FileArg,
    },
    /// Probe-failure bound of the slot scheme, with a Monte-Carlo check.
    Delta {
        #[command(flatten)]
        file: FileArg,
        /// Trials for the Monte-Carlo side.
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        /// System call to probe (defaults to the first one).
        #[arg(long)]
        sys: Option<String>,
    },
}

fn load_system(cli: &Cli, name: &str) -> Result<System, String> {
    let source = match casestudy::bundled(name) {
        Some(src) => src.to_string(),
        None => std::fs::read_to_string(name).map_err(|e| format!("{name}: {e}"))?,
    };
    let mut sys = parse_system(&source).map_err(|e| format!("{name}: {e}"))?;
    if let Some(k) = cli.kappa_u {
        sys.kappa_user = k;
    }
    if let Some(k) = cli.kappa_k {
        sys.kappa_kernel = k;
    }
    let diags = sys.validate();
    if !diags.is_empty() {
        return Err(format!(
            "{name}: invalid system:\n{}",
            diags.iter().map(|d| format!("  - {d}")).collect::<Vec<_>>().join("\n")
        ));
    }
    Ok(sys)
}

fn parse_args(raw: &[String]) -> Result<Vec<Value>, String> {
    raw.iter()
        .map(|s| match s.as_str() {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            "nil" => Ok(Value::Nil),
            other => other
                .parse::<i64>()
                .map(Value::Int)
                .map_err(|_| format!("cannot parse argument '{other}'")),
        })
        .collect()
}

fn budget_from(cli: &Cli) -> ExplorationBudget {
    ExplorationBudget { theta: cli.theta, fuel: cli.fuel, ..ExplorationBudget::default() }
}

fn outcome_code(outcome: &Outcome) -> ExitCode {
    match outcome {
        Outcome::Unsafe => ExitCode::from(2),
        _ => ExitCode::SUCCESS,
    }
}

fn verdict_code(verdict: &Verdict) -> ExitCode {
    match verdict {
        Verdict::Safe { .. } => ExitCode::SUCCESS,
        Verdict::Unsafe { .. } => ExitCode::from(2),
        Verdict::BudgetExceeded => ExitCode::from(3),
    }
}

fn report_verdict(cli: &Cli, property: &str, verdict: &Verdict, elapsed_ms: u128) -> ExitCode {
    let interference = matches!(property, "lni" | "sclni");
    if cli.json {
        let witness = match verdict {
            Verdict::Unsafe { witness } => serde_json::to_value(witness).ok(),
            _ => None,
        };
        println!(
            "{}",
            json!({
                "property": property,
                "verdict": verdict.label(interference),
                "witness": witness,
                "budget": serde_json::to_value(budget_from(cli)).unwrap(),
                "elapsed_ms": elapsed_ms,
            })
        );
    } else {
        println!("{property}: {}", verdict.label(interference));
        if let Verdict::Unsafe { witness } = verdict {
            println!("  entry: {:?}", witness.entry);
            println!("  layout: {:?}", witness.layout);
            if let Some(b) = &witness.layout_b {
                println!("  layout-b: {b:?}");
            }
            println!("  directives: {:?}", witness.directives);
            println!("  final: {}", witness.final_tag);
        }
    }
    verdict_code(verdict)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, String> {
    match &cli.command {
        Command::Run { file, sys, args, trace } => {
            let system = load_system(cli, &file.file)?;
            let mut rng = spekl_core::analysis::gen::rng_from_seed(cli.seed);
            let dist = LayoutDistribution::SlotUniform { theta: cli.theta };
            let layout = sample_layout(&system, &dist, &mut rng).map_err(|e| e.to_string())?;
            let entry = match sys {
                Some(name) => {
                    if !system.syscalls.contains_key(name) {
                        return Err(format!("unknown syscall '{name}'"));
                    }
                    vec![Instr::Syscall(
                        name.clone(),
                        parse_args(args)?.into_iter().map(Expr::Const).collect(),
                    )]
                }
                None => parse_cmd_text("(skip)", 50_000).map_err(|e| e.to_string())?,
            };
            let mut steps: Vec<TraceRecord> = Vec::new();
            let recording = trace.as_deref() == Some("json");
            let outcome = classic::run_traced(
                &system,
                &layout,
                entry,
                RegisterMap::initial(),
                Mode::User,
                cli.fuel,
                recording.then_some(&mut steps),
            );
            if recording {
                for record in &steps {
                    println!("{}", serde_json::to_string(record).unwrap());
                }
            }
            if cli.json {
                println!(
                    "{}",
                    json!({
                        "outcome": outcome.tag(),
                        "ret": match &outcome {
                            Outcome::Terminated { ret, .. } => Some(ret.to_string()),
                            _ => None,
                        },
                        "layout": layout_to_map(&layout),
                    })
                );
            } else {
                match &outcome {
                    Outcome::Terminated { ret, .. } => println!("terminated: ret = {ret}"),
                    other => println!("{}", other.tag()),
                }
            }
            Ok(outcome_code(&outcome))
        }
        Command::SpecRun { file, sys, args, trace } => {
            let system = load_system(cli, &file.file)?;
            let mut rng = spekl_core::analysis::gen::rng_from_seed(cli.seed);
            let dist = LayoutDistribution::SlotUniform { theta: cli.theta };
            let layout = sample_layout(&system, &dist, &mut rng).map_err(|e| e.to_string())?;
            let body = system
                .syscalls
                .get(sys)
                .cloned()
                .ok_or_else(|| format!("unknown syscall '{sys}'"))?;
            let frame = Frame::new(
                body,
                RegisterMap::with_args(&parse_args(args)?),
                Mode::Kernel(sys.clone()),
            );
            let mem = BufferedMemory::new(compose(&system, &layout, &system.store));
            if trace.as_deref() == Some("json") {
                let mut stack = spekl_core::specsem::SpecStack::single(
                    spekl_core::specsem::SpecConfig::start(frame.clone(), mem.clone(), false),
                );
                let mut budget = cli.fuel;
                while budget > 0 && !stack.is_terminal() {
                    match spekl_core::specsem::spec_step(
                        &system,
                        &layout,
                        &stack,
                        &spekl_core::Directive::Step,
                    ) {
                        Ok((next, obs)) => {
                            let record =
                                spec_trace_record(&spekl_core::Directive::Step, &obs, &next);
                            println!("{}", serde_json::to_string(&record).unwrap());
                            stack = next;
                        }
                        Err(_) => break,
                    }
                    budget -= 1;
                }
            }
            let (outcome, observations) =
                spec_run_steps_only(&system, &layout, frame, mem, cli.fuel);
            if cli.json {
                println!(
                    "{}",
                    json!({
                        "outcome": outcome.tag(),
                        "observations": observations.iter().map(|o| o.to_string()).collect::<Vec<_>>(),
                    })
                );
            } else {
                println!("{}", outcome.tag());
                println!("observations: {}", observations.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(", "));
            }
            Ok(outcome_code(&outcome))
        }
        Command::Attack { file, attack, transform } => {
            let base = load_system(cli, &file.file)?;
            let labels = casestudy::probe_labels(&base)
                .ok_or("this system does not expose the probe syscalls s/t/u")?;
            let system = match transform {
                Some(name) => Transformation::from_name(name)
                    .ok_or_else(|| format!("unknown pass '{name}'"))?
                    .apply_system(&base),
                None => base.clone(),
            };
            let kind = AttackKind::from_name(attack)
                .ok_or_else(|| format!("unknown attack '{attack}'"))?;
            let report = casestudy::run_attack(&system, &labels, kind, cli.theta, cli.fuel);
            if cli.json {
                println!("{}", serde_json::to_string(&report).unwrap());
            } else if report.succeeded {
                println!(
                    "{}: violation reached after {} runs, discovered address {}",
                    report.attack,
                    report.runs,
                    report.discovered.map(|a| a.to_string()).unwrap_or_default()
                );
                println!("observations: {}", report.log.join(", "));
            } else {
                println!("{}: blocked within budget ({} runs)", report.attack, report.runs);
            }
            Ok(if report.succeeded { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Transform { file, pass, output } => {
            let system = load_system(cli, &file.file)?;
            let pass = Transformation::from_name(pass)
                .ok_or_else(|| format!("unknown pass '{pass}'"))?;
            let rendered = system_to_ksl(&pass.apply_system(&system));
            match output {
                Some(path) => std::fs::write(path, rendered).map_err(|e| e.to_string())?,
                None => print!("{rendered}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { file, property, against, trials } => {
            let system = load_system(cli, &file.file)?;
            let budget = budget_from(cli);
            let started = std::time::Instant::now();
            let verdict = match property.as_str() {
                "ks" => check_kernel_safety(&system, &budget),
                "sks" => check_spec_kernel_safety(&system, &budget),
                "lni" => check_layout_ni_system(&system, &budget),
                "sclni" => {
                    let layouts = spekl_core::layout::enumerate_layouts(
                        &system,
                        &LayoutDistribution::SlotUniform { theta: cli.theta },
                        budget.layout_cap,
                    )
                    .map_err(|e| e.to_string())?;
                    let pairs: Vec<_> = layouts
                        .iter()
                        .enumerate()
                        .flat_map(|(i, (a, _))| {
                            layouts[i + 1..].iter().map(move |(b, _)| (a.clone(), b.clone()))
                        })
                        .collect();
                    let mut verdict = Verdict::Safe { exhausted: true };
                    for name in system.syscalls.keys() {
                        match spekl_core::analysis::spec_checks::check_sc_layout_ni(
                            &system, name, &pairs, &budget,
                        ) {
                            v @ Verdict::Unsafe { .. } => {
                                verdict = v;
                                break;
                            }
                            Verdict::Safe { exhausted: false } => {
                                verdict = Verdict::Safe { exhausted: false }
                            }
                            _ => {}
                        }
                    }
                    verdict
                }
                "imposes" => check_safety_imposition(&system, &budget),
                "equiv" => {
                    let other_name =
                        against.as_ref().ok_or("equiv needs --against <file>")?;
                    let other = load_system(cli, other_name)?;
                    let verdict = check_semantic_equivalence(
                        &system, &other, *trials, cli.seed, cli.fuel,
                    );
                    let code = match &verdict {
                        EquivalenceVerdict::Equivalent { trials, fuel_limited_pairs } => {
                            if cli.json {
                                println!(
                                    "{}",
                                    json!({
                                        "property": "equiv",
                                        "verdict": "equivalent",
                                        "trials": trials,
                                        "fuel_limited_pairs": fuel_limited_pairs,
                                    })
                                );
                            } else {
                                println!(
                                    "equiv: equivalent over {trials} trials ({fuel_limited_pairs} fuel-limited)"
                                );
                            }
                            ExitCode::SUCCESS
                        }
                        EquivalenceVerdict::Counterexample { attacker, layout_seed, left, right } => {
                            if cli.json {
                                println!(
                                    "{}",
                                    json!({
                                        "property": "equiv",
                                        "verdict": "counterexample",
                                        "attacker": attacker,
                                        "trial": layout_seed,
                                        "left": left,
                                        "right": right,
                                    })
                                );
                            } else {
                                println!("equiv: counterexample at trial {layout_seed}");
                                println!("  attacker: {attacker}");
                                println!("  outcomes: {left} vs {right}");
                            }
                            ExitCode::from(2)
                        }
                    };
                    return Ok(code);
                }
                "delta" => {
                    let bound = delta_lower_bound(&system, cli.theta).map_err(|e| e.to_string())?;
                    if cli.json {
                        println!(
                            "{}",
                            json!({
                                "property": "delta",
                                "delta": bound.to_string(),
                                "unsafe_bound": unsafe_probability_bound(&system, cli.theta),
                            })
                        );
                    } else {
                        println!("delta: {bound} (violation probability bound {})",
                            unsafe_probability_bound(&system, cli.theta));
                    }
                    return Ok(ExitCode::SUCCESS);
                }
                other => return Err(format!("unknown property '{other}'")),
            };
            Ok(report_verdict(cli, property, &verdict, started.elapsed().as_millis()))
        }
        Command::Table1 { file } => {
            let system = load_system(cli, &file.file)?;
            let matrix = casestudy::attack_matrix(&system, cli.theta, cli.fuel);
            if cli.json {
                println!("{}", serde_json::to_string(&matrix).unwrap());
            } else {
                println!("{:<10} {:>9} {:>9} {:>9}", "system", "attack-a", "attack-b", "attack-c");
                for (name, reports) in &matrix.rows {
                    let cells: Vec<&str> =
                        reports.iter().map(|r| if r.succeeded { "breaks" } else { "blocked" }).collect();
                    println!("{:<10} {:>9} {:>9} {:>9}", name, cells[0], cells[1], cells[2]);
                }
            }
            let identity_broken =
                matrix.rows[0].1.iter().all(|r| r.succeeded);
            let transforms_block = matrix.rows[1..]
                .iter()
                .all(|(_, reports)| reports.iter().all(|r| !r.succeeded));
            Ok(if identity_broken && transforms_block {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::Delta { file, trials, sys } => {
            let system = load_system(cli, &file.file)?;
            let bound = delta_lower_bound(&system, cli.theta).map_err(|e| e.to_string())?;
            let dist = LayoutDistribution::SlotUniform { theta: cli.theta };
            let syscall = match sys {
                Some(name) => Some(name.clone()),
                None => system.syscalls.keys().next().cloned(),
            };
            let (estimate, radius, exact) = match syscall {
                Some(name) => {
                    let attacker = vec![Instr::Syscall(
                        name,
                        vec![Expr::int(system.kappa_user as i64)],
                    )];
                    let (e, r) = estimate_unsafe_probability(
                        &system, &attacker, &dist, *trials, cli.seed, cli.fuel,
                    );
                    let exact =
                        exact_unsafe_probability(&system, &attacker, &dist, 4096, cli.fuel);
                    (e, r, Some(exact))
                }
                None => (0.0, 0.0, None),
            };
            if cli.json {
                println!(
                    "{}",
                    json!({
                        "delta": bound.to_string(),
                        "unsafe_bound": unsafe_probability_bound(&system, cli.theta),
                        "estimate": estimate,
                        "wilson_radius": radius,
                        "exact": exact.map(|e| e.to_string()),
                        "trials": trials,
                    })
                );
            } else {
                println!("delta lower bound: {bound}");
                println!("violation probability bound: {}", unsafe_probability_bound(&system, cli.theta));
                println!("monte-carlo estimate: {estimate:.4} +/- {radius:.4} ({trials} trials)");
                if let Some(exact) = exact {
                    println!("exact over enumerated layouts: {exact}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
