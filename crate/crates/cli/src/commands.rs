use std::path::{Path, PathBuf};

use clap::Args;
use nalgebra::DVector;
use rayon::prelude::*;
use revpers::anonymizer::{reconstruction_error, recovery_batch, Anonymized};
use revpers::inversion::invert;
use revpers::metrics::TradeoffRow;
use revpers::rng::{derive_seed, splitmix64};
use revpers::world::{posterior_attribute, posterior_identity, sample_world};
use revpers::{
    anonymize_batch, evaluate_batch, sweep, tradeoff_table, AttributeLabel, AttributeMode, Condition, GmmWorld,
    GuidanceConfig, Guide, IdentityLabel, MetricsRecord, NoiseSchedule, Solver,
};
use serde::Serialize;

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::grid::parse_grid;
use crate::plot;
use crate::table::{fmt_vec, vector_header, write_atomic, Table};

/// Flags shared by every command that runs the pipeline.
#[derive(Debug, Clone, Default, Args)]
pub struct GuidanceFlags {
    /// Classifier-free guidance scale (negative pushes away from the identity)
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_cfg: Option<f64>,
    /// Identity adapter scale
    #[arg(long)]
    pub lambda_ipa: Option<f64>,
    /// dpm_pp_2m, ddpm_first_order, or ddim
    #[arg(long)]
    pub solver: Option<Solver>,
    /// Keep each input's attribute
    #[arg(long, conflicts_with = "set_attr")]
    pub keep_attr: bool,
    /// Force attribute label L on every output
    #[arg(long, value_name = "L")]
    pub set_attr: Option<u32>,
}

impl GuidanceFlags {
    fn apply(&self, cfg: &mut Config) {
        if let Some(v) = self.lambda_cfg {
            cfg.guidance.lambda_cfg = v;
        }
        if let Some(v) = self.lambda_ipa {
            cfg.guidance.lambda_ipa = v;
        }
        if let Some(v) = self.solver {
            cfg.guidance.solver = v;
        }
        if self.keep_attr {
            cfg.run.attribute_mode = AttributeMode::Keep;
        }
        if let Some(a) = self.set_attr {
            cfg.run.attribute_mode = AttributeMode::Set(AttributeLabel(a));
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub struct Ctx {
    pub cfg: Config,
    pub world: GmmWorld,
    pub sched: NoiseSchedule,
}

impl Ctx {
    pub fn load(global: &Global, flags: Option<&GuidanceFlags>, samples: Option<usize>) -> CliResult<Self> {
        let mut cfg = Config::load(global.config.as_deref())?;
        if let Some(seed) = global.seed {
            cfg.run.seed = seed;
        }
        if let Some(f) = flags {
            f.apply(&mut cfg);
        }
        if let Some(n) = samples {
            cfg.run.samples = n;
        }
        let world = cfg.world()?;
        let sched = cfg.schedule()?;
        cfg.check(&world, &sched)?;
        Ok(Self { cfg, world, sched })
    }

    fn seed(&self) -> u64 {
        self.cfg.run.seed
    }

    fn mode(&self) -> AttributeMode {
        self.cfg.run.attribute_mode
    }

    fn sample_inputs(&self) -> CliResult<Table> {
        samples_table(&self.world, self.cfg.run.samples, self.seed())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Internal(format!("json: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn samples_table(w: &GmmWorld, n: usize, seed: u64) -> CliResult<Table> {
    let mut header = vector_header("x_", w.dim());
    header.extend(["identity".into(), "attribute".into()]);
    let mut t = Table::new(header);
    for p in sample_world(w, n, seed)? {
        let mut row: Vec<String> = fmt_vec(&p.point).collect();
        row.push(p.identity.0.to_string());
        row.push(p.attribute.0.to_string());
        t.push(row);
    }
    Ok(t)
}

fn rate(flags: impl Iterator<Item = bool>) -> f64 {
    let (hits, n) = flags.fold((0usize, 0usize), |(h, n), f| (h + f as usize, n + 1));
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

pub fn cmd_config() -> CliResult<()> {
    print!("{}", crate::config::DEFAULT_CONFIG);
    Ok(())
}

pub fn cmd_world(global: &Global, out: &Path, samples: Option<usize>) -> CliResult<()> {
    let mut cfg = Config::load(global.config.as_deref())?;
    if let Some(seed) = global.seed {
        cfg.run.seed = seed;
    }
    let n = samples.unwrap_or(cfg.world.samples);
    let world = cfg.world()?;
    write_json(&out.join("world.json"), &world.to_spec())?;
    samples_table(&world, n, cfg.run.seed)?.write(&out.join("samples.csv"))?;
    eprintln!("wrote {} components and {n} samples to {}", world.components().len(), out.display());
    Ok(())
}

struct BatchRun {
    outputs: Vec<Anonymized>,
    record: MetricsRecord,
    max_reconstruction_error: f64,
}

fn run_batch(ctx: &Ctx, g: &GuidanceConfig, inputs: &[DVector<f64>]) -> CliResult<BatchRun> {
    let (w, s, mode, seed) = (&ctx.world, &ctx.sched, ctx.mode(), ctx.seed());
    let outputs = anonymize_batch(inputs, w, s, g, mode, seed)?;
    let guide = Guide::new(w, s, *g)?;
    let max_reconstruction_error = outputs
        .par_iter()
        .map(|a| reconstruction_error(&guide, &a.traj))
        .collect::<revpers::Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let outs: Vec<_> = outputs.iter().map(|a| a.output.clone()).collect();
    let targets: Vec<AttributeLabel> = outputs.iter().map(|a| a.report.target_attribute).collect();
    let record = evaluate_batch(inputs, &outs, Some(&targets), w, g, seed)?;
    Ok(BatchRun { outputs, record, max_reconstruction_error })
}

#[derive(Serialize)]
struct AnonymizeReport {
    reid_rate: f64,
    attr_accuracy: f64,
    quality: f64,
    mean_identity_distance: f64,
    max_reconstruction_error: f64,
    max_output_deviation: f64,
    n: usize,
    seed: u64,
    attribute_mode: AttributeMode,
    config: GuidanceConfig,
}

pub fn cmd_anonymize(
    global: &Global,
    flags: &GuidanceFlags,
    input: Option<&Path>,
    out: &Path,
    samples: Option<usize>,
) -> CliResult<()> {
    let ctx = Ctx::load(global, Some(flags), samples)?;
    let table = match input {
        Some(p) => Table::read(p)?,
        None => ctx.sample_inputs()?,
    };
    let inputs = table.vectors("x_")?;
    let run = run_batch(&ctx, &ctx.cfg.guidance, &inputs)?;

    let mut header = table.header.clone();
    header.extend(vector_header("out_", ctx.world.dim()));
    header.extend(
        [
            "input_identity",
            "output_identity",
            "reid",
            "target_attribute",
            "output_attribute",
            "attr_match",
            "identity_distance",
        ]
        .map(String::from),
    );
    let mut out_table = Table::new(header);
    let mut max_dev: f64 = 0.0;
    for ((row, x), a) in table.rows.iter().zip(&inputs).zip(&run.outputs) {
        max_dev = max_dev.max((&a.output - x).norm() / x.norm().max(f64::MIN_POSITIVE));
        let r = &a.report;
        let mut cells = row.clone();
        cells.extend(fmt_vec(&a.output));
        cells.extend([
            r.input_identity.0.to_string(),
            r.output_identity.0.to_string(),
            r.reid.to_string(),
            r.target_attribute.0.to_string(),
            r.output_attribute.0.to_string(),
            r.attr_match.to_string(),
            r.identity_distance.to_string(),
        ]);
        out_table.push(cells);
    }
    out_table.write(&out.join("anonymized.csv"))?;
    let rec = &run.record;
    let report = AnonymizeReport {
        reid_rate: rec.reid_rate,
        attr_accuracy: rec.attr_accuracy,
        quality: rec.quality,
        mean_identity_distance: rec.mean_identity_distance,
        max_reconstruction_error: run.max_reconstruction_error,
        max_output_deviation: max_dev,
        n: rec.n,
        seed: rec.seed,
        attribute_mode: ctx.mode(),
        config: rec.config,
    };
    write_json(&out.join("report.json"), &report)?;
    eprintln!(
        "n={} reid_rate={:.4} attr_accuracy={:.4} quality={:.4}",
        report.n, report.reid_rate, report.attr_accuracy, report.quality
    );
    Ok(())
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "lambda_cfg",
    "lambda_ipa",
    "solver",
    "steps",
    "n",
    "seed",
    "reid_rate",
    "attr_accuracy",
    "quality",
    "mean_identity_distance",
];

fn sweep_table(records: &[MetricsRecord]) -> Table {
    let mut t = Table::new(SWEEP_COLUMNS.map(String::from).to_vec());
    for r in records {
        t.push(vec![
            r.config.lambda_cfg.to_string(),
            r.config.lambda_ipa.to_string(),
            r.config.solver.to_string(),
            r.config.steps.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            r.reid_rate.to_string(),
            r.attr_accuracy.to_string(),
            r.quality.to_string(),
            r.mean_identity_distance.to_string(),
        ]);
    }
    t
}

fn tradeoff_csv(rows: &[TradeoffRow]) -> Table {
    let header = ["lambda_cfg", "lambda_ipa", "solver", "steps", "reid_rate", "attr_accuracy", "quality"];
    let mut t = Table::new(header.map(String::from).to_vec());
    for r in rows {
        t.push(vec![
            r.lambda_cfg.to_string(),
            r.lambda_ipa.to_string(),
            r.solver.to_string(),
            r.steps.to_string(),
            r.reid_rate.to_string(),
            r.attr_accuracy.to_string(),
            r.quality.to_string(),
        ]);
    }
    t
}

pub fn cmd_sweep(global: &Global, grid: Option<&str>, out: &Path, samples: Option<usize>) -> CliResult<()> {
    let ctx = Ctx::load(global, None, samples)?;
    let cells = parse_grid(grid.unwrap_or(&ctx.cfg.run.grid), ctx.cfg.guidance)?;
    for c in &cells {
        c.validate(&ctx.sched).map_err(|e| CliError::Invalid(format!("grid: {e}")))?;
    }
    let records = sweep(&cells, &ctx.world, &ctx.sched, ctx.cfg.run.samples, ctx.seed(), ctx.mode())?;
    let bytes = sweep_table(&records).to_bytes()?;
    write_atomic(&out.join("sweep.csv"), &bytes)?;
    tradeoff_csv(&tradeoff_table(&records)).write(&out.join("tradeoff.csv"))?;
    let svg = plot::render(&Table::from_bytes(&bytes, "sweep.csv")?)?;
    write_atomic(&out.join("sweep.svg"), svg.as_bytes())?;
    for r in &records {
        eprintln!(
            "cfg={} ipa={} solver={} reid_rate={:.4} quality={:.4}",
            r.config.lambda_cfg, r.config.lambda_ipa, r.config.solver, r.reid_rate, r.quality
        );
    }
    Ok(())
}

pub fn cmd_plot(input: &Path, out: &Path) -> CliResult<()> {
    let svg = plot::render(&Table::read(input)?)?;
    write_atomic(out, svg.as_bytes())
}

#[derive(Debug, Serialize)]
struct ArmReport {
    solver: Solver,
    max_reconstruction_error: f64,
    reid_rate: f64,
    attr_accuracy: f64,
    quality: f64,
    mean_identity_distance: f64,
}

#[derive(Debug, Serialize)]
struct AblationReport {
    n: usize,
    seed: u64,
    lambda_cfg: f64,
    lambda_ipa: f64,
    attribute_mode: AttributeMode,
    ddpm: ArmReport,
    ddim: ArmReport,
    ddim_reconstruction_worse: bool,
    ddim_reid_not_lower: bool,
}

pub fn cmd_ablate(global: &Global, flags: &GuidanceFlags, out: &Path, samples: Option<usize>) -> CliResult<()> {
    let ctx = Ctx::load(global, Some(flags), samples)?;
    let inputs = ctx.sample_inputs()?.vectors("x_")?;
    let base = ctx.cfg.guidance;
    let ddpm_solver = if base.solver == Solver::Ddim { Solver::DpmPp2m } else { base.solver };
    let arm = |solver: Solver| -> CliResult<ArmReport> {
        let run = run_batch(&ctx, &base.with_solver(solver), &inputs)?;
        Ok(ArmReport {
            solver,
            max_reconstruction_error: run.max_reconstruction_error,
            reid_rate: run.record.reid_rate,
            attr_accuracy: run.record.attr_accuracy,
            quality: run.record.quality,
            mean_identity_distance: run.record.mean_identity_distance,
        })
    };
    let (ddpm, ddim) = (arm(ddpm_solver)?, arm(Solver::Ddim)?);
    let report = AblationReport {
        n: inputs.len(),
        seed: ctx.seed(),
        lambda_cfg: base.lambda_cfg,
        lambda_ipa: base.lambda_ipa,
        attribute_mode: ctx.mode(),
        ddim_reconstruction_worse: ddim.max_reconstruction_error > ddpm.max_reconstruction_error,
        ddim_reid_not_lower: ddim.reid_rate >= ddpm.reid_rate,
        ddpm,
        ddim,
    };
    let header = [
        "arm",
        "solver",
        "lambda_cfg",
        "lambda_ipa",
        "n",
        "seed",
        "max_reconstruction_error",
        "reid_rate",
        "attr_accuracy",
        "quality",
        "mean_identity_distance",
    ];
    let mut t = Table::new(header.map(String::from).to_vec());
    for (name, a) in [("ddpm", &report.ddpm), ("ddim", &report.ddim)] {
        t.push(vec![
            name.into(),
            a.solver.to_string(),
            report.lambda_cfg.to_string(),
            report.lambda_ipa.to_string(),
            report.n.to_string(),
            report.seed.to_string(),
            a.max_reconstruction_error.to_string(),
            a.reid_rate.to_string(),
            a.attr_accuracy.to_string(),
            a.quality.to_string(),
            a.mean_identity_distance.to_string(),
        ]);
    }
    t.write(&out.join("ablation.csv"))?;
    write_json(&out.join("ablation.json"), &report)?;
    eprintln!(
        "ddpm: recon={:.3e} reid={:.4}  ddim: recon={:.3e} reid={:.4}",
        report.ddpm.max_reconstruction_error,
        report.ddpm.reid_rate,
        report.ddim.max_reconstruction_error,
        report.ddim.reid_rate
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct RecoveryReport {
    n: usize,
    seed: u64,
    config: GuidanceConfig,
    attribute_mode: AttributeMode,
    anonymized_reid_rate: f64,
    recovered_reid_rate: f64,
    recovery_helps: bool,
    unconditional_recovered_reid_rate: f64,
    chance: f64,
    chance_upper_3sigma: f64,
    single_identity: bool,
}

/// Seeds the attack independently of the anonymization streams.
fn attack_seed(seed: u64) -> u64 {
    splitmix64(seed ^ 0x6174_7461_636b)
}

pub fn cmd_recover(global: &Global, flags: &GuidanceFlags, input: &Path, out: &Path) -> CliResult<()> {
    let ctx = Ctx::load(global, Some(flags), None)?;
    let table = Table::read(input)?;
    let anonymized = table.vectors("out_")?;
    let id_col = table.require("input_identity")?;
    let originals =
        (0..table.rows.len()).map(|r| table.u32_at(r, id_col).map(IdentityLabel)).collect::<CliResult<Vec<_>>>()?;
    if anonymized.is_empty() {
        return Err(CliError::Invalid(format!("{}: no rows", input.display())));
    }
    let w = &ctx.world;
    let anon_flags = anonymized
        .iter()
        .zip(&originals)
        .map(|(y, id)| Ok(posterior_identity(w, y)?.0 == *id))
        .collect::<revpers::Result<Vec<bool>>>()?;
    let seed = attack_seed(ctx.seed());
    let guided = ctx.cfg.guidance;
    let unconditional = guided.with_cfg(0.0);
    let attacks = [("guided", guided), ("unconditional", unconditional)];
    let results = attacks
        .iter()
        .map(|(_, g)| recovery_batch(&anonymized, &originals, w, &ctx.sched, g, ctx.mode(), seed))
        .collect::<revpers::Result<Vec<_>>>()?;

    let mut header = vec!["attack".to_string(), "row".into(), "input_identity".into()];
    header.extend(vector_header("rec_", w.dim()));
    header.extend(["recovered_identity".into(), "reid".into()]);
    let mut t = Table::new(header);
    for ((name, _), res) in attacks.iter().zip(&results) {
        for (i, ((x, reid), id)) in res.iter().zip(&originals).enumerate() {
            let mut row = vec![name.to_string(), i.to_string(), id.0.to_string()];
            row.extend(fmt_vec(x));
            row.push(posterior_identity(w, x)?.0 .0.to_string());
            row.push(reid.to_string());
            t.push(row);
        }
    }
    t.write(&out.join("recovered.csv"))?;

    let n = anonymized.len();
    let k = w.num_identities();
    let chance = 1.0 / k as f64;
    let anonymized_reid_rate = rate(anon_flags.into_iter());
    let recovered_reid_rate = rate(results[0].iter().map(|r| r.1));
    let report = RecoveryReport {
        n,
        seed: ctx.seed(),
        config: guided,
        attribute_mode: ctx.mode(),
        anonymized_reid_rate,
        recovered_reid_rate,
        recovery_helps: recovered_reid_rate > anonymized_reid_rate + 0.02,
        unconditional_recovered_reid_rate: rate(results[1].iter().map(|r| r.1)),
        chance,
        chance_upper_3sigma: chance + 3.0 * (chance * (1.0 - chance) / n as f64).sqrt(),
        single_identity: k == 1,
    };
    write_json(&out.join("recovery.json"), &report)?;
    eprintln!(
        "anonymized_reid_rate={:.4} recovered_reid_rate={:.4} unconditional={:.4}",
        report.anonymized_reid_rate, report.recovered_reid_rate, report.unconditional_recovered_reid_rate
    );
    Ok(())
}

pub fn cmd_invert(global: &Global, flags: &GuidanceFlags, input: &Path, row: usize, out: &Path) -> CliResult<()> {
    let ctx = Ctx::load(global, Some(flags), None)?;
    let inputs = Table::read(input)?.vectors("x_")?;
    let x0 =
        inputs.get(row).ok_or_else(|| CliError::Invalid(format!("--row {row}: input has {} rows", inputs.len())))?;
    let w = &ctx.world;
    let attr = match ctx.mode() {
        AttributeMode::Uncontrolled => None,
        _ => Some(posterior_attribute(w, x0)?.0),
    };
    let cond = Condition::null().with_attribute(attr);
    let traj = invert(x0, w, &ctx.sched, &cond, ctx.cfg.guidance.solver, derive_seed(ctx.seed(), row as u64))?;
    let d = w.dim();
    let mut header = vec!["t".to_string()];
    header.extend(vector_header("x_", d));
    header.extend(vector_header("z_", d));
    let mut t = Table::new(header);
    for step in 0..=traj.steps() {
        let mut cells = vec![step.to_string()];
        cells.extend(fmt_vec(traj.x(step)));
        if step == 0 {
            cells.extend(std::iter::repeat_n(String::new(), d));
        } else {
            cells.extend(fmt_vec(traj.z(step)));
        }
        t.push(cells);
    }
    t.write(out)
}
