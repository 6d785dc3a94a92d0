//! Subcommand execution: runs one pipeline stage on a configuration and
//! writes its CSV/JSON outputs plus a manifest with per-file digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::action::{
    corollary_check, estimate_r, extrapolate_rate_exponent, minimal_action_selection, minimize_action, steps_for,
    CorollaryCheck, ExponentFit,
};
use crate::config::{sha256_hex, RunConfig};
use crate::drift::Drift;
use crate::eig::{build_grid, linear_eigenpair, OperatorGrid};
use crate::error::{Error, Result};
use crate::hjb::solve_channels;
use crate::model::closed_loop;
use crate::pareto::{pareto_front, scalarize, sweep, InvarianceScreen, SweepSetup, WeightVector};
use crate::sde::{estimate_exit_rate, sample_exit_times, survival_curve, ExitProblem};
use crate::verify;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Simulate,
    Eig,
    Hjb,
    Action,
    Asymptotics,
    Pareto,
    Verify,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Simulate,
        Command::Eig,
        Command::Hjb,
        Command::Action,
        Command::Asymptotics,
        Command::Pareto,
        Command::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Eig => "eig",
            Command::Hjb => "hjb",
            Command::Action => "action",
            Command::Asymptotics => "asymptotics",
            Command::Pareto => "pareto",
            Command::Verify => "verify",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
            Error::Usage(format!("unknown subcommand `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

/// Command-line values that take precedence over the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub epsilon: Option<f64>,
}

pub const DEFAULT_OUTPUT_DIR: &str = "exitrate-out";

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Writes files into the output directory and remembers their digests.
#[derive(Debug)]
pub struct OutputWriter {
    dir: PathBuf,
    files: Vec<FileRecord>,
}

impl OutputWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[FileRecord] {
        &self.files
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        self.files.push(FileRecord { name: name.to_string(), sha256: sha256_hex(contents), bytes: contents.len() });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value).expect("output values serialize");
        text.push(b'\n');
        self.write(name, &text)
    }

    pub fn write_with<F>(&mut self, name: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: &'static str,
    pub command: Command,
    pub config_hash: String,
    pub seed: u64,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub files: Vec<FileRecord>,
    /// True when the command stopped early; listed files are still valid.
    pub partial: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<Value>,
}

/// What a command returns besides its files.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub output_dir: PathBuf,
    /// Present for `verify`.
    pub report: Option<verify::VerifyReport>,
}

struct Context<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    epsilons: Vec<f64>,
    out: OutputWriter,
    timings: BTreeMap<String, f64>,
    report: Option<verify::VerifyReport>,
}

impl Context<'_> {
    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let r = f(self);
        self.timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
        r
    }

    fn grid(&self) -> Result<Arc<OperatorGrid>> {
        Ok(Arc::new(build_grid(&self.cfg.domain, &self.cfg.run.grid)?))
    }

    /// Noise level for single-level commands: the first configured one.
    fn epsilon(&self) -> f64 {
        self.epsilons[0]
    }
}

fn resolve_epsilons(cfg: &RunConfig, command: Command, overrides: &Overrides) -> Result<Vec<f64>> {
    match overrides.epsilon {
        None => Ok(cfg.epsilons.clone()),
        Some(_) if matches!(command, Command::Asymptotics | Command::Verify) => {
            Err(Error::Usage(format!("--epsilon does not apply to `{}`, which uses the configured list", command.name())))
        }
        Some(e) if e > 0.0 && e <= cfg.epsilon_max => Ok(vec![e]),
        Some(e) => Err(Error::Usage(format!("--epsilon {e} must lie in (0, {}]", cfg.epsilon_max))),
    }
}

/// Run `command` and write its outputs. On failure a partial manifest is
/// still written before the error is returned.
pub fn execute(command: Command, cfg: &RunConfig, overrides: &Overrides) -> Result<RunOutcome> {
    let epsilons = resolve_epsilons(cfg, command, overrides)?;
    let dir = overrides
        .out
        .clone()
        .or_else(|| cfg.run.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    let seed = overrides.seed.unwrap_or(cfg.run.seed);
    let mut ctx = Context { cfg, seed, epsilons, out: OutputWriter::create(&dir)?, timings: BTreeMap::new(), report: None };
    let result = match command {
        Command::Simulate => run_simulate(&mut ctx),
        Command::Eig => run_eig(&mut ctx),
        Command::Hjb => run_hjb(&mut ctx),
        Command::Action => run_action(&mut ctx),
        Command::Asymptotics => run_asymptotics(&mut ctx),
        Command::Pareto => run_pareto(&mut ctx),
        Command::Verify => run_verify(&mut ctx),
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_hash: cfg.hash.clone(),
        seed,
        timings: ctx.timings.clone(),
        files: ctx.out.files().to_vec(),
        partial: result.is_err(),
        error: result.as_ref().err().map(|e| json!({ "kind": e.kind(), "message": e.to_string() })),
    };
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    fs::write(dir.join("manifest.json"), text)?;
    result?;
    Ok(RunOutcome { manifest, output_dir: dir, report: ctx.report })
}

fn run_simulate(ctx: &mut Context<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let drift = Drift::Linear(closed_loop(&cfg.system, cfg.candidate())?);
    let mut summary = Vec::new();
    for (k, &eps) in ctx.epsilons.clone().iter().enumerate() {
        let problem =
            ExitProblem { drift: &drift, diffusion: &cfg.diffusion, epsilon: eps, domain: &cfg.domain, dt: cfg.run.dt, t_max: cfg.run.t_max };
        let seed = ctx.seed;
        let samples = ctx.timed(&format!("simulate_{k}"), |_| sample_exit_times(&problem, &cfg.run.x0, cfg.run.samples, seed))?;
        ctx.out.write_with(&format!("exit_times_{k}.csv"), |w| samples.write_csv(w))?;
        let t_grid: Vec<f64> = (0..=200).map(|j| cfg.run.t_max * j as f64 / 200.0).collect();
        let survival = survival_curve(&samples, &t_grid)?;
        let mut csv = String::from("t,survival\n");
        for (t, s) in t_grid.iter().zip(&survival) {
            csv.push_str(&format!("{t},{s}\n"));
        }
        ctx.out.write(&format!("survival_{k}.csv"), csv.as_bytes())?;
        let fit = match estimate_exit_rate(&samples, None) {
            Ok(est) => json!(est),
            Err(e @ Error::TailStarved(_)) => {
                log::warn!("epsilon {eps}: {e}");
                json!({ "error": e.to_string(), "kind": e.kind() })
            }
            Err(e) => return Err(e),
        };
        summary.push(json!({
            "epsilon": eps,
            "samples": samples.len(),
            "censored": samples.censored_count(),
            "meta": samples.meta(),
            "fit": fit,
        }));
    }
    ctx.out.write_json("simulate.json", &json!({ "candidate": cfg.run.candidate, "x0": cfg.run.x0, "levels": summary }))
}

fn run_eig(ctx: &mut Context<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let grid = ctx.grid()?;
    let m = closed_loop(&cfg.system, cfg.candidate())?;
    let mut summary = Vec::new();
    for (k, &eps) in ctx.epsilons.clone().iter().enumerate() {
        let pair = ctx.timed(&format!("eig_{k}"), |_| linear_eigenpair(&m, &cfg.diffusion, eps, &grid))?;
        let column: Vec<Vec<f64>> = pair.psi.iter().map(|&p| vec![p]).collect();
        ctx.out.write_with(&format!("psi_{k}.csv"), |w| grid.write_field_csv(w, &["psi"], &column))?;
        summary.push(json!({ "epsilon": eps, "eigenpair": pair }));
    }
    ctx.out.write_json("eig.json", &json!({ "candidate": cfg.run.candidate, "interior_nodes": grid.len(), "levels": summary }))
}

fn run_hjb(ctx: &mut Context<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let grid = ctx.grid()?;
    let mut summary = Vec::new();
    for (k, &eps) in ctx.epsilons.clone().iter().enumerate() {
        let sols = ctx.timed(&format!("hjb_{k}"), |_| {
            solve_channels(&cfg.system, cfg.candidate(), &cfg.controls, &cfg.diffusion, eps, &grid)
        })?;
        for (i, s) in sols.iter().enumerate() {
            ctx.out.write_with(&format!("policy_{k}_ch{}.csv", i + 1), |w| s.policy.write_csv(w))?;
            let column: Vec<Vec<f64>> = s.eigenpair.psi.iter().map(|&p| vec![p]).collect();
            ctx.out.write_with(&format!("psi_{k}_ch{}.csv", i + 1), |w| grid.write_field_csv(w, &["psi"], &column))?;
        }
        let channels: Vec<_> = sols.iter().map(|s| s.summary()).collect();
        summary.push(json!({ "epsilon": eps, "channels": channels }));
    }
    ctx.out.write_json("hjb.json", &json!({ "candidate": cfg.run.candidate, "levels": summary }))
}

fn run_action(ctx: &mut Context<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let m = closed_loop(&cfg.system, cfg.candidate())?;
    let run = &cfg.run;
    let confinement =
        ctx.timed("confinement", |_| estimate_r(&run.x0, &m, &cfg.diffusion, &cfg.domain, &run.horizons, run.steps_per_unit))?;
    ctx.out.write_with("action.csv", |w| confinement.write_csv(w))?;
    let horizon = *run.horizons.last().expect("horizon schedule is nonempty");
    let steps = steps_for(horizon, run.steps_per_unit);
    let best = ctx.timed("minimize", |_| minimize_action(&run.x0, horizon, steps, &m, &cfg.diffusion, &cfg.domain))?;
    ctx.out.write_with("path.csv", |w| best.path.write_csv(w))?;
    ctx.out.write_json("action.json", &json!({ "candidate": run.candidate, "x0": run.x0, "confinement": confinement, "path": best }))?;
    let selection = ctx.timed("selection", |_| {
        minimal_action_selection(&cfg.system, &cfg.candidates, &run.x0, horizon, steps, &cfg.diffusion, &cfg.domain)
    })?;
    ctx.out.write_json("selection.json", &selection)
}

/// Closed-loop and per-channel rates over a noise schedule and their extrapolated exponents.
#[derive(Debug, Clone, Serialize)]
pub struct ExponentComparison {
    pub epsilons: Vec<f64>,
    pub closed_loop_rates: Vec<f64>,
    /// `channel_rates[i][k]`: channel `i` at `epsilons[k]`.
    pub channel_rates: Vec<Vec<f64>>,
    pub closed_loop_fit: ExponentFit,
    pub channel_fits: Vec<ExponentFit>,
    pub corollary: CorollaryCheck,
    /// Channels whose optimal rate exceeds the closed-loop rate at some level.
    pub rate_order_exceptions: Vec<(usize, f64)>,
}

impl ExponentComparison {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["epsilon".to_string(), "lambda_closed_loop".to_string()];
        header.extend((1..=self.channel_rates.len()).map(|i| format!("lambda_channel_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (k, e) in self.epsilons.iter().enumerate() {
            let mut row = vec![e.to_string(), self.closed_loop_rates[k].to_string()];
            row.extend(self.channel_rates.iter().map(|c| c[k].to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn compare_exponents(cfg: &RunConfig, grid: &Arc<OperatorGrid>) -> Result<ExponentComparison> {
    let mut epsilons = cfg.epsilons.clone();
    epsilons.sort_by(|a, b| b.total_cmp(a));
    let fb = cfg.candidate();
    let m = closed_loop(&cfg.system, fb)?;
    let mut closed_loop_rates = Vec::new();
    let mut channel_rates = vec![Vec::new(); cfg.system.channel_count()];
    let mut rate_order_exceptions = Vec::new();
    for &e in &epsilons {
        let lc = linear_eigenpair(&m, &cfg.diffusion, e, grid)?.lambda;
        closed_loop_rates.push(lc);
        for (i, s) in solve_channels(&cfg.system, fb, &cfg.controls, &cfg.diffusion, e, grid)?.iter().enumerate() {
            if s.lambda() > lc {
                rate_order_exceptions.push((i, e));
            }
            channel_rates[i].push(s.lambda());
        }
    }
    let pairs = |rates: &[f64]| -> Vec<(f64, f64)> { epsilons.iter().copied().zip(rates.iter().copied()).collect() };
    let closed_loop_fit = extrapolate_rate_exponent(&pairs(&closed_loop_rates))?;
    let channel_fits = channel_rates.iter().map(|r| extrapolate_rate_exponent(&pairs(r))).collect::<Result<Vec<_>>>()?;
    let r_channels: Vec<f64> = channel_fits.iter().map(|f| f.intercept).collect();
    let corollary = corollary_check(closed_loop_fit.intercept, &r_channels)?;
    Ok(ExponentComparison {
        epsilons,
        closed_loop_rates,
        channel_rates,
        closed_loop_fit,
        channel_fits,
        corollary,
        rate_order_exceptions,
    })
}

fn run_asymptotics(ctx: &mut Context<'_>) -> Result<()> {
    let grid = ctx.grid()?;
    let cfg = ctx.cfg;
    let cmp = ctx.timed("asymptotics", |_| compare_exponents(cfg, &grid))?;
    if !cmp.rate_order_exceptions.is_empty() {
        log::warn!("channel rate above closed-loop rate at {:?}", cmp.rate_order_exceptions);
    }
    ctx.out.write_with("asymptotics.csv", |w| cmp.write_csv(w))?;
    ctx.out.write_json("asymptotics.json", &cmp)
}

fn run_pareto(ctx: &mut Context<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let grid = ctx.grid()?;
    let setup = SweepSetup {
        system: &cfg.system,
        controls: &cfg.controls,
        diffusion: &cfg.diffusion,
        epsilon: ctx.epsilon(),
        domain: &cfg.domain,
        grid: &grid,
        screen: InvarianceScreen { resolution: cfg.run.invariance_grid.clone(), horizon_cap: cfg.run.horizon_cap, dt: 0.01 },
    };
    let mut outcome = ctx.timed("sweep", |_| sweep(&cfg.candidates, &setup))?;
    let front = pareto_front(&mut outcome.records)?;

    let channels = cfg.system.channel_count();
    let rate_header: Vec<String> = (1..=channels).map(|i| format!("lambda_{i}")).collect();
    let mut records_csv = format!("id,{},dominated\n", rate_header.join(","));
    for r in &outcome.records {
        let rates: Vec<String> = r.rates.values().iter().map(f64::to_string).collect();
        records_csv.push_str(&format!("{},{},{}\n", r.id, rates.join(","), u8::from(r.dominated)));
    }
    ctx.out.write("records.csv", records_csv.as_bytes())?;
    let mut front_csv = format!("id,{}\n", rate_header.join(","));
    for r in &front {
        let rates: Vec<String> = r.rates.values().iter().map(f64::to_string).collect();
        front_csv.push_str(&format!("{},{}\n", r.id, rates.join(",")));
    }
    ctx.out.write("front.csv", front_csv.as_bytes())?;

    let weight_header: Vec<String> = (1..=channels).map(|i| format!("w_{i}")).collect();
    let mut scal_csv = format!("{},id,utility\n", weight_header.join(","));
    let mut choices = Vec::new();
    for w in &cfg.run.weights {
        let weights = WeightVector::new(w.clone())?;
        let pick = &outcome.records[scalarize(&outcome.records, &weights)?];
        let utility = weights.utility(pick.rates.values());
        let ws: Vec<String> = weights.values().iter().map(f64::to_string).collect();
        scal_csv.push_str(&format!("{},{},{}\n", ws.join(","), pick.id, utility));
        choices.push(json!({ "weights": weights, "id": pick.id, "utility": utility }));
    }
    ctx.out.write("scalarization.csv", scal_csv.as_bytes())?;
    ctx.out.write_json(
        "pareto.json",
        &json!({
            "epsilon": setup.epsilon,
            "records": outcome.records,
            "front": front.iter().map(|r| r.id).collect::<Vec<_>>(),
            "excluded": outcome.excluded,
            "scalarization": choices,
        }),
    )
}

fn run_verify(ctx: &mut Context<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let seed = ctx.seed;
    let report = ctx.timed("verify", |_| Ok(verify::run_all(cfg, seed)))?;
    for c in &report.criteria {
        for (name, contents) in &c.artifacts {
            ctx.out.write(name, contents)?;
        }
    }
    ctx.out.write_json("verify.json", &report)?;
    ctx.report = Some(report);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!(matches!("solve".parse::<Command>(), Err(Error::Usage(_))));
    }

    #[test]
    fn epsilon_override_rules() {
        let cfg = verify::reference_config();
        let with = |e| Overrides { epsilon: Some(e), ..Overrides::default() };
        assert_eq!(resolve_epsilons(&cfg, Command::Eig, &with(0.25)).unwrap(), vec![0.25]);
        assert!(matches!(resolve_epsilons(&cfg, Command::Eig, &with(-1.0)), Err(Error::Usage(_))));
        assert!(matches!(resolve_epsilons(&cfg, Command::Asymptotics, &with(0.25)), Err(Error::Usage(_))));
        assert_eq!(resolve_epsilons(&cfg, Command::Eig, &Overrides::default()).unwrap(), cfg.epsilons);
    }

    #[test]
    fn writer_records_digests_and_partial_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = OutputWriter::create(dir.path()).unwrap();
        w.write("a.txt", b"abc").unwrap();
        assert_eq!(w.files()[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

        // A one-entry horizon schedule fails after the output directory exists.
        let mut cfg = verify::reference_config();
        cfg.run.horizons = vec![1.0];
        let out = dir.path().join("run");
        let err = execute(Command::Action, &cfg, &Overrides { out: Some(out.clone()), ..Overrides::default() }).unwrap_err();
        assert_eq!(err.kind(), "input");
        let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["partial"], json!(true));
        assert_eq!(manifest["error"]["kind"], json!("input"));
    }
}
