//! JSON run configuration: parsed into a tree first, then validated in one
//! pass that reports every problem with its key path.

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{ConfigIssue, Error, Result};
use crate::model::{
    validate_diffusion, ControlBox, ControlSpec, DiffusionSpec, Domain, FeedbackTuple, Modulation, MultiChannelSystem,
};

/// Settings of the `run` block; every key is optional.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    /// Grid nodes per axis for eigenvalue and HJB solves.
    pub grid: Vec<usize>,
    pub x0: Vec<f64>,
    pub dt: f64,
    pub t_max: f64,
    pub samples: usize,
    pub seed: u64,
    /// Horizon schedule for the confinement-cost estimate.
    pub horizons: Vec<f64>,
    pub steps_per_unit: f64,
    pub weights: Vec<Vec<f64>>,
    /// Index into `feedback_candidates` used by single-candidate commands.
    pub candidate: usize,
    pub output_dir: Option<PathBuf>,
    pub invariance_grid: Vec<usize>,
    pub horizon_cap: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: MultiChannelSystem,
    pub candidates: Vec<FeedbackTuple>,
    pub domain: Domain,
    pub diffusion: DiffusionSpec,
    pub controls: ControlSpec,
    pub epsilons: Vec<f64>,
    pub epsilon_max: f64,
    pub run: RunSettings,
    /// SHA-256 of the configuration text.
    pub hash: String,
}

impl RunConfig {
    pub fn candidate(&self) -> &FeedbackTuple {
        &self.candidates[self.run.candidate]
    }
}

const TOP_KEYS: &[&str] =
    &["system", "feedback_candidates", "domain", "diffusion", "controls", "epsilon", "epsilon_max", "run"];
const RUN_KEYS: &[&str] = &[
    "grid",
    "x0",
    "dt",
    "t_max",
    "samples",
    "seed",
    "horizons",
    "steps_per_unit",
    "weights",
    "candidate",
    "output_dir",
    "invariance_grid",
    "horizon_cap",
];

struct Checker {
    issues: Vec<ConfigIssue>,
}

impl Checker {
    fn issue(&mut self, path: &str, message: impl Into<String>) {
        self.issues.push(ConfigIssue { path: path.to_string(), message: message.into() });
    }

    fn object<'v>(&mut self, v: &'v Value, path: &str, allowed: &[&str]) -> Option<&'v Map<String, Value>> {
        let Some(obj) = v.as_object() else {
            self.issue(path, "expected an object");
            return None;
        };
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                let at = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                self.issue(&at, format!("unknown key (expected one of: {})", allowed.join(", ")));
            }
        }
        Some(obj)
    }

    fn required<'v>(&mut self, obj: &'v Map<String, Value>, key: &str, path: &str) -> Option<&'v Value> {
        let v = obj.get(key);
        if v.is_none() {
            self.issue(path, "missing required key");
        }
        v
    }

    fn number(&mut self, v: &Value, path: &str) -> Option<f64> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.issue(path, "expected a finite number");
                None
            }
        }
    }

    fn count(&mut self, v: &Value, path: &str) -> Option<usize> {
        match v.as_u64() {
            Some(n) => Some(n as usize),
            None => {
                self.issue(path, "expected a nonnegative integer");
                None
            }
        }
    }

    fn vector(&mut self, v: &Value, path: &str) -> Option<Vec<f64>> {
        let Some(items) = v.as_array() else {
            self.issue(path, "expected an array of numbers");
            return None;
        };
        let out: Vec<Option<f64>> = items.iter().enumerate().map(|(i, x)| self.number(x, &format!("{path}[{i}]"))).collect();
        out.into_iter().collect()
    }

    fn counts(&mut self, v: &Value, path: &str) -> Option<Vec<usize>> {
        let Some(items) = v.as_array() else {
            self.issue(path, "expected an array of integers");
            return None;
        };
        let out: Vec<Option<usize>> = items.iter().enumerate().map(|(i, x)| self.count(x, &format!("{path}[{i}]"))).collect();
        out.into_iter().collect()
    }

    fn matrix(&mut self, v: &Value, path: &str) -> Option<DMatrix<f64>> {
        let Some(rows) = v.as_array() else {
            self.issue(path, "expected a matrix (array of rows)");
            return None;
        };
        if rows.is_empty() {
            self.issue(path, "matrix has no rows");
            return None;
        }
        let parsed: Vec<Option<Vec<f64>>> =
            rows.iter().enumerate().map(|(i, r)| self.vector(r, &format!("{path}[{i}]"))).collect();
        let parsed: Vec<Vec<f64>> = parsed.into_iter().collect::<Option<_>>()?;
        let cols = parsed[0].len();
        if cols == 0 || parsed.iter().any(|r| r.len() != cols) {
            self.issue(path, "rows must be nonempty and of equal length");
            return None;
        }
        Some(DMatrix::from_fn(parsed.len(), cols, |i, j| parsed[i][j]))
    }
}

fn syntax_error(e: &serde_json::Error) -> Error {
    Error::ConfigSyntax { line: e.line(), column: e.column(), message: e.to_string() }
}

/// SHA-256 hex digest of bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parse and validate a configuration, collecting every problem found.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let root: Value = serde_json::from_str(text).map_err(|e| syntax_error(&e))?;
    let mut c = Checker { issues: Vec::new() };
    let Some(top) = c.object(&root, "", TOP_KEYS) else {
        return Err(Error::InvalidConfig(c.issues));
    };

    // system
    let mut a = None;
    let mut inputs: Vec<Option<DMatrix<f64>>> = Vec::new();
    if let Some(sys) = c.required(top, "system", "system") {
        if let Some(obj) = c.object(sys, "system", &["A", "B"]) {
            if let Some(v) = c.required(obj, "A", "system.A") {
                a = c.matrix(v, "system.A");
                if let Some(m) = &a {
                    if !m.is_square() {
                        c.issue("system.A", format!("must be square, got {}x{}", m.nrows(), m.ncols()));
                        a = None;
                    }
                }
            }
            if let Some(v) = c.required(obj, "B", "system.B") {
                match v.as_array() {
                    Some(list) if !list.is_empty() => {
                        inputs = list.iter().enumerate().map(|(i, b)| c.matrix(b, &format!("system.B[{i}]"))).collect();
                    }
                    _ => c.issue("system.B", "expected a nonempty list of input matrices"),
                }
            }
        }
    }
    let d = a.as_ref().map(|m| m.nrows());
    if let Some(d) = d {
        for (i, b) in inputs.iter().enumerate() {
            if let Some(b) = b {
                if b.nrows() != d {
                    c.issue(&format!("system.B[{i}]"), format!("channel {i}: has {} rows, the state has dimension {d}", b.nrows()));
                }
            }
        }
    }
    let n = inputs.len();
    let input_cols: Vec<Option<usize>> = inputs.iter().map(|b| b.as_ref().map(|m| m.ncols())).collect();

    // feedback candidates
    let mut candidates = Vec::new();
    if let Some(v) = c.required(top, "feedback_candidates", "feedback_candidates") {
        match v.as_array() {
            Some(list) if !list.is_empty() => {
                for (k, cand) in list.iter().enumerate() {
                    let path = format!("feedback_candidates[{k}]");
                    let Some(gains) = cand.as_array() else {
                        c.issue(&path, "expected a list with one gain matrix per channel");
                        continue;
                    };
                    if n > 0 && gains.len() != n {
                        c.issue(&path, format!("has {} gains for {n} channels", gains.len()));
                        continue;
                    }
                    let mut ok = true;
                    let mut mats = Vec::new();
                    for (i, g) in gains.iter().enumerate() {
                        let gp = format!("{path}[{i}]");
                        match c.matrix(g, &gp) {
                            Some(m) => {
                                if let (Some(d), Some(Some(cols))) = (d, input_cols.get(i)) {
                                    if m.nrows() != *cols || m.ncols() != d {
                                        c.issue(&gp, format!("channel {i}: gain must be {cols}x{d}, got {}x{}", m.nrows(), m.ncols()));
                                        ok = false;
                                    }
                                }
                                mats.push(m);
                            }
                            None => ok = false,
                        }
                    }
                    if ok {
                        candidates.push(FeedbackTuple::new(mats));
                    }
                }
            }
            _ => c.issue("feedback_candidates", "expected a nonempty list of feedback tuples"),
        }
    }

    // domain
    let mut domain = None;
    if let Some(v) = c.required(top, "domain", "domain") {
        if let Some(obj) = c.object(v, "domain", &["box", "ball"]) {
            match (obj.get("box"), obj.get("ball")) {
                (Some(b), None) => {
                    if let Some(bo) = c.object(b, "domain.box", &["lower", "upper"]) {
                        let lo = c.required(bo, "lower", "domain.box.lower").and_then(|v| c.vector(v, "domain.box.lower"));
                        let hi = c.required(bo, "upper", "domain.box.upper").and_then(|v| c.vector(v, "domain.box.upper"));
                        if let (Some(lo), Some(hi)) = (lo, hi) {
                            match Domain::new_box(lo, hi) {
                                Ok(dm) => domain = Some(dm),
                                Err(e) => c.issue("domain.box", e.to_string()),
                            }
                        }
                    }
                }
                (None, Some(b)) => {
                    if let Some(bo) = c.object(b, "domain.ball", &["center", "radius"]) {
                        let center =
                            c.required(bo, "center", "domain.ball.center").and_then(|v| c.vector(v, "domain.ball.center"));
                        let radius =
                            c.required(bo, "radius", "domain.ball.radius").and_then(|v| c.number(v, "domain.ball.radius"));
                        if let (Some(center), Some(radius)) = (center, radius) {
                            match Domain::new_ball(center, radius) {
                                Ok(dm) => domain = Some(dm),
                                Err(e) => c.issue("domain.ball", e.to_string()),
                            }
                        }
                    }
                }
                _ => c.issue("domain", "specify exactly one of `box` or `ball`"),
            }
        }
    }
    if let (Some(dm), Some(d)) = (&domain, d) {
        if dm.dim() != d {
            c.issue("domain", format!("has dimension {}, the state has dimension {d}", dm.dim()));
        }
    }

    // diffusion
    let mut diffusion = None;
    if let Some(v) = c.required(top, "diffusion", "diffusion") {
        if let Some(obj) = c.object(v, "diffusion", &["base", "modulation"]) {
            let base = c.required(obj, "base", "diffusion.base").and_then(|v| c.matrix(v, "diffusion.base"));
            let modulation = match obj.get("modulation") {
                None => Some(Modulation::Constant),
                Some(m) => match c.object(m, "diffusion.modulation", &["kind", "beta"]) {
                    Some(mo) => match mo.get("kind").and_then(Value::as_str) {
                        Some("constant") => {
                            if mo.contains_key("beta") {
                                c.issue("diffusion.modulation.beta", "only valid with kind `saturating`");
                            }
                            Some(Modulation::Constant)
                        }
                        Some("saturating") => c
                            .required(mo, "beta", "diffusion.modulation.beta")
                            .and_then(|b| c.number(b, "diffusion.modulation.beta"))
                            .map(|beta| Modulation::Saturating { beta }),
                        _ => {
                            c.issue("diffusion.modulation.kind", "expected `constant` or `saturating`");
                            None
                        }
                    },
                    None => None,
                },
            };
            if let (Some(base), Some(modulation)) = (base, modulation) {
                if let Some(d) = d {
                    if base.nrows() != d {
                        c.issue("diffusion.base", format!("has {} rows, the state has dimension {d}", base.nrows()));
                    }
                }
                match validate_diffusion(&base, &modulation) {
                    Ok(_) => diffusion = DiffusionSpec::new(base, modulation).ok(),
                    Err(e) => c.issue("diffusion", e.to_string()),
                }
            }
        }
    }

    // controls
    let mut boxes = Vec::new();
    if let Some(v) = c.required(top, "controls", "controls") {
        match v.as_array() {
            Some(list) => {
                if n > 0 && list.len() != n {
                    c.issue("controls", format!("has {} boxes for {n} channels", list.len()));
                }
                for (i, bx) in list.iter().enumerate() {
                    let path = format!("controls[{i}]");
                    if let Some(bo) = c.object(bx, &path, &["lower", "upper"]) {
                        let lo = c.required(bo, "lower", &format!("{path}.lower")).and_then(|v| c.vector(v, &format!("{path}.lower")));
                        let hi = c.required(bo, "upper", &format!("{path}.upper")).and_then(|v| c.vector(v, &format!("{path}.upper")));
                        if let (Some(lo), Some(hi)) = (lo, hi) {
                            if let Some(Some(cols)) = input_cols.get(i) {
                                if lo.len() != *cols {
                                    c.issue(&path, format!("channel {i}: box has dimension {}, channel has {cols} inputs", lo.len()));
                                }
                            }
                            match ControlBox::new(lo, hi) {
                                Ok(b) => boxes.push(b),
                                Err(e) => c.issue(&path, e.to_string()),
                            }
                        }
                    }
                }
            }
            None => c.issue("controls", "expected a list of control boxes"),
        }
    }

    // noise levels
    let epsilon_max = match top.get("epsilon_max") {
        Some(v) => c.number(v, "epsilon_max").unwrap_or(f64::NAN),
        None => 10.0,
    };
    if !(epsilon_max > 0.0) && !epsilon_max.is_nan() {
        c.issue("epsilon_max", "must be positive");
    }
    let mut epsilons = Vec::new();
    if let Some(v) = c.required(top, "epsilon", "epsilon") {
        let raw: Vec<(String, &Value)> = match v.as_array() {
            Some(list) if list.is_empty() => {
                c.issue("epsilon", "list is empty");
                Vec::new()
            }
            Some(list) => list.iter().enumerate().map(|(i, x)| (format!("epsilon[{i}]"), x)).collect(),
            None => vec![("epsilon".to_string(), v)],
        };
        for (path, x) in raw {
            if let Some(e) = c.number(x, &path) {
                if !(e > 0.0 && e < epsilon_max) {
                    c.issue(&path, format!("epsilon must lie in (0, {epsilon_max}), got {e}"));
                } else {
                    epsilons.push(e);
                }
            }
        }
    }

    // run block
    let dim = d.unwrap_or(0);
    let mut run = RunSettings {
        grid: vec![if dim == 1 { 201 } else { 41 }; dim],
        x0: domain.as_ref().map(Domain::center).unwrap_or_default(),
        dt: 1e-3,
        t_max: 50.0,
        samples: 2000,
        seed: 0,
        horizons: vec![2.0, 4.0, 8.0],
        steps_per_unit: 8.0,
        weights: if n > 0 { vec![vec![1.0 / n as f64; n]] } else { Vec::new() },
        candidate: 0,
        output_dir: None,
        invariance_grid: vec![21; dim],
        horizon_cap: 50.0,
    };
    if let Some(v) = top.get("run") {
        if let Some(obj) = c.object(v, "run", RUN_KEYS) {
            if let Some(v) = obj.get("grid") {
                if let Some(g) = c.counts(v, "run.grid") {
                    if dim > 0 && g.len() != dim {
                        c.issue("run.grid", format!("needs {dim} entries, got {}", g.len()));
                    } else if g.iter().any(|&k| k < 3) {
                        c.issue("run.grid", "every axis needs at least 3 nodes");
                    } else {
                        run.grid = g;
                    }
                }
            }
            if let Some(v) = obj.get("invariance_grid") {
                if let Some(g) = c.counts(v, "run.invariance_grid") {
                    if dim > 0 && g.len() != dim {
                        c.issue("run.invariance_grid", format!("needs {dim} entries, got {}", g.len()));
                    } else if g.iter().any(|&k| k < 2) {
                        c.issue("run.invariance_grid", "every axis needs at least 2 nodes");
                    } else {
                        run.invariance_grid = g;
                    }
                }
            }
            if let Some(v) = obj.get("x0") {
                if let Some(x0) = c.vector(v, "run.x0") {
                    run.x0 = x0;
                }
            }
            for (key, slot) in [("dt", &mut run.dt), ("t_max", &mut run.t_max), ("steps_per_unit", &mut run.steps_per_unit), ("horizon_cap", &mut run.horizon_cap)] {
                if let Some(v) = obj.get(key) {
                    if let Some(x) = c.number(v, &format!("run.{key}")) {
                        if x > 0.0 {
                            *slot = x;
                        } else {
                            c.issue(&format!("run.{key}"), "must be positive");
                        }
                    }
                }
            }
            if run.t_max < run.dt {
                c.issue("run.t_max", "must be at least run.dt");
            }
            if let Some(v) = obj.get("samples") {
                match c.count(v, "run.samples") {
                    Some(0) => c.issue("run.samples", "must be at least 1"),
                    Some(k) => run.samples = k,
                    None => {}
                }
            }
            if let Some(v) = obj.get("seed") {
                match v.as_u64() {
                    Some(s) => run.seed = s,
                    None => c.issue("run.seed", "expected an unsigned 64-bit integer"),
                }
            }
            if let Some(v) = obj.get("horizons") {
                if let Some(h) = c.vector(v, "run.horizons") {
                    if h.len() < 3 || h.windows(2).any(|w| !(w[0] < w[1])) || !(h[0] > 0.0) {
                        c.issue("run.horizons", "needs at least 3 positive, strictly increasing horizons");
                    } else {
                        run.horizons = h;
                    }
                }
            }
            if let Some(v) = obj.get("weights") {
                match v.as_array() {
                    Some(rows) if !rows.is_empty() => {
                        let mut ws = Vec::new();
                        for (k, r) in rows.iter().enumerate() {
                            let path = format!("run.weights[{k}]");
                            if let Some(w) = c.vector(r, &path) {
                                if n > 0 && w.len() != n {
                                    c.issue(&path, format!("needs {n} weights, got {}", w.len()));
                                } else if w.iter().any(|x| !(*x > 0.0)) {
                                    c.issue(&path, "weights must be positive");
                                } else {
                                    ws.push(w);
                                }
                            }
                        }
                        run.weights = ws;
                    }
                    _ => c.issue("run.weights", "expected a nonempty list of weight vectors"),
                }
            }
            if let Some(v) = obj.get("candidate") {
                if let Some(k) = c.count(v, "run.candidate") {
                    run.candidate = k;
                }
            }
            if let Some(v) = obj.get("output_dir") {
                match v.as_str() {
                    Some(s) if !s.is_empty() => run.output_dir = Some(PathBuf::from(s)),
                    _ => c.issue("run.output_dir", "expected a nonempty string"),
                }
            }
        }
    }
    if dim > 0 && run.x0.len() != dim {
        c.issue("run.x0", format!("needs {dim} entries, got {}", run.x0.len()));
    } else if let Some(dm) = &domain {
        if dm.dim() == run.x0.len() && !dm.contains(&run.x0) {
            c.issue("run.x0", "must lie inside the domain");
        }
    }
    if !candidates.is_empty() && run.candidate >= candidates.len() {
        c.issue("run.candidate", format!("index {} but only {} candidates", run.candidate, candidates.len()));
    }

    if !c.issues.is_empty() {
        return Err(Error::InvalidConfig(c.issues));
    }
    let system = MultiChannelSystem::new(a.expect("validated"), inputs.into_iter().map(|b| b.expect("validated")).collect())
        .map_err(|e| Error::InvalidConfig(vec![ConfigIssue { path: "system".into(), message: e.to_string() }]))?;
    let controls = ControlSpec::new(&system, boxes)
        .map_err(|e| Error::InvalidConfig(vec![ConfigIssue { path: "controls".into(), message: e.to_string() }]))?;
    Ok(RunConfig {
        system,
        candidates,
        domain: domain.expect("validated"),
        diffusion: diffusion.expect("validated"),
        controls,
        epsilons,
        epsilon_max,
        run,
        hash: sha256_hex(text.as_bytes()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "system": {"A": [[-1.0]], "B": [[[1.0]]]},
        "feedback_candidates": [[[[0.0]]]],
        "domain": {"box": {"lower": [-1.0], "upper": [1.0]}},
        "diffusion": {"base": [[1.0]]},
        "controls": [{"lower": [-1.0], "upper": [1.0]}],
        "epsilon": 0.5
    }"#;

    fn issues(text: &str) -> Vec<ConfigIssue> {
        match parse_config(text) {
            Err(Error::InvalidConfig(v)) => v,
            other => panic!("expected semantic errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_is_valid() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.system.dim(), 1);
        assert_eq!(cfg.epsilons, vec![0.5]);
        assert_eq!(cfg.run.grid, vec![201]);
        assert_eq!(cfg.run.x0, vec![0.0]);
        assert_eq!(cfg.hash.len(), 64);
    }

    #[test]
    fn negative_epsilon_is_named() {
        let text = MINIMAL.replace("\"epsilon\": 0.5", "\"epsilon\": [0.5, -0.1]");
        let found = issues(&text);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].path, "epsilon[1]");
        assert!(found[0].message.contains("epsilon"));
    }

    #[test]
    fn input_row_mismatch_names_channel() {
        let text = MINIMAL.replace("\"B\": [[[1.0]]]", "\"B\": [[[1.0], [2.0]]]");
        let found = issues(&text);
        assert!(found.iter().any(|i| i.path == "system.B[0]" && i.message.contains("channel 0")), "{found:?}");
    }

    #[test]
    fn all_problems_are_reported() {
        let text = MINIMAL
            .replace("\"epsilon\": 0.5", "\"epsilon\": 0.0, \"bogus\": 1")
            .replace("\"base\": [[1.0]]", "\"base\": [[0.0]]")
            .replace("\"upper\": [1.0]}}", "\"upper\": [-2.0]}}");
        let found = issues(&text);
        let paths: Vec<&str> = found.iter().map(|i| i.path.as_str()).collect();
        for expected in ["bogus", "epsilon", "diffusion", "domain.box"] {
            assert!(paths.contains(&expected), "{paths:?}");
        }
    }

    #[test]
    fn syntax_errors_report_position() {
        let err = parse_config("{\n  \"system\": [1,\n}").unwrap_err();
        match err {
            Error::ConfigSyntax { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column >= 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn run_block_overrides_and_checks() {
        let text = MINIMAL.replace(
            "\"epsilon\": 0.5",
            "\"epsilon\": 0.5, \"run\": {\"grid\": [51], \"x0\": [0.25], \"seed\": 7, \"samples\": 10, \"weights\": [[2.0]]}",
        );
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.run.grid, vec![51]);
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.run.x0, vec![0.25]);
        let bad = MINIMAL.replace("\"epsilon\": 0.5", "\"epsilon\": 0.5, \"run\": {\"x0\": [3.0], \"grid\": [2], \"colour\": 1}");
        let paths: Vec<String> = issues(&bad).into_iter().map(|i| i.path).collect();
        assert!(paths.contains(&"run.x0".to_string()));
        assert!(paths.contains(&"run.grid".to_string()));
        assert!(paths.contains(&"run.colour".to_string()));
    }
}
