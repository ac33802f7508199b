//! Problem files, run manifests, and deterministic artifact export.
//!
//! The JSON problem file is the single input format. Polynomials are
//! coefficient arrays, lowest degree first; cost keys are 1-based ordered
//! pairs like `"1->2"`; unknown keys are rejected. Every numeric CSV cell
//! is rendered with seventeen significant digits so reruns are
//! byte-comparable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cadlag::StepFunction;
use crate::hjb::PdeSolution;
use crate::lattice::{Lattice, PathSet};
use crate::problem::{Cost, DriverSet, LinearDriver, SpaceFn, SwitchingProblem};
use crate::rbsde::PicardLog;
use crate::snell::{JumpReport, ValueField};
use crate::strategy::SwitchEvent;
use crate::{Error, Result};

/// On-disk problem document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub q: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// State dimension; only 1 is supported.
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default)]
    pub x0: f64,
    pub gamma: f64,
    /// Running payoff rates, one polynomial per mode; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drivers: Option<DriverFile>,
    /// Terminal rewards, one polynomial per mode; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Vec<f64>>>,
    pub costs: BTreeMap<String, CostFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<DiffusionFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grids: Option<GridFile>,
    #[serde(default)]
    pub seed: u64,
}

fn default_r() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostFile {
    pub v0: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xfactor: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepEntry {
    pub t: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionFile {
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub lipschitz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverFile {
    pub lipschitz: f64,
    #[serde(default)]
    pub monotone: bool,
    pub f: Vec<DriverEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverEntry {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub base: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub y: Vec<f64>,
    #[serde(default)]
    pub z: f64,
}

/// Discretization choices carried alongside the instance.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
}

/// Fully resolved discretization, with instance-derived defaults where the
/// file stays silent.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedGrids {
    pub max_dt: f64,
    pub h: f64,
    pub half_width: f64,
    pub paths: usize,
}

pub fn resolve_grids(p: &SwitchingProblem, file: &Option<GridFile>) -> ResolvedGrids {
    let g = file.clone().unwrap_or_default();
    let max_dt = g.max_dt.unwrap_or(if p.sigma.is_zero() {
        p.horizon / 256.0
    } else {
        p.horizon / 16.0
    });
    let sig0 = p.sigma.eval(p.x0).abs();
    let h = g.h.unwrap_or(if sig0 > 0.0 {
        (2.0 * sig0 * sig0 * max_dt).sqrt()
    } else {
        0.1
    });
    let half_width = g.half_width.unwrap_or_else(|| {
        (4.0 * sig0 * p.horizon.sqrt()).max(1.0) + p.drift.eval(p.x0).abs() * p.horizon
    });
    ResolvedGrids {
        max_dt,
        h,
        half_width,
        paths: g.paths.unwrap_or(1000),
    }
}

fn poly(coeffs: &[f64]) -> SpaceFn {
    if coeffs.is_empty() {
        SpaceFn::zero()
    } else {
        SpaceFn::Poly(coeffs.to_vec())
    }
}

fn parse_pair(key: &str, q: usize) -> Result<(usize, usize)> {
    let bad = || {
        Error::Parse(format!(
            "cost key {key:?} is not of the form \"i->k\" with 1-based modes"
        ))
    };
    let (a, b) = key.split_once("->").ok_or_else(bad)?;
    let i: usize = a.trim().parse().map_err(|_| bad())?;
    let k: usize = b.trim().parse().map_err(|_| bad())?;
    if i < 1 || k < 1 || i > q || k > q {
        return Err(Error::Parse(format!(
            "cost key {key:?} names a mode outside 1..={q}"
        )));
    }
    Ok((i - 1, k - 1))
}

impl ProblemFile {
    pub fn to_problem(&self) -> Result<SwitchingProblem> {
        if self.r != 1 {
            return Err(Error::Domain(format!(
                "state dimension {} is not supported; only r = 1",
                self.r
            )));
        }
        let mut b = SwitchingProblem::builder(self.q, self.horizon)
            .x0(self.x0)
            .gamma(self.gamma)
            .seed(self.seed);
        if let Some(psi) = &self.psi {
            b = b.psi(psi.iter().map(|c| poly(c)).collect());
        }
        if let Some(h) = &self.h {
            b = b.terminal(h.iter().map(|c| poly(c)).collect());
        }
        if let Some(d) = &self.diffusion {
            b = b.diffusion(poly(&d.b), poly(&d.sigma), d.lipschitz);
        }
        if let Some(d) = &self.drivers {
            b = b.drivers(DriverSet {
                f: d
                    .f
                    .iter()
                    .map(|e| LinearDriver {
                        base: poly(&e.base),
                        base_tscale: 0.0,
                        y_coef: e.y.clone(),
                        z_coef: e.z,
                    })
                    .collect(),
                lipschitz: d.lipschitz,
                monotone: d.monotone,
            });
        }
        for (key, c) in &self.costs {
            let (i, k) = parse_pair(key, self.q)?;
            let steps: Vec<(f64, f64)> = c.steps.iter().map(|s| (s.t, s.v)).collect();
            let step = StepFunction::new(self.horizon, c.v0, &steps)?;
            let cost = Cost {
                step,
                xfactor: c.xfactor.as_ref().map(|x| poly(x)),
                exp_scale: 0.0,
            };
            b = b.cost(i, k, cost);
        }
        b.build()
    }

    /// File form of an in-memory problem. Only directly representable
    /// instances qualify: polynomial coefficients everywhere and no
    /// residue of the exponential change of variables.
    pub fn from_problem(p: &SwitchingProblem, grids: Option<GridFile>) -> Result<ProblemFile> {
        fn coeffs(f: &SpaceFn, what: &str) -> Result<Vec<f64>> {
            match f {
                SpaceFn::Poly(c) => Ok(c.clone()),
                _ => Err(Error::Domain(format!(
                    "{what} is not a plain polynomial and has no file form"
                ))),
            }
        }
        let mut costs = BTreeMap::new();
        for (&(i, k), c) in p.cost_pairs() {
            if c.exp_scale != 0.0 {
                return Err(Error::Domain(
                    "transformed costs have no file form".into(),
                ));
            }
            let vals = c.step.segment_values();
            costs.insert(
                format!("{}->{}", i + 1, k + 1),
                CostFile {
                    v0: vals[0],
                    steps: c
                        .step
                        .breakpoints()
                        .iter()
                        .zip(&vals[1..])
                        .map(|(&t, &v)| StepEntry { t, v })
                        .collect(),
                    xfactor: match &c.xfactor {
                        None => None,
                        Some(f) => Some(coeffs(f, "cost xfactor")?),
                    },
                },
            );
        }
        let psi = p
            .psi
            .iter()
            .map(|f| coeffs(f, "payoff rate"))
            .collect::<Result<Vec<_>>>()?;
        let h = p
            .terminal
            .iter()
            .map(|f| coeffs(f, "terminal reward"))
            .collect::<Result<Vec<_>>>()?;
        let drivers = match &p.drivers {
            None => None,
            Some(d) => Some(DriverFile {
                lipschitz: d.lipschitz,
                monotone: d.monotone,
                f: d
                    .f
                    .iter()
                    .map(|f| {
                        if f.base_tscale != 0.0 {
                            return Err(Error::Domain(
                                "transformed drivers have no file form".into(),
                            ));
                        }
                        Ok(DriverEntry {
                            base: coeffs(&f.base, "driver base")?,
                            y: f.y_coef.clone(),
                            z: f.z_coef,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            }),
        };
        Ok(ProblemFile {
            q: p.q,
            horizon: p.horizon,
            r: 1,
            x0: p.x0,
            gamma: p.gamma,
            psi: Some(psi),
            drivers,
            h: Some(h),
            costs,
            diffusion: Some(DiffusionFile {
                b: coeffs(&p.drift, "drift")?,
                sigma: coeffs(&p.sigma, "volatility")?,
                lipschitz: p.diffusion_lipschitz,
            }),
            grids,
            seed: p.seed,
        })
    }
}

pub fn parse_problem(bytes: &[u8]) -> Result<ProblemFile> {
    serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("problem file: {e}")))
}

/// Reads, parses, and converts a problem file, returning the raw bytes for
/// content hashing alongside the built instance.
pub fn load_problem(path: &Path) -> Result<(SwitchingProblem, ProblemFile, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let file = parse_problem(&bytes)?;
    let p = file.to_problem()?;
    Ok((p, file, bytes))
}

pub fn save_problem(file: &ProblemFile, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(file)
        .map_err(|e| Error::Parse(format!("problem serialization: {e}")))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Content address of a file body: the blob framing `"blob {len}\0"` is
/// hashed together with the bytes, so the hash commits to the exact length.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hash of the resolved run configuration, from ordered key/value pairs.
pub fn config_hash(entries: &[(&str, String)]) -> String {
    let mut buf = String::new();
    for (k, v) in entries {
        buf.push_str(k);
        buf.push('=');
        buf.push_str(v);
        buf.push('\n');
    }
    sha256_hex(buf.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Receipt for one command invocation. Two runs with identical manifests
/// produced byte-identical artifacts, because the manifest lists every
/// output with its digest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub content_hash: String,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<OutputEntry>,
}

/// Output directory that records a digest for everything written through it.
pub struct OutDir {
    root: PathBuf,
    outputs: Vec<OutputEntry>,
}

impl OutDir {
    pub fn create(path: &Path) -> Result<OutDir> {
        fs::create_dir_all(path)?;
        Ok(OutDir {
            root: path.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.root.join(name), bytes)?;
        self.outputs.push(OutputEntry {
            name: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Writes `manifest.json` and returns the manifest.
    pub fn finish(
        mut self,
        command: &str,
        config_hash: String,
        content_hash: String,
        seed: u64,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash,
            content_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: std::mem::take(&mut self.outputs),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        bytes.push(b'\n');
        fs::write(self.root.join("manifest.json"), bytes)?;
        Ok(manifest)
    }
}

/// Seventeen significant digits; reruns must agree byte-for-byte.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .map_err(|e| Error::Parse(format!("csv: {e}")))?;
    for row in rows {
        w.write_record(&row)
            .map_err(|e| Error::Parse(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Parse(format!("csv: {e}")))
}

/// One layer of a lattice field; modes are 1-based in the output.
pub fn value_layer_csv(field: &ValueField, lat: &Lattice, layer: usize) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    let t = field.grid.time(layer);
    for i in 0..field.q {
        for (j, &x) in lat.layer(layer).iter().enumerate() {
            rows.push(vec![
                layer.to_string(),
                fmt_num(t),
                (i + 1).to_string(),
                j.to_string(),
                fmt_num(x),
                fmt_num(field.values[layer][i][j]),
                fmt_num(field.z[layer][i][j]),
            ]);
        }
    }
    csv_bytes(&["layer", "time", "mode", "node", "x", "y", "z"], rows)
}

/// One layer of a finite-difference field; modes are 1-based in the output.
pub fn pde_layer_csv(sol: &PdeSolution, layer: usize) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    let t = sol.grid.time.time(layer);
    for i in 0..sol.q {
        for (n, &x) in sol.grid.xs.iter().enumerate() {
            rows.push(vec![
                layer.to_string(),
                fmt_num(t),
                (i + 1).to_string(),
                n.to_string(),
                fmt_num(x),
                fmt_num(sol.values[layer][i][n]),
            ]);
        }
    }
    csv_bytes(&["layer", "time", "mode", "node", "x", "y"], rows)
}

pub fn jump_csv(report: &JumpReport) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for r in &report.records {
        rows.push(vec![
            fmt_num(r.t),
            r.pre_layer.to_string(),
            r.post_layer.to_string(),
            (r.mode + 1).to_string(),
            r.node.to_string(),
            fmt_num(r.x),
            fmt_num(r.y_pre),
            fmt_num(r.y_post),
            fmt_num(r.delta),
            fmt_num(r.obstacle_pre),
            fmt_num(r.residual),
        ]);
    }
    csv_bytes(
        &[
            "t",
            "pre_layer",
            "post_layer",
            "mode",
            "node",
            "x",
            "y_pre",
            "y_post",
            "delta",
            "obstacle_pre",
            "residual",
        ],
        rows,
    )
}

pub fn events_csv(events: &[SwitchEvent]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for e in events {
        rows.push(vec![
            e.layer.to_string(),
            fmt_num(e.t),
            (e.from + 1).to_string(),
            (e.to + 1).to_string(),
            fmt_num(e.cost),
        ]);
    }
    csv_bytes(&["layer", "t", "from", "to", "cost"], rows)
}

pub fn distances_csv(log: &PicardLog) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for (n, d) in log.distances.iter().enumerate() {
        rows.push(vec![(n + 1).to_string(), fmt_num(*d)]);
    }
    csv_bytes(&["iterate", "distance"], rows)
}

const PATHS_MAGIC: &[u8; 4] = b"SWB1";

/// Binary path dump: magic, path count, layer count, the layer times, then
/// all states row-major, everything little-endian.
pub fn paths_blob(paths: &PathSet) -> Vec<u8> {
    let ml = paths.grid.n_layers();
    let mut out = Vec::with_capacity(4 + 16 + 8 * (ml + paths.values.len()));
    out.extend_from_slice(PATHS_MAGIC);
    out.extend_from_slice(&(paths.n_paths as u64).to_le_bytes());
    out.extend_from_slice(&(ml as u64).to_le_bytes());
    for m in 0..ml {
        out.extend_from_slice(&paths.grid.time(m).to_le_bytes());
    }
    for v in &paths.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a path dump into `(times, states)` with states row-major.
pub fn paths_from_blob(bytes: &[u8]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let bad = |what: &str| Error::Parse(format!("path blob: {what}"));
    if bytes.len() < 20 || &bytes[0..4] != PATHS_MAGIC {
        return Err(bad("missing magic"));
    }
    let rd_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let n_paths = rd_u64(4) as usize;
    let ml = rd_u64(12) as usize;
    let want = 20 + 8 * (ml + n_paths * ml);
    if bytes.len() != want {
        return Err(bad("length mismatch"));
    }
    let rd_f64 = |at: usize| f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let times: Vec<f64> = (0..ml).map(|m| rd_f64(20 + 8 * m)).collect();
    let base = 20 + 8 * ml;
    let states: Vec<f64> = (0..n_paths * ml).map(|k| rd_f64(base + 8 * k)).collect();
    Ok((times, states, n_paths))
}
