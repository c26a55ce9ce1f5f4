//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use nalgebra::DVector;
use rayon::prelude::*;

use crate::degree::{DegreeResult, SignedZero};
use crate::economy::{Economy, Market};
use crate::envelope::{discriminant, discriminant_csv, FamilySpec};
use crate::error::{Error, Result};
use crate::intrinsic::{certify_crisis, CertifyOptions, CERTIFY_TOL};
use crate::lifting::{lift_path, EconomyPath, LiftOptions};
use crate::manifold::{enumerate_fiber, solve_equilibrium, PriceBox};
use crate::numeric::{Bounds, RANK_TOL};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Analyze,
    Fiber,
    Sweep,
    Envelope,
    Degree,
    Lift,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Fiber => "fiber",
            Command::Sweep => "sweep",
            Command::Envelope => "envelope",
            Command::Degree => "degree",
            Command::Lift => "lift",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tolerances {
    pub rank: Option<f64>,
    pub certify: Option<f64>,
}

impl Tolerances {
    pub fn rank(&self) -> f64 {
        self.rank.unwrap_or(RANK_TOL)
    }

    pub fn certify(&self) -> f64 {
        self.certify.unwrap_or(CERTIFY_TOL)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub grid: Option<usize>,
    /// Flat `lo,hi` pairs; meaning depends on the command.
    pub bounds: Option<Vec<f64>>,
    pub sweep_coords: (usize, usize),
    pub sweep_box: Vec<f64>,
    pub target: Option<PathBuf>,
    pub price: Option<Vec<f64>>,
    pub samples: usize,
}

/// Analyses of exchange economies and curve families.
#[derive(Debug, Parser)]
#[command(name = "crisis", version)]
pub struct Args {
    #[arg(long, value_enum)]
    pub command: Command,
    /// Economy JSON, or family JSON for `envelope`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Seed for the random kernel directions tried by the certificate
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Starts per axis (fiber, analyze, degree, lift), cells per axis (sweep)
    /// or slices per axis (envelope).
    #[arg(long)]
    pub grid: Option<usize>,
    /// Comma-separated `lo,hi` pairs: free prices, or `(x, y, z)` for `envelope`.
    #[arg(long = "box", value_delimiter = ',', allow_hyphen_values = true)]
    pub bounds: Option<Vec<f64>>,
    /// Relative singular-value threshold for rank decisions [default: 1e-7]
    #[arg(long)]
    pub tol_rank: Option<f64>,
    /// Relative tolerance of the crisis certificate [default: 1e-6]
    #[arg(long)]
    pub tol_certify: Option<f64>,
    /// Two flattened endowment indices swept by `sweep` (agent * l + good).
    #[arg(long, default_value = "1,2", value_parser = parse_coords)]
    pub sweep_coords: (usize, usize),
    /// Sweep range: `lo,hi` for both coordinates or `lo_a,hi_a,lo_b,hi_b`.
    #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.9])]
    pub sweep_box: Vec<f64>,
    /// Economy at the end of the `lift` path.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Starting free prices for `lift`.
    #[arg(long, value_delimiter = ',')]
    pub price: Option<Vec<f64>>,
    /// Path samples for `lift`.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
}

fn parse_coords(text: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = text.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok((
            a.trim().parse().map_err(|e| format!("{a}: {e}"))?,
            b.trim().parse().map_err(|e| format!("{b}: {e}"))?,
        )),
        _ => Err(format!("expected two comma-separated indices, got `{text}`")),
    }
}

impl Args {
    pub fn into_config(self) -> RunConfig {
        RunConfig {
            command: self.command,
            input: self.input,
            output_dir: self.out,
            seed: self.seed,
            tolerances: Tolerances {
                rank: self.tol_rank,
                certify: self.tol_certify,
            },
            grid: self.grid,
            bounds: self.bounds,
            sweep_coords: self.sweep_coords,
            sweep_box: self.sweep_box,
            target: self.target,
            price: self.price,
            samples: self.samples,
        }
    }
}

/// Files written by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

impl RunConfig {
    fn header(&self, comment: &str) -> String {
        format!(
            "{comment} crisis {VERSION} command={} seed={} tol_rank={:e} tol_certify={:e}\n",
            self.command.name(),
            self.seed,
            self.tolerances.rank(),
            self.tolerances.certify()
        )
    }

    fn certify_options(&self) -> CertifyOptions {
        CertifyOptions {
            rank_tol: self.tolerances.rank(),
            certify_tol: self.tolerances.certify(),
            seed: self.seed,
            ..CertifyOptions::default()
        }
    }

    fn price_box(&self, market: &Economy) -> Result<PriceBox> {
        match &self.bounds {
            None => Ok(market.default_price_box()),
            Some(b) => parse_box(b, market.free_dim()),
        }
    }

    fn write(&self, name: &str, body: &str, json: bool) -> Result<PathBuf> {
        let path = self.output_dir.join(name);
        let text = if json {
            body.to_string()
        } else {
            format!("{}{body}", self.header("#"))
        };
        fs::write(&path, text)?;
        Ok(path)
    }
}

fn parse_box(values: &[f64], dim: usize) -> Result<Bounds> {
    if values.len() == 2 {
        return Bounds::cube(dim, values[0], values[1]);
    }
    if values.len() != 2 * dim {
        return Err(Error::InvalidInput(format!(
            "--box needs 2 or {} numbers, got {}",
            2 * dim,
            values.len()
        )));
    }
    Bounds::new(
        values.iter().step_by(2).copied().collect(),
        values.iter().skip(1).step_by(2).copied().collect(),
    )
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn read_economy(path: &Path) -> Result<Economy> {
    Economy::from_json(&read_input(path)?)
}

/// Executes one command and writes its artifacts into the output directory.
pub fn run(config: &RunConfig) -> Result<Artifacts> {
    if !config.output_dir.is_dir() {
        fs::create_dir_all(&config.output_dir)?;
    }
    let files = match config.command {
        Command::Analyze => analyze(config)?,
        Command::Fiber => fiber(config)?,
        Command::Sweep => sweep(config)?,
        Command::Envelope => envelope(config)?,
        Command::Degree => degree(config)?,
        Command::Lift => lift(config)?,
    };
    Ok(Artifacts { files })
}

fn grid_or(config: &RunConfig, default: usize) -> usize {
    config.grid.unwrap_or(default).max(1)
}

fn analyze(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let economy = read_economy(&config.input)?;
    let fiber = enumerate_fiber(&economy, &config.price_box(&economy)?, grid_or(config, 200));
    let opts = config.certify_options();
    let mut points = Vec::new();
    for eq in &fiber.equilibria {
        let cert = certify_crisis(eq, None, &opts)?;
        points.push(serde_json::json!({
            "price": eq.price.as_slice(),
            "residual": eq.residual,
            "certificate": cert.to_json_value(),
        }));
    }
    let doc = serde_json::json!({
        "tool": format!("crisis {VERSION}"),
        "command": "analyze",
        "seed": config.seed,
        "tol_rank": config.tolerances.rank(),
        "tol_certify": config.tolerances.certify(),
        "equilibria": points,
    });
    Ok(vec![config.write("analyze.json", &serde_json::to_string_pretty(&doc)?, true)?])
}

fn fiber(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let economy = read_economy(&config.input)?;
    let fiber = enumerate_fiber(&economy, &config.price_box(&economy)?, grid_or(config, 200));
    let csv = fiber.to_csv_with(config.tolerances.rank())?;
    Ok(vec![config.write("fiber.csv", &csv, false)?])
}

/// One cell of the endowment sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub i: usize,
    pub j: usize,
    pub a: f64,
    pub b: f64,
    /// Equilibria at the cell centre.
    pub count: usize,
    pub min_corner: usize,
    pub max_corner: usize,
    /// The critical set meets the cell: corner counts differ or a centre
    /// equilibrium is critical.
    pub flagged: bool,
}

/// Equilibrium counts on a `cells x cells` grid over two endowment
/// coordinates of `economy`.
pub fn sweep_cells(
    economy: &Economy,
    coords: (usize, usize),
    range: [f64; 4],
    cells: usize,
    price_box: &PriceBox,
    fiber_grid: usize,
) -> Result<Vec<SweepCell>> {
    let len = economy.endowment_vector().len();
    if coords.0 >= len || coords.1 >= len || coords.0 == coords.1 {
        return Err(Error::InvalidInput(format!(
            "sweep coordinates {coords:?} must be distinct indices below {len}"
        )));
    }
    let [a0, a1, b0, b1] = range;
    if !(a0 > 0.0 && a0 < a1 && b0 > 0.0 && b0 < b1) {
        return Err(Error::InvalidInput(format!("invalid sweep box {range:?}")));
    }
    let at = |a: f64, b: f64| -> Result<(usize, bool)> {
        let mut w = economy.endowment_vector();
        w[coords.0] = a;
        w[coords.1] = b;
        let m = economy.with_endowment_vector(&w)?;
        let f = enumerate_fiber(&m, price_box, fiber_grid);
        Ok((f.len(), !f.is_regular()))
    };
    let node = |k: usize, lo: f64, hi: f64| lo + (hi - lo) * k as f64 / cells as f64;
    let vertices: Vec<usize> = (0..(cells + 1) * (cells + 1))
        .into_par_iter()
        .map(|idx| at(node(idx / (cells + 1), a0, a1), node(idx % (cells + 1), b0, b1)).map(|r| r.0))
        .collect::<Result<_>>()?;
    (0..cells * cells)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / cells, idx % cells);
            let a = 0.5 * (node(i, a0, a1) + node(i + 1, a0, a1));
            let b = 0.5 * (node(j, b0, b1) + node(j + 1, b0, b1));
            let (count, critical) = at(a, b)?;
            let corners = [
                vertices[i * (cells + 1) + j],
                vertices[i * (cells + 1) + j + 1],
                vertices[(i + 1) * (cells + 1) + j],
                vertices[(i + 1) * (cells + 1) + j + 1],
            ];
            let min_corner = *corners.iter().min().expect("four corners");
            let max_corner = *corners.iter().max().expect("four corners");
            Ok(SweepCell {
                i,
                j,
                a,
                b,
                count,
                min_corner,
                max_corner,
                flagged: min_corner != max_corner || critical,
            })
        })
        .collect()
}

fn sweep(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let economy = read_economy(&config.input)?;
    let range = match config.sweep_box.as_slice() {
        [lo, hi] => [*lo, *hi, *lo, *hi],
        [a0, a1, b0, b1] => [*a0, *a1, *b0, *b1],
        other => {
            return Err(Error::InvalidInput(format!(
                "--sweep-box needs 2 or 4 numbers, got {}",
                other.len()
            )))
        }
    };
    let cells = sweep_cells(
        &economy,
        config.sweep_coords,
        range,
        grid_or(config, 50),
        &config.price_box(&economy)?,
        100,
    )?;
    let mut csv = String::from("i,j,w_a,w_b,count,min_corner,max_corner,flag\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{},{},{},{}\n",
            c.i, c.j, c.a, c.b, c.count, c.min_corner, c.max_corner, c.flagged as u8
        ));
    }
    Ok(vec![config.write("sweep.csv", &csv, false)?])
}

fn envelope(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let family = FamilySpec::from_json(&read_input(&config.input)?)?;
    let bounds = match &config.bounds {
        Some(b) => parse_box(b, 3)?,
        None => match family {
            FamilySpec::Ballistic { .. } => Bounds::new(vec![0.5, -10.0, 0.05], vec![9.0, 10.0, 1.5])?,
            _ => Bounds::new(vec![-5.0, -5.0, -5.0], vec![5.0, 5.0, 5.0])?,
        },
    };
    let points = discriminant(&family, &bounds, grid_or(config, 16))?;
    Ok(vec![config.write("envelope.csv", &discriminant_csv(&points), false)?])
}

fn degree(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let economy = read_economy(&config.input)?;
    let fiber = enumerate_fiber(&economy, &config.price_box(&economy)?, grid_or(config, 200));
    if let Some(eq) = fiber.equilibria.iter().find(|e| e.critical) {
        return Err(Error::CriticalEconomy {
            price: eq.price.iter().copied().collect(),
        });
    }
    let zeros: Vec<SignedZero> = fiber
        .equilibria
        .iter()
        .map(|e| SignedZero {
            point: e.price.iter().copied().collect(),
            sign: e.index(),
        })
        .collect();
    let result = DegreeResult {
        value: zeros.iter().map(|z| z.sign).sum(),
        zeros,
        regular: true,
        target: economy.endowment_vector().iter().copied().collect(),
        attempts: 1,
    };
    let doc = serde_json::json!({
        "tool": format!("crisis {VERSION}"),
        "command": "degree",
        "seed": config.seed,
        "tol_rank": config.tolerances.rank(),
        "tol_certify": config.tolerances.certify(),
        "degree": result,
    });
    Ok(vec![config.write("degree.json", &serde_json::to_string_pretty(&doc)?, true)?])
}

fn lift(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let start = read_economy(&config.input)?;
    let end = match &config.target {
        Some(p) => read_economy(p)?,
        None => return Err(Error::InvalidInput("lift needs --target".into())),
    };
    let path = EconomyPath::straight(&start, &end, config.samples.max(1))?;
    let p0 = match &config.price {
        Some(p) => DVector::from_vec(p.clone()),
        None => {
            let fiber = enumerate_fiber(&start, &config.price_box(&start)?, grid_or(config, 200));
            fiber
                .equilibria
                .first()
                .map(|e| e.price.clone())
                .ok_or_else(|| Error::InvalidInput("no equilibrium found at the start economy".into()))?
        }
    };
    if p0.len() != start.free_dim() {
        return Err(Error::InvalidInput(format!(
            "--price needs {} values",
            start.free_dim()
        )));
    }
    let p0 = solve_equilibrium(&start, &p0)?.price;
    let opts = LiftOptions {
        crisis_tol: config.tolerances.rank(),
        ..LiftOptions::default()
    };
    let result = lift_path(&path, &p0, None, &opts)?;
    Ok(vec![config.write("lift.csv", &result.to_csv(), false)?])
}

/// Exit status for a failed run: 1 for input errors, 2 for numerical ones.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_input_error() {
        1
    } else {
        2
    }
}

/// JSON form of an error, written to stderr and to `error.json`.
pub fn error_json(err: &Error) -> String {
    let kind = format!("{err:?}");
    let kind = kind.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error");
    serde_json::json!({ "error": kind, "message": err.to_string(), "exit_code": exit_code(err) }).to_string()
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let config = args.into_config();
    match run(&config) {
        Ok(artifacts) => {
            for f in &artifacts.files {
                println!("{}", f.display());
            }
            0
        }
        Err(err) => {
            let text = error_json(&err);
            eprintln!("{text}");
            if config.output_dir.is_dir() {
                let _ = fs::write(config.output_dir.join("error.json"), &text);
            }
            exit_code(&err)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_parsing() {
        assert_eq!(parse_box(&[0.1, 2.0], 2).unwrap(), Bounds::cube(2, 0.1, 2.0).unwrap());
        let b = parse_box(&[0.1, 2.0, 0.5, 3.0], 2).unwrap();
        assert_eq!(b.lo, vec![0.1, 0.5]);
        assert_eq!(b.hi, vec![2.0, 3.0]);
        assert!(parse_box(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(parse_box(&[2.0, 1.0], 1).is_err());
    }

    #[test]
    fn error_classification() {
        assert_eq!(exit_code(&Error::InvalidInput("x".into())), 1);
        assert_eq!(exit_code(&Error::CertificationMissing), 2);
        let j: serde_json::Value = serde_json::from_str(&error_json(&Error::StepCollapse { t: 0.5, step: 1e-11 })).unwrap();
        assert_eq!(j["error"], "StepCollapse");
        assert_eq!(j["exit_code"], 2);
    }

    #[test]
    fn arguments_map_to_config() {
        let args = Args::try_parse_from([
            "crisis", "--command", "sweep", "--input", "e.json", "--out", "o", "--grid", "10",
            "--sweep-box", "0.7,0.8", "--tol-rank", "1e-8",
        ])
        .unwrap();
        let c = args.into_config();
        assert_eq!(c.command, Command::Sweep);
        assert_eq!(c.seed, 42);
        assert_eq!(c.grid, Some(10));
        assert_eq!(c.sweep_coords, (1, 2));
        assert_eq!(c.sweep_box, vec![0.7, 0.8]);
        assert_eq!(c.tolerances.rank(), 1e-8);
        assert_eq!(c.tolerances.certify(), CERTIFY_TOL);
    }
}
