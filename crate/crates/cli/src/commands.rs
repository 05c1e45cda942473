use std::path::Path;

use anyhow::{ensure, Context, Result};
use nalgebra::DMatrix;
use serde::Serialize;
use sing_core::matcher::center_columns;
use sing_core::pipeline::{ols_scores, preprocess_dataset};
use sing_core::simgen::vec_to_grid;
use sing_core::{
    generate_toy, greedy_match, lngca_whitened, perm_test_joint_rank, sing_decompose,
    sing_from_init, vec_to_net, DataMatrix, Diagnostics, JointInit, RhoExtent, SingConfig, ToySpec,
};

use crate::io::{find_matrix, read_matrix, write_csv, Format, OutputDir};
use crate::manifest::{Input, Manifest};
use crate::{DecomposeArgs, ExportCommand, LngcaArgs, MatchArgs, PermtestArgs, SimulateArgs};

fn column(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(values.len(), 1, values)
}

#[derive(Serialize)]
struct SimulateResults {
    p_x: usize,
    p_y: usize,
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let spec = ToySpec {
        n: args.n,
        grid: args.grid,
        nodes: args.nodes,
        joint_rank: args.joint_rank,
        individual_rank: args.individual_rank,
        noise_sd: args.noise_sd,
        seed: args.seed,
    };
    let toy = generate_toy(&spec)?;
    let mut out = OutputDir::create(&args.out.out, args.out.format)?;
    out.matrix("X", toy.x.values())?;
    out.matrix("Y", toy.y.values())?;
    let t = &toy.truth;
    for (name, m) in [
        ("truth/M_j", &t.m_j),
        ("truth/M_ix", &t.m_ix),
        ("truth/M_iy", &t.m_iy),
        ("truth/S_jx", &t.s_jx),
        ("truth/S_jy", &t.s_jy),
        ("truth/S_ix", &t.s_ix),
        ("truth/S_iy", &t.s_iy),
    ] {
        out.matrix(name, m)?;
    }
    out.matrix("truth/D_x", &column(&t.d_x))?;
    out.matrix("truth/D_y", &column(&t.d_y))?;
    let dir = out.path().to_path_buf();
    let results = SimulateResults {
        p_x: toy.x.p(),
        p_y: toy.y.p(),
    };
    Manifest::new("simulate", &spec, Vec::new(), out.into_written(), results).write(&dir)
}

#[derive(Serialize)]
struct DecomposeSettings<'a> {
    #[serde(flatten)]
    sing: &'a SingConfig,
    init_from: Option<String>,
    format: Format,
}

#[derive(Serialize)]
struct DecomposeResults<'a> {
    rho_numeric: f64,
    joint_rank: usize,
    scale_x: &'a [f64],
    scale_y: &'a [f64],
    diagnostics: &'a Diagnostics,
}

pub fn decompose(args: DecomposeArgs) -> Result<()> {
    let xm = read_matrix(&args.x)?;
    let ym = read_matrix(&args.y)?;
    let mut inputs = vec![Input::new("x", &args.x, &xm), Input::new("y", &args.y, &ym)];
    let rho_extent: RhoExtent = args.rho.parse()?;
    let config = SingConfig {
        rank_x: args.rank_x,
        rank_y: args.rank_y,
        rho_extent,
        n_perm: args.n_perm,
        alpha_level: args.alpha_level,
        individual: !args.no_individual,
        ols_scores: args.ols_scores,
        ..args.solver.config()
    };
    let x = DataMatrix::new(xm).context("X")?;
    let y = DataMatrix::new(ym).context("Y")?;

    let result = match &args.init_from {
        Some(dir) => {
            let ux_path = find_matrix(dir, "Ux")?;
            let uy_path = find_matrix(dir, "Uy")?;
            let ux = read_matrix(&ux_path)?;
            let uy = read_matrix(&uy_path)?;
            inputs.push(Input::new("ux", &ux_path, &ux));
            inputs.push(Input::new("uy", &uy_path, &uy));
            let joint_rank = args.joint_rank.context("--init-from needs --joint-rank")?;
            sing_from_init(&x, &y, &config, &JointInit { ux, uy, joint_rank })?
        }
        None => sing_decompose(&x, &y, &config)?,
    };

    let mut out = OutputDir::create(&args.out.out, args.out.format)?;
    out.matrix("S_jx", &result.s_jx)?;
    out.matrix("S_jy", &result.s_jy)?;
    out.matrix("M_j", &result.m_j)?;
    out.matrix("M_jx", &result.m_jx)?;
    out.matrix("M_jy", &result.m_jy)?;
    out.matrix("D_x", &column(&result.scale_x))?;
    out.matrix("D_y", &column(&result.scale_y))?;
    if let Some(ind) = &result.individual {
        out.matrix("S_ix", &ind.s_ix)?;
        out.matrix("S_iy", &ind.s_iy)?;
        out.matrix("M_ix", &ind.m_ix)?;
        out.matrix("M_iy", &ind.m_iy)?;
    }
    out.matrix("Ux", &result.ux)?;
    out.matrix("Uy", &result.uy)?;
    for w in &result.diagnostics.warnings {
        eprintln!("warning: {w}");
    }

    let dir = out.path().to_path_buf();
    let settings = DecomposeSettings {
        sing: &config,
        init_from: args.init_from.as_ref().map(|p| p.display().to_string()),
        format: args.out.format,
    };
    let results = DecomposeResults {
        rho_numeric: result.diagnostics.rho,
        joint_rank: result.diagnostics.joint_rank,
        scale_x: &result.scale_x,
        scale_y: &result.scale_y,
        diagnostics: &result.diagnostics,
    };
    Manifest::new("decompose", settings, inputs, out.into_written(), results).write(&dir)
}

#[derive(Serialize)]
struct LngcaResults {
    jb_values: Vec<f64>,
    converged: bool,
    iterations: usize,
    best_restart: usize,
    objective: f64,
    max_feasibility_error: f64,
    warnings: Vec<String>,
}

pub fn lngca(args: LngcaArgs) -> Result<()> {
    let m = read_matrix(&args.data)?;
    let inputs = vec![Input::new("data", &args.data, &m)];
    let config = args.solver.config();
    let data = DataMatrix::new(m)?;
    let mut warnings = Vec::new();
    let whitener = preprocess_dataset(&data, config.standardize, config.covariance, &mut warnings)?;
    let cfg = config.lngca_config(args.rank, config.seed);
    let fit = lngca_whitened(&whitener, &cfg)?;
    let scores = ols_scores(&fit, &whitener)?;
    if !fit.converged {
        warnings.push(format!("did not converge in {} iterations", fit.iterations));
    }

    let mut out = OutputDir::create(&args.out.out, args.out.format)?;
    out.matrix("U", &fit.u)?;
    out.matrix("S", &fit.s)?;
    out.matrix("M", &scores)?;
    let dir = out.path().to_path_buf();
    let results = LngcaResults {
        objective: fit.objective(),
        jb_values: fit.jb_values,
        converged: fit.converged,
        iterations: fit.iterations,
        best_restart: fit.best_restart,
        max_feasibility_error: fit.max_feasibility_error,
        warnings,
    };
    Manifest::new("lngca", &cfg, inputs, out.into_written(), results).write(&dir)
}

#[derive(Serialize)]
struct MatchResults {
    order_x: Vec<usize>,
    order_y: Vec<usize>,
    matched_distances: Vec<f64>,
}

pub fn match_components(args: MatchArgs) -> Result<()> {
    let mx = read_matrix(&args.mx)?;
    let my = read_matrix(&args.my)?;
    let ux = read_matrix(&args.ux)?;
    let uy = read_matrix(&args.uy)?;
    let inputs = vec![
        Input::new("mx", &args.mx, &mx),
        Input::new("my", &args.my, &my),
        Input::new("ux", &args.ux, &ux),
        Input::new("uy", &args.uy, &uy),
    ];
    let matched = greedy_match(&center_columns(&mx), &center_columns(&my), &ux, &uy)?;

    let mut out = OutputDir::create(&args.out.out, args.out.format)?;
    out.matrix("Mx", &matched.mx)?;
    out.matrix("My", &matched.my)?;
    out.matrix("Ux", &matched.ux)?;
    out.matrix("Uy", &matched.uy)?;
    let dir = out.path().to_path_buf();
    let results = MatchResults {
        order_x: matched.order_x,
        order_y: matched.order_y,
        matched_distances: matched.matched_distances,
    };
    Manifest::new(
        "match",
        args.out.format,
        inputs,
        out.into_written(),
        results,
    )
    .write(&dir)
}

#[derive(Serialize)]
struct PermtestSettings {
    n_perm: usize,
    alpha_level: f64,
    seed: u64,
    permuted_scores: &'static str,
}

pub fn permtest(args: PermtestArgs) -> Result<()> {
    let mx = read_matrix(&args.mx)?;
    let my = read_matrix(&args.my)?;
    let inputs = vec![
        Input::new("mx", &args.mx, &mx),
        Input::new("my", &args.my, &my),
    ];
    let test = perm_test_joint_rank(&mx, &my, args.n_perm, args.alpha_level, args.seed)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let settings = PermtestSettings {
        n_perm: args.n_perm,
        alpha_level: args.alpha_level,
        seed: args.seed,
        permuted_scores: "Y",
    };
    println!("joint rank: {}", test.joint_rank);
    Manifest::new("permtest", settings, inputs, Vec::new(), test).write(&args.out)
}

fn loading_row(path: &Path, component: usize) -> Result<Vec<f64>> {
    let s = read_matrix(path)?;
    ensure!(
        component < s.nrows(),
        "component {component} out of range: {} has {} rows",
        path.display(),
        s.nrows()
    );
    Ok(s.row(component).iter().copied().collect())
}

fn prepare_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

pub fn export(cmd: ExportCommand) -> Result<()> {
    match cmd {
        ExportCommand::Net {
            loadings,
            component,
            diag,
            out,
        } => {
            let net = vec_to_net(&loading_row(&loadings, component)?, diag)?;
            prepare_parent(&out)?;
            write_csv(&out, &net, None)
        }
        ExportCommand::Image {
            loadings,
            component,
            grid,
            out,
        } => {
            let row = loading_row(&loadings, component)?;
            let side = match grid {
                Some(g) => g,
                None => {
                    let g = (row.len() as f64).sqrt().round() as usize;
                    ensure!(
                        g * g == row.len(),
                        "row length {} is not a square; pass --grid",
                        row.len()
                    );
                    g
                }
            };
            let image = vec_to_grid(&row, side)?;
            prepare_parent(&out)?;
            write_csv(&out, &image, None)
        }
        ExportCommand::Scatter {
            x,
            y,
            component,
            out,
        } => {
            let mx = read_matrix(&x)?;
            let my = read_matrix(&y)?;
            ensure!(
                mx.nrows() == my.nrows(),
                "score files have {} and {} subjects",
                mx.nrows(),
                my.nrows()
            );
            ensure!(
                component < mx.ncols() && component < my.ncols(),
                "component {component} out of range ({} and {} columns)",
                mx.ncols(),
                my.ncols()
            );
            let table = DMatrix::from_fn(mx.nrows(), 3, |i, j| match j {
                0 => i as f64,
                1 => mx[(i, component)],
                _ => my[(i, component)],
            });
            prepare_parent(&out)?;
            write_csv(&out, &table, Some(&["subject", "x", "y"]))
        }
    }
}
