use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use nalgebra::{Complex, DMatrix};
use serde_json::{json, Value};

use lcpm_core::cycle::{
    analyze_cycle, build_frame, floquet_stability, monodromy_crosscheck, CycleAnalysis, PMCoefficients,
};
use lcpm_core::io::{
    exit_sample_header, fmt_f64, read_artifact, write_coefficient_table, write_exit_samples, write_histogram,
    write_json, write_trace, CsvOut, CycleArtifact, MatrixData,
};
use lcpm_core::linalg::{spectral_norm, spectral_radius, sym_sqrt};
use lcpm_core::neuro::{run_neuro, NeuroModelName, NeuroRunOptions, Segmentation};
use lcpm_core::norms::{adapted_norm, NormOracle};
use lcpm_core::rpm::{
    run_full_ensemble, run_kesten_ensemble, run_linear_ensemble, FullMapOptions, KestenSpec, LinearPMSpec,
    ReturnSection,
};
use lcpm_core::stats::{
    geometric_tail_fit, hazard_curve, hazard_flatness, hazard_upper_shape, mode, pooled_hazard, tail_onset,
    ExitSample, FitStatus, HazardEstimate, ShapePoint, SigmaPoint, TailFitOptions,
};

use crate::builtin::{builtin, Builtin};
use crate::config::{self, ExitMode, ExitTimesConfig, FindCycleConfig, FitConfig, NeuroConfig, RunConfig};
use crate::{Cli, Command, ConfigError};

struct Ctx {
    seed: u64,
    replicates: u64,
    out: PathBuf,
    timestamp: bool,
}

impl Ctx {
    fn csv(&self, name: &str) -> Result<CsvOut> {
        Ok(CsvOut::create(&self.out.join(name), self.timestamp)?)
    }

    fn json(&self, name: &str, value: &Value) -> Result<()> {
        write_json(&self.out.join(name), value)?;
        Ok(())
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => config::load(path)?,
        None => RunConfig {
            schema_version: config::SCHEMA_VERSION,
            ..Default::default()
        },
    };
    let replicates = cli.replicates.or(cfg.replicates).unwrap_or(1000);
    if replicates == 0 {
        return Err(config_err("replicates must be positive"));
    }
    let threads = cli.threads.or(cfg.threads).unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| config_err(format!("cannot set thread count: {e}")))?;
    }
    let out = cli.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx {
        seed: cli.seed.or(cfg.seed).unwrap_or(0),
        replicates,
        out,
        timestamp: !cli.no_header_timestamp,
    };
    match &cli.command {
        Command::FindCycle { model } => {
            let mut fc = cfg.find_cycle.clone();
            if let Some(m) = model {
                match fc.as_mut() {
                    Some(c) => c.model = m.clone(),
                    None => {
                        fc = Some(FindCycleConfig {
                            model: m.clone(),
                            params: BTreeMap::new(),
                            guess: None,
                            grid_points: None,
                            dt: None,
                            epsilon: None,
                        })
                    }
                }
            }
            let fc = fc.ok_or_else(|| config_err("find-cycle needs --model or a find_cycle section"))?;
            find_cycle(&ctx, &fc)
        }
        Command::ExitTimes => {
            let et = cfg
                .exit_times
                .as_ref()
                .ok_or_else(|| config_err("exit-times needs an exit_times section"))?;
            exit_times(&ctx, et)
        }
        Command::Neuro { model, sigma, duration } => {
            let mut nc = match (&cfg.neuro, model) {
                (Some(c), _) => c.clone(),
                (None, Some(m)) => NeuroConfig {
                    model: m.clone(),
                    params: BTreeMap::new(),
                    sigma: None,
                    duration: 0.0,
                    dt: None,
                    trace_stride: 100,
                    target_epochs: 0,
                    min_at_risk: 100,
                },
                (None, None) => return Err(config_err("neuro needs --model or a neuro section")),
            };
            if let Some(m) = model {
                nc.model = m.clone();
            }
            if let Some(s) = sigma {
                nc.sigma = Some(*s);
            }
            if let Some(d) = duration {
                nc.duration = *d;
            }
            neuro(&ctx, &nc)
        }
        Command::Fit { samples } => {
            let mut fc = cfg.fit.clone();
            if let Some(s) = samples {
                match fc.as_mut() {
                    Some(c) => c.samples = s.clone(),
                    None => {
                        fc = Some(FitConfig {
                            samples: s.clone(),
                            n0: None,
                            min_at_risk: 100,
                        })
                    }
                }
            }
            let fc = fc.ok_or_else(|| config_err("fit needs --samples or a fit section"))?;
            fit(&ctx, &fc)
        }
    }
}

fn complex_json(zs: &[Complex<f64>]) -> Value {
    json!(zs.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>())
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!(MatrixData::from(m))
}

fn analyse_builtin(model: &Builtin, guess: Option<&[f64]>) -> Result<CycleAnalysis> {
    let g = guess.unwrap_or(&model.guess);
    if g.len() != model.field.dim() {
        return Err(config_err(format!(
            "guess has {} entries, model {} has dimension {}",
            g.len(),
            model.name,
            model.field.dim()
        )));
    }
    Ok(analyze_cycle(&*model.field, &*model.diffusion, g, &model.options)?)
}

fn find_cycle(ctx: &Ctx, fc: &FindCycleConfig) -> Result<()> {
    let mut model = builtin(&fc.model, &fc.params)?;
    if let Some(n) = fc.grid_points {
        model.options.grid_points = n;
    }
    if let Some(dt) = fc.dt {
        if !(dt > 0.0) {
            return Err(config_err("dt must be positive"));
        }
        model.options.dt = dt;
    }
    let an = analyse_builtin(&model, fc.guess.as_deref())?;
    let co = &an.coefficients;
    let check = monodromy_crosscheck(&an.cycle, &an.frame, co);
    let rho = spectral_radius(&co.a_mat);
    let epsilon = fc.epsilon.unwrap_or(0.5 * (1.0 - rho));
    let stab = floquet_stability(&co.a_mat, epsilon);
    let mut warnings = an.cycle.warnings.clone();
    warnings.extend(co.diagnostics.warnings.iter().cloned());
    for w in &warnings {
        warn!("{w}");
    }

    let artifact = CycleArtifact::new(&model.name, &an.cycle, Some(&an.frame), co);
    lcpm_core::io::write_artifact(&ctx.out.join("cycle.json"), &artifact)?;
    let mut table = ctx.csv("coefficients.csv")?;
    write_coefficient_table(&mut table, co)?;
    table.finish()?;

    let report = json!({
        "model": model.name,
        "period": an.cycle.period,
        "newton_iterations": an.cycle.newton_iterations,
        "closure_error": an.cycle.closure_error,
        "A": matrix_json(&co.a_mat),
        "B": matrix_json(&co.b_mat),
        "Sigma": matrix_json(&co.sigma),
        "floquet_moduli": stab.moduli,
        "spectral_radius": stab.spectral_radius,
        "epsilon": epsilon,
        "stable": stab.stable,
        "full_multipliers": complex_json(&check.full_multipliers),
        "reduced_multipliers": complex_json(&check.reduced_multipliers),
        "trivial_multiplier_error": check.trivial_error,
        "multiplier_relative_error": check.max_relative_error,
        "frame_orthonormality_error": an.frame.orthonormality_error(),
        "frame_closure_error": an.frame.closure_error,
        "liouville_error": co.diagnostics.liouville_error,
        "conjugacy_residual": co.diagnostics.conjugacy_residual,
        "quadrature_error": co.diagnostics.quadrature_error,
        "warnings": warnings,
    });
    ctx.json("floquet.json", &report)?;

    println!("model            {}", model.name);
    println!("period           {:.12}", an.cycle.period);
    for (i, m) in stab.moduli.iter().enumerate() {
        println!("floquet |mu_{i}|    {m:.6e}");
    }
    if co.a_mat.nrows() == 1 {
        println!("A                {:.12e}", co.a_mat[(0, 0)]);
        println!("B                {:.12e}", co.b_mat[(0, 0)]);
    }
    println!("spectral radius  {:.6e}", stab.spectral_radius);
    println!("verdict          {}", if stab.stable { "stable" } else { "unstable" });
    Ok(())
}

/// Steps until `|A^n| ≤ 1e-3`, plus one: the initial condition is
/// forgotten from there on.
fn transient_steps(a: &DMatrix<f64>) -> u64 {
    let mut p = a.clone();
    for n in 1..1000u64 {
        if spectral_norm(&p) <= 1e-3 {
            return n + 1;
        }
        p = a * p;
    }
    1000
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(config_err(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

enum MapSource {
    Explicit { a: DMatrix<f64>, b: DMatrix<f64>, cov: DMatrix<f64> },
    Coefficients(Box<PMCoefficients>),
}

impl MapSource {
    fn a(&self) -> &DMatrix<f64> {
        match self {
            MapSource::Explicit { a, .. } => a,
            MapSource::Coefficients(c) => &c.a_mat,
        }
    }

    fn b(&self) -> &DMatrix<f64> {
        match self {
            MapSource::Explicit { b, .. } => b,
            MapSource::Coefficients(c) => &c.b_mat,
        }
    }

    fn cov(&self) -> &DMatrix<f64> {
        match self {
            MapSource::Explicit { cov, .. } => cov,
            MapSource::Coefficients(c) => &c.sigma,
        }
    }
}

struct CellResult {
    sigma: f64,
    h: f64,
    samples: Vec<ExitSample>,
    escaped: Option<u64>,
}

fn exit_times(ctx: &Ctx, et: &ExitTimesConfig) -> Result<()> {
    if et.sigma.is_empty() || et.h.is_empty() {
        return Err(config_err("sigma and h grids must be nonempty"));
    }
    if et.sigma.iter().any(|s| !(*s >= 0.0)) || et.h.iter().any(|h| !(*h > 0.0)) {
        return Err(config_err("sigma must be nonnegative and h positive"));
    }
    if et.max_steps == 0 {
        return Err(config_err("max_steps must be positive"));
    }
    let model = match &et.model {
        Some(name) => Some(builtin(name, &et.params)?),
        None => None,
    };
    let mut analysis: Option<CycleAnalysis> = None;
    let source = if let Some(map) = &et.map {
        if et.mode == ExitMode::Full {
            return Err(config_err("full mode needs a model, not an explicit map"));
        }
        MapSource::Explicit {
            a: to_matrix(&map.a, "map.a")?,
            b: to_matrix(&map.b, "map.b")?,
            cov: to_matrix(&map.cov, "map.cov")?,
        }
    } else if let Some(path) = &et.artifact {
        let art = read_artifact(path).with_context(|| format!("reading {}", path.display()))?;
        let coeffs = art.coefficients.to_coefficients()?;
        if et.mode == ExitMode::Full {
            let m = model
                .as_ref()
                .ok_or_else(|| config_err("full mode needs the model that produced the artifact"))?;
            let cycle = art.cycle.to_cycle()?;
            let frame = match &art.frame {
                Some(f) => f.to_frame()?,
                None => build_frame(&*m.field, &cycle)?,
            };
            analysis = Some(CycleAnalysis {
                cycle,
                frame,
                coefficients: coeffs.clone(),
            });
        }
        MapSource::Coefficients(Box::new(coeffs))
    } else if let Some(m) = &model {
        let an = analyse_builtin(m, None)?;
        let c = an.coefficients.clone();
        analysis = Some(an);
        MapSource::Coefficients(Box::new(c))
    } else {
        return Err(config_err("exit_times needs one of map, artifact or model"));
    };

    let a = source.a().clone();
    let rho = spectral_radius(&a);
    if rho >= 1.0 {
        return Err(lcpm_core::Error::NotContracting {
            spectral_radius: rho,
            bound: 1.0,
        }
        .into());
    }
    let epsilon = et.epsilon.unwrap_or(0.5 * (1.0 - rho));
    let oracle: NormOracle = adapted_norm(&a, epsilon)?;
    let n0 = et.n0.unwrap_or_else(|| transient_steps(&a)).max(1);
    let d = a.nrows();
    info!("adapted norm: K = {}, gamma2 = {}", oracle.truncation, oracle.gamma2);

    let label_names = ["sigma", "h"];
    let mut samples_csv = ctx.csv("exit_samples.csv")?;
    samples_csv.row(exit_sample_header(&label_names.map(|n| (n, 0.0))))?;
    let mut hazard_csv = ctx.csv("hazard.csv")?;
    hazard_csv.row(["sigma", "h", "n", "at_risk", "events", "p_hat", "ci_low", "ci_high"])?;

    let mut cells = Vec::new();
    let mut cell_index = 0u64;
    for &h in &et.h {
        for &sigma in &et.sigma {
            let seed = ctx.seed.wrapping_add(cell_index);
            cell_index += 1;
            let start = vec![0.0; d];
            let (samples, escaped) = match et.mode {
                ExitMode::Linear => {
                    let spec = LinearPMSpec::new(a.clone(), source.b().clone(), source.cov().clone(), sigma)?;
                    (
                        run_linear_ensemble(&spec, &oracle, h, &start, et.max_steps, ctx.replicates, seed),
                        None,
                    )
                }
                ExitMode::Kesten => {
                    let cov = source.cov();
                    let g = sym_sqrt(&cov.view((1, 1), (d, d)).into_owned());
                    let spec = KestenSpec::new(a.clone(), source.b().clone(), g, sigma, et.delta.unwrap_or(sigma))?;
                    (
                        run_kesten_ensemble(&spec, &oracle, h, &start, et.max_steps, ctx.replicates, seed),
                        None,
                    )
                }
                ExitMode::Full => {
                    let m = model.as_ref().expect("full mode has a model");
                    let an = analysis.as_ref().expect("full mode has a cycle");
                    let section = ReturnSection::from_cycle(&an.cycle, &an.frame);
                    let opts = FullMapOptions {
                        dt: et.dt.unwrap_or(m.sde_dt),
                        ..Default::default()
                    };
                    let res = run_full_ensemble(
                        &*m.field,
                        &*m.diffusion,
                        &section,
                        &oracle,
                        sigma,
                        h,
                        et.max_steps,
                        &opts,
                        ctx.replicates,
                        seed,
                    )?;
                    let escaped = res.iter().filter(|(_, e)| *e).count() as u64;
                    (res.into_iter().map(|(s, _)| s).collect(), Some(escaped))
                }
            };
            write_exit_samples(&mut samples_csv, &[("sigma", sigma), ("h", h)], &samples)?;
            cells.push(CellResult {
                sigma,
                h,
                samples,
                escaped,
            });
        }
    }
    samples_csv.finish()?;

    let mut reports = Vec::new();
    let mut shape_points = Vec::new();
    for c in &cells {
        let curve = curve_of(&c.samples)?;
        write_hazard_rows(&mut hazard_csv, &[c.sigma, c.h], &curve)?;
        let mut rep = hazard_report(&c.samples, &curve, n0, et.min_at_risk, ctx.seed);
        rep["sigma"] = json!(c.sigma);
        rep["h"] = json!(c.h);
        if let Some(e) = c.escaped {
            rep["escaped"] = json!(e);
        }
        let pooled = pooled_hazard(&curve, n0);
        shape_points.push(ShapePoint {
            sigma: c.sigma,
            h: c.h,
            p_hat: pooled.p_hat,
        });
        reports.push(rep);
    }
    hazard_csv.finish()?;

    let mut scaling = Vec::new();
    if et.sigma.len() >= 2 {
        for &h in &et.h {
            let pts: Vec<SigmaPoint> = cells
                .iter()
                .filter(|c| c.h == h)
                .map(|c| {
                    let p = pooled_hazard(&curve_of(&c.samples).expect("checked above"), n0);
                    SigmaPoint {
                        sigma: c.sigma,
                        p_hat: p.p_hat,
                        std_error: p.std_error,
                    }
                })
                .collect();
            let rep = lcpm_core::stats::fit_sigma_law(&pts);
            scaling.push(json!({ "h": h, "report": rep }));
        }
    }
    let shape = (cells.len() >= 2).then(|| hazard_upper_shape(&shape_points));
    let report = json!({
        "mode": format!("{:?}", et.mode).to_lowercase(),
        "replicates": ctx.replicates,
        "seed": ctx.seed,
        "epsilon": epsilon,
        "gamma2": oracle.gamma2,
        "n0": n0,
        "cells": reports,
        "sigma_scaling": scaling,
        "upper_shape": shape,
    });
    ctx.json("hazard_report.json", &report)?;
    for r in report["cells"].as_array().into_iter().flatten() {
        println!(
            "sigma={} h={} p_hat={} flat={} tail_fit={}",
            r["sigma"], r["h"], r["pooled"]["p_hat"], r["flatness"]["flat"], r["tail_fit"]["status"]
        );
    }
    Ok(())
}

fn write_hazard_rows(out: &mut CsvOut, labels: &[f64], curve: &[HazardEstimate]) -> Result<()> {
    for e in curve {
        let mut rec: Vec<String> = labels.iter().map(|x| fmt_f64(*x)).collect();
        rec.extend([
            e.n.to_string(),
            e.at_risk.to_string(),
            e.events.to_string(),
            fmt_f64(e.p_hat),
            fmt_f64(e.ci_low),
            fmt_f64(e.ci_high),
        ]);
        out.row(rec)?;
    }
    Ok(())
}

/// Hazard curve, empty when every sample is censored (no exit observed).
fn curve_of(samples: &[ExitSample]) -> Result<Vec<HazardEstimate>> {
    if !samples.is_empty() && samples.iter().all(|s| s.censored) {
        return Ok(Vec::new());
    }
    Ok(hazard_curve(samples)?)
}

fn hazard_report(samples: &[ExitSample], curve: &[HazardEstimate], n0: u64, min_at_risk: u64, seed: u64) -> Value {
    let pooled = pooled_hazard(curve, n0);
    let flat = hazard_flatness(curve, n0, min_at_risk);
    let fit = geometric_tail_fit(
        samples,
        n0,
        &TailFitOptions {
            seed,
            ..Default::default()
        },
    );
    let mut warnings = Vec::new();
    if pooled.events == 0 {
        warnings.push("no exits at or after n0; hazard not estimable".to_string());
    }
    if fit.status == FitStatus::Inconclusive {
        warnings.push("too few tail samples or events for a goodness-of-fit test".to_string());
    }
    for w in &warnings {
        warn!("{w}");
    }
    json!({
        "samples": samples.len(),
        "censored": samples.iter().filter(|s| s.censored).count(),
        "n0": n0,
        "pooled": pooled,
        "flatness": flat,
        "tail_fit": fit,
        "inconclusive": fit.status == FitStatus::Inconclusive,
        "warnings": warnings,
    })
}

fn neuro(ctx: &Ctx, nc: &NeuroConfig) -> Result<()> {
    let name = NeuroModelName::parse(&nc.model)?;
    if !(nc.duration > 0.0) {
        return Err(config_err("duration must be positive"));
    }
    let model = builtin(name.as_str(), &nc.params)?;
    let neuro = model.neuro.clone().expect("neuron model");
    let sigma = nc.sigma.unwrap_or(name.default_sigma());
    if !(sigma >= 0.0) {
        return Err(config_err("sigma must be nonnegative"));
    }
    let an = analyse_builtin(&model, None)?;
    let seg = neuro.segmentation(&an.cycle);
    let opts = NeuroRunOptions {
        dt: nc.dt.unwrap_or(model.sde_dt),
        duration: nc.duration,
        sigma,
        seed: ctx.seed,
        trace_stride: nc.trace_stride,
        target_epochs: nc.target_epochs,
    };
    let run = run_neuro(&neuro, an.cycle.u[0].as_slice(), &seg, &opts)?;
    if let Some(trace) = &run.trace {
        let names: &[&str] = match name {
            NeuroModelName::InapikBurster => &["v", "n", "y"],
            NeuroModelName::BetaCellPair => &["v1", "n1", "y1", "v2", "n2", "y2"],
            NeuroModelName::HhMmo => &["v", "n", "h"],
        };
        let mut out = ctx.csv("trace.csv")?;
        write_trace(&mut out, trace, names)?;
        out.finish()?;
    }
    let mut counts_csv = ctx.csv("counts.csv")?;
    counts_csv.row(["epoch", "start", "end", "count"])?;
    for (i, c) in run.counts.counts.iter().enumerate() {
        counts_csv.row([
            i.to_string(),
            fmt_f64(run.counts.starts[i]),
            fmt_f64(run.counts.ends[i]),
            c.to_string(),
        ])?;
    }
    counts_csv.finish()?;
    let mut hist = ctx.csv("histogram.csv")?;
    write_histogram(&mut hist, &run.counts.counts)?;
    hist.finish()?;

    let shift = match seg {
        Segmentation::SmallBetweenSpikes { .. } => 1,
        Segmentation::SpikesPerBurst { .. } => 0,
    };
    let samples = run.counts.to_samples(shift);
    let mut scsv = ctx.csv("epoch_samples.csv")?;
    scsv.row(exit_sample_header(&[]))?;
    write_exit_samples(&mut scsv, &[], &samples)?;
    scsv.finish()?;

    let fit_json = if samples.is_empty() {
        warn!("no epochs recorded; nothing to fit");
        json!(null)
    } else {
        let curve = curve_of(&samples)?;
        let taus: Vec<u64> = samples.iter().map(|s| s.tau).collect();
        let n0 = tail_onset(&samples, nc.min_at_risk)
            .or_else(|| mode(&taus))
            .unwrap_or(1);
        hazard_report(&samples, &curve, n0, nc.min_at_risk, ctx.seed)
    };
    let report = json!({
        "model": name.as_str(),
        "sigma": sigma,
        "dt": opts.dt,
        "simulated_time": run.steps as f64 * opts.dt,
        "seed": ctx.seed,
        "period": an.cycle.period,
        "segmentation": seg,
        "count_shift": shift,
        "spikes": run.spikes.len(),
        "small_events": run.small_events.len(),
        "epochs": run.counts.len(),
        "open_epoch_count": run.counts.open_tail,
        "fit": fit_json,
    });
    ctx.json("neuro_fit.json", &report)?;
    println!(
        "{}: {} epochs, fit {}",
        name.as_str(),
        run.counts.len(),
        report["fit"]["tail_fit"]["status"]
    );
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<(Vec<(String, f64)>, ExitSample)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let tau_i = col("tau").ok_or_else(|| config_err("sample file lacks a tau column"))?;
    let cens_i = col("censored").ok_or_else(|| config_err("sample file lacks a censored column"))?;
    let rep_i = col("replicate");
    let seed_i = col("seed");
    let label_cols: Vec<(usize, String)> = ["sigma", "h"]
        .iter()
        .filter_map(|n| col(n).map(|i| (i, n.to_string())))
        .collect();
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_u = |i: usize| -> Result<u64> {
            rec[i]
                .parse::<u64>()
                .map_err(|e| config_err(format!("row {row}: bad integer {:?}: {e}", &rec[i])))
        };
        let labels = label_cols
            .iter()
            .map(|(i, n)| {
                rec[*i]
                    .parse::<f64>()
                    .map(|v| (n.clone(), v))
                    .map_err(|e| config_err(format!("row {row}: bad number {:?}: {e}", &rec[*i])))
            })
            .collect::<Result<Vec<_>>>()?;
        let s = ExitSample {
            replicate: rep_i.map(parse_u).transpose()?.unwrap_or(row as u64),
            tau: parse_u(tau_i)?,
            censored: parse_u(cens_i)? != 0,
            seed: seed_i.map(parse_u).transpose()?.unwrap_or(0),
        };
        out.push((labels, s));
    }
    Ok(out)
}

fn fit(ctx: &Ctx, fc: &FitConfig) -> Result<()> {
    let rows = read_samples(&fc.samples)?;
    if rows.is_empty() {
        return Err(config_err("sample file has no rows"));
    }
    let mut groups: Vec<(Vec<(String, f64)>, Vec<ExitSample>)> = Vec::new();
    for (labels, s) in rows {
        match groups.iter_mut().find(|(l, _)| *l == labels) {
            Some((_, v)) => v.push(s),
            None => groups.push((labels, vec![s])),
        }
    }
    let mut hazard_csv = ctx.csv("fit_hazard.csv")?;
    let label_names: Vec<String> = groups[0].0.iter().map(|(n, _)| n.clone()).collect();
    let mut header = label_names.clone();
    header.extend(["n", "at_risk", "events", "p_hat", "ci_low", "ci_high"].map(String::from));
    hazard_csv.row(header)?;
    let mut reports = Vec::new();
    let mut sigma_points = Vec::new();
    for (labels, samples) in &groups {
        let curve = curve_of(samples)?;
        let vals: Vec<f64> = labels.iter().map(|(_, v)| *v).collect();
        write_hazard_rows(&mut hazard_csv, &vals, &curve)?;
        let taus: Vec<u64> = samples.iter().map(|s| s.tau).collect();
        let n0 = fc
            .n0
            .or_else(|| tail_onset(samples, fc.min_at_risk))
            .or_else(|| mode(&taus))
            .unwrap_or(1);
        let mut rep = hazard_report(samples, &curve, n0, fc.min_at_risk, ctx.seed);
        for (n, v) in labels {
            rep[n.as_str()] = json!(v);
        }
        if let Some((_, s)) = labels.iter().find(|(n, _)| n == "sigma") {
            let p = pooled_hazard(&curve, n0);
            sigma_points.push(SigmaPoint {
                sigma: *s,
                p_hat: p.p_hat,
                std_error: p.std_error,
            });
        }
        reports.push(rep);
    }
    hazard_csv.finish()?;
    let scaling = (sigma_points.len() >= 2).then(|| lcpm_core::stats::fit_sigma_law(&sigma_points));
    let report = json!({ "groups": reports, "sigma_scaling": scaling });
    ctx.json("fit_report.json", &report)?;
    for r in &reports {
        println!(
            "n0={} p_hat={} tail_fit={}",
            r["n0"], r["pooled"]["p_hat"], r["tail_fit"]["status"]
        );
    }
    Ok(())
}
