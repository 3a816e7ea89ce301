//! Run one configured experiment and write its artifacts.
//!
//! Every file goes under the output directory:
//!
//! | file | content |
//! |------|---------|
//! | `config.json` | effective config after overrides |
//! | `report.txt` | human summary |
//! | `report.csv` | one row per level or comparison |
//! | `timing.txt` | wall clock, kept apart so the rest is reproducible |
//!
//! plus kind-specific CSVs (`averages.csv`, `grid.csv`, `solution.csv`,
//! `paths.csv`, `fourier.csv`, `yosida.csv`).

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use crate::analytic_oracles::{fourier_solve, multiplier_identity_residual, FourierGrid, WRAP_THRESHOLD};
use crate::coefficients::{averaged_ellipticity, averaged_operator_coeffs, averaged_operator_coeffs_with, ELLIPTICITY_FLOOR};
use crate::config::{to_json, Experiment, ExperimentConfig, Prepared};
use crate::domain_grid::{evaluate_payoff, write_grid_csv};
use crate::mc_oracle::{log_moments, price_mc, simulate_terminal};
use crate::timestepper::{solve_averaged_with, solve_time_dependent, ProblemSpec};
use crate::verify::{
    energy_check, lemma5_check, oracle_agreement, semigroup_suite, theorem2_check, LevelRecord, OracleOptions,
    VerificationReport,
};
use crate::{Error, Result};

/// Result of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: VerificationReport,
    /// Contents of `report.txt`.
    pub text: String,
}

impl RunOutcome {
    pub fn pass(&self) -> bool {
        self.report.pass
    }
}

fn row(label: impl Into<String>, measured: f64, bound: f64, pass: bool) -> LevelRecord {
    LevelRecord { label: label.into(), nodes: Vec::new(), dt: f64::NAN, measured, bound, pass }
}

fn finish(experiment: &str, records: Vec<LevelRecord>, notes: Vec<String>, start: Instant) -> VerificationReport {
    VerificationReport {
        experiment: experiment.into(),
        pass: !records.is_empty() && records.iter().all(|r| r.pass),
        records,
        notes,
        wall_clock: start.elapsed().as_secs_f64(),
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn parts(p: &Prepared) -> Result<(&crate::coefficients::MarketModel, &ProblemSpec, &crate::timestepper::SolveConfig)> {
    match (&p.model, &p.problem, &p.solve) {
        (Some(m), Some(pr), Some(s)) => Ok((m, pr, s)),
        _ => Err(Error::Config(format!("`{}` needs model, domain, payoff and solver blocks", p.kind.name()))),
    }
}

/// Validate `cfg`, run it and write every artifact into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let prepared = cfg.prepare()?;
    fs::create_dir_all(out)?;
    let mut echo = cfg.clone();
    echo.output_dir = out.to_path_buf();
    fs::write(out.join("config.json"), to_json(&echo)? + "\n")?;

    let start = Instant::now();
    let report = execute(&prepared, out)?;
    let elapsed = start.elapsed().as_secs_f64();

    let mut text = String::new();
    writeln!(text, "kind: {}", prepared.kind.name()).unwrap();
    if let Some(m) = &cfg.model {
        writeln!(
            text,
            "market time: tau in [{}, {}]; engine time: t = T - tau in [0, {}]",
            m.tau0,
            m.maturity,
            m.maturity - m.tau0
        )
        .unwrap();
    }
    writeln!(text, "seed: {}", cfg.experiment.seed).unwrap();
    text.push_str(&report.to_text());
    fs::write(out.join("report.txt"), &text)?;
    report.write_csv(create(out, "report.csv")?)?;
    fs::write(out.join("timing.txt"), format!("wall_clock_seconds: {elapsed:.3}\n"))?;
    Ok(RunOutcome { report, text })
}

fn execute(p: &Prepared, out: &Path) -> Result<VerificationReport> {
    let start = Instant::now();
    match &p.experiment {
        Experiment::Average(params) => {
            let model = p.model.as_ref().expect("model built for average");
            let (tau0, maturity) = model.span();
            let avg = averaged_operator_coeffs_with(model, tau0, maturity, params.vol_average.into())?;
            let c = averaged_ellipticity(&avg);
            let n = model.n();
            let mut notes = Vec::new();
            for (i, s) in avg.sigma_bar.iter().enumerate() {
                notes.push(format!("sigma_bar[{i}] = {s:.6}"));
            }
            notes.push(format!("r_bar = {:.6}  m_bar = {:.6}  d_bar = {:.6}", avg.r_bar, avg.m_bar, avg.d_bar));
            notes.push("rho_bar:".into());
            for i in 0..n {
                let cells: Vec<String> = (0..n).map(|j| format!("{:>10.6}", avg.rho_bar[(i, j)])).collect();
                notes.push(cells.join(" "));
            }
            let mut w = csv::Writer::from_writer(create(out, "averages.csv")?);
            w.write_record(["quantity", "i", "j", "value"])?;
            let mut put = |q: &str, i: &str, j: &str, v: f64| w.write_record([q, i, j, &format!("{v:.17e}")]);
            put("r_bar", "", "", avg.r_bar)?;
            put("m_bar", "", "", avg.m_bar)?;
            put("d_bar", "", "", avg.d_bar)?;
            put("q_bar", "", "", avg.q_bar)?;
            for i in 0..n {
                put("sigma_bar", &i.to_string(), "", avg.sigma_bar[i])?;
                put("b_bar", &i.to_string(), "", avg.b_bar[i])?;
                for j in 0..n {
                    put("rho_bar", &i.to_string(), &j.to_string(), avg.rho_bar[(i, j)])?;
                    put("a_bar", &i.to_string(), &j.to_string(), avg.a_bar[(i, j)])?;
                }
            }
            w.flush()?;
            let records = vec![row("averaged ellipticity", c, ELLIPTICITY_FLOOR, c > ELLIPTICITY_FLOOR)];
            Ok(finish("average", records, notes, start))
        }
        Experiment::Solve(params) => {
            let (model, problem, scheme) = parts(p)?;
            let sol = if params.averaged {
                solve_averaged_with(model, problem, scheme, params.vol_average.into())?
            } else {
                solve_time_dependent(model, problem, scheme)?
            };
            let g = evaluate_payoff(&problem.payoff, &sol.grid)?;
            write_grid_csv(&sol.grid, &g, create(out, "grid.csv")?)?;
            sol.write_csv(problem.maturity, create(out, "solution.csv")?)?;
            let s = sol.summary;
            let mut records = vec![LevelRecord {
                label: "linear solver residual".into(),
                nodes: problem.nodes.clone(),
                dt: scheme.dt_target,
                measured: s.max_residual,
                bound: scheme.tolerance,
                pass: s.max_residual <= scheme.tolerance,
            }];
            for y in &params.spots {
                let v = sol.price_at(y)?;
                let label = y.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",");
                records.push(row(format!("price at ({label})"), v, f64::INFINITY, v.is_finite()));
            }
            let notes = vec![format!(
                "{} solve: {} steps, {} assemblies, max iterations {}",
                if params.averaged { "averaged" } else { "time-dependent" },
                s.steps,
                s.assemblies,
                s.max_iterations
            )];
            Ok(finish("solve", records, notes, start))
        }
        Experiment::Theorem2 { levels, rule, tolerance } => {
            let (model, problem, scheme) = parts(p)?;
            theorem2_check(model, problem, levels, scheme, *rule, *tolerance)
        }
        Experiment::Lemma5(params) => {
            let (model, problem, scheme) = parts(p)?;
            lemma5_check(model, problem, &params.n_list, scheme)
        }
        Experiment::Energy => {
            let (model, problem, scheme) = parts(p)?;
            energy_check(model, problem, scheme)
        }
        Experiment::Mc { mc, spot, moments, sigmas } => {
            let (model, problem, _) = parts(p)?;
            let res = price_mc(model, problem, spot, mc)?;
            let mut records = vec![row("price", res.price, f64::INFINITY, res.price.is_finite())];
            let mut notes = vec![format!(
                "price {:.6} stderr {:.3e} knocked {:.4} paths {}",
                res.price, res.std_error, res.knockout_fraction, res.paths
            )];
            let domain = (!problem.barrier_free).then_some(&problem.domain);
            let set = simulate_terminal(model, spot, problem.tau0, problem.maturity, domain, mc)?;
            set.write_csv(create(out, "paths.csv")?)?;
            if *moments {
                let free = simulate_terminal(model, spot, problem.tau0, problem.maturity, None, mc)?;
                let avg = averaged_operator_coeffs(model, problem.tau0, problem.maturity)?;
                let h = problem.horizon();
                for i in 0..model.n() {
                    let m = log_moments(&free, i);
                    let mean = spot[i].ln() - h * avg.b_bar[i];
                    let var = h * avg.sigma_bar_sq[i];
                    let dm = (m.mean - mean).abs();
                    let dv = (m.variance - var).abs();
                    records.push(row(format!("log-mean x{i}"), dm, sigmas * m.mean_se, dm <= sigmas * m.mean_se));
                    records.push(row(format!("log-variance x{i}"), dv, sigmas * m.variance_se, dv <= sigmas * m.variance_se));
                    notes.push(format!(
                        "x{i}: mean {:.6} (averaged law {mean:.6}), variance {:.6} (averaged law {var:.6})",
                        m.mean, m.variance
                    ));
                }
            }
            Ok(finish("mc", records, notes, start))
        }
        Experiment::Fourier { params, tolerance } => {
            let (model, problem, scheme) = parts(p)?;
            if !problem.barrier_free || model.n() > 2 {
                return Err(Error::Config("fourier needs a barrier-free domain and n <= 2".into()));
            }
            let grid = problem.build_grid()?;
            let fgrid = FourierGrid::matching(grid.lower_log().to_vec(), grid.upper_log().to_vec(), &problem.nodes)?;
            let payoff = &problem.payoff;
            let g = fgrid.sample(|x| {
                let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                payoff.at(&y).unwrap_or(0.0)
            });
            let field = fourier_solve(model, &fgrid, &g, problem.tau0, problem.maturity, params.route)?;
            field.write_csv(create(out, "fourier.csv")?)?;
            let ident = multiplier_identity_residual(model, problem.tau0, problem.maturity, &fgrid.frequencies())?;
            let mut records = vec![
                row("multiplier identity", ident, 1e-12, ident <= 1e-12),
                row("wrap mass", field.wrap_mass, WRAP_THRESHOLD, field.wrap_mass <= WRAP_THRESHOLD),
            ];
            let mut notes = vec![format!("route {:?}; imaginary residue {:.3e}", params.route, field.imag_residue)];
            if params.compare_pde {
                let opts = OracleOptions { fourier: true, relative_tolerance: *tolerance, ..OracleOptions::default() };
                let (rep, _) = oracle_agreement(model, problem, scheme, &opts)?;
                records.extend(rep.records);
                notes.extend(rep.notes);
            }
            Ok(finish("fourier", records, notes, start))
        }
        Experiment::Semigroup(opts) => {
            let (report, table) = semigroup_suite(opts)?;
            crate::semigroup_lab::write_yosida_csv(&table, create(out, "yosida.csv")?)?;
            Ok(report)
        }
        Experiment::Oracle(opts) => {
            let (model, problem, scheme) = parts(p)?;
            Ok(oracle_agreement(model, problem, scheme, opts)?.0)
        }
    }
}
