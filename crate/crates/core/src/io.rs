//! On-disk artifact formats: JSON for structured objects (plants,
//! experiments, objectives, controllers, reports) and CSV for numeric time
//! series. Matrices are stored row-major with explicit shape fields so every
//! artifact is diffable and language-neutral.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::basis::{parse_library, FunctionLibrary, ParseError};
use crate::data::{DataError, DataSet, Experiment, InputSignal, PlantModel, Run, TimeMode};
use crate::synth::{Certificate, DesignObjective, SynthesisResult};
use crate::verify::VerificationReport;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed library: {0}")]
    Library(#[from] ParseError),
    #[error("invalid artifact: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn invalid(msg: impl Into<String>) -> IoError {
    IoError::Invalid(msg.into())
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

fn matrix_to_json(m: &DMatrix<f64>) -> Value {
    serde_json::to_value(MatrixJson {
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.transpose().as_slice().to_vec(),
    })
    .expect("plain struct")
}

fn matrix_from_json(v: &Value, what: &str) -> Result<DMatrix<f64>, IoError> {
    let m: MatrixJson = serde_json::from_value(v.clone())
        .map_err(|e| invalid(format!("{what}: {e}")))?;
    if m.data.len() != m.rows * m.cols {
        return Err(invalid(format!("{what}: {} entries for {}x{}", m.data.len(), m.rows, m.cols)));
    }
    Ok(DMatrix::from_row_slice(m.rows, m.cols, &m.data))
}

fn mode_str(mode: TimeMode) -> &'static str {
    match mode {
        TimeMode::Discrete => "discrete",
        TimeMode::Continuous => "continuous",
    }
}

fn mode_from_str(s: &str) -> Result<TimeMode, IoError> {
    match s {
        "discrete" => Ok(TimeMode::Discrete),
        "continuous" => Ok(TimeMode::Continuous),
        other => Err(invalid(format!("unknown time mode `{other}`"))),
    }
}

/// Plant file: `{n, m, mode, library, A (row-major), B (row-major)}`.
pub fn plant_from_json(text: &str) -> Result<PlantModel, IoError> {
    let v: Value = serde_json::from_str(text)?;
    let n = v["n"].as_u64().ok_or_else(|| invalid("missing state dimension n"))? as usize;
    let m = v["m"].as_u64().ok_or_else(|| invalid("missing input dimension m"))? as usize;
    let mode = mode_from_str(v["mode"].as_str().ok_or_else(|| invalid("missing mode"))?)?;
    let lib_src = v["library"].as_str().ok_or_else(|| invalid("missing library"))?;
    let library = parse_library(lib_src, n)?;
    let s = library.len();
    let a_raw: Vec<f64> = serde_json::from_value(v["A"].clone())
        .map_err(|e| invalid(format!("A: {e}")))?;
    let b_raw: Vec<f64> = serde_json::from_value(v["B"].clone())
        .map_err(|e| invalid(format!("B: {e}")))?;
    if a_raw.len() != n * s {
        return Err(invalid(format!("A has {} entries, expected {}", a_raw.len(), n * s)));
    }
    if b_raw.len() != n * m {
        return Err(invalid(format!("B has {} entries, expected {}", b_raw.len(), n * m)));
    }
    let a = DMatrix::from_row_slice(n, s, &a_raw);
    let b = DMatrix::from_row_slice(n, m, &b_raw);
    Ok(PlantModel::new(library, a, b, mode)?)
}

pub fn plant_to_json(plant: &PlantModel) -> String {
    let v = json!({
        "n": plant.state_dim(),
        "m": plant.input_dim(),
        "mode": mode_str(plant.mode),
        "library": plant.library.source(),
        "A": plant.a.transpose().as_slice().to_vec(),
        "B": plant.b.transpose().as_slice().to_vec(),
    });
    serde_json::to_string_pretty(&v).expect("plain value")
}

fn vector_from_json(v: &Value, what: &str) -> Result<DVector<f64>, IoError> {
    let raw: Vec<f64> =
        serde_json::from_value(v.clone()).map_err(|e| invalid(format!("{what}: {e}")))?;
    Ok(DVector::from_vec(raw))
}

/// Experiment file: run list plus sampling parameters.
pub fn experiment_from_json(text: &str) -> Result<Experiment, IoError> {
    let v: Value = serde_json::from_str(text)?;
    let runs_v = v["runs"].as_array().ok_or_else(|| invalid("missing runs"))?;
    let mut runs = Vec::with_capacity(runs_v.len());
    for (i, rv) in runs_v.iter().enumerate() {
        let x0 = vector_from_json(&rv["x0"], &format!("run {i} x0"))?;
        let iv = &rv["input"];
        let kind = iv["type"].as_str().ok_or_else(|| invalid(format!("run {i}: missing input type")))?;
        let input = match kind {
            "constant" => InputSignal::Constant(vector_from_json(&iv["value"], "constant input")?),
            "piecewise" => {
                let vals = iv["values"]
                    .as_array()
                    .ok_or_else(|| invalid("piecewise input needs values"))?;
                let mut seq = Vec::with_capacity(vals.len());
                for (j, val) in vals.iter().enumerate() {
                    seq.push(vector_from_json(val, &format!("piecewise value {j}"))?);
                }
                InputSignal::Piecewise(seq)
            }
            "pseudo_random" => InputSignal::PseudoRandom {
                seed: iv["seed"].as_u64().unwrap_or(0),
                amplitude: iv["amplitude"].as_f64().unwrap_or(1.0),
            },
            other => return Err(invalid(format!("unknown input type `{other}`"))),
        };
        runs.push(Run { x0, input });
    }
    let samples_per_run = v["samples_per_run"]
        .as_u64()
        .ok_or_else(|| invalid("missing samples_per_run"))? as usize;
    let step = v["step"].as_f64();
    Ok(Experiment { runs, samples_per_run, step })
}

/// Data CSV with header `k, x1..xn, u1..um, x1p..xnp` plus its sidecar
/// metadata JSON `{n, m, mode, library, N}`.
pub fn dataset_to_csv(data: &DataSet) -> String {
    let (n, m) = (data.state_dim(), data.input_dim());
    let mut out = String::from("k");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    for i in 1..=m {
        out.push_str(&format!(",u{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",x{i}p"));
    }
    out.push('\n');
    for j in 0..data.samples() {
        out.push_str(&j.to_string());
        for i in 0..n {
            out.push_str(&format!(",{:.17e}", data.x0[(i, j)]));
        }
        for i in 0..m {
            out.push_str(&format!(",{:.17e}", data.u0[(i, j)]));
        }
        for i in 0..n {
            out.push_str(&format!(",{:.17e}", data.x1[(i, j)]));
        }
        out.push('\n');
    }
    out
}

pub fn dataset_meta_to_json(data: &DataSet, library: &FunctionLibrary) -> String {
    let v = json!({
        "n": data.state_dim(),
        "m": data.input_dim(),
        "mode": mode_str(data.mode),
        "library": library.source(),
        "N": data.samples(),
    });
    serde_json::to_string_pretty(&v).expect("plain value")
}

/// Rebuild a data set (recomputing `Z0`) from CSV and its sidecar metadata.
pub fn dataset_from_csv(csv: &str, meta: &str) -> Result<(DataSet, FunctionLibrary), IoError> {
    let mv: Value = serde_json::from_str(meta)?;
    let n = mv["n"].as_u64().ok_or_else(|| invalid("meta: missing n"))? as usize;
    let m = mv["m"].as_u64().ok_or_else(|| invalid("meta: missing m"))? as usize;
    let mode = mode_from_str(mv["mode"].as_str().ok_or_else(|| invalid("meta: missing mode"))?)?;
    let lib_src = mv["library"].as_str().ok_or_else(|| invalid("meta: missing library"))?;
    let library = parse_library(lib_src, n)?;

    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| invalid("empty data file"))?;
    let expected_cols = 1 + 2 * n + m;
    if header.split(',').count() != expected_cols {
        return Err(invalid(format!(
            "header has {} columns, expected {expected_cols}",
            header.split(',').count()
        )));
    }
    let mut x0_cols: Vec<f64> = Vec::new();
    let mut u0_cols: Vec<f64> = Vec::new();
    let mut x1_cols: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(invalid(format!("row {lineno}: {} columns", fields.len())));
        }
        let parse = |f: &str| -> Result<f64, IoError> {
            f.trim().parse::<f64>().map_err(|e| invalid(format!("row {lineno}: {e}")))
        };
        for i in 0..n {
            x0_cols.push(parse(fields[1 + i])?);
        }
        for i in 0..m {
            u0_cols.push(parse(fields[1 + n + i])?);
        }
        for i in 0..n {
            x1_cols.push(parse(fields[1 + n + m + i])?);
        }
        count += 1;
    }
    if count == 0 {
        return Err(invalid("data file has no samples"));
    }
    // Entries arrived row-by-row (column-by-column of the matrices).
    let x0 = DMatrix::from_vec(n, count, x0_cols);
    let u0 = DMatrix::from_vec(m, count, u0_cols);
    let x1 = DMatrix::from_vec(n, count, x1_cols);
    let data = DataSet::from_samples(&library, u0, x0, x1, mode)?;
    Ok((data, library))
}

/// Objective file: `{kind, ...parameters}`.
pub fn objective_from_json(text: &str) -> Result<DesignObjective, IoError> {
    let v: Value = serde_json::from_str(text)?;
    let kind = v["kind"].as_str().ok_or_else(|| invalid("missing objective kind"))?;
    let f64_field = |name: &str| -> Result<f64, IoError> {
        v[name].as_f64().ok_or_else(|| invalid(format!("missing field `{name}`")))
    };
    let usize_field = |name: &str| -> Result<usize, IoError> {
        v[name]
            .as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| invalid(format!("missing field `{name}`")))
    };
    Ok(match kind {
        "linearized_stabilization" => {
            DesignObjective::LinearizedStabilization { rho: v["rho"].as_f64().unwrap_or(1.0) }
        }
        "nonlinearity_cancellation" => {
            DesignObjective::NonlinearityCancellation { rho: v["rho"].as_f64().unwrap_or(1.0) }
        }
        "diagonal_stabilization" => DesignObjective::DiagonalStabilization,
        "oscillator" => DesignObjective::OscillatorDesign {
            mu_lower: f64_field("mu_lower")?,
            mu_upper: f64_field("mu_upper")?,
        },
        "model_reference" => DesignObjective::ModelReference {
            a_bar: matrix_from_json(&v["A_bar"], "A_bar")?,
            b_bar: matrix_from_json(&v["B_bar"], "B_bar")?,
            prefix_len: usize_field("prefix_len")?,
        },
        "passivation" => DesignObjective::Passivation {
            m: matrix_from_json(&v["M"], "M")?,
            m_r: usize_field("m_r")?,
        },
        "passivation_linear" => {
            DesignObjective::PassivationLinear { m_r: usize_field("m_r")? }
        }
        other => return Err(invalid(format!("unknown objective kind `{other}`"))),
    })
}

fn objective_to_json(obj: &DesignObjective) -> Value {
    match obj {
        DesignObjective::LinearizedStabilization { rho } => {
            json!({"kind": obj.kind(), "rho": rho})
        }
        DesignObjective::NonlinearityCancellation { rho } => {
            json!({"kind": obj.kind(), "rho": rho})
        }
        DesignObjective::DiagonalStabilization => json!({"kind": obj.kind()}),
        DesignObjective::OscillatorDesign { mu_lower, mu_upper } => {
            json!({"kind": obj.kind(), "mu_lower": mu_lower, "mu_upper": mu_upper})
        }
        DesignObjective::ModelReference { a_bar, b_bar, prefix_len } => json!({
            "kind": obj.kind(),
            "A_bar": matrix_to_json(a_bar),
            "B_bar": matrix_to_json(b_bar),
            "prefix_len": prefix_len,
        }),
        DesignObjective::Passivation { m, m_r } => {
            json!({"kind": obj.kind(), "M": matrix_to_json(m), "m_r": m_r})
        }
        DesignObjective::PassivationLinear { m_r } => json!({"kind": obj.kind(), "m_r": m_r}),
    }
}

fn certificate_to_json(cert: &Certificate) -> Value {
    let payload = match cert {
        Certificate::LyapunovP { p } => json!({"P": matrix_to_json(p)}),
        Certificate::DiagonalD { d } => json!({"D": matrix_to_json(d)}),
        Certificate::PassivityPair { theta, m, n_out } => json!({
            "Theta": matrix_to_json(theta),
            "M": matrix_to_json(m),
            "N_out": matrix_to_json(n_out),
        }),
        Certificate::ExactMatch { residual } => json!({"residual": residual}),
    };
    json!({"kind": cert.kind(), "payload": payload})
}

fn certificate_from_json(v: &Value) -> Result<Certificate, IoError> {
    let kind = v["kind"].as_str().ok_or_else(|| invalid("certificate: missing kind"))?;
    let p = &v["payload"];
    Ok(match kind {
        "lyapunov_p" => Certificate::LyapunovP { p: matrix_from_json(&p["P"], "P")? },
        "diagonal_d" => Certificate::DiagonalD { d: matrix_from_json(&p["D"], "D")? },
        "passivity_pair" => Certificate::PassivityPair {
            theta: matrix_from_json(&p["Theta"], "Theta")?,
            m: matrix_from_json(&p["M"], "M")?,
            n_out: matrix_from_json(&p["N_out"], "N_out")?,
        },
        "exact_match" => Certificate::ExactMatch {
            residual: p["residual"].as_f64().ok_or_else(|| invalid("missing residual"))?,
        },
        other => return Err(invalid(format!("unknown certificate kind `{other}`"))),
    })
}

/// Controller file: gains, interpolants, achieved closed loop, certificate,
/// residual summary, and the library the row conventions key off.
pub fn controller_to_json(
    result: &SynthesisResult,
    library: &FunctionLibrary,
    eq_tol: f64,
    eig_tol: f64,
    epsilon: f64,
) -> String {
    let mut v = json!({
        "objective": objective_to_json(&result.objective),
        "K": matrix_to_json(&result.k),
        "G": matrix_to_json(&result.g),
        "F_star": matrix_to_json(&result.f_star),
        "certificate": certificate_to_json(&result.certificate),
        "residuals": {
            "max_equality": result.residuals.max_equality,
            "min_margin": if result.residuals.min_margin.is_finite() {
                json!(result.residuals.min_margin)
            } else {
                Value::Null
            },
        },
        "library": library.source(),
        "tolerances": {"eq_tol": eq_tol, "eig_tol": eig_tol, "epsilon": epsilon},
    });
    let map = v.as_object_mut().expect("object");
    if let Some(k_r) = &result.k_r {
        map.insert("K_r".into(), matrix_to_json(k_r));
    }
    if let Some(g_r) = &result.g_r {
        map.insert("G_r".into(), matrix_to_json(g_r));
    }
    if let Some(f_r) = &result.f_r_star {
        map.insert("F_r_star".into(), matrix_to_json(f_r));
    }
    if let Some(mu) = result.mu {
        map.insert("mu".into(), json!(mu));
    }
    serde_json::to_string_pretty(&v).expect("plain value")
}

pub fn controller_from_json(text: &str) -> Result<(SynthesisResult, FunctionLibrary), IoError> {
    let v: Value = serde_json::from_str(text)?;
    let objective = objective_from_json(&serde_json::to_string(&v["objective"])?)?;
    let k = matrix_from_json(&v["K"], "K")?;
    let g = matrix_from_json(&v["G"], "G")?;
    let f_star = matrix_from_json(&v["F_star"], "F_star")?;
    let certificate = certificate_from_json(&v["certificate"])?;
    let k_r = v.get("K_r").map(|m| matrix_from_json(m, "K_r")).transpose()?;
    let g_r = v.get("G_r").map(|m| matrix_from_json(m, "G_r")).transpose()?;
    let f_r_star = v.get("F_r_star").map(|m| matrix_from_json(m, "F_r_star")).transpose()?;
    let mu = v.get("mu").and_then(|m| m.as_f64());
    let residuals = crate::synth::ResidualSummary {
        max_equality: v["residuals"]["max_equality"].as_f64().unwrap_or(f64::NAN),
        min_margin: v["residuals"]["min_margin"].as_f64().unwrap_or(f64::INFINITY),
    };
    let lib_src = v["library"].as_str().ok_or_else(|| invalid("missing library"))?;
    let n = f_star.nrows();
    let library = parse_library(lib_src, n)?;
    Ok((
        SynthesisResult {
            objective,
            k,
            k_r,
            g,
            g_r,
            f_star,
            f_r_star,
            mu,
            certificate,
            residuals,
        },
        library,
    ))
}

/// Report file: `{checks: [{name, pass, margin, samples}], seed, tolerances}`.
pub fn report_to_json(report: &VerificationReport) -> String {
    let v = json!({
        "checks": report.checks,
        "seed": report.seed,
        "tolerances": {"eq_tol": report.eq_tol, "eig_tol": report.eig_tol},
    });
    serde_json::to_string_pretty(&v).expect("plain value")
}

/// Plot-ready trajectory CSV: `t, x1..xn[, r1..][, y1..]`.
pub fn trajectory_to_csv(
    traj: &[DVector<f64>],
    h: f64,
    r: Option<&[DVector<f64>]>,
    y: Option<&[DVector<f64>]>,
) -> String {
    let n = traj.first().map_or(0, |x| x.len());
    let mut out = String::from("t");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    if let Some(r) = r {
        for i in 1..=r.first().map_or(0, |v| v.len()) {
            out.push_str(&format!(",r{i}"));
        }
    }
    if let Some(y) = y {
        for i in 1..=y.first().map_or(0, |v| v.len()) {
            out.push_str(&format!(",y{i}"));
        }
    }
    out.push('\n');
    for (k, x) in traj.iter().enumerate() {
        out.push_str(&format!("{}", h * k as f64));
        for i in 0..n {
            out.push_str(&format!(",{:.17e}", x[i]));
        }
        if let Some(r) = r {
            if k < r.len() {
                for i in 0..r[k].len() {
                    out.push_str(&format!(",{:.17e}", r[k][i]));
                }
            }
        }
        if let Some(y) = y {
            if k < y.len() {
                for i in 0..y[k].len() {
                    out.push_str(&format!(",{:.17e}", y[k][i]));
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_model_reference, SynthOptions};
    use approx::assert_abs_diff_eq;

    #[test]
    fn plant_round_trip() {
        let text = r#"{
            "n": 1, "m": 1, "mode": "discrete",
            "library": "x1; x1^2",
            "A": [2.0, 1.0],
            "B": [1.0]
        }"#;
        let plant = plant_from_json(text).unwrap();
        assert_eq!(plant.a, DMatrix::from_row_slice(1, 2, &[2.0, 1.0]));
        let back = plant_to_json(&plant);
        let again = plant_from_json(&back).unwrap();
        assert_eq!(plant.a, again.a);
        assert_eq!(plant.b, again.b);
    }

    #[test]
    fn plant_rejects_bad_shapes() {
        let text = r#"{"n": 1, "m": 1, "mode": "discrete", "library": "x1", "A": [1.0, 2.0], "B": [1.0]}"#;
        assert!(plant_from_json(text).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let lib = parse_library("x1; x1^2", 1).unwrap();
        let data = DataSet::from_samples(
            &lib,
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[3.0, 9.0]),
            TimeMode::Discrete,
        )
        .unwrap();
        let csv = dataset_to_csv(&data);
        assert!(csv.starts_with("k,x1,u1,x1p\n"));
        let meta = dataset_meta_to_json(&data, &lib);
        let (back, lib2) = dataset_from_csv(&csv, &meta).unwrap();
        assert_eq!(lib2.source(), lib.source());
        assert_eq!(back.u0, data.u0);
        assert_eq!(back.x0, data.x0);
        assert_eq!(back.x1, data.x1);
        assert_eq!(back.z0, data.z0);
    }

    #[test]
    fn objective_parsing_covers_all_kinds() {
        let obj = objective_from_json(r#"{"kind": "linearized_stabilization", "rho": 1.21}"#).unwrap();
        assert!(matches!(obj, DesignObjective::LinearizedStabilization { rho } if rho == 1.21));
        let obj = objective_from_json(r#"{"kind": "diagonal_stabilization"}"#).unwrap();
        assert!(matches!(obj, DesignObjective::DiagonalStabilization));
        let obj = objective_from_json(
            r#"{"kind": "model_reference",
                "A_bar": {"rows": 1, "cols": 1, "data": [0.5]},
                "B_bar": {"rows": 1, "cols": 1, "data": [1.0]},
                "prefix_len": 1}"#,
        )
        .unwrap();
        assert!(matches!(obj, DesignObjective::ModelReference { .. }));
        assert!(objective_from_json(r#"{"kind": "nope"}"#).is_err());
    }

    #[test]
    fn controller_round_trip() {
        let lib = parse_library("x1", 1).unwrap();
        let data = DataSet::from_samples(
            &lib,
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[2.0, 5.0]),
            TimeMode::Discrete,
        )
        .unwrap();
        let a_bar = DMatrix::from_row_slice(1, 1, &[0.5]);
        let b_bar = DMatrix::from_row_slice(1, 1, &[1.0]);
        let result =
            synth_model_reference(&data, &lib, &a_bar, &b_bar, 1, &SynthOptions::default())
                .unwrap();
        let text = controller_to_json(&result, &lib, 1e-8, 1e-9, 1e-6);
        let (back, lib2) = controller_from_json(&text).unwrap();
        assert_eq!(lib2.source(), lib.source());
        assert_abs_diff_eq!(back.k[(0, 0)], result.k[(0, 0)], epsilon = 0.0);
        assert_abs_diff_eq!(
            back.k_r.as_ref().unwrap()[(0, 0)],
            result.k_r.as_ref().unwrap()[(0, 0)],
            epsilon = 0.0
        );
        assert_eq!(back.certificate.kind(), "exact_match");
    }

    #[test]
    fn experiment_parsing_accepts_all_input_kinds() {
        let text = r#"{
            "runs": [
                {"x0": [1.0], "input": {"type": "constant", "value": [0.0]}},
                {"x0": [2.0], "input": {"type": "piecewise", "values": [[1.0], [0.5]]}},
                {"x0": [0.0], "input": {"type": "pseudo_random", "seed": 3, "amplitude": 2.0}}
            ],
            "samples_per_run": 2,
            "step": 0.1
        }"#;
        let exp = experiment_from_json(text).unwrap();
        assert_eq!(exp.runs.len(), 3);
        assert_eq!(exp.samples_per_run, 2);
        assert_eq!(exp.step, Some(0.1));
    }

    #[test]
    fn trajectory_csv_shape() {
        let traj = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![0.5, 1.0])];
        let csv = trajectory_to_csv(&traj, 0.1, None, None);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,x2");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("0.1"));
    }
}
