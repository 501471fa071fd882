//! JSON artifacts for cycles and coefficients, and CSV writers for samples,
//! hazard curves, histograms and traces.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cycle::{CoefficientDiagnostics, FrameBundle, LimitCycle, PMCoefficients};
use crate::error::{Error, Result};
use crate::sde::Path;
use crate::stats::{ExitSample, HazardEstimate};

pub const SCHEMA_VERSION: u32 = 1;

/// Dense matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixData {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixData {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "matrix data has {} entries, expected {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

fn vecs(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.as_slice().to_vec()).collect()
}

fn unvecs(v: &[Vec<f64>]) -> Vec<DVector<f64>> {
    v.iter().map(|x| DVector::from_column_slice(x)).collect()
}

fn mats(v: &[DMatrix<f64>]) -> Vec<MatrixData> {
    v.iter().map(MatrixData::from).collect()
}

fn unmats(v: &[MatrixData]) -> Result<Vec<DMatrix<f64>>> {
    v.iter().map(MatrixData::to_matrix).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleData {
    pub dim: usize,
    pub period: f64,
    pub grid: Vec<Vec<f64>>,
    pub monodromy: MatrixData,
    pub closure_error: f64,
    pub newton_iterations: usize,
    pub warnings: Vec<String>,
}

impl From<&LimitCycle> for CycleData {
    fn from(c: &LimitCycle) -> Self {
        Self {
            dim: c.dim,
            period: c.period,
            grid: vecs(&c.u),
            monodromy: (&c.monodromy).into(),
            closure_error: c.closure_error,
            newton_iterations: c.newton_iterations,
            warnings: c.warnings.clone(),
        }
    }
}

impl CycleData {
    pub fn to_cycle(&self) -> Result<LimitCycle> {
        Ok(LimitCycle {
            dim: self.dim,
            period: self.period,
            u: unvecs(&self.grid),
            monodromy: self.monodromy.to_matrix()?,
            closure_error: self.closure_error,
            newton_iterations: self.newton_iterations,
            warnings: self.warnings.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameData {
    pub v: Vec<Vec<f64>>,
    pub z: Vec<MatrixData>,
    pub holonomy: MatrixData,
    pub holonomy_log: MatrixData,
    pub closure_error: f64,
    pub max_step_change: f64,
}

impl From<&FrameBundle> for FrameData {
    fn from(f: &FrameBundle) -> Self {
        Self {
            v: vecs(&f.v),
            z: mats(&f.z),
            holonomy: (&f.holonomy).into(),
            holonomy_log: (&f.holonomy_log).into(),
            closure_error: f.closure_error,
            max_step_change: f.max_step_change,
        }
    }
}

impl FrameData {
    pub fn to_frame(&self) -> Result<FrameBundle> {
        Ok(FrameBundle {
            v: unvecs(&self.v),
            z: unmats(&self.z)?,
            holonomy: self.holonomy.to_matrix()?,
            holonomy_log: self.holonomy_log.to_matrix()?,
            closure_error: self.closure_error,
            max_step_change: self.max_step_change,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientData {
    pub period: f64,
    pub n_grid: usize,
    pub a: Vec<Vec<f64>>,
    pub r: Vec<MatrixData>,
    pub h: Vec<Vec<f64>>,
    pub h_mat: Vec<MatrixData>,
    pub x: Vec<MatrixData>,
    pub b: Vec<Vec<f64>>,
    pub a_mat: MatrixData,
    pub b_mat: MatrixData,
    pub var_xi: f64,
    pub cov_xi_eta: Vec<f64>,
    pub cov_eta: MatrixData,
    pub sigma: MatrixData,
    pub liouville_error: f64,
    pub conjugacy_residual: f64,
    pub quadrature_error: f64,
    pub cond_x1: f64,
    pub warnings: Vec<String>,
}

impl From<&PMCoefficients> for CoefficientData {
    fn from(c: &PMCoefficients) -> Self {
        Self {
            period: c.period,
            n_grid: c.n_grid,
            a: vecs(&c.a),
            r: mats(&c.r),
            h: vecs(&c.h),
            h_mat: mats(&c.h_mat),
            x: mats(&c.x),
            b: vecs(&c.b),
            a_mat: (&c.a_mat).into(),
            b_mat: (&c.b_mat).into(),
            var_xi: c.var_xi,
            cov_xi_eta: c.cov_xi_eta.as_slice().to_vec(),
            cov_eta: (&c.cov_eta).into(),
            sigma: (&c.sigma).into(),
            liouville_error: c.diagnostics.liouville_error,
            conjugacy_residual: c.diagnostics.conjugacy_residual,
            quadrature_error: c.diagnostics.quadrature_error,
            cond_x1: c.diagnostics.cond_x1,
            warnings: c.diagnostics.warnings.clone(),
        }
    }
}

impl CoefficientData {
    pub fn to_coefficients(&self) -> Result<PMCoefficients> {
        Ok(PMCoefficients {
            period: self.period,
            n_grid: self.n_grid,
            a: unvecs(&self.a),
            r: unmats(&self.r)?,
            h: unvecs(&self.h),
            h_mat: unmats(&self.h_mat)?,
            x: unmats(&self.x)?,
            b: unvecs(&self.b),
            a_mat: self.a_mat.to_matrix()?,
            b_mat: self.b_mat.to_matrix()?,
            var_xi: self.var_xi,
            cov_xi_eta: DVector::from_column_slice(&self.cov_xi_eta),
            cov_eta: self.cov_eta.to_matrix()?,
            sigma: self.sigma.to_matrix()?,
            diagnostics: CoefficientDiagnostics {
                liouville_error: self.liouville_error,
                conjugacy_residual: self.conjugacy_residual,
                quadrature_error: self.quadrature_error,
                cond_x1: self.cond_x1,
                warnings: self.warnings.clone(),
            },
        })
    }
}

/// Everything `find-cycle` computes, in one versioned file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleArtifact {
    pub schema_version: u32,
    pub model: String,
    pub cycle: CycleData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<FrameData>,
    pub coefficients: CoefficientData,
}

impl CycleArtifact {
    pub fn new(model: &str, cycle: &LimitCycle, frame: Option<&FrameBundle>, coeffs: &PMCoefficients) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: model.to_string(),
            cycle: cycle.into(),
            frame: frame.map(FrameData::from),
            coefficients: coeffs.into(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &FsPath) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_artifact(path: &FsPath, artifact: &CycleArtifact) -> Result<()> {
    write_json(path, artifact)
}

pub fn read_artifact(path: &FsPath) -> Result<CycleArtifact> {
    let a: CycleArtifact = read_json(path)?;
    if a.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            a.schema_version
        )));
    }
    Ok(a)
}

/// CSV output with an optional leading `# generated <unix seconds>` line.
pub struct CsvOut {
    writer: csv::Writer<Box<dyn Write>>,
}

impl CsvOut {
    pub fn create(path: &FsPath, timestamp: bool) -> Result<Self> {
        Self::from_writer(Box::new(BufWriter::new(File::create(path)?)), timestamp)
    }

    pub fn from_writer(mut w: Box<dyn Write>, timestamp: bool) -> Result<Self> {
        if timestamp {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            writeln!(w, "# generated {secs}")?;
        }
        Ok(Self {
            writer: csv::Writer::from_writer(w),
        })
    }

    pub fn row<I, T>(&mut self, record: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.writer.write_record(record)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_exit_samples(out: &mut CsvOut, label: &[(&str, f64)], samples: &[ExitSample]) -> Result<()> {
    for s in samples {
        let mut rec: Vec<String> = label.iter().map(|(_, v)| fmt_f64(*v)).collect();
        rec.push(s.replicate.to_string());
        rec.push(s.tau.to_string());
        rec.push(u8::from(s.censored).to_string());
        rec.push(s.seed.to_string());
        out.row(rec)?;
    }
    Ok(())
}

pub fn exit_sample_header(label: &[(&str, f64)]) -> Vec<String> {
    let mut h: Vec<String> = label.iter().map(|(k, _)| k.to_string()).collect();
    h.extend(["replicate", "tau", "censored", "seed"].map(String::from));
    h
}

pub fn write_hazard(out: &mut CsvOut, curve: &[HazardEstimate]) -> Result<()> {
    out.row(["n", "at_risk", "events", "p_hat", "ci_low", "ci_high"])?;
    for e in curve {
        out.row([
            e.n.to_string(),
            e.at_risk.to_string(),
            e.events.to_string(),
            fmt_f64(e.p_hat),
            fmt_f64(e.ci_low),
            fmt_f64(e.ci_high),
        ])?;
    }
    Ok(())
}

/// `value,count` rows for values `min..=max` (zeros included).
pub fn write_histogram(out: &mut CsvOut, values: &[u64]) -> Result<()> {
    out.row(["value", "count"])?;
    if let (Some(&lo), Some(&hi)) = (values.iter().min(), values.iter().max()) {
        let mut counts = vec![0u64; (hi - lo + 1) as usize];
        for v in values {
            counts[(v - lo) as usize] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            out.row([(lo + i as u64).to_string(), c.to_string()])?;
        }
    }
    Ok(())
}

/// `theta, a_*, h_*, b_*` on the coarse grid.
pub fn write_coefficient_table(out: &mut CsvOut, c: &PMCoefficients) -> Result<()> {
    let d = c.transverse_dim();
    let k = c.h.first().map_or(0, |h| h.len());
    let mut header = vec!["theta".to_string()];
    header.extend((0..d).map(|i| format!("a_{i}")));
    header.extend((0..k).map(|i| format!("h_{i}")));
    header.extend((0..d).map(|i| format!("b_{i}")));
    header.push("trace_r".into());
    out.row(header)?;
    let stride = (c.r.len() / c.n_grid).max(1);
    for i in 0..=c.n_grid {
        let fine = (i * stride).min(c.a.len() - 1);
        let mut rec = vec![fmt_f64(c.theta(i))];
        rec.extend(c.a[fine].iter().map(|x| fmt_f64(*x)));
        rec.extend(c.h[fine].iter().map(|x| fmt_f64(*x)));
        rec.extend(c.b[i].iter().map(|x| fmt_f64(*x)));
        rec.push(fmt_f64(c.r[fine].trace()));
        out.row(rec)?;
    }
    Ok(())
}

pub fn write_trace(out: &mut CsvOut, path: &Path, names: &[&str]) -> Result<()> {
    let mut header = vec!["t".to_string()];
    for i in 0..path.dim {
        header.push(names.get(i).map_or_else(|| format!("x{i}"), |s| s.to_string()));
    }
    out.row(header)?;
    for i in 0..path.len() {
        let mut rec = vec![fmt_f64(path.times[i])];
        rec.extend(path.state(i).iter().map(|x| fmt_f64(*x)));
        out.row(rec)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_is_exact() {
        let m = DMatrix::from_fn(3, 2, |i, j| (i as f64 + 0.1).sin() / (j as f64 + 3.0));
        let text = serde_json::to_string(&MatrixData::from(&m)).unwrap();
        let back: MatrixData = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_matrix().unwrap(), m);
    }

    #[test]
    fn bad_shape_is_format_error() {
        let md = MatrixData {
            rows: 2,
            cols: 2,
            data: vec![1.0],
        };
        assert!(matches!(md.to_matrix(), Err(Error::Format(_))));
    }

    #[test]
    fn histogram_includes_zero_bins() {
        let tmp = tempfile::NamedTempFile::new().unwrap();
        let mut out = CsvOut::create(tmp.path(), false).unwrap();
        write_histogram(&mut out, &[1, 3, 3]).unwrap();
        out.finish().unwrap();
        let text = std::fs::read_to_string(tmp.path()).unwrap();
        assert_eq!(text, "value,count\n1,1\n2,0\n3,2\n");
    }
}
