//! Observation pairs `(z_t, y_t)` and their CSV form.
//!
//! CSV layout: mandatory header `z1,..,z{d'},y1,..,y{d}`, comma separated,
//! dot decimal, numeric fields only.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    outputs: Vec<f64>,
}

impl Dataset {
    /// Row-major `inputs` (`n x d'`) and `outputs` (`n x d`).
    pub fn new(input_dim: usize, output_dim: usize, inputs: Vec<f64>, outputs: Vec<f64>) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidInput("dataset dimensions must be positive".into()));
        }
        if inputs.len() % input_dim != 0 || outputs.len() % output_dim != 0 {
            return Err(Error::InvalidInput("ragged dataset buffers".into()));
        }
        let n = inputs.len() / input_dim;
        if outputs.len() / output_dim != n {
            return Err(Error::DimensionMismatch {
                what: "dataset rows",
                expected: n,
                found: outputs.len() / output_dim,
            });
        }
        if inputs.iter().chain(&outputs).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset has non-finite values".into()));
        }
        Ok(Self {
            input_dim,
            output_dim,
            inputs,
            outputs,
        })
    }

    pub fn from_rows(z: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Self> {
        let din = z.first().map_or(0, Vec::len);
        let d = y.first().map_or(0, Vec::len);
        if z.iter().any(|r| r.len() != din) || y.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::new(din, d, z.concat(), y.concat())
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn z(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_dim..(t + 1) * self.input_dim]
    }

    pub fn y(&self, t: usize) -> &[f64] {
        &self.outputs[t * self.output_dim..(t + 1) * self.output_dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Same inputs with replaced outputs.
    pub fn with_outputs(&self, outputs: Vec<f64>) -> Result<Self> {
        Self::new(self.input_dim, self.output_dim, self.inputs.clone(), outputs)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let header: Vec<String> = (1..=self.input_dim)
            .map(|i| format!("z{i}"))
            .chain((1..=self.output_dim).map(|i| format!("y{i}")))
            .collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for t in 0..self.len() {
            let mut first = true;
            for v in self.z(t).iter().chain(self.y(t)) {
                if !first {
                    s.push(',');
                }
                first = false;
                // `{}` prints the shortest representation that round-trips
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str, path: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or_else(|| parse_err(1, "missing header".into()))?;
        let header = header.trim_start_matches('\u{feff}');
        let mut din = 0;
        let mut d = 0;
        for (col, name) in header.split(',').map(str::trim).enumerate() {
            let expected_z = format!("z{}", din + 1);
            let expected_y = format!("y{}", d + 1);
            if d == 0 && name == expected_z {
                din += 1;
            } else if name == expected_y {
                d += 1;
            } else {
                return Err(parse_err(
                    1,
                    format!("bad header column {} '{name}': expected z1..zp then y1..yd", col + 1),
                ));
            }
        }
        if din == 0 || d == 0 {
            return Err(parse_err(1, "header needs at least one z and one y column".into()));
        }
        let width = din + d;
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != width {
                return Err(parse_err(
                    lineno,
                    format!("expected {width} fields, found {}", fields.len()),
                ));
            }
            for (c, f) in fields.iter().enumerate() {
                let v: f64 = f
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("field {} '{f}' is not a number", c + 1)))?;
                if !v.is_finite() {
                    return Err(parse_err(lineno, format!("field {} is not finite", c + 1)));
                }
                if c < din {
                    inputs.push(v);
                } else {
                    outputs.push(v);
                }
            }
        }
        if inputs.is_empty() {
            return Err(parse_err(1, "no data rows".into()));
        }
        Self::new(din, d, inputs, outputs)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Per-column centring and scaling to unit variance. Constant columns
    /// are centred only.
    pub fn standardize(&self) -> (Dataset, Standardization) {
        let n = self.len() as f64;
        let stats = |buf: &[f64], width: usize| -> (Vec<f64>, Vec<f64>) {
            let mut mean = vec![0.0; width];
            let mut sd = vec![0.0; width];
            for row in buf.chunks(width) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / n;
                }
            }
            for row in buf.chunks(width) {
                for c in 0..width {
                    sd[c] += (row[c] - mean[c]).powi(2) / n;
                }
            }
            for s in &mut sd {
                *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
            }
            (mean, sd)
        };
        let apply = |buf: &[f64], width: usize, mean: &[f64], sd: &[f64]| -> Vec<f64> {
            buf.iter()
                .enumerate()
                .map(|(i, v)| (v - mean[i % width]) / sd[i % width])
                .collect()
        };
        let (zm, zs) = stats(&self.inputs, self.input_dim);
        let (ym, ys) = stats(&self.outputs, self.output_dim);
        let data = Dataset {
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            inputs: apply(&self.inputs, self.input_dim, &zm, &zs),
            outputs: apply(&self.outputs, self.output_dim, &ym, &ys),
        };
        (
            data,
            Standardization {
                input_mean: zm,
                input_sd: zs,
                output_mean: ym,
                output_sd: ys,
            },
        )
    }
}

/// Transform applied by [`Dataset::standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub input_mean: Vec<f64>,
    pub input_sd: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_sd: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let data = Dataset::from_rows(
            &[vec![0.1, -2.5e-12], vec![1.0 / 3.0, 7.0]],
            &[vec![std::f64::consts::PI], vec![-0.0]],
        )
        .unwrap();
        let text = data.to_csv();
        assert!(text.starts_with("z1,z2,y1\n"));
        let back = Dataset::parse_csv(&text, "mem").unwrap();
        assert_eq!(back, data);
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn malformed_row_names_line() {
        let text = "z1,y1\n1,2\n3,abc\n";
        match Dataset::parse_csv(text, "f.csv") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(path, "f.csv");
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = "z1,y1\n1,2,3\n";
        assert!(matches!(Dataset::parse_csv(text, "f"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn header_is_mandatory() {
        assert!(matches!(Dataset::parse_csv("1,2\n", "f"), Err(Error::Parse { line: 1, .. })));
        assert!(Dataset::parse_csv("y1,z1\n1,2\n", "f").is_err());
        assert!(Dataset::parse_csv("z1,y1\n", "f").is_err());
    }

    #[test]
    fn standardize_gives_zero_mean_unit_variance() {
        let data = Dataset::from_rows(
            &[vec![1.0, 5.0], vec![2.0, 5.0], vec![6.0, 5.0]],
            &[vec![10.0], vec![20.0], vec![0.0]],
        )
        .unwrap();
        let (s, tr) = data.standardize();
        assert_eq!(tr.input_sd[1], 1.0);
        for c in 0..2 {
            let m: f64 = (0..3).map(|t| s.z(t)[c]).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12);
        }
        let v: f64 = (0..3).map(|t| s.y(t)[0].powi(2)).sum::<f64>() / 3.0;
        assert!((v - 1.0).abs() < 1e-12);
    }
}
