use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::set_level::{DownstreamValidationSet, UpstreamValidationSet};

/// Materialized rows of a cascaded system: inputs, true intermediates,
/// learned-upstream intermediates, and outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub y_hat: Vec<Vec<f64>>,
    pub z: Vec<f64>,
}

impl Dataset {
    pub fn with_capacity(n: usize) -> Self {
        Dataset {
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            y_hat: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, x: Vec<f64>, y: Vec<f64>, y_hat: Vec<f64>, z: f64) {
        self.x.push(x);
        self.y.push(y);
        self.y_hat.push(y_hat);
        self.z.push(z);
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn upstream(&self) -> Result<UpstreamValidationSet> {
        UpstreamValidationSet::new(self.x.clone(), self.y.clone())
    }

    pub fn downstream(&self) -> Result<DownstreamValidationSet> {
        DownstreamValidationSet::new(self.y.clone(), self.z.clone())
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `x_*, y_*, yhat_*, z` columns with 17 significant digits.
pub fn write_dataset_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let m = ds.x.first().map_or(0, Vec::len);
    let l = ds.y.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = (0..m)
        .map(|i| format!("x_{i}"))
        .chain((0..l).map(|i| format!("y_{i}")))
        .chain((0..l).map(|i| format!("yhat_{i}")))
        .chain(std::iter::once("z".to_string()))
        .collect();
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let row: Vec<String> = ds.x[i]
            .iter()
            .chain(&ds.y[i])
            .chain(&ds.y_hat[i])
            .chain(std::iter::once(&ds.z[i]))
            .map(|&v| fmt_value(v))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let m = count("x_");
    let l = count("y_");
    if count("yhat_") != l || header.len() != m + 2 * l + 1 || header.get(header.len() - 1) != Some("z")
    {
        return Err(Error::Csv(format!("unexpected dataset header: {header:?}")));
    }
    for (i, h) in header.iter().enumerate() {
        let want = if i < m {
            format!("x_{i}")
        } else if i < m + l {
            format!("y_{}", i - m)
        } else if i < m + 2 * l {
            format!("yhat_{}", i - m - l)
        } else {
            "z".to_string()
        };
        if h != want {
            return Err(Error::Csv(format!("column {i}: expected {want}, found {h}")));
        }
    }
    let mut ds = Dataset::default();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Csv(format!("not a number: {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        ds.push(
            vals[..m].to_vec(),
            vals[m..m + l].to_vec(),
            vals[m + l..m + 2 * l].to_vec(),
            vals[m + 2 * l],
        );
    }
    Ok(ds)
}
