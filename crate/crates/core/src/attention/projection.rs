//! Optional per-head query/key/value projections and the output projection.
//!
//! Text format, one record per head, blank lines and `#` comments ignored:
//!
//! ```text
//! head 0 dims 2
//! 1 0        # W_Q, d_i rows
//! 0 1
//! 1 0        # W_K
//! 0 1
//! 1 0        # W_V
//! 0 1
//! head out dims 16
//! ...        # W_O, d rows of d values
//! ```
//!
//! Heads are 0-based. A head without a record uses identity projections.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::MultiScaleConfig;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Square `dims × dims` matrices, row-major; applied to the channel vector at
/// each spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    pub dims: usize,
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

impl HeadProjection {
    pub fn identity(dims: usize) -> Self {
        let eye = identity(dims);
        Self {
            dims,
            query: eye.clone(),
            key: eye.clone(),
            value: eye,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectionSet {
    heads: BTreeMap<usize, HeadProjection>,
    output: Option<(usize, Vec<f64>)>,
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

impl ProjectionSet {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn set_head(&mut self, head: usize, p: HeadProjection) {
        self.heads.insert(head, p);
    }

    pub fn set_output(&mut self, dims: usize, w: Vec<f64>) {
        self.output = Some((dims, w));
    }

    pub fn head(&self, head: usize) -> Option<&HeadProjection> {
        self.heads.get(&head)
    }

    pub fn output(&self) -> Option<&[f64]> {
        self.output.as_ref().map(|(_, w)| w.as_slice())
    }

    /// Checks matrix sizes against the head channel split.
    pub fn validate(&self, cfg: &MultiScaleConfig) -> Result<()> {
        for (&i, p) in &self.heads {
            let Some(h) = cfg.heads.get(i) else {
                return Err(Error::Head {
                    head: i,
                    reason: format!(
                        "projection given for missing head ({} heads)",
                        cfg.heads.len()
                    ),
                });
            };
            let n = h.channels * h.channels;
            if p.dims != h.channels || [&p.query, &p.key, &p.value].iter().any(|m| m.len() != n) {
                return Err(Error::Head {
                    head: i,
                    reason: format!("projections must be {0}x{0}", h.channels),
                });
            }
        }
        if let Some((dims, w)) = &self.output {
            let d = cfg.total_channels();
            if *dims != d || w.len() != d * d {
                return Err(Error::Config(format!("output projection must be {d}x{d}")));
            }
        }
        Ok(())
    }

    /// `(query, key, value)` maps for one head's channel slice.
    pub(crate) fn project(
        &self,
        head: usize,
        f: &FeatureMap,
    ) -> Result<(FeatureMap, FeatureMap, FeatureMap)> {
        match self.heads.get(&head) {
            None => Ok((f.clone(), f.clone(), f.clone())),
            Some(p) => Ok((
                f.mix_channels(&p.query, p.dims)?,
                f.mix_channels(&p.key, p.dims)?,
                f.mix_channels(&p.value, p.dims)?,
            )),
        }
    }

    pub(crate) fn apply_output(&self, f: FeatureMap) -> Result<FeatureMap> {
        match &self.output {
            None => Ok(f),
            Some((dims, w)) => f.mix_channels(w, *dims),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut set = ProjectionSet::default();
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        while let Some((line, header)) = lines.next() {
            let parts: Vec<&str> = header.split_whitespace().collect();
            let bad = |msg: &str| Error::Parse {
                line,
                msg: msg.to_string(),
            };
            if parts.len() != 4 || parts[0] != "head" || parts[2] != "dims" {
                return Err(bad("expected `head <i> dims <d>`"));
            }
            let dims: usize = parts[3].parse().map_err(|_| bad("bad dims"))?;
            if dims == 0 {
                return Err(bad("dims must be positive"));
            }
            let n_rows = if parts[1] == "out" { dims } else { 3 * dims };
            let mut values = Vec::with_capacity(n_rows * dims);
            for _ in 0..n_rows {
                let (line, row) = lines.next().ok_or_else(|| bad("record ends early"))?;
                let parsed: std::result::Result<Vec<f64>, _> =
                    row.split_whitespace().map(str::parse::<f64>).collect();
                let parsed = parsed.map_err(|e| Error::Parse {
                    line,
                    msg: e.to_string(),
                })?;
                if parsed.len() != dims || parsed.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("expected {dims} finite values"),
                    });
                }
                values.extend(parsed);
            }
            if parts[1] == "out" {
                set.output = Some((dims, values));
            } else {
                let head: usize = parts[1].parse().map_err(|_| bad("bad head index"))?;
                let n = dims * dims;
                set.heads.insert(
                    head,
                    HeadProjection {
                        dims,
                        query: values[..n].to_vec(),
                        key: values[n..2 * n].to_vec(),
                        value: values[2 * n..].to_vec(),
                    },
                );
            }
        }
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let write_rows = |out: &mut String, m: &[f64], n: usize| {
            for row in m.chunks(n) {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        };
        for (i, p) in &self.heads {
            let _ = writeln!(out, "head {i} dims {}", p.dims);
            for m in [&p.query, &p.key, &p.value] {
                write_rows(&mut out, m, p.dims);
            }
        }
        if let Some((dims, w)) = &self.output {
            let _ = writeln!(out, "head out dims {dims}");
            write_rows(&mut out, w, *dims);
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
