//! Collection-level decade estimates and their trend over show years.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use crate::dates::{bin_representative_year, BinIndex, TemporalBinning};
use crate::error::{Error, Result};
use crate::net::argmax;

/// Allowed deviation of a probability vector's sum from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregate {
    /// Argmax of the mean probability vector.
    #[default]
    Mean,
    /// Most frequent per-image argmax.
    Vote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectionDecade {
    pub decade: BinIndex,
    /// Mean member probability vector.
    pub mean: Vec<f64>,
}

pub fn collection_decade(image_probs: &[Vec<f64>]) -> Result<CollectionDecade> {
    collection_decade_with(image_probs, Aggregate::Mean)
}

/// Ties go to the earliest decade under either rule.
pub fn collection_decade_with(
    image_probs: &[Vec<f64>],
    rule: Aggregate,
) -> Result<CollectionDecade> {
    let k = image_probs.first().ok_or(Error::EmptyCollection)?.len();
    for (index, p) in image_probs.iter().enumerate() {
        if p.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "probability vector {index} has {} entries, expected {k}",
                p.len()
            )));
        }
        let sum: f64 = p.iter().sum();
        if !(sum - 1.0).abs().le(&NORMALIZATION_TOLERANCE)
            || p.iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Unnormalized { index, sum });
        }
    }
    let n = image_probs.len() as f64;
    let mut mean = vec![0.0; k];
    for p in image_probs {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let decade = match rule {
        Aggregate::Mean => argmax(&mean),
        Aggregate::Vote => {
            let mut votes = vec![0.0; k];
            for p in image_probs {
                votes[argmax(p)] += 1.0;
            }
            argmax(&votes)
        }
    };
    Ok(CollectionDecade {
        decade: BinIndex(decade),
        mean,
    })
}

/// Exact-match fraction and mean absolute difference of representative
/// years.
pub fn agreement_eval(
    predicted: &[BinIndex],
    reference: &[BinIndex],
    binning: &TemporalBinning,
) -> Result<(f64, f64)> {
    if predicted.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: reference.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::Empty("collection list"));
    }
    let mut matches = 0;
    let mut abs = 0.0;
    for (p, r) in predicted.iter().zip(reference) {
        let (p, r) = (binning.check(*p)?, binning.check(*r)?);
        matches += usize::from(p == r);
        abs += (bin_representative_year(p, binning) - bin_representative_year(r, binning)).abs()
            as f64;
    }
    let n = predicted.len() as f64;
    Ok((matches as f64 / n, abs / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendTable {
    pub years: Vec<i32>,
    /// One row per year: mean over that year's collections of their mean
    /// probability vectors.
    pub rows: Vec<Vec<f64>>,
}

/// `groups[year]` holds the mean probability vector of every collection
/// shown that year.
pub fn trend(groups: &BTreeMap<i32, Vec<Vec<f64>>>) -> Result<TrendTable> {
    let mut years = Vec::with_capacity(groups.len());
    let mut rows = Vec::with_capacity(groups.len());
    for (&year, vectors) in groups {
        let k = vectors.first().ok_or(Error::EmptyYear(year))?.len();
        let mut row = vec![0.0; k];
        for v in vectors {
            if v.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "year {year} mixes vector lengths"
                )));
            }
            row.iter_mut().zip(v).for_each(|(r, x)| *r += x);
        }
        row.iter_mut().for_each(|r| *r /= vectors.len() as f64);
        years.push(year);
        rows.push(row);
    }
    Ok(TrendTable { years, rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    pub id: String,
    pub year: i32,
    pub members: Vec<String>,
}

/// Parse `collection_id, year, sample_id` lines into collections in order of
/// first appearance. Blank lines and `#` comments are skipped.
pub fn read_collections<R: BufRead>(reader: R) -> Result<Vec<Collection>> {
    let mut out: Vec<Collection> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let bad = |reason: String| Error::MalformedRecord {
            what: "collection record",
            line: i + 1,
            reason,
        };
        let line = line.map_err(|e| bad(e.to_string()))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split(',').map(str::trim).collect();
        if f.len() != 3 || f[0].is_empty() || f[2].is_empty() {
            return Err(bad("expected `collection_id, year, sample_id`".into()));
        }
        let year: i32 = f[1]
            .parse()
            .map_err(|_| bad(format!("bad year {:?}", f[1])))?;
        match pos.get(f[0]) {
            Some(&k) => {
                if out[k].year != year {
                    return Err(bad(format!("collection {:?} listed with two years", f[0])));
                }
                out[k].members.push(f[2].to_string());
            }
            None => {
                pos.insert(f[0].to_string(), out.len());
                out.push(Collection {
                    id: f[0].to_string(),
                    year,
                    members: vec![f[2].to_string()],
                });
            }
        }
    }
    Ok(out)
}
