//! Long-format panel ingestion and the matrix form used by the model.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{BscError, Result};

/// Complete T x J outcome panel with a single treated column.
///
/// Rows are years in strictly increasing order, columns are societies in
/// first-appearance order. `treatment_start` indexes `years`: rows at or
/// after it in the treated column are the treated cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    pub years: Vec<i32>,
    pub societies: Vec<String>,
    /// T x J outcome matrix.
    pub outcomes: Array2<f64>,
    pub treated_society: usize,
    pub treatment_start: usize,
}

impl PanelData {
    pub fn new(
        years: Vec<i32>,
        societies: Vec<String>,
        outcomes: Array2<f64>,
        treated_society: usize,
        treatment_start: usize,
    ) -> Result<Self> {
        let t = years.len();
        let j = societies.len();
        if outcomes.nrows() != t || outcomes.ncols() != j {
            return Err(BscError::DimensionMismatch(format!(
                "outcomes is {}x{}, expected {}x{}",
                outcomes.nrows(),
                outcomes.ncols(),
                t,
                j
            )));
        }
        if !years.windows(2).all(|w| w[0] < w[1]) {
            return Err(BscError::RaggedPanel("years not strictly increasing".into()));
        }
        {
            let mut sorted = societies.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != j {
                return Err(BscError::RaggedPanel("duplicate society names".into()));
            }
        }
        if treated_society >= j {
            return Err(BscError::SocietyIndexOutOfRange {
                index: treated_society,
                j,
            });
        }
        if treatment_start == 0 || treatment_start >= t {
            return Err(BscError::BadTreatmentStart(
                *years.get(treatment_start).unwrap_or(&-1),
                "need at least one pre-period and one post-period year".into(),
            ));
        }
        if outcomes.iter().any(|v| !v.is_finite()) {
            return Err(BscError::NonFinite("panel outcomes".into()));
        }
        Ok(Self {
            years,
            societies,
            outcomes,
            treated_society,
            treatment_start,
        })
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn n_societies(&self) -> usize {
        self.societies.len()
    }

    /// Number of post-period (treated) years, T - T0.
    pub fn n_post(&self) -> usize {
        self.n_years() - self.treatment_start
    }

    /// T x J binary treatment mask.
    pub fn mask(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.n_years(), self.n_societies()));
        for t in self.treatment_start..self.n_years() {
            d[[t, self.treated_society]] = 1.0;
        }
        d
    }

    /// Column indices of untreated societies, in panel order.
    pub fn untreated_indices(&self) -> Vec<usize> {
        (0..self.n_societies())
            .filter(|&j| j != self.treated_society)
            .collect()
    }

    /// Rebuild the mask with a different treated column, same T0.
    pub fn relabel(&self, new_treated: usize) -> Result<PanelData> {
        if self.n_societies() < 2 {
            return Err(BscError::NoComparisonPool(self.n_societies()));
        }
        if new_treated >= self.n_societies() {
            return Err(BscError::SocietyIndexOutOfRange {
                index: new_treated,
                j: self.n_societies(),
            });
        }
        let mut out = self.clone();
        out.treated_society = new_treated;
        Ok(out)
    }

    /// Multiply each row by deflator(base_year) / deflator(year).
    pub fn deflate(&self, deflator: &BTreeMap<i32, f64>, base_year: i32) -> Result<PanelData> {
        let base = *deflator
            .get(&base_year)
            .ok_or(BscError::DeflatorMissingYear(base_year))?;
        if base <= 0.0 {
            return Err(BscError::NonpositiveDeflator {
                year: base_year,
                value: base,
            });
        }
        let mut out = self.clone();
        for (t, &year) in self.years.iter().enumerate() {
            let d = *deflator
                .get(&year)
                .ok_or(BscError::DeflatorMissingYear(year))?;
            if d <= 0.0 {
                return Err(BscError::NonpositiveDeflator { year, value: d });
            }
            let factor = base / d;
            for j in 0..self.n_societies() {
                out.outcomes[[t, j]] = self.outcomes[[t, j]] * factor;
            }
        }
        Ok(out)
    }

    /// Write the panel back to long CSV (`society,year,outcome`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| BscError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let io_err = |e: std::io::Error| BscError::Io {
            path: path.display().to_string(),
            source: e,
        };
        writeln!(file, "society,year,outcome").map_err(io_err)?;
        for (j, soc) in self.societies.iter().enumerate() {
            for (t, &year) in self.years.iter().enumerate() {
                writeln!(file, "{},{},{}", soc, year, self.outcomes[[t, j]])
                    .map_err(|e| BscError::Io {
                        path: path.display().to_string(),
                        source: e,
                    })?;
            }
        }
        Ok(())
    }
}

/// Load a long-format `society,year,outcome` CSV into matrix form.
///
/// Columns come out in first-appearance order, rows sorted by year.
/// Every (society, year) pair must appear exactly once.
pub fn load_csv(path: &Path, treated: &str, treatment_start_year: i32) -> Result<PanelData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => BscError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => BscError::Csv {
                path: path.display().to_string(),
                msg: e.to_string(),
            },
        })?;

    let headers = reader
        .headers()
        .map_err(|e| BscError::Csv {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .clone();
    let expect = ["society", "year", "outcome"];
    if headers.len() != 3 || headers.iter().zip(expect).any(|(h, e)| h.trim() != e) {
        return Err(BscError::Csv {
            path: path.display().to_string(),
            msg: format!("expected header society,year,outcome, got {:?}", headers),
        });
    }

    let mut societies: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, i32), f64> = BTreeMap::new();
    let mut years: Vec<i32> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| BscError::Csv {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let soc = rec.get(0).unwrap_or("").trim().to_string();
        let year: i32 = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| BscError::Csv {
                path: path.display().to_string(),
                msg: format!("bad year field {:?}", rec.get(1)),
            })?;
        let outcome: f64 = rec
            .get(2)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| BscError::Csv {
                path: path.display().to_string(),
                msg: format!("bad outcome field {:?}", rec.get(2)),
            })?;
        if !societies.contains(&soc) {
            societies.push(soc.clone());
        }
        if !years.contains(&year) {
            years.push(year);
        }
        if cells.insert((soc.clone(), year), outcome).is_some() {
            return Err(BscError::RaggedPanel(format!(
                "duplicate cell ({}, {})",
                soc, year
            )));
        }
    }
    years.sort_unstable();
    let t = years.len();
    let j = societies.len();
    if t == 0 || j == 0 {
        return Err(BscError::RaggedPanel("empty panel".into()));
    }
    let mut outcomes = Array2::zeros((t, j));
    for (ji, soc) in societies.iter().enumerate() {
        for (ti, &year) in years.iter().enumerate() {
            match cells.get(&(soc.clone(), year)) {
                Some(&v) => outcomes[[ti, ji]] = v,
                None => {
                    return Err(BscError::RaggedPanel(format!(
                        "society {} missing year {}",
                        soc, year
                    )))
                }
            }
        }
    }
    let treated_society = societies
        .iter()
        .position(|s| s == treated)
        .ok_or_else(|| BscError::UnknownSociety(treated.to_string()))?;
    let treatment_start = years
        .iter()
        .position(|&y| y == treatment_start_year)
        .ok_or_else(|| {
            BscError::BadTreatmentStart(treatment_start_year, "year not in panel".into())
        })?;
    PanelData::new(years, societies, outcomes, treated_society, treatment_start)
}

/// Load a `year,deflator` CSV.
pub fn load_deflator_csv(path: &Path) -> Result<BTreeMap<i32, f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| BscError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| BscError::Csv {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let year: i32 = rec
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| BscError::Csv {
                path: path.display().to_string(),
                msg: format!("bad year {:?}", rec.get(0)),
            })?;
        let val: f64 = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| BscError::Csv {
                path: path.display().to_string(),
                msg: format!("bad deflator {:?}", rec.get(1)),
            })?;
        out.insert(year, val);
    }
    Ok(out)
}
