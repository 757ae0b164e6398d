//! Index-level panels, calendar alignment and returns.

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::config::{IngestConfig, ReturnKind};
use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

pub fn parse_date(text: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(text.trim(), DATE_FORMAT).ok()
}

pub fn format_date(date: NaiveDate) -> String {
    date.format(DATE_FORMAT).to_string()
}

/// Date-by-market matrix of index levels. Missing cells are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexPanel {
    dates: Vec<NaiveDate>,
    markets: Vec<String>,
    levels: DMatrix<f64>,
}

impl IndexPanel {
    pub fn new(dates: Vec<NaiveDate>, markets: Vec<String>, levels: DMatrix<f64>) -> Result<Self> {
        if levels.nrows() != dates.len() || levels.ncols() != markets.len() {
            return Err(Error::Validation(format!(
                "levels are {}x{} but there are {} dates and {} markets",
                levels.nrows(),
                levels.ncols(),
                dates.len(),
                markets.len()
            )));
        }
        if dates.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 usable rows, found {}",
                dates.len()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "dates must be strictly increasing ({} then {})",
                format_date(w[0]),
                format_date(w[1])
            )));
        }
        for (j, market) in markets.iter().enumerate() {
            let col = levels.column(j);
            if let Some(v) = col.iter().find(|v| !v.is_nan() && !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Validation(format!(
                    "market {market} has non-positive or non-finite level {v}"
                )));
            }
            let present = col.iter().filter(|v| !v.is_nan()).count();
            if present < 2 {
                return Err(Error::InsufficientData(format!(
                    "market {market} has {present} usable levels, need at least 2"
                )));
            }
        }
        Ok(IndexPanel {
            dates,
            markets,
            levels,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn markets(&self) -> &[String] {
        &self.markets
    }

    pub fn levels(&self) -> &DMatrix<f64> {
        &self.levels
    }

    pub fn nrows(&self) -> usize {
        self.dates.len()
    }

    pub fn nmarkets(&self) -> usize {
        self.markets.len()
    }

    /// Panel restricted to the given columns, in the given order.
    pub fn select_markets(&self, columns: &[usize]) -> Result<Self> {
        let levels = self.levels.select_columns(columns);
        let markets = columns.iter().map(|&j| self.markets[j].clone()).collect();
        IndexPanel::new(self.dates.clone(), markets, levels)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        header.extend(self.markets.iter().cloned());
        wtr.write_record(&header)?;
        for (t, date) in self.dates.iter().enumerate() {
            let mut record = vec![format_date(*date)];
            record.extend(self.levels.row(t).iter().map(|v| {
                if v.is_nan() {
                    String::new()
                } else {
                    v.to_string()
                }
            }));
            wtr.write_record(&record)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Header of an index CSV: the market identifiers after the `date` column.
pub fn read_header<R: Read>(reader: R) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut record = csv::StringRecord::new();
    if !rdr.read_record(&mut record)? {
        return Err(Error::InsufficientData("empty file".into()));
    }
    parse_header(&record)
}

fn parse_header(record: &csv::StringRecord) -> Result<Vec<String>> {
    let mut cells = record.iter();
    match cells.next() {
        Some(first) if first.trim().eq_ignore_ascii_case("date") => {}
        Some(first) => {
            return Err(Error::Parse {
                row: 1,
                column: 1,
                message: format!("first header cell must be `date`, found `{first}`"),
            })
        }
        None => unreachable!("csv records are never empty"),
    }
    let markets: Vec<String> = cells.map(|c| c.trim().to_string()).collect();
    if markets.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: 2,
            message: "no market columns".into(),
        });
    }
    for (j, m) in markets.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::Parse {
                row: 1,
                column: j + 2,
                message: "empty market identifier".into(),
            });
        }
        if markets[..j].contains(m) {
            return Err(Error::Parse {
                row: 1,
                column: j + 2,
                message: format!("duplicate market identifier `{m}`"),
            });
        }
    }
    Ok(markets)
}

pub fn load_index_csv(path: &Path, config: &IngestConfig) -> Result<IndexPanel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_index_csv(std::io::BufReader::new(file), config)
}

/// Parse an index CSV, forward-fill short gaps and drop sparse rows.
pub fn read_index_csv<R: Read>(reader: R, config: &IngestConfig) -> Result<IndexPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec?,
        None => return Err(Error::InsufficientData("empty file".into())),
    };
    let markets = parse_header(&header)?;
    let n = markets.len();

    let mut dates = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (idx, rec) in records.enumerate() {
        let row = idx + 2;
        let rec = rec?;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != n + 1 {
            return Err(Error::Parse {
                row,
                column: rec.len().min(n + 1),
                message: format!("expected {} fields, found {}", n + 1, rec.len()),
            });
        }
        let date = parse_date(&rec[0]).ok_or_else(|| Error::Parse {
            row,
            column: 1,
            message: format!("`{}` is not a YYYY-MM-DD date", &rec[0]),
        })?;
        dates.push(date);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    column: j + 2,
                    message: format!("`{cell}` is not a number"),
                })?;
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Validation(format!(
                        "non-positive level {cell} at row {row}, column {} ({})",
                        j + 2,
                        markets[j]
                    )));
                }
                v
            };
            values.push(v);
        }
    }
    if dates.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 data rows, found {}",
            dates.len()
        )));
    }
    if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Validation(format!(
            "dates must be strictly increasing ({} then {})",
            format_date(w[0]),
            format_date(w[1])
        )));
    }

    let mut levels = DMatrix::from_row_slice(dates.len(), n, &values);
    forward_fill(&mut levels, config.max_ffill_days);

    let keep: Vec<usize> = (0..levels.nrows())
        .filter(|&t| {
            let missing = levels.row(t).iter().filter(|v| v.is_nan()).count();
            (missing as f64) <= config.missing_row_frac * n as f64
        })
        .collect();
    let dropped = levels.nrows() - keep.len();
    if dropped > 0 {
        log::info!("dropped {dropped} rows with more than {} missing markets", config.missing_row_frac);
    }
    let levels = levels.select_rows(&keep);
    let dates = keep.iter().map(|&t| dates[t]).collect();
    IndexPanel::new(dates, markets, levels)
}

/// Fill each missing cell from the most recent observation, for at most
/// `limit` consecutive rows. Leading gaps stay missing.
pub fn forward_fill(levels: &mut DMatrix<f64>, limit: usize) {
    for mut col in levels.column_iter_mut() {
        let mut last: Option<f64> = None;
        let mut run = 0usize;
        for v in col.iter_mut() {
            if v.is_nan() {
                run += 1;
                if let Some(prev) = last {
                    if run <= limit {
                        *v = prev;
                    }
                }
            } else {
                last = Some(*v);
                run = 0;
            }
        }
    }
}

/// Returns and return differences over a fixed time shift.
///
/// Row `t` of `returns` belongs to `return_dates()[t]`; row `t` of `diffs`
/// is `returns[t + 1] - returns[t]` and belongs to `diff_dates()[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    dates: Vec<NaiveDate>,
    markets: Vec<String>,
    returns: DMatrix<f64>,
    diffs: DMatrix<f64>,
    time_shift: usize,
    kind: ReturnKind,
}

impl ReturnPanel {
    pub fn markets(&self) -> &[String] {
        &self.markets
    }

    pub fn return_dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn diff_dates(&self) -> &[NaiveDate] {
        &self.dates[1..]
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn diffs(&self) -> &DMatrix<f64> {
        &self.diffs
    }

    pub fn time_shift(&self) -> usize {
        self.time_shift
    }

    pub fn kind(&self) -> ReturnKind {
        self.kind
    }
}

pub fn compute_returns(panel: &IndexPanel, dt: usize, kind: ReturnKind) -> Result<ReturnPanel> {
    if dt == 0 {
        return Err(Error::Config("time shift must be >= 1".into()));
    }
    let rows = panel.nrows();
    if dt >= rows {
        return Err(Error::InsufficientData(format!(
            "time shift {dt} needs more than {rows} rows"
        )));
    }
    let levels = panel.levels();
    let n = panel.nmarkets();
    let nr = rows - dt;
    let returns = DMatrix::from_fn(nr, n, |t, j| {
        let now = levels[(t + dt, j)];
        let then = levels[(t, j)];
        match kind {
            ReturnKind::Simple => now / then - 1.0,
            ReturnKind::Log => (now / then).ln(),
        }
    });
    let diffs = DMatrix::from_fn(nr - 1, n, |t, j| returns[(t + 1, j)] - returns[(t, j)]);
    Ok(ReturnPanel {
        dates: panel.dates()[dt..].to_vec(),
        markets: panel.markets().to_vec(),
        returns,
        diffs,
        time_shift: dt,
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn read(text: &str) -> Result<IndexPanel> {
        read_index_csv(text.as_bytes(), &IngestConfig::default())
    }

    #[test]
    fn parses_simple_file() {
        let p = read("date,A\n2020-01-01,100\n2020-01-02,110\n2020-01-03,121\n").unwrap();
        assert_eq!(p.nrows(), 3);
        assert_eq!(p.markets(), ["A"]);
        assert_eq!(p.levels()[(2, 0)], 121.0);
    }

    #[test]
    fn fills_one_missing_cell() {
        let p = read("date,A,B\n2020-01-01,100,5\n2020-01-02,,6\n2020-01-03,102,7\n").unwrap();
        assert_eq!(p.levels()[(1, 0)], 100.0);
        assert_eq!(p.nrows(), 3);
    }

    #[test]
    fn fill_limit_and_row_drop() {
        let cfg = IngestConfig {
            max_ffill_days: 1,
            missing_row_frac: 0.5,
            ..IngestConfig::default()
        };
        let text = "date,A,B\n2020-01-01,1,1\n2020-01-02,,2\n2020-01-03,,3\n2020-01-04,4,4\n";
        let p = read_index_csv(text.as_bytes(), &cfg).unwrap();
        assert_eq!(p.nrows(), 4);
        assert_eq!(p.levels()[(1, 0)], 1.0);
        assert!(p.levels()[(2, 0)].is_nan());

        let strict = IngestConfig {
            max_ffill_days: 1,
            missing_row_frac: 0.0,
            ..IngestConfig::default()
        };
        let p = read_index_csv(text.as_bytes(), &strict).unwrap();
        assert_eq!(p.nrows(), 3);
        assert_eq!(p.dates()[2], parse_date("2020-01-04").unwrap());
    }

    #[test]
    fn leading_missing_stays_missing() {
        let cfg = IngestConfig {
            missing_row_frac: 1.0,
            ..IngestConfig::default()
        };
        let text = "date,A,B\n2020-01-01,,1\n2020-01-02,2,2\n2020-01-03,3,3\n";
        let p = read_index_csv(text.as_bytes(), &cfg).unwrap();
        assert!(p.levels()[(0, 0)].is_nan());
        let r = compute_returns(&p, 1, ReturnKind::Simple).unwrap();
        assert!(r.returns()[(0, 0)].is_nan());
        assert_eq!(r.returns()[(1, 0)], 0.5);
    }

    #[test]
    fn reports_parse_position() {
        match read("date,A,B\n2020-01-01,1,2\n2020-01-02,1,x\n") {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 3)),
            other => panic!("unexpected {other:?}"),
        }
        match read("date,A\n2020-13-01,1\n2020-01-02,1\n") {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read("when,A\n"), Err(Error::Parse { row: 1, .. })));
        assert!(matches!(read("date,A,A\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            read("date,A\n2020-01-01,1\n2020-01-02,-3\n"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            read("date,A\n2020-01-01,1\n"),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            read("date,A\n2020-01-02,1\n2020-01-01,1\n"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn simple_returns_and_diffs() {
        let p = read("date,A\n2020-01-01,100\n2020-01-02,110\n2020-01-03,121\n").unwrap();
        let r = compute_returns(&p, 1, ReturnKind::Simple).unwrap();
        assert!((r.returns()[(0, 0)] - 0.10).abs() < 1e-15);
        assert_eq!(r.diffs().nrows(), 1);
        assert!(r.diffs()[(0, 0)].abs() < 1e-15);

        let p = read("date,A\n2020-01-01,100\n2020-01-02,110\n2020-01-03,99\n").unwrap();
        let r = compute_returns(&p, 1, ReturnKind::Simple).unwrap();
        assert!((r.diffs()[(0, 0)] + 0.20).abs() < 1e-15);
        assert_eq!(r.diff_dates()[0], parse_date("2020-01-03").unwrap());
    }

    #[test]
    fn constant_levels_give_zero() {
        let p = read("date,A\n2020-01-01,5\n2020-01-02,5\n2020-01-03,5\n2020-01-04,5\n").unwrap();
        let r = compute_returns(&p, 2, ReturnKind::Simple).unwrap();
        assert_eq!(r.returns().nrows(), 2);
        assert!(r.returns().iter().all(|v| *v == 0.0));
        assert!(r.diffs().iter().all(|v| *v == 0.0));
        assert!(matches!(
            compute_returns(&p, 4, ReturnKind::Simple),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            compute_returns(&p, 0, ReturnKind::Simple),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn log_returns() {
        let p = read("date,A\n2020-01-01,100\n2020-01-02,110\n").unwrap();
        let r = compute_returns(&p, 1, ReturnKind::Log).unwrap();
        assert!((r.returns()[(0, 0)] - 1.1f64.ln()).abs() < 1e-15);
    }

    fn panel_strategy() -> impl Strategy<Value = IndexPanel> {
        (2usize..5, 3usize..40).prop_flat_map(|(n, rows)| {
            proptest::collection::vec(-0.2f64..0.2, n * rows).prop_map(move |steps| {
                let mut levels = DMatrix::zeros(rows, n);
                for j in 0..n {
                    let mut level = 100.0;
                    for t in 0..rows {
                        level *= 1.0 + steps[t * n + j];
                        levels[(t, j)] = level;
                    }
                }
                let start = parse_date("2001-01-01").unwrap();
                let dates = (0..rows)
                    .map(|t| start + chrono::Days::new(t as u64))
                    .collect();
                let markets = (0..n).map(|j| format!("M{j}")).collect();
                IndexPanel::new(dates, markets, levels).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn cumulative_returns_recover_levels(panel in panel_strategy()) {
            let r = compute_returns(&panel, 1, ReturnKind::Simple).unwrap();
            for j in 0..panel.nmarkets() {
                let mut growth = 1.0;
                for t in 0..r.returns().nrows() {
                    growth *= 1.0 + r.returns()[(t, j)];
                    let expected = panel.levels()[(t + 1, j)] / panel.levels()[(0, j)];
                    prop_assert!(((growth - expected) / expected).abs() < 1e-12);
                }
            }
            prop_assert!(r.returns().iter().all(|v| *v > -1.0));
        }

        #[test]
        fn csv_round_trip_and_permutation(panel in panel_strategy()) {
            let mut buf = Vec::new();
            panel.write_csv(&mut buf).unwrap();
            let back = read_index_csv(buf.as_slice(), &IngestConfig::default()).unwrap();
            prop_assert_eq!(&back, &panel);

            let perm: Vec<usize> = (0..panel.nmarkets()).rev().collect();
            let permuted = panel.select_markets(&perm).unwrap();
            let a = compute_returns(&panel, 1, ReturnKind::Simple).unwrap();
            let b = compute_returns(&permuted, 1, ReturnKind::Simple).unwrap();
            prop_assert_eq!(b.diffs(), &a.diffs().select_columns(&perm));
        }
    }
}
