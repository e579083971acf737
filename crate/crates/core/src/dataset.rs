//! CSV ingestion, lag construction and assembly of the first-stage blocks.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, Matrix};

/// Which columns of a CSV file to read and in what role.
#[derive(Debug, Clone, Default)]
pub struct Schema {
    /// Numeric columns.
    pub numeric: Vec<String>,
    /// Column read as string labels (cluster ids).
    pub label: Option<String>,
    /// Integer time index. Rows are sorted by it on load.
    pub time: Option<String>,
}

/// Raw column table. Numeric cells are `None` when missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Vec<Option<f64>>>,
    labels: Option<(String, Vec<Option<String>>)>,
    time: Option<(String, Vec<i64>)>,
    rows: usize,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "." | "NA")
}

/// Reads the columns named in `schema` from a comma-delimited UTF-8 file with a
/// header row.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Table> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);

    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(Error::Data(format!("duplicate column name `{h}`")));
        }
    }
    let position = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column `{name}` not found in {}", path.display())))
    };

    let mut numeric_idx = Vec::with_capacity(schema.numeric.len());
    let mut names = Vec::with_capacity(schema.numeric.len());
    for name in &schema.numeric {
        if names.contains(name) {
            continue;
        }
        numeric_idx.push(position(name)?);
        names.push(name.clone());
    }
    let label_idx = schema.label.as_deref().map(position).transpose()?;
    let time_idx = schema.time.as_deref().map(position).transpose()?;

    let mut columns = vec![Vec::new(); names.len()];
    let mut labels = Vec::new();
    let mut times = Vec::new();
    let mut rows = 0usize;

    for record in reader.records() {
        let record = record?;
        rows += 1;
        let cell = |i: usize| record.get(i).unwrap_or("");

        for (slot, (&i, name)) in numeric_idx.iter().zip(&names).enumerate() {
            let raw = cell(i);
            let value = if is_missing(raw) {
                None
            } else {
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Some(v),
                    _ => {
                        return Err(Error::Parse {
                            row: rows,
                            column: name.clone(),
                            value: raw.to_string(),
                        })
                    }
                }
            };
            columns[slot].push(value);
        }
        if let Some(i) = label_idx {
            let raw = cell(i);
            labels.push((!is_missing(raw)).then(|| raw.to_string()));
        }
        if let Some(i) = time_idx {
            let raw = cell(i);
            let name = schema.time.clone().unwrap_or_default();
            let t = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && v.fract() == 0.0)
                .ok_or(Error::Parse {
                    row: rows,
                    column: name,
                    value: raw.to_string(),
                })?;
            times.push(t as i64);
        }
    }
    if rows == 0 {
        return Err(Error::Data(format!("no data rows in {}", path.display())));
    }

    let mut table = Table {
        names,
        columns,
        labels: schema.label.clone().map(|n| (n, labels)),
        time: schema.time.clone().map(|n| (n, times)),
        rows,
    };
    table.sort_by_time()?;
    Ok(table)
}

impl Table {
    /// Builds a table from in-memory numeric columns.
    pub fn from_columns(columns: Vec<(String, Vec<Option<f64>>)>) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.1.len());
        if rows == 0 {
            return Err(Error::Data("no data rows".into()));
        }
        let mut names = Vec::new();
        let mut data = Vec::new();
        for (name, col) in columns {
            if col.len() != rows {
                return Err(Error::Data(format!("column `{name}` has {} rows, expected {rows}", col.len())));
            }
            if names.contains(&name) {
                return Err(Error::Data(format!("duplicate column name `{name}`")));
            }
            names.push(name);
            data.push(col);
        }
        Ok(Self {
            names,
            columns: data,
            labels: None,
            time: None,
            rows,
        })
    }

    pub fn with_time(mut self, name: &str, index: Vec<i64>) -> Result<Self> {
        if index.len() != self.rows {
            return Err(Error::Data("time index length does not match the table".into()));
        }
        self.time = Some((name.to_string(), index));
        self.sort_by_time()?;
        Ok(self)
    }

    pub fn with_labels(mut self, name: &str, labels: Vec<Option<String>>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(Error::Data("label column length does not match the table".into()));
        }
        self.labels = Some((name.to_string(), labels));
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[Option<f64>]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn time_index(&self) -> Option<&[i64]> {
        self.time.as_ref().map(|(_, t)| t.as_slice())
    }

    fn sort_by_time(&mut self) -> Result<()> {
        let Some((name, times)) = &self.time else {
            return Ok(());
        };
        let mut order: Vec<usize> = (0..self.rows).collect();
        order.sort_by_key(|&i| times[i]);
        if let Some(w) = order.windows(2).find(|w| times[w[0]] == times[w[1]]) {
            return Err(Error::Data(format!(
                "time variable `{name}` has duplicate value {}",
                times[w[0]]
            )));
        }
        if order.iter().enumerate().all(|(i, &j)| i == j) {
            return Ok(());
        }
        let permute = |v: &Vec<Option<f64>>| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        self.columns = self.columns.iter().map(permute).collect();
        if let Some((_, labels)) = &mut self.labels {
            *labels = order.iter().map(|&i| labels[i].clone()).collect();
        }
        if let Some((_, t)) = &mut self.time {
            *t = order.iter().map(|&i| t[i]).collect();
        }
        Ok(())
    }

    fn check_contiguous_time(&self) -> Result<&[i64]> {
        let times = self
            .time_index()
            .ok_or_else(|| Error::Data("lags require a time variable".into()))?;
        if let Some(w) = times.windows(2).find(|w| w[1] - w[0] != 1) {
            return Err(Error::Data(format!(
                "time index is not contiguous: {} is followed by {}",
                w[0], w[1]
            )));
        }
        Ok(times)
    }

    /// Adds `<column>_L<order>` holding the value `order` periods earlier. The
    /// first `order` rows become missing.
    pub fn lag(&self, column: &str, order: usize) -> Result<Table> {
        self.check_contiguous_time()?;
        if order == 0 {
            return Err(Error::Data("lag order must be positive".into()));
        }
        if order >= self.rows {
            return Err(Error::Data(format!(
                "lag order {order} leaves no rows out of {}",
                self.rows
            )));
        }
        let src = self
            .column(column)
            .ok_or_else(|| Error::Data(format!("column `{column}` not found")))?;
        let name = lag_name(column, order);
        if self.names.contains(&name) {
            return Err(Error::Data(format!("duplicate column name `{name}`")));
        }
        let lagged = (0..self.rows)
            .map(|t| if t >= order { src[t - order] } else { None })
            .collect();
        let mut out = self.clone();
        out.names.push(name);
        out.columns.push(lagged);
        Ok(out)
    }
}

pub fn lag_name(column: &str, order: usize) -> String {
    format!("{column}_L{order}")
}

/// Variable roles for [`assemble`].
#[derive(Debug, Clone, Default)]
pub struct Roles {
    pub endogenous: Vec<String>,
    pub instruments: Vec<String>,
    pub partial: Vec<String>,
    pub noconstant: bool,
    pub cluster: Option<String>,
}

/// First-stage data: endogenous `x` (n×k), instruments `z` (n×m) and controls
/// `w` (n×ℓ, leading constant unless suppressed).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub z: Matrix,
    pub w: Matrix,
    pub endogenous: Vec<String>,
    pub instruments: Vec<String>,
    pub controls: Vec<String>,
    pub cluster_ids: Option<Vec<String>>,
    pub time_index: Option<Vec<i64>>,
    /// Row count of the source table before listwise deletion.
    pub table_rows: usize,
}

pub const CONSTANT: &str = "_cons";

fn default_names(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

impl Dataset {
    /// Builds a dataset directly from blocks. `w` may have zero columns.
    pub fn new(x: Matrix, z: Matrix, w: Matrix) -> Result<Self> {
        let n = x.nrows();
        if z.nrows() != n || w.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "blocks disagree on row count: x {}, z {}, w {}",
                n,
                z.nrows(),
                w.nrows()
            )));
        }
        if x.ncols() == 0 || z.ncols() == 0 {
            return Err(Error::InvalidInput("need at least one endogenous variable and one instrument".into()));
        }
        ensure_finite(&x, "endogenous block")?;
        ensure_finite(&z, "instrument block")?;
        ensure_finite(&w, "control block")?;
        if n <= z.ncols() + w.ncols() {
            return Err(Error::Data(format!(
                "insufficient observations: n = {n} but m + l = {}",
                z.ncols() + w.ncols()
            )));
        }
        Ok(Self {
            endogenous: default_names("x", x.ncols()),
            instruments: default_names("z", z.ncols()),
            controls: default_names("w", w.ncols()),
            table_rows: n,
            x,
            z,
            w,
            cluster_ids: None,
            time_index: None,
        })
    }

    pub fn with_clusters(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n() {
            return Err(Error::Data("cluster ids do not match the sample size".into()));
        }
        let distinct: HashSet<&String> = ids.iter().collect();
        if distinct.len() < 2 {
            return Err(Error::Data(format!(
                "cluster bootstrap needs at least 2 clusters, found {}",
                distinct.len()
            )));
        }
        self.cluster_ids = Some(ids);
        Ok(self)
    }

    pub fn with_time_index(mut self, index: Vec<i64>) -> Result<Self> {
        if index.len() != self.n() {
            return Err(Error::Data("time index does not match the sample size".into()));
        }
        if index.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("time index must be strictly increasing".into()));
        }
        self.time_index = Some(index);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.z.ncols()
    }

    pub fn l(&self) -> usize {
        self.w.ncols()
    }

    /// Cluster index per row (clusters numbered by first appearance) and the
    /// cluster count.
    pub fn cluster_index(&self) -> Option<(Vec<usize>, usize)> {
        let ids = self.cluster_ids.as_ref()?;
        let mut map: HashMap<&str, usize> = HashMap::new();
        let index = ids
            .iter()
            .map(|id| {
                let next = map.len();
                *map.entry(id.as_str()).or_insert(next)
            })
            .collect();
        Some((index, map.len()))
    }

    /// True when the time index (if any) has unit gaps throughout.
    pub fn has_contiguous_time(&self) -> bool {
        self.time_index
            .as_ref()
            .is_none_or(|t| t.windows(2).all(|w| w[1] - w[0] == 1))
    }
}

/// Selects the role columns, drops rows with any missing value and builds the
/// blocks in declared column order.
pub fn assemble(table: &Table, roles: &Roles) -> Result<Dataset> {
    let mut seen = HashSet::new();
    for name in roles
        .endogenous
        .iter()
        .chain(&roles.instruments)
        .chain(&roles.partial)
    {
        if !seen.insert(name.as_str()) {
            return Err(Error::Data(format!(
                "variable `{name}` appears more than once across the variable lists"
            )));
        }
    }
    if roles.endogenous.is_empty() {
        return Err(Error::Data("no endogenous variables given".into()));
    }
    if roles.instruments.is_empty() {
        return Err(Error::Data("no instruments given".into()));
    }

    let fetch = |names: &[String]| -> Result<Vec<&[Option<f64>]>> {
        names
            .iter()
            .map(|n| {
                table
                    .column(n)
                    .ok_or_else(|| Error::Data(format!("column `{n}` not found")))
            })
            .collect()
    };
    let xs = fetch(&roles.endogenous)?;
    let zs = fetch(&roles.instruments)?;
    let ws = fetch(&roles.partial)?;

    let labels = match &roles.cluster {
        Some(name) => match &table.labels {
            Some((label_name, labels)) if label_name == name => Some(labels),
            _ => return Err(Error::Data(format!("cluster column `{name}` was not loaded"))),
        },
        None => None,
    };

    let keep: Vec<usize> = (0..table.n_rows())
        .filter(|&i| {
            xs.iter().chain(&zs).chain(&ws).all(|c| c[i].is_some())
                && labels.is_none_or(|l| l[i].is_some())
        })
        .collect();
    let n = keep.len();
    let m = zs.len();
    let l = ws.len() + usize::from(!roles.noconstant);
    if n <= m + l {
        return Err(Error::Data(format!(
            "insufficient observations: {n} complete rows but m + l = {}",
            m + l
        )));
    }

    let block = |cols: &[&[Option<f64>]]| {
        Matrix::from_fn(n, cols.len(), |i, j| cols[j][keep[i]].expect("filtered"))
    };
    let x = block(&xs);
    let z = block(&zs);
    for (j, name) in roles.instruments.iter().enumerate() {
        let col = z.column(j);
        if col.iter().all(|&v| v == col[0]) {
            return Err(Error::Data(format!(
                "instrument `{name}` is constant in the estimation sample"
            )));
        }
    }
    let partial = block(&ws);
    let w = if roles.noconstant {
        partial
    } else {
        let mut w = Matrix::from_element(n, l, 1.0);
        w.columns_mut(1, l - 1).copy_from(&partial);
        w
    };

    let mut controls = Vec::with_capacity(l);
    if !roles.noconstant {
        controls.push(CONSTANT.to_string());
    }
    controls.extend(roles.partial.iter().cloned());

    let mut d = Dataset {
        x,
        z,
        w,
        endogenous: roles.endogenous.clone(),
        instruments: roles.instruments.clone(),
        controls,
        cluster_ids: None,
        time_index: table
            .time_index()
            .map(|t| keep.iter().map(|&i| t[i]).collect()),
        table_rows: table.n_rows(),
    };
    if let Some(labels) = labels {
        d = d.with_clusters(keep.iter().map(|&i| labels[i].clone().expect("filtered")).collect())?;
    }
    Ok(d)
}
