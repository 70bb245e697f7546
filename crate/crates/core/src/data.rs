//! Panel ingestion, standardization and the block / factor-structure types
//! that describe which variables load on which factors.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FarsError, Result};

/// A T×N panel of observations (rows are periods, columns are variables).
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    values: DMatrix<f64>,
    dates: Option<Vec<String>>,
    var_names: Option<Vec<String>>,
}

impl Panel {
    pub fn new(
        values: DMatrix<f64>,
        dates: Option<Vec<String>>,
        var_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let (t, n) = values.shape();
        if t < 2 {
            return Err(FarsError::Dimension(format!(
                "a panel needs at least 2 periods, got {t}"
            )));
        }
        if n == 0 {
            return Err(FarsError::Dimension("a panel needs at least one variable".into()));
        }
        if let Some((i, j)) = first_non_finite(&values) {
            return Err(FarsError::MissingValue {
                row: i + 1,
                column: j + 1,
                value: values[(i, j)].to_string(),
            });
        }
        if let Some(d) = &dates {
            if d.len() != t {
                return Err(FarsError::Dimension(format!(
                    "{} dates supplied for {t} periods",
                    d.len()
                )));
            }
        }
        if let Some(v) = &var_names {
            if v.len() != n {
                return Err(FarsError::Dimension(format!(
                    "{} variable names supplied for {n} variables",
                    v.len()
                )));
            }
        }
        Ok(Panel {
            values,
            dates,
            var_names,
        })
    }

    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        Panel::new(values, None, None)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn dates(&self) -> Option<&[String]> {
        self.dates.as_deref()
    }

    pub fn var_names(&self) -> Option<&[String]> {
        self.var_names.as_deref()
    }

    pub fn periods(&self) -> usize {
        self.values.nrows()
    }

    pub fn variables(&self) -> usize {
        self.values.ncols()
    }

    /// Label for column `j` (zero-based): its name when known, else `VAR j+1`.
    pub fn column_label(&self, j: usize) -> String {
        match &self.var_names {
            Some(names) => names[j].clone(),
            None => format!("VAR {}", j + 1),
        }
    }

    /// Removes column `j` and returns it together with the reduced panel.
    pub fn split_column(&self, j: usize) -> Result<(Vec<f64>, Panel)> {
        if j >= self.variables() {
            return Err(FarsError::Dimension(format!("column {j} out of range")));
        }
        let column = self.values.column(j).iter().copied().collect();
        let values = self.values.clone().remove_column(j);
        let var_names = self.var_names.as_ref().map(|names| {
            let mut names = names.clone();
            names.remove(j);
            names
        });
        Ok((column, Panel::new(values, self.dates.clone(), var_names)?))
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Panel> {
        let values = self.values.select_columns(columns);
        let var_names = self
            .var_names
            .as_ref()
            .map(|names| columns.iter().map(|&j| names[j].clone()).collect());
        Panel::new(values, self.dates.clone(), var_names)
    }
}

fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Some((i, j));
            }
        }
    }
    None
}

/// Reads a comma-separated numeric panel. With `has_dates` the first column
/// is kept verbatim as the period label.
pub fn load_panel(path: impl AsRef<Path>, has_dates: bool, has_header: bool) -> Result<Panel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| FarsError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let skip = usize::from(has_dates);
    let mut var_names = None;
    let mut dates = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    let mut t = 0usize;

    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| FarsError::Format(format!("{}: {e}", path.display())))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(FarsError::Format(format!(
                    "{}: line {} has {} fields, expected {w}",
                    path.display(),
                    line + 1,
                    record.len()
                )))
            }
            _ => {}
        }
        if record.len() <= skip {
            return Err(FarsError::Format(format!(
                "{}: line {} has no data columns",
                path.display(),
                line + 1
            )));
        }
        if has_header && var_names.is_none() {
            var_names = Some(record.iter().skip(skip).map(str::to_owned).collect::<Vec<_>>());
            continue;
        }
        if has_dates {
            dates.push(record[0].to_owned());
        }
        for (j, field) in record.iter().skip(skip).enumerate() {
            let value = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| FarsError::MissingValue {
                    row: t + 1,
                    column: j + 1,
                    value: field.to_owned(),
                })?;
            data.push(value);
        }
        t += 1;
    }

    let n = width.map_or(0, |w| w - skip);
    if t == 0 || n == 0 {
        return Err(FarsError::Format(format!("{}: no data rows", path.display())));
    }
    let values = DMatrix::from_row_slice(t, n, &data);
    Panel::new(values, has_dates.then_some(dates), var_names)
}

/// Centers every column and scales it to unit sample standard deviation
/// (divisor T−1).
pub fn standardize(panel: &Panel) -> Result<Panel> {
    let (t, n) = panel.values.shape();
    let mut out = panel.values.clone();
    for j in 0..n {
        let mut col = out.column_mut(j);
        let mean = col.sum() / t as f64;
        let ss: f64 = col.iter().map(|x| (x - mean).powi(2)).sum();
        let sd = (ss / (t - 1) as f64).sqrt();
        if !(sd > f64::EPSILON * mean.abs().max(1.0)) {
            return Err(FarsError::ConstantColumn(panel.column_label(j)));
        }
        col.apply(|x| *x = (*x - mean) / sd);
    }
    Ok(Panel {
        values: out,
        dates: panel.dates.clone(),
        var_names: panel.var_names.clone(),
    })
}

/// Partition of the N columns into K contiguous blocks, described by the
/// (one-based, inclusive) index of each block's last column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    ends: Vec<usize>,
}

impl BlockSpec {
    pub fn new(ends: Vec<usize>) -> Result<Self> {
        if ends.is_empty() {
            return Err(FarsError::Structure("at least one block is required".into()));
        }
        let mut prev = 0;
        for (k, &e) in ends.iter().enumerate() {
            if e <= prev {
                return Err(FarsError::Structure(format!(
                    "block end indices must be strictly increasing; block {} ends at {e} after {prev}",
                    k + 1
                )));
            }
            prev = e;
        }
        Ok(BlockSpec { ends })
    }

    /// A single block spanning all `n` variables.
    pub fn single(n: usize) -> Self {
        BlockSpec { ends: vec![n] }
    }

    /// Builds the spec from block sizes N₁, …, N_K.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let ends = sizes
            .iter()
            .scan(0, |acc, &s| {
                *acc += s;
                Some(*acc)
            })
            .collect();
        BlockSpec::new(ends)
    }

    pub fn block_count(&self) -> usize {
        self.ends.len()
    }

    pub fn ends(&self) -> &[usize] {
        &self.ends
    }

    pub fn total(&self) -> usize {
        *self.ends.last().expect("non-empty")
    }

    /// Zero-based column range of block `k` (one-based).
    pub fn range(&self, k: usize) -> Range<usize> {
        let start = if k == 1 { 0 } else { self.ends[k - 2] };
        start..self.ends[k - 1]
    }

    pub fn sizes(&self) -> Vec<usize> {
        (1..=self.block_count()).map(|k| self.range(k).len()).collect()
    }

    /// One-based block of zero-based column `i`.
    pub fn block_of(&self, i: usize) -> usize {
        self.ends.partition_point(|&e| e <= i) + 1
    }

    pub fn check_columns(&self, n: usize) -> Result<()> {
        if self.total() != n {
            return Err(FarsError::Structure(format!(
                "last block ends at {} but the panel has {n} variables",
                self.total()
            )));
        }
        Ok(())
    }
}

/// One level of the factor hierarchy: the set of blocks a group of factors
/// loads on, and how many factors it carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    blocks: Vec<usize>,
    count: usize,
}

impl Node {
    pub fn new(blocks: impl IntoIterator<Item = usize>, count: usize) -> Result<Self> {
        let set: BTreeSet<usize> = blocks.into_iter().collect();
        if set.is_empty() {
            return Err(FarsError::Structure("a node needs at least one block".into()));
        }
        if set.contains(&0) {
            return Err(FarsError::Structure("blocks are numbered from 1".into()));
        }
        Ok(Node {
            blocks: set.into_iter().collect(),
            count,
        })
    }

    /// Parses labels such as `"1-3"` or `"2"`.
    pub fn from_label(label: &str, count: usize) -> Result<Self> {
        let blocks = label
            .split('-')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| FarsError::Structure(format!("bad block label {label:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Node::new(blocks, count)
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn label(&self) -> String {
        self.blocks
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn contains(&self, block: usize) -> bool {
        self.blocks.binary_search(&block).is_ok()
    }

    /// True when `self` loads on every block of `other` and on at least one more.
    pub fn is_strict_superset_of(&self, other: &Node) -> bool {
        self.blocks.len() > other.blocks.len() && other.blocks.iter().all(|&b| self.contains(b))
    }
}

/// The ordered node hierarchy: global first, then larger overlaps, then
/// block-specific nodes; lexicographic within a level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Node>", into = "Vec<Node>")]
pub struct FactorStructure {
    nodes: Vec<Node>,
}

impl TryFrom<Vec<Node>> for FactorStructure {
    type Error = FarsError;

    fn try_from(nodes: Vec<Node>) -> Result<Self> {
        FactorStructure::new(nodes)
    }
}

impl From<FactorStructure> for Vec<Node> {
    fn from(s: FactorStructure) -> Self {
        s.nodes
    }
}

impl FactorStructure {
    pub fn new(nodes: Vec<Node>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for node in &nodes {
            if !seen.insert(node.blocks.clone()) {
                return Err(FarsError::Structure(format!(
                    "block set {} listed more than once",
                    node.label()
                )));
            }
        }
        let mut nodes: Vec<Node> = nodes.into_iter().filter(|n| n.count > 0).collect();
        nodes.sort_by(|a, b| {
            b.blocks
                .len()
                .cmp(&a.blocks.len())
                .then_with(|| a.blocks.cmp(&b.blocks))
        });
        if nodes.is_empty() {
            return Err(FarsError::Structure("the model needs at least one factor".into()));
        }
        Ok(FactorStructure { nodes })
    }

    /// Plain DFM with `r` factors on a single block.
    pub fn dfm(r: usize) -> Result<Self> {
        FactorStructure::new(vec![Node::new([1], r)?])
    }

    /// Global factors on all `k` blocks, optional middle-layer nodes keyed by
    /// their block set, and one local count per block.
    pub fn hierarchical(
        k: usize,
        global: usize,
        middle: &[(Vec<usize>, usize)],
        local: &[usize],
    ) -> Result<Self> {
        if !local.is_empty() && local.len() != k {
            return Err(FarsError::Structure(format!(
                "{} local counts given for {k} blocks",
                local.len()
            )));
        }
        let mut nodes = vec![Node::new(1..=k, global)?];
        for (blocks, count) in middle {
            let node = Node::new(blocks.iter().copied(), *count)?;
            if node.blocks.len() < 2 || node.blocks.len() >= k {
                return Err(FarsError::Structure(format!(
                    "middle-layer node {} must span between 2 and {} blocks",
                    node.label(),
                    k.saturating_sub(1)
                )));
            }
            nodes.push(node);
        }
        if k > 1 {
            for (i, &c) in local.iter().enumerate() {
                nodes.push(Node::new([i + 1], c)?);
            }
        } else if let Some(&c) = local.first() {
            nodes[0].count += c;
        }
        FactorStructure::new(nodes)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn total_factors(&self) -> usize {
        self.nodes.iter().map(|n| n.count).sum()
    }

    /// Column range of node `idx` within the stacked factor matrix.
    pub fn node_columns(&self, idx: usize) -> Range<usize> {
        let start: usize = self.nodes[..idx].iter().map(|n| n.count).sum();
        start..start + self.nodes[idx].count
    }

    /// Node index for every factor column.
    pub fn column_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| std::iter::repeat_n(i, n.count))
            .collect()
    }

    pub fn max_block(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.blocks.iter().copied())
            .max()
            .unwrap_or(0)
    }

    /// Number of factors that load on block `k`.
    pub fn factors_on_block(&self, k: usize) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.contains(k))
            .map(|n| n.count)
            .sum()
    }

    /// Whether a single node covers all `k` blocks, i.e. the model is a plain DFM.
    pub fn is_single_global(&self, k: usize) -> bool {
        self.nodes.len() == 1 && self.nodes[0].blocks.len() == k
    }

    /// Column labels such as `G1`, `F13_1`, `F2_1`.
    pub fn column_names(&self, k: usize) -> Vec<String> {
        let mut names = Vec::with_capacity(self.total_factors());
        for node in &self.nodes {
            for j in 1..=node.count {
                if node.blocks.len() == k {
                    names.push(format!("G{j}"));
                } else {
                    let digits: String = node.blocks.iter().map(|b| b.to_string()).collect();
                    names.push(format!("F{digits}_{j}"));
                }
            }
        }
        names
    }
}

/// N×r zero-pattern of the loading matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingPattern {
    allowed: DMatrix<bool>,
    column_nodes: Vec<usize>,
}

impl LoadingPattern {
    pub fn allowed(&self) -> &DMatrix<bool> {
        &self.allowed
    }

    pub fn is_allowed(&self, variable: usize, column: usize) -> bool {
        self.allowed[(variable, column)]
    }

    pub fn column_nodes(&self) -> &[usize] {
        &self.column_nodes
    }

    pub fn variables(&self) -> usize {
        self.allowed.nrows()
    }

    pub fn factors(&self) -> usize {
        self.allowed.ncols()
    }

    /// Allowed columns of `variable`, ascending.
    pub fn allowed_columns(&self, variable: usize) -> Vec<usize> {
        (0..self.factors())
            .filter(|&j| self.allowed[(variable, j)])
            .collect()
    }

    pub fn all_allowed(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Pattern without restrictions.
    pub fn unrestricted(n: usize, r: usize) -> Self {
        LoadingPattern {
            allowed: DMatrix::from_element(n, r, true),
            column_nodes: vec![0; r],
        }
    }
}

pub fn build_pattern(spec: &BlockSpec, structure: &FactorStructure) -> Result<LoadingPattern> {
    let k = spec.block_count();
    if structure.max_block() > k {
        return Err(FarsError::Structure(format!(
            "structure references block {} but only {k} blocks exist",
            structure.max_block()
        )));
    }
    let n = spec.total();
    let r = structure.total_factors();
    let column_nodes = structure.column_nodes();
    let mut allowed = DMatrix::from_element(n, r, false);
    for (j, &node) in column_nodes.iter().enumerate() {
        for &b in structure.nodes()[node].blocks() {
            for i in spec.range(b) {
                allowed[(i, j)] = true;
            }
        }
    }
    Ok(LoadingPattern {
        allowed,
        column_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_plain_csv() {
        let f = write_tmp("1,2\n3,4\n5,6\n");
        let p = load_panel(f.path(), false, false).unwrap();
        assert_eq!((p.periods(), p.variables()), (3, 2));
        assert_eq!(p.values()[(2, 1)], 6.0);
        assert!(p.var_names().is_none());
    }

    #[test]
    fn loads_header_and_dates() {
        let f = write_tmp("date,a,b\n2005-07-01,1,2\n2005-10-01,3,4\n2006-01-01,5,6\n");
        let p = load_panel(f.path(), true, true).unwrap();
        assert_eq!(p.periods(), 3);
        assert_eq!(p.var_names().unwrap(), ["a", "b"]);
        assert_eq!(p.dates().unwrap()[0], "2005-07-01");
    }

    #[test]
    fn missing_value_names_location() {
        let f = write_tmp("1,2\n3,NA\n5,6\n");
        match load_panel(f.path(), false, false) {
            Err(FarsError::MissingValue { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_rows_rejected() {
        let f = write_tmp("1,2\n3\n5,6\n");
        assert!(matches!(load_panel(f.path(), false, false), Err(FarsError::Format(_))));
    }

    #[test]
    fn standardize_simple_column() {
        let p = Panel::from_matrix(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        let s = standardize(&p).unwrap();
        for (a, b) in s.values().iter().zip([-1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn standardize_rejects_constant() {
        let p = Panel::from_matrix(DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 4.0, 0.0, 0.0, 0.0]))
            .unwrap();
        match standardize(&p) {
            Err(FarsError::ConstantColumn(name)) => assert_eq!(name, "VAR 2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structure_ordering_and_names() {
        let s = FactorStructure::hierarchical(3, 1, &[(vec![1, 3], 1)], &[1, 1, 1]).unwrap();
        let labels: Vec<_> = s.nodes().iter().map(Node::label).collect();
        assert_eq!(labels, ["1-2-3", "1-3", "1", "2", "3"]);
        assert_eq!(s.column_names(3), ["G1", "F13_1", "F1_1", "F2_1", "F3_1"]);
        assert_eq!(s.total_factors(), 5);
    }

    #[test]
    fn structure_drops_empty_and_rejects_duplicates() {
        let s = FactorStructure::hierarchical(3, 1, &[], &[1, 0, 2]).unwrap();
        assert_eq!(s.nodes().len(), 3);
        let dup = FactorStructure::new(vec![
            Node::new([1, 2], 1).unwrap(),
            Node::new([2, 1], 1).unwrap(),
        ]);
        assert!(dup.is_err());
        assert!(FactorStructure::hierarchical(2, 0, &[], &[0, 0]).is_err());
    }

    #[test]
    fn pattern_for_overlapping_layout() {
        let spec = BlockSpec::from_sizes(&[63, 248, 208]).unwrap();
        let s = FactorStructure::hierarchical(3, 1, &[(vec![1, 3], 1)], &[1, 1, 1]).unwrap();
        let p = build_pattern(&spec, &s).unwrap();
        assert_eq!(p.factors(), 5);
        for i in 0..519 {
            let expect = i < 63 || i >= 311;
            assert_eq!(p.is_allowed(i, 1), expect, "variable {}", i + 1);
            assert!(p.is_allowed(i, 0));
        }
    }

    #[test]
    fn pattern_single_block_all_true() {
        let p = build_pattern(&BlockSpec::single(4), &FactorStructure::dfm(2).unwrap()).unwrap();
        assert!(p.all_allowed());
        assert_eq!(p.factors(), 2);
    }

    #[test]
    fn pattern_rejects_unknown_block() {
        let spec = BlockSpec::from_sizes(&[2, 2, 2]).unwrap();
        let s = FactorStructure::new(vec![Node::new([4], 1).unwrap()]).unwrap();
        assert!(matches!(build_pattern(&spec, &s), Err(FarsError::Structure(_))));
    }

    #[test]
    fn block_lookup() {
        let spec = BlockSpec::new(vec![2, 5, 6]).unwrap();
        let blocks: Vec<_> = (0..6).map(|i| spec.block_of(i)).collect();
        assert_eq!(blocks, [1, 1, 2, 2, 2, 3]);
        assert_eq!(spec.range(2), 2..5);
        assert!(BlockSpec::new(vec![3, 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn standardize_is_idempotent(data in proptest::collection::vec(-50.0f64..50.0, 24)) {
                let m = DMatrix::from_column_slice(8, 3, &data);
                let p = Panel::from_matrix(m).unwrap();
                if let Ok(once) = standardize(&p) {
                    let twice = standardize(&once).unwrap();
                    prop_assert_eq!(twice.values().shape(), (8, 3));
                    for (a, b) in once.values().iter().zip(twice.values().iter()) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn pattern_support_is_union_of_blocks(sizes in proptest::collection::vec(1usize..6, 2..5), pick in 0u32..64) {
                let k = sizes.len();
                let blocks: Vec<usize> = (1..=k).filter(|b| pick & (1 << (b - 1)) != 0).collect();
                prop_assume!(!blocks.is_empty());
                let spec = BlockSpec::from_sizes(&sizes).unwrap();
                let s = FactorStructure::new(vec![Node::new(blocks.clone(), 1).unwrap()]).unwrap();
                let p = build_pattern(&spec, &s).unwrap();
                for i in 0..spec.total() {
                    prop_assert_eq!(p.is_allowed(i, 0), blocks.contains(&spec.block_of(i)));
                }
            }
        }
    }
}
