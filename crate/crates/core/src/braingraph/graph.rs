use std::io::Write;
use std::path::Path;

use super::scaler::FeatureScaler;
use super::table::{CorticalTable, Hemisphere, RegionGroup, CORTICAL_THICKNESS, MEAN_CURVATURE};
use crate::error::{Error, Result};

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    n: usize,
    data: Vec<f64>,
}

impl Adjacency {
    pub fn zeros(n: usize) -> Self {
        Adjacency {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::BadTensorLength {
                shape: vec![n, n],
                expected: n * n,
                actual: data.len(),
            });
        }
        Ok(Adjacency { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n.max(1))
    }

    /// Bitwise symmetry and an exactly zero diagonal.
    pub fn is_symmetric_hollow(&self) -> bool {
        (0..self.n).all(|i| {
            self.get(i, i) == 0.0
                && (i + 1..self.n).all(|j| self.get(i, j).to_bits() == self.get(j, i).to_bits())
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for (line_no, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            rows += 1;
            for cell in line.split(',') {
                data.push(cell.trim().parse().map_err(|_| Error::MalformedRow {
                    line: line_no + 1,
                    message: format!("not a number: `{cell}`"),
                })?);
            }
        }
        Adjacency::from_vec(rows, data)
    }
}

/// Morphological edges from node magnitudes: `|a - b| / (a + b)`.
///
/// Only the upper triangle is computed and then mirrored, so the result is
/// bitwise symmetric. A pair of zero nodes gets edge 0.
pub fn pairing_edges(nodes: &[f64]) -> Result<Adjacency> {
    if let Some((index, &value)) = nodes
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::InvalidNodeValue { index, value });
    }
    let n = nodes.len();
    let mut adj = Adjacency::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (nodes[i], nodes[j]);
            let denom = a + b;
            let e = if denom == 0.0 {
                0.0
            } else {
                (a - b).abs() / denom
            };
            adj.set(i, j, e);
            adj.set(j, i, e);
        }
    }
    Ok(adj)
}

/// One graph view of a subject: a single metric per ROI and its edges.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainGraph {
    pub subject_id: String,
    pub hemisphere: Hemisphere,
    pub metric: String,
    /// Nonnegative metric magnitudes; edges are built from these.
    pub raw_nodes: Vec<f64>,
    /// Min-max scaled nodes in `[0, 1]`, the space diffusion runs in.
    pub scaled_nodes: Vec<f64>,
    pub adjacency: Adjacency,
}

impl BrainGraph {
    pub fn node_count(&self) -> usize {
        self.raw_nodes.len()
    }

    pub fn from_raw(
        subject_id: &str,
        hemisphere: Hemisphere,
        metric: &str,
        raw_nodes: Vec<f64>,
        scaler: &FeatureScaler,
    ) -> Result<Self> {
        let adjacency = pairing_edges(&raw_nodes)?;
        let scaled_nodes = scaler.transform_all(metric, &raw_nodes)?;
        Ok(BrainGraph {
            subject_id: subject_id.to_string(),
            hemisphere,
            metric: metric.to_string(),
            raw_nodes,
            scaled_nodes,
            adjacency,
        })
    }

    /// Writes `roi_index,raw,scaled` rows.
    pub fn write_nodes_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["roi_index", &self.metric, "scaled"])?;
        for (i, (r, s)) in self.raw_nodes.iter().zip(&self.scaled_nodes).enumerate() {
            w.write_record([i.to_string(), r.to_string(), s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Node values of one metric as used for graph construction. Curvature is
/// signed, so its magnitude is taken.
pub fn graph_view_values(group: &RegionGroup, metric: &str) -> Result<Vec<f64>> {
    let values = group.metric(metric)?;
    Ok(if metric == MEAN_CURVATURE {
        values.iter().map(|v| v.abs()).collect()
    } else {
        values.to_vec()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphPair {
    pub subject_id: String,
    pub hemisphere: Hemisphere,
    pub source: BrainGraph,
    pub target: BrainGraph,
}

/// Metric names for the two graph views of a subject.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MetricPair {
    pub source: String,
    pub target: String,
}

impl Default for MetricPair {
    fn default() -> Self {
        MetricPair {
            source: MEAN_CURVATURE.to_string(),
            target: CORTICAL_THICKNESS.to_string(),
        }
    }
}

pub fn build_graph_pair(
    table: &CorticalTable,
    subject: &str,
    hemisphere: Hemisphere,
    metrics: &MetricPair,
    scaler: &FeatureScaler,
) -> Result<GraphPair> {
    for m in [&metrics.source, &metrics.target] {
        if !table.has_metric(m) {
            return Err(Error::UnknownMetric(m.clone()));
        }
    }
    let group = table.group(subject, hemisphere)?;
    let source = BrainGraph::from_raw(
        subject,
        hemisphere,
        &metrics.source,
        graph_view_values(group, &metrics.source)?,
        scaler,
    )?;
    let target = BrainGraph::from_raw(
        subject,
        hemisphere,
        &metrics.target,
        graph_view_values(group, &metrics.target)?,
        scaler,
    )?;
    Ok(GraphPair {
        subject_id: subject.to_string(),
        hemisphere,
        source,
        target,
    })
}

pub fn build_dataset(
    table: &CorticalTable,
    hemisphere: Hemisphere,
    subjects: &[String],
    metrics: &MetricPair,
    scaler: &FeatureScaler,
) -> Result<Vec<GraphPair>> {
    subjects
        .iter()
        .map(|s| build_graph_pair(table, s, hemisphere, metrics, scaler))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::braingraph::{fit_scaler, generate_synthetic_dataset, MetricRange, ROI_COUNT};

    #[test]
    fn equal_nodes_give_zero_edge() {
        let a = pairing_edges(&[2.0, 2.0]).unwrap();
        assert_eq!(a.get(0, 1), 0.0);
    }

    #[test]
    fn three_and_one_give_half() {
        let a = pairing_edges(&[3.0, 1.0]).unwrap();
        assert_eq!(a.get(0, 1), 0.5);
        assert_eq!(a.get(1, 0), 0.5);
    }

    #[test]
    fn zero_partner_gives_one() {
        let a = pairing_edges(&[5.0, 0.0]).unwrap();
        assert_eq!(a.get(0, 1), 1.0);
    }

    #[test]
    fn both_zero_gives_zero() {
        let a = pairing_edges(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.get(0, 2), 1.0);
    }

    #[test]
    fn negative_and_nan_rejected() {
        assert!(matches!(
            pairing_edges(&[1.0, -0.5]),
            Err(Error::InvalidNodeValue { index: 1, .. })
        ));
        assert!(pairing_edges(&[f64::NAN]).is_err());
    }

    #[test]
    fn adjacency_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = pairing_edges(&[0.3, 1.7, 2.9, 0.01]).unwrap();
        let p = dir.path().join("adj.csv");
        a.write_csv(&p).unwrap();
        assert_eq!(Adjacency::read_csv(&p).unwrap(), a);
    }

    fn thickness_scaler() -> FeatureScaler {
        FeatureScaler::from_ranges([
            (
                MEAN_CURVATURE.to_string(),
                MetricRange { min: 0.0, max: 0.3 },
            ),
            (
                CORTICAL_THICKNESS.to_string(),
                MetricRange { min: 1.0, max: 4.0 },
            ),
        ])
        .unwrap()
    }

    #[test]
    fn constant_thickness_gives_empty_target() {
        let mut table = generate_synthetic_dataset(3, 1).unwrap();
        let mut groups = table.groups().to_vec();
        for g in &mut groups {
            g.metrics
                .insert(CORTICAL_THICKNESS.to_string(), vec![2.5; ROI_COUNT]);
        }
        table = CorticalTable::from_groups(table.metric_columns().to_vec(), groups).unwrap();
        let pair = build_graph_pair(
            &table,
            "sub-0002",
            Hemisphere::Rh,
            &MetricPair::default(),
            &thickness_scaler(),
        )
        .unwrap();
        assert!(pair.target.adjacency.as_slice().iter().all(|&e| e == 0.0));
        assert!(pair.target.scaled_nodes.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn pair_uses_raw_values_and_absolute_curvature() {
        let table = generate_synthetic_dataset(4, 9).unwrap();
        let group = table.group("sub-0003", Hemisphere::Lh).unwrap();
        let pair = build_graph_pair(
            &table,
            "sub-0003",
            Hemisphere::Lh,
            &MetricPair::default(),
            &thickness_scaler(),
        )
        .unwrap();
        let h = group.metric(CORTICAL_THICKNESS).unwrap();
        assert_eq!(pair.target.raw_nodes, h);
        // Edge (0, 1) by hand.
        let e = (h[0] - h[1]).abs() / (h[0] + h[1]);
        assert_eq!(pair.target.adjacency.get(0, 1), e);
        assert!(pair.source.raw_nodes.iter().all(|&c| c >= 0.0));
        for g in [&pair.source, &pair.target] {
            assert!(g.adjacency.is_symmetric_hollow());
            assert_eq!(g.node_count(), ROI_COUNT);
        }
    }

    #[test]
    fn training_subjects_scale_into_unit_interval() {
        let table = generate_synthetic_dataset(12, 5).unwrap();
        let subjects = table.subjects(Hemisphere::Lh);
        let train = &subjects[..8];
        let scaler = fit_scaler(
            &table,
            Hemisphere::Lh,
            train,
            &[MEAN_CURVATURE, CORTICAL_THICKNESS],
        )
        .unwrap();
        let pairs = build_dataset(
            &table,
            Hemisphere::Lh,
            train,
            &MetricPair::default(),
            &scaler,
        )
        .unwrap();
        let mut hit = (false, false);
        for p in &pairs {
            for &v in p.source.scaled_nodes.iter().chain(&p.target.scaled_nodes) {
                assert!((0.0..=1.0).contains(&v), "{v}");
                hit.0 |= v == 0.0;
                hit.1 |= v == 1.0;
            }
        }
        assert_eq!(hit, (true, true));
    }

    #[test]
    fn pair_errors() {
        let table = generate_synthetic_dataset(2, 1).unwrap();
        let scaler = thickness_scaler();
        let absent = build_graph_pair(
            &table,
            "sub-0042",
            Hemisphere::Lh,
            &MetricPair::default(),
            &scaler,
        );
        assert!(absent.is_err());
        let bogus = MetricPair {
            source: "sulcal_depth".into(),
            target: CORTICAL_THICKNESS.into(),
        };
        assert!(matches!(
            build_graph_pair(&table, "sub-0001", Hemisphere::Lh, &bogus, &scaler),
            Err(Error::UnknownMetric(_))
        ));
    }

    #[test]
    fn pair_is_deterministic() {
        let table = generate_synthetic_dataset(3, 2).unwrap();
        let before = table.clone();
        let build = || {
            build_graph_pair(
                &table,
                "sub-0001",
                Hemisphere::Rh,
                &MetricPair::default(),
                &thickness_scaler(),
            )
            .unwrap()
        };
        assert_eq!(build(), build());
        assert_eq!(table, before);
    }

    proptest::proptest! {
        #[test]
        fn pairing_is_symmetric_hollow_and_bounded(
            nodes in proptest::collection::vec(0.0f64..1e3, 1..40)
        ) {
            let a = pairing_edges(&nodes).unwrap();
            let n = nodes.len();
            for i in 0..n {
                proptest::prop_assert_eq!(a.get(i, i), 0.0);
                for j in 0..n {
                    proptest::prop_assert_eq!(a.get(i, j).to_bits(), a.get(j, i).to_bits());
                    proptest::prop_assert!((0.0..=1.0).contains(&a.get(i, j)));
                }
            }
        }

        #[test]
        fn pairing_is_scale_invariant(
            nodes in proptest::collection::vec(1e-3f64..1e3, 2..20),
            c in 1e-2f64..1e2,
        ) {
            let a = pairing_edges(&nodes).unwrap();
            let scaled: Vec<f64> = nodes.iter().map(|v| v * c).collect();
            let b = pairing_edges(&scaled).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                proptest::prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }
    }
}
