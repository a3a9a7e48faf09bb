//! Cortical parcellation tables: one row per (subject, hemisphere, ROI).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cortical regions per hemisphere in the Desikan-Killiany atlas.
pub const ROI_COUNT: usize = 34;

pub const MEAN_CURVATURE: &str = "mean_curvature";
pub const CORTICAL_THICKNESS: &str = "cortical_thickness";

pub const DK_ROI_NAMES: [&str; ROI_COUNT] = [
    "bankssts",
    "caudalanteriorcingulate",
    "caudalmiddlefrontal",
    "cuneus",
    "entorhinal",
    "fusiform",
    "inferiorparietal",
    "inferiortemporal",
    "isthmuscingulate",
    "lateraloccipital",
    "lateralorbitofrontal",
    "lingual",
    "medialorbitofrontal",
    "middletemporal",
    "parahippocampal",
    "paracentral",
    "parsopercularis",
    "parsorbitalis",
    "parstriangularis",
    "pericalcarine",
    "postcentral",
    "posteriorcingulate",
    "precentral",
    "precuneus",
    "rostralanteriorcingulate",
    "rostralmiddlefrontal",
    "superiorfrontal",
    "superiorparietal",
    "superiortemporal",
    "supramarginal",
    "frontalpole",
    "temporalpole",
    "transversetemporal",
    "insula",
];

const KEY_COLUMNS: [&str; 4] = ["subject_id", "hemisphere", "roi_index", "roi_name"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Lh,
    Rh,
}

impl Hemisphere {
    pub fn as_str(self) -> &'static str {
        match self {
            Hemisphere::Lh => "lh",
            Hemisphere::Rh => "rh",
        }
    }
}

impl fmt::Display for Hemisphere {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Hemisphere {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lh" | "left" => Ok(Hemisphere::Lh),
            "rh" | "right" => Ok(Hemisphere::Rh),
            other => Err(Error::InvalidArgument(format!(
                "hemisphere must be lh or rh, got `{other}`"
            ))),
        }
    }
}

/// All 34 ROI rows of one subject's hemisphere.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGroup {
    pub subject_id: String,
    pub hemisphere: Hemisphere,
    pub roi_names: Vec<String>,
    /// Metric name to 34 values indexed by ROI.
    pub metrics: BTreeMap<String, Vec<f64>>,
}

impl RegionGroup {
    pub fn metric(&self, name: &str) -> Result<&[f64]> {
        self.metrics
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownMetric(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorticalTable {
    metric_columns: Vec<String>,
    groups: Vec<RegionGroup>,
}

struct PendingGroup {
    roi_names: Vec<Option<String>>,
    metrics: Vec<Vec<f64>>,
}

impl CorticalTable {
    /// Builds a table from complete groups. All groups must carry the same metrics.
    pub fn from_groups(metric_columns: Vec<String>, groups: Vec<RegionGroup>) -> Result<Self> {
        for g in &groups {
            if g.roi_names.len() != ROI_COUNT {
                return Err(Error::WrongRoiCount {
                    subject: g.subject_id.clone(),
                    hemisphere: g.hemisphere.to_string(),
                    count: g.roi_names.len(),
                    expected: ROI_COUNT,
                });
            }
            for m in &metric_columns {
                let values = g.metric(m)?;
                if values.len() != ROI_COUNT {
                    return Err(Error::WrongRoiCount {
                        subject: g.subject_id.clone(),
                        hemisphere: g.hemisphere.to_string(),
                        count: values.len(),
                        expected: ROI_COUNT,
                    });
                }
            }
        }
        Ok(CorticalTable {
            metric_columns,
            groups,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, &path.display().to_string())
    }

    pub fn from_reader<R: Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);

        let mut required = HashMap::new();
        for name in [
            "subject_id",
            "hemisphere",
            "roi_index",
            MEAN_CURVATURE,
            CORTICAL_THICKNESS,
        ] {
            let idx = col(name).ok_or_else(|| Error::MissingColumn {
                path: source.to_string(),
                column: name.to_string(),
            })?;
            required.insert(name, idx);
        }
        let name_col = col("roi_name");
        let mut metric_columns = vec![MEAN_CURVATURE.to_string(), CORTICAL_THICKNESS.to_string()];
        let mut metric_idx = vec![required[MEAN_CURVATURE], required[CORTICAL_THICKNESS]];
        for (i, h) in headers.iter().enumerate() {
            if !KEY_COLUMNS.contains(&h) && h != MEAN_CURVATURE && h != CORTICAL_THICKNESS {
                metric_columns.push(h.to_string());
                metric_idx.push(i);
            }
        }

        let mut order: Vec<(String, Hemisphere)> = Vec::new();
        let mut pending: HashMap<(String, Hemisphere), PendingGroup> = HashMap::new();

        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let field = |i: usize| record.get(i).unwrap_or("");
            let subject = field(required["subject_id"]).to_string();
            if subject.is_empty() {
                return Err(Error::MalformedRow {
                    line,
                    message: "empty subject_id".into(),
                });
            }
            let hemisphere: Hemisphere =
                field(required["hemisphere"])
                    .parse()
                    .map_err(|_| Error::MalformedRow {
                        line,
                        message: format!(
                            "subject {subject}: bad hemisphere `{}`",
                            field(required["hemisphere"])
                        ),
                    })?;
            let roi: usize = field(required["roi_index"])
                .parse()
                .ok()
                .filter(|r| *r < ROI_COUNT)
                .ok_or_else(|| Error::MalformedRow {
                    line,
                    message: format!(
                        "subject {subject}: roi_index `{}` not in 0..{}",
                        field(required["roi_index"]),
                        ROI_COUNT - 1
                    ),
                })?;

            let mut values = Vec::with_capacity(metric_idx.len());
            for (k, (&ci, name)) in metric_idx.iter().zip(&metric_columns).enumerate() {
                let raw = field(ci);
                let v = if raw.is_empty() && k >= 2 {
                    f64::NAN
                } else {
                    raw.parse::<f64>().map_err(|_| Error::MalformedRow {
                        line,
                        message: format!("subject {subject}: `{name}` is not a number: `{raw}`"),
                    })?
                };
                if k < 2 && !v.is_finite() {
                    return Err(Error::NonFiniteValue {
                        line,
                        subject,
                        column: name.clone(),
                    });
                }
                if k == 1 && v <= 0.0 {
                    return Err(Error::NonPositiveThickness {
                        line,
                        subject,
                        value: v,
                    });
                }
                values.push(v);
            }

            let key = (subject.clone(), hemisphere);
            let group = pending.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                PendingGroup {
                    roi_names: vec![None; ROI_COUNT],
                    metrics: vec![vec![f64::NAN; ROI_COUNT]; metric_columns.len()],
                }
            });
            if group.roi_names[roi].is_some() {
                return Err(Error::DuplicateRoi {
                    line,
                    subject,
                    hemisphere: hemisphere.to_string(),
                    roi,
                });
            }
            let name = name_col
                .map(|c| field(c).to_string())
                .filter(|n| !n.is_empty())
                .unwrap_or_else(|| DK_ROI_NAMES[roi].to_string());
            group.roi_names[roi] = Some(name);
            for (m, v) in values.into_iter().enumerate() {
                group.metrics[m][roi] = v;
            }
        }

        let mut groups = Vec::with_capacity(order.len());
        for key in order {
            let g = pending.remove(&key).expect("group recorded in order");
            let count = g.roi_names.iter().filter(|n| n.is_some()).count();
            if count != ROI_COUNT {
                return Err(Error::WrongRoiCount {
                    subject: key.0,
                    hemisphere: key.1.to_string(),
                    count,
                    expected: ROI_COUNT,
                });
            }
            groups.push(RegionGroup {
                subject_id: key.0,
                hemisphere: key.1,
                roi_names: g.roi_names.into_iter().map(Option::unwrap).collect(),
                metrics: metric_columns.iter().cloned().zip(g.metrics).collect(),
            });
        }
        Ok(CorticalTable {
            metric_columns,
            groups,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(std::io::BufWriter::new(file))
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = KEY_COLUMNS.to_vec();
        header.extend(self.metric_columns.iter().map(String::as_str));
        w.write_record(&header)?;
        for g in &self.groups {
            for roi in 0..ROI_COUNT {
                let mut row = vec![
                    g.subject_id.clone(),
                    g.hemisphere.to_string(),
                    roi.to_string(),
                    g.roi_names[roi].clone(),
                ];
                for m in &self.metric_columns {
                    let v = g.metrics[m][roi];
                    row.push(if v.is_nan() {
                        String::new()
                    } else {
                        v.to_string()
                    });
                }
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn metric_columns(&self) -> &[String] {
        &self.metric_columns
    }

    pub fn groups(&self) -> &[RegionGroup] {
        &self.groups
    }

    /// Subject ids that have the given hemisphere, in file order.
    pub fn subjects(&self, hemisphere: Hemisphere) -> Vec<String> {
        self.groups
            .iter()
            .filter(|g| g.hemisphere == hemisphere)
            .map(|g| g.subject_id.clone())
            .collect()
    }

    pub fn group(&self, subject: &str, hemisphere: Hemisphere) -> Result<&RegionGroup> {
        self.groups
            .iter()
            .find(|g| g.subject_id == subject && g.hemisphere == hemisphere)
            .ok_or_else(|| Error::SubjectNotFound {
                subject: subject.to_string(),
                hemisphere: hemisphere.to_string(),
            })
    }

    pub fn has_metric(&self, name: &str) -> bool {
        self.metric_columns.iter().any(|m| m == name)
    }
}
