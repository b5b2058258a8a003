//! Line-oriented dataset file.
//!
//! ```text
//! mtal-dataset  v=1  mode=landmark  m=5  pose=discrete  K=13  n=0  pose_scale=90  features=18  world=<hash>  seed=7
//! <feature floats…>  <label floats…>
//! ```
//!
//! Fields are tab-separated. Floats use Rust's shortest round-trip decimal
//! formatting, which does not depend on locale.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::labels::{LabelBundle, LabelLayout, PoseMode, TaskMode};
use crate::synthgen::{Dataset, Sample};

const MAGIC: &str = "mtal-dataset";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub layout: LabelLayout,
    pub feature_width: usize,
    pub world_hash: String,
    pub seed: u64,
}

impl DatasetHeader {
    fn render(&self) -> String {
        let l = &self.layout;
        let (mode, pose, k) = match (l.mode, l.pose) {
            (TaskMode::Landmark, PoseMode::Continuous) => ("landmark", "continuous", 3),
            (TaskMode::Landmark, PoseMode::Discrete { bins }) => ("landmark", "discrete", bins),
            (TaskMode::Attribute, _) => ("attribute", "none", 0),
        };
        format!(
            "{MAGIC}\tv=1\tmode={mode}\tm={}\tpose={pose}\tK={k}\tn={}\tpose_scale={}\tfeatures={}\tworld={}\tseed={}",
            l.landmarks, l.attributes, l.pose_scale_deg, self.feature_width, self.world_hash, self.seed
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let mut parts = line.split('\t');
        if parts.next() != Some(MAGIC) {
            return Err(Error::Format(format!("dataset header must start with '{MAGIC}'")));
        }
        let mut kv = BTreeMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed header field '{p}'")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("header lacks '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("header field '{k}' is not an integer")))
        };
        if get("v")? != "1" {
            return Err(Error::Format("unsupported dataset version".into()));
        }
        let mut layout = match get("mode")? {
            "landmark" => {
                let pose = match get("pose")? {
                    "continuous" => PoseMode::Continuous,
                    "discrete" => PoseMode::Discrete { bins: num("K")? },
                    other => return Err(Error::Format(format!("unknown pose mode '{other}'"))),
                };
                LabelLayout::landmark(num("m")?, pose)
            }
            "attribute" => LabelLayout::attribute(num("n")?),
            other => return Err(Error::Format(format!("unknown mode '{other}'"))),
        };
        layout.pose_scale_deg = get("pose_scale")?
            .parse()
            .map_err(|_| Error::Format("pose_scale is not a number".into()))?;
        layout.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(DatasetHeader {
            layout,
            feature_width: num("features")?,
            world_hash: get("world")?.to_string(),
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Format("seed is not an integer".into()))?,
        })
    }
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let header = DatasetHeader {
        layout: dataset.layout,
        feature_width: dataset.feature_width,
        world_hash: dataset.world_hash.clone(),
        seed: dataset.seed,
    };
    writeln!(out, "{}", header.render())?;
    let mut line = String::new();
    for s in &dataset.samples {
        line.clear();
        let labels = s.labels.to_row(&dataset.layout)?;
        for (i, v) in s.features.iter().chain(&labels).enumerate() {
            if i > 0 {
                line.push('\t');
            }
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines();
    let header = DatasetHeader::parse(
        &lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??,
    )?;
    let width = header.feature_width + header.layout.width();
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split('\t')
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("record {}: {e}", n + 1)))?;
        if vals.len() != width {
            return Err(Error::Format(format!(
                "record {}: expected {width} values, found {}",
                n + 1,
                vals.len()
            )));
        }
        let labels = LabelBundle::from_row(&header.layout, &vals[header.feature_width..])?;
        labels
            .validate_truth(&header.layout)
            .map_err(|e| Error::Format(format!("record {}: {e}", n + 1)))?;
        samples.push(Sample {
            features: vals[..header.feature_width].to_vec(),
            labels,
            latent: Vec::new(),
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("dataset file has no records".into()));
    }
    Ok(Dataset {
        layout: header.layout,
        feature_width: header.feature_width,
        samples,
        seed: header.seed,
        world_hash: header.world_hash,
    })
}
