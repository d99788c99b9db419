//! Local feature maps for one tokenized text.
//!
//! Word mode groups the text's word vectors into maps of `M` slots. Segment
//! mode cuts the index sequence into segments of `D` indices and groups `M`
//! segments per map. In both modes the final map is padded, and every
//! padded slot is flagged so the critic can skip it.

use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::params::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Word,
    Segment,
}

fn default_segment_embed_dim() -> usize {
    32
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub mode: FeatureMode,
    /// Slots per map.
    pub m: usize,
    /// Indices per segment; required in segment mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// Width of the critic's index lookup table in segment mode.
    #[serde(default = "default_segment_embed_dim")]
    pub segment_embed_dim: usize,
    /// Word mode reads vectors from the encoder's embedding table.
    #[serde(default = "default_true")]
    pub share_embeddings: bool,
}

impl FeatureConfig {
    pub fn word(m: usize) -> Self {
        Self {
            mode: FeatureMode::Word,
            m,
            d: None,
            segment_embed_dim: default_segment_embed_dim(),
            share_embeddings: true,
        }
    }

    pub fn segment(d: usize, m: usize) -> Self {
        Self {
            mode: FeatureMode::Segment,
            m,
            d: Some(d),
            segment_embed_dim: default_segment_embed_dim(),
            share_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("features.m must be at least 1".into()));
        }
        if self.segment_embed_dim == 0 {
            return Err(Error::Config("features.segment_embed_dim must be at least 1".into()));
        }
        match (self.mode, self.d) {
            (FeatureMode::Segment, None) => Err(Error::MissingField("features.d")),
            (FeatureMode::Segment, Some(0)) => Err(Error::Config("features.d must be at least 1".into())),
            _ => Ok(()),
        }
    }

    /// Width of one slot as seen by the critic.
    pub fn slot_width(&self, embed_dim: usize) -> usize {
        match self.mode {
            FeatureMode::Word => embed_dim,
            FeatureMode::Segment => self.d.unwrap_or(1) * self.segment_embed_dim,
        }
    }

    pub fn extract(&self, tokens: &[usize], embedding: &Mat) -> Result<LocalFeatureSet> {
        match self.mode {
            FeatureMode::Word => extract_word_mode(tokens, embedding, self.m),
            FeatureMode::Segment => {
                let d = self.d.ok_or(Error::MissingField("features.d"))?;
                extract_segment_mode(tokens, d, self.m)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MapContent {
    /// `M x embed_dim` word vectors.
    Word(Mat),
    /// `M` segments of `D` vocabulary indices.
    Segment(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub content: MapContent,
    /// True for zero-padded slots.
    pub padded: Vec<bool>,
}

impl FeatureMap {
    pub fn slots(&self) -> usize {
        self.padded.len()
    }

    pub fn slot_width(&self) -> usize {
        match &self.content {
            MapContent::Word(m) => m.ncols(),
            MapContent::Segment(s) => s.first().map_or(0, Vec::len),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatureSet {
    pub mode: FeatureMode,
    pub maps: Vec<FeatureMap>,
    /// Number of source units (tokens).
    pub source_len: usize,
}

impl LocalFeatureSet {
    pub fn num_maps(&self) -> usize {
        self.maps.len()
    }

    /// `(map, slot)` coordinates of every non-padded slot, in order.
    pub fn locations(&self) -> Vec<(usize, usize)> {
        self.maps
            .iter()
            .enumerate()
            .flat_map(|(k, m)| {
                m.padded
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| !p)
                    .map(move |(s, _)| (k, s))
            })
            .collect()
    }

    /// Non-padded word vectors stacked in order, `locations x embed_dim`.
    pub fn word_rows(&self) -> Option<Mat> {
        let locs = self.locations();
        let width = self.maps.first()?.slot_width();
        let mut out = Mat::zeros((locs.len(), width));
        for (i, &(k, s)) in locs.iter().enumerate() {
            let MapContent::Word(m) = &self.maps[k].content else {
                return None;
            };
            out.row_mut(i).assign(&m.row(s));
        }
        Some(out)
    }

    /// Non-padded segments in order.
    pub fn segment_rows(&self) -> Option<Vec<Vec<usize>>> {
        self.locations()
            .into_iter()
            .map(|(k, s)| match &self.maps[k].content {
                MapContent::Segment(seg) => Some(seg[s].clone()),
                MapContent::Word(_) => None,
            })
            .collect()
    }

    /// Segment-mode inverse: concatenated non-padded segments with the
    /// trailing pad indices removed.
    pub fn reconstruct_indices(&self) -> Option<Vec<usize>> {
        let mut out: Vec<usize> = self.segment_rows()?.into_iter().flatten().collect();
        out.truncate(self.source_len);
        Some(out)
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

pub fn extract_word_mode(tokens: &[usize], embedding: &Mat, m: usize) -> Result<LocalFeatureSet> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    if m == 0 {
        return Err(Error::Config("features.m must be at least 1".into()));
    }
    if m >= tokens.len() && tokens.len() > 1 {
        log::warn!(
            "M = {m} >= text length {}: the text collapses to a single feature map",
            tokens.len()
        );
    }
    let width = embedding.ncols();
    let maps = tokens
        .chunks(m)
        .map(|chunk| {
            let mut values = Mat::zeros((m, width));
            for (slot, &t) in chunk.iter().enumerate() {
                if t >= embedding.nrows() {
                    return Err(Error::IndexOutOfRange {
                        index: t,
                        size: embedding.nrows(),
                    });
                }
                values.row_mut(slot).assign(&embedding.row(t));
            }
            Ok(FeatureMap {
                content: MapContent::Word(values),
                padded: (0..m).map(|s| s >= chunk.len()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(maps.len(), ceil_div(tokens.len(), m));
    Ok(LocalFeatureSet {
        mode: FeatureMode::Word,
        maps,
        source_len: tokens.len(),
    })
}

pub fn extract_segment_mode(tokens: &[usize], d: usize, m: usize) -> Result<LocalFeatureSet> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    if d == 0 || m == 0 {
        return Err(Error::Config(
            "segment size and slots per map must be at least 1".into(),
        ));
    }
    let segments: Vec<Vec<usize>> = tokens
        .chunks(d)
        .map(|c| {
            let mut seg = c.to_vec();
            seg.resize(d, PAD);
            seg
        })
        .collect();
    let maps: Vec<FeatureMap> = segments
        .chunks(m)
        .map(|group| {
            let mut segs = group.to_vec();
            let real = segs.len();
            segs.resize(m, vec![PAD; d]);
            FeatureMap {
                content: MapContent::Segment(segs),
                padded: (0..m).map(|s| s >= real).collect(),
            }
        })
        .collect();
    debug_assert_eq!(maps.len(), ceil_div(ceil_div(tokens.len(), d), m));
    Ok(LocalFeatureSet {
        mode: FeatureMode::Segment,
        maps,
        source_len: tokens.len(),
    })
}

/// Row-major concatenation of a map's slots.
pub fn flatten_map(map: &FeatureMap) -> Vec<f64> {
    match &map.content {
        MapContent::Word(m) => m.iter().copied().collect(),
        MapContent::Segment(s) => s.iter().flatten().map(|&i| i as f64).collect(),
    }
}

/// Inverse of [`flatten_map`] for word maps.
pub fn unflatten_word_map(values: &[f64], slots: usize, padded: Vec<bool>) -> Result<FeatureMap> {
    if slots == 0 || !values.len().is_multiple_of(slots) || padded.len() != slots {
        return Err(Error::Shape(format!("{} values into {slots} slots", values.len())));
    }
    let mat =
        Mat::from_shape_vec((slots, values.len() / slots), values.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FeatureMap {
        content: MapContent::Word(mat),
        padded,
    })
}

#[derive(Serialize)]
struct SlotDump {
    map: usize,
    slot: usize,
    padded: bool,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct FeatureDump {
    mode: FeatureMode,
    num_maps: usize,
    slots_per_map: usize,
    source_len: usize,
    slots: Vec<SlotDump>,
}

/// Debug dump: one record per slot with its map index, padding flag and values.
pub fn to_json(set: &LocalFeatureSet) -> serde_json::Value {
    let mut slots = Vec::new();
    for (k, map) in set.maps.iter().enumerate() {
        let width = map.slot_width();
        let flat = flatten_map(map);
        for (s, &padded) in map.padded.iter().enumerate() {
            slots.push(SlotDump {
                map: k,
                slot: s,
                padded,
                values: flat[s * width..(s + 1) * width].to_vec(),
            });
        }
    }
    serde_json::to_value(FeatureDump {
        mode: set.mode,
        num_maps: set.maps.len(),
        slots_per_map: set.maps.first().map_or(0, FeatureMap::slots),
        source_len: set.source_len,
        slots,
    })
    .expect("feature dump serializes")
}
