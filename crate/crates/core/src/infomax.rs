//! Donsker-Varadhan mutual-information estimation between a text's local
//! feature maps and its global representation.
//!
//! The critic concatenates the global vector onto every slot of a feature
//! map and scores each location with a shared MLP, which is the same as a
//! 1x1 convolution over the map. Real pairs use the text's own slots; fake
//! pairs use the slots of a different text from the same batch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::encoder::Dense;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureMode, LocalFeatureSet};
use crate::graph::{self, Graph, Var};
use crate::params::{Group, Mat, ParamId, ParameterStore};

fn default_hidden_units() -> usize {
    512
}

fn default_hidden_layers() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    #[serde(default = "default_hidden_units")]
    pub hidden_units: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            hidden_units: default_hidden_units(),
            hidden_layers: default_hidden_layers(),
        }
    }
}

/// How slot rows are fed to the critic.
#[derive(Clone, Debug)]
enum SlotInput {
    /// Slot vectors are used as-is.
    Dense,
    /// Each slot holds `segment_len` indices embedded through a lookup table.
    Indexed { table: ParamId, segment_len: usize },
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub slot_width: usize,
    pub global_width: usize,
    layers: Vec<Dense>,
    head: Dense,
    input: SlotInput,
}

impl Discriminator {
    /// Critic over dense slots of width `slot_width`.
    pub fn new<R: Rng>(
        config: DiscriminatorConfig,
        slot_width: usize,
        global_width: usize,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(config, slot_width, global_width, SlotInput::Dense, store, rng)
    }

    /// Critic matching a feature configuration. Segment mode registers its
    /// own index lookup table.
    pub fn for_features<R: Rng>(
        config: DiscriminatorConfig,
        features: &FeatureConfig,
        vocab_size: usize,
        embed_dim: usize,
        global_width: usize,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        features.validate()?;
        let input = match features.mode {
            FeatureMode::Word => SlotInput::Dense,
            FeatureMode::Segment => {
                let width = features.segment_embed_dim;
                let mut table = Mat::from_shape_fn((vocab_size, width), |_| rng.random_range(-1.0..1.0));
                table.row_mut(PAD).fill(0.0);
                let id = store.register("critic.segment_embedding", Group::Discriminator, table)?;
                SlotInput::Indexed {
                    table: id,
                    segment_len: features.d.ok_or(Error::MissingField("features.d"))?,
                }
            }
        };
        let slot_width = features.slot_width(embed_dim);
        Self::build(config, slot_width, global_width, input, store, rng)
    }

    fn build<R: Rng>(
        config: DiscriminatorConfig,
        slot_width: usize,
        global_width: usize,
        input: SlotInput,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        if config.hidden_units == 0 || config.hidden_layers == 0 || slot_width == 0 || global_width == 0 {
            return Err(Error::Config("critic dimensions must be positive".into()));
        }
        let d = Group::Discriminator;
        let mut layers = Vec::new();
        let mut width = slot_width + global_width;
        for l in 0..config.hidden_layers {
            layers.push(Dense::register(
                store,
                &format!("critic.hidden{l}"),
                d,
                width,
                config.hidden_units,
                rng,
            )?);
            width = config.hidden_units;
        }
        let head = Dense::register(store, "critic.score", d, width, 1, rng)?;
        Ok(Self {
            config,
            slot_width,
            global_width,
            layers,
            head,
            input,
        })
    }

    /// Rebinds to parameters already present in `store`.
    pub fn bind(
        config: DiscriminatorConfig,
        features: &FeatureConfig,
        vocab_size: usize,
        embed_dim: usize,
        global_width: usize,
        store: &ParameterStore,
    ) -> Result<Self> {
        let mut scratch = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = Self::for_features(
            config,
            features,
            vocab_size,
            embed_dim,
            global_width,
            &mut scratch,
            &mut rng,
        )?;
        let remap = |id: ParamId| -> Result<ParamId> {
            let name = &scratch.get(id).name;
            store
                .id(name)
                .filter(|&f| store.get(f).value.dim() == scratch.get(id).value.dim())
                .ok_or_else(|| Error::Corrupt(format!("missing or misshapen parameter `{name}`")))
        };
        let dense = |d: &Dense| -> Result<Dense> {
            Ok(Dense {
                weight: remap(d.weight)?,
                bias: remap(d.bias)?,
            })
        };
        Ok(Self {
            layers: template.layers.iter().map(dense).collect::<Result<_>>()?,
            head: dense(&template.head)?,
            input: match template.input {
                SlotInput::Dense => SlotInput::Dense,
                SlotInput::Indexed { table, segment_len } => SlotInput::Indexed {
                    table: remap(table)?,
                    segment_len,
                },
            },
            ..template
        })
    }

    /// Scores `n` (slot, global) rows; returns `n x 1`.
    pub fn score_rows(&self, g: &mut Graph, store: &ParameterStore, slots: Var, globals: Var) -> Result<Var> {
        if g.shape(slots).1 != self.slot_width || g.shape(globals).1 != self.global_width {
            return Err(Error::Shape(format!(
                "critic expects widths ({}, {}), got ({}, {})",
                self.slot_width,
                self.global_width,
                g.shape(slots).1,
                g.shape(globals).1
            )));
        }
        let mut h = g.concat_cols(&[slots, globals]);
        for layer in &self.layers {
            h = layer.forward_relu(g, store, h);
        }
        Ok(self.head.forward(g, store, h))
    }

    /// Slot rows for every non-padded location of a feature set.
    pub fn slot_rows(&self, g: &mut Graph, store: &ParameterStore, set: &LocalFeatureSet) -> Result<Var> {
        self.slot_rows_for(g, store, &[(set, None)])
    }

    /// Slot rows for several sets, each optionally cycled to a given length.
    fn slot_rows_for(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        sets: &[(&LocalFeatureSet, Option<usize>)],
    ) -> Result<Var> {
        match &self.input {
            SlotInput::Dense => {
                let mut rows: Vec<Mat> = Vec::new();
                for (set, len) in sets {
                    let m = set
                        .word_rows()
                        .ok_or_else(|| Error::Config("critic expects word-mode features".into()))?;
                    rows.push(cycle_rows(&m, len.unwrap_or(m.nrows())));
                }
                let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
                let stacked =
                    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
                if stacked.ncols() != self.slot_width {
                    return Err(Error::Shape(format!(
                        "slot width {} does not match critic width {}",
                        stacked.ncols(),
                        self.slot_width
                    )));
                }
                Ok(g.constant(stacked))
            }
            SlotInput::Indexed { table, segment_len } => {
                let mut segments: Vec<Vec<usize>> = Vec::new();
                for (set, len) in sets {
                    let segs = set
                        .segment_rows()
                        .ok_or_else(|| Error::Config("critic expects segment-mode features".into()))?;
                    let n = len.unwrap_or(segs.len());
                    segments.extend((0..n).map(|i| segs[i % segs.len()].clone()));
                }
                if segments.iter().any(|s| s.len() != *segment_len) {
                    return Err(Error::Shape("segment length does not match critic".into()));
                }
                let vocab = store.get(*table).value.nrows();
                let t = g.param(store, *table);
                let mut cols = Vec::with_capacity(*segment_len);
                for p in 0..*segment_len {
                    let idx = segments
                        .iter()
                        .map(|s| match s[p] {
                            PAD => Ok(None),
                            i if i < vocab => Ok(Some(i)),
                            i => Err(Error::IndexOutOfRange { index: i, size: vocab }),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    cols.push(g.gather(t, idx));
                }
                Ok(g.concat_cols(&cols))
            }
        }
    }

    /// Score of a single (slot, global) pair.
    pub fn score_location(&self, store: &ParameterStore, slot: &[f64], global: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let s = g.constant(Mat::from_shape_vec((1, slot.len()), slot.to_vec()).expect("row"));
        let r = g.constant(Mat::from_shape_vec((1, global.len()), global.to_vec()).expect("row"));
        let out = self.score_rows(&mut g, store, s, r)?;
        Ok(g.scalar_value(out))
    }

    /// Real and fake scores for one text against a negative text.
    pub fn batch_scores(
        &self,
        store: &ParameterStore,
        local: &LocalFeatureSet,
        global: &[f64],
        negative: &LocalFeatureSet,
    ) -> Result<MiBatchScores> {
        let mut g = Graph::new();
        let rep = g.constant(Mat::from_shape_vec((1, global.len()), global.to_vec()).expect("row"));
        let (joint, fake) = self.score_text(&mut g, store, local, negative, rep)?;
        let joint_scores: Vec<f64> = g.value(joint).iter().copied().collect();
        let marginal_scores: Vec<f64> = g.value(fake).iter().copied().collect();
        Ok(MiBatchScores {
            joint_mask: vec![true; joint_scores.len()],
            marginal_mask: vec![true; marginal_scores.len()],
            joint_scores,
            marginal_scores,
        })
    }

    /// Joint and marginal score columns for one text on the tape.
    fn score_text(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        local: &LocalFeatureSet,
        negative: &LocalFeatureSet,
        rep: Var,
    ) -> Result<(Var, Var)> {
        let n = local.locations().len();
        if n == 0 {
            return Err(Error::Empty("every location is padded"));
        }
        if negative.locations().is_empty() {
            return Err(Error::Empty("negative text has no locations"));
        }
        let slots = self.slot_rows_for(g, store, &[(local, None), (negative, Some(n))])?;
        let globals = g.repeat_row(rep, 2 * n);
        let scores = self.score_rows(g, store, slots, globals)?;
        let joint = g.rows(scores, 0, n);
        let fake = g.rows(scores, n, 2 * n);
        Ok((joint, fake))
    }

    /// Local DV objective for one text on the tape. Returns `(estimate, loss)`.
    pub fn local_mi_objective(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        local: &LocalFeatureSet,
        global_rep: Var,
        negative: &LocalFeatureSet,
    ) -> Result<(Var, Var)> {
        let (joint, fake) = self.score_text(g, store, local, negative, global_rep)?;
        let estimate = dv_on_tape(g, joint, fake);
        let loss = g.scale(estimate, -1.0);
        Ok((estimate, loss))
    }

    /// DV estimates for many texts scored in one critic pass. Entry `i`
    /// pairs `locals[i]` with `reps[i]`, and its negatives come from
    /// `locals[negatives[i]]`.
    pub fn batch_objective(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        locals: &[&LocalFeatureSet],
        reps: &[Var],
        negatives: &[usize],
    ) -> Result<Vec<Var>> {
        if locals.len() != reps.len() || locals.len() != negatives.len() {
            return Err(Error::Shape("mismatched batch lengths".into()));
        }
        let counts: Vec<usize> = locals.iter().map(|s| s.locations().len()).collect();
        if counts.contains(&0) {
            return Err(Error::Empty("every location is padded"));
        }
        let mut sets: Vec<(&LocalFeatureSet, Option<usize>)> = Vec::new();
        let mut globals = Vec::new();
        for (i, set) in locals.iter().enumerate() {
            sets.push((set, None));
            globals.push(g.repeat_row(reps[i], counts[i]));
        }
        for (i, &j) in negatives.iter().enumerate() {
            sets.push((locals[j], Some(counts[i])));
            globals.push(g.repeat_row(reps[i], counts[i]));
        }
        let slots = self.slot_rows_for(g, store, &sets)?;
        let globals = g.concat_rows(&globals);
        let scores = self.score_rows(g, store, slots, globals)?;
        let total: usize = counts.iter().sum();
        let mut joint_start = 0;
        let mut fake_start = total;
        let mut out = Vec::with_capacity(locals.len());
        for &c in &counts {
            let joint = g.rows(scores, joint_start, joint_start + c);
            let fake = g.rows(scores, fake_start, fake_start + c);
            out.push(dv_on_tape(g, joint, fake));
            joint_start += c;
            fake_start += c;
        }
        Ok(out)
    }

    /// Per-side MI losses for one text pair.
    #[allow(clippy::too_many_arguments)]
    pub fn mi_loss_for_pair(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        features_a: &LocalFeatureSet,
        rep_a: Var,
        features_b: &LocalFeatureSet,
        rep_b: Var,
        negative_a: &LocalFeatureSet,
        negative_b: &LocalFeatureSet,
    ) -> Result<MiLossVars> {
        let (dv_ts, loss_ts) = self.local_mi_objective(g, store, features_a, rep_a, negative_a)?;
        let (dv_tt, loss_tt) = self.local_mi_objective(g, store, features_b, rep_b, negative_b)?;
        let loss_m = g.add(loss_ts, loss_tt);
        Ok(MiLossVars {
            loss_ts,
            loss_tt,
            loss_m,
            dv_ts,
            dv_tt,
        })
    }
}

/// Repeats rows of `m` cyclically until there are `n`.
fn cycle_rows(m: &Mat, n: usize) -> Mat {
    Mat::from_shape_fn((n, m.ncols()), |(r, c)| m[[r % m.nrows(), c]])
}

fn dv_on_tape(g: &mut Graph, joint: Var, fake: Var) -> Var {
    let mean_joint = g.mean(joint);
    let lme = g.log_mean_exp(fake);
    g.sub(mean_joint, lme)
}

/// Per-location critic scores for real and fake pairings.
#[derive(Clone, Debug, PartialEq)]
pub struct MiBatchScores {
    pub joint_scores: Vec<f64>,
    pub joint_mask: Vec<bool>,
    pub marginal_scores: Vec<f64>,
    pub marginal_mask: Vec<bool>,
}

impl MiBatchScores {
    pub fn dv_lower_bound(&self) -> Result<f64> {
        dv_lower_bound(
            &self.joint_scores,
            &self.joint_mask,
            &self.marginal_scores,
            &self.marginal_mask,
        )
    }
}

/// Graph handles for [`Discriminator::mi_loss_for_pair`].
#[derive(Clone, Copy, Debug)]
pub struct MiLossVars {
    pub loss_ts: Var,
    pub loss_tt: Var,
    pub loss_m: Var,
    pub dv_ts: Var,
    pub dv_tt: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MiLoss {
    pub loss_ts: f64,
    pub loss_tt: f64,
    pub loss_m: f64,
    pub dv_estimate_ts: f64,
    pub dv_estimate_tt: f64,
}

impl MiLossVars {
    pub fn values(&self, g: &Graph) -> MiLoss {
        MiLoss {
            loss_ts: g.scalar_value(self.loss_ts),
            loss_tt: g.scalar_value(self.loss_tt),
            loss_m: g.scalar_value(self.loss_m),
            dv_estimate_ts: g.scalar_value(self.dv_ts),
            dv_estimate_tt: g.scalar_value(self.dv_tt),
        }
    }
}

/// `mean(joint) - log(mean(exp(marginal)))` over unmasked entries.
pub fn dv_lower_bound(joint: &[f64], joint_mask: &[bool], marginal: &[f64], marginal_mask: &[bool]) -> Result<f64> {
    let j: Vec<f64> = joint
        .iter()
        .zip(joint_mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    let mm: Vec<f64> = marginal
        .iter()
        .zip(marginal_mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if j.is_empty() || mm.is_empty() {
        return Err(Error::Empty("score set"));
    }
    let mean = j.iter().sum::<f64>() / j.len() as f64;
    Ok(mean - graph::log_mean_exp(mm.iter().copied()))
}

/// Uniformly random permutation of `0..n` without fixed points.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config(format!(
            "negative sampling needs at least 2 texts, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Seeded in-batch negative assignment.
pub fn sample_negatives(batch_size: usize, seed: u64) -> Result<Vec<usize>> {
    derangement(batch_size, &mut ChaCha8Rng::seed_from_u64(seed))
}
