//! Block-structured sequence-pair matching network.
//!
//! Each block runs convolutional encoding, cross alignment and fusion on
//! both texts. Blocks are wired with augmented residual connections and the
//! final block output is max-pooled and projected into the global
//! representation that feeds both the prediction head and the critic.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Group, Mat, ParamId, ParameterStore};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub conv_layers_per_block: usize,
    pub conv_kernel: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub symmetric_prediction: bool,
    /// One tower applied to both texts.
    #[serde(default = "default_true")]
    pub share_towers: bool,
    #[serde(default)]
    pub freeze_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2,
            embed_dim: 300,
            num_blocks: 2,
            conv_layers_per_block: 2,
            conv_kernel: 3,
            hidden_dim: 150,
            output_dim: 200,
            num_classes: 2,
            symmetric_prediction: false,
            share_towers: true,
            freeze_embeddings: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.vocab_size", self.vocab_size),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.hidden_dim", self.hidden_dim),
            ("encoder.output_dim", self.output_dim),
            ("encoder.num_classes", self.num_classes),
            ("encoder.conv_layers_per_block", self.conv_layers_per_block),
            ("encoder.num_blocks", self.num_blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("encoder.vocab_size must include pad and unk".into()));
        }
        if self.num_blocks > 3 || self.conv_layers_per_block > 3 {
            return Err(Error::Config(
                "encoder.num_blocks and encoder.conv_layers_per_block must be at most 3".into(),
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("encoder.conv_kernel must be odd".into()));
        }
        Ok(())
    }

    /// Width of the sequence entering block `n`.
    pub fn block_input_width(&self, n: usize) -> usize {
        if n == 0 {
            self.embed_dim
        } else {
            self.embed_dim + self.hidden_dim
        }
    }
}

/// Affine layer `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        group: Group,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.register_uniform(&format!("{name}.weight"), group, (input, output), rng)?,
            bias: store.register_zeros(&format!("{name}.bias"), group, (1, output))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn forward_relu(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Var {
        let y = self.forward(g, store, x);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    convs: Vec<Dense>,
    /// Branches over `[o, a]`, `[o, o - a]`, `[o, o * a]`, then the merge.
    fuse: [Dense; 4],
}

#[derive(Clone, Debug)]
struct Tower {
    blocks: Vec<BlockParams>,
    pool: Dense,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    towers: Vec<Tower>,
    align: Vec<Dense>,
    head_hidden: Dense,
    head_out: Dense,
}

/// Outputs of [`Encoder::forward_pair`].
#[derive(Clone, Copy, Debug)]
pub struct PairOutput {
    pub rep_a: Var,
    pub rep_b: Var,
    pub scores: Var,
}

/// Which tower processes a text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

impl Encoder {
    pub fn new<R: Rng>(config: EncoderConfig, store: &mut ParameterStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let e = Group::Encoder;
        let scale = 1.0 / (config.embed_dim as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("positive scale");
        let mut table = Mat::from_shape_fn((config.vocab_size, config.embed_dim), |_| normal.sample(rng));
        table.row_mut(PAD).fill(0.0);
        let embedding = store.register("embedding", e, table)?;
        if config.freeze_embeddings {
            store.set_trainable(embedding, false);
        }

        let h = config.hidden_dim;
        let prefixes: &[&str] = if config.share_towers {
            &["encoder"]
        } else {
            &["tower_a", "tower_b"]
        };
        let mut towers = Vec::new();
        for prefix in prefixes {
            let mut blocks = Vec::new();
            for n in 0..config.num_blocks {
                let in_w = config.block_input_width(n);
                let mut convs = Vec::new();
                for l in 0..config.conv_layers_per_block {
                    let cin = if l == 0 { in_w } else { h };
                    convs.push(Dense::register(
                        store,
                        &format!("{prefix}.block{n}.conv{l}"),
                        e,
                        cin * config.conv_kernel,
                        h,
                        rng,
                    )?);
                }
                let ow = in_w + h;
                let fuse = [
                    Dense::register(store, &format!("{prefix}.block{n}.fuse_concat"), e, 2 * ow, h, rng)?,
                    Dense::register(store, &format!("{prefix}.block{n}.fuse_diff"), e, 2 * ow, h, rng)?,
                    Dense::register(store, &format!("{prefix}.block{n}.fuse_prod"), e, 2 * ow, h, rng)?,
                    Dense::register(store, &format!("{prefix}.block{n}.fuse_merge"), e, 3 * h, h, rng)?,
                ];
                blocks.push(BlockParams { convs, fuse });
            }
            let pool = Dense::register(store, &format!("{prefix}.pool"), e, h, config.output_dim, rng)?;
            towers.push(Tower { blocks, pool });
        }
        let mut align = Vec::new();
        for n in 0..config.num_blocks {
            let ow = config.block_input_width(n) + h;
            align.push(Dense::register(store, &format!("block{n}.align"), e, ow, h, rng)?);
        }
        let head_in = if config.symmetric_prediction { 3 } else { 4 } * config.output_dim;
        let head_hidden = Dense::register(store, "head.hidden", e, head_in, h, rng)?;
        let head_out = Dense::register(store, "head.out", e, h, config.num_classes, rng)?;
        Ok(Self {
            config,
            embedding,
            towers,
            align,
            head_hidden,
            head_out,
        })
    }

    /// Rebinds parameter handles by name against an existing store.
    pub fn bind(config: EncoderConfig, store: &ParameterStore) -> Result<Self> {
        let mut scratch = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = Encoder::new(config, &mut scratch, &mut rng)?;
        let remap = |id: ParamId| -> Result<ParamId> {
            let p = scratch.get(id);
            let found = store
                .id(&p.name)
                .ok_or_else(|| Error::Corrupt(format!("missing parameter `{}`", p.name)))?;
            if store.get(found).value.dim() != p.value.dim() {
                return Err(Error::Shape(format!("parameter `{}` has the wrong shape", p.name)));
            }
            Ok(found)
        };
        let dense = |d: Dense| -> Result<Dense> {
            Ok(Dense {
                weight: remap(d.weight)?,
                bias: remap(d.bias)?,
            })
        };
        let mut towers = Vec::new();
        for t in &template.towers {
            let mut blocks = Vec::new();
            for b in &t.blocks {
                blocks.push(BlockParams {
                    convs: b.convs.iter().map(|&c| dense(c)).collect::<Result<_>>()?,
                    fuse: [
                        dense(b.fuse[0])?,
                        dense(b.fuse[1])?,
                        dense(b.fuse[2])?,
                        dense(b.fuse[3])?,
                    ],
                });
            }
            towers.push(Tower {
                blocks,
                pool: dense(t.pool)?,
            });
        }
        Ok(Self {
            embedding: remap(template.embedding)?,
            align: template.align.iter().map(|&d| dense(d)).collect::<Result<_>>()?,
            head_hidden: dense(template.head_hidden)?,
            head_out: dense(template.head_out)?,
            towers,
            config: template.config,
        })
    }

    fn tower(&self, side: Side) -> &Tower {
        match side {
            Side::B if self.towers.len() > 1 => &self.towers[1],
            _ => &self.towers[0],
        }
    }

    /// Embedding lookup; padded positions yield zero vectors.
    pub fn embed(&self, g: &mut Graph, store: &ParameterStore, indices: &[usize], mask: &[bool]) -> Result<Var> {
        let rows = indices
            .iter()
            .zip(mask)
            .map(|(&i, &m)| {
                if i >= self.config.vocab_size {
                    Err(Error::IndexOutOfRange {
                        index: i,
                        size: self.config.vocab_size,
                    })
                } else {
                    Ok((m && i != PAD).then_some(i))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let table = g.param(store, self.embedding);
        Ok(g.gather(table, rows))
    }

    /// Same-length 1-d convolutions with rectifier, re-masking after each layer.
    pub fn conv_encode(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        side: Side,
        block: usize,
        x: Var,
        mask: &[bool],
    ) -> Var {
        let half = (self.config.conv_kernel / 2) as isize;
        let mut h = x;
        for conv in &self.tower(side).blocks[block].convs {
            let taps: Vec<Var> = (-half..=half).map(|o| g.shift(h, o)).collect();
            let window = g.concat_cols(&taps);
            let y = conv.forward_relu(g, store, window);
            h = g.mask_rows(y, mask);
        }
        h
    }

    /// Soft alignment of two sequences through a shared projection.
    #[allow(clippy::too_many_arguments)]
    pub fn align(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        block: usize,
        a: Var,
        b: Var,
        mask_a: &[bool],
        mask_b: &[bool],
    ) -> Result<(Var, Var)> {
        if !mask_a.iter().any(|&m| m) || !mask_b.iter().any(|&m| m) {
            return Err(Error::Empty("alignment input is fully masked"));
        }
        let proj = self.align[block];
        let fa = proj.forward_relu(g, store, a);
        let fb = proj.forward_relu(g, store, b);
        let sim = g.matmul_t(fa, fb);
        let wa = g.softmax_rows(sim, mask_b);
        let att_a = g.matmul(wa, b);
        let sim_t = g.transpose(sim);
        let wb = g.softmax_rows(sim_t, mask_a);
        let att_b = g.matmul(wb, a);
        let att_a = g.mask_rows(att_a, mask_a);
        let att_b = g.mask_rows(att_b, mask_b);
        Ok((att_a, att_b))
    }

    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        side: Side,
        block: usize,
        original: Var,
        attended: Var,
    ) -> Var {
        let [cat, diff, prod, merge] = self.tower(side).blocks[block].fuse;
        let delta = g.sub(original, attended);
        let product = g.mul(original, attended);
        let x1 = g.concat_cols(&[original, attended]);
        let x2 = g.concat_cols(&[original, delta]);
        let x3 = g.concat_cols(&[original, product]);
        let h1 = cat.forward_relu(g, store, x1);
        let h2 = diff.forward_relu(g, store, x2);
        let h3 = prod.forward_relu(g, store, x3);
        let h = g.concat_cols(&[h1, h2, h3]);
        merge.forward_relu(g, store, h)
    }

    /// Max over unmasked positions followed by a linear projection.
    pub fn pool(&self, g: &mut Graph, store: &ParameterStore, side: Side, seq: Var, mask: &[bool]) -> Result<Var> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::Empty("pooling input is fully masked"));
        }
        let pooled = g.max_rows(seq, mask);
        Ok(self.tower(side).pool.forward(g, store, pooled))
    }

    /// Class scores for row-stacked representation pairs. The symmetric
    /// head sees `[a + b, |a - b|, a * b]`, every term of which commutes.
    pub fn predict(&self, g: &mut Graph, store: &ParameterStore, rep_a: Var, rep_b: Var) -> Var {
        let diff = g.sub(rep_a, rep_b);
        let prod = g.mul(rep_a, rep_b);
        let features = if self.config.symmetric_prediction {
            let sum = g.add(rep_a, rep_b);
            let dist = g.abs(diff);
            g.concat_cols(&[sum, dist, prod])
        } else {
            g.concat_cols(&[rep_a, rep_b, diff, prod])
        };
        let h = self.head_hidden.forward_relu(g, store, features);
        self.head_out.forward(g, store, h)
    }

    /// Full pair forward pass. Padding tokens anywhere in the inputs are
    /// removed before encoding.
    pub fn forward_pair(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        tokens_a: &[usize],
        tokens_b: &[usize],
    ) -> Result<PairOutput> {
        let (rep_a, rep_b) = self.encode_pair(g, store, tokens_a, tokens_b)?;
        let scores = self.predict(g, store, rep_a, rep_b);
        Ok(PairOutput { rep_a, rep_b, scores })
    }

    /// Global representations of both texts.
    pub fn encode_pair(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        tokens_a: &[usize],
        tokens_b: &[usize],
    ) -> Result<(Var, Var)> {
        let a: Vec<usize> = tokens_a.iter().copied().filter(|&t| t != PAD).collect();
        let b: Vec<usize> = tokens_b.iter().copied().filter(|&t| t != PAD).collect();
        if a.is_empty() || b.is_empty() {
            return Err(Error::Empty("text has no tokens"));
        }
        let mask_a = vec![true; a.len()];
        let mask_b = vec![true; b.len()];
        let emb_a = self.embed(g, store, &a, &mask_a)?;
        let emb_b = self.embed(g, store, &b, &mask_b)?;
        let mut outs_a: Vec<Var> = Vec::new();
        let mut outs_b: Vec<Var> = Vec::new();
        for n in 0..self.config.num_blocks {
            let in_a = augmented_residual(g, n, emb_a, &outs_a);
            let in_b = augmented_residual(g, n, emb_b, &outs_b);
            let enc_a = self.conv_encode(g, store, Side::A, n, in_a, &mask_a);
            let enc_b = self.conv_encode(g, store, Side::B, n, in_b, &mask_b);
            let orig_a = g.concat_cols(&[in_a, enc_a]);
            let orig_b = g.concat_cols(&[in_b, enc_b]);
            let (att_a, att_b) = self.align(g, store, n, orig_a, orig_b, &mask_a, &mask_b)?;
            outs_a.push(self.fuse(g, store, Side::A, n, orig_a, att_a));
            outs_b.push(self.fuse(g, store, Side::B, n, orig_b, att_b));
        }
        let last_a = *outs_a.last().expect("at least one block");
        let last_b = *outs_b.last().expect("at least one block");
        let rep_a = self.pool(g, store, Side::A, last_a, &mask_a)?;
        let rep_b = self.pool(g, store, Side::B, last_b, &mask_b)?;
        Ok((rep_a, rep_b))
    }
}

/// Input of block `n`: the raw embeddings for the first block, then the
/// embeddings concatenated with the previous output, and from the third
/// block on with the sum of the two previous outputs.
pub fn augmented_residual(g: &mut Graph, block: usize, embedding_out: Var, prev_outputs: &[Var]) -> Var {
    match block {
        0 => embedding_out,
        1 => g.concat_cols(&[embedding_out, prev_outputs[0]]),
        n => {
            let sum = g.add(prev_outputs[n - 1], prev_outputs[n - 2]);
            g.concat_cols(&[embedding_out, sum])
        }
    }
}

/// Reads whitespace-separated text vectors (`token v1 v2 ...`) into rows of
/// an embedding table. Tokens missing from the file keep their current row.
pub fn load_text_vectors(path: &Path, vocab: &Vocabulary, table: &mut Mat) -> Result<usize> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dim = table.ncols();
    let mut hits = 0;
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let Some(row) = vocab.get(token).filter(|&i| i != PAD) else {
            continue;
        };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Line {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Line {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        for (c, v) in values.into_iter().enumerate() {
            table[[row, c]] = v;
        }
        hits += 1;
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(blocks: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            embed_dim: 4,
            num_blocks: blocks,
            conv_layers_per_block: 2,
            conv_kernel: 3,
            hidden_dim: 5,
            output_dim: 3,
            num_classes: 3,
            symmetric_prediction: false,
            share_towers: true,
            freeze_embeddings: false,
        }
    }

    fn build(cfg: EncoderConfig) -> (Encoder, ParameterStore) {
        let mut store = ParameterStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (enc, store)
    }

    #[test]
    fn embedding_pads_to_zero() {
        let (enc, store) = build(tiny(1));
        let mut g = Graph::new();
        let v = enc
            .embed(&mut g, &store, &[3, 0, 3, 7], &[true, true, true, false])
            .unwrap();
        let m = g.value(v);
        assert_eq!(m.ncols(), 4);
        assert!(m.row(1).iter().all(|&x| x == 0.0));
        assert!(m.row(3).iter().all(|&x| x == 0.0));
        assert_eq!(m.row(0), m.row(2));
        assert!(enc.embed(&mut g, &store, &[12], &[true]).is_err());
    }

    #[test]
    fn conv_keeps_length_and_mask() {
        let (enc, store) = build(tiny(1));
        let mut g = Graph::new();
        let x = enc.embed(&mut g, &store, &[4], &[true]).unwrap();
        let y = enc.conv_encode(&mut g, &store, Side::A, 0, x, &[true]);
        assert_eq!(g.shape(y), (1, 5));

        let mask = [true, true, false, false];
        let x = enc.embed(&mut g, &store, &[4, 5, 0, 0], &mask).unwrap();
        let y = enc.conv_encode(&mut g, &store, Side::A, 0, x, &mask);
        assert!(g
            .value(y)
            .rows()
            .into_iter()
            .skip(2)
            .all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_element_alignment_copies_it() {
        let (enc, store) = build(tiny(1));
        let mut g = Graph::new();
        let a = g.constant(Mat::from_shape_fn((3, 9), |(r, c)| (r + c) as f64 * 0.1));
        let b = g.constant(Mat::from_shape_fn((1, 9), |(_, c)| c as f64 - 4.0));
        let (att_a, _) = enc.align(&mut g, &store, 0, a, b, &[true; 3], &[true]).unwrap();
        for row in g.value(att_a).rows() {
            assert_eq!(row, g.value(b).row(0));
        }
    }

    #[test]
    fn masked_positions_get_no_attention() {
        let (enc, store) = build(tiny(1));
        let mut g = Graph::new();
        let a = g.constant(Mat::from_shape_fn((2, 9), |(r, c)| (r * 3 + c) as f64 * 0.05));
        let mut bm = Mat::from_shape_fn((3, 9), |(r, c)| ((r + 1) * c) as f64 * 0.07);
        let b = g.constant(bm.clone());
        let (att, _) = enc
            .align(&mut g, &store, 0, a, b, &[true; 2], &[true, true, false])
            .unwrap();
        let before = g.value(att).clone();
        bm.row_mut(2).fill(1e6);
        let b2 = g.constant(bm);
        let (att2, _) = enc
            .align(&mut g, &store, 0, a, b2, &[true; 2], &[true, true, false])
            .unwrap();
        assert_eq!(&before, g.value(att2));
        assert!(enc.align(&mut g, &store, 0, a, b, &[true; 2], &[false; 3]).is_err());
    }

    #[test]
    fn alignment_is_invariant_to_permuting_b() {
        let (enc, store) = build(tiny(1));
        let mut g = Graph::new();
        let a = g.constant(Mat::from_shape_fn((3, 9), |(r, c)| {
            ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.5
        }));
        let bm = Mat::from_shape_fn((4, 9), |(r, c)| ((r * 5 + c * 2) % 7) as f64 * 0.2 - 0.4);
        let perm = [2, 0, 3, 1];
        let pm = Mat::from_shape_fn((4, 9), |(r, c)| bm[[perm[r], c]]);
        let b = g.constant(bm);
        let bp = g.constant(pm);
        let (x, _) = enc.align(&mut g, &store, 0, a, b, &[true; 3], &[true; 4]).unwrap();
        let (y, _) = enc.align(&mut g, &store, 0, a, bp, &[true; 3], &[true; 4]).unwrap();
        let diff = (g.value(x) - g.value(y)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn fuse_shapes_and_zero_delta() {
        let (enc, store) = build(tiny(1));
        let mut g = Graph::new();
        let o = g.constant(Mat::from_elem((2, 9), 0.3));
        let out = enc.fuse(&mut g, &store, Side::A, 0, o, o);
        assert_eq!(g.shape(out), (2, 5));
        let delta = g.sub(o, o);
        assert!(g.value(delta).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn augmented_residual_wiring() {
        let mut g = Graph::new();
        let emb = g.constant(Mat::from_elem((2, 4), 1.0));
        assert_eq!(augmented_residual(&mut g, 0, emb, &[]), emb);
        let o = g.constant(Mat::from_elem((2, 5), 0.5));
        let in1 = augmented_residual(&mut g, 1, emb, &[o]);
        assert_eq!(g.shape(in1), (2, 9));
        let in2 = augmented_residual(&mut g, 2, emb, &[o, o]);
        assert_eq!(g.shape(in2), (2, 9));
        assert!(g.value(in2).row(0).iter().skip(4).all(|&v| v == 1.0));
    }

    #[test]
    fn pool_of_single_position_and_duplicates() {
        let (enc, store) = build(tiny(1));
        let mut g = Graph::new();
        let x = g.constant(Mat::from_shape_fn((1, 5), |(_, c)| c as f64));
        let rep = enc.pool(&mut g, &store, Side::A, x, &[true]).unwrap();
        let direct = enc.tower(Side::A).pool.forward(&mut g, &store, x);
        assert_eq!(g.value(rep), g.value(direct));

        let y = g.constant(Mat::from_shape_fn((3, 5), |(r, c)| (r * c) as f64 - 2.0));
        let dup = g.constant(Mat::from_shape_fn((4, 5), |(r, c)| (r.min(2) * c) as f64 - 2.0));
        let p1 = g.max_rows(y, &[true; 3]);
        let p2 = g.max_rows(dup, &[true; 4]);
        assert_eq!(g.value(p1), g.value(p2));
        assert!(enc.pool(&mut g, &store, Side::A, y, &[false; 3]).is_err());
    }

    #[test]
    fn default_output_width() {
        let cfg = EncoderConfig {
            vocab_size: 6,
            embed_dim: 8,
            hidden_dim: 6,
            ..EncoderConfig::default()
        };
        let (enc, store) = build(cfg);
        let mut g = Graph::new();
        let out = enc.forward_pair(&mut g, &store, &[2, 3], &[4]).unwrap();
        assert_eq!(g.shape(out.rep_a), (1, 200));
        assert_eq!(g.shape(out.scores), (1, 2));
    }

    #[test]
    fn symmetric_head_is_order_invariant() {
        let mut cfg = tiny(2);
        cfg.symmetric_prediction = true;
        let (enc, store) = build(cfg);
        let mut g = Graph::new();
        let a = g.constant(Mat::from_shape_fn((1, 3), |(_, c)| c as f64 - 0.7));
        let b = g.constant(Mat::from_shape_fn((1, 3), |(_, c)| 0.4 * c as f64));
        let ab = enc.predict(&mut g, &store, a, b);
        let ba = enc.predict(&mut g, &store, b, a);
        assert_eq!(g.value(ab), g.value(ba));
        assert_eq!(g.shape(ab), (1, 3));
    }

    #[test]
    fn swapping_inputs_swaps_representations() {
        let (enc, store) = build(tiny(3));
        let mut g = Graph::new();
        let x = enc.forward_pair(&mut g, &store, &[2, 3, 4], &[5, 6]).unwrap();
        let y = enc.forward_pair(&mut g, &store, &[5, 6], &[2, 3, 4]).unwrap();
        assert_eq!(g.value(x.rep_a), g.value(y.rep_b));
        assert_eq!(g.value(x.rep_b), g.value(y.rep_a));
    }

    #[test]
    fn padding_never_changes_scores() {
        let (enc, store) = build(tiny(2));
        let mut g = Graph::new();
        let x = enc.forward_pair(&mut g, &store, &[2, 3, 4], &[5, 6]).unwrap();
        let y = enc.forward_pair(&mut g, &store, &[2, 3, 4, 0, 0], &[5, 6, 0]).unwrap();
        assert_eq!(g.value(x.scores), g.value(y.scores));
    }

    #[test]
    fn doubling_blocks_changes_only_block_parameters() {
        let (_, s1) = build(tiny(1));
        let (_, s2) = build(tiny(2));
        let non_block = |s: &ParameterStore| -> usize {
            s.iter()
                .filter(|(_, p)| !p.name.contains("block"))
                .map(|(_, p)| p.value.len())
                .sum()
        };
        assert_eq!(non_block(&s1), non_block(&s2));
        assert!(s2.count(None) > s1.count(None));
    }

    #[test]
    fn unshared_towers_register_two_sets() {
        let mut cfg = tiny(1);
        cfg.share_towers = false;
        let (enc, store) = build(cfg);
        assert!(store.id("tower_a.pool.weight").is_some());
        assert!(store.id("tower_b.pool.weight").is_some());
        let mut g = Graph::new();
        let out = enc.forward_pair(&mut g, &store, &[2], &[2]).unwrap();
        assert_ne!(g.value(out.rep_a), g.value(out.rep_b));
    }

    #[test]
    fn bind_recovers_handles() {
        let (enc, store) = build(tiny(2));
        let bound = Encoder::bind(enc.config.clone(), &store).unwrap();
        let mut g = Graph::new();
        let x = enc.forward_pair(&mut g, &store, &[2, 3], &[4]).unwrap();
        let y = bound.forward_pair(&mut g, &store, &[2, 3], &[4]).unwrap();
        assert_eq!(g.value(x.scores), g.value(y.scores));
    }
}
