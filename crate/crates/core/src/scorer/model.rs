//! Attention-based score network.
//!
//! Per-joint tokens (projected UVD + matched observation features) pass
//! through `B` blocks of self-attention, cross-attention over the observation
//! tokens, and a feed-forward layer (post-norm residuals throughout); a small
//! decoder MLP maps the mean-pooled token to one raw score per candidate.
//! Candidates never see each other: a score is a function of one candidate
//! and the observation only.

use super::ScorerInput;
use crate::rng::stream;
use crate::tensor::{ParameterSet, Tape, Tensor, Var};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerConfig {
    pub joint_count: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            joint_count: 16,
            width: 64,
            blocks: 2,
            heads: 4,
            ffn_hidden: 128,
        }
    }
}

impl ScorerConfig {
    /// uvd (3) + local observation token (4)
    pub fn joint_feature_dim(&self) -> usize {
        7
    }

    pub fn head_dim(&self) -> usize {
        assert_eq!(self.width % self.heads, 0, "width must divide into heads");
        self.width / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct ScorerModel {
    pub config: ScorerConfig,
    pub params: ParameterSet,
}

const LN_EPS: f64 = 1e-6;

impl ScorerModel {
    pub fn new(config: ScorerConfig, seed: u64) -> Self {
        let mut rng = stream(seed, "model-init/scorer", &[]);
        let mut p = ParameterSet::new();
        let c = config.width;
        let jf = config.joint_feature_dim();
        let td = crate::tokens::token_dim(config.joint_count);

        p.init_linear("joint.l1.w", jf, c, &mut rng);
        p.init_zeros("joint.l1.b", vec![c]);
        p.init_linear("joint.l2.w", c, c, &mut rng);
        p.init_zeros("joint.l2.b", vec![c]);
        p.init_uniform("joint.pos", vec![config.joint_count, c], &mut rng);

        p.init_linear("obs.embed.w", td, c, &mut rng);
        p.init_zeros("obs.embed.b", vec![c]);
        p.init_uniform("obs.mask", vec![1, c], &mut rng);
        p.init_uniform("obs.pos", vec![config.joint_count, c], &mut rng);

        for b in 0..config.blocks {
            for unit in ["attn", "cross"] {
                for proj in ["wq", "wk", "wv", "wo"] {
                    p.init_linear(&format!("blk{b}.{unit}.{proj}"), c, c, &mut rng);
                }
                for bias in ["bq", "bk", "bv", "bo"] {
                    p.init_zeros(&format!("blk{b}.{unit}.{bias}"), vec![c]);
                }
            }
            p.init_linear(&format!("blk{b}.ffn.w1"), c, config.ffn_hidden, &mut rng);
            p.init_zeros(&format!("blk{b}.ffn.b1"), vec![config.ffn_hidden]);
            p.init_linear(&format!("blk{b}.ffn.w2"), config.ffn_hidden, c, &mut rng);
            p.init_zeros(&format!("blk{b}.ffn.b2"), vec![c]);
            for ln in 1..=3 {
                p.init_ones(&format!("blk{b}.ln{ln}.g"), c);
                p.init_zeros(&format!("blk{b}.ln{ln}.b"), vec![c]);
            }
        }

        p.init_linear("dec.l1.w", c, c, &mut rng);
        p.init_zeros("dec.l1.b", vec![c]);
        p.init_linear("dec.l2.w", c, 1, &mut rng);
        p.init_zeros("dec.l2.b", vec![1]);
        ScorerModel { config, params: p }
    }

    fn attention(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        prefix: &str,
        queries_in: Var,
        keys_in: Var,
    ) -> Var {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = tape.matmul(queries_in, vars[&format!("{prefix}.wq")]);
        let q = tape.add_bias_row(q, vars[&format!("{prefix}.bq")]);
        let k = tape.matmul(keys_in, vars[&format!("{prefix}.wk")]);
        let k = tape.add_bias_row(k, vars[&format!("{prefix}.bk")]);
        let v = tape.matmul(keys_in, vars[&format!("{prefix}.wv")]);
        let v = tape.add_bias_row(v, vars[&format!("{prefix}.bv")]);

        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scalar_mul(scores, scale);
            let attn = tape.softmax(scores, 1);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&heads);
        let out = tape.matmul(merged, vars[&format!("{prefix}.wo")]);
        tape.add_bias_row(out, vars[&format!("{prefix}.bo")])
    }

    fn residual_norm(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        ln: &str,
        x: Var,
        delta: Var,
    ) -> Var {
        let sum = tape.add(x, delta);
        tape.layernorm(
            sum,
            vars[&format!("{ln}.g")],
            vars[&format!("{ln}.b")],
            LN_EPS,
        )
    }

    /// Raw score of one candidate as a `[1, 1]` node on the tape.
    pub fn score_tape(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        input: &ScorerInput,
    ) -> Var {
        let j = self.config.joint_count;
        assert_eq!(input.uvd.len(), j, "candidate joint count");

        // per-joint features: image-normalized uvd + local observation token
        let jf = self.config.joint_feature_dim();
        let [img_w, img_h] = input.image_size_px;
        let mut feat = vec![0.0; j * jf];
        for jid in 0..j {
            let row = &mut feat[jid * jf..(jid + 1) * jf];
            row[0] = input.uvd[jid][0] / img_w;
            row[1] = input.uvd[jid][1] / img_h;
            row[2] = input.uvd[jid][2];
            row[3..7].copy_from_slice(&input.local_obs[jid]);
        }
        let feats = tape.leaf_const(Tensor::new(vec![j, jf], feat));

        let h = tape.matmul(feats, vars["joint.l1.w"]);
        let h = tape.add_bias_row(h, vars["joint.l1.b"]);
        let h = tape.relu(h);
        let h = tape.matmul(h, vars["joint.l2.w"]);
        let h = tape.add_bias_row(h, vars["joint.l2.b"]);
        let mut x = tape.add(h, vars["joint.pos"]);

        // observation tokens for cross-attention
        let obs_feats = tape.leaf_const(input.obs_tokens.clone());
        let occl = tape.leaf_const(input.occl.clone());
        let emb = tape.matmul(obs_feats, vars["obs.embed.w"]);
        let emb = tape.add_bias_row(emb, vars["obs.embed.b"]);
        let masks = tape.matmul(occl, vars["obs.mask"]);
        let emb = tape.add(emb, masks);
        let obs = tape.add(emb, vars["obs.pos"]);

        for b in 0..self.config.blocks {
            let sa = self.attention(tape, vars, &format!("blk{b}.attn"), x, x);
            x = self.residual_norm(tape, vars, &format!("blk{b}.ln1"), x, sa);
            let ca = self.attention(tape, vars, &format!("blk{b}.cross"), x, obs);
            x = self.residual_norm(tape, vars, &format!("blk{b}.ln2"), x, ca);
            let f = tape.matmul(x, vars[&format!("blk{b}.ffn.w1")]);
            let f = tape.add_bias_row(f, vars[&format!("blk{b}.ffn.b1")]);
            let f = tape.relu(f);
            let f = tape.matmul(f, vars[&format!("blk{b}.ffn.w2")]);
            let f = tape.add_bias_row(f, vars[&format!("blk{b}.ffn.b2")]);
            x = self.residual_norm(tape, vars, &format!("blk{b}.ln3"), x, f);
        }

        let pooled = tape.row_group_mean(x, j);
        let d = tape.matmul(pooled, vars["dec.l1.w"]);
        let d = tape.add_bias_row(d, vars["dec.l1.b"]);
        let d = tape.relu(d);
        let d = tape.matmul(d, vars["dec.l2.w"]);
        tape.add_bias_row(d, vars["dec.l2.b"])
    }

    /// Raw scores for a set of candidates (inference; weights frozen).
    pub fn score_batch(&self, inputs: &[ScorerInput]) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = tape.bind_params_frozen(&self.params);
        inputs
            .iter()
            .map(|input| {
                let s = self.score_tape(&mut tape, &vars, input);
                tape.value(s).item()
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> crate::tensor::Checkpoint {
        let mut meta = BTreeMap::new();
        let c = &self.config;
        meta.insert("kind".into(), "scorer".into());
        meta.insert("joints".into(), c.joint_count.to_string());
        meta.insert("width".into(), c.width.to_string());
        meta.insert("blocks".into(), c.blocks.to_string());
        meta.insert("heads".into(), c.heads.to_string());
        meta.insert("ffn_hidden".into(), c.ffn_hidden.to_string());
        crate::tensor::Checkpoint {
            params: self.params.clone(),
            meta,
        }
    }

    pub fn from_checkpoint(
        ckpt: crate::tensor::Checkpoint,
    ) -> Result<Self, crate::tensor::TensorError> {
        use crate::tensor::TensorError;
        let get = |k: &str| -> Result<usize, TensorError> {
            ckpt.meta
                .get(k)
                .ok_or_else(|| TensorError::CheckpointFormat(format!("missing meta {k}")))?
                .parse()
                .map_err(|_| TensorError::CheckpointFormat(format!("bad meta {k}")))
        };
        if ckpt.meta.get("kind").map(String::as_str) != Some("scorer") {
            return Err(TensorError::CheckpointFormat(
                "checkpoint is not a scorer".into(),
            ));
        }
        let config = ScorerConfig {
            joint_count: get("joints")?,
            width: get("width")?,
            blocks: get("blocks")?,
            heads: get("heads")?,
            ffn_hidden: get("ffn_hidden")?,
        };
        Ok(ScorerModel {
            config,
            params: ckpt.params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::build_scorer_input;
    use crate::skeleton::{
        forward_kinematics, generate_dataset, perturb_pose, GenConfig, SkeletonTopology,
    };

    fn tiny() -> ScorerConfig {
        ScorerConfig {
            width: 16,
            blocks: 1,
            heads: 2,
            ffn_hidden: 24,
            ..ScorerConfig::default()
        }
    }

    fn make_inputs(n: usize) -> Vec<ScorerInput> {
        let topo = SkeletonTopology::default_human();
        let data = generate_dataset(
            &topo,
            &GenConfig {
                n_samples: 1,
                ..GenConfig::default()
            },
            17,
        );
        let s = &data[0];
        let mut rng = crate::rng::stream(18, "test-scorer-model", &[]);
        (0..n)
            .map(|_| {
                let cand = perturb_pose(&s.pose, 0.2, &mut rng);
                let joints = forward_kinematics(&topo, &cand);
                build_scorer_input(&joints, &s.camera, &s.observation).unwrap()
            })
            .collect()
    }

    #[test]
    fn scores_are_finite_and_deterministic() {
        let model = ScorerModel::new(tiny(), 7);
        let inputs = make_inputs(3);
        let a = model.score_batch(&inputs);
        let b = model.score_batch(&inputs);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scores_do_not_depend_on_batch_order_or_company() {
        let model = ScorerModel::new(tiny(), 7);
        let inputs = make_inputs(4);
        let all = model.score_batch(&inputs);
        // scored alone
        let alone = model.score_batch(&inputs[1..2]);
        assert_eq!(all[1].to_bits(), alone[0].to_bits());
        // permuted order
        let perm: Vec<ScorerInput> = vec![inputs[2].clone(), inputs[0].clone()];
        let p = model.score_batch(&perm);
        assert_eq!(p[0].to_bits(), all[2].to_bits());
        assert_eq!(p[1].to_bits(), all[0].to_bits());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = ScorerModel::new(tiny(), 3);
        let dir = std::env::temp_dir().join("posealign-scorer-ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scorer.ckpt");
        crate::tensor::save_checkpoint(&path, &model.to_checkpoint()).unwrap();
        let loaded =
            ScorerModel::from_checkpoint(crate::tensor::load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params, model.params);
    }
}
