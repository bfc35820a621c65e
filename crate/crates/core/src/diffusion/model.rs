//! The conditional noise-prediction network.
//!
//! Conditioning: each joint's observation becomes a token
//! `[u/width, v/height, visibility, one-hot joint id]`; tokens go through a
//! shared linear embedding, occluded joints additionally receive a learned
//! mask vector, and the mean-pooled token is the global condition. The trunk
//! is an MLP over `[x_t, time embedding, condition]`.

use crate::rng::stream;
use crate::skeleton::{Camera, Observation};
use crate::tensor::{sinusoidal_time_embedding, ParameterSet, Tape, Tensor, Var};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub joint_count: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            joint_count: 16,
            width: 256,
            hidden_layers: 3,
            cond_dim: 64,
            time_dim: 64,
            t_steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl DenoiserConfig {
    pub fn latent_dim(&self) -> usize {
        3 * self.joint_count
    }

    pub fn token_dim(&self) -> usize {
        3 + self.joint_count
    }

    fn trunk_in_dim(&self) -> usize {
        self.latent_dim() + self.time_dim + self.cond_dim
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: ParameterSet,
}

impl DenoiserModel {
    /// Fresh weights from the given init stream seed.
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = stream(seed, "model-init/denoiser", &[]);
        let mut params = ParameterSet::new();
        params.init_linear("cond.embed.w", config.token_dim(), config.cond_dim, &mut rng);
        params.init_zeros("cond.embed.b", vec![config.cond_dim]);
        params.init_uniform("cond.mask", vec![1, config.cond_dim], &mut rng);

        let mut in_dim = config.trunk_in_dim();
        for layer in 1..=config.hidden_layers {
            params.init_linear(&format!("trunk.h{layer}.w"), in_dim, config.width, &mut rng);
            params.init_zeros(&format!("trunk.h{layer}.b"), vec![config.width]);
            in_dim = config.width;
        }
        params.init_linear("trunk.out.w", in_dim, config.latent_dim(), &mut rng);
        params.init_zeros("trunk.out.b", vec![config.latent_dim()]);
        DenoiserModel { config, params }
    }

    /// Raw per-joint observation token features for one sample: `[J, 3+J]`.
    pub fn obs_token_features(&self, observation: &Observation, camera: &Camera) -> Tensor {
        crate::tokens::obs_token_features(observation, camera, self.config.joint_count)
    }

    /// Column of occlusion indicators aligned with the token rows: `[J, 1]`.
    pub fn occlusion_column(&self, observation: &Observation) -> Tensor {
        crate::tokens::occlusion_column(observation)
    }

    /// Mean-pooled condition vectors for a batch of samples on the tape.
    ///
    /// `token_rows` stacks each sample's `[J, 3+J]` block; `occl_rows` the
    /// matching occlusion columns. Output is `[B, cond_dim]`.
    pub fn encode_condition(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        token_rows: Tensor,
        occl_rows: Tensor,
    ) -> Var {
        let j = self.config.joint_count;
        assert_eq!(token_rows.rows() % j, 0, "token rows must stack whole samples");
        let tokens = tape.leaf_const(token_rows);
        let occl = tape.leaf_const(occl_rows);
        let projected = tape.matmul(tokens, vars["cond.embed.w"]);
        let embedded = tape.add_bias_row(projected, vars["cond.embed.b"]);
        let masks = tape.matmul(occl, vars["cond.mask"]);
        let with_mask = tape.add(embedded, masks);
        tape.row_group_mean(with_mask, j)
    }

    /// Noise prediction on the tape: `[B, 3J]` from latent rows, per-row
    /// time-embedding rows and per-row condition vectors.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        x_rows: Var,
        time_rows: Var,
        cond_rows: Var,
    ) -> Var {
        let mut h = tape.concat_cols(&[x_rows, time_rows, cond_rows]);
        for layer in 1..=self.config.hidden_layers {
            let w = vars[&format!("trunk.h{layer}.w")];
            let b = vars[&format!("trunk.h{layer}.b")];
            let lin = tape.matmul(h, w);
            let lin = tape.add_bias_row(lin, b);
            h = tape.relu(lin);
        }
        let out = tape.matmul(h, vars["trunk.out.w"]);
        tape.add_bias_row(out, vars["trunk.out.b"])
    }

    /// Time-embedding rows for a batch of timesteps: `[B, time_dim]`.
    pub fn time_rows(&self, ts: &[usize]) -> Tensor {
        let dim = self.config.time_dim;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            data.extend_from_slice(sinusoidal_time_embedding(t as f64, dim).data());
        }
        Tensor::new(vec![ts.len(), dim], data)
    }

    /// Tape-free condition encoding for the sampling hot path. Runs the same
    /// kernels in the same order as the tape version, so outputs are
    /// bitwise identical (pinned by a test).
    pub fn encode_condition_direct(&self, token_rows: &Tensor, occl_rows: &Tensor) -> Tensor {
        use crate::tensor::kernels::matmul_nn;
        let j = self.config.joint_count;
        let e = self.config.cond_dim;
        let rows = token_rows.rows();
        assert_eq!(rows % j, 0, "token rows must stack whole samples");
        let w = self.params.get("cond.embed.w").unwrap();
        let b = self.params.get("cond.embed.b").unwrap();
        let mask = self.params.get("cond.mask").unwrap();

        let mut emb = vec![0.0; rows * e];
        matmul_nn(token_rows.data(), w.data(), rows, self.config.token_dim(), e, &mut emb);
        let mut masks = vec![0.0; rows * e];
        matmul_nn(occl_rows.data(), mask.data(), rows, 1, e, &mut masks);
        for i in 0..rows {
            for c in 0..e {
                // bias first, then the mask contribution: same order as the
                // tape graph (add_bias_row then add)
                emb[i * e + c] += b.data()[c];
                emb[i * e + c] += masks[i * e + c];
            }
        }
        let groups = rows / j;
        let mut pooled = vec![0.0; groups * e];
        for i in 0..rows {
            let g = i / j;
            for c in 0..e {
                pooled[g * e + c] += emb[i * e + c] / j as f64;
            }
        }
        Tensor::new(vec![groups, e], pooled)
    }

    /// Tape-free noise prediction for the sampling hot path; bitwise-equal
    /// to the tape forward (pinned by a test).
    pub fn eps_direct(&self, x_rows: &Tensor, time_rows: &Tensor, cond_rows: &Tensor) -> Tensor {
        use crate::tensor::kernels::matmul_nn;
        let b = x_rows.rows();
        assert_eq!(time_rows.rows(), b);
        assert_eq!(cond_rows.rows(), b);
        let in_dim = self.config.trunk_in_dim();
        let mut h = vec![0.0; b * in_dim];
        let (xd, td, cd) = (x_rows.cols(), time_rows.cols(), cond_rows.cols());
        for i in 0..b {
            h[i * in_dim..i * in_dim + xd].copy_from_slice(x_rows.row_slice(i));
            h[i * in_dim + xd..i * in_dim + xd + td].copy_from_slice(time_rows.row_slice(i));
            h[i * in_dim + xd + td..(i + 1) * in_dim].copy_from_slice(cond_rows.row_slice(i));
        }
        let mut cur_dim = in_dim;
        for layer in 1..=self.config.hidden_layers {
            let w = self.params.get(&format!("trunk.h{layer}.w")).unwrap();
            let bias = self.params.get(&format!("trunk.h{layer}.b")).unwrap();
            let out_dim = w.cols();
            let mut out = vec![0.0; b * out_dim];
            matmul_nn(&h, w.data(), b, cur_dim, out_dim, &mut out);
            for i in 0..b {
                for c in 0..out_dim {
                    out[i * out_dim + c] = (out[i * out_dim + c] + bias.data()[c]).max(0.0);
                }
            }
            h = out;
            cur_dim = out_dim;
        }
        let w = self.params.get("trunk.out.w").unwrap();
        let bias = self.params.get("trunk.out.b").unwrap();
        let out_dim = w.cols();
        let mut out = vec![0.0; b * out_dim];
        matmul_nn(&h, w.data(), b, cur_dim, out_dim, &mut out);
        for i in 0..b {
            for c in 0..out_dim {
                out[i * out_dim + c] += bias.data()[c];
            }
        }
        Tensor::new(vec![b, out_dim], out)
    }

    pub fn to_checkpoint(&self) -> crate::tensor::Checkpoint {
        let mut meta = BTreeMap::new();
        let c = &self.config;
        meta.insert("kind".into(), "denoiser".into());
        meta.insert("joints".into(), c.joint_count.to_string());
        meta.insert("width".into(), c.width.to_string());
        meta.insert("hidden_layers".into(), c.hidden_layers.to_string());
        meta.insert("cond_dim".into(), c.cond_dim.to_string());
        meta.insert("time_dim".into(), c.time_dim.to_string());
        meta.insert("t_steps".into(), c.t_steps.to_string());
        meta.insert("beta_min".into(), format!("{:.16e}", c.beta_min));
        meta.insert("beta_max".into(), format!("{:.16e}", c.beta_max));
        crate::tensor::Checkpoint {
            params: self.params.clone(),
            meta,
        }
    }

    pub fn from_checkpoint(
        ckpt: crate::tensor::Checkpoint,
    ) -> Result<Self, crate::tensor::TensorError> {
        use crate::tensor::TensorError;
        let get = |k: &str| {
            ckpt.meta
                .get(k)
                .cloned()
                .ok_or_else(|| TensorError::CheckpointFormat(format!("missing meta {k}")))
        };
        if get("kind")? != "denoiser" {
            return Err(TensorError::CheckpointFormat(
                "checkpoint is not a denoiser".into(),
            ));
        }
        let parse_usize = |k: &str| -> Result<usize, TensorError> {
            get(k)?
                .parse()
                .map_err(|_| TensorError::CheckpointFormat(format!("bad meta {k}")))
        };
        let parse_f64 = |k: &str| -> Result<f64, TensorError> {
            get(k)?
                .parse()
                .map_err(|_| TensorError::CheckpointFormat(format!("bad meta {k}")))
        };
        let config = DenoiserConfig {
            joint_count: parse_usize("joints")?,
            width: parse_usize("width")?,
            hidden_layers: parse_usize("hidden_layers")?,
            cond_dim: parse_usize("cond_dim")?,
            time_dim: parse_usize("time_dim")?,
            t_steps: parse_usize("t_steps")?,
            beta_min: parse_f64("beta_min")?,
            beta_max: parse_f64("beta_max")?,
        };
        Ok(DenoiserModel {
            config,
            params: ckpt.params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{generate_dataset, GenConfig, SkeletonTopology};

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = DenoiserModel::new(DenoiserConfig::default(), 7);
        let b = DenoiserModel::new(DenoiserConfig::default(), 7);
        assert_eq!(a.params, b.params);
        let c = DenoiserModel::new(DenoiserConfig::default(), 8);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn forward_output_has_latent_shape() {
        let model = DenoiserModel::new(DenoiserConfig::default(), 7);
        let topo = SkeletonTopology::default_human();
        let cfg = GenConfig {
            n_samples: 2,
            ..GenConfig::default()
        };
        let data = generate_dataset(&topo, &cfg, 1);
        let tokens = model.obs_token_features(&data[0].observation, &data[0].camera);
        let occl = model.occlusion_column(&data[0].observation);
        let cond = model.encode_condition_direct(&tokens, &occl);
        assert_eq!(cond.shape(), &[1, model.config.cond_dim]);

        let x = Tensor::zeros(vec![1, model.config.latent_dim()]);
        let t = model.time_rows(&[50]);
        let eps = model.eps_direct(&x, &t, &cond);
        assert_eq!(eps.shape(), &[1, model.config.latent_dim()]);
        assert!(eps.all_finite());
    }

    #[test]
    fn direct_path_is_bitwise_equal_to_tape_forward() {
        use rand::Rng;
        let model = DenoiserModel::new(DenoiserConfig::default(), 9);
        let topo = SkeletonTopology::default_human();
        let cfg = GenConfig {
            n_samples: 3,
            ..GenConfig::default()
        };
        let data = generate_dataset(&topo, &cfg, 4);

        // stack all three samples
        let mut token_rows = Vec::new();
        let mut occl_rows = Vec::new();
        for s in &data {
            token_rows.push(model.obs_token_features(&s.observation, &s.camera));
            occl_rows.push(model.occlusion_column(&s.observation));
        }
        let tokens = stack_rows(&token_rows);
        let occl = stack_rows(&occl_rows);

        let mut rng = crate::rng::stream(2, "test-direct", &[]);
        let b = data.len();
        let x = Tensor::new(
            vec![b, model.config.latent_dim()],
            (0..b * model.config.latent_dim())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        );
        let t_rows = model.time_rows(&[10, 55, 99]);

        let direct_cond = model.encode_condition_direct(&tokens, &occl);
        let direct_eps = model.eps_direct(&x, &t_rows, &direct_cond);

        let mut tape = Tape::new();
        let vars = tape.bind_params_frozen(&model.params);
        let cond = model.encode_condition(&mut tape, &vars, tokens.clone(), occl.clone());
        let xv = tape.leaf_const(x.clone());
        let tv = tape.leaf_const(t_rows.clone());
        let eps = model.forward(&mut tape, &vars, xv, tv, cond);

        assert_eq!(tape.value(cond).shape(), direct_cond.shape());
        for (a, b) in tape.value(cond).data().iter().zip(direct_cond.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "condition mismatch");
        }
        for (a, b) in tape.value(eps).data().iter().zip(direct_eps.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "eps mismatch");
        }
    }

    fn stack_rows(tensors: &[Tensor]) -> Tensor {
        let cols = tensors[0].cols();
        let mut data = Vec::new();
        for t in tensors {
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![data.len() / cols, cols], data)
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let model = DenoiserModel::new(DenoiserConfig::default(), 3);
        let dir = std::env::temp_dir().join("posealign-denoiser-ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        crate::tensor::save_checkpoint(&path, &model.to_checkpoint()).unwrap();
        let loaded =
            DenoiserModel::from_checkpoint(crate::tensor::load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params, model.params);
    }
}
