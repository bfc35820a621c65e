//! Preference finetuning of the denoiser against its frozen copy.
//!
//! Loss per pair: `-log sigmoid(-beta_eff * omega(lambda_t) * delta)` where
//! `delta` compares how much better the trainable model denoises the winner
//! than the reference does, minus the same for the loser. Both halves of a
//! pair share one `t` draw; noise is redrawn per pair per optimization step.

use super::{PreferencePair, PrefsError};
use crate::diffusion::{q_sample, DenoiserModel, NoiseSchedule};
use crate::rng::stream;
use crate::skeleton::Sample;
use crate::tensor::{adam_step, AdamHyper, AdamState, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

/// Weighting of the per-timestep signal-to-noise ratio in the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OmegaWeight {
    /// Constant 1 (the usual diffusion-preference practice).
    Constant,
    /// min(lambda_t, cap)
    SnrCapped(f64),
}

impl OmegaWeight {
    pub fn value(self, lambda_t: f64) -> f64 {
        match self {
            OmegaWeight::Constant => 1.0,
            OmegaWeight::SnrCapped(cap) => lambda_t.min(cap),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DpoConfig {
    /// The preference temperature with the trajectory length already folded
    /// in; must be positive.
    pub beta_eff: f64,
    pub omega: OmegaWeight,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub lr: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta_eff: 500.0,
            omega: OmegaWeight::Constant,
            epochs: 6,
            batch_pairs: 16,
            lr: 1e-4,
        }
    }
}

struct PairBatchInputs {
    xt: Tensor,       // [2B, D]: winner rows then loser rows
    eps: Tensor,      // [2B, D]: matching targets
    time: Tensor,     // [2B, time_dim]
    tokens: Tensor,   // [2B*J, token_dim]
    occl: Tensor,     // [2B*J, 1]
    coeff: Tensor,    // [B, 1]: beta_eff * omega(lambda_t)
}

fn assemble_batch(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    pairs: &[&PreferencePair],
    conditions: &BTreeMap<u64, &Sample>,
    config: &DpoConfig,
    draws: &mut impl Rng,
) -> Result<PairBatchInputs, PrefsError> {
    let b = pairs.len();
    let dim = model.config.latent_dim();
    let mut ts = Vec::with_capacity(b);
    let mut xt_w = Vec::with_capacity(b * dim);
    let mut xt_l = Vec::with_capacity(b * dim);
    let mut eps_w = Vec::with_capacity(b * dim);
    let mut eps_l = Vec::with_capacity(b * dim);
    let mut coeff = Vec::with_capacity(b);
    let mut tokens = Vec::new();
    let mut occl = Vec::new();
    for pair in pairs {
        let sample = conditions
            .get(&pair.sample_id)
            .ok_or(PrefsError::UnknownSample(pair.sample_id))?;
        let t = draws.gen_range(1..=schedule.t_count());
        ts.push(t);
        coeff.push(config.beta_eff * config.omega.value(schedule.lambda(t)));
        let ew: Vec<f64> = (0..dim).map(|_| draws.sample::<f64, _>(StandardNormal)).collect();
        let el: Vec<f64> = (0..dim).map(|_| draws.sample::<f64, _>(StandardNormal)).collect();
        xt_w.extend(q_sample(&pair.winner, t, &ew, schedule));
        xt_l.extend(q_sample(&pair.loser, t, &el, schedule));
        eps_w.extend(ew);
        eps_l.extend(el);
        tokens.push(model.obs_token_features(&sample.observation, &sample.camera));
        occl.push(model.occlusion_column(&sample.observation));
    }
    let mut xt = xt_w;
    xt.extend(xt_l);
    let mut eps = eps_w;
    eps.extend(eps_l);
    let mut time_ts = ts.clone();
    time_ts.extend(ts.iter().copied());

    let td = model.config.token_dim();
    let j = model.config.joint_count;
    let mut token_data = Vec::with_capacity(2 * b * j * td);
    let mut occl_data = Vec::with_capacity(2 * b * j);
    for round in 0..2 {
        let _ = round;
        for (tok, oc) in tokens.iter().zip(&occl) {
            token_data.extend_from_slice(tok.data());
            occl_data.extend_from_slice(oc.data());
        }
    }
    Ok(PairBatchInputs {
        xt: Tensor::new(vec![2 * b, dim], xt),
        eps: Tensor::new(vec![2 * b, dim], eps),
        time: model.time_rows(&time_ts),
        tokens: Tensor::new(vec![2 * b * j, td], token_data),
        occl: Tensor::new(vec![2 * b * j, 1], occl_data),
        coeff: Tensor::new(vec![b, 1], coeff),
    })
}

/// Batched loss node: winner rows stacked over loser rows, trainable and
/// frozen forward passes on one tape, per-pair softplus of the scaled delta,
/// averaged over the batch.
fn dpo_loss_batch_tape(
    tape: &mut Tape,
    theta: &DenoiserModel,
    theta_vars: &BTreeMap<String, Var>,
    ref_vars: &BTreeMap<String, Var>,
    inputs: &PairBatchInputs,
) -> Var {
    let b = inputs.coeff.rows();
    let cond_all = theta.encode_condition(tape, theta_vars, inputs.tokens.clone(), inputs.occl.clone());
    // the condition encoder is also trainable, but the reference pass must
    // not leak gradients: encode separately with the frozen weights
    let cond_ref = theta.encode_condition(tape, ref_vars, inputs.tokens.clone(), inputs.occl.clone());

    let xt = tape.leaf_const(inputs.xt.clone());
    let time = tape.leaf_const(inputs.time.clone());
    let eps = tape.leaf_const(inputs.eps.clone());

    let eps_theta = theta.forward(tape, theta_vars, xt, time, cond_all);
    let eps_ref = theta.forward(tape, ref_vars, xt, time, cond_ref);

    let diff_theta = tape.sub(eps_theta, eps);
    let diff_ref = tape.sub(eps_ref, eps);
    let sse_theta = tape.sum_sq_rows(diff_theta); // [2B, 1]
    let sse_ref = tape.sum_sq_rows(diff_ref);
    let gap = tape.sub(sse_theta, sse_ref); // how much worse theta denoises than ref

    let winner_rows: Vec<usize> = (0..b).collect();
    let loser_rows: Vec<usize> = (b..2 * b).collect();
    let gap_w = tape.gather_rows(gap, &winner_rows);
    let gap_l = tape.gather_rows(gap, &loser_rows);
    let delta = tape.sub(gap_w, gap_l); // [B, 1]

    let coeff = tape.leaf_const(inputs.coeff.clone());
    let scaled = tape.hadamard(delta, coeff);
    let per_pair = tape.softplus(scaled); // -log sigmoid(-beta w delta)
    tape.mean_all(per_pair)
}

/// Loss for a single pair at a fixed timestep and noise draw
/// (the batched training path uses the same graph).
#[allow(clippy::too_many_arguments)]
pub fn dpo_loss(
    theta: &DenoiserModel,
    reference: &DenoiserModel,
    pair: &PreferencePair,
    condition: &Sample,
    t: usize,
    eps_w: &[f64],
    eps_l: &[f64],
    schedule: &NoiseSchedule,
    config: &DpoConfig,
) -> Result<f64, PrefsError> {
    if !theta.params.same_architecture(&reference.params) {
        return Err(PrefsError::ArchitectureMismatch);
    }
    assert!(config.beta_eff > 0.0, "beta_eff must be positive");
    let dim = theta.config.latent_dim();
    let mut conditions = BTreeMap::new();
    conditions.insert(condition.id, condition);

    let mut tape = Tape::new();
    let theta_vars = tape.bind_params(&theta.params);
    let ref_vars = tape.bind_params_frozen(&reference.params);
    let b = 1;
    let j = theta.config.joint_count;
    let td = theta.config.token_dim();
    let tokens_one = theta.obs_token_features(&condition.observation, &condition.camera);
    let occl_one = theta.occlusion_column(&condition.observation);
    let mut tokens = tokens_one.data().to_vec();
    tokens.extend_from_slice(tokens_one.data());
    let mut occl = occl_one.data().to_vec();
    occl.extend_from_slice(occl_one.data());

    let mut xt = q_sample(&pair.winner, t, eps_w, schedule);
    xt.extend(q_sample(&pair.loser, t, eps_l, schedule));
    let mut eps = eps_w.to_vec();
    eps.extend_from_slice(eps_l);

    let inputs = PairBatchInputs {
        xt: Tensor::new(vec![2 * b, dim], xt),
        eps: Tensor::new(vec![2 * b, dim], eps),
        time: theta.time_rows(&[t, t]),
        tokens: Tensor::new(vec![2 * b * j, td], tokens),
        occl: Tensor::new(vec![2 * b * j, 1], occl),
        coeff: Tensor::new(
            vec![1, 1],
            vec![config.beta_eff * config.omega.value(schedule.lambda(t))],
        ),
    };
    let loss = dpo_loss_batch_tape(&mut tape, theta, &theta_vars, &ref_vars, &inputs);
    Ok(tape.value(loss).item())
}

/// Finetune a copy of `base` on preference pairs while `base` itself stays
/// frozen as the reference.
///
/// `epoch_hook` fires after every epoch with the current model (checkpoint
/// writing lives with the caller). Returns the aligned model and the
/// per-step loss curve.
pub fn finetune_dpo(
    base: &DenoiserModel,
    pairs: &[PreferencePair],
    dataset: &[Sample],
    schedule: &NoiseSchedule,
    config: &DpoConfig,
    seed: u64,
    mut epoch_hook: impl FnMut(usize, &DenoiserModel),
) -> Result<(DenoiserModel, Vec<f64>), PrefsError> {
    assert!(config.beta_eff > 0.0, "beta_eff must be positive");
    let mut conditions: BTreeMap<u64, &Sample> = BTreeMap::new();
    for s in dataset {
        conditions.insert(s.id, s);
    }
    for p in pairs {
        if !conditions.contains_key(&p.sample_id) {
            return Err(PrefsError::UnknownSample(p.sample_id));
        }
    }
    let mut theta = base.clone();
    let mut adam = AdamState::new(
        &theta.params,
        AdamHyper {
            lr: config.lr,
            ..AdamHyper::default()
        },
    );
    let mut curve = Vec::new();
    let n = pairs.len();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = stream(seed, "train-dpo/shuffle", &[epoch as u64]);
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut noise_rng = stream(seed, "train-dpo/noise", &[epoch as u64]);
        for (step, chunk) in order.chunks(config.batch_pairs).enumerate() {
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let inputs = assemble_batch(&theta, schedule, &batch, &conditions, config, &mut noise_rng)?;
            let mut tape = Tape::new();
            let theta_vars = tape.bind_params(&theta.params);
            let ref_vars = tape.bind_params_frozen(&base.params);
            let loss = dpo_loss_batch_tape(&mut tape, &theta, &theta_vars, &ref_vars, &inputs);
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(PrefsError::NonFiniteLoss { epoch, step });
            }
            curve.push(loss_val);
            let grads = tape
                .backward(loss, &theta.params)
                .map_err(|_| PrefsError::NonFiniteLoss { epoch, step })?;
            adam_step(&mut theta.params, &grads, &mut adam);
        }
        epoch_hook(epoch, &theta);
    }
    Ok((theta, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserConfig, PoseLatent};
    use crate::prefs::Provenance;
    use crate::skeleton::{generate_dataset, GenConfig, SkeletonTopology};

    fn world() -> (DenoiserModel, NoiseSchedule, Vec<Sample>) {
        let arch = DenoiserConfig {
            width: 32,
            cond_dim: 16,
            time_dim: 16,
            t_steps: 10,
            ..DenoiserConfig::default()
        };
        let model = DenoiserModel::new(arch.clone(), 5);
        let schedule = NoiseSchedule::linear(arch.t_steps, arch.beta_min, arch.beta_max).unwrap();
        let topo = SkeletonTopology::default_human();
        let data = generate_dataset(
            &topo,
            &GenConfig {
                n_samples: 4,
                ..GenConfig::default()
            },
            6,
        );
        (model, schedule, data)
    }

    fn toy_pair(sample: &Sample, dim: usize) -> PreferencePair {
        let mut rng = stream(3, "test-dpo-pair", &[sample.id]);
        let mut latent = |_: usize| -> PoseLatent {
            let mut x: Vec<f64> = (0..dim).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
            x[0] = 0.0;
            x[1] = 0.0;
            x[2] = 0.0;
            PoseLatent { x }
        };
        PreferencePair {
            sample_id: sample.id,
            winner: latent(0),
            loser: latent(1),
            provenance: Provenance::ScorerRanked,
            winner_key: 1.0,
            loser_key: 0.0,
        }
    }

    #[test]
    fn loss_is_log_two_when_theta_equals_ref() {
        let (model, schedule, data) = world();
        let dim = model.config.latent_dim();
        let pair = toy_pair(&data[0], dim);
        let mut rng = stream(4, "test-dpo-eps", &[]);
        let eps_w: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let eps_l: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let cfg = DpoConfig::default();
        let loss = dpo_loss(&model, &model, &pair, &data[0], 5, &eps_w, &eps_l, &schedule, &cfg).unwrap();
        assert!(
            (loss - std::f64::consts::LN_2).abs() < 1e-12,
            "theta == ref must give exactly log 2, got {loss}"
        );
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let (model, schedule, data) = world();
        let other = DenoiserModel::new(
            DenoiserConfig {
                width: 48,
                cond_dim: 16,
                time_dim: 16,
                t_steps: 10,
                ..DenoiserConfig::default()
            },
            5,
        );
        let pair = toy_pair(&data[0], model.config.latent_dim());
        let dim = model.config.latent_dim();
        let err = dpo_loss(
            &model,
            &other,
            &pair,
            &data[0],
            3,
            &vec![0.0; dim],
            &vec![0.0; dim],
            &schedule,
            &DpoConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, PrefsError::ArchitectureMismatch));
    }

    #[test]
    fn finetune_starts_at_log_two_and_freezes_the_reference() {
        let (model, schedule, data) = world();
        let dim = model.config.latent_dim();
        let pairs: Vec<PreferencePair> = data.iter().map(|s| toy_pair(s, dim)).collect();
        let ref_before = model.params.clone();
        let cfg = DpoConfig {
            epochs: 2,
            batch_pairs: 2,
            lr: 1e-4,
            ..DpoConfig::default()
        };
        let mut epochs_seen = 0;
        let (aligned, curve) =
            finetune_dpo(&model, &pairs, &data, &schedule, &cfg, 7, |_, _| epochs_seen += 1).unwrap();
        assert_eq!(epochs_seen, 2);
        assert_eq!(model.params, ref_before, "reference was mutated");
        assert!(
            (curve[0] - std::f64::consts::LN_2).abs() < 1e-6,
            "step-0 loss {} != log 2",
            curve[0]
        );
        assert_ne!(aligned.params, model.params, "finetuning changed nothing");
    }

    #[test]
    fn unknown_sample_ids_are_rejected() {
        let (model, schedule, data) = world();
        let mut pair = toy_pair(&data[0], model.config.latent_dim());
        pair.sample_id = 999;
        let err = finetune_dpo(
            &model,
            &[pair],
            &data,
            &schedule,
            &DpoConfig::default(),
            7,
            |_, _| {},
        )
        .unwrap_err();
        assert!(matches!(err, PrefsError::UnknownSample(999)));
    }

    #[test]
    fn swapping_winner_and_loser_mirrors_the_loss_around_log_two() {
        // antisymmetry: delta flips sign, and softplus(x) + softplus(-x) >= 2 ln 2
        let (mut theta, schedule, data) = world();
        // nudge theta away from ref so delta != 0
        theta.params.get_mut("trunk.out.b").unwrap().data_mut()[0] += 0.05;

        let (refm, _, _) = world();
        let dim = theta.config.latent_dim();
        let pair = toy_pair(&data[0], dim);
        let swapped = PreferencePair {
            sample_id: pair.sample_id,
            winner: pair.loser.clone(),
            loser: pair.winner.clone(),
            provenance: pair.provenance,
            winner_key: pair.loser_key,
            loser_key: pair.winner_key,
        };
        let mut rng = stream(9, "test-dpo-swap", &[]);
        let eps_w: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let eps_l: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let cfg = DpoConfig::default();
        let a = dpo_loss(&theta, &refm, &pair, &data[0], 4, &eps_w, &eps_l, &schedule, &cfg).unwrap();
        // swapped pair must also swap the noise draws to mirror exactly
        let b = dpo_loss(&theta, &refm, &swapped, &data[0], 4, &eps_l, &eps_w, &schedule, &cfg).unwrap();
        let two_ln2 = 2.0 * std::f64::consts::LN_2;
        assert!(a + b >= two_ln2 - 1e-12, "softplus convexity violated: {a} + {b}");
        assert!((a - b).abs() > 1e-9, "losses should differ when delta != 0");
    }

    #[test]
    fn loss_is_monotone_in_the_winner_and_loser_gaps() {
        // closed form: loss = softplus(beta * ((a - b) - (c - d)))
        let f = |a: f64, c: f64| {
            let delta: f64 = (a - 0.3) - (c - 0.2);
            let z: f64 = 500.0 * delta;
            z.max(0.0) + (-z.abs()).exp().ln_1p()
        };
        assert!(f(0.29, 0.25) < f(0.30, 0.25), "lower winner error must lower the loss");
        assert!(f(0.30, 0.24) > f(0.30, 0.25), "lower loser error must raise the loss");
    }
}
