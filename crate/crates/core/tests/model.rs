use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitrm::gradcheck::{max_rel_error, project};
use vitrm::model::{count_params, param_specs, Model, ModelConfig, ModelParams, RecurrentState};
use vitrm::train::total_loss;
use vitrm::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..batch * cfg.image_len()).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Micro model with weights drawn wide enough that every gradient is far
/// from zero, which keeps finite-difference relative errors meaningful.
fn wide_micro(seed: u64) -> Model<f64> {
    let cfg = ModelConfig::micro();
    let mut r = rng(seed);
    let params = ModelParams::build(&cfg, |s| {
        let data = (0..s.numel()).map(|_| r.random_range(-0.5..0.5)).collect();
        Tensor::param(&s.shape, data)
    })
    .unwrap();
    Model::new(cfg, params).unwrap()
}

fn rand_state(cfg: &ModelConfig, batch: usize, seed: u64) -> RecurrentState<f64> {
    let mut r = rng(seed);
    let d = cfg.embed_dim;
    let mut v = |n: usize| (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    RecurrentState {
        y: Tensor::new(&[batch, 1, d], v(batch * d)).unwrap(),
        z: Tensor::new(&[batch, cfg.latent_tokens, d], v(batch * cfg.latent_tokens * d)).unwrap(),
    }
}

#[test]
fn refine_returns_last_k_tokens_and_update_returns_one() {
    let m = wide_micro(1);
    let c = m.config.clone();
    let tape = Tape::new();
    let x = m.patch_embed(&tape, &images(&c, 3, 2), 3).unwrap();
    assert_eq!(x.shape(), &[3, c.num_patches(), c.embed_dim]);
    let s = rand_state(&c, 3, 3);
    let z = m.refine_memory(&tape, &x, &s, 1).unwrap();
    assert_eq!(z.shape(), &[3, c.latent_tokens, c.embed_dim]);
    let y = m.update_prediction(&tape, &s.y, &z).unwrap();
    assert_eq!(y.shape(), &[3, 1, c.embed_dim]);
}

#[test]
fn refine_and_update_match_hand_unrolled_block_calls() {
    let m = wide_micro(4);
    let c = m.config.clone();
    let tape = Tape::new();
    let x = m.patch_embed(&tape, &images(&c, 2, 5), 2).unwrap();
    let s = rand_state(&c, 2, 6);
    let lx = c.num_patches();

    let mut z = s.z.clone();
    for _ in 0..3 {
        let out = m.shared_block(&tape, &tape.concat_tokens(&[&x, &s.y, &z]).unwrap()).unwrap();
        assert_eq!(out.shape()[1], lx + 1 + c.latent_tokens);
        z = tape.slice_tokens(&out, lx + 1, c.latent_tokens).unwrap();
    }
    let got = m.refine_memory(&tape, &x, &s, 3).unwrap();
    assert_eq!(got.to_vec(), z.to_vec());

    let out = m.shared_block(&tape, &tape.concat_tokens(&[&s.y, &z]).unwrap()).unwrap();
    assert_eq!(out.shape()[1], 1 + c.latent_tokens);
    let y = tape.slice_tokens(&out, 0, 1).unwrap();
    assert_eq!(m.update_prediction(&tape, &s.y, &z).unwrap().to_vec(), y.to_vec());
}

#[test]
fn identity_block_exposes_token_selection() {
    // Zero output projections turn every residual layer into the identity,
    // so refine must hand back exactly z and update exactly y.
    let cfg = ModelConfig::micro();
    let mut r = rng(7);
    let names: Vec<String> = param_specs(&cfg).into_iter().map(|s| s.name).collect();
    let mut i = 0;
    let params = ModelParams::build(&cfg, |s| {
        let n = &names[i];
        i += 1;
        let zero = n.contains("attn.out") || n.contains("fc2");
        let data = (0..s.numel()).map(|_| if zero { 0.0 } else { r.random_range(-0.5..0.5) }).collect();
        Tensor::new(&s.shape, data)
    })
    .unwrap();
    let m = Model::new(cfg.clone(), params).unwrap();
    let tape = Tape::new();
    let x = m.patch_embed(&tape, &images(&cfg, 2, 8), 2).unwrap();
    let s = rand_state(&cfg, 2, 9);
    assert_eq!(m.refine_memory(&tape, &x, &s, 2).unwrap().to_vec(), s.z.to_vec());
    assert_eq!(m.update_prediction(&tape, &s.y, &s.z).unwrap().to_vec(), s.y.to_vec());
}

#[test]
fn refine_composes_over_latent_steps() {
    let m = wide_micro(10);
    let c = m.config.clone();
    let tape = Tape::new();
    let x = m.patch_embed(&tape, &images(&c, 2, 11), 2).unwrap();
    let s = rand_state(&c, 2, 12);
    let z1 = m.refine_memory(&tape, &x, &s, 1).unwrap();
    let z2 = m
        .refine_memory(&tape, &x, &RecurrentState { y: s.y.clone(), z: z1 }, 1)
        .unwrap();
    assert_eq!(m.refine_memory(&tape, &x, &s, 2).unwrap().to_vec(), z2.to_vec());
}

#[test]
fn recurse_composes_over_recursion_steps() {
    let m = wide_micro(13);
    let c = m.config.clone();
    let tape = Tape::new();
    let x = m.patch_embed(&tape, &images(&c, 2, 14), 2).unwrap();
    let s = rand_state(&c, 2, 15);
    let once = m.recurse(&tape, &x, &s, 1, 2).unwrap();
    let twice = m.recurse(&tape, &x, &once, 1, 2).unwrap();
    let direct = m.recurse(&tape, &x, &s, 2, 2).unwrap();
    assert_eq!(direct.y.to_vec(), twice.y.to_vec());
    assert_eq!(direct.z.to_vec(), twice.z.to_vec());
}

#[test]
fn update_prediction_ignores_image_tokens() {
    let m = wide_micro(16);
    let c = m.config.clone();
    let s = rand_state(&c, 2, 17);
    let a = {
        let tape = Tape::new();
        let _x = m.patch_embed(&tape, &images(&c, 2, 18), 2).unwrap();
        m.update_prediction(&tape, &s.y, &s.z).unwrap().to_vec()
    };
    let b = {
        let tape = Tape::new();
        let _x = m.patch_embed(&tape, &images(&c, 2, 19), 2).unwrap();
        m.update_prediction(&tape, &s.y, &s.z).unwrap().to_vec()
    };
    assert_eq!(a, b);

    // And no gradient reaches the embedding from the update alone.
    let tape = Tape::new();
    let y = m.update_prediction(&tape, &s.y, &s.z).unwrap();
    m.params.zero_grad();
    tape.backward(&project(&tape, &y).unwrap()).unwrap();
    assert!(m.params.patch_w.grad().is_none());
    assert!(m.params.pos_embed.grad().is_none());
    assert!(m.params.layers[0].wq.grad().is_some());
}

#[test]
fn block_call_count_is_t_times_m_plus_one() {
    for (t, mm) in [(1, 1), (1, 3), (2, 2), (3, 1)] {
        let m = wide_micro(20);
        let c = m.config.clone();
        let tape = Tape::new();
        m.forward(&tape, &images(&c, 1, 21), 1, None, t, mm).unwrap();
        assert_eq!(m.block_calls(), t * (mm + 1), "T={t} M={mm}");
    }
}

#[test]
fn gradient_reaches_initial_states_and_every_parameter() {
    let m = wide_micro(22);
    let c = m.config.clone();
    let tape = Tape::new();
    let (out, _) = m.forward(&tape, &images(&c, 2, 23), 2, None, 1, 2).unwrap();
    let loss = tape
        .add(&project(&tape, &out.logits).unwrap(), &project(&tape, &out.halt_logit).unwrap())
        .unwrap();
    tape.backward(&loss).unwrap();
    for (spec, t) in param_specs(&c).iter().zip(m.params.tensors()) {
        let g = t.grad().unwrap_or_else(|| panic!("{} has no gradient", spec.name));
        assert!(g.iter().any(|&v| v != 0.0), "{} gradient is all zero", spec.name);
    }
}

#[test]
fn heads_are_linear_reads_of_y() {
    let m = wide_micro(24);
    let c = m.config.clone();
    let s = rand_state(&c, 2, 25);
    let tape = Tape::new();
    let h = m.heads(&tape, &s.y).unwrap();
    assert_eq!(h.logits.shape(), &[2, c.num_classes]);
    assert_eq!(h.halt_logit.shape(), &[2, 1]);
    let (y, wc, bc, wh, bh) = (
        s.y.to_vec(),
        m.params.cls_w.to_vec(),
        m.params.cls_b.to_vec(),
        m.params.halt_w.to_vec(),
        m.params.halt_b.to_vec(),
    );
    let d = c.embed_dim;
    for b in 0..2 {
        let yb = &y[b * d..(b + 1) * d];
        for k in 0..c.num_classes {
            let e: f64 = bc[k] + (0..d).map(|j| yb[j] * wc[k * d + j]).sum::<f64>();
            assert!((h.logits.data()[b * c.num_classes + k] - e).abs() < 1e-12);
        }
        let hl: f64 = bh[0] + (0..d).map(|j| yb[j] * wh[j]).sum::<f64>();
        assert!((h.halt_logit.data()[b] - hl).abs() < 1e-12);
        assert!((h.q[b] - 1.0 / (1.0 + (-hl).exp())).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&h.q[b]));
    }
}

#[test]
fn init_state_replicates_learned_embeddings() {
    let m = wide_micro(26);
    let tape = Tape::new();
    let s = m.init_state(&tape, 3).unwrap();
    assert_eq!(s.y.shape(), &[3, 1, 8]);
    assert_eq!(s.z.shape(), &[3, 2, 8]);
    let (y0, z0) = (m.params.y_init.to_vec(), m.params.z_init.to_vec());
    assert_eq!(s.y.to_vec(), [y0.clone(), y0.clone(), y0].concat());
    assert_eq!(s.z.to_vec(), [z0.clone(), z0.clone(), z0].concat());
}

fn closed_form_count(c: &ModelConfig) -> usize {
    let (d, f, k) = (c.embed_dim, c.ffn_hidden, c.latent_tokens);
    let layer = 2 * 2 * d + 4 * (d * d + d) + (f * d + f) + (d * f + d);
    (c.patch_dim() * d + d) + c.num_patches() * d + c.block_depth * layer + d + k * d + (c.num_classes * d + c.num_classes) + (d + 1)
}

#[test]
fn parameter_counts() {
    let c10 = count_params(&ModelConfig::cifar10()).total;
    let c100 = count_params(&ModelConfig::cifar100()).total;
    assert!((3_400_000..=3_800_000).contains(&c10), "{c10}");
    assert_eq!(c10, closed_form_count(&ModelConfig::cifar10()));
    assert_eq!(c10, 3_560_555);
    let d = ModelConfig::cifar10().embed_dim;
    assert_eq!(c100 - c10, 90 * d + 90);
    assert_eq!(count_params(&ModelConfig::micro()).total, 1419);

    let m = Model::<f32>::init(ModelConfig::cifar10(), &mut rng(0)).unwrap();
    assert_eq!(m.count_params().total, c10);
    let comps = m.count_params().components();
    assert_eq!(comps.iter().map(|(_, n)| n).sum::<usize>(), c10);
    assert!(comps.iter().any(|(k, _)| k == "block.2"));
}

#[test]
fn parameter_count_does_not_depend_on_unrolling() {
    let base = count_params(&ModelConfig::micro()).total;
    for (t, mm, n) in [(4, 6, 16), (1, 1, 1), (2, 3, 8)] {
        let c = ModelConfig {
            recursions: t,
            latent_steps: mm,
            supervision_steps: n,
            ..ModelConfig::micro()
        };
        assert_eq!(count_params(&c).total, base);
    }
}

#[test]
fn patchify_matches_direct_indexing() {
    let m = wide_micro(27);
    let c = m.config.clone();
    let img = images(&c, 2, 28);
    let rows = m.patchify(&img, 2).unwrap();
    let (p, w, h) = (c.patch, c.image_w, c.image_h);
    let gw = w / p;
    let mut i = 0;
    for b in 0..2 {
        for patch in 0..c.num_patches() {
            for ch in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        let (yy, xx) = ((patch / gw) * p + dy, (patch % gw) * p + dx);
                        assert_eq!(rows[i], img[b * c.image_len() + ch * h * w + yy * w + xx] as f64);
                        i += 1;
                    }
                }
            }
        }
    }
    assert_eq!(i, rows.len());
    assert!(m.patchify(&img[1..], 2).is_err());
}

#[test]
fn swapping_image_blocks_swaps_patch_rows() {
    let m = wide_micro(29);
    let c = m.config.clone();
    let img = images(&c, 1, 30);
    let mut swapped = img.clone();
    // exchange patch 0 (top-left) and patch 3 (bottom-right)
    let (p, w) = (c.patch, c.image_w);
    for ch in 0..3 {
        for dy in 0..p {
            for dx in 0..p {
                let a = ch * 64 + dy * w + dx;
                let b = ch * 64 + (p + dy) * w + p + dx;
                swapped.swap(a, b);
            }
        }
    }
    let (r0, r1) = (m.patchify(&img, 1).unwrap(), m.patchify(&swapped, 1).unwrap());
    let pd = c.patch_dim();
    assert_eq!(r0[..pd], r1[3 * pd..]);
    assert_eq!(r0[3 * pd..], r1[..pd]);
    assert_eq!(r0[pd..3 * pd], r1[pd..3 * pd]);
}

#[test]
fn end_to_end_micro_loss_matches_central_differences() {
    let cfg = ModelConfig::micro();
    let mut r = rng(31);
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = param_specs(&cfg)
        .iter()
        .map(|s| (s.shape.clone(), (0..s.numel()).map(|_| r.random_range(-0.5..0.5)).collect()))
        .collect();
    let batch = 2;
    let imgs = images(&cfg, batch, 32);
    // row 0 mixed, row 1 one-hot
    let mut soft = vec![0.0; batch * 10];
    soft[3] = 0.7;
    soft[8] = 0.3;
    soft[10 + 5] = 1.0;
    let hard = [3usize, 5];

    let err = max_rel_error(&inputs, |tape, ts| {
        let mut it = ts.iter();
        let params = ModelParams::build(&cfg, |_| Ok(it.next().unwrap().clone()))?;
        let m = Model::new(cfg.clone(), params)?;
        let (h, _) = m.forward(tape, &imgs, batch, None, 1, 2)?;
        let target = Tensor::new(&[batch, 10], soft.clone())?;
        Ok(total_loss(tape, &h.logits, &target, &hard, &h.halt_logit)?.total)
    })
    .unwrap();
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn batch_permutation_permutes_outputs() {
    let m = wide_micro(33);
    let c = m.config.clone();
    let img = images(&c, 3, 34);
    let il = c.image_len();
    let perm = [2usize, 0, 1];
    let permuted: Vec<f32> = perm.iter().flat_map(|&i| img[i * il..(i + 1) * il].to_vec()).collect();
    let tape = Tape::new();
    let (a, _) = m.forward(&tape, &img, 3, None, 1, 2).unwrap();
    let (b, _) = m.forward(&tape, &permuted, 3, None, 1, 2).unwrap();
    let nc = c.num_classes;
    for (j, &i) in perm.iter().enumerate() {
        for k in 0..nc {
            let (u, v) = (a.logits.data()[i * nc + k], b.logits.data()[j * nc + k]);
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }
}

#[test]
fn every_block_call_reads_the_same_weight_tensors() {
    // Two forwards at different unroll depths accumulate gradient into the
    // same handles; the block has exactly `block_depth` layers.
    let m = wide_micro(35);
    assert_eq!(m.params.layers.len(), m.config.block_depth);
    let c = m.config.clone();
    let tape = Tape::new();
    let (h, _) = m.forward(&tape, &images(&c, 1, 36), 1, None, 2, 3).unwrap();
    tape.backward(&project(&tape, &h.logits).unwrap()).unwrap();
    let g_deep = m.params.layers[0].wq.grad().unwrap();
    assert_eq!(g_deep.len(), c.embed_dim * c.embed_dim);
    assert_eq!(m.block_calls(), 8);
    assert_eq!(m.params.tensors().len(), param_specs(&c).len());
}

#[test]
fn default_config_forward_is_finite() {
    let m = Model::<f32>::init(ModelConfig::cifar10(), &mut rng(37)).unwrap();
    let c = m.config.clone();
    let img: Vec<f32> = images(&c, 2, 38);
    let tape = Tape::no_grad();
    let (h, s) = m.forward(&tape, &img, 2, None, 1, 3).unwrap();
    assert!(h.logits.all_finite() && h.halt_logit.all_finite());
    assert!(s.y.all_finite() && s.z.all_finite());
    assert_eq!(tape.len(), 0);
    assert_eq!(s.z.shape(), &[2, 16, 312]);
}
