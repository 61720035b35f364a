//! The update transformer: jointly processes image, visible-scene, box, and
//! auxiliary tokens; emits refined tokens, newly created tokens, and updated
//! auxiliary state. `run_sequence_*` drive it frame by frame over the
//! scene-token store.

use std::collections::HashMap;

use crate::dynamics;
use crate::encoders::{self, AuxTokens, BoxTokens, ImageTokenBatch};
use crate::geometry::rigid_inverse;
use crate::nn;
use crate::numerics::checkpoint::{ParamBindings, ParamStore};
use crate::numerics::{Tape, TensorRef};
use crate::scalar::Scalar;
use crate::splatter;
use crate::synthdata::FrameObservation;
use crate::tokenstore::{SceneToken, SceneTokenStore};
use nalgebra::Matrix4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct UpdateNetConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub k_budget: usize,
    pub gaussians_per_token: usize,
    pub mlp_ratio: usize,
    pub fourier_l: usize,
    pub n_sky: usize,
    pub num_cameras: usize,
    pub max_boxes: usize,
    /// Bound on per-step position refinement, meters.
    pub pos_delta_max: f64,
    pub time_scale: f64,
    /// Pre-scale applied to coordinates before Fourier encoding.
    pub pos_scale: f64,
    pub beta_min: f64,
    pub voxel_size: f64,
}

impl UpdateNetConfig {
    /// Full-scale configuration (12 layers, D=768, K=3600, 32 boxes).
    pub fn paper() -> Self {
        UpdateNetConfig {
            layers: 12,
            dim: 768,
            heads: 12,
            patch: 8,
            k_budget: 3600,
            gaussians_per_token: 1,
            mlp_ratio: 4,
            fourier_l: 6,
            n_sky: 4,
            num_cameras: 3,
            max_boxes: 32,
            pos_delta_max: 2.0,
            time_scale: 32.0,
            pos_scale: 1.0 / 30.0,
            beta_min: 0.05,
            voxel_size: 4.0,
        }
    }

    /// Desk-scale preset: 4 layers, D=128, 4 heads, K=512.
    pub fn desk() -> Self {
        UpdateNetConfig {
            layers: 4,
            dim: 128,
            heads: 4,
            k_budget: 512,
            ..Self::paper()
        }
    }

    pub fn tiny_for_tests() -> Self {
        UpdateNetConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            k_budget: 16,
            fourier_l: 2,
            n_sky: 2,
            max_boxes: 4,
            ..Self::paper()
        }
    }

    pub fn validate(&self) {
        assert!(
            self.dim % self.heads == 0,
            "contract error: dim {} not divisible by heads {}",
            self.dim,
            self.heads
        );
    }
}

pub struct UpdateNet<T: Scalar> {
    pub cfg: UpdateNetConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> UpdateNet<T> {
    pub fn new(cfg: UpdateNetConfig, seed: u64) -> Self {
        cfg.validate();
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        encoders::define_encoder_params(&mut ps, &mut rng, &cfg);
        let d = cfg.dim;
        for l in 0..cfg.layers {
            let p = format!("update_net.blk{l}");
            ps.define(&format!("{p}.ln1.g"), vec![d], vec![T::ONE; d]);
            ps.define(&format!("{p}.ln1.b"), vec![d], vec![T::ZERO; d]);
            nn::define_linear(&mut ps, &mut rng, &format!("{p}.qkv"), d, 3 * d, nn::INIT_STD);
            nn::define_linear(&mut ps, &mut rng, &format!("{p}.proj"), d, d, nn::INIT_STD);
            ps.define(&format!("{p}.ln2.g"), vec![d], vec![T::ONE; d]);
            ps.define(&format!("{p}.ln2.b"), vec![d], vec![T::ZERO; d]);
            nn::define_linear(
                &mut ps,
                &mut rng,
                &format!("{p}.mlp.fc1"),
                d,
                d * cfg.mlp_ratio,
                nn::INIT_STD,
            );
            nn::define_linear(
                &mut ps,
                &mut rng,
                &format!("{p}.mlp.fc2"),
                d * cfg.mlp_ratio,
                d,
                nn::INIT_STD,
            );
        }
        ps.define("update_net.ln_f.g", vec![d], vec![T::ONE; d]);
        ps.define("update_net.ln_f.b", vec![d], vec![T::ZERO; d]);
        // zero-initialized output heads: the untrained network is a no-op
        // refiner and places new tokens at the default decoded distance
        nn::define_mlp2(&mut ps, &mut rng, "update_net.head_scene", d, d, d + 3, 0.0);
        nn::define_mlp2(&mut ps, &mut rng, "update_net.head_image", d, d, d + 1, 0.0);
        {
            let b = ps.get_mut("update_net.head_image.fc2.b").unwrap();
            b.data[d] = T::from_f64(12.0); // softplus(12) m default placement depth
        }
        splatter::define_decoder_params(&mut ps, &mut rng, &cfg);
        dynamics::define_assign_params(&mut ps, &mut rng, d);
        UpdateNet { cfg, params: ps }
    }

    fn transformer(
        &self,
        tape: &Tape<T>,
        bind: &mut ParamBindings,
        mut x: TensorRef,
        mask: Option<&Vec<T>>,
    ) -> TensorRef {
        let ps = &self.params;
        let d = self.cfg.dim;
        for l in 0..self.cfg.layers {
            let p = format!("update_net.blk{l}");
            let g1 = ps.bind(tape, bind, &format!("{p}.ln1.g"));
            let b1 = ps.bind(tape, bind, &format!("{p}.ln1.b"));
            let h = tape.layer_norm(x, g1, b1, 1e-6);
            let qkv = nn::linear(tape, ps, bind, h, &format!("{p}.qkv"));
            let q = tape.slice(qkv, 1, 0, d);
            let k = tape.slice(qkv, 1, d, 2 * d);
            let v = tape.slice(qkv, 1, 2 * d, 3 * d);
            let att =
                tape.scaled_dot_product_attention_with_mask(q, k, v, self.cfg.heads, mask.cloned());
            let att = nn::linear(tape, ps, bind, att, &format!("{p}.proj"));
            x = tape.add(x, att);
            let g2 = ps.bind(tape, bind, &format!("{p}.ln2.g"));
            let b2 = ps.bind(tape, bind, &format!("{p}.ln2.b"));
            let h2 = tape.layer_norm(x, g2, b2, 1e-6);
            let m1 = nn::linear(tape, ps, bind, h2, &format!("{p}.mlp.fc1"));
            let m1 = tape.gelu(m1);
            let m2 = nn::linear(tape, ps, bind, m1, &format!("{p}.mlp.fc2"));
            x = tape.add(x, m2);
        }
        let gf = ps.bind(tape, bind, "update_net.ln_f.g");
        let bf = ps.bind(tape, bind, "update_net.ln_f.b");
        tape.layer_norm(x, gf, bf, 1e-6)
    }
}

/// The visible scene tokens as the update step consumes them: raw features
/// and local positions (residual bases) plus their encoded rows.
pub struct VisibleTokensInput {
    pub ids: Vec<u64>,
    pub birth_times: Vec<f64>,
    pub features: TensorRef,
    pub positions_local: TensorRef,
    pub encoded: TensorRef,
}

pub struct UpdateOutput {
    pub refined_features: TensorRef,
    pub refined_positions_local: TensorRef,
    pub new_features: TensorRef,
    pub new_positions_local: TensorRef,
    pub aux: AuxTokens,
}

/// One recurrent update: full bidirectional self-attention over
/// [image | scene | box | aux], then per-stream heads. Scene tokens receive
/// a residual feature update and a tanh-bounded position delta; each image
/// patch becomes one new token placed along its central ray at a
/// softplus-decoded distance.
pub fn update_step<T: Scalar>(
    net: &UpdateNet<T>,
    tape: &Tape<T>,
    bind: &mut ParamBindings,
    images: &[ImageTokenBatch],
    visible: &VisibleTokensInput,
    boxes: &BoxTokens,
    aux: AuxTokens,
    mask: Option<&Vec<T>>,
) -> UpdateOutput {
    let cfg = &net.cfg;
    let ps = &net.params;
    let d = cfg.dim;
    let n_img: usize = images.iter().map(|b| tape.shape(b.tokens)[0]).sum();
    let n_vis = tape.shape(visible.encoded)[0];
    let n_box = boxes
        .embeddings
        .map(|e| tape.shape(e)[0])
        .unwrap_or(0);
    let n_sky = tape.shape(aux.sky)[0];
    let n_aff = tape.shape(aux.affine)[0];

    let mut parts: Vec<TensorRef> = images.iter().map(|b| b.tokens).collect();
    if n_vis > 0 {
        parts.push(visible.encoded);
    }
    if let Some(be) = boxes.embeddings {
        parts.push(be);
    }
    parts.push(aux.sky);
    parts.push(aux.affine);
    let seq = tape.concat(&parts, 0);
    debug_assert_eq!(
        tape.shape(seq)[0],
        n_img + n_vis + n_box + n_sky + n_aff
    );

    let y = net.transformer(tape, bind, seq, mask);

    let img_y = tape.slice(y, 0, 0, n_img);
    let scene_y = if n_vis > 0 {
        Some(tape.slice(y, 0, n_img, n_img + n_vis))
    } else {
        None
    };
    let sky_y = tape.slice(y, 0, n_img + n_vis + n_box, n_img + n_vis + n_box + n_sky);
    let aff_y = tape.slice(
        y,
        0,
        n_img + n_vis + n_box + n_sky,
        n_img + n_vis + n_box + n_sky + n_aff,
    );

    // scene-token head: residual feature + bounded position delta
    let (refined_features, refined_positions_local) = match scene_y {
        Some(sy) => {
            let h = nn::mlp2(tape, ps, bind, sy, "update_net.head_scene");
            let df = tape.slice(h, 1, 0, d);
            let dp_raw = tape.slice(h, 1, d, d + 3);
            let dp = tape.tanh(dp_raw);
            let dp = tape.affine(dp, T::from_f64(cfg.pos_delta_max), T::ZERO);
            (
                tape.add(visible.features, df),
                tape.add(visible.positions_local, dp),
            )
        }
        None => (
            tape.constant(vec![0, d], vec![]),
            tape.constant(vec![0, 3], vec![]),
        ),
    };

    // image head: one new token per patch along its central ray
    let h = nn::mlp2(tape, ps, bind, img_y, "update_net.head_image");
    let feat_res = tape.slice(h, 1, 0, d);
    let new_features = tape.add(img_y, feat_res);
    let dist_raw = tape.slice(h, 1, d, d + 1);
    let dist = tape.softplus(dist_raw);
    let dist3 = tape.concat(&[dist, dist, dist], 1);
    let mut dirs = Vec::with_capacity(n_img * 3);
    let mut origins = Vec::with_capacity(n_img * 3);
    for b in images {
        for (o, dir) in b.patch_origins_local.iter().zip(&b.patch_dirs_local) {
            origins.extend(o.iter().map(|&v| T::from_f64(v)));
            dirs.extend(dir.iter().map(|&v| T::from_f64(v)));
        }
    }
    let dirs_t = tape.constant(vec![n_img, 3], dirs);
    let origins_t = tape.constant(vec![n_img, 3], origins);
    let offset = tape.mul(dist3, dirs_t);
    let new_positions_local = tape.add(origins_t, offset);

    UpdateOutput {
        refined_features,
        refined_positions_local,
        new_features,
        new_positions_local,
        aux: AuxTokens {
            sky: sky_y,
            affine: aff_y,
        },
    }
}

/// Differentiable world->local map for an (N,3) position tensor.
pub fn positions_to_local<T: Scalar>(
    tape: &Tape<T>,
    positions_world: TensorRef,
    local_from_world: &Matrix4<f64>,
) -> TensorRef {
    affine_positions(tape, positions_world, local_from_world)
}

pub fn positions_to_world<T: Scalar>(
    tape: &Tape<T>,
    positions_local: TensorRef,
    local_from_world: &Matrix4<f64>,
) -> TensorRef {
    affine_positions(tape, positions_local, &rigid_inverse(local_from_world))
}

fn affine_positions<T: Scalar>(tape: &Tape<T>, pos: TensorRef, m: &Matrix4<f64>) -> TensorRef {
    let mut rt = Vec::with_capacity(9);
    for c in 0..3 {
        for r in 0..3 {
            rt.push(T::from_f64(m[(c, r)])); // R^T, row-major
        }
    }
    let rt_t = tape.constant(vec![3, 3], rt);
    let t_t = tape.constant(
        vec![3],
        vec![
            T::from_f64(m[(0, 3)]),
            T::from_f64(m[(1, 3)]),
            T::from_f64(m[(2, 3)]),
        ],
    );
    let rotated = tape.matmul(pos, rt_t);
    tape.add(rotated, t_t)
}

/// Where a live token's differentiable state lives on the training tape.
#[derive(Clone, Copy)]
pub struct TrackedToken {
    pub pos: (TensorRef, usize),
    pub feat: (TensorRef, usize),
}

pub struct SequenceState {
    pub aux: AuxTokens,
    pub handles: HashMap<u64, TrackedToken>,
    pub new_token_total: usize,
}

pub struct RunStats {
    pub new_token_total: usize,
    pub frames: usize,
}

fn frame_cameras(frame: &FrameObservation) -> (Vec<crate::geometry::CameraPose>, Vec<crate::geometry::Intrinsics>) {
    (
        frame.cameras.iter().map(|c| c.pose.clone()).collect(),
        frame.cameras.iter().map(|c| c.intrinsics).collect(),
    )
}

/// One full recurrent pass with gradients: per frame, select visible
/// tokens, localize, update, re-globalize, merge. Token state is threaded
/// through the tape so losses at the end backpropagate across steps;
/// `unroll_window` (in frames) truncates that flow by detaching state at
/// window boundaries.
pub fn run_sequence_training<T: Scalar>(
    net: &UpdateNet<T>,
    tape: &Tape<T>,
    bind: &mut ParamBindings,
    frames: &[&FrameObservation],
    store: &mut SceneTokenStore,
    unroll_window: Option<usize>,
) -> SequenceState {
    let cfg = &net.cfg;
    let mut aux = encoders::initial_aux_tokens(tape, &net.params, bind);
    let mut handles: HashMap<u64, TrackedToken> = HashMap::new();
    let mut new_token_total = 0usize;

    for (step, frame) in frames.iter().enumerate() {
        if let Some(w) = unroll_window {
            if step > 0 && step % w == 0 {
                for h in handles.values_mut() {
                    h.pos = (tape.detach(h.pos.0), h.pos.1);
                    h.feat = (tape.detach(h.feat.0), h.feat.1);
                }
                aux = AuxTokens {
                    sky: tape.detach(aux.sky),
                    affine: tape.detach(aux.affine),
                };
            }
        }
        let (poses, ks) = frame_cameras(frame);
        let local_from_world = poses[0].camera_from_world();
        let visible_tokens = store.select_visible(&poses, &ks, cfg.k_budget);
        let visible = gather_visible(net, tape, bind, &visible_tokens, &handles, &local_from_world);
        let images: Vec<ImageTokenBatch> = (0..frame.cameras.len())
            .map(|ci| {
                encoders::encode_image(tape, &net.params, bind, cfg, frame, ci, &local_from_world)
            })
            .collect();
        let boxes = encoders::encode_boxes(
            tape,
            &net.params,
            bind,
            cfg,
            &frame.boxes,
            &poses[0].center(),
            &local_from_world,
        );
        let out = update_step(net, tape, bind, &images, &visible, &boxes, aux, None);
        aux = AuxTokens {
            sky: out.aux.sky,
            affine: out.aux.affine,
        };
        let refined_world = positions_to_world(tape, out.refined_positions_local, &local_from_world);
        let new_world = positions_to_world(tape, out.new_positions_local, &local_from_world);
        let n_new = tape.shape(new_world)[0];
        new_token_total += n_new;

        // write concrete values into the store; keep tape handles threaded
        let refined = tokens_from_tensors(
            tape,
            refined_world,
            out.refined_features,
            &visible.ids,
            &visible_tokens,
        );
        let new_ids: Vec<u64> = store.reserve_ids(n_new).collect();
        let news = new_tokens_from_tensors(tape, new_world, out.new_features, &new_ids, frame);
        store
            .merge(&visible.ids, refined, news)
            .expect("merge contract upheld by construction");
        for (row, id) in visible.ids.iter().enumerate() {
            handles.insert(
                *id,
                TrackedToken {
                    pos: (refined_world, row),
                    feat: (out.refined_features, row),
                },
            );
        }
        for (row, id) in new_ids.iter().enumerate() {
            handles.insert(
                *id,
                TrackedToken {
                    pos: (new_world, row),
                    feat: (out.new_features, row),
                },
            );
        }
    }
    SequenceState {
        aux,
        handles,
        new_token_total,
    }
}

fn gather_visible<T: Scalar>(
    net: &UpdateNet<T>,
    tape: &Tape<T>,
    bind: &mut ParamBindings,
    visible_tokens: &[SceneToken],
    handles: &HashMap<u64, TrackedToken>,
    local_from_world: &Matrix4<f64>,
) -> VisibleTokensInput {
    let cfg = &net.cfg;
    let ids: Vec<u64> = visible_tokens.iter().map(|t| t.id).collect();
    let birth_times: Vec<f64> = visible_tokens.iter().map(|t| t.birth_time as f64).collect();
    let (features, positions_world) = if ids.is_empty() {
        (
            tape.constant(vec![0, cfg.dim], vec![]),
            tape.constant(vec![0, 3], vec![]),
        )
    } else if handles.is_empty() {
        // inference path: constants straight from the store
        let mut f = Vec::with_capacity(ids.len() * cfg.dim);
        let mut p = Vec::with_capacity(ids.len() * 3);
        for t in visible_tokens {
            f.extend(t.feature.iter().map(|&v| T::from_f32(v)));
            p.extend(t.position.iter().map(|&v| T::from_f32(v)));
        }
        (
            tape.constant(vec![ids.len(), cfg.dim], f),
            tape.constant(vec![ids.len(), 3], p),
        )
    } else {
        let feat_sources: Vec<(TensorRef, usize)> =
            ids.iter().map(|id| handles[id].feat).collect();
        let pos_sources: Vec<(TensorRef, usize)> = ids.iter().map(|id| handles[id].pos).collect();
        (tape.gather_rows(&feat_sources), tape.gather_rows(&pos_sources))
    };
    let positions_local = positions_to_local(tape, positions_world, local_from_world);
    let encoded = encoders::encode_scene_tokens(
        tape,
        &net.params,
        bind,
        cfg,
        features,
        positions_local,
        &birth_times,
    );
    VisibleTokensInput {
        ids,
        birth_times,
        features,
        positions_local,
        encoded,
    }
}

fn tokens_from_tensors<T: Scalar>(
    tape: &Tape<T>,
    positions: TensorRef,
    features: TensorRef,
    ids: &[u64],
    originals: &[SceneToken],
) -> Vec<SceneToken> {
    let pd = tape.data(positions);
    let fd = tape.data(features);
    let d = if ids.is_empty() { 0 } else { fd.len() / ids.len() };
    ids.iter()
        .enumerate()
        .map(|(i, &id)| SceneToken {
            id,
            position: [
                pd[i * 3].to_f32(),
                pd[i * 3 + 1].to_f32(),
                pd[i * 3 + 2].to_f32(),
            ],
            feature: fd[i * d..(i + 1) * d].iter().map(|v| v.to_f32()).collect(),
            birth_time: originals[i].birth_time,
            birth_frame: originals[i].birth_frame,
        })
        .collect()
}

fn new_tokens_from_tensors<T: Scalar>(
    tape: &Tape<T>,
    positions: TensorRef,
    features: TensorRef,
    ids: &[u64],
    frame: &FrameObservation,
) -> Vec<SceneToken> {
    let pd = tape.data(positions);
    let fd = tape.data(features);
    let d = if ids.is_empty() { 0 } else { fd.len() / ids.len() };
    ids.iter()
        .enumerate()
        .map(|(i, &id)| SceneToken {
            id,
            position: [
                pd[i * 3].to_f32(),
                pd[i * 3 + 1].to_f32(),
                pd[i * 3 + 2].to_f32(),
            ],
            feature: fd[i * d..(i + 1) * d].iter().map(|v| v.to_f32()).collect(),
            birth_time: frame.timestamp as f32,
            birth_frame: frame.frame_index,
        })
        .collect()
}

/// Gradient-free recurrent pass with bounded memory: each frame runs on a
/// fresh no-grad tape, token state lives in the store, and the auxiliary
/// tokens are threaded as plain values. With `unfiltered` every stored
/// token enters the update (the quadratic baseline).
pub fn run_sequence_inference<T: Scalar>(
    net: &UpdateNet<T>,
    frames: &[&FrameObservation],
    store: &mut SceneTokenStore,
    aux_values: &mut (Vec<T>, Vec<T>),
    unfiltered: bool,
) -> RunStats {
    let cfg = &net.cfg;
    let mut new_token_total = 0usize;
    for frame in frames {
        let tape: Tape<T> = Tape::no_grad();
        let mut bind = ParamBindings::default();
        let (poses, ks) = frame_cameras(frame);
        let local_from_world = poses[0].camera_from_world();
        let visible_tokens = if unfiltered {
            store.tokens().to_vec()
        } else {
            store.select_visible(&poses, &ks, cfg.k_budget)
        };
        let visible = gather_visible(
            net,
            &tape,
            &mut bind,
            &visible_tokens,
            &HashMap::new(),
            &local_from_world,
        );
        let images: Vec<ImageTokenBatch> = (0..frame.cameras.len())
            .map(|ci| {
                encoders::encode_image(&tape, &net.params, &mut bind, cfg, frame, ci, &local_from_world)
            })
            .collect();
        let boxes = encoders::encode_boxes(
            &tape,
            &net.params,
            &mut bind,
            cfg,
            &frame.boxes,
            &poses[0].center(),
            &local_from_world,
        );
        let aux = AuxTokens {
            sky: tape.constant(vec![cfg.n_sky, cfg.dim], aux_values.0.clone()),
            affine: tape.constant(vec![cfg.num_cameras, cfg.dim], aux_values.1.clone()),
        };
        let out = update_step(net, &tape, &mut bind, &images, &visible, &boxes, aux, None);
        let refined_world = positions_to_world(&tape, out.refined_positions_local, &local_from_world);
        let new_world = positions_to_world(&tape, out.new_positions_local, &local_from_world);
        let n_new = tape.shape(new_world)[0];
        new_token_total += n_new;
        let refined = tokens_from_tensors(
            &tape,
            refined_world,
            out.refined_features,
            &visible.ids,
            &visible_tokens,
        );
        let new_ids: Vec<u64> = store.reserve_ids(n_new).collect();
        let news = new_tokens_from_tensors(&tape, new_world, out.new_features, &new_ids, frame);
        store
            .merge(&visible.ids, refined, news)
            .expect("merge contract upheld by construction");
        aux_values.0 = tape.to_vec(out.aux.sky);
        aux_values.1 = tape.to_vec(out.aux.affine);
    }
    RunStats {
        new_token_total,
        frames: frames.len(),
    }
}

impl<T: Scalar> UpdateNet<T> {
    pub fn initial_aux_values(&self) -> (Vec<T>, Vec<T>) {
        (
            self.params.get("aux.sky").unwrap().data.clone(),
            self.params.get("aux.affine").unwrap().data.clone(),
        )
    }
}
